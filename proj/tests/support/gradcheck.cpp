#include "gradcheck.hpp"

#include "nif/training.hpp"

namespace nif::testing {

namespace {

std::size_t dim(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 5) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Values bounded away from zero, for kinks such as relu.
DTensor away_from_zero(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  DTensor t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (auto& v : t.values()) {
    if (flip(rng)) v = -v;
  }
  return t;
}

// Rows with standard deviation of at least 0.25. A row whose spread is
// comparable to the finite-difference step makes the coarse central
// difference, not the kernel, the dominant error.
DTensor spread_rows(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  DTensor t(shape);
  const std::size_t n = shape.back();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    double var = 0;
    do {
      DTensor fresh = random_tensor({n}, rng, -2, 2);
      std::copy(fresh.values().begin(), fresh.values().end(), row.begin());
      double mean = 0;
      for (double v : row) mean += v;
      mean /= n;
      var = 0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= n;
    } while (var < 0.0625);
  }
  return t;
}

std::vector<DParam> params(std::initializer_list<DTensor> tensors) {
  std::vector<DParam> out;
  int i = 0;
  for (const auto& t : tensors) out.emplace_back("x" + std::to_string(i++), t);
  return out;
}

std::vector<int> random_ints(std::size_t n, int upper, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, upper - 1);
  std::vector<int> out(n);
  for (auto& v : out) v = u(rng);
  return out;
}

using Made = std::pair<std::vector<DParam>, LossFn>;

// Packed segments for `count` sequences with independent lengths.
std::vector<dc::Segment> segments(const std::vector<int>& lengths) {
  std::vector<dc::Segment> out;
  int offset = 0;
  for (int n : lengths) {
    out.push_back({offset, n});
    offset += n;
  }
  return out;
}

Made attention_case(std::mt19937_64& rng, bool causal) {
  const int heads = static_cast<int>(dim(rng, 1, 3));
  const std::size_t d = heads * dim(rng, 1, 3);
  const std::size_t seqs = dim(rng, 1, 3);
  std::vector<int> qlen, klen;
  for (std::size_t s = 0; s < seqs; ++s) {
    const int q = static_cast<int>(dim(rng, 1, 4));
    qlen.push_back(q);
    klen.push_back(causal ? q : static_cast<int>(dim(rng, 1, 4)));
  }
  dc::AttentionLayout layout{segments(qlen), segments(klen), heads, causal};
  std::size_t qrows = 0, krows = 0;
  for (int n : qlen) qrows += n;
  for (int n : klen) krows += n;
  auto w = random_tensor({qrows, d}, rng);
  return {params({random_tensor({qrows, d}, rng, -2, 2), random_tensor({krows, d}, rng, -2, 2),
                  random_tensor({krows, d}, rng)}),
          [layout, w](DTape& t, const std::vector<DVar>& x) {
            return dc::mean(dc::mul(dc::attention(x[0], x[1], x[2], layout), t.constant(w)));
          }};
}

}  // namespace

std::vector<KernelCase> kernel_cases() {
  std::vector<KernelCase> cases;
  // Elementwise and shape-preserving kernels share a random weighting.
  auto unary = [](auto kernel, bool avoid_zero) {
    return [kernel, avoid_zero](std::mt19937_64& rng) -> Made {
      std::vector<std::size_t> shape{dim(rng), dim(rng)};
      auto w = random_tensor(shape, rng);
      auto x = avoid_zero ? away_from_zero(shape, rng) : random_tensor(shape, rng, -2, 2);
      return {params({x}), [kernel, w](DTape& t, const std::vector<DVar>& v) {
                return dc::mean(dc::mul(kernel(v[0]), t.constant(w)));
              }};
    };
  };
  auto binary = [](auto kernel) {
    return [kernel](std::mt19937_64& rng) -> Made {
      std::vector<std::size_t> shape{dim(rng), dim(rng)};
      auto w = random_tensor(shape, rng);
      return {params({random_tensor(shape, rng), random_tensor(shape, rng)}),
              [kernel, w](DTape& t, const std::vector<DVar>& v) {
                return dc::mean(dc::mul(kernel(v[0], v[1]), t.constant(w)));
              }};
    };
  };

  cases.push_back({"matmul", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
                     auto w = random_tensor({m, n}, rng);
                     return {params({random_tensor({m, k}, rng), random_tensor({k, n}, rng)}),
                             [w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::matmul(v[0], v[1]), t.constant(w)));
                             }};
                   }});
  cases.push_back({"linear", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
                     auto w = random_tensor({m, n}, rng);
                     return {params({random_tensor({m, k}, rng), random_tensor({k, n}, rng),
                                     random_tensor({n}, rng)}),
                             [w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::linear(v[0], v[1], v[2]), t.constant(w)));
                             }};
                   }});
  cases.push_back({"add", binary([](DVar a, DVar b) { return dc::add(a, b); })});
  cases.push_back({"sub", binary([](DVar a, DVar b) { return dc::sub(a, b); })});
  cases.push_back({"mul", binary([](DVar a, DVar b) { return dc::mul(a, b); })});
  cases.push_back({"scale", unary([](DVar a) { return dc::scale(a, -1.7); }, false)});
  cases.push_back({"relu", unary([](DVar a) { return dc::relu(a); }, true)});
  cases.push_back({"softmax", unary([](DVar a) { return dc::softmax(a); }, false)});
  cases.push_back({"sum_rows", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), n = dim(rng);
                     auto w = random_tensor({m, 1}, rng);
                     return {params({random_tensor({m, n}, rng)}), [w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::sum_rows(v[0]), t.constant(w)));
                             }};
                   }});
  cases.push_back({"add_row", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), n = dim(rng);
                     auto w = random_tensor({m, n}, rng);
                     return {params({random_tensor({m, n}, rng), random_tensor({1, n}, rng)}),
                             [w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::add_row(v[0], v[1]), t.constant(w)));
                             }};
                   }});
  cases.push_back({"layer_norm", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), n = dim(rng, 2, 6);
                     auto w = random_tensor({m, n}, rng);
                     return {params({spread_rows({m, n}, rng), random_tensor({n}, rng), random_tensor({n}, rng)}),
                             [w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::layer_norm(v[0], v[1], v[2]), t.constant(w)));
                             }};
                   }});
  cases.push_back({"gather_rows", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), n = dim(rng), out = dim(rng, 1, 8);
                     auto index = random_ints(out, static_cast<int>(m), rng);
                     auto w = random_tensor({out, n}, rng);
                     return {params({random_tensor({m, n}, rng)}), [index, w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::gather_rows(v[0], index), t.constant(w)));
                             }};
                   }});
  cases.push_back({"embedding_lookup", [](std::mt19937_64& rng) -> Made {
                     const std::size_t vocab = dim(rng, 2, 6), n = dim(rng), out = dim(rng, 1, 8);
                     auto ids = random_ints(out, static_cast<int>(vocab), rng);
                     auto w = random_tensor({out, n}, rng);
                     return {params({random_tensor({vocab, n}, rng)}), [ids, w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::embedding_lookup(v[0], ids), t.constant(w)));
                             }};
                   }});
  cases.push_back({"concat", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), a = dim(rng), b = dim(rng);
                     auto w = random_tensor({m, a + b}, rng);
                     return {params({random_tensor({m, a}, rng), random_tensor({m, b}, rng)}),
                             [w](DTape& t, const std::vector<DVar>& v) {
                               return dc::mean(dc::mul(dc::concat(v[0], v[1]), t.constant(w)));
                             }};
                   }});
  cases.push_back({"mean", [](std::mt19937_64& rng) -> Made {
                     return {params({random_tensor({dim(rng), dim(rng)}, rng)}),
                             [](DTape&, const std::vector<DVar>& v) { return dc::mean(v[0]); }};
                   }});
  cases.push_back({"mse", [](std::mt19937_64& rng) -> Made {
                     std::vector<std::size_t> shape{dim(rng), dim(rng)};
                     return {params({random_tensor(shape, rng), random_tensor(shape, rng)}),
                             [](DTape&, const std::vector<DVar>& v) { return dc::mse(v[0], v[1]); }};
                   }});
  cases.push_back({"cross_entropy", [](std::mt19937_64& rng) -> Made {
                     const std::size_t m = dim(rng), n = dim(rng, 2, 6);
                     auto targets = random_ints(m, static_cast<int>(n), rng);
                     return {params({random_tensor({m, n}, rng, -3, 3)}),
                             [targets](DTape&, const std::vector<DVar>& v) {
                               return dc::cross_entropy(v[0], targets);
                             }};
                   }});
  cases.push_back({"attention", [](std::mt19937_64& rng) { return attention_case(rng, false); }});
  cases.push_back({"attention_causal", [](std::mt19937_64& rng) { return attention_case(rng, true); }});
  return cases;
}

double loss_total_gradient_error(std::uint64_t seed, int coordinates, double h) {
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 16;
  mc.k_ac = 1;
  mc.max_len = 3;
  TrainConfig cfg;
  cfg.model = mc;
  cfg.stop_target_gradient = false;

  SamplerConfig sc;
  sc.max_len = mc.max_len;
  Rng rng(seed);
  Batch batch;
  for (int i = 0; i < 12; ++i) batch.numerals.push_back(sample_number(sc, rng));
  batch.add_pairs = pair_within(batch.numerals, Op::kAdd, mc.max_len, rng);
  batch.mul_pairs = pair_within(batch.numerals, Op::kMul, mc.max_len, rng);
  for (std::size_t i = 0; i + 1 < batch.numerals.size(); i += 2) {
    const auto& a = batch.numerals[i];
    batch.order_pairs.emplace_back(a, i == 0 ? a : batch.numerals[i + 1]);
  }

  BasicModel<double> model(mc, seed ^ 0x9E3779B97F4A7C15ULL);
  model.zero_grad();
  {
    BasicGraph<double> g(true);
    g.tape.backward(loss_total(g, model, batch, cfg).total);
  }
  auto eval = [&] {
    BasicGraph<double> g(false);
    return loss_total(g, model, batch, cfg).total.value()[0];
  };
  auto ps = model.parameters();
  double worst = 0;
  for (int k = 0; k < coordinates; ++k) {
    auto* p = ps[rng() % ps.size()];
    const std::size_t i = rng() % p->value.size();
    const double saved = p->value[i];
    p->value[i] = saved + h;
    const double up = eval();
    p->value[i] = saved - h;
    const double down = eval();
    p->value[i] = saved;
    worst = std::max(worst, relative_error(p->grad[i], (up - down) / (2 * h)));
  }
  return worst;
}

}  // namespace nif::testing
