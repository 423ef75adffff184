#include "nif/algebra_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "nif/training.hpp"

namespace nif {

namespace {

using dc::Tensor;

struct TypeName {
  TestType type;
  const char* name;
};

constexpr TypeName kTypeNames[] = {{TestType::kIdentity, "identity"},
                                   {TestType::kClosure, "closure"},
                                   {TestType::kInvertibility, "invertibility"},
                                   {TestType::kAssociative, "associative"},
                                   {TestType::kDistributive, "distributive"},
                                   {TestType::kOrder, "order"}};

const char* type_name(TestType t) {
  for (const auto& tn : kTypeNames) {
    if (tn.type == t) return tn.name;
  }
  return "?";
}

// Running sums over the samples of one test.
struct Tally {
  double accuracy = 0;
  double exact = 0;
  double loss = 0;  // weighted by chunk size
  int n = 0;

  EvalResult result(const TestKind& test) const {
    EvalResult r;
    r.test = test;
    r.n = n;
    if (n > 0) {
      r.accuracy = accuracy / n;
      r.exact_match = exact / n;
      r.total_loss = loss / n;
    }
    return r;
  }
};

std::vector<TokenSequence> tokens_of(const std::vector<std::string>& numerals) {
  std::vector<TokenSequence> out;
  out.reserve(numerals.size());
  for (const auto& s : numerals) out.push_back(tokenize(s));
  return out;
}

// Decodes each embedding at its truth's length; per-sample accuracy and exactness.
void score(const Model& model, const Tensor& h, const std::vector<TokenSequence>& truths,
           std::vector<double>& accuracy, std::vector<bool>& exact) {
  std::vector<int> lengths;
  for (const auto& t : truths) lengths.push_back(static_cast<int>(t.size()));
  const auto decoded = model.decode_greedy(h, lengths);
  accuracy.clear();
  exact.clear();
  for (std::size_t i = 0; i < truths.size(); ++i) {
    accuracy.push_back(per_digit_accuracy(decoded[i], truths[i]));
    exact.push_back(decoded[i] == truths[i]);
  }
}

void add_single(Tally& tally, const std::vector<double>& acc, const std::vector<bool>& exact) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    tally.accuracy += acc[i];
    tally.exact += exact[i] ? 1.0 : 0.0;
  }
}

// Both bracketings are scored against the truth; exact needs both right.
void add_double(Tally& tally, const std::vector<double>& acc1, const std::vector<bool>& ex1,
                const std::vector<double>& acc2, const std::vector<bool>& ex2) {
  for (std::size_t i = 0; i < acc1.size(); ++i) {
    tally.accuracy += 0.5 * (acc1[i] + acc2[i]);
    tally.exact += ex1[i] && ex2[i] ? 1.0 : 0.0;
  }
}

std::vector<std::string> unique(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

// Reconstruction plus isomorphism loss of the pairs, on a non-recording graph.
double op_loss(const Model& model, const std::vector<std::string>& operands,
               const std::vector<std::pair<Op, std::vector<NumeralPair>>>& pair_sets) {
  Graph g(false);
  const auto ops = unique(operands);
  double loss = loss_rec<float>(g, model, ops).value()[0];
  for (const auto& [op, pairs] : pair_sets) loss += loss_iso<float>(g, model, op, pairs).value()[0];
  return loss;
}

SamplerConfig seeded(const EvalConfig& cfg, std::uint64_t seed) {
  SamplerConfig s = cfg.sampler;
  s.seed = seed;
  s.validate();
  return s;
}

// Shared driver for tests of the form decode(h_a op h_b) against a truth.
template <typename Sample>
EvalResult binary_test(const Model& model, const TestKind& test, const EvalConfig& cfg, Sample&& sample) {
  Tally tally;
  std::vector<double> acc;
  std::vector<bool> exact;
  for (int start = 0; start < cfg.n; start += static_cast<int>(cfg.batch_size)) {
    const int m = std::min<int>(static_cast<int>(cfg.batch_size), cfg.n - start);
    std::vector<std::string> lhs, rhs, truths;
    std::vector<NumeralPair> pairs;
    for (int i = 0; i < m; ++i) {
      auto [a, b, t] = sample();
      pairs.emplace_back(a, b);
      lhs.push_back(std::move(a));
      rhs.push_back(std::move(b));
      truths.push_back(std::move(t));
    }
    const Tensor out = model.apply_operator(test.op, model.embed_numerals(lhs), model.embed_numerals(rhs));
    score(model, out, tokens_of(truths), acc, exact);
    add_single(tally, acc, exact);
    std::vector<std::string> operands = lhs;
    operands.insert(operands.end(), rhs.begin(), rhs.end());
    tally.loss += m * op_loss(model, operands, {{test.op, pairs}});
    tally.n += m;
  }
  return tally.result(test);
}

struct Sampled {
  std::string a, b, truth;
};

}  // namespace

std::string TestKind::name() const {
  std::string s = type_name(type);
  if (has_op()) s += std::string("-") + op_name(op);
  return s;
}

TestKind parse_test_kind(std::string_view name) {
  for (const auto& tn : kTypeNames) {
    const std::string base = tn.name;
    TestKind k{tn.type, Op::kAdd};
    if (!k.has_op()) {
      if (name == base) return k;
      continue;
    }
    for (Op op : {Op::kAdd, Op::kMul}) {
      k.op = op;
      if (name == k.name()) return k;
    }
  }
  throw Error("unknown test: " + std::string(name));
}

std::vector<TestKind> all_tests() {
  std::vector<TestKind> out;
  for (TestType t : {TestType::kIdentity, TestType::kClosure, TestType::kInvertibility, TestType::kAssociative}) {
    for (Op op : {Op::kAdd, Op::kMul}) out.push_back({t, op});
  }
  out.push_back({TestType::kDistributive, Op::kAdd});
  out.push_back({TestType::kOrder, Op::kAdd});
  return out;
}

double per_digit_accuracy(std::span<const Token> decoded, std::span<const Token> truth) {
  if (decoded.size() != truth.size()) {
    throw LengthMismatch("decoded length " + std::to_string(decoded.size()) + " vs truth length " +
                         std::to_string(truth.size()));
  }
  if (truth.empty()) return 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += decoded[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

EvalResult run_identity(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed) {
  const SamplerConfig s = seeded(cfg, seed);
  Rng rng(s.seed);
  const std::string e = op == Op::kAdd ? "0" : "1";
  return binary_test(model, {TestType::kIdentity, op}, cfg, [&] {
    std::string a = sample_number(s, rng);
    return Sampled{a, e, a};
  });
}

EvalResult run_closure(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed) {
  const SamplerConfig s = seeded(cfg, seed);
  Rng rng(s.seed);
  return binary_test(model, {TestType::kClosure, op}, cfg, [&] {
    auto [a, b] = sample_pair(s, op, rng);
    std::string truth = oracle_decimal(op, a, b);
    return Sampled{std::move(a), std::move(b), std::move(truth)};
  });
}

EvalResult run_invertibility(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed) {
  const SamplerConfig s = seeded(cfg, seed);
  Rng rng(s.seed);
  const std::string e = op == Op::kAdd ? "0" : "1";
  return binary_test(model, {TestType::kInvertibility, op}, cfg, [&] {
    auto [a, inv] = sample_inverse_pair(s, op, rng);
    return Sampled{std::move(a), std::move(inv), e};
  });
}

EvalResult run_associative(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed) {
  const SamplerConfig s = seeded(cfg, seed);
  Rng rng(s.seed);
  const TestKind test{TestType::kAssociative, op};
  Tally tally;
  std::vector<double> acc_l, acc_r;
  std::vector<bool> ex_l, ex_r;
  for (int start = 0; start < cfg.n; start += static_cast<int>(cfg.batch_size)) {
    const int m = std::min<int>(static_cast<int>(cfg.batch_size), cfg.n - start);
    std::vector<std::string> as, bs, cs, truths;
    std::vector<NumeralPair> pairs;
    for (int i = 0; i < m; ++i) {
      NumeralTriple t = sample_associative_triple(s, op, rng);
      truths.push_back(to_decimal(oracle_apply(op, oracle_apply(op, parse(t.a), parse(t.b)), parse(t.c))));
      pairs.emplace_back(t.a, t.b);
      pairs.emplace_back(t.b, t.c);
      as.push_back(std::move(t.a));
      bs.push_back(std::move(t.b));
      cs.push_back(std::move(t.c));
    }
    const Tensor ha = model.embed_numerals(as), hb = model.embed_numerals(bs), hc = model.embed_numerals(cs);
    const Tensor left = model.apply_operator(op, model.apply_operator(op, ha, hb), hc);
    const Tensor right = model.apply_operator(op, ha, model.apply_operator(op, hb, hc));
    const auto truth_tokens = tokens_of(truths);
    score(model, left, truth_tokens, acc_l, ex_l);
    score(model, right, truth_tokens, acc_r, ex_r);
    add_double(tally, acc_l, ex_l, acc_r, ex_r);
    std::vector<std::string> operands = as;
    operands.insert(operands.end(), bs.begin(), bs.end());
    operands.insert(operands.end(), cs.begin(), cs.end());
    tally.loss += m * op_loss(model, operands, {{op, pairs}});
    tally.n += m;
  }
  return tally.result(test);
}

EvalResult run_distributive(const Model& model, const EvalConfig& cfg, std::uint64_t seed) {
  const SamplerConfig s = seeded(cfg, seed);
  Rng rng(s.seed);
  const TestKind test{TestType::kDistributive, Op::kAdd};
  Tally tally;
  std::vector<double> acc_l, acc_r;
  std::vector<bool> ex_l, ex_r;
  for (int start = 0; start < cfg.n; start += static_cast<int>(cfg.batch_size)) {
    const int m = std::min<int>(static_cast<int>(cfg.batch_size), cfg.n - start);
    std::vector<std::string> as, bs, cs, truths;
    std::vector<NumeralPair> add_pairs, mul_pairs;
    for (int i = 0; i < m; ++i) {
      NumeralTriple t = sample_distributive_triple(s, rng);
      truths.push_back(to_decimal(oracle_mul(parse(t.a), oracle_add(parse(t.b), parse(t.c)))));
      add_pairs.emplace_back(t.b, t.c);
      mul_pairs.emplace_back(t.a, t.b);
      mul_pairs.emplace_back(t.a, t.c);
      as.push_back(std::move(t.a));
      bs.push_back(std::move(t.b));
      cs.push_back(std::move(t.c));
    }
    const Tensor ha = model.embed_numerals(as), hb = model.embed_numerals(bs), hc = model.embed_numerals(cs);
    const Tensor left = model.apply_operator(Op::kMul, ha, model.apply_operator(Op::kAdd, hb, hc));
    const Tensor right = model.apply_operator(Op::kAdd, model.apply_operator(Op::kMul, ha, hb),
                                              model.apply_operator(Op::kMul, ha, hc));
    const auto truth_tokens = tokens_of(truths);
    score(model, left, truth_tokens, acc_l, ex_l);
    score(model, right, truth_tokens, acc_r, ex_r);
    add_double(tally, acc_l, ex_l, acc_r, ex_r);
    std::vector<std::string> operands = as;
    operands.insert(operands.end(), bs.begin(), bs.end());
    operands.insert(operands.end(), cs.begin(), cs.end());
    tally.loss += m * op_loss(model, operands, {{Op::kAdd, add_pairs}, {Op::kMul, mul_pairs}});
    tally.n += m;
  }
  return tally.result(test);
}

EvalResult run_order(const Model& model, const EvalConfig& cfg, std::uint64_t seed) {
  const SamplerConfig s = seeded(cfg, seed);
  Rng rng(s.seed);
  const TestKind test{TestType::kOrder, Op::kAdd};
  auto predict = [&](const Tensor& h1, const Tensor& h2) {
    const Tensor probs = model.order(h1, h2);
    std::vector<OrderRelation> out;
    for (std::size_t r = 0; r < probs.rows(); ++r) out.push_back(relation_from_probs(probs.row(r)));
    return out;
  };
  Tally tally;
  std::size_t premises = 0, consistent = 0;
  int index = 0;
  for (int start = 0; start < cfg.n; start += static_cast<int>(cfg.batch_size)) {
    const int m = std::min<int>(static_cast<int>(cfg.batch_size), cfg.n - start);
    std::vector<std::string> as, bs, cs;
    std::vector<NumeralPair> pairs;
    for (int i = 0; i < m; ++i, ++index) {
      std::string a = sample_number(s, rng);
      std::string b = a;
      // Every tenth pair compares a numeral with itself.
      if (index % 10 != 0) {
        while (b == a) b = sample_number(s, rng);
      }
      pairs.emplace_back(a, b);
      as.push_back(std::move(a));
      bs.push_back(std::move(b));
      cs.push_back(sample_number(s, rng));
    }
    const Tensor ha = model.embed_numerals(as), hb = model.embed_numerals(bs), hc = model.embed_numerals(cs);
    const auto ab = predict(ha, hb);
    for (int i = 0; i < m; ++i) {
      const auto truth = static_cast<OrderRelation>(order_class(oracle_cmp(parse(as[i]), parse(bs[i]))));
      const double hit = ab[i] == truth ? 1.0 : 0.0;
      tally.accuracy += hit;
      tally.exact += hit;
    }
    const auto bc = predict(hb, hc);
    const auto ac = predict(ha, hc);
    for (int i = 0; i < m; ++i) {
      if (ab[i] == OrderRelation::kLt && bc[i] == OrderRelation::kLt) {
        ++premises;
        consistent += ac[i] == OrderRelation::kLt;
      }
    }
    Graph g(false);
    tally.loss += m * static_cast<double>(loss_ord<float>(g, model, pairs).value()[0]);
    tally.n += m;
  }
  EvalResult r = tally.result(test);
  if (premises > 0) r.transitivity = static_cast<double>(consistent) / static_cast<double>(premises);
  return r;
}

EvalResult run_test(const Model& model, const TestKind& test, const EvalConfig& cfg, std::uint64_t seed) {
  switch (test.type) {
    case TestType::kIdentity:
      return run_identity(model, test.op, cfg, seed);
    case TestType::kClosure:
      return run_closure(model, test.op, cfg, seed);
    case TestType::kInvertibility:
      return run_invertibility(model, test.op, cfg, seed);
    case TestType::kAssociative:
      return run_associative(model, test.op, cfg, seed);
    case TestType::kDistributive:
      return run_distributive(model, cfg, seed);
    case TestType::kOrder:
      return run_order(model, cfg, seed);
  }
  throw Error("unknown test type");
}

EvalReport aggregate(std::span<const EvalResult> runs) {
  if (runs.empty()) throw Error("aggregate needs at least one run");
  EvalReport r;
  r.test = runs.front().test;
  r.n = runs.front().n;
  r.seeds = static_cast<int>(runs.size());
  auto stats = [&](auto field, double& mean, double& sd) {
    double sum = 0;
    for (const auto& x : runs) sum += field(x);
    mean = sum / runs.size();
    double ss = 0;
    for (const auto& x : runs) ss += (field(x) - mean) * (field(x) - mean);
    sd = runs.size() > 1 ? std::sqrt(ss / (runs.size() - 1)) : 0.0;
  };
  stats([](const EvalResult& x) { return x.accuracy; }, r.accuracy_mean, r.accuracy_std);
  stats([](const EvalResult& x) { return x.exact_match; }, r.exact_mean, r.exact_std);
  stats([](const EvalResult& x) { return x.total_loss; }, r.loss_mean, r.loss_std);
  double t = 0;
  int tn = 0;
  for (const auto& x : runs) {
    if (x.transitivity) {
      t += *x.transitivity;
      ++tn;
    }
  }
  if (tn > 0) r.transitivity_mean = t / tn;
  return r;
}

std::vector<EvalReport> run_all(const Model& model, std::span<const TestKind> tests, const EvalConfig& cfg,
                                std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw Error("run_all needs at least one seed");
  std::vector<EvalReport> out;
  for (const auto& test : tests) {
    std::vector<EvalResult> runs;
    for (std::uint64_t seed : seeds) runs.push_back(run_test(model, test, cfg, seed));
    out.push_back(aggregate(runs));
  }
  return out;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"test", r.test.name()},       {"n", r.n},
                      {"seeds", r.seeds},            {"accuracy_mean", r.accuracy_mean},
                      {"accuracy_std", r.accuracy_std}, {"exact_mean", r.exact_mean},
                      {"exact_std", r.exact_std},    {"loss_mean", r.loss_mean},
                      {"loss_std", r.loss_std}};
  if (r.transitivity_mean) j["transitivity_mean"] = *r.transitivity_mean;
  return j;
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.test = parse_test_kind(j.at("test").get<std::string>());
  r.n = j.at("n").get<int>();
  r.seeds = j.value("seeds", 1);
  r.accuracy_mean = j.at("accuracy_mean").get<double>();
  r.accuracy_std = j.at("accuracy_std").get<double>();
  r.exact_mean = j.at("exact_mean").get<double>();
  r.exact_std = j.at("exact_std").get<double>();
  r.loss_mean = j.at("loss_mean").get<double>();
  r.loss_std = j.at("loss_std").get<double>();
  if (j.contains("transitivity_mean")) r.transitivity_mean = j.at("transitivity_mean").get<double>();
  return r;
}

nlohmann::json reports_to_json(std::span<const EvalReport> reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  return arr;
}

std::vector<EvalReport> reports_from_json(const nlohmann::json& j) {
  std::vector<EvalReport> out;
  for (const auto& item : j) out.push_back(eval_report_from_json(item));
  return out;
}

std::string format_table(std::span<const EvalReport> reports) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %6s %18s %18s %18s\n", "Test", "n", "Accuracy", "Exact Match",
                "Total loss");
  os << line;
  for (const auto& r : reports) {
    auto cell = [](double mean, double sd, double scale) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.2f ± %.2f", mean * scale, sd * scale);
      return std::string(buf);
    };
    std::snprintf(line, sizeof line, "%-18s %6d %18s %18s %18s\n", r.test.name().c_str(), r.n,
                  cell(r.accuracy_mean, r.accuracy_std, 100).c_str(), cell(r.exact_mean, r.exact_std, 100).c_str(),
                  cell(r.loss_mean, r.loss_std, 1).c_str());
    os << line;
  }
  return os.str();
}

}  // namespace nif
