#include "nif/diffcore/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "nif/errors.hpp"

namespace nif::dc {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<Mat<T>> as_mat(BasicTensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
Eigen::Map<const Mat<T>> as_mat(const BasicTensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
BasicTape<T>& same_tape(BasicVar<T> a, BasicVar<T> b) {
  if (!a.valid() || !b.valid()) throw NoTape("kernel input is not recorded on a tape");
  if (a.tape != b.tape) throw NoTape("kernel inputs recorded on different tapes");
  return *a.tape;
}

template <typename T>
BasicTape<T>& tape_of(BasicVar<T> a) {
  if (!a.valid()) throw NoTape("kernel input is not recorded on a tape");
  return *a.tape;
}

[[noreturn]] void shape_error(const std::string& op, const std::string& lhs, const std::string& rhs) {
  throw ShapeMismatch(op + ": incompatible shapes " + lhs + " and " + rhs);
}

template <typename T>
void require_same_shape(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!a.same_shape(b)) shape_error(op, a.shape_str(), b.shape_str());
}

template <typename T>
void require_row_vector(const char* op, const BasicTensor<T>& m, const BasicTensor<T>& row) {
  if (row.size() != m.cols()) shape_error(op, m.shape_str(), row.shape_str());
}

// Shape of a per-row output keeping all leading axes.
std::vector<std::size_t> with_last(const std::vector<std::size_t>& shape, std::size_t last) {
  std::vector<std::size_t> s = shape;
  s.back() = last;
  return s;
}

}  // namespace

template <typename T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av.shape_str(), bv.shape_str());
  BasicTensor<T> out = BasicTensor<T>::matrix(av.rows(), bv.cols());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (auto* ga = t.grad_if_needed(a)) as_mat(*ga).noalias() += as_mat(g) * as_mat(t.value(b.id)).transpose();
    if (auto* gb = t.grad_if_needed(b)) as_mat(*gb).noalias() += as_mat(t.value(a.id)).transpose() * as_mat(g);
  });
}

template <typename T>
BasicVar<T> linear(BasicVar<T> x, BasicVar<T> w, BasicVar<T> bias) {
  auto& tape = same_tape(x, w);
  same_tape(x, bias);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  if (xv.cols() != wv.rows()) shape_error("linear", xv.shape_str(), wv.shape_str());
  if (bv.size() != wv.cols()) shape_error("linear bias", wv.shape_str(), bv.shape_str());
  BasicTensor<T> out = BasicTensor<T>::matrix(xv.rows(), wv.cols());
  auto om = as_mat(out);
  om.noalias() = as_mat(xv) * as_mat(wv);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> brow(bv.data(), static_cast<Eigen::Index>(bv.size()));
  om.rowwise() += brow;
  return tape.record(std::move(out), {x, w, bias}, [x, w, bias](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (auto* gx = t.grad_if_needed(x)) as_mat(*gx).noalias() += as_mat(g) * as_mat(t.value(w.id)).transpose();
    if (auto* gw = t.grad_if_needed(w)) as_mat(*gw).noalias() += as_mat(t.value(x.id)).transpose() * as_mat(g);
    if (auto* gb = t.grad_if_needed(bias)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gbrow(gb->data(), static_cast<Eigen::Index>(gb->size()));
      gbrow += as_mat(g).colwise().sum();
    }
  });
}

template <typename T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    for (BasicVar<T> in : {a, b}) {
      if (auto* gi = t.grad_if_needed(in)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      }
    }
  });
}

template <typename T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (auto* ga = t.grad_if_needed(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gb = t.grad_if_needed(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

template <typename T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (auto* ga = t.grad_if_needed(a)) {
      const auto& bv = t.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = t.grad_if_needed(b)) {
      const auto& av = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
BasicVar<T> scale(BasicVar<T> a, T factor) {
  auto& tape = tape_of(a);
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return tape.record(std::move(out), {a}, [a, factor](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (auto* ga = t.grad_if_needed(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
    }
  });
}

template <typename T>
BasicVar<T> add_row(BasicVar<T> a, BasicVar<T> row) {
  auto& tape = same_tape(a, row);
  require_row_vector("add_row", a.value(), row.value());
  BasicTensor<T> out = a.value();
  const auto& rv = row.value();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) += rv[c];
  }
  return tape.record(std::move(out), {a, row}, [a, row](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (auto* ga = t.grad_if_needed(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gr = t.grad_if_needed(row)) {
      const std::size_t n = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) (*gr)[c] += g.at(r, c);
      }
    }
  });
}

template <typename T>
BasicVar<T> relu(BasicVar<T> a) {
  auto& tape = tape_of(a);
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return tape.record(std::move(out), {a}, [a](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (auto* ga = t.grad_if_needed(a)) {
      const auto& av = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] > T(0)) (*ga)[i] += g[i];
      }
    }
  });
}

template <typename T>
BasicVar<T> softmax(BasicVar<T> a) {
  auto& tape = tape_of(a);
  BasicTensor<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    double sum = 0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : row) v = static_cast<T>(v / sum);
  }
  return tape.record(std::move(out), {a}, [a](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto* ga = t.grad_if_needed(a);
    if (!ga) return;
    const auto& y = t.value(self);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      double dot = 0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += static_cast<double>(gr[c]) * yr[c];
      auto out = ga->row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += static_cast<T>(yr[c] * (gr[c] - dot));
    }
  });
}

template <typename T>
BasicVar<T> layer_norm(BasicVar<T> x, BasicVar<T> gain, BasicVar<T> bias, T eps) {
  auto& tape = same_tape(x, gain);
  same_tape(x, bias);
  const auto& xv = x.value();
  require_row_vector("layer_norm gain", xv, gain.value());
  require_row_vector("layer_norm bias", xv, bias.value());
  const std::size_t rows = xv.rows(), n = xv.cols();
  BasicTensor<T> out(xv.shape());
  auto stats = std::make_shared<std::vector<T>>(2 * rows);  // mean, inverse stddev
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = xv.row(r);
    double mu = 0;
    for (T v : xr) mu += v;
    mu /= n;
    double var = 0;
    for (T v : xr) var += (v - mu) * (v - mu);
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * r] = static_cast<T>(mu);
    (*stats)[2 * r + 1] = static_cast<T>(rstd);
    auto orow = out.row(r);
    for (std::size_t c = 0; c < n; ++c) orow[c] = static_cast<T>((xr[c] - mu) * rstd * gv[c] + bv[c]);
  }
  return tape.record(std::move(out), {x, gain, bias}, [x, gain, bias, stats](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x.id);
    const auto& gv = t.value(gain.id);
    auto* gx = t.grad_if_needed(x);
    auto* gg = t.grad_if_needed(gain);
    auto* gb = t.grad_if_needed(bias);
    const std::size_t n = xv.cols();
    std::vector<double> xhat(n), dxhat(n);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      const double mu = (*stats)[2 * r], rstd = (*stats)[2 * r + 1];
      auto xr = xv.row(r);
      auto gr = g.row(r);
      double mean_d = 0, mean_dx = 0;
      for (std::size_t c = 0; c < n; ++c) {
        xhat[c] = (xr[c] - mu) * rstd;
        dxhat[c] = static_cast<double>(gr[c]) * gv[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xhat[c];
        if (gg) (*gg)[c] += static_cast<T>(gr[c] * xhat[c]);
        if (gb) (*gb)[c] += gr[c];
      }
      if (!gx) continue;
      mean_d /= n;
      mean_dx /= n;
      auto out = gx->row(r);
      for (std::size_t c = 0; c < n; ++c) out[c] += static_cast<T>(rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx));
    }
  });
}

template <typename T>
BasicVar<T> gather_rows(BasicVar<T> x, std::span<const int> index) {
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  if (index.empty()) throw ShapeMismatch("gather_rows: empty index");
  const std::size_t n = xv.cols();
  BasicTensor<T> out = BasicTensor<T>::matrix(index.size(), n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= xv.rows()) {
      throw ShapeMismatch("gather_rows: row " + std::to_string(index[i]) + " outside " + xv.shape_str());
    }
    std::copy_n(xv.data() + index[i] * n, n, out.data() + i * n);
  }
  std::vector<int> idx(index.begin(), index.end());
  return tape.record(std::move(out), {x}, [x, idx = std::move(idx)](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto* gx = t.grad_if_needed(x);
    if (!gx) return;
    const std::size_t n = g.cols();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = gx->data() + idx[i] * n;
      const T* src = g.data() + i * n;
      for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
BasicVar<T> embedding_lookup(BasicVar<T> table, std::span<const int> ids) {
  const std::size_t vocab = table.value().rows();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexOutOfVocab("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  return gather_rows(table, ids);
}

template <typename T>
BasicVar<T> concat(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows()) shape_error("concat", av.shape_str(), bv.shape_str());
  const std::size_t na = av.cols(), nb = bv.cols();
  BasicTensor<T> out(with_last(av.shape(), na + nb));
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.data() + r * na, na, out.data() + r * (na + nb));
    std::copy_n(bv.data() + r * nb, nb, out.data() + r * (na + nb) + na);
  }
  return tape.record(std::move(out), {a, b}, [a, b, na, nb](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto* ga = t.grad_if_needed(a);
    auto* gb = t.grad_if_needed(b);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const T* src = g.data() + r * (na + nb);
      if (ga) {
        T* dst = ga->data() + r * na;
        for (std::size_t c = 0; c < na; ++c) dst[c] += src[c];
      }
      if (gb) {
        T* dst = gb->data() + r * nb;
        for (std::size_t c = 0; c < nb; ++c) dst[c] += src[na + c];
      }
    }
  });
}

template <typename T>
BasicVar<T> mean(BasicVar<T> a) {
  auto& tape = tape_of(a);
  const auto& av = a.value();
  double s = 0;
  for (T v : av.values()) s += v;
  const std::size_t n = av.size();
  return tape.record(BasicTensor<T>::scalar(static_cast<T>(s / n)), {a}, [a, n](BasicTape<T>& t, int self) {
    const T g = t.grad(self)[0] / static_cast<T>(n);
    if (auto* ga = t.grad_if_needed(a)) {
      for (auto& v : ga->values()) v += g;
    }
  });
}

template <typename T>
BasicVar<T> mse(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = same_tape(a, b);
  require_same_shape("mse", a.value(), b.value());
  const auto& av = a.value();
  const auto& bv = b.value();
  double s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    s += d * d;
  }
  const std::size_t n = av.size();
  return tape.record(BasicTensor<T>::scalar(static_cast<T>(s / n)), {a, b}, [a, b, n](BasicTape<T>& t, int self) {
    const T g = t.grad(self)[0] * T(2) / static_cast<T>(n);
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    auto* ga = t.grad_if_needed(a);
    auto* gb = t.grad_if_needed(b);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = (av[i] - bv[i]) * g;
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

template <typename T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const int> targets) {
  auto& tape = tape_of(logits);
  const auto& lv = logits.value();
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows) {
    throw ShapeMismatch("cross_entropy: " + std::to_string(targets.size()) + " targets for " + lv.shape_str());
  }
  auto lse = std::make_shared<std::vector<double>>(rows);
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw IndexOutOfVocab("cross_entropy target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0;
    for (T v : row) s += std::exp(v - mx);
    (*lse)[r] = mx + std::log(s);
    total += (*lse)[r] - row[targets[r]];
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return tape.record(BasicTensor<T>::scalar(static_cast<T>(total / rows)), {logits},
                     [logits, lse, tgt = std::move(tgt)](BasicTape<T>& t, int self) {
                       auto* gl = t.grad_if_needed(logits);
                       if (!gl) return;
                       const auto& lv = t.value(logits.id);
                       const double g = t.grad(self)[0] / static_cast<double>(lv.rows());
                       for (std::size_t r = 0; r < lv.rows(); ++r) {
                         auto row = lv.row(r);
                         auto out = gl->row(r);
                         for (std::size_t c = 0; c < row.size(); ++c) {
                           double p = std::exp(row[c] - (*lse)[r]);
                           if (static_cast<int>(c) == tgt[r]) p -= 1.0;
                           out[c] += static_cast<T>(p * g);
                         }
                       }
                     });
}

template <typename T>
BasicVar<T> sum_rows(BasicVar<T> a) {
  auto& tape = tape_of(a);
  const auto& av = a.value();
  BasicTensor<T> out(with_last(av.shape(), 1));
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0;
    for (T v : av.row(r)) s += v;
    out[r] = static_cast<T>(s);
  }
  return tape.record(std::move(out), {a}, [a](BasicTape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto* ga = t.grad_if_needed(a);
    if (!ga) return;
    for (std::size_t r = 0; r < ga->rows(); ++r) {
      for (auto& v : ga->row(r)) v += g[r];
    }
  });
}

template <typename T>
BasicVar<T> attention(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, const AttentionLayout& layout) {
  auto& tape = same_tape(q, k);
  same_tape(q, v);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d) shape_error("attention", qv.shape_str(), kv.shape_str());
  if (!kv.same_shape(vv)) shape_error("attention keys/values", kv.shape_str(), vv.shape_str());
  if (layout.heads < 1 || d % layout.heads != 0) throw ShapeMismatch("attention: width not divisible by heads");
  if (layout.queries.size() != layout.keys.size()) throw ShapeMismatch("attention: segment count mismatch");
  const std::size_t heads = layout.heads, dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Probability storage: for each sequence and head a q_len x k_len block.
  std::vector<std::size_t> prob_offset(layout.queries.size() + 1, 0);
  for (std::size_t s = 0; s < layout.queries.size(); ++s) {
    const auto& qs = layout.queries[s];
    const auto& ks = layout.keys[s];
    if (qs.offset < 0 || qs.length < 1 || static_cast<std::size_t>(qs.offset + qs.length) > qv.rows() ||
        ks.offset < 0 || ks.length < 1 || static_cast<std::size_t>(ks.offset + ks.length) > kv.rows()) {
      throw ShapeMismatch("attention: segment outside the packed rows");
    }
    if (layout.causal && ks.length < qs.length) throw ShapeMismatch("attention: causal keys shorter than queries");
    prob_offset[s + 1] = prob_offset[s] + heads * qs.length * ks.length;
  }
  auto probs = std::make_shared<std::vector<T>>(prob_offset.back(), T(0));
  BasicTensor<T> out = BasicTensor<T>::matrix(qv.rows(), d);
  std::vector<double> scores;
  for (std::size_t s = 0; s < layout.queries.size(); ++s) {
    const auto& qs = layout.queries[s];
    const auto& ks = layout.keys[s];
    scores.resize(ks.length);
    for (std::size_t h = 0; h < heads; ++h) {
      T* pblock = probs->data() + prob_offset[s] + h * qs.length * ks.length;
      for (int i = 0; i < qs.length; ++i) {
        const T* qrow = qv.data() + (qs.offset + i) * d + h * dh;
        const int visible = layout.causal ? i + 1 : ks.length;
        double mx = -1e300;
        for (int j = 0; j < visible; ++j) {
          const T* krow = kv.data() + (ks.offset + j) * d + h * dh;
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qrow[c] * krow[c];
          scores[j] = static_cast<double>(dot * inv_sqrt);
          mx = std::max(mx, scores[j]);
        }
        double sum = 0;
        for (int j = 0; j < visible; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        T* orow = out.data() + (qs.offset + i) * d + h * dh;
        T* prow = pblock + i * ks.length;
        for (int j = 0; j < visible; ++j) {
          const T p = static_cast<T>(scores[j] / sum);
          prow[j] = p;
          const T* vrow = vv.data() + (ks.offset + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vrow[c];
        }
      }
    }
  }
  return tape.record(
      std::move(out), {q, k, v},
      [q, k, v, layout, probs, prob_offset = std::move(prob_offset), heads, dh, inv_sqrt](BasicTape<T>& t, int self) {
        const auto& g = t.grad(self);
        const auto& qv = t.value(q.id);
        const auto& kv = t.value(k.id);
        const auto& vv = t.value(v.id);
        auto* gq = t.grad_if_needed(q);
        auto* gk = t.grad_if_needed(k);
        auto* gv = t.grad_if_needed(v);
        const std::size_t d = heads * dh;
        std::vector<T> dscore;
        for (std::size_t s = 0; s < layout.queries.size(); ++s) {
          const auto& qs = layout.queries[s];
          const auto& ks = layout.keys[s];
          dscore.resize(ks.length);
          for (std::size_t h = 0; h < heads; ++h) {
            const T* pblock = probs->data() + prob_offset[s] + h * qs.length * ks.length;
            for (int i = 0; i < qs.length; ++i) {
              const int visible = layout.causal ? i + 1 : ks.length;
              const T* prow = pblock + i * ks.length;
              const T* grow = g.data() + (qs.offset + i) * d + h * dh;
              double weighted = 0;
              for (int j = 0; j < visible; ++j) {
                const T* vrow = vv.data() + (ks.offset + j) * d + h * dh;
                T dp = 0;
                for (std::size_t c = 0; c < dh; ++c) dp += grow[c] * vrow[c];
                dscore[j] = dp;
                weighted += static_cast<double>(dp) * prow[j];
                if (gv) {
                  T* gvrow = gv->data() + (ks.offset + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvrow[c] += prow[j] * grow[c];
                }
              }
              const T* qrow = qv.data() + (qs.offset + i) * d + h * dh;
              T* gqrow = gq ? gq->data() + (qs.offset + i) * d + h * dh : nullptr;
              for (int j = 0; j < visible; ++j) {
                const T ds = static_cast<T>(prow[j] * (dscore[j] - weighted)) * inv_sqrt;
                const T* krow = kv.data() + (ks.offset + j) * d + h * dh;
                if (gqrow) {
                  for (std::size_t c = 0; c < dh; ++c) gqrow[c] += ds * krow[c];
                }
                if (gk) {
                  T* gkrow = gk->data() + (ks.offset + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkrow[c] += ds * qrow[c];
                }
              }
            }
          }
        }
      });
}

#define NIF_INSTANTIATE_KERNELS(T)                                                                 \
  template BasicVar<T> matmul(BasicVar<T>, BasicVar<T>);                                           \
  template BasicVar<T> linear(BasicVar<T>, BasicVar<T>, BasicVar<T>);                              \
  template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                              \
  template BasicVar<T> sub(BasicVar<T>, BasicVar<T>);                                              \
  template BasicVar<T> mul(BasicVar<T>, BasicVar<T>);                                              \
  template BasicVar<T> scale(BasicVar<T>, T);                                                      \
  template BasicVar<T> add_row(BasicVar<T>, BasicVar<T>);                                          \
  template BasicVar<T> relu(BasicVar<T>);                                                          \
  template BasicVar<T> softmax(BasicVar<T>);                                                       \
  template BasicVar<T> layer_norm(BasicVar<T>, BasicVar<T>, BasicVar<T>, T);                       \
  template BasicVar<T> gather_rows(BasicVar<T>, std::span<const int>);                             \
  template BasicVar<T> embedding_lookup(BasicVar<T>, std::span<const int>);                        \
  template BasicVar<T> concat(BasicVar<T>, BasicVar<T>);                                           \
  template BasicVar<T> mean(BasicVar<T>);                                                          \
  template BasicVar<T> mse(BasicVar<T>, BasicVar<T>);                                              \
  template BasicVar<T> cross_entropy(BasicVar<T>, std::span<const int>);                           \
  template BasicVar<T> sum_rows(BasicVar<T>);                                                      \
  template BasicVar<T> attention(BasicVar<T>, BasicVar<T>, BasicVar<T>, const AttentionLayout&);

NIF_INSTANTIATE_KERNELS(float)
NIF_INSTANTIATE_KERNELS(double)

}  // namespace nif::dc
