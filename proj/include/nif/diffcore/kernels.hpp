#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nif/diffcore/tape.hpp"

namespace nif::dc {

// All kernels read inputs as matrices (rows x last axis) and record a node on
// the inputs' tape. Shape errors raise ShapeMismatch.

template <typename T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b);

// x * w + bias, with bias broadcast over rows.
template <typename T>
BasicVar<T> linear(BasicVar<T> x, BasicVar<T> w, BasicVar<T> bias);

template <typename T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <typename T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b);
template <typename T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b);
template <typename T>
BasicVar<T> scale(BasicVar<T> a, T factor);

// a + row, where row has a single row and a.cols() columns.
template <typename T>
BasicVar<T> add_row(BasicVar<T> a, BasicVar<T> row);

template <typename T>
BasicVar<T> relu(BasicVar<T> a);

template <typename T>
BasicVar<T> softmax(BasicVar<T> a);

template <typename T>
BasicVar<T> layer_norm(BasicVar<T> x, BasicVar<T> gain, BasicVar<T> bias, T eps = T(1e-5));

// out.row(i) = x.row(index[i]); gradients scatter-add back.
template <typename T>
BasicVar<T> gather_rows(BasicVar<T> x, std::span<const int> index);

// Rows of `table` selected by token ids; ids must lie in [0, table rows).
template <typename T>
BasicVar<T> embedding_lookup(BasicVar<T> table, std::span<const int> ids);

template <typename T>
BasicVar<T> concat(BasicVar<T> a, BasicVar<T> b);

// Mean of all elements, as a scalar.
template <typename T>
BasicVar<T> mean(BasicVar<T> a);

// Mean squared difference over all elements, as a scalar.
template <typename T>
BasicVar<T> mse(BasicVar<T> a, BasicVar<T> b);

// Mean over rows of -log softmax(logits)[row, target[row]].
template <typename T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const int> targets);

// Per-row sum over the last axis: [m, n] -> [m, 1].
template <typename T>
BasicVar<T> sum_rows(BasicVar<T> a);

struct Segment {
  int offset = 0;
  int length = 0;
};

/// Multi-head scaled dot-product attention over packed variable-length
/// sequences. Sequence s uses query rows queries[s] and key/value rows
/// keys[s]. With `causal`, query i of a sequence sees keys 0..i only.
struct AttentionLayout {
  std::vector<Segment> queries;
  std::vector<Segment> keys;
  int heads = 1;
  bool causal = false;
};

template <typename T>
BasicVar<T> attention(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, const AttentionLayout& layout);

}  // namespace nif::dc
