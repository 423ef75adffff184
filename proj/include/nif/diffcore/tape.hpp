#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "nif/diffcore/tensor.hpp"

namespace nif::dc {

template <typename T>
class BasicTape;

// Handle to a value recorded on a tape.
template <typename T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  int id = -1;

  const BasicTensor<T>& value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode recording. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward walks it in
/// reverse, visiting each node once. A tape constructed with `record=false`
/// still evaluates kernels but keeps no backward closures.
template <typename T>
class BasicTape {
 public:
  using Tensor = BasicTensor<T>;
  using Var = BasicVar<T>;
  // Called during backward with the node's own id; propagates its gradient
  // into the gradients of its inputs.
  using BackwardFn = std::function<void(BasicTape&, int)>;

  explicit BasicTape(bool record = true) : record_(record) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool recording() const { return record_; }
  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value);
  // Constant that aliases `value`, which must outlive the tape.
  Var constant_ref(const Tensor& value);
  Var param(BasicParameter<T>& p);

  const Tensor& value(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node (allocated on first use); parameter leaves
  // accumulate straight into BasicParameter::grad.
  Tensor& grad(int id);
  // Null when the node does not require a gradient.
  Tensor* grad_if_needed(Var v) { return requires_grad(v.id) ? &grad(v.id) : nullptr; }

  // Kernel entry point. `fn` is stored only when recording and some input
  // requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws NotScalar for a
  /// non-scalar loss, NoTape when the tape does not record or was already
  /// consumed by a backward pass without `retain`.
  void backward(Var loss, bool retain = false);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    BasicParameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool record_ = true;
  bool consumed_ = false;
  bool check_finite_ = false;
};

template <typename T>
const BasicTensor<T>& BasicVar<T>::value() const {
  return tape->value(id);
}

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

}  // namespace nif::dc
