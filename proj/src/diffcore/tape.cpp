#include "nif/diffcore/tape.hpp"

#include "nif/errors.hpp"

namespace nif::dc {

template <typename T>
typename BasicTape<T>::Var BasicTape<T>::constant(Tensor value) {
  if (check_finite_ && !value.all_finite()) throw NonFinite("non-finite constant");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
typename BasicTape<T>::Var BasicTape<T>::constant_ref(const Tensor& value) {
  Node n;
  n.external = &value;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
typename BasicTape<T>::Var BasicTape<T>::param(BasicParameter<T>& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = record_;
  if (record_ && !p.grad.same_shape(p.value)) p.zero_grad();
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
BasicTensor<T>& BasicTape<T>::grad(int id) {
  Node& n = nodes_[id];
  if (n.param) return n.param->grad;
  if (n.grad.empty()) n.grad = Tensor(value(id).shape());
  return n.grad;
}

template <typename T>
typename BasicTape<T>::Var BasicTape<T>::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  if (check_finite_ && !value.all_finite()) throw NonFinite("kernel produced a non-finite value");
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& in : inputs) {
      if (in.tape != this) throw NoTape("kernel input recorded on a different tape");
      if (nodes_[in.id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
void BasicTape<T>::backward(Var loss, bool retain) {
  if (loss.tape != this) throw NoTape("loss was not recorded on this tape");
  if (!record_) throw NoTape("tape is not recording gradients");
  if (consumed_) throw NoTape("tape already consumed by a backward pass");
  if (value(loss.id).size() != 1) {
    throw NotScalar("backward needs a scalar loss, got shape " + value(loss.id).shape_str());
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] += T(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.empty()) continue;  // not reached from the loss
    n.backward(*this, id);
  }
  consumed_ = !retain;
  for (Node& n : nodes_) n.grad = Tensor();
}

template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace nif::dc
