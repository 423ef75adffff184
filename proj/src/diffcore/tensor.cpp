#include "nif/diffcore/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "nif/errors.hpp"

namespace nif::dc {

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw ShapeMismatch("tensor shape must have at least one axis");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeMismatch("tensor dimensions must be positive");
  }
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(std::vector<std::size_t> shape, T fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(std::vector<std::size_t> shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != element_count(shape_)) {
    throw ShapeMismatch("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str());
  }
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  return shape_.empty() ? 0 : data_.size() / shape_.back();
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  return shape_.empty() ? 0 : shape_.back();
}

template <typename T>
void BasicTensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
std::string BasicTensor<T>::shape_str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace nif::dc
