#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace nif::dc {

// Cache-line aligned storage. Vectorized reductions split their loops by
// address alignment, so a fixed alignment keeps results run-to-run identical.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

// Dense row-major tensor. Kernels view it as a matrix whose columns are the
// last axis and whose rows are everything before it.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<std::size_t> shape, T fill = T(0));
  BasicTensor(std::vector<std::size_t> shape, std::vector<T> data);

  static BasicTensor scalar(T v) { return BasicTensor({1}, std::vector<T>{v}); }
  static BasicTensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return BasicTensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool empty() const { return data_.empty(); }
  bool same_shape(const BasicTensor& o) const { return shape_ == o.shape_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  void fill(T v);
  bool all_finite() const;
  std::string shape_str() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

using Tensor = BasicTensor<float>;

// Trainable tensor plus its gradient accumulator.
template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  BasicParameter() = default;
  BasicParameter(std::string n, BasicTensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad = BasicTensor<T>(value.shape()); }
};

using Parameter = BasicParameter<float>;

}  // namespace nif::dc
