#include "lvlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "lvlm/error.hpp"

namespace lvlm {

namespace {

// Activation buffers are large and short-lived; keep them on the heap instead of
// mmap/munmap round trips that re-fault every page on each training step.
#if defined(__GLIBC__)
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, const std::vector<T>& data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != data_.size()) {
    fail(Errc::shape, "tensor shape " + shape_to_string(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                          " elements but " + std::to_string(data_.size()) + " values were given");
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uninitialized(Shape shape) {
  BasicTensor t;
  t.data_.resize(shape_numel(shape));
  t.shape_ = std::move(shape);
  return t;
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    fail(Errc::shape, "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  BasicTensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

void require_shape(const Shape& shape, const Shape& expected, const char* what) {
  if (shape != expected) {
    fail(Errc::shape, std::string(what) + ": expected shape " + shape_to_string(expected) + ", got " +
                          shape_to_string(shape));
  }
}

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    fail(Errc::shape, std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          shape_to_string(shape));
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace lvlm
