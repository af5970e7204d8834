#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace diffmap {

class Rng;

using Shape = std::vector<int>;

// Cache-line aligned allocation. Vectorized reductions peel a different
// number of leading elements depending on the address, so unaligned buffers
// would make results depend on allocation history.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 array. Feature maps use NCHW; latents are stored
// channel-first as well, so an H'xW'xD' latent grid is a [N, D', H', W'] tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape(), 0.0); }
  static Tensor randn(Shape shape, Rng& rng, double scale = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 4-D NCHW access.
  double& at(int n, int c, int h, int w) { return data_[offset4(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const { return data_[offset4(n, c, h, w)]; }

  Tensor reshaped(Shape shape) const;
  void fill(double value);

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double s);

  double sum() const;
  double max_abs() const;
  bool all_finite() const;

 private:
  std::size_t offset4(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Storage data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);
Tensor operator*(double s, Tensor a);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace diffmap
