#ifndef ROWQUANT_TENSOR_HPP
#define ROWQUANT_TENSOR_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rowquant {

[[noreturn]] void fail(const std::string& msg);

#define RQ_CHECK(cond, msg)                 \
  do {                                      \
    if (!(cond)) ::rowquant::fail(msg);     \
  } while (0)

/// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_[i]; }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool defined() const { return !shape_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D accessors (row-major).
  double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double item() const {
    RQ_CHECK(numel() == 1, "Tensor::item requires a single-element tensor");
    return data_[0];
  }

  /// Throws if any element is NaN or infinite. Called at op boundaries.
  void check_finite(const char* where) const;

  void fill(double v);
  void add_(const Tensor& o);      // elementwise in-place add
  void axpy_(double a, const Tensor& o);  // this += a * o
  double max_abs() const;

  static int64_t shape_numel(const std::vector<int64_t>& shape);

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

std::string shape_str(const std::vector<int64_t>& shape);

}  // namespace rowquant

#endif  // ROWQUANT_TENSOR_HPP
