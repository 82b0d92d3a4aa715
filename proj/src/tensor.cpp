#include "rowquant/tensor.hpp"

#include <cmath>
#include <sstream>

namespace rowquant {

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

int64_t Tensor::shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    RQ_CHECK(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  RQ_CHECK(shape_numel(shape_) == static_cast<int64_t>(data_.size()),
           "tensor data length does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

void Tensor::check_finite(const char* where) const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      fail(std::string("non-finite value encountered in ") + where);
    }
  }
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

void Tensor::add_(const Tensor& o) {
  RQ_CHECK(same_shape(o), "shape mismatch in add_: " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
}

void Tensor::axpy_(double a, const Tensor& o) {
  RQ_CHECK(same_shape(o), "shape mismatch in axpy_");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

}  // namespace rowquant
