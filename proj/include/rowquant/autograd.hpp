#ifndef ROWQUANT_AUTOGRAD_HPP
#define ROWQUANT_AUTOGRAD_HPP

#include <functional>
#include <memory>
#include <vector>

#include "rowquant/tensor.hpp"

namespace rowquant {

class Var;

/// Maps the gradient of an op's output to gradients of its parents
/// (aligned with the parent list; undefined entries mean "no gradient").
/// Rules are written in terms of graph ops, so taking a gradient of a
/// gradient re-applies the same machinery.
using BackwardRule = std::function<std::vector<Var>(const Var& grad_out)>;

struct Node {
  Tensor value;
  Tensor grad;  // leaf accumulation target, filled by backward()
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardRule rule;
};

/// Shared handle to a graph node. Copying shares the node (graph semantics).
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const { return n_->value; }
  Tensor& value_mut();  // leaves only (optimizer updates)
  const std::vector<int64_t>& shape() const { return n_->value.shape(); }
  int64_t numel() const { return n_->value.numel(); }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool is_leaf() const { return n_ && n_->is_leaf; }
  const Tensor& grad() const;
  bool has_grad() const { return n_ && n_->grad.defined(); }
  void zero_grad();

  Var detach() const { return Var(n_->value); }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}
  friend Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                     BackwardRule rule);

  std::shared_ptr<Node> n_;
};

/// While alive, ops do not record the graph (forward values only).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

/// Builds an op node: checks the value, wires parents and the backward rule.
/// Recording is skipped when disabled or when no parent requires grad.
Var make_op(const char* name, Tensor value, std::vector<Var> parents, BackwardRule rule);

// ----- elementwise / scalar ops -----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& x);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var vexp(const Var& x);
Var vlog(const Var& x);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
Var relu(const Var& x);
/// Elementwise multiply by a constant tensor (STE masks, ReLU masks).
Var mul_mask(const Var& x, std::shared_ptr<const Tensor> mask);

// ----- linear-algebra / structure ops -----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);  // 2-D
Var reshape(const Var& x, std::vector<int64_t> shape);
Var sum_all(const Var& x);                                     // -> {1}
Var expand_scalar(const Var& s, std::vector<int64_t> shape);   // adjoint of sum_all
Var sum_axis0(const Var& x);                                   // [M,N] -> [N]
Var expand_axis0(const Var& v, int64_t rows);                  // [N] -> [M,N]
Var sum_axis1(const Var& x);                                   // [M,N] -> [M]
Var expand_axis1(const Var& v, int64_t cols);                  // [M] -> [M,N]
Var sum_channel(const Var& x);                                 // [B,C,H,W] -> [C]
Var expand_channel(const Var& v, std::vector<int64_t> shape);  // [C] -> [B,C,H,W]

/// out[i] = x[idx[i]] (idx -1 reads 0); backward is scatter-add.
Var gather(const Var& x, std::shared_ptr<const std::vector<int64_t>> idx,
           std::vector<int64_t> out_shape);
/// out[idx[i]] += x[i]; backward is gather. Adjoint of gather.
Var scatter_add(const Var& x, std::shared_ptr<const std::vector<int64_t>> idx,
                std::vector<int64_t> out_shape);

// ----- composites -----
Var dot(const Var& a, const Var& b);
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);
Var conv2d(const Var& input, const Var& weight, int64_t stride, int64_t pad);
Var maxpool2x2(const Var& x);
Var dense(const Var& x, const Var& weight, const Var& bias);  // x[B,I] * W[O,I]^T + b
Var add_channel_bias(const Var& x, const Var& bias);
Var channel_affine(const Var& x, const Var& gamma, const Var& beta);

Tensor softmax_rows(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

// ----- engine -----

/// Reverse-mode pass from a scalar loss; accumulates into leaf .grad.
/// With create_graph the computed gradients are themselves recorded.
void backward(const Var& loss, bool create_graph = false);

/// Functional gradient: returns d(loss)/d(wrt) for each entry without
/// touching .grad. Entries the loss does not reach come back as zeros.
std::vector<Var> grad(const Var& loss, const std::vector<Var>& wrt, bool create_graph = false);

/// Hessian-vector product H*v for a scalar loss, by differentiating g^T v.
Tensor grad_of_grad(const Var& loss, const Var& wrt, const Tensor& v);

/// Reusable Hessian-vector oracle: the first-order gradient graph is built
/// once and every hvp call is a single extra backward pass.
class HessianOracle {
 public:
  HessianOracle(const Var& loss, std::vector<Var> wrt);

  size_t count() const { return wrt_.size(); }
  const Tensor& gradient(size_t i) const { return grads_[i].value(); }

  Tensor hvp(size_t i, const Tensor& v) const;
  /// Block-diagonal row HVP: restricts both the dot product and the result
  /// to one row of a [rows, row_len] parameter tensor.
  Tensor hvp_row(size_t i, int64_t row, const Tensor& v_row) const;

 private:
  std::vector<Var> wrt_;
  std::vector<Var> grads_;
};

}  // namespace rowquant

#endif  // ROWQUANT_AUTOGRAD_HPP
