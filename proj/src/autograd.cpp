#include "rowquant/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>
#include <unordered_set>

namespace rowquant {

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var::Var(Tensor value, bool requires_grad) {
  value.check_finite("leaf tensor");
  n_ = std::make_shared<Node>();
  n_->value = std::move(value);
  n_->requires_grad = requires_grad;
  n_->is_leaf = true;
}

Tensor& Var::value_mut() {
  RQ_CHECK(n_ && n_->is_leaf, "value_mut is only valid on leaf variables");
  return n_->value;
}

const Tensor& Var::grad() const {
  RQ_CHECK(n_ != nullptr, "grad() on undefined Var");
  RQ_CHECK(n_->grad.defined(), "grad() called before backward populated it");
  return n_->grad;
}

void Var::zero_grad() {
  if (n_ && n_->grad.defined()) n_->grad.fill(0.0);
}

Var make_op(const char* name, Tensor value, std::vector<Var> parents, BackwardRule rule) {
  value.check_finite(name);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);

  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->rule = std::move(rule);
  }
  return Var(std::move(node));
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

static Tensor ew(const Tensor& a, const Tensor& b, const char* name, double (*f)(double, double)) {
  RQ_CHECK(a.same_shape(b), std::string("shape mismatch in ") + name + ": " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

Var add(const Var& a, const Var& b) {
  Tensor out = ew(a.value(), b.value(), "add", [](double x, double y) { return x + y; });
  return make_op("add", std::move(out), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  Tensor out = ew(a.value(), b.value(), "sub", [](double x, double y) { return x - y; });
  return make_op("sub", std::move(out), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var mul(const Var& a, const Var& b) {
  Tensor out = ew(a.value(), b.value(), "mul", [](double x, double y) { return x * y; });
  return make_op("mul", std::move(out), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{mul(g, b), mul(g, a)};
  });
}

Var div(const Var& a, const Var& b) {
  Tensor out = ew(a.value(), b.value(), "div", [](double x, double y) { return x / y; });
  return make_op("div", std::move(out), {a, b}, [a, b](const Var& g) {
    Var ga = div(g, b);
    Var gb = neg(div(mul(g, a), mul(b, b)));
    return std::vector<Var>{ga, gb};
  });
}

Var vexp(const Var& x) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(x.value()[i]);
  // d exp = exp; recomputed in the rule to keep the graph acyclic.
  return make_op("exp", std::move(out), {x},
                 [x](const Var& g) { return std::vector<Var>{mul(g, vexp(x))}; });
}

Var vlog(const Var& x) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::log(x.value()[i]);
  return make_op("log", std::move(out), {x},
                 [x](const Var& g) { return std::vector<Var>{div(g, x)}; });
}

Var scale(const Var& x, double c) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = c * x.value()[i];
  return make_op("scale", std::move(out), {x},
                 [c](const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

Var add_scalar(const Var& x, double c) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = x.value()[i] + c;
  return make_op("add_scalar", std::move(out), {x},
                 [](const Var& g) { return std::vector<Var>{g}; });
}

Var mul_mask(const Var& x, std::shared_ptr<const Tensor> mask) {
  RQ_CHECK(x.value().same_shape(*mask), "mask shape mismatch");
  Tensor out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = x.value()[i] * (*mask)[i];
  return make_op("mul_mask", std::move(out), {x}, [mask](const Var& g) {
    return std::vector<Var>{mul_mask(g, mask)};
  });
}

Var relu(const Var& x) {
  auto mask = std::make_shared<Tensor>(x.value().shape());
  Tensor out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    const bool pos = x.value()[i] > 0.0;
    (*mask)[i] = pos ? 1.0 : 0.0;
    out[i] = pos ? x.value()[i] : 0.0;
  }
  return make_op("relu", std::move(out), {x},
                 [mask = std::shared_ptr<const Tensor>(mask)](const Var& g) {
                   return std::vector<Var>{mul_mask(g, mask)};
                 });
}

// ---------------------------------------------------------------------------
// structure ops
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  RQ_CHECK(ta.rank() == 2 && tb.rank() == 2, "matmul expects 2-D operands");
  RQ_CHECK(ta.dim(1) == tb.dim(0), "matmul inner dimensions disagree: " +
                                       shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  const int64_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out({m, n});
  const double* pa = ta.data();
  const double* pb = tb.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = pb + kk * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return make_op("matmul", std::move(out), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

Var transpose(const Var& x) {
  const Tensor& t = x.value();
  RQ_CHECK(t.rank() == 2, "transpose expects a 2-D tensor");
  const int64_t m = t.dim(0), n = t.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = t.at(i, j);
  return make_op("transpose", std::move(out), {x},
                 [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
  RQ_CHECK(Tensor::shape_numel(shape) == x.numel(), "reshape element count mismatch");
  Tensor out(std::move(shape), x.value().vec());
  auto orig = x.shape();
  return make_op("reshape", std::move(out), {x}, [orig](const Var& g) {
    return std::vector<Var>{reshape(g, orig)};
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x.value()[i];
  auto shape = x.shape();
  return make_op("sum_all", Tensor::scalar(s), {x}, [shape](const Var& g) {
    return std::vector<Var>{expand_scalar(g, shape)};
  });
}

Var expand_scalar(const Var& s, std::vector<int64_t> shape) {
  RQ_CHECK(s.numel() == 1, "expand_scalar expects a scalar");
  Tensor out = Tensor::full(std::move(shape), s.value()[0]);
  return make_op("expand_scalar", std::move(out), {s},
                 [](const Var& g) { return std::vector<Var>{sum_all(g)}; });
}

Var sum_axis0(const Var& x) {
  const Tensor& t = x.value();
  RQ_CHECK(t.rank() == 2, "sum_axis0 expects a 2-D tensor");
  const int64_t m = t.dim(0), n = t.dim(1);
  Tensor out({n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j] += t.at(i, j);
  return make_op("sum_axis0", std::move(out), {x}, [m](const Var& g) {
    return std::vector<Var>{expand_axis0(g, m)};
  });
}

Var expand_axis0(const Var& v, int64_t rows) {
  const Tensor& t = v.value();
  RQ_CHECK(t.rank() == 1, "expand_axis0 expects a 1-D tensor");
  const int64_t n = t.dim(0);
  Tensor out({rows, n});
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, j) = t[j];
  return make_op("expand_axis0", std::move(out), {v},
                 [](const Var& g) { return std::vector<Var>{sum_axis0(g)}; });
}

Var sum_axis1(const Var& x) {
  const Tensor& t = x.value();
  RQ_CHECK(t.rank() == 2, "sum_axis1 expects a 2-D tensor");
  const int64_t m = t.dim(0), n = t.dim(1);
  Tensor out({m});
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += t.at(i, j);
    out[i] = s;
  }
  return make_op("sum_axis1", std::move(out), {x}, [n](const Var& g) {
    return std::vector<Var>{expand_axis1(g, n)};
  });
}

Var expand_axis1(const Var& v, int64_t cols) {
  const Tensor& t = v.value();
  RQ_CHECK(t.rank() == 1, "expand_axis1 expects a 1-D tensor");
  const int64_t m = t.dim(0);
  Tensor out({m, cols});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < cols; ++j) out.at(i, j) = t[i];
  return make_op("expand_axis1", std::move(out), {v},
                 [](const Var& g) { return std::vector<Var>{sum_axis1(g)}; });
}

Var sum_channel(const Var& x) {
  const Tensor& t = x.value();
  RQ_CHECK(t.rank() == 4, "sum_channel expects a 4-D tensor");
  const int64_t b = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  Tensor out({c});
  const double* p = t.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      double s = 0.0;
      const double* row = p + (bi * c + ci) * hw;
      for (int64_t i = 0; i < hw; ++i) s += row[i];
      out[ci] += s;
    }
  auto shape = t.shape();
  return make_op("sum_channel", std::move(out), {x}, [shape](const Var& g) {
    return std::vector<Var>{expand_channel(g, shape)};
  });
}

Var expand_channel(const Var& v, std::vector<int64_t> shape) {
  const Tensor& t = v.value();
  RQ_CHECK(shape.size() == 4 && t.rank() == 1 && t.dim(0) == shape[1],
           "expand_channel expects [C] -> [B,C,H,W]");
  const int64_t b = shape[0], c = shape[1], hw = shape[2] * shape[3];
  Tensor out(shape);
  double* p = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      double* row = p + (bi * c + ci) * hw;
      const double val = t[ci];
      for (int64_t i = 0; i < hw; ++i) row[i] = val;
    }
  return make_op("expand_channel", std::move(out), {v},
                 [](const Var& g) { return std::vector<Var>{sum_channel(g)}; });
}

Var gather(const Var& x, std::shared_ptr<const std::vector<int64_t>> idx,
           std::vector<int64_t> out_shape) {
  RQ_CHECK(static_cast<int64_t>(idx->size()) == Tensor::shape_numel(out_shape),
           "gather index count must match output shape");
  Tensor out(out_shape);
  const Tensor& t = x.value();
  for (size_t i = 0; i < idx->size(); ++i) {
    const int64_t src = (*idx)[i];
    out[static_cast<int64_t>(i)] = src >= 0 ? t[src] : 0.0;
  }
  auto in_shape = t.shape();
  return make_op("gather", std::move(out), {x}, [idx, in_shape](const Var& g) {
    return std::vector<Var>{scatter_add(g, idx, in_shape)};
  });
}

Var scatter_add(const Var& x, std::shared_ptr<const std::vector<int64_t>> idx,
                std::vector<int64_t> out_shape) {
  RQ_CHECK(static_cast<int64_t>(idx->size()) == x.numel(),
           "scatter_add index count must match input size");
  Tensor out(out_shape);
  const Tensor& t = x.value();
  for (size_t i = 0; i < idx->size(); ++i) {
    const int64_t dst = (*idx)[i];
    if (dst >= 0) out[dst] += t[static_cast<int64_t>(i)];
  }
  auto in_shape = t.shape();
  return make_op("scatter_add", std::move(out), {x}, [idx, in_shape](const Var& g) {
    return std::vector<Var>{gather(g, idx, in_shape)};
  });
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

Var dot(const Var& a, const Var& b) { return sum_all(mul(a, b)); }

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  RQ_CHECK(z.rank() == 2, "softmax_cross_entropy expects [batch, classes] logits");
  const int64_t b = z.dim(0), c = z.dim(1);
  RQ_CHECK(static_cast<int64_t>(labels.size()) == b, "label count must match batch");

  // Row max is detached: log-sum-exp is mathematically independent of the
  // shift, so gradients stay exact while the exp stays bounded.
  Tensor rowmax({b});
  for (int64_t i = 0; i < b; ++i) {
    double m = z.at(i, 0);
    for (int64_t j = 1; j < c; ++j) m = std::max(m, z.at(i, j));
    rowmax[i] = m;
  }
  Var m(rowmax);

  Var shifted = sub(logits, expand_axis1(m, c));
  Var lse = add(vlog(sum_axis1(vexp(shifted))), m);

  auto pick = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    RQ_CHECK(labels[i] >= 0 && labels[i] < c, "label out of range");
    (*pick)[static_cast<size_t>(i)] = i * c + labels[i];
  }
  Var picked = gather(logits, pick, {b});
  return scale(sum_all(sub(lse, picked)), 1.0 / static_cast<double>(b));
}

struct ConvGeom {
  int64_t b, c, h, w, f, k, stride, pad, oh, ow;
};

static ConvGeom conv_geom(const Tensor& in, const Tensor& wt, int64_t stride, int64_t pad) {
  RQ_CHECK(in.rank() == 4 && wt.rank() == 4, "conv2d expects 4-D input and weight");
  ConvGeom g;
  g.b = in.dim(0);
  g.c = in.dim(1);
  g.h = in.dim(2);
  g.w = in.dim(3);
  g.f = wt.dim(0);
  g.k = wt.dim(2);
  RQ_CHECK(wt.dim(1) == g.c, "conv2d channel mismatch");
  RQ_CHECK(wt.dim(2) == wt.dim(3), "conv2d expects square kernels");
  RQ_CHECK(stride >= 1, "conv2d stride must be >= 1");
  RQ_CHECK(g.k <= g.h + 2 * pad && g.k <= g.w + 2 * pad, "kernel larger than padded input");
  g.stride = stride;
  g.pad = pad;
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  RQ_CHECK(g.oh > 0 && g.ow > 0, "conv2d output size is non-positive");
  return g;
}

using IdxPtr = std::shared_ptr<const std::vector<int64_t>>;

// Geometry-keyed caches: index maps are pure functions of the shapes.
static IdxPtr im2col_index(const ConvGeom& g) {
  thread_local std::map<std::array<int64_t, 8>, IdxPtr> cache;
  const std::array<int64_t, 8> key{g.b, g.c, g.h, g.w, g.k, g.stride, g.pad, 0};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  auto idx = std::make_shared<std::vector<int64_t>>();
  const int64_t cols = g.b * g.oh * g.ow;
  idx->resize(static_cast<size_t>(g.c * g.k * g.k * cols));
  size_t pos = 0;
  for (int64_t c = 0; c < g.c; ++c)
    for (int64_t ki = 0; ki < g.k; ++ki)
      for (int64_t kj = 0; kj < g.k; ++kj)
        for (int64_t b = 0; b < g.b; ++b)
          for (int64_t oh = 0; oh < g.oh; ++oh)
            for (int64_t ow = 0; ow < g.ow; ++ow) {
              const int64_t ih = oh * g.stride + ki - g.pad;
              const int64_t iw = ow * g.stride + kj - g.pad;
              int64_t v = -1;
              if (ih >= 0 && ih < g.h && iw >= 0 && iw < g.w)
                v = ((b * g.c + c) * g.h + ih) * g.w + iw;
              (*idx)[pos++] = v;
            }
  IdxPtr p = idx;
  cache[key] = p;
  return p;
}

static IdxPtr conv_out_index(const ConvGeom& g) {
  thread_local std::map<std::array<int64_t, 4>, IdxPtr> cache;
  const std::array<int64_t, 4> key{g.b, g.f, g.oh, g.ow};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  // [F, B*OH*OW] row-major -> [B, F, OH, OW]
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->resize(static_cast<size_t>(g.b * g.f * g.oh * g.ow));
  const int64_t ohw = g.oh * g.ow;
  size_t pos = 0;
  for (int64_t b = 0; b < g.b; ++b)
    for (int64_t f = 0; f < g.f; ++f)
      for (int64_t i = 0; i < ohw; ++i) (*idx)[pos++] = f * (g.b * ohw) + b * ohw + i;
  IdxPtr p = idx;
  cache[key] = p;
  return p;
}

Var conv2d(const Var& input, const Var& weight, int64_t stride, int64_t pad) {
  const ConvGeom g = conv_geom(input.value(), weight.value(), stride, pad);
  Var cols = gather(input, im2col_index(g), {g.c * g.k * g.k, g.b * g.oh * g.ow});
  Var wmat = reshape(weight, {g.f, g.c * g.k * g.k});
  Var out2 = matmul(wmat, cols);
  return gather(out2, conv_out_index(g), {g.b, g.f, g.oh, g.ow});
}

Var maxpool2x2(const Var& x) {
  const Tensor& t = x.value();
  RQ_CHECK(t.rank() == 4, "maxpool2x2 expects a 4-D tensor");
  const int64_t b = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  RQ_CHECK(h % 2 == 0 && w % 2 == 0, "maxpool2x2 requires even spatial dims");
  const int64_t oh = h / 2, ow = w / 2;
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(b * c * oh * ow));
  size_t pos = 0;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const int64_t base = (bi * c + ci) * h * w;
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          int64_t best = base + (2 * i) * w + 2 * j;
          double bv = t[best];
          const int64_t cand[3] = {base + (2 * i) * w + 2 * j + 1,
                                   base + (2 * i + 1) * w + 2 * j,
                                   base + (2 * i + 1) * w + 2 * j + 1};
          for (int64_t cc : cand)
            if (t[cc] > bv) {
              bv = t[cc];
              best = cc;
            }
          (*idx)[pos++] = best;
        }
    }
  return gather(x, idx, {b, c, oh, ow});
}

Var dense(const Var& x, const Var& weight, const Var& bias) {
  Var out = matmul(x, transpose(weight));
  if (bias.defined()) out = add(out, expand_axis0(bias, x.shape()[0]));
  return out;
}

Var add_channel_bias(const Var& x, const Var& bias) {
  return add(x, expand_channel(bias, x.shape()));
}

Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
  return add(mul(x, expand_channel(gamma, x.shape())), expand_channel(beta, x.shape()));
}

Tensor softmax_rows(const Tensor& logits) {
  RQ_CHECK(logits.rank() == 2, "softmax_rows expects a 2-D tensor");
  const int64_t b = logits.dim(0), c = logits.dim(1);
  Tensor out(logits.shape());
  for (int64_t i = 0; i < b; ++i) {
    double m = logits.at(i, 0);
    for (int64_t j = 1; j < c; ++j) m = std::max(m, logits.at(i, j));
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      out.at(i, j) = std::exp(logits.at(i, j) - m);
      s += out.at(i, j);
    }
    for (int64_t j = 0; j < c; ++j) out.at(i, j) /= s;
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  RQ_CHECK(logits.rank() == 2, "argmax_rows expects a 2-D tensor");
  const int64_t b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    int best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = static_cast<int>(j);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// engine
// ---------------------------------------------------------------------------

namespace {

// Post-order over grad-requiring ancestors; result is a valid topological
// order (parents before children).
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Shared reverse pass. Returns the accumulated gradient Var per node.
std::unordered_map<Node*, Var> reverse_pass(const Var& loss, bool create_graph) {
  RQ_CHECK(loss.defined(), "backward on undefined Var");
  RQ_CHECK(loss.numel() == 1, "backward requires a scalar loss");
  std::unordered_map<Node*, Var> accum;
  if (!loss.requires_grad()) return accum;

  std::unique_ptr<NoGradGuard> guard;
  if (!create_graph) guard = std::make_unique<NoGradGuard>();

  std::vector<Node*> order = topo_order(loss.node().get());
  accum[loss.node().get()] = Var(Tensor::scalar(1.0));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = accum.find(node);
    if (found == accum.end() || node->is_leaf || !node->rule) continue;
    const Var gout = found->second;
    std::vector<Var> grads = node->rule(gout);
    RQ_CHECK(grads.size() == node->parents.size(), "backward rule arity mismatch");
    for (size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i].defined()) continue;
      Node* parent = node->parents[i].get();
      if (!parent->requires_grad) continue;
      auto slot = accum.find(parent);
      if (slot == accum.end())
        accum.emplace(parent, grads[i]);
      else
        slot->second = add(slot->second, grads[i]);
    }
  }
  return accum;
}

}  // namespace

void backward(const Var& loss, bool create_graph) {
  auto accum = reverse_pass(loss, create_graph);
  for (auto& [node, g] : accum) {
    if (!node->is_leaf || !node->requires_grad) continue;
    if (!node->grad.defined()) node->grad = Tensor(node->value.shape());
    node->grad.add_(g.value());
  }
}

std::vector<Var> grad(const Var& loss, const std::vector<Var>& wrt, bool create_graph) {
  auto accum = reverse_pass(loss, create_graph);
  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    RQ_CHECK(w.defined(), "grad target is undefined");
    auto it = accum.find(w.node().get());
    if (it != accum.end())
      out.push_back(it->second);
    else
      out.push_back(Var(Tensor(w.shape())));
  }
  return out;
}

Tensor grad_of_grad(const Var& loss, const Var& wrt, const Tensor& v) {
  RQ_CHECK(wrt.value().same_shape(v), "hvp vector shape must match parameter shape");
  HessianOracle oracle(loss, {wrt});
  return oracle.hvp(0, v);
}

HessianOracle::HessianOracle(const Var& loss, std::vector<Var> wrt) : wrt_(std::move(wrt)) {
  grads_ = grad(loss, wrt_, /*create_graph=*/true);
}

Tensor HessianOracle::hvp(size_t i, const Tensor& v) const {
  const Var& g = grads_[i];
  RQ_CHECK(g.value().same_shape(v), "hvp vector shape must match parameter shape");
  if (!g.requires_grad()) return Tensor(v.shape());  // gradient is constant in W
  Var s = dot(g, Var(v));
  return grad(s, {wrt_[i]}, /*create_graph=*/false)[0].value();
}

Tensor HessianOracle::hvp_row(size_t i, int64_t row, const Tensor& v_row) const {
  const Var& g = grads_[i];
  const Tensor& w = wrt_[i].value();
  RQ_CHECK(w.rank() >= 1, "hvp_row expects a matrix-like parameter");
  const int64_t rows = w.dim(0);
  const int64_t row_len = w.numel() / rows;
  RQ_CHECK(row >= 0 && row < rows, "hvp_row row index out of range");
  RQ_CHECK(v_row.numel() == row_len, "hvp_row vector length mismatch");

  if (!g.requires_grad()) return Tensor({row_len});

  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(row_len));
  for (int64_t j = 0; j < row_len; ++j) (*idx)[static_cast<size_t>(j)] = row * row_len + j;
  Var g_row = gather(g, idx, {row_len});
  Tensor vr({row_len}, v_row.vec());
  Var s = dot(g_row, Var(vr));
  Tensor full = grad(s, {wrt_[i]}, /*create_graph=*/false)[0].value();
  Tensor out({row_len});
  for (int64_t j = 0; j < row_len; ++j) out[j] = full[row * row_len + j];
  return out;
}

}  // namespace rowquant
