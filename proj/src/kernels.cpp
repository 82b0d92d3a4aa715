#include "rowquant/kernels.hpp"

#include <cmath>

namespace rowquant {

int64_t row_dot_fixed(const RowKernel& row, const IntActivationTile& acts) {
  RQ_CHECK(row.spec.scheme == Scheme::Fixed, "row_dot_fixed needs a Fixed row");
  RQ_CHECK(row.length() == static_cast<int64_t>(acts.values.size()),
           "row/activation length mismatch");
  int64_t acc = 0;
  const int32_t* w = row.fixed_codes.data();
  const int32_t* a = acts.values.data();
  const int64_t n = row.length();
  for (int64_t i = 0; i < n; ++i) acc += static_cast<int64_t>(w[i]) * a[i];
  return acc;
}

int64_t row_dot_pot(const RowKernel& row, const IntActivationTile& acts) {
  RQ_CHECK(row.spec.scheme == Scheme::PoT, "row_dot_pot needs a PoT row");
  RQ_CHECK(row.length() == static_cast<int64_t>(acts.values.size()),
           "row/activation length mismatch");
  int64_t acc = 0;
  const int8_t* s = row.pot_sign.data();
  const int8_t* e = row.pot_expn.data();
  const int32_t* a = acts.values.data();
  const int64_t n = row.length();
  // shifts and adds only
  for (int64_t i = 0; i < n; ++i) {
    if (s[i] == 0) continue;
    const int64_t term = static_cast<int64_t>(a[i]) << (e[i] + 6);
    acc += s[i] > 0 ? term : -term;
  }
  return acc;
}

RowKernel build_row_kernel(const double* row, int64_t n, const QuantSpec& spec, double alpha) {
  RowKernel k;
  k.spec = spec;
  if (spec.scheme == Scheme::Fixed) {
    const int k_max = (1 << (spec.weight_bits - 1)) - 1;
    k.weight_scale = alpha / static_cast<double>(k_max);
    k.fixed_codes.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
      k.fixed_codes[static_cast<size_t>(i)] = fixed_code(row[i], spec.weight_bits, alpha);
  } else {
    k.weight_scale = std::ldexp(alpha, -6);
    k.pot_sign.resize(static_cast<size_t>(n));
    k.pot_expn.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const PotCode c = pot_code(row[i], spec.weight_bits, alpha);
      k.pot_sign[static_cast<size_t>(i)] = static_cast<int8_t>(c.sign);
      k.pot_expn[static_cast<size_t>(i)] = static_cast<int8_t>(c.expn);
    }
  }
  return k;
}

std::vector<RowKernel> layer_row_kernels(const Layer& layer) {
  RQ_CHECK(layer.quantizable(), "row kernels need a Dense or Conv2d layer");
  RQ_CHECK(layer.assignment.has_value(), "layer has no assignment");
  const Tensor& w = layer.weight.value();
  const int64_t rows = layer.rows();
  const int64_t len = layer.row_len();
  std::vector<RowKernel> out;
  out.reserve(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    out.push_back(build_row_kernel(w.data() + r * len, len,
                                   layer.assignment->specs[static_cast<size_t>(r)],
                                   layer.assignment->alphas[static_cast<size_t>(r)]));
  }
  return out;
}

IntActivationTile quantize_tile(const double* x, int64_t n, double clip, int bits) {
  IntActivationTile t;
  t.scale = clip / static_cast<double>((1 << bits) - 1);
  t.values.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) t.values[static_cast<size_t>(i)] = act_code(x[i], bits, clip);
  return t;
}

Tensor mixed_gemm(const std::vector<RowKernel>& rows,
                  const std::vector<IntActivationTile>& tiles) {
  RQ_CHECK(!rows.empty(), "mixed_gemm needs at least one row kernel");
  const int64_t nrows = static_cast<int64_t>(rows.size());
  const int64_t ntiles = static_cast<int64_t>(tiles.size());
  Tensor out({ntiles, nrows});
  for (int64_t t = 0; t < ntiles; ++t) {
    for (int64_t r = 0; r < nrows; ++r) {
      const RowKernel& row = rows[static_cast<size_t>(r)];
      const int64_t acc = row.spec.scheme == Scheme::PoT
                              ? row_dot_pot(row, tiles[static_cast<size_t>(t)])
                              : row_dot_fixed(row, tiles[static_cast<size_t>(t)]);
      out.at(t, r) =
          static_cast<double>(acc) * row.weight_scale * tiles[static_cast<size_t>(t)].scale;
    }
  }
  return out;
}

namespace {

// Integer im2col over activation codes; padding reads code 0.
std::vector<IntActivationTile> im2col_tiles(const std::vector<int32_t>& codes, double scale,
                                            int64_t b, int64_t c, int64_t h, int64_t w,
                                            int64_t k, int64_t stride, int64_t pad, int64_t oh,
                                            int64_t ow) {
  std::vector<IntActivationTile> tiles;
  tiles.reserve(static_cast<size_t>(b * oh * ow));
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        IntActivationTile t;
        t.scale = scale;
        t.values.reserve(static_cast<size_t>(c * k * k));
        for (int64_t ci = 0; ci < c; ++ci)
          for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
              const int64_t ih = y * stride + ki - pad;
              const int64_t iw = x * stride + kj - pad;
              int32_t v = 0;
              if (ih >= 0 && ih < h && iw >= 0 && iw < w)
                v = codes[static_cast<size_t>(((bi * c + ci) * h + ih) * w + iw)];
              t.values.push_back(v);
            }
        tiles.push_back(std::move(t));
      }
  return tiles;
}

}  // namespace

Tensor integer_forward(const Model& model, const Tensor& inputs) {
  RQ_CHECK(inputs.rank() == 2 && inputs.dim(1) == model.input_dim(),
           "integer_forward expects [batch, input_dim]");
  RQ_CHECK(model.fully_assigned(), "integer_forward needs a fully assigned model");
  NoGradGuard ng;

  const int64_t batch = inputs.dim(0);
  Tensor h = inputs;
  std::vector<int64_t> hshape = {batch, inputs.dim(1)};
  if (model.input_shape.size() == 3)
    hshape = {batch, model.input_shape[0], model.input_shape[1], model.input_shape[2]};
  h = Tensor(hshape, h.vec());

  for (const auto& layer : model.layers) {
    switch (layer.kind) {
      case LayerKind::Dense: {
        const double clip = layer.act_clip.value()[0];
        std::vector<RowKernel> rows = layer_row_kernels(layer);
        const int64_t d = h.dim(1);
        std::vector<IntActivationTile> tiles;
        tiles.reserve(static_cast<size_t>(batch));
        for (int64_t b = 0; b < batch; ++b)
          tiles.push_back(quantize_tile(h.data() + b * d, d, clip));
        Tensor out = mixed_gemm(rows, tiles);  // [batch, rows]
        const Tensor& bias = layer.bias.value();
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t r = 0; r < out.dim(1); ++r) out.at(b, r) += bias[r];
        h = std::move(out);
        break;
      }
      case LayerKind::Conv2d: {
        const double clip = layer.act_clip.value()[0];
        std::vector<RowKernel> rows = layer_row_kernels(layer);
        const int64_t c = h.dim(1), hh = h.dim(2), ww = h.dim(3);
        const int64_t k = layer.weight.shape()[2];
        const int64_t oh = (hh + 2 * layer.pad - k) / layer.stride + 1;
        const int64_t ow = (ww + 2 * layer.pad - k) / layer.stride + 1;
        const int64_t f = layer.rows();

        std::vector<int32_t> codes(static_cast<size_t>(h.numel()));
        for (int64_t i = 0; i < h.numel(); ++i)
          codes[static_cast<size_t>(i)] = act_code(h[i], 4, clip);
        const double scale = clip / 15.0;
        auto tiles = im2col_tiles(codes, scale, batch, c, hh, ww, k, layer.stride, layer.pad,
                                  oh, ow);
        Tensor flat = mixed_gemm(rows, tiles);  // [batch*oh*ow, f]

        Tensor out({batch, f, oh, ow});
        const Tensor& bias = layer.bias.value();
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t fi = 0; fi < f; ++fi)
            for (int64_t i = 0; i < oh * ow; ++i)
              out[((b * f) + fi) * oh * ow + i] = flat.at(b * oh * ow + i, fi) + bias[fi];
        h = std::move(out);
        break;
      }
      case LayerKind::Relu: {
        Tensor out(h.shape());
        for (int64_t i = 0; i < h.numel(); ++i) out[i] = h[i] > 0 ? h[i] : 0.0;
        h = std::move(out);
        break;
      }
      case LayerKind::MaxPool2:
        h = maxpool2x2(Var(h)).value();
        break;
      case LayerKind::ChannelAffine:
        h = channel_affine(Var(h), layer.weight, layer.bias).value();
        break;
      case LayerKind::Flatten:
        h = Tensor({batch, h.numel() / batch}, h.vec());
        break;
    }
  }
  RQ_CHECK(h.rank() == 2 && h.dim(1) == model.classes, "integer forward output mismatch");
  return h;
}

}  // namespace rowquant
