#ifndef ROWQUANT_KERNELS_HPP
#define ROWQUANT_KERNELS_HPP

#include <cstdint>
#include <vector>

#include "rowquant/nn.hpp"
#include "rowquant/quant.hpp"

namespace rowquant {

/// One vector of unsigned 4-bit activation codes plus its dequant scale.
struct IntActivationTile {
  std::vector<int32_t> values;  // codes in [0, 15]
  double scale = 1.0;           // clip / 15
};

/// One weight row in integer form. Fixed rows carry signed level codes;
/// PoT rows carry (sign, exponent) pairs with exponent in [-6, 0].
struct RowKernel {
  QuantSpec spec = QuantSpec::fixed4();
  std::vector<int32_t> fixed_codes;
  std::vector<int8_t> pot_sign;
  std::vector<int8_t> pot_expn;
  double weight_scale = 1.0;  // Fixed: alpha/(2^(m-1)-1); PoT: alpha * 2^-6

  int64_t length() const {
    return spec.scheme == Scheme::PoT ? static_cast<int64_t>(pot_sign.size())
                                      : static_cast<int64_t>(fixed_codes.size());
  }
};

/// Exact integer multiply-accumulate for Fixed rows.
int64_t row_dot_fixed(const RowKernel& row, const IntActivationTile& acts);

/// Shift-accumulate for PoT rows. Exponents are re-based by +6 so every
/// shift is a non-negative left shift; the 2^-6 factor lives in
/// weight_scale. The inner loop contains no integer multiply.
int64_t row_dot_pot(const RowKernel& row, const IntActivationTile& acts);

RowKernel build_row_kernel(const double* row, int64_t n, const QuantSpec& spec, double alpha);
std::vector<RowKernel> layer_row_kernels(const Layer& layer);

IntActivationTile quantize_tile(const double* x, int64_t n, double clip, int bits = 4);

/// Dispatches every row to its scheme kernel and dequantizes with
/// per-row weight scale x activation scale. Returns [tiles, rows].
Tensor mixed_gemm(const std::vector<RowKernel>& rows, const std::vector<IntActivationTile>& tiles);

/// Full-model integer-domain inference (activations re-quantized between
/// layers in float). Returns logits [batch, classes].
Tensor integer_forward(const Model& model, const Tensor& inputs);

}  // namespace rowquant

#endif  // ROWQUANT_KERNELS_HPP
