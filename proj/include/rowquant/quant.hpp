#ifndef ROWQUANT_QUANT_HPP
#define ROWQUANT_QUANT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "rowquant/tensor.hpp"

namespace rowquant {

enum class Scheme { PoT, Fixed };

/// One of the three scheme/precision candidates: PoT-W4A4, Fixed-W4A4,
/// Fixed-W8A4. The constructor rejects anything else (PoT never gets the
/// higher weight precision; activations are always 4-bit Fixed).
struct QuantSpec {
  Scheme scheme;
  int weight_bits;
  int act_bits;

  QuantSpec(Scheme s, int wbits);

  static QuantSpec pot4() { return QuantSpec(Scheme::PoT, 4); }
  static QuantSpec fixed4() { return QuantSpec(Scheme::Fixed, 4); }
  static QuantSpec fixed8() { return QuantSpec(Scheme::Fixed, 8); }

  std::string name() const;                       // "pot4" | "fixed4" | "fixed8"
  static QuantSpec parse(const std::string& s);   // inverse of name()

  bool operator==(const QuantSpec& o) const {
    return scheme == o.scheme && weight_bits == o.weight_bits && act_bits == o.act_bits;
  }
};

/// Uniform symmetric levels: +-alpha * {0, 1/(2^(m-1)-1), ..., 1};
/// 2^m - 1 values, sorted ascending.
std::vector<double> fixed_levels(int bits, double alpha);

/// Power-of-two levels: 0 and +-alpha * 2^e for e in [-(2^(m-1)-2), 0];
/// 2^m - 1 values, sorted ascending.
std::vector<double> pot_levels(int bits, double alpha);

/// Clip to [-alpha, alpha], then project to the nearest fixed level.
/// Ties round away from zero.
double quantize_fixed(double w, int bits, double alpha);

/// Clip to [-alpha, alpha], keep the sign, round log2(|w|/alpha) to the
/// nearest admissible exponent; values below the log-domain midpoint under
/// the smallest level map to zero.
double quantize_pot(double w, int bits, double alpha);

double quantize_weight(double w, const QuantSpec& spec, double alpha);

/// Unsigned uniform quantization of [0, clip] into 2^bits - 1 steps;
/// values above clip saturate.
double quantize_activation_value(double x, int bits, double clip);
Tensor quantize_activation(const Tensor& x, int bits, double clip);

/// Integer code views used by the inference kernels.
int fixed_code(double w, int bits, double alpha);  // in [-(2^(m-1)-1), +(2^(m-1)-1)]
struct PotCode {
  int sign;  // -1, 0, +1
  int expn;  // in [-(2^(m-1)-2), 0]; 0 when sign == 0
};
PotCode pot_code(double w, int bits, double alpha);
int act_code(double x, int bits, double clip);  // in [0, 2^bits - 1]

/// Per-row scale search: 64 candidates with step max|w|/64 covering
/// (0.5*max|w|, 1.5*max|w|] -- the grid contains max|w| itself -- picking
/// the candidate with the least mean squared quantization error (lowest
/// alpha on ties). An all-zero row returns 1.
double calibrate_alpha(const double* row, int64_t n, const QuantSpec& spec);
double calibrate_alpha(const std::vector<double>& row, const QuantSpec& spec);

/// Assignment of one (spec, alpha) pair per row/filter of one layer.
struct LayerAssignment {
  std::vector<QuantSpec> specs;
  std::vector<double> alphas;

  int64_t rows() const { return static_cast<int64_t>(specs.size()); }
};

}  // namespace rowquant

#endif  // ROWQUANT_QUANT_HPP
