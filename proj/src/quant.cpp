#include "rowquant/quant.hpp"

#include <algorithm>
#include <cmath>

namespace rowquant {

QuantSpec::QuantSpec(Scheme s, int wbits) : scheme(s), weight_bits(wbits), act_bits(4) {
  if (s == Scheme::PoT) {
    RQ_CHECK(wbits == 4, "PoT supports only 4-bit weights");
  } else {
    RQ_CHECK(wbits == 4 || wbits == 8, "Fixed supports 4- or 8-bit weights");
  }
}

std::string QuantSpec::name() const {
  if (scheme == Scheme::PoT) return "pot4";
  return weight_bits == 4 ? "fixed4" : "fixed8";
}

QuantSpec QuantSpec::parse(const std::string& s) {
  if (s == "pot4") return pot4();
  if (s == "fixed4") return fixed4();
  if (s == "fixed8") return fixed8();
  fail("unknown quant spec name: " + s);
}

static void check_bits(int bits) {
  RQ_CHECK(bits >= 2 && bits <= 8, "quantizer bit width must be in [2, 8]");
}

std::vector<double> fixed_levels(int bits, double alpha) {
  check_bits(bits);
  RQ_CHECK(alpha > 0, "alpha must be positive");
  const int k_max = (1 << (bits - 1)) - 1;
  std::vector<double> levels;
  levels.reserve(2 * static_cast<size_t>(k_max) + 1);
  for (int k = -k_max; k <= k_max; ++k)
    levels.push_back(alpha * (static_cast<double>(k) / static_cast<double>(k_max)));
  return levels;
}

std::vector<double> pot_levels(int bits, double alpha) {
  check_bits(bits);
  RQ_CHECK(alpha > 0, "alpha must be positive");
  const int e_min = -((1 << (bits - 1)) - 2);
  std::vector<double> levels;
  for (int e = 0; e >= e_min; --e) levels.push_back(-std::ldexp(alpha, e));
  levels.push_back(0.0);
  for (int e = e_min; e <= 0; ++e) levels.push_back(std::ldexp(alpha, e));
  return levels;
}

int fixed_code(double w, int bits, double alpha) {
  check_bits(bits);
  RQ_CHECK(alpha > 0, "alpha must be positive");
  const int k_max = (1 << (bits - 1)) - 1;
  const double t = std::clamp(w / alpha, -1.0, 1.0);
  // std::round rounds halves away from zero.
  return static_cast<int>(std::round(t * static_cast<double>(k_max)));
}

double quantize_fixed(double w, int bits, double alpha) {
  const int k_max = (1 << (bits - 1)) - 1;
  const int k = fixed_code(w, bits, alpha);
  return alpha * (static_cast<double>(k) / static_cast<double>(k_max));
}

PotCode pot_code(double w, int bits, double alpha) {
  check_bits(bits);
  RQ_CHECK(alpha > 0, "alpha must be positive");
  const int e_min = -((1 << (bits - 1)) - 2);
  const double t = std::clamp(w / alpha, -1.0, 1.0);
  if (t == 0.0) return {0, 0};
  const double lg = std::log2(std::fabs(t));
  if (lg < static_cast<double>(e_min) - 0.5) return {0, 0};
  int e = static_cast<int>(std::round(lg));
  e = std::clamp(e, e_min, 0);
  return {t > 0 ? 1 : -1, e};
}

double quantize_pot(double w, int bits, double alpha) {
  const PotCode c = pot_code(w, bits, alpha);
  if (c.sign == 0) return 0.0;
  return static_cast<double>(c.sign) * std::ldexp(alpha, c.expn);
}

double quantize_weight(double w, const QuantSpec& spec, double alpha) {
  return spec.scheme == Scheme::PoT ? quantize_pot(w, spec.weight_bits, alpha)
                                    : quantize_fixed(w, spec.weight_bits, alpha);
}

int act_code(double x, int bits, double clip) {
  check_bits(bits);
  RQ_CHECK(clip > 0, "activation clip must be positive");
  const int steps = (1 << bits) - 1;
  const double y = std::clamp(x, 0.0, clip);
  return static_cast<int>(std::round(y * static_cast<double>(steps) / clip));
}

double quantize_activation_value(double x, int bits, double clip) {
  const int steps = (1 << bits) - 1;
  const int q = act_code(x, bits, clip);
  return clip * (static_cast<double>(q) / static_cast<double>(steps));
}

Tensor quantize_activation(const Tensor& x, int bits, double clip) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = quantize_activation_value(x[i], bits, clip);
  return out;
}

double calibrate_alpha(const double* row, int64_t n, const QuantSpec& spec) {
  RQ_CHECK(n > 0, "calibrate_alpha requires a non-empty row");
  double m = 0.0;
  for (int64_t i = 0; i < n; ++i) m = std::max(m, std::fabs(row[i]));
  if (m == 0.0) return 1.0;

  double best_alpha = m;
  double best_err = -1.0;
  for (int i = 0; i < 64; ++i) {
    const double alpha = m * (static_cast<double>(33 + i) / 64.0);
    double err = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = quantize_weight(row[j], spec, alpha) - row[j];
      err += d * d;
    }
    if (best_err < 0.0 || err < best_err) {
      best_err = err;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

double calibrate_alpha(const std::vector<double>& row, const QuantSpec& spec) {
  return calibrate_alpha(row.data(), static_cast<int64_t>(row.size()), spec);
}

}  // namespace rowquant
