#ifndef ROWQUANT_ASSIGN_HPP
#define ROWQUANT_ASSIGN_HPP

#include <functional>
#include <string>
#include <vector>

#include "rowquant/nn.hpp"

namespace rowquant {

/// Global scheme ratio PoT-W4A4 : Fixed-W4A4 : Fixed-W8A4 in percent.
/// Identical across layers (layer-wise uniformality).
struct RatioConfig {
  int pot4 = 65;
  int fixed4 = 30;
  int fixed8 = 5;

  void validate() const;
  static RatioConfig parse(const std::string& s);  // "A:B:C"
  std::string str() const;
  bool operator==(const RatioConfig& o) const {
    return pot4 == o.pot4 && fixed4 == o.fixed4 && fixed8 == o.fixed8;
  }
};

struct SpecCounts {
  int64_t fixed8 = 0;
  int64_t pot4 = 0;
  int64_t fixed4 = 0;
};

/// Row counts for one layer of `rows` rows:
///   fixed8 = round(rows*C/100), clamped to [1, rows] when C > 0;
///   pot4   = round(remainder*A/(A+B)) (0 when A == 0);
///   fixed4 = remainder.
/// round() is round-half-up.
SpecCounts plan_counts(int64_t rows, const RatioConfig& ratio);

struct HessianEstimate {
  int layer = 0;
  int64_t row = 0;
  double lambda = 0.0;
  int iterations_used = 0;
  bool converged = false;
};

struct PowerIterResult {
  double lambda = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Power iteration with per-step normalization over a caller-supplied
/// Hessian-vector product. lambda is the Rayleigh quotient at the final
/// iterate; convergence means the relative lambda change between the last
/// two iterations dropped below 1e-4.
PowerIterResult power_iteration(const std::function<Tensor(const Tensor&)>& hvp, int64_t dim,
                                int max_iter, uint64_t seed);

/// Dominant Hessian eigenvalue (by magnitude) of a scalar loss restricted
/// to one parameter tensor. A zero gradient yields lambda 0, converged.
HessianEstimate top_eigenvalue(const Var& loss, const Var& weights, int max_iter, uint64_t seed);

struct RowAssignment {
  std::vector<LayerAssignment> layers;  // one per quantizable layer, in model order
  std::vector<HessianEstimate> estimates;
  std::vector<std::string> warnings;
};

/// Algorithm: per layer, the top-C% rows by |dominant Hessian eigenvalue|
/// take Fixed-W8A4; the remaining rows split PoT-W4A4 / Fixed-W4A4 by a
/// weight-variance threshold at the A/(A+B) quantile (low variance -> PoT).
/// Per-row alpha comes from calibrate_alpha under the assigned spec.
/// Sensitivity is evaluated on the float (shadow-weight) forward.
RowAssignment assign_rows(const Model& model, const RatioConfig& ratio,
                          const Tensor& calib_features, const std::vector<int>& calib_labels,
                          uint64_t seed);

void apply_assignment(Model& model, const RowAssignment& asg);

/// Refresh policy: recompute on epochs that are positive multiples of the
/// interval, otherwise return the current assignment unchanged.
RowAssignment reassign(const Model& model, const RowAssignment& current, const RatioConfig& ratio,
                       const Tensor& calib_features, const std::vector<int>& calib_labels,
                       int epoch, uint64_t seed, int interval = 10);

double row_variance(const double* row, int64_t n);

}  // namespace rowquant

#endif  // ROWQUANT_ASSIGN_HPP
