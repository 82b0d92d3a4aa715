#ifndef ROWQUANT_HWMODEL_HPP
#define ROWQUANT_HWMODEL_HPP

#include <string>
#include <vector>

#include "rowquant/assign.hpp"
#include "rowquant/nn.hpp"

namespace rowquant {

/// FPGA resource budgets and per-PE cost coefficients. The PoT core
/// consumes LUTs only; the Fixed cores consume DSPs plus a LUT overhead.
struct DeviceProfile {
  std::string name;
  int64_t luts = 0;
  int64_t dsps = 0;
  int64_t lut_cost_per_pot_pe = 1;
  int64_t lut_cost_per_fixed_pe_overhead = 0;
  int64_t dsp_cost_per_fixed4_pe = 1;
  int64_t dsp_cost_per_fixed8_pe = 1;
  int64_t freq_mhz = 100;

  void validate() const;
  /// "key = value" text file.
  static DeviceProfile load(const std::string& path);
  void save(const std::string& path) const;
};

struct CoreAllocation {
  int64_t pot4_pes = 0;
  int64_t fixed4_pes = 0;
  int64_t fixed8_pes = 0;
  int64_t luts_used = 0;
  int64_t dsps_used = 0;
};

/// Work fractions per core (sum to 1).
struct WorkShares {
  double pot4 = 0.0;
  double fixed4 = 0.0;
  double fixed8 = 0.0;
};

struct InfeasibleAllocation : std::runtime_error {
  explicit InfeasibleAllocation(const std::string& what) : std::runtime_error(what) {}
};

/// Sizes the PE arrays: Fixed cores split the DSP budget in proportion to
/// their work shares (greedy fill to saturation), then every remaining LUT
/// goes to the PoT core. Deterministic; throws InfeasibleAllocation when a
/// core with work cannot reach one PE.
CoreAllocation allocate_shares(const DeviceProfile& profile, const WorkShares& shares);
CoreAllocation allocate_cores(const DeviceProfile& profile, const RatioConfig& ratio);

/// One layer for costing purposes: row count and MACs per row (per input).
struct LayerShape {
  std::string name;
  int64_t rows = 0;
  int64_t macs_per_row = 0;

  int64_t macs() const { return rows * macs_per_row; }
};

/// Cores run concurrently within a layer; layers run sequentially.
int64_t estimate_layer_cycles(int64_t macs_pot, int64_t macs_fixed4, int64_t macs_fixed8,
                              const CoreAllocation& alloc);

struct LayerCost {
  std::string name;
  int64_t cycles = 0;
};

struct CostReport {
  std::string device;
  std::string ratio;
  CoreAllocation alloc;
  std::vector<LayerCost> per_layer;
  int64_t total_cycles = 0;
  int64_t total_macs = 0;
  double latency_ms = 0.0;
  double throughput_gops = 0.0;
  double lut_util = 0.0;  // percent
  double dsp_util = 0.0;  // percent

  std::string to_csv() const;
  std::string to_table() const;
};

/// Aggregates per-layer cycle estimates under the given ratio. With
/// first_last_w8 the first and last layers run entirely on the Fixed-8
/// core. Rejects empty models.
CostReport report(const std::vector<LayerShape>& layers, const RatioConfig& ratio,
                  const DeviceProfile& profile, bool first_last_w8 = false);

/// ResNet-18 at 224x224 input, the reference workload for profile fitting.
std::vector<LayerShape> resnet18_imagenet_shape();
std::vector<LayerShape> named_shape(const std::string& name);
std::vector<LayerShape> model_cost_shape(const Model& model);

}  // namespace rowquant

#endif  // ROWQUANT_HWMODEL_HPP
