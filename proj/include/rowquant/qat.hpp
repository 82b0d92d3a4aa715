#ifndef ROWQUANT_QAT_HPP
#define ROWQUANT_QAT_HPP

#include <stdexcept>
#include <string>
#include <vector>

#include "rowquant/assign.hpp"
#include "rowquant/data.hpp"
#include "rowquant/nn.hpp"

namespace rowquant {

enum class LrSchedule { Step, Cosine };
LrSchedule parse_lr_schedule(const std::string& s);
std::string lr_schedule_name(LrSchedule s);

struct TrainConfig {
  int epochs = 10;
  int64_t batch_size = 32;
  double learning_rate = 8e-3;
  LrSchedule lr_schedule = LrSchedule::Cosine;
  uint64_t seed = 0;
  RatioConfig ratio{65, 30, 5};
  int reassign_interval = 10;
  double momentum = 0.9;
  // PACT-style L2 pull on the learnable activation clips.
  double clip_decay = 1e-3;
  int64_t hessian_calib_samples = 128;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> log;
};

/// Thrown when the training loss turns non-finite.
struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

/// Float baseline training (SGD + momentum, step/cosine decay).
TrainResult train_float(Model& model, const Dataset& train, const Dataset& val,
                        const TrainConfig& cfg);

/// Quantization-aware training: assigns schemes/precisions per row up
/// front, trains shadow weights through the STE projections, refreshes the
/// assignment every reassign_interval epochs.
TrainResult train_quantized(Model& model, const Dataset& train, const Dataset& val,
                            const TrainConfig& cfg);

struct EvalReport {
  double top1 = 0.0;
  double top5 = 0.0;  // meaningful when classes >= 5
  int64_t samples = 0;
};

EvalReport evaluate(const Model& model, const Dataset& data, bool quantized);

std::string metrics_csv(const std::vector<EpochMetrics>& log);

}  // namespace rowquant

#endif  // ROWQUANT_QAT_HPP
