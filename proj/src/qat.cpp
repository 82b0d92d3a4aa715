#include "rowquant/qat.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "rowquant/rng.hpp"

namespace rowquant {

LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "step") return LrSchedule::Step;
  if (s == "cosine") return LrSchedule::Cosine;
  fail("unknown lr schedule: " + s);
}

std::string lr_schedule_name(LrSchedule s) {
  return s == LrSchedule::Step ? "step" : "cosine";
}

void TrainConfig::validate() const {
  RQ_CHECK(epochs >= 1, "epochs must be >= 1");
  RQ_CHECK(batch_size >= 1, "batch_size must be >= 1");
  RQ_CHECK(learning_rate > 0, "learning_rate must be positive");
  ratio.validate();
}

namespace {

double schedule_lr(const TrainConfig& cfg, int epoch) {
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  if (cfg.lr_schedule == LrSchedule::Cosine)
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
  double lr = cfg.learning_rate;  // step: x0.1 at 50% and 75%
  if (t >= 0.5) lr *= 0.1;
  if (t >= 0.75) lr *= 0.1;
  return lr;
}

class SgdMomentum {
 public:
  SgdMomentum(std::vector<Var> params, double momentum, double clip_decay)
      : params_(std::move(params)), momentum_(momentum), clip_decay_(clip_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.shape());
  }

  void step(double lr, const std::vector<bool>& is_clip) {
    for (size_t i = 0; i < params_.size(); ++i) {
      Var& p = params_[i];
      if (!p.has_grad()) continue;
      Tensor& v = velocity_[i];
      const Tensor& g = p.grad();
      Tensor& w = p.value_mut();
      const double wd = is_clip[i] ? clip_decay_ : 0.0;
      for (int64_t j = 0; j < w.numel(); ++j) {
        v[j] = momentum_ * v[j] + g[j] + wd * w[j];
        w[j] -= lr * v[j];
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> velocity_;
  double momentum_;
  double clip_decay_;
};

double accuracy_on(const Model& model, const Dataset& data, bool quantized) {
  RQ_CHECK(data.size() > 0, "cannot evaluate on an empty dataset");
  NoGradGuard ng;
  int64_t hits = 0;
  const int64_t chunk = 256;
  for (int64_t start = 0; start < data.size(); start += chunk) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    Tensor x = data.gather_features(idx);
    std::vector<int> y = data.gather_labels(idx);
    Tensor logits = forward(model, Var(x), quantized).value();
    std::vector<int> pred = argmax_rows(logits);
    for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == y[i];
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainResult run_training(Model& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg, bool quantized) {
  cfg.validate();
  train.validate();
  RQ_CHECK(train.size() >= 1, "training set is empty");
  RQ_CHECK(train.feature_dim() == model.input_dim(), "dataset does not match model input");
  RQ_CHECK(train.class_count <= model.classes, "dataset has more classes than the model");

  Tensor calib_x;
  std::vector<int> calib_y;
  RowAssignment assignment;
  if (quantized) {
    train.head(cfg.hessian_calib_samples, &calib_x, &calib_y);
    assignment = assign_rows(model, cfg.ratio, calib_x, calib_y, cfg.seed);
    apply_assignment(model, assignment);
  }

  std::vector<Var> params = parameters(model);
  std::vector<bool> is_clip;
  for (const auto& l : model.layers) {
    if (l.weight.defined()) is_clip.push_back(false);
    if (l.bias.defined()) is_clip.push_back(false);
    if (l.act_clip.defined()) is_clip.push_back(true);
  }
  SgdMomentum opt(params, cfg.momentum, quantized ? cfg.clip_decay : 0.0);
  Batcher batcher(train.size(), cfg.batch_size, Rng::mix(cfg.seed, 0x0E90C));

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (quantized && epoch > 0 && cfg.reassign_interval > 0 &&
        epoch % cfg.reassign_interval == 0) {
      assignment = reassign(model, assignment, cfg.ratio, calib_x, calib_y, epoch, cfg.seed,
                            cfg.reassign_interval);
      apply_assignment(model, assignment);
    }

    const double lr = schedule_lr(cfg, epoch);
    double loss_sum = 0.0;
    int64_t hit = 0, seen = 0;
    for (const auto& batch : batcher.epoch_batches(epoch)) {
      Tensor x = train.gather_features(batch);
      std::vector<int> y = train.gather_labels(batch);
      Var logits = forward(model, Var(x), quantized);
      Var loss = softmax_cross_entropy(logits, y);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "training diverged (non-finite loss) at epoch " << epoch;
        throw TrainingDiverged(os.str());
      }
      loss_sum += lv * static_cast<double>(batch.size());
      std::vector<int> pred = argmax_rows(logits.value());
      for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == y[i];
      seen += static_cast<int64_t>(batch.size());

      backward(loss);
      opt.step(lr, is_clip);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = 100.0 * static_cast<double>(hit) / static_cast<double>(seen);
    m.val_acc = val.size() > 0 ? accuracy_on(model, val, quantized) : 0.0;
    result.log.push_back(m);
  }
  return result;
}

}  // namespace

TrainResult train_float(Model& model, const Dataset& train, const Dataset& val,
                        const TrainConfig& cfg) {
  return run_training(model, train, val, cfg, /*quantized=*/false);
}

TrainResult train_quantized(Model& model, const Dataset& train, const Dataset& val,
                            const TrainConfig& cfg) {
  return run_training(model, train, val, cfg, /*quantized=*/true);
}

EvalReport evaluate(const Model& model, const Dataset& data, bool quantized) {
  RQ_CHECK(data.size() > 0, "cannot evaluate on an empty dataset");
  NoGradGuard ng;
  EvalReport rep;
  rep.samples = data.size();
  int64_t top1 = 0, top5 = 0;
  const int64_t chunk = 256;
  for (int64_t start = 0; start < data.size(); start += chunk) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    Tensor x = data.gather_features(idx);
    std::vector<int> y = data.gather_labels(idx);
    Tensor logits = forward(model, Var(x), quantized).value();
    const int64_t classes = logits.dim(1);
    for (int64_t r = 0; r < logits.dim(0); ++r) {
      const int label = y[static_cast<size_t>(r)];
      const double lv = logits.at(r, label);
      int better = 0;
      for (int64_t c = 0; c < classes; ++c)
        if (logits.at(r, c) > lv) ++better;
      if (better == 0) ++top1;
      if (better < 5) ++top5;
    }
  }
  rep.top1 = 100.0 * static_cast<double>(top1) / static_cast<double>(rep.samples);
  rep.top5 = 100.0 * static_cast<double>(top5) / static_cast<double>(rep.samples);
  return rep;
}

std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,val_acc,lr\n";
  char buf[128];
  for (const auto& m : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", m.epoch, m.train_loss,
                  m.train_acc, m.val_acc, m.lr);
    os << buf;
  }
  return os.str();
}

}  // namespace rowquant
