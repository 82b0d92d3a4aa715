#ifndef ROWQUANT_DATA_HPP
#define ROWQUANT_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "rowquant/tensor.hpp"

namespace rowquant {

/// In-memory labeled dataset. Features are stored flat, sample-major.
struct Dataset {
  std::vector<int64_t> input_shape;  // {C,H,W} for images, {D} for flat features
  std::vector<double> features;
  std::vector<int> labels;
  int class_count = 0;
  std::vector<double> mean, stddev;  // per-feature normalization stats

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t feature_dim() const;
  const double* sample(int64_t i) const { return features.data() + i * feature_dim(); }

  void compute_normalization();
  void validate() const;

  /// Gathers a batch of samples into a [n, feature_dim] tensor.
  Tensor gather_features(const std::vector<int64_t>& idx) const;
  std::vector<int> gather_labels(const std::vector<int64_t>& idx) const;
  Tensor all_features() const;

  /// First min(n, size) samples as a fixed calibration batch.
  void head(int64_t n, Tensor* x, std::vector<int>* y) const;
};

/// IDX readers/writers (big-endian; magic 0x803 for u8 images, 0x801 for
/// u8 labels). Pixels are scaled to [0, 1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

/// CSV with header "label,f0,f1,...".
Dataset load_csv(const std::string& path);
void write_csv(const Dataset& ds, const std::string& path);

/// Seeded isotropic Gaussian blobs, unit sigma, class means 4 sigma apart.
Dataset synth_gaussians(int classes, int dims, int n_per_class, uint64_t seed);

/// Seeded image dataset in MNIST-like geometry: per-class high-contrast
/// block patterns with per-sample shift jitter and pixel noise, pixel
/// values on the u8/255 grid.
Dataset synth_images(int classes, int hw, int n_per_class, uint64_t seed);

/// Samples whose within-class index falls in [from, to); keeps train/test
/// splits of a synthetic dataset on the same class patterns.
Dataset take_per_class(const Dataset& ds, int64_t from, int64_t to);

/// Deterministic shuffled minibatch index stream.
class Batcher {
 public:
  Batcher(int64_t n, int64_t batch_size, uint64_t seed);

  /// Shuffled index order for one epoch (same seed => same permutations).
  std::vector<std::vector<int64_t>> epoch_batches(int epoch);

 private:
  int64_t n_;
  int64_t batch_size_;
  uint64_t seed_;
};

}  // namespace rowquant

#endif  // ROWQUANT_DATA_HPP
