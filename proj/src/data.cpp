#include "rowquant/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "rowquant/rng.hpp"

namespace rowquant {

int64_t Dataset::feature_dim() const {
  int64_t d = 1;
  for (int64_t v : input_shape) d *= v;
  return d;
}

void Dataset::validate() const {
  RQ_CHECK(class_count >= 1, "dataset has no classes");
  RQ_CHECK(static_cast<int64_t>(features.size()) == size() * feature_dim(),
           "dataset feature buffer does not match sample count");
  for (int l : labels) RQ_CHECK(l >= 0 && l < class_count, "label out of range");
}

void Dataset::compute_normalization() {
  const int64_t d = feature_dim();
  const int64_t n = size();
  mean.assign(static_cast<size_t>(d), 0.0);
  stddev.assign(static_cast<size_t>(d), 1.0);
  if (n == 0) return;
  for (int64_t i = 0; i < n; ++i) {
    const double* s = sample(i);
    for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += s[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i) {
    const double* s = sample(i);
    for (int64_t j = 0; j < d; ++j) {
      const double dd = s[j] - mean[static_cast<size_t>(j)];
      stddev[static_cast<size_t>(j)] += dd * dd;
    }
  }
  for (auto& s : stddev) s = std::sqrt((s - 1.0) / std::max<int64_t>(1, n));
}

Tensor Dataset::gather_features(const std::vector<int64_t>& idx) const {
  const int64_t d = feature_dim();
  Tensor out({static_cast<int64_t>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.data() + static_cast<int64_t>(i) * d, sample(idx[i]),
                static_cast<size_t>(d) * sizeof(double));
  return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int64_t>& idx) const {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<size_t>(idx[i])];
  return out;
}

Tensor Dataset::all_features() const {
  std::vector<int64_t> idx(static_cast<size_t>(size()));
  std::iota(idx.begin(), idx.end(), 0);
  return gather_features(idx);
}

void Dataset::head(int64_t n, Tensor* x, std::vector<int>* y) const {
  const int64_t take = std::min(n, size());
  RQ_CHECK(take > 0, "dataset is empty");
  std::vector<int64_t> idx(static_cast<size_t>(take));
  std::iota(idx.begin(), idx.end(), 0);
  *x = gather_features(idx);
  *y = gather_labels(idx);
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  RQ_CHECK(in.gcount() == 4, "truncated IDX file: " + path);
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  RQ_CHECK(img.good(), "cannot open IDX image file: " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  RQ_CHECK(lab.good(), "cannot open IDX label file: " + labels_path);

  const uint32_t img_magic = read_be32(img, images_path);
  RQ_CHECK(img_magic == 0x00000803u, "bad magic in IDX image file: " + images_path);
  const uint32_t n_img = read_be32(img, images_path);
  const uint32_t rows = read_be32(img, images_path);
  const uint32_t cols = read_be32(img, images_path);

  const uint32_t lab_magic = read_be32(lab, labels_path);
  RQ_CHECK(lab_magic == 0x00000801u, "bad magic in IDX label file: " + labels_path);
  const uint32_t n_lab = read_be32(lab, labels_path);
  RQ_CHECK(n_img == n_lab, "count mismatch between images (" + std::to_string(n_img) +
                               ") and labels (" + std::to_string(n_lab) + ")");

  Dataset ds;
  ds.input_shape = {1, static_cast<int64_t>(rows), static_cast<int64_t>(cols)};
  const size_t pixels = static_cast<size_t>(n_img) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
  RQ_CHECK(static_cast<size_t>(img.gcount()) == pixels, "truncated IDX file: " + images_path);

  ds.features.resize(pixels);
  for (size_t i = 0; i < pixels; ++i) ds.features[i] = static_cast<double>(raw[i]) / 255.0;

  std::vector<unsigned char> lraw(n_lab);
  lab.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(n_lab));
  RQ_CHECK(static_cast<size_t>(lab.gcount()) == n_lab, "truncated IDX file: " + labels_path);
  ds.labels.assign(lraw.begin(), lraw.end());

  int max_label = 0;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.class_count = max_label + 1;
  ds.compute_normalization();
  ds.validate();
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  RQ_CHECK(ds.input_shape.size() == 3 && ds.input_shape[0] == 1,
           "write_idx expects single-channel image data");
  std::ofstream img(images_path, std::ios::binary);
  RQ_CHECK(img.good(), "cannot write IDX image file: " + images_path);
  std::ofstream lab(labels_path, std::ios::binary);
  RQ_CHECK(lab.good(), "cannot write IDX label file: " + labels_path);

  write_be32(img, 0x00000803u);
  write_be32(img, static_cast<uint32_t>(ds.size()));
  write_be32(img, static_cast<uint32_t>(ds.input_shape[1]));
  write_be32(img, static_cast<uint32_t>(ds.input_shape[2]));
  std::vector<unsigned char> raw(ds.features.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    const double v = std::clamp(ds.features[i], 0.0, 1.0) * 255.0;
    raw[i] = static_cast<unsigned char>(std::lround(v));
  }
  img.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));

  write_be32(lab, 0x00000801u);
  write_be32(lab, static_cast<uint32_t>(ds.size()));
  std::vector<unsigned char> lraw(ds.labels.begin(), ds.labels.end());
  lab.write(reinterpret_cast<const char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  RQ_CHECK(in.good(), "cannot open CSV dataset: " + path);
  std::string line;
  RQ_CHECK(static_cast<bool>(std::getline(in, line)), "empty CSV dataset: " + path);
  RQ_CHECK(line.rfind("label", 0) == 0, "CSV dataset must start with a 'label,f0,...' header");

  Dataset ds;
  int64_t dim = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    size_t pos = 0;
    while (pos <= line.size()) {
      size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      row.push_back(std::stod(line.substr(pos, comma - pos)));
      pos = comma + 1;
    }
    RQ_CHECK(row.size() >= 2, "CSV row needs a label and at least one feature");
    if (dim < 0) dim = static_cast<int64_t>(row.size()) - 1;
    RQ_CHECK(static_cast<int64_t>(row.size()) - 1 == dim, "ragged CSV row in " + path);
    ds.labels.push_back(static_cast<int>(row[0]));
    ds.features.insert(ds.features.end(), row.begin() + 1, row.end());
  }
  RQ_CHECK(dim > 0 && !ds.labels.empty(), "CSV dataset has no samples: " + path);
  ds.input_shape = {dim};
  int max_label = 0;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.class_count = max_label + 1;
  ds.compute_normalization();
  ds.validate();
  return ds;
}

void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  RQ_CHECK(out.good(), "cannot write CSV dataset: " + path);
  const int64_t d = ds.feature_dim();
  out << "label";
  for (int64_t j = 0; j < d; ++j) out << ",f" << j;
  out << "\n";
  char buf[32];
  for (int64_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[static_cast<size_t>(i)];
    const double* s = ds.sample(i);
    for (int64_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", s[j]);
      out << ',' << buf;
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// synthetic datasets
// ---------------------------------------------------------------------------

Dataset synth_gaussians(int classes, int dims, int n_per_class, uint64_t seed) {
  RQ_CHECK(classes >= 2, "synth_gaussians needs at least two classes");
  RQ_CHECK(dims >= 1, "synth_gaussians needs at least one dimension");
  RQ_CHECK(n_per_class >= 0, "negative samples per class");

  Dataset ds;
  ds.input_shape = {dims};
  ds.class_count = classes;
  Rng rng(Rng::mix(seed, 0xDA7A));

  // Means on coordinate axes, 4 sigma from the origin (pairwise distance
  // 4*sqrt(2) sigma for distinct axes, 4 sigma across shells).
  for (int c = 0; c < classes; ++c) {
    std::vector<double> mu(static_cast<size_t>(dims), 0.0);
    const int axis = c % dims;
    const double shell = 4.0 * (1.0 + static_cast<double>(c / dims));
    mu[static_cast<size_t>(axis)] = shell;
    for (int i = 0; i < n_per_class; ++i) {
      for (int d = 0; d < dims; ++d)
        ds.features.push_back(mu[static_cast<size_t>(d)] + rng.gaussian());
      ds.labels.push_back(c);
    }
  }
  ds.compute_normalization();
  ds.validate();
  return ds;
}

Dataset synth_images(int classes, int hw, int n_per_class, uint64_t seed) {
  RQ_CHECK(classes >= 2, "synth_images needs at least two classes");
  RQ_CHECK(hw >= 8, "synth_images needs at least 8x8 images");
  RQ_CHECK(n_per_class >= 0, "negative samples per class");

  Dataset ds;
  ds.input_shape = {1, hw, hw};
  ds.class_count = classes;

  // Class templates: coarse 4x4 binary masks upsampled to hw x hw,
  // regenerated until pairwise Hamming distance >= 5.
  Rng trng(Rng::mix(seed, 0x7E301A7Eu));
  std::vector<std::vector<int>> masks;
  while (static_cast<int>(masks.size()) < classes) {
    std::vector<int> m(16);
    int ones = 0;
    for (auto& v : m) {
      v = trng.uniform() < 0.45 ? 1 : 0;
      ones += v;
    }
    if (ones < 4 || ones > 12) continue;
    bool distinct = true;
    for (const auto& prev : masks) {
      int d = 0;
      for (size_t i = 0; i < m.size(); ++i) d += m[i] != prev[i];
      if (d < 5) {
        distinct = false;
        break;
      }
    }
    if (distinct) masks.push_back(std::move(m));
  }

  const int cell = hw / 4;
  Rng rng(Rng::mix(seed, 0x5A3D));
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      const int dx = static_cast<int>(rng.uniform_int(-3, 3));
      const int dy = static_cast<int>(rng.uniform_int(-3, 3));
      const double bright = rng.uniform(0.55, 1.0);
      for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
          const int sy = y - dy, sx = x - dx;
          double v = 0.0;
          if (sy >= 0 && sy < hw && sx >= 0 && sx < hw) {
            const int my = std::min(3, sy / cell), mx = std::min(3, sx / cell);
            v = masks[static_cast<size_t>(c)][static_cast<size_t>(my * 4 + mx)] ? bright : 0.0;
          }
          v += 0.18 * rng.gaussian();
          // snap to the u8 grid so IDX round trips are exact
          v = std::clamp(v, 0.0, 1.0);
          ds.features.push_back(std::lround(v * 255.0) / 255.0);
        }
      }
      ds.labels.push_back(c);
    }
  }
  ds.compute_normalization();
  ds.validate();
  return ds;
}

Dataset take_per_class(const Dataset& ds, int64_t from, int64_t to) {
  RQ_CHECK(0 <= from && from <= to, "invalid per-class range");
  Dataset out;
  out.input_shape = ds.input_shape;
  out.class_count = ds.class_count;
  std::vector<int64_t> seen(static_cast<size_t>(ds.class_count), 0);
  const int64_t d = ds.feature_dim();
  for (int64_t i = 0; i < ds.size(); ++i) {
    const int c = ds.labels[static_cast<size_t>(i)];
    const int64_t k = seen[static_cast<size_t>(c)]++;
    if (k < from || k >= to) continue;
    const double* s = ds.sample(i);
    out.features.insert(out.features.end(), s, s + d);
    out.labels.push_back(c);
  }
  out.compute_normalization();
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

Batcher::Batcher(int64_t n, int64_t batch_size, uint64_t seed)
    : n_(n), batch_size_(batch_size), seed_(seed) {
  RQ_CHECK(n >= 1, "batcher needs at least one sample");
  RQ_CHECK(batch_size >= 1, "batch size must be >= 1");
}

std::vector<std::vector<int64_t>> Batcher::epoch_batches(int epoch) {
  std::vector<int64_t> order(static_cast<size_t>(n_));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::mix(seed_, 0xBA7C4, static_cast<uint64_t>(epoch)));
  rng.shuffle(order);

  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n_; start += batch_size_) {
    const int64_t end = std::min(n_, start + batch_size_);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

}  // namespace rowquant
