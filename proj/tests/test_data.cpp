#include <cstdio>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "rowquant/data.hpp"
#include "rowquant/rng.hpp"

using namespace rowquant;

namespace {

std::string tmp_path(const std::string& name) { return "/tmp/rowquant_test_" + name; }

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void be32(std::vector<unsigned char>* v, uint32_t x) {
  v->push_back(static_cast<unsigned char>(x >> 24));
  v->push_back(static_cast<unsigned char>(x >> 16));
  v->push_back(static_cast<unsigned char>(x >> 8));
  v->push_back(static_cast<unsigned char>(x));
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("IDX: hand-built two-image fixture loads exactly") {
  std::vector<unsigned char> img;
  be32(&img, 0x803);
  be32(&img, 2);  // two 2x2 images
  be32(&img, 2);
  be32(&img, 2);
  for (unsigned char p : {0, 51, 102, 255, 255, 204, 153, 0}) img.push_back(p);
  std::vector<unsigned char> lab;
  be32(&lab, 0x801);
  be32(&lab, 2);
  lab.push_back(1);
  lab.push_back(0);

  const std::string ip = tmp_path("fixture-images"), lp = tmp_path("fixture-labels");
  write_bytes(ip, img);
  write_bytes(lp, lab);

  Dataset ds = load_idx(ip, lp);
  REQUIRE(ds.size() == 2);
  CHECK(ds.input_shape == std::vector<int64_t>{1, 2, 2});
  CHECK(ds.labels[0] == 1);
  CHECK(ds.labels[1] == 0);
  CHECK(ds.features[0] == 0.0);
  CHECK(ds.features[1] == 51.0 / 255);
  CHECK(ds.features[3] == 1.0);
  CHECK(ds.features[4] == 1.0);
}

TEST_CASE("IDX: count mismatch and truncation are rejected") {
  std::vector<unsigned char> img;
  be32(&img, 0x803);
  be32(&img, 2);
  be32(&img, 1);
  be32(&img, 1);
  img.push_back(7);
  img.push_back(9);
  std::vector<unsigned char> lab;
  be32(&lab, 0x801);
  be32(&lab, 3);  // wrong count
  lab.push_back(0);
  lab.push_back(1);
  lab.push_back(0);

  const std::string ip = tmp_path("mismatch-images"), lp = tmp_path("mismatch-labels");
  write_bytes(ip, img);
  write_bytes(lp, lab);
  CHECK_THROWS_WITH_AS(load_idx(ip, lp), doctest::Contains("count mismatch"),
                       std::invalid_argument);

  const std::string ep = tmp_path("empty-file");
  write_bytes(ep, {});
  CHECK_THROWS_WITH_AS(load_idx(ep, lp), doctest::Contains("truncated"), std::invalid_argument);

  std::vector<unsigned char> badmagic;
  be32(&badmagic, 0x802);
  be32(&badmagic, 0);
  be32(&badmagic, 1);
  be32(&badmagic, 1);
  const std::string bp = tmp_path("bad-magic");
  write_bytes(bp, badmagic);
  CHECK_THROWS_WITH_AS(load_idx(bp, lp), doctest::Contains("bad magic"), std::invalid_argument);
}

TEST_CASE("IDX round trip is byte-identical") {
  Dataset ds = synth_images(4, 16, 6, 77);
  const std::string i1 = tmp_path("rt1-images"), l1 = tmp_path("rt1-labels");
  write_idx(ds, i1, l1);
  Dataset back = load_idx(i1, l1);
  REQUIRE(back.size() == ds.size());
  for (size_t i = 0; i < ds.features.size(); ++i) CHECK(back.features[i] == ds.features[i]);

  const std::string i2 = tmp_path("rt2-images"), l2 = tmp_path("rt2-labels");
  write_idx(back, i2, l2);
  CHECK(slurp(i1) == slurp(i2));
  CHECK(slurp(l1) == slurp(l2));
}

TEST_CASE("CSV round trip is value-exact") {
  Dataset ds = synth_gaussians(3, 4, 5, 123);
  const std::string p = tmp_path("ds.csv");
  write_csv(ds, p);
  Dataset back = load_csv(p);
  REQUIRE(back.size() == ds.size());
  CHECK(back.input_shape == ds.input_shape);
  for (size_t i = 0; i < ds.features.size(); ++i) CHECK(back.features[i] == ds.features[i]);
  CHECK(back.labels == ds.labels);
}

TEST_CASE("synth_gaussians: determinism, degenerate size, separability") {
  Dataset a = synth_gaussians(2, 2, 50, 9);
  Dataset b = synth_gaussians(2, 2, 50, 9);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);

  Dataset empty = synth_gaussians(2, 2, 0, 9);
  CHECK(empty.size() == 0);

  // Linear oracle: nearest class mean classifies >= 99% of training points.
  Dataset big = synth_gaussians(2, 2, 500, 31);
  double mean[2][2] = {{0, 0}, {0, 0}};
  int count[2] = {0, 0};
  for (int64_t i = 0; i < big.size(); ++i) {
    const double* s = big.sample(i);
    const int c = big.labels[static_cast<size_t>(i)];
    mean[c][0] += s[0];
    mean[c][1] += s[1];
    ++count[c];
  }
  for (int c = 0; c < 2; ++c) {
    mean[c][0] /= count[c];
    mean[c][1] /= count[c];
  }
  int hits = 0;
  for (int64_t i = 0; i < big.size(); ++i) {
    const double* s = big.sample(i);
    double d0 = 0, d1 = 0;
    for (int k = 0; k < 2; ++k) {
      d0 += (s[k] - mean[0][k]) * (s[k] - mean[0][k]);
      d1 += (s[k] - mean[1][k]) * (s[k] - mean[1][k]);
    }
    const int pred = d0 <= d1 ? 0 : 1;
    hits += pred == big.labels[static_cast<size_t>(i)];
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(big.size()) >= 0.99);
}

TEST_CASE("synth_images: deterministic, on the u8 grid, distinct classes") {
  Dataset a = synth_images(10, 28, 3, 5);
  Dataset b = synth_images(10, 28, 3, 5);
  CHECK(a.features == b.features);
  CHECK(a.size() == 30);
  CHECK(a.input_shape == std::vector<int64_t>{1, 28, 28});
  for (double v : a.features) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == std::lround(v * 255.0) / 255.0);
  }
}

TEST_CASE("batcher: reproducible permutations covering every sample") {
  Batcher x(100, 32, 42);
  Batcher y(100, 32, 42);
  for (int epoch : {0, 1, 5}) {
    auto bx = x.epoch_batches(epoch);
    auto by = y.epoch_batches(epoch);
    CHECK(bx == by);
    std::vector<bool> seen(100, false);
    size_t total = 0;
    for (const auto& batch : bx) {
      total += batch.size();
      for (int64_t i : batch) seen[static_cast<size_t>(i)] = true;
    }
    CHECK(total == 100);
    for (bool s : seen) CHECK(s);
  }
  // different epochs shuffle differently
  CHECK(x.epoch_batches(0) != x.epoch_batches(1));
}
