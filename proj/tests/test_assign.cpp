#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "rowquant/assign.hpp"
#include "rowquant/rng.hpp"

using namespace rowquant;

namespace {

// Test-only dense eigensolver oracle: cyclic Jacobi rotations.
std::vector<double> jacobi_eigenvalues(Tensor a) {
  const int64_t n = a.dim(0);
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (int64_t p = 0; p < n; ++p)
      for (int64_t q = p + 1; q < n; ++q) off = std::max(off, std::fabs(a.at(p, q)));
    if (off < 1e-13) break;
    for (int64_t p = 0; p < n; ++p)
      for (int64_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2 * apq);
        const double t =
            (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1.0 / std::sqrt(t * t + 1);
        const double s = t * c;
        for (int64_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (int64_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev;
  for (int64_t i = 0; i < n; ++i) ev.push_back(a.at(i, i));
  return ev;
}

// Symmetric matrix with a dominant eigenvalue well separated in magnitude:
// |lambda_1| in [1,3], all others <= 0.7*|lambda_1|.
Tensor random_spd_like(int64_t n, Rng& rng, double* dominant) {
  // Random orthogonal basis via Gram-Schmidt.
  std::vector<std::vector<double>> q(static_cast<size_t>(n),
                                     std::vector<double>(static_cast<size_t>(n)));
  for (auto& row : q) {
    for (auto& v : row) v = rng.gaussian();
  }
  for (size_t i = 0; i < q.size(); ++i) {
    for (size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (size_t k = 0; k < q[i].size(); ++k) d += q[i][k] * q[j][k];
      for (size_t k = 0; k < q[i].size(); ++k) q[i][k] -= d * q[j][k];
    }
    double nrm = 0.0;
    for (double v : q[i]) nrm += v * v;
    nrm = std::sqrt(nrm);
    for (auto& v : q[i]) v /= nrm;
  }
  std::vector<double> lam(static_cast<size_t>(n));
  lam[0] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(1.0, 3.0);
  for (size_t i = 1; i < lam.size(); ++i) lam[i] = rng.uniform(-0.6, 0.6) * std::fabs(lam[0]);
  *dominant = lam[0];

  Tensor a({n, n});
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (int64_t k = 0; k < n; ++k)
        s += lam[static_cast<size_t>(k)] * q[static_cast<size_t>(k)][static_cast<size_t>(r)] *
             q[static_cast<size_t>(k)][static_cast<size_t>(c)];
      a.at(r, c) = s;
    }
  return a;
}

Var quadratic_loss(const Var& w, const Tensor& a) {
  return scale(sum_all(mul(matmul(w, Var(a)), w)), 0.5);
}

Model tiny_mlp(uint64_t seed) { return make_model("mlp-small", {12}, 3, seed); }

void calib_data(int64_t n, int64_t dim, int classes, uint64_t seed, Tensor* x,
                std::vector<int>* y) {
  Rng rng(seed);
  *x = Tensor({n, dim});
  y->resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n * dim; ++i) (*x)[i] = rng.gaussian();
  for (int64_t i = 0; i < n; ++i)
    (*y)[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(0, classes - 1));
}

bool assignments_equal(const RowAssignment& a, const RowAssignment& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t i = 0; i < a.layers.size(); ++i) {
    if (!(a.layers[i].specs == b.layers[i].specs)) return false;
    if (a.layers[i].alphas != b.layers[i].alphas) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("ratio parsing and validation") {
  RatioConfig r = RatioConfig::parse("65:30:5");
  CHECK(r.pot4 == 65);
  CHECK(r.fixed4 == 30);
  CHECK(r.fixed8 == 5);
  CHECK(r.str() == "65:30:5");
  CHECK_THROWS_AS(RatioConfig::parse("65:30:6"), std::invalid_argument);
  CHECK_THROWS_AS(RatioConfig::parse("65:30"), std::invalid_argument);
  CHECK_THROWS_AS(RatioConfig::parse("a:b:c"), std::invalid_argument);
}

TEST_CASE("plan_counts: worked example and degenerate ratios") {
  SpecCounts c = plan_counts(20, RatioConfig{65, 30, 5});
  CHECK(c.fixed8 == 1);   // round(20*0.05)
  CHECK(c.pot4 == 13);    // round(19*65/95)
  CHECK(c.fixed4 == 6);   // remainder

  c = plan_counts(64, RatioConfig{0, 100, 0});
  CHECK(c.pot4 == 0);
  CHECK(c.fixed8 == 0);
  CHECK(c.fixed4 == 64);

  c = plan_counts(64, RatioConfig{100, 0, 0});
  CHECK(c.pot4 == 64);

  // single row, C>0: the higher precision wins
  c = plan_counts(1, RatioConfig{65, 30, 5});
  CHECK(c.fixed8 == 1);
  CHECK(c.pot4 == 0);
  CHECK(c.fixed4 == 0);
}

TEST_CASE("plan_counts: exactness over all sizes and the ratio set") {
  const RatioConfig ratios[] = {{65, 30, 5}, {60, 35, 5}, {100, 0, 0}, {0, 100, 0}, {50, 50, 0}};
  for (const auto& r : ratios) {
    for (int64_t f = 1; f <= 512; ++f) {
      const SpecCounts c = plan_counts(f, r);
      CHECK(c.fixed8 + c.pot4 + c.fixed4 == f);
      CHECK(c.fixed8 >= 0);
      CHECK(c.pot4 >= 0);
      CHECK(c.fixed4 >= 0);
      // the documented formula, recomputed
      int64_t n8 = 0;
      if (r.fixed8 > 0)
        n8 = std::clamp<int64_t>(
            static_cast<int64_t>(std::floor(static_cast<double>(f) * r.fixed8 / 100.0 + 0.5)), 1,
            f);
      CHECK(c.fixed8 == n8);
      const int64_t rest = f - n8;
      int64_t npot = 0;
      if (r.pot4 > 0 && rest > 0)
        npot = std::min<int64_t>(
            rest, static_cast<int64_t>(std::floor(
                      static_cast<double>(rest) * r.pot4 / (r.pot4 + r.fixed4) + 0.5)));
      CHECK(c.pot4 == npot);
      CHECK(c.fixed4 == rest - npot);
    }
  }
}

TEST_CASE("power iteration: diagonal quadratic reaches the top eigenvalue") {
  Var w(Tensor({1, 3}, {0.4, -0.2, 0.9}), true);
  Tensor a({3, 3});
  a.at(0, 0) = 1;
  a.at(1, 1) = 2;
  a.at(2, 2) = 5;
  Var loss = quadratic_loss(w, a);
  HessianEstimate est = top_eigenvalue(loss, w, 20, 7);
  CHECK(std::fabs(est.lambda - 5.0) <= 1e-6);
  CHECK(est.iterations_used <= 20);
  CHECK(est.converged);
}

TEST_CASE("power iteration: zero Hessian cases") {
  Var w(Tensor({4}, {1, 2, 3, 4}), true);
  Var c(Tensor({4}, {2, -1, 0.5, 3}));
  HessianEstimate est = top_eigenvalue(dot(w, c), w, 20, 3);
  CHECK(est.lambda == 0.0);
  CHECK(est.converged);
  CHECK(est.iterations_used >= 1);

  // zero gradient: loss does not touch w at all
  Var other(Tensor({2}, {1, 1}), true);
  Var loss = dot(other, other);
  HessianEstimate z = top_eigenvalue(loss, w, 20, 3);
  CHECK(z.lambda == 0.0);
  CHECK(z.converged);
  CHECK(z.iterations_used == 1);
}

TEST_CASE("power iteration matches the Jacobi oracle on random symmetric matrices") {
  Rng rng(2025);
  for (int rep = 0; rep < 25; ++rep) {
    const int64_t n = 8;
    double dominant = 0.0;
    Tensor a = random_spd_like(n, rng, &dominant);

    std::vector<double> ev = jacobi_eigenvalues(a);
    double oracle = 0.0;
    for (double v : ev)
      if (std::fabs(v) > std::fabs(oracle)) oracle = v;
    CHECK(std::fabs(std::fabs(oracle) - std::fabs(dominant)) <= 1e-8);

    Var w(Tensor({1, n}, std::vector<double>(static_cast<size_t>(n), 0.1)), true);
    Var loss = quadratic_loss(w, a);
    HessianEstimate est = top_eigenvalue(loss, w, 20, 1000 + static_cast<uint64_t>(rep));
    CHECK(est.iterations_used <= 20);
    CHECK(std::fabs(est.lambda - oracle) <= 1e-3 * std::fabs(oracle));
  }
}

TEST_CASE("scaling the loss scales lambda but not the ranking") {
  Rng rng(11);
  const int64_t n = 6;
  double dominant = 0.0;
  Tensor a = random_spd_like(n, rng, &dominant);
  Var w(Tensor({1, n}, std::vector<double>(static_cast<size_t>(n), 0.2)), true);

  HessianEstimate base = top_eigenvalue(quadratic_loss(w, a), w, 20, 5);
  HessianEstimate scaled = top_eigenvalue(scale(quadratic_loss(w, a), 3.0), w, 20, 5);
  CHECK(std::fabs(scaled.lambda - 3.0 * base.lambda) <= 1e-6 * std::fabs(scaled.lambda));
}

TEST_CASE("assign_rows: counts, variance ordering, alphas") {
  Model m = tiny_mlp(99);
  Tensor x;
  std::vector<int> y;
  calib_data(32, 12, 3, 4, &x, &y);

  RowAssignment asg = assign_rows(m, RatioConfig{65, 30, 5}, x, y, 1);
  const auto qlayers = m.quantizable_layers();
  REQUIRE(asg.layers.size() == qlayers.size());

  for (size_t qi = 0; qi < qlayers.size(); ++qi) {
    const Layer& layer = m.layers[qlayers[qi]];
    const int64_t rows = layer.rows();
    const SpecCounts want = plan_counts(rows, RatioConfig{65, 30, 5});
    int64_t n8 = 0, np = 0, nf = 0;
    for (const auto& s : asg.layers[qi].specs) {
      if (s == QuantSpec::fixed8())
        ++n8;
      else if (s == QuantSpec::pot4())
        ++np;
      else
        ++nf;
    }
    CHECK(n8 == want.fixed8);
    CHECK(np == want.pot4);
    CHECK(nf == want.fixed4);

    // Variance ordering: every PoT row's variance <= every Fixed-4 row's.
    const Tensor& w = layer.weight.value();
    const int64_t len = layer.row_len();
    double max_pot = -1e300, min_f4 = 1e300;
    for (int64_t r = 0; r < rows; ++r) {
      const double v = row_variance(w.data() + r * len, len);
      if (asg.layers[qi].specs[static_cast<size_t>(r)] == QuantSpec::pot4())
        max_pot = std::max(max_pot, v);
      else if (asg.layers[qi].specs[static_cast<size_t>(r)] == QuantSpec::fixed4())
        min_f4 = std::min(min_f4, v);
    }
    if (max_pot > -1e300 && min_f4 < 1e300) CHECK(max_pot <= min_f4);

    for (double a : asg.layers[qi].alphas) CHECK(a > 0);
  }

  // estimates carry the iteration cap
  for (const auto& est : asg.estimates) {
    CHECK(est.iterations_used >= 1);
    CHECK(est.iterations_used <= 20);
  }
}

TEST_CASE("assign_rows: degenerate ratios ignore lambda and variance") {
  Model m = tiny_mlp(123);
  Tensor x;
  std::vector<int> y;
  calib_data(16, 12, 3, 9, &x, &y);

  RowAssignment all_fixed = assign_rows(m, RatioConfig{0, 100, 0}, x, y, 1);
  for (const auto& l : all_fixed.layers)
    for (const auto& s : l.specs) CHECK(s == QuantSpec::fixed4());

  RowAssignment all_pot = assign_rows(m, RatioConfig{100, 0, 0}, x, y, 1);
  for (const auto& l : all_pot.layers)
    for (const auto& s : l.specs) CHECK(s == QuantSpec::pot4());
}

TEST_CASE("assignment is deterministic and reassign honors the interval") {
  Model m = tiny_mlp(55);
  Tensor x;
  std::vector<int> y;
  calib_data(24, 12, 3, 14, &x, &y);
  const RatioConfig ratio{60, 35, 5};

  RowAssignment a1 = assign_rows(m, ratio, x, y, 42);
  RowAssignment a2 = assign_rows(m, ratio, x, y, 42);
  CHECK(assignments_equal(a1, a2));
  for (size_t i = 0; i < a1.estimates.size(); ++i) {
    CHECK(a1.estimates[i].lambda == a2.estimates[i].lambda);
    CHECK(a1.estimates[i].iterations_used == a2.estimates[i].iterations_used);
  }

  RowAssignment same = reassign(m, a1, ratio, x, y, /*epoch=*/7, 42);
  CHECK(assignments_equal(same, a1));

  RowAssignment at10 = reassign(m, a1, ratio, x, y, /*epoch=*/10, 42);
  RowAssignment at20 = reassign(m, a1, ratio, x, y, /*epoch=*/20, 42);
  CHECK(assignments_equal(at10, at20));  // unchanged weights, same seed
}
