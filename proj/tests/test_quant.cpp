#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "rowquant/quant.hpp"
#include "rowquant/rng.hpp"

using namespace rowquant;

TEST_CASE("only three quant specs are constructible") {
  CHECK_NOTHROW(QuantSpec::pot4());
  CHECK_NOTHROW(QuantSpec::fixed4());
  CHECK_NOTHROW(QuantSpec::fixed8());
  CHECK_THROWS_AS(QuantSpec(Scheme::PoT, 8), std::invalid_argument);
  CHECK_THROWS_AS(QuantSpec(Scheme::Fixed, 3), std::invalid_argument);
  CHECK(QuantSpec::parse("pot4") == QuantSpec::pot4());
  CHECK(QuantSpec::parse(QuantSpec::fixed8().name()) == QuantSpec::fixed8());
}

TEST_CASE("fixed levels: counts, symmetry, endpoints") {
  auto l4 = fixed_levels(4, 1.0);
  REQUIRE(l4.size() == 15);
  CHECK(l4.front() == -1.0);
  CHECK(l4.back() == 1.0);
  CHECK(l4[7] == 0.0);
  CHECK(l4[8] == doctest::Approx(1.0 / 7).epsilon(1e-15));
  CHECK(std::is_sorted(l4.begin(), l4.end()));
  for (size_t i = 0; i < l4.size(); ++i) CHECK(l4[i] == -l4[l4.size() - 1 - i]);

  auto l2 = fixed_levels(2, 1.0);
  REQUIRE(l2.size() == 3);
  CHECK(l2[0] == -1.0);
  CHECK(l2[1] == 0.0);
  CHECK(l2[2] == 1.0);

  auto l8 = fixed_levels(8, 2.0);
  REQUIRE(l8.size() == 255);
  CHECK(l8.front() == -2.0);
  CHECK(l8.back() == 2.0);
  CHECK(l8[128] == doctest::Approx(2.0 / 127).epsilon(1e-15));

  CHECK_THROWS_AS(fixed_levels(1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(fixed_levels(4, 0.0), std::invalid_argument);
}

TEST_CASE("pot levels: m=4 set from the defining formula") {
  auto l = pot_levels(4, 1.0);
  REQUIRE(l.size() == 15);
  const double expect[] = {1.0 / 64, 1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2, 1.0};
  CHECK(l[7] == 0.0);
  for (int i = 0; i < 7; ++i) {
    CHECK(l[8 + i] == expect[i]);
    CHECK(l[6 - i] == -expect[i]);
  }

  auto lh = pot_levels(4, 0.5);
  for (size_t i = 0; i < l.size(); ++i) CHECK(lh[i] == doctest::Approx(0.5 * l[i]).epsilon(1e-15));

  auto l3 = pot_levels(3, 1.0);
  REQUIRE(l3.size() == 7);
  CHECK(l3[0] == -1.0);
  CHECK(l3[1] == -0.5);
  CHECK(l3[2] == -0.25);
  CHECK(l3[3] == 0.0);
}

TEST_CASE("quantize_fixed: clipping, zero, ties away from zero") {
  CHECK(quantize_fixed(2.0, 4, 1.0) == 1.0);
  CHECK(quantize_fixed(-2.0, 4, 1.0) == -1.0);
  CHECK(quantize_fixed(0.0, 4, 1.0) == 0.0);
  // 0.5*7 = 3.5 rounds away from zero to code 4
  CHECK(quantize_fixed(0.5, 4, 1.0) == doctest::Approx(4.0 / 7).epsilon(1e-15));
  CHECK(quantize_fixed(-0.5, 4, 1.0) == doctest::Approx(-4.0 / 7).epsilon(1e-15));
}

TEST_CASE("quantize_pot: endpoints, log rounding, zero branch") {
  CHECK(quantize_pot(1.0, 4, 1.0) == 1.0);
  CHECK(quantize_pot(0.1, 4, 1.0) == 0.125);  // log2(0.1) = -3.32 -> e = -3
  CHECK(quantize_pot(1e-4, 4, 1.0) == 0.0);   // log2 = -13.3 < -6.5
  CHECK(quantize_pot(0.0, 4, 1.0) == 0.0);
  CHECK(quantize_pot(-0.1, 4, 1.0) == -0.125);
}

TEST_CASE("quantize_activation: boundaries and rounding") {
  CHECK(quantize_activation_value(0.0, 4, 6.0) == 0.0);
  CHECK(quantize_activation_value(6.0, 4, 6.0) == 6.0);
  CHECK(quantize_activation_value(9.0, 4, 6.0) == 6.0);  // saturates
  // 1.0 * 15/6 = 2.5 rounds away from zero to 3 -> 3 * 6/15 = 1.2
  CHECK(quantize_activation_value(1.0, 4, 6.0) == doctest::Approx(1.2).epsilon(1e-15));
}

TEST_CASE("calibrate_alpha: degenerate, reconstruction, single weight") {
  std::vector<double> zeros = {0, 0, 0};
  CHECK(calibrate_alpha(zeros, QuantSpec::fixed4()) == 1.0);

  // A row that is exactly a fixed-level set must be reproduced without error.
  std::vector<double> row = fixed_levels(4, 0.8);
  const double a = calibrate_alpha(row, QuantSpec::fixed4());
  for (double w : row) CHECK(quantize_fixed(w, 4, a) == w);

  std::vector<double> one = {0.3};
  const double a1 = calibrate_alpha(one, QuantSpec::fixed4());
  CHECK(quantize_fixed(0.3, 4, a1) == 0.3);
}

TEST_CASE("quantizer properties over fuzzed inputs") {
  Rng rng(20240901);
  struct Case {
    Scheme scheme;
    int bits;
  };
  const Case cases[] = {{Scheme::Fixed, 4}, {Scheme::Fixed, 8}, {Scheme::PoT, 4}};

  for (const auto& c : cases) {
    for (int rep = 0; rep < 2000; ++rep) {
      const double alpha = std::exp(rng.uniform(-3.0, 3.0));
      const double w = rng.uniform(-2.5 * alpha, 2.5 * alpha);
      const bool pot = c.scheme == Scheme::PoT;
      const double q = pot ? quantize_pot(w, c.bits, alpha) : quantize_fixed(w, c.bits, alpha);

      // idempotence (bit-exact)
      const double qq = pot ? quantize_pot(q, c.bits, alpha) : quantize_fixed(q, c.bits, alpha);
      CHECK(qq == q);

      // membership (exact equality against the precomputed level set)
      auto levels = pot ? pot_levels(c.bits, alpha) : fixed_levels(c.bits, alpha);
      CHECK(std::find(levels.begin(), levels.end(), q) != levels.end());

      // output within [-alpha, alpha]
      CHECK(std::fabs(q) <= alpha);

      // nearest-level optimality in the right domain
      const double clipped = std::clamp(w, -alpha, alpha);
      if (!pot) {
        for (double L : levels) CHECK(std::fabs(q - clipped) <= std::fabs(L - clipped) + 1e-18);
      } else if (clipped != 0.0 && std::fabs(clipped) / alpha >= 1.0 / 64) {
        const double lg = std::log2(std::fabs(clipped) / alpha);
        const double chosen = std::log2(std::fabs(q) / alpha);
        for (int e = -6; e <= 0; ++e)
          CHECK(std::fabs(lg - chosen) <= std::fabs(lg - e) + 1e-12);
      }

      // monotonicity
      const double w2 = rng.uniform(-2.5 * alpha, 2.5 * alpha);
      const double q2 = pot ? quantize_pot(w2, c.bits, alpha) : quantize_fixed(w2, c.bits, alpha);
      if (w <= w2)
        CHECK(q <= q2);
      else
        CHECK(q2 <= q);

      // scale equivariance
      const double s = std::exp(rng.uniform(-2.0, 2.0));
      const double qs = pot ? quantize_pot(s * w, c.bits, s * alpha)
                            : quantize_fixed(s * w, c.bits, s * alpha);
      CHECK(std::fabs(qs - s * q) <= 1e-12 * std::max(1.0, std::fabs(s * q)));
    }
  }
}

TEST_CASE("rigid resolution: largest positive-level gap PoT vs Fixed") {
  // Exact-arithmetic check: put levels over a common integer denominator
  // (level * den recovers the integer numerator exactly), then compare the
  // largest adjacent positive-side gap as a fraction.
  auto max_gap_num = [](const std::vector<double>& levels, double den) {
    int64_t g = 0;
    for (size_t i = 1; i < levels.size(); ++i) {
      if (levels[i - 1] < 0.0) continue;
      const int64_t a = static_cast<int64_t>(std::llround(levels[i - 1] * den));
      const int64_t b = static_cast<int64_t>(std::llround(levels[i] * den));
      g = std::max(g, b - a);
    }
    return g;
  };
  // PoT m=4: gap 32/64 == 1/2; Fixed m=4: gap 1/7.
  CHECK(max_gap_num(pot_levels(4, 1.0), 64.0) == 32);
  CHECK(max_gap_num(fixed_levels(4, 1.0), 7.0) == 1);
  // The PoT gap is also exact in floating point.
  auto pl = pot_levels(4, 1.0);
  CHECK(pl.back() - pl[pl.size() - 2] == 0.5);
}

TEST_CASE("integer code views agree with the float quantizers") {
  Rng rng(77);
  for (int rep = 0; rep < 500; ++rep) {
    const double alpha = std::exp(rng.uniform(-2.0, 2.0));
    const double w = rng.uniform(-2.0 * alpha, 2.0 * alpha);

    const int k = fixed_code(w, 4, alpha);
    CHECK(k >= -7);
    CHECK(k <= 7);
    CHECK(alpha * (static_cast<double>(k) / 7.0) == quantize_fixed(w, 4, alpha));

    const PotCode pc = pot_code(w, 4, alpha);
    if (pc.sign == 0) {
      CHECK(quantize_pot(w, 4, alpha) == 0.0);
    } else {
      CHECK(pc.expn >= -6);
      CHECK(pc.expn <= 0);
      CHECK(pc.sign * std::ldexp(alpha, pc.expn) == quantize_pot(w, 4, alpha));
    }

    const double clip = std::exp(rng.uniform(-1.0, 2.0));
    const double x = rng.uniform(0.0, 1.5 * clip);
    const int a = act_code(x, 4, clip);
    CHECK(a >= 0);
    CHECK(a <= 15);
    CHECK(clip * (static_cast<double>(a) / 15.0) == quantize_activation_value(x, 4, clip));
  }
}
