#include "rowquant/assign.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rowquant/rng.hpp"

namespace rowquant {

void RatioConfig::validate() const {
  RQ_CHECK(pot4 >= 0 && fixed4 >= 0 && fixed8 >= 0, "ratio shares must be non-negative");
  RQ_CHECK(pot4 + fixed4 + fixed8 == 100, "ratio must sum to 100, got " + str());
}

RatioConfig RatioConfig::parse(const std::string& s) {
  RatioConfig r{0, 0, 0};
  char c1 = 0, c2 = 0;
  std::istringstream is(s);
  if (!(is >> r.pot4 >> c1 >> r.fixed4 >> c2 >> r.fixed8) || c1 != ':' || c2 != ':' ||
      !(is >> std::ws).eof()) {
    fail("ratio must have the form A:B:C, got '" + s + "'");
  }
  r.validate();
  return r;
}

std::string RatioConfig::str() const {
  std::ostringstream os;
  os << pot4 << ":" << fixed4 << ":" << fixed8;
  return os.str();
}

namespace {
int64_t round_half_up(double x) { return static_cast<int64_t>(std::floor(x + 0.5)); }
}  // namespace

SpecCounts plan_counts(int64_t rows, const RatioConfig& ratio) {
  ratio.validate();
  RQ_CHECK(rows >= 1, "plan_counts needs at least one row");
  SpecCounts c;
  if (ratio.fixed8 > 0) {
    c.fixed8 = std::clamp<int64_t>(
        round_half_up(static_cast<double>(rows) * ratio.fixed8 / 100.0), 1, rows);
  }
  const int64_t rest = rows - c.fixed8;
  const int ab = ratio.pot4 + ratio.fixed4;
  if (rest > 0 && ab > 0 && ratio.pot4 > 0) {
    c.pot4 = std::min<int64_t>(
        rest, round_half_up(static_cast<double>(rest) * ratio.pot4 / static_cast<double>(ab)));
  }
  c.fixed4 = rest - c.pot4;
  return c;
}

PowerIterResult power_iteration(const std::function<Tensor(const Tensor&)>& hvp, int64_t dim,
                                int max_iter, uint64_t seed) {
  RQ_CHECK(max_iter >= 1, "power iteration needs at least one iteration");
  Rng rng(seed);
  Tensor v({dim});
  for (int64_t i = 0; i < dim; ++i) v[i] = rng.gaussian();

  auto norm = [](const Tensor& t) {
    double s = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) s += t[i] * t[i];
    return std::sqrt(s);
  };

  PowerIterResult res;
  double prev = 0.0;
  for (int k = 1; k <= max_iter; ++k) {
    res.iterations = k;
    const double nv = norm(v);
    if (nv == 0.0) {  // landed in the null space
      res.lambda = 0.0;
      res.converged = true;
      break;
    }
    for (int64_t i = 0; i < dim; ++i) v[i] /= nv;

    Tensor w = hvp(v);
    double lambda = 0.0;
    for (int64_t i = 0; i < dim; ++i) lambda += v[i] * w[i];
    res.lambda = lambda;

    if (norm(w) == 0.0) {
      res.converged = true;
      break;
    }
    if (k >= 2) {
      const double rel = std::fabs(lambda - prev) / std::max(std::fabs(lambda), 1e-12);
      // Converged per the 1e-4 contract; keep refining to a much tighter
      // stagnation point while the iteration budget allows.
      res.converged = rel < 1e-4;
      if (rel < 1e-9) break;
    }
    prev = lambda;
    v = std::move(w);
  }
  return res;
}

HessianEstimate top_eigenvalue(const Var& loss, const Var& weights, int max_iter, uint64_t seed) {
  HessianOracle oracle(loss, {weights});
  HessianEstimate est;
  if (oracle.gradient(0).max_abs() == 0.0) {
    est.lambda = 0.0;
    est.iterations_used = 1;
    est.converged = true;
    return est;
  }
  const int64_t dim = weights.numel();
  auto shape = weights.shape();
  PowerIterResult r = power_iteration(
      [&](const Tensor& v) {
        Tensor vv(shape, v.vec());
        Tensor hv = oracle.hvp(0, vv);
        return Tensor({dim}, hv.vec());
      },
      dim, max_iter, seed);
  est.lambda = r.lambda;
  est.iterations_used = r.iterations;
  est.converged = r.converged;
  return est;
}

double row_variance(const double* row, int64_t n) {
  double mean = 0.0;
  for (int64_t i = 0; i < n; ++i) mean += row[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = row[i] - mean;
    var += d * d;
  }
  return var / static_cast<double>(n);
}

RowAssignment assign_rows(const Model& model, const RatioConfig& ratio,
                          const Tensor& calib_features, const std::vector<int>& calib_labels,
                          uint64_t seed) {
  ratio.validate();
  const auto qlayers = model.quantizable_layers();
  RowAssignment out;
  out.layers.resize(qlayers.size());

  // One float forward/backward graph serves every filter's power iteration.
  std::vector<Var> wrts;
  for (size_t li : qlayers) wrts.push_back(model.layers[li].weight);
  Var loss = model_loss(model, calib_features, calib_labels, /*quantized=*/false);
  HessianOracle oracle(loss, wrts);

  for (size_t qi = 0; qi < qlayers.size(); ++qi) {
    const Layer& layer = model.layers[qlayers[qi]];
    const int64_t rows = layer.rows();
    const int64_t row_len = layer.row_len();
    const SpecCounts counts = plan_counts(rows, ratio);

    if ((ratio.fixed8 > 0 && counts.fixed8 == 0) || (ratio.pot4 > 0 && counts.pot4 == 0) ||
        (ratio.fixed4 > 0 && counts.fixed4 == 0)) {
      std::ostringstream os;
      os << "layer " << qlayers[qi] << " has only " << rows << " rows; ratio " << ratio.str()
         << " degraded to counts (pot4=" << counts.pot4 << ", fixed4=" << counts.fixed4
         << ", fixed8=" << counts.fixed8 << ")";
      out.warnings.push_back(os.str());
    }

    const Tensor& w = layer.weight.value();
    const Tensor& g = oracle.gradient(qi);

    // Hessian sensitivity, only needed when some rows get the higher precision.
    std::vector<double> lam(static_cast<size_t>(rows), 0.0);
    if (counts.fixed8 > 0) {
      for (int64_t r = 0; r < rows; ++r) {
        HessianEstimate est;
        est.layer = static_cast<int>(qlayers[qi]);
        est.row = r;
        double gmax = 0.0;
        for (int64_t j = 0; j < row_len; ++j)
          gmax = std::max(gmax, std::fabs(g[r * row_len + j]));
        if (gmax == 0.0) {
          est.lambda = 0.0;
          est.iterations_used = 1;
          est.converged = true;
        } else {
          PowerIterResult pr = power_iteration(
              [&](const Tensor& v) { return oracle.hvp_row(qi, r, v); }, row_len, 20,
              Rng::mix(seed, qlayers[qi], static_cast<uint64_t>(r)));
          est.lambda = pr.lambda;
          est.iterations_used = pr.iterations;
          est.converged = pr.converged;
        }
        lam[static_cast<size_t>(r)] = est.lambda;
        out.estimates.push_back(est);
      }
    }

    // Rank rows by |lambda| (descending, ties by row index); top C% -> Fixed-8.
    std::vector<int64_t> order(static_cast<size_t>(rows));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return std::fabs(lam[static_cast<size_t>(a)]) > std::fabs(lam[static_cast<size_t>(b)]);
    });

    LayerAssignment asg;
    asg.specs.assign(static_cast<size_t>(rows), QuantSpec::fixed4());
    asg.alphas.assign(static_cast<size_t>(rows), 1.0);

    std::vector<bool> is_f8(static_cast<size_t>(rows), false);
    for (int64_t i = 0; i < counts.fixed8; ++i) {
      is_f8[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;
      asg.specs[static_cast<size_t>(order[static_cast<size_t>(i)])] = QuantSpec::fixed8();
    }

    // Remaining rows: variance threshold at the A/(A+B) quantile
    // (smaller variance prefers PoT).
    std::vector<int64_t> rest;
    for (int64_t r = 0; r < rows; ++r)
      if (!is_f8[static_cast<size_t>(r)]) rest.push_back(r);
    std::vector<double> var(static_cast<size_t>(rows), 0.0);
    for (int64_t r : rest)
      var[static_cast<size_t>(r)] = row_variance(w.data() + r * row_len, row_len);
    std::stable_sort(rest.begin(), rest.end(), [&](int64_t a, int64_t b) {
      return var[static_cast<size_t>(a)] < var[static_cast<size_t>(b)];
    });
    for (int64_t i = 0; i < counts.pot4; ++i)
      asg.specs[static_cast<size_t>(rest[static_cast<size_t>(i)])] = QuantSpec::pot4();

    for (int64_t r = 0; r < rows; ++r) {
      asg.alphas[static_cast<size_t>(r)] =
          calibrate_alpha(w.data() + r * row_len, row_len, asg.specs[static_cast<size_t>(r)]);
    }
    out.layers[qi] = std::move(asg);
  }
  return out;
}

void apply_assignment(Model& model, const RowAssignment& asg) {
  const auto qlayers = model.quantizable_layers();
  RQ_CHECK(asg.layers.size() == qlayers.size(),
           "assignment layer count does not match the model");
  for (size_t qi = 0; qi < qlayers.size(); ++qi) {
    Layer& layer = model.layers[qlayers[qi]];
    RQ_CHECK(asg.layers[qi].rows() == layer.rows(),
             "assignment row count does not match layer rows");
    layer.assignment = asg.layers[qi];
  }
}

RowAssignment reassign(const Model& model, const RowAssignment& current, const RatioConfig& ratio,
                       const Tensor& calib_features, const std::vector<int>& calib_labels,
                       int epoch, uint64_t seed, int interval) {
  RQ_CHECK(epoch >= 0, "epoch must be non-negative");
  if (interval <= 0 || epoch <= 0 || epoch % interval != 0) return current;
  return assign_rows(model, ratio, calib_features, calib_labels, seed);
}

}  // namespace rowquant
