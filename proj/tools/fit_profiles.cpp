// Offline calibration of the device-profile cost coefficients.
//
// Grid-searches (lut_cost_per_pot_pe, lut_cost_per_fixed_pe_overhead,
// dsp_cost_per_fixed4_pe, dsp_cost_per_fixed8_pe), shared across devices,
// minimizing squared log-latency error against the reference measurements.
// Candidate sets must reproduce the reference XC7Z045 latency ordering
// Fixed > PoT+Fixed(50:50) > PoT > 65:30:5 with a 2% separation margin and
// keep the 65:30:5-vs-Fixed speedup inside [2.5, 5.0]; an unconstrained fit
// drifts into coefficient regions that invert the PoT / PoT+Fixed order
// (the measured pure-PoT designs left most LUTs idle, which a
// maximize-PEs allocation cannot express).
//
// Usage: fit_profiles <measurements.csv> <output-dir>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include "rowquant/hwmodel.hpp"

using namespace rowquant;

namespace {

struct Cell {
  std::string device;
  RatioConfig ratio;
  bool first_last_w8 = false;
  double latency_ms = 0.0;
};

std::vector<Cell> load_cells(const std::string& path) {
  std::ifstream in(path);
  RQ_CHECK(in.good(), "cannot open measurements: " + path);
  std::vector<Cell> cells;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {  // header row
      header_seen = true;
      continue;
    }
    std::istringstream is(line);
    std::string dev, ratio, flw8, lat;
    std::getline(is, dev, ',');
    std::getline(is, ratio, ',');
    std::getline(is, flw8, ',');
    std::getline(is, lat, ',');
    cells.push_back({dev, RatioConfig::parse(ratio), flw8 == "1", std::stod(lat)});
  }
  RQ_CHECK(!cells.empty(), "no measurement rows in " + path);
  return cells;
}

DeviceProfile budgets(const std::string& device) {
  DeviceProfile p;
  p.name = device;
  if (device == "xc7z020") {
    p.luts = 53200;
    p.dsps = 220;
  } else if (device == "xc7z045") {
    p.luts = 218600;
    p.dsps = 900;
  } else {
    fail("unknown device in measurements: " + device);
  }
  p.freq_mhz = 100;
  return p;
}

bool ordering_ok(const DeviceProfile& z045, const std::vector<LayerShape>& shape) {
  try {
    const double fixed = report(shape, RatioConfig{0, 100, 0}, z045).latency_ms;
    const double mix50 = report(shape, RatioConfig{50, 50, 0}, z045).latency_ms;
    const double pot = report(shape, RatioConfig{100, 0, 0}, z045).latency_ms;
    const double rmsmp = report(shape, RatioConfig{65, 30, 5}, z045).latency_ms;
    const double margin = 1.02;
    if (!(fixed >= margin * mix50 && mix50 >= margin * pot && pot >= margin * rmsmp))
      return false;
    const double speedup = fixed / rmsmp;
    return speedup >= 2.55 && speedup <= 4.9;
  } catch (const InfeasibleAllocation&) {
    return false;
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: fit_profiles <measurements.csv> <output-dir>\n";
    return 2;
  }
  const std::vector<Cell> cells = load_cells(argv[1]);
  const std::string out_dir = argv[2];
  const auto shape = resnet18_imagenet_shape();

  int64_t total_macs = 0;
  for (const auto& l : shape) total_macs += l.macs();
  std::printf("reference workload: %zu layers, %.3f GMACs\n", shape.size(),
              static_cast<double>(total_macs) / 1e9);

  double best_err = 1e300;
  DeviceProfile best;
  bool found = false;

  for (int64_t d4 = 1; d4 <= 2; ++d4) {
    for (int64_t d8 = d4; d8 <= 3; ++d8) {
      for (int64_t l = 40; l <= 200; ++l) {
        for (int64_t o = 0; o <= 100; o += 2) {
          DeviceProfile proto;
          proto.lut_cost_per_pot_pe = l;
          proto.lut_cost_per_fixed_pe_overhead = o;
          proto.dsp_cost_per_fixed4_pe = d4;
          proto.dsp_cost_per_fixed8_pe = d8;

          DeviceProfile z045 = budgets("xc7z045");
          z045.lut_cost_per_pot_pe = l;
          z045.lut_cost_per_fixed_pe_overhead = o;
          z045.dsp_cost_per_fixed4_pe = d4;
          z045.dsp_cost_per_fixed8_pe = d8;
          if (!ordering_ok(z045, shape)) continue;

          double err = 0.0;
          bool feasible = true;
          for (const auto& cell : cells) {
            DeviceProfile p = budgets(cell.device);
            p.lut_cost_per_pot_pe = l;
            p.lut_cost_per_fixed_pe_overhead = o;
            p.dsp_cost_per_fixed4_pe = d4;
            p.dsp_cost_per_fixed8_pe = d8;
            try {
              const double model = report(shape, cell.ratio, p, cell.first_last_w8).latency_ms;
              const double d = std::log(model) - std::log(cell.latency_ms);
              err += d * d;
            } catch (const InfeasibleAllocation&) {
              feasible = false;
              break;
            }
          }
          if (feasible && err < best_err) {
            best_err = err;
            best = proto;
            found = true;
          }
        }
      }
    }
  }

  if (!found) {
    std::cerr << "no feasible coefficient set found\n";
    return 1;
  }

  std::printf("fitted coefficients: lut/pot_pe=%lld lut_overhead/fixed_pe=%lld "
              "dsp/fixed4_pe=%lld dsp/fixed8_pe=%lld  (sum sq log err %.4f over %zu cells)\n",
              static_cast<long long>(best.lut_cost_per_pot_pe),
              static_cast<long long>(best.lut_cost_per_fixed_pe_overhead),
              static_cast<long long>(best.dsp_cost_per_fixed4_pe),
              static_cast<long long>(best.dsp_cost_per_fixed8_pe), best_err, cells.size());

  for (const std::string dev : {"xc7z020", "xc7z045"}) {
    DeviceProfile p = budgets(dev);
    p.lut_cost_per_pot_pe = best.lut_cost_per_pot_pe;
    p.lut_cost_per_fixed_pe_overhead = best.lut_cost_per_fixed_pe_overhead;
    p.dsp_cost_per_fixed4_pe = best.dsp_cost_per_fixed4_pe;
    p.dsp_cost_per_fixed8_pe = best.dsp_cost_per_fixed8_pe;
    p.save(out_dir + "/" + dev + ".profile");
  }

  std::printf("\n%-9s %-9s %-4s %10s %10s %8s %8s\n", "device", "ratio", "fl8", "model_ms",
              "meas_ms", "lut%", "dsp%");
  for (const auto& cell : cells) {
    DeviceProfile p = budgets(cell.device);
    p.lut_cost_per_pot_pe = best.lut_cost_per_pot_pe;
    p.lut_cost_per_fixed_pe_overhead = best.lut_cost_per_fixed_pe_overhead;
    p.dsp_cost_per_fixed4_pe = best.dsp_cost_per_fixed4_pe;
    p.dsp_cost_per_fixed8_pe = best.dsp_cost_per_fixed8_pe;
    const CostReport r = report(shape, cell.ratio, p, cell.first_last_w8);
    std::printf("%-9s %-9s %-4d %10.2f %10.2f %7.0f%% %7.0f%%\n", cell.device.c_str(),
                cell.ratio.str().c_str(), cell.first_last_w8 ? 1 : 0, r.latency_ms,
                cell.latency_ms, r.lut_util, r.dsp_util);
  }

  DeviceProfile z045 = budgets("xc7z045");
  z045.lut_cost_per_pot_pe = best.lut_cost_per_pot_pe;
  z045.lut_cost_per_fixed_pe_overhead = best.lut_cost_per_fixed_pe_overhead;
  z045.dsp_cost_per_fixed4_pe = best.dsp_cost_per_fixed4_pe;
  z045.dsp_cost_per_fixed8_pe = best.dsp_cost_per_fixed8_pe;
  const double fixed = report(shape, RatioConfig{0, 100, 0}, z045).latency_ms;
  const double rmsmp = report(shape, RatioConfig{65, 30, 5}, z045).latency_ms;
  std::printf("\nxc7z045 65:30:5 vs Fixed speedup: %.2fx\n", fixed / rmsmp);
  return 0;
}
