#include "rowquant/hwmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace rowquant {

void DeviceProfile::validate() const {
  RQ_CHECK(luts > 0 && dsps >= 0, "device profile needs positive resource budgets");
  RQ_CHECK(lut_cost_per_pot_pe > 0, "lut_cost_per_pot_pe must be positive");
  RQ_CHECK(lut_cost_per_fixed_pe_overhead >= 0, "negative fixed-PE LUT overhead");
  RQ_CHECK(dsp_cost_per_fixed4_pe > 0 && dsp_cost_per_fixed8_pe > 0,
           "per-PE DSP costs must be positive");
  RQ_CHECK(freq_mhz > 0, "freq_mhz must be positive");
}

DeviceProfile DeviceProfile::load(const std::string& path) {
  std::ifstream in(path);
  RQ_CHECK(in.good(), "cannot open device profile: " + path);
  DeviceProfile p;
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto geti = [&](const char* key, int64_t fallback, bool required) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      RQ_CHECK(!required, std::string("device profile missing key: ") + key);
      return fallback;
    }
    return static_cast<int64_t>(std::stoll(it->second));
  };
  p.name = kv.count("name") ? kv["name"] : path;
  p.luts = geti("luts", 0, true);
  p.dsps = geti("dsps", 0, true);
  p.lut_cost_per_pot_pe = geti("lut_cost_per_pot_pe", 1, true);
  p.lut_cost_per_fixed_pe_overhead = geti("lut_cost_per_fixed_pe_overhead", 0, true);
  p.dsp_cost_per_fixed4_pe = geti("dsp_cost_per_fixed4_pe", 1, true);
  p.dsp_cost_per_fixed8_pe = geti("dsp_cost_per_fixed8_pe", 1, true);
  p.freq_mhz = geti("freq_mhz", 100, false);
  p.validate();
  return p;
}

void DeviceProfile::save(const std::string& path) const {
  std::ofstream out(path);
  RQ_CHECK(out.good(), "cannot write device profile: " + path);
  out << "name = " << name << "\n";
  out << "luts = " << luts << "\n";
  out << "dsps = " << dsps << "\n";
  out << "lut_cost_per_pot_pe = " << lut_cost_per_pot_pe << "\n";
  out << "lut_cost_per_fixed_pe_overhead = " << lut_cost_per_fixed_pe_overhead << "\n";
  out << "dsp_cost_per_fixed4_pe = " << dsp_cost_per_fixed4_pe << "\n";
  out << "dsp_cost_per_fixed8_pe = " << dsp_cost_per_fixed8_pe << "\n";
  out << "freq_mhz = " << freq_mhz << "\n";
}

CoreAllocation allocate_shares(const DeviceProfile& profile, const WorkShares& shares) {
  profile.validate();
  RQ_CHECK(shares.pot4 >= 0 && shares.fixed4 >= 0 && shares.fixed8 >= 0,
           "work shares must be non-negative");
  const double total = shares.pot4 + shares.fixed4 + shares.fixed8;
  RQ_CHECK(std::fabs(total - 1.0) <= 1e-9, "work shares must sum to 1");

  CoreAllocation a;
  const double b = shares.fixed4, c = shares.fixed8;
  const int64_t d4 = profile.dsp_cost_per_fixed4_pe;
  const int64_t d8 = profile.dsp_cost_per_fixed8_pe;

  if (b > 0 || c > 0) {
    const double denom = b * static_cast<double>(d4) + c * static_cast<double>(d8);
    const double u = static_cast<double>(profile.dsps) / denom;
    a.fixed4_pes = b > 0 ? static_cast<int64_t>(std::floor(b * u)) : 0;
    a.fixed8_pes = c > 0 ? static_cast<int64_t>(std::floor(c * u)) : 0;
    if (b > 0 && a.fixed4_pes == 0) a.fixed4_pes = 1;
    if (c > 0 && a.fixed8_pes == 0) a.fixed8_pes = 1;
    auto dsps_used = [&] { return a.fixed4_pes * d4 + a.fixed8_pes * d8; };
    if (dsps_used() > profile.dsps)
      throw InfeasibleAllocation("device " + profile.name +
                                 " cannot host one PE per required fixed core");
    // Greedy fill: grow the most loaded fixed core while DSPs remain.
    for (;;) {
      const double load4 = b > 0 ? b / static_cast<double>(a.fixed4_pes) : -1.0;
      const double load8 = c > 0 ? c / static_cast<double>(a.fixed8_pes) : -1.0;
      const bool can4 = b > 0 && dsps_used() + d4 <= profile.dsps;
      const bool can8 = c > 0 && dsps_used() + d8 <= profile.dsps;
      if (!can4 && !can8) break;
      if (can4 && (load4 >= load8 || !can8))
        ++a.fixed4_pes;
      else
        ++a.fixed8_pes;
    }
    a.dsps_used = dsps_used();
  }

  const int64_t overhead =
      (a.fixed4_pes + a.fixed8_pes) * profile.lut_cost_per_fixed_pe_overhead;
  if (overhead > profile.luts)
    throw InfeasibleAllocation("device " + profile.name +
                               " lacks LUTs for the fixed-core overhead");
  if (shares.pot4 > 0) {
    a.pot4_pes = (profile.luts - overhead) / profile.lut_cost_per_pot_pe;
    if (a.pot4_pes < 1)
      throw InfeasibleAllocation("device " + profile.name + " cannot host one PoT PE");
  }
  a.luts_used = overhead + a.pot4_pes * profile.lut_cost_per_pot_pe;
  return a;
}

CoreAllocation allocate_cores(const DeviceProfile& profile, const RatioConfig& ratio) {
  ratio.validate();
  WorkShares s;
  s.pot4 = ratio.pot4 / 100.0;
  s.fixed4 = ratio.fixed4 / 100.0;
  s.fixed8 = ratio.fixed8 / 100.0;
  return allocate_shares(profile, s);
}

int64_t estimate_layer_cycles(int64_t macs_pot, int64_t macs_fixed4, int64_t macs_fixed8,
                              const CoreAllocation& alloc) {
  auto core = [](int64_t macs, int64_t pes, const char* name) -> int64_t {
    if (macs == 0) return 0;
    if (pes == 0)
      throw InfeasibleAllocation(std::string("work assigned to an empty ") + name + " core");
    return (macs + pes - 1) / pes;
  };
  int64_t cycles = core(macs_pot, alloc.pot4_pes, "PoT-4");
  cycles = std::max(cycles, core(macs_fixed4, alloc.fixed4_pes, "Fixed-4"));
  cycles = std::max(cycles, core(macs_fixed8, alloc.fixed8_pes, "Fixed-8"));
  return cycles;
}

CostReport report(const std::vector<LayerShape>& layers, const RatioConfig& ratio,
                  const DeviceProfile& profile, bool first_last_w8) {
  RQ_CHECK(!layers.empty(), "cost report needs a non-empty model shape");
  ratio.validate();

  struct Split {
    int64_t pot = 0, f4 = 0, f8 = 0;
  };
  std::vector<Split> splits(layers.size());
  int64_t tot_pot = 0, tot_f4 = 0, tot_f8 = 0;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerShape& l = layers[i];
    RQ_CHECK(l.rows > 0 && l.macs_per_row > 0, "layer shape must have rows and MACs");
    Split s;
    if (first_last_w8 && (i == 0 || i + 1 == layers.size())) {
      s.f8 = l.macs();
    } else {
      const SpecCounts counts = plan_counts(l.rows, ratio);
      s.pot = counts.pot4 * l.macs_per_row;
      s.f4 = counts.fixed4 * l.macs_per_row;
      s.f8 = counts.fixed8 * l.macs_per_row;
    }
    splits[i] = s;
    tot_pot += s.pot;
    tot_f4 += s.f4;
    tot_f8 += s.f8;
  }
  const double total = static_cast<double>(tot_pot + tot_f4 + tot_f8);
  WorkShares shares;
  shares.pot4 = static_cast<double>(tot_pot) / total;
  shares.fixed4 = static_cast<double>(tot_f4) / total;
  shares.fixed8 = static_cast<double>(tot_f8) / total;
  // exact re-normalization guard
  const double sum = shares.pot4 + shares.fixed4 + shares.fixed8;
  shares.pot4 /= sum;
  shares.fixed4 /= sum;
  shares.fixed8 /= sum;

  CostReport rep;
  rep.device = profile.name;
  rep.ratio = ratio.str();
  rep.alloc = allocate_shares(profile, shares);

  for (size_t i = 0; i < layers.size(); ++i) {
    const int64_t cycles =
        estimate_layer_cycles(splits[i].pot, splits[i].f4, splits[i].f8, rep.alloc);
    rep.per_layer.push_back({layers[i].name, cycles});
    rep.total_cycles += cycles;
    rep.total_macs += layers[i].macs();
  }
  rep.latency_ms =
      static_cast<double>(rep.total_cycles) / (static_cast<double>(profile.freq_mhz) * 1e3);
  rep.throughput_gops = 2.0 * static_cast<double>(rep.total_macs) /
                        (rep.latency_ms * 1e-3) / 1e9;
  rep.lut_util = 100.0 * static_cast<double>(rep.alloc.luts_used) /
                 static_cast<double>(profile.luts);
  rep.dsp_util = profile.dsps > 0 ? 100.0 * static_cast<double>(rep.alloc.dsps_used) /
                                        static_cast<double>(profile.dsps)
                                  : 0.0;
  return rep;
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  char buf[160];
  os << "device,ratio,pot4_pes,fixed4_pes,fixed8_pes,lut_util,dsp_util,throughput_gops,"
        "latency_ms\n";
  std::snprintf(buf, sizeof buf, "%s,%s,%lld,%lld,%lld,%.2f,%.2f,%.2f,%.4f\n", device.c_str(),
                ratio.c_str(), static_cast<long long>(alloc.pot4_pes),
                static_cast<long long>(alloc.fixed4_pes),
                static_cast<long long>(alloc.fixed8_pes), lut_util, dsp_util, throughput_gops,
                latency_ms);
  os << buf;
  os << "layer,cycles\n";
  for (const auto& l : per_layer) os << l.name << "," << l.cycles << "\n";
  return os.str();
}

std::string CostReport::to_table() const {
  std::ostringstream os;
  char buf[256];
  os << "Device: " << device << "   Ratio (PoT-W4A4 : Fixed-W4A4 : Fixed-W8A4): " << ratio
     << "\n";
  std::snprintf(buf, sizeof buf, "PEs: pot4=%lld fixed4=%lld fixed8=%lld\n",
                static_cast<long long>(alloc.pot4_pes), static_cast<long long>(alloc.fixed4_pes),
                static_cast<long long>(alloc.fixed8_pes));
  os << buf;
  std::snprintf(buf, sizeof buf,
                "Utilization: LUT %.0f%%  DSP %.0f%%  |  Throughput: %.1f GOP/s  |  Latency: "
                "%.2f ms\n",
                lut_util, dsp_util, throughput_gops, latency_ms);
  os << buf;
  os << "-----------------------------------------------\n";
  for (const auto& l : per_layer) {
    std::snprintf(buf, sizeof buf, "  %-18s %12lld cycles\n", l.name.c_str(),
                  static_cast<long long>(l.cycles));
    os << buf;
  }
  return os.str();
}

std::vector<LayerShape> resnet18_imagenet_shape() {
  std::vector<LayerShape> v;
  auto conv = [&](const std::string& name, int64_t f, int64_t c, int64_t k, int64_t out_hw) {
    v.push_back({name, f, c * k * k * out_hw * out_hw});
  };
  conv("conv1", 64, 3, 7, 112);
  for (int b = 1; b <= 2; ++b) {
    conv("layer1." + std::to_string(b) + ".conv1", 64, 64, 3, 56);
    conv("layer1." + std::to_string(b) + ".conv2", 64, 64, 3, 56);
  }
  conv("layer2.1.conv1", 128, 64, 3, 28);
  conv("layer2.1.conv2", 128, 128, 3, 28);
  conv("layer2.1.down", 128, 64, 1, 28);
  conv("layer2.2.conv1", 128, 128, 3, 28);
  conv("layer2.2.conv2", 128, 128, 3, 28);
  conv("layer3.1.conv1", 256, 128, 3, 14);
  conv("layer3.1.conv2", 256, 256, 3, 14);
  conv("layer3.1.down", 256, 128, 1, 14);
  conv("layer3.2.conv1", 256, 256, 3, 14);
  conv("layer3.2.conv2", 256, 256, 3, 14);
  conv("layer4.1.conv1", 512, 256, 3, 7);
  conv("layer4.1.conv2", 512, 512, 3, 7);
  conv("layer4.1.down", 512, 256, 1, 7);
  conv("layer4.2.conv1", 512, 512, 3, 7);
  conv("layer4.2.conv2", 512, 512, 3, 7);
  v.push_back({"fc", 1000, 512});
  return v;
}

std::vector<LayerShape> named_shape(const std::string& name) {
  if (name == "resnet18" || name == "resnet18-imagenet") return resnet18_imagenet_shape();
  fail("unknown model shape: " + name + " (available: resnet18)");
}

std::vector<LayerShape> model_cost_shape(const Model& model) {
  std::vector<LayerShape> v;
  std::vector<int64_t> hw;  // current spatial dims for conv tracking
  if (model.input_shape.size() == 3) hw = {model.input_shape[1], model.input_shape[2]};
  int dense_i = 0, conv_i = 0;
  for (const auto& l : model.layers) {
    switch (l.kind) {
      case LayerKind::Conv2d: {
        RQ_CHECK(hw.size() == 2, "conv layer without spatial dims");
        const int64_t k = l.weight.shape()[2];
        const int64_t oh = (hw[0] + 2 * l.pad - k) / l.stride + 1;
        const int64_t ow = (hw[1] + 2 * l.pad - k) / l.stride + 1;
        v.push_back({"conv" + std::to_string(++conv_i), l.rows(), l.row_len() * oh * ow});
        hw = {oh, ow};
        break;
      }
      case LayerKind::Dense:
        v.push_back({"fc" + std::to_string(++dense_i), l.rows(), l.row_len()});
        break;
      case LayerKind::MaxPool2:
        if (hw.size() == 2) hw = {hw[0] / 2, hw[1] / 2};
        break;
      default:
        break;
    }
  }
  return v;
}

}  // namespace rowquant
