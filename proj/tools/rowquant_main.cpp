// rowquant command-line interface: baseline training, row-wise mixed-scheme
// quantization, evaluation, ratio sweeps, and hardware cost reports.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rowquant/checkpoint.hpp"
#include "rowquant/hwmodel.hpp"
#include "rowquant/kernels.hpp"
#include "rowquant/qat.hpp"
#include "rowquant/rng.hpp"
#include "rowquant/svg.hpp"

namespace fs = std::filesystem;
using namespace rowquant;

namespace {

struct DataPair {
  Dataset train;
  Dataset test;
};

std::map<std::string, std::string> parse_kv(const std::string& s) {
  std::map<std::string, std::string> kv;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto eq = item.find('=');
    RQ_CHECK(eq != std::string::npos, "malformed dataset option: " + item);
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

int64_t kv_int(const std::map<std::string, std::string>& kv, const std::string& key,
               int64_t fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : std::stoll(it->second);
}

/// Dataset specs: "synth:classes=2,dims=2,n=200,seed=1",
/// "synthimg:classes=10,hw=28,n=200,seed=1", a directory with MNIST-named
/// IDX files, or a CSV file (deterministic 80/20 split).
DataPair resolve_dataset(const std::string& spec) {
  DataPair out;
  if (spec.rfind("synth:", 0) == 0) {
    const auto kv = parse_kv(spec.substr(6));
    const int classes = static_cast<int>(kv_int(kv, "classes", 2));
    const int dims = static_cast<int>(kv_int(kv, "dims", 2));
    const int n = static_cast<int>(kv_int(kv, "n", 200));
    const uint64_t seed = static_cast<uint64_t>(kv_int(kv, "seed", 1));
    out.train = synth_gaussians(classes, dims, n, seed);
    out.test = synth_gaussians(classes, dims, std::max(1, n / 5), Rng::mix(seed, 0x7E57));
    return out;
  }
  if (spec.rfind("synthimg:", 0) == 0) {
    const auto kv = parse_kv(spec.substr(9));
    const int classes = static_cast<int>(kv_int(kv, "classes", 10));
    const int hw = static_cast<int>(kv_int(kv, "hw", 28));
    const int n = static_cast<int>(kv_int(kv, "n", 200));
    const uint64_t seed = static_cast<uint64_t>(kv_int(kv, "seed", 1));
    // one pool, split per class, so train and test share the class patterns
    const int n_test = std::max(1, n / 5);
    Dataset all = synth_images(classes, hw, n + n_test, seed);
    out.train = take_per_class(all, 0, n);
    out.test = take_per_class(all, n, n + n_test);
    return out;
  }
  if (fs::is_directory(spec)) {
    out.train = load_idx(spec + "/train-images-idx3-ubyte", spec + "/train-labels-idx1-ubyte");
    if (fs::exists(spec + "/t10k-images-idx3-ubyte"))
      out.test = load_idx(spec + "/t10k-images-idx3-ubyte", spec + "/t10k-labels-idx1-ubyte");
    else
      out.test = out.train;
    return out;
  }
  if (spec.size() > 4 && spec.substr(spec.size() - 4) == ".csv" && fs::exists(spec)) {
    Dataset all = load_csv(spec);
    // deterministic 80/20 split, independent of --seed
    std::vector<int64_t> order(static_cast<size_t>(all.size()));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(0xC5117);
    rng.shuffle(order);
    const int64_t cut = std::max<int64_t>(1, all.size() * 8 / 10);
    auto take = [&](int64_t from, int64_t to) {
      Dataset d;
      d.input_shape = all.input_shape;
      d.class_count = all.class_count;
      for (int64_t i = from; i < to; ++i) {
        const double* s = all.sample(order[static_cast<size_t>(i)]);
        d.features.insert(d.features.end(), s, s + all.feature_dim());
        d.labels.push_back(all.labels[static_cast<size_t>(order[static_cast<size_t>(i)])]);
      }
      d.compute_normalization();
      return d;
    };
    out.train = take(0, cut);
    out.test = cut < all.size() ? take(cut, all.size()) : out.train;
    return out;
  }
  fail("dataset path not found or unrecognized: " + spec);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  RQ_CHECK(f.good(), "cannot write " + path);
  f << text;
  RQ_CHECK(f.good(), "I/O failure writing " + path);
}

void record_run_config(CLI::App* sub, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ostringstream os;
  os << "# rowquant " << sub->get_name()
     << " resolved configuration; re-run with: rowquant " << sub->get_name()
     << " --config <this file>\n";
  os << sub->config_to_str(true, false);
  write_text(out_dir + "/run_config.txt", os.str());
}

// "key = value" config support. File values fill in options the command
// line did not set; explicit flags always override the file.
std::vector<std::string> config_file_args(const std::string& path,
                                          const std::vector<std::string>& explicit_args) {
  std::ifstream in(path);
  RQ_CHECK(in.good(), "cannot open config file: " + path);
  auto explicitly_set = [&](const std::string& key) {
    const std::string flag = "--" + key;
    for (const auto& a : explicit_args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  std::vector<std::string> out;
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
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key == "config" || explicitly_set(key)) continue;
    // values may be a space-separated list of (optionally quoted) tokens
    std::vector<std::string> tokens;
    size_t i = 0;
    while (i < value.size()) {
      while (i < value.size() && value[i] == ' ') ++i;
      if (i >= value.size()) break;
      std::string tok;
      if (value[i] == '"') {
        const auto close = value.find('"', i + 1);
        RQ_CHECK(close != std::string::npos, "unterminated quote in config file: " + path);
        tok = value.substr(i + 1, close - i - 1);
        i = close + 1;
      } else {
        const auto sp = value.find(' ', i);
        tok = value.substr(i, sp == std::string::npos ? std::string::npos : sp - i);
        i = sp == std::string::npos ? value.size() : sp;
      }
      tokens.push_back(tok);
    }
    for (const auto& tok : tokens) out.push_back("--" + key + "=" + tok);
  }
  return out;
}

/// Splices config-file options in right after the subcommand name.
std::vector<std::string> preprocess_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  size_t subcmd_pos = std::string::npos;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size())
      config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      config_path = args[i].substr(9);
    else if (subcmd_pos == std::string::npos && !args[i].empty() && args[i][0] != '-')
      subcmd_pos = i;
  }
  if (config_path.empty() || subcmd_pos == std::string::npos) return args;
  const std::vector<std::string> rest(args.begin() + static_cast<long>(subcmd_pos) + 1,
                                      args.end());
  std::vector<std::string> merged(args.begin(), args.begin() + static_cast<long>(subcmd_pos) + 1);
  for (const auto& a : config_file_args(config_path, rest)) merged.push_back(a);
  merged.insert(merged.end(), rest.begin(), rest.end());
  return merged;
}

std::string final_summary(const TrainResult& r) {
  std::ostringstream os;
  const auto& m = r.log.back();
  os << "epoch " << m.epoch << ": train_loss " << m.train_loss << ", train_acc " << m.train_acc
     << "%, val_acc " << m.val_acc << "%";
  return os.str();
}

std::string assignment_summary_csv(const Model& model) {
  std::ostringstream os;
  os << "layer,rows,pot4,fixed4,fixed8\n";
  for (size_t li : model.quantizable_layers()) {
    const Layer& l = model.layers[li];
    int64_t np = 0, nf4 = 0, nf8 = 0;
    if (l.assignment.has_value()) {
      for (const auto& s : l.assignment->specs) {
        if (s == QuantSpec::pot4())
          ++np;
        else if (s == QuantSpec::fixed4())
          ++nf4;
        else
          ++nf8;
      }
    }
    os << li << "," << l.rows() << "," << np << "," << nf4 << "," << nf8 << "\n";
  }
  return os.str();
}

EvalReport integer_eval(const Model& model, const Dataset& data) {
  RQ_CHECK(data.size() > 0, "cannot evaluate on an empty dataset");
  RQ_CHECK(model.fully_assigned(), "integer engine requires a quantized checkpoint");
  EvalReport rep;
  rep.samples = data.size();
  int64_t top1 = 0, top5 = 0;
  const int64_t chunk = 256;
  for (int64_t start = 0; start < data.size(); start += chunk) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    Tensor logits = integer_forward(model, data.gather_features(idx));
    std::vector<int> y = data.gather_labels(idx);
    for (int64_t r = 0; r < logits.dim(0); ++r) {
      const double lv = logits.at(r, y[static_cast<size_t>(r)]);
      int better = 0;
      for (int64_t c = 0; c < logits.dim(1); ++c)
        if (logits.at(r, c) > lv) ++better;
      if (better == 0) ++top1;
      if (better < 5) ++top5;
    }
  }
  rep.top1 = 100.0 * static_cast<double>(top1) / static_cast<double>(rep.samples);
  rep.top5 = 100.0 * static_cast<double>(top5) / static_cast<double>(rep.samples);
  return rep;
}

// option bundle shared by the training-style commands
struct CommonOpts {
  std::string config;
  std::string data;
  std::string out;
  uint64_t seed = 0;
  int epochs = 10;
  double lr = 8e-3;
  int64_t batch_size = 32;
  std::string lr_schedule = "cosine";
};

void add_train_opts(CLI::App* sub, CommonOpts* o, bool data_required) {
  auto* d = sub->add_option("--data", o->data,
                            "dataset: synth:..., synthimg:..., IDX directory, or CSV file");
  if (data_required) d->required();
  sub->add_option("--out", o->out, "output directory")->required();
  sub->add_option("--seed", o->seed, "RNG seed")->envname("ROWQUANT_SEED");
  sub->add_option("--epochs", o->epochs, "training epochs")->check(CLI::PositiveNumber);
  sub->add_option("--lr", o->lr, "initial learning rate");
  sub->add_option("--batch-size", o->batch_size, "minibatch size")->check(CLI::PositiveNumber);
  sub->add_option("--lr-schedule", o->lr_schedule, "learning-rate decay")
      ->check(CLI::IsMember({"step", "cosine"}));
  sub->add_option("--config", o->config, "read options from a key = value file")
      ->configurable(false);
}

TrainConfig make_cfg(const CommonOpts& o) {
  TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.learning_rate = o.lr;
  cfg.lr_schedule = parse_lr_schedule(o.lr_schedule);
  cfg.seed = o.seed;
  return cfg;
}

int run_quantize_once(const std::string& baseline, const std::string& data_spec,
                      const RatioConfig& ratio, const CommonOpts& opts,
                      const std::string& out_dir, double* out_top1) {
  LoadedCheckpoint base = load_checkpoint(baseline);
  DataPair data = resolve_dataset(data_spec);
  TrainConfig cfg = make_cfg(opts);
  cfg.ratio = ratio;

  Model model = std::move(base.model);
  TrainResult result = train_quantized(model, data.train, data.test, cfg);

  fs::create_directories(out_dir);
  write_text(out_dir + "/metrics.csv", metrics_csv(result.log));
  write_text(out_dir + "/assignment_summary.csv", assignment_summary_csv(model));

  CheckpointInfo info;
  info.arch = model.arch;
  info.input_shape = model.input_shape;
  info.classes = model.classes;
  info.seed = cfg.seed;
  info.epoch = cfg.epochs;
  info.ratio = ratio;
  save_checkpoint(model, info, out_dir + "/quantized");
  export_packed(model, out_dir + "/quantized.packed");

  if (out_top1) *out_top1 = evaluate(model, data.test, /*quantized=*/true).top1;
  std::cout << "quantized (" << ratio.str() << "): " << final_summary(result) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rowquant: row-wise mixed-scheme multi-precision quantization toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  // ---- train-baseline ----
  auto* tb = app.add_subcommand("train-baseline", "train a float32-equivalent baseline model");
  CommonOpts tb_opts;
  std::string tb_arch = "mlp-small";
  add_train_opts(tb, &tb_opts, /*data_required=*/true);
  tb->add_option("--arch", tb_arch, "model preset: mlp-small, cnn-small, cnn-tiny")
      ->check(CLI::IsMember({"mlp-small", "cnn-small", "cnn-tiny"}));

  // ---- quantize ----
  auto* qz = app.add_subcommand("quantize", "quantize a baseline checkpoint with RMSMP");
  CommonOpts qz_opts;
  std::string qz_baseline, qz_ratio = "65:30:5";
  add_train_opts(qz, &qz_opts, /*data_required=*/true);
  qz->add_option("--baseline", qz_baseline, "baseline checkpoint prefix")->required();
  qz->add_option("--ratio", qz_ratio, "PoT-W4A4:Fixed-W4A4:Fixed-W8A4 percentages (A:B:C)");

  // ---- sweep ----
  auto* sw = app.add_subcommand("sweep", "accuracy vs PoT-W4A4 ratio sweep");
  CommonOpts sw_opts;
  std::string sw_baseline, sw_with_w8 = "both";
  std::vector<int> sw_ratios;
  add_train_opts(sw, &sw_opts, /*data_required=*/true);
  sw->add_option("--baseline", sw_baseline, "baseline checkpoint prefix")->required();
  sw->add_option("--ratios", sw_ratios, "PoT percentages to sweep")
      ->required()
      ->delimiter(',');
  sw->add_option("--with-w8", sw_with_w8, "reserve 5% Fixed-W8A4 rows")
      ->check(CLI::IsMember({"on", "off", "both"}));

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_engine = "float", ev_out;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint prefix")->required();
  ev->add_option("--data", ev_data, "dataset spec")->required();
  ev->add_option("--engine", ev_engine, "inference engine")
      ->check(CLI::IsMember({"float", "integer"}));
  ev->add_option("--out", ev_out, "optional output directory");
  std::string ev_config;
  ev->add_option("--config", ev_config, "read options from a key = value file")
      ->configurable(false);

  // ---- cost ----
  auto* co = app.add_subcommand("cost", "analytic hardware cost report");
  std::string co_shape, co_ckpt, co_profile, co_ratio = "65:30:5", co_out;
  co->add_option("--shape", co_shape, "named model shape (resnet18)");
  co->add_option("--ckpt", co_ckpt, "checkpoint prefix to derive the shape from");
  co->add_option("--device-profile", co_profile, "device profile file")->required();
  co->add_option("--ratio", co_ratio, "scheme ratio A:B:C");
  co->add_option("--out", co_out, "optional output directory");
  std::string co_config;
  co->add_option("--config", co_config, "read options from a key = value file")
      ->configurable(false);

  try {
    std::vector<std::string> args = preprocess_args(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (tb->parsed()) {
      record_run_config(tb, tb_opts.out);
      DataPair data = resolve_dataset(tb_opts.data);
      Model model = make_model(tb_arch, data.train.input_shape, data.train.class_count,
                               tb_opts.seed);
      TrainConfig cfg = make_cfg(tb_opts);
      TrainResult result = train_float(model, data.train, data.test, cfg);
      write_text(tb_opts.out + "/metrics.csv", metrics_csv(result.log));
      CheckpointInfo info;
      info.arch = model.arch;
      info.input_shape = model.input_shape;
      info.classes = model.classes;
      info.seed = cfg.seed;
      info.epoch = cfg.epochs;
      save_checkpoint(model, info, tb_opts.out + "/baseline");
      std::cout << "baseline: " << final_summary(result) << "\n";
      return 0;
    }

    if (qz->parsed()) {
      record_run_config(qz, qz_opts.out);
      const RatioConfig ratio = RatioConfig::parse(qz_ratio);
      return run_quantize_once(qz_baseline, qz_opts.data, ratio, qz_opts, qz_opts.out, nullptr);
    }

    if (sw->parsed()) {
      RQ_CHECK(!sw_ratios.empty(), "empty ratio list");
      record_run_config(sw, sw_opts.out);
      LoadedCheckpoint base = load_checkpoint(sw_baseline);
      DataPair data = resolve_dataset(sw_opts.data);
      const double base_top1 = evaluate(base.model, data.test, /*quantized=*/false).top1;

      std::vector<int> w8_modes;
      if (sw_with_w8 == "on")
        w8_modes = {1};
      else if (sw_with_w8 == "off")
        w8_modes = {0};
      else
        w8_modes = {1, 0};

      std::ostringstream csv;
      csv << "pot_ratio,with_w8,ratio,top1,baseline_top1,drop\n";
      SvgSeries with_w8{"with 5% Fixed-W8A4", {}};
      SvgSeries without_w8{"without Fixed-W8A4", {}};
      char buf[160];
      for (int w8 : w8_modes) {
        for (int p : sw_ratios) {
          const int c = w8 ? 5 : 0;
          RQ_CHECK(p >= 0 && p + c <= 100,
                   "PoT ratio " + std::to_string(p) + " leaves no room for the W8 share");
          const RatioConfig ratio{p, 100 - p - c, c};
          std::ostringstream sub;
          sub << sw_opts.out << "/run_p" << p << "_w8" << w8;
          double top1 = 0.0;
          run_quantize_once(sw_baseline, sw_opts.data, ratio, sw_opts, sub.str(), &top1);
          std::snprintf(buf, sizeof buf, "%d,%d,%s,%.4f,%.4f,%.4f\n", p, w8,
                        ratio.str().c_str(), top1, base_top1, base_top1 - top1);
          csv << buf;
          (w8 ? with_w8 : without_w8).points.emplace_back(p, top1);
        }
      }
      write_text(sw_opts.out + "/sweep.csv", csv.str());
      std::vector<SvgSeries> series;
      if (!with_w8.points.empty()) series.push_back(with_w8);
      if (!without_w8.points.empty()) series.push_back(without_w8);
      write_text(sw_opts.out + "/sweep.svg",
                 svg_line_chart("Accuracy vs PoT-W4A4 ratio", "PoT-W4A4 rows (%)",
                                "top-1 accuracy (%)", series));
      std::cout << "sweep: " << (with_w8.points.size() + without_w8.points.size())
                << " runs -> " << sw_opts.out << "/sweep.csv\n";
      return 0;
    }

    if (ev->parsed()) {
      LoadedCheckpoint ckpt = load_checkpoint(ev_ckpt);
      DataPair data = resolve_dataset(ev_data);
      EvalReport rep;
      if (ev_engine == "integer")
        rep = integer_eval(ckpt.model, data.test);
      else
        rep = evaluate(ckpt.model, data.test, ckpt.model.fully_assigned());
      std::ostringstream os;
      char buf[160];
      std::snprintf(buf, sizeof buf, "engine %s: top1 %.4f%%", ev_engine.c_str(), rep.top1);
      os << buf;
      if (ckpt.model.classes >= 5) {
        std::snprintf(buf, sizeof buf, ", top5 %.4f%%", rep.top5);
        os << buf;
      }
      os << " (" << rep.samples << " samples)\n";
      std::cout << os.str();
      if (!ev_out.empty()) {
        record_run_config(ev, ev_out);
        write_text(ev_out + "/eval.txt", os.str());
      }
      return 0;
    }

    if (co->parsed()) {
      RQ_CHECK(co_shape.empty() != co_ckpt.empty(),
               "cost needs exactly one of --shape or --ckpt");
      const DeviceProfile profile = DeviceProfile::load(co_profile);
      std::vector<LayerShape> shape;
      if (!co_shape.empty())
        shape = named_shape(co_shape);
      else
        shape = model_cost_shape(load_checkpoint(co_ckpt).model);
      const RatioConfig ratio = RatioConfig::parse(co_ratio);
      const CostReport rep = report(shape, ratio, profile);
      std::cout << rep.to_table();
      if (!co_out.empty()) {
        record_run_config(co, co_out);
        write_text(co_out + "/cost.csv", rep.to_csv());
      }
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
