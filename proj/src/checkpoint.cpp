#include "rowquant/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace rowquant {

using ordered_json = nlohmann::ordered_json;

uint32_t crc32(const void* data, size_t len) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr const char* kFormat = "rowquant-checkpoint";
constexpr const char* kVersion = "1.0";

void append_le_doubles(std::string* blob, const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    const uint64_t bits = std::bit_cast<uint64_t>(t[i]);
    for (int b = 0; b < 8; ++b) blob->push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
}

Tensor read_le_doubles(const std::string& blob, size_t offset, const std::vector<int64_t>& shape) {
  Tensor t(shape);
  RQ_CHECK(offset + static_cast<size_t>(t.numel()) * 8 <= blob.size(),
           "tensor blob is truncated");
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<uint64_t>(
                  static_cast<unsigned char>(blob[offset + static_cast<size_t>(i) * 8 + b]))
              << (8 * b);
    t[i] = std::bit_cast<double>(bits);
  }
  return t;
}

ordered_json tensor_entry(const std::string& name, const Tensor& t, size_t offset,
                          const std::string& blob) {
  ordered_json e;
  e["name"] = name;
  e["shape"] = t.shape();
  e["offset"] = offset;
  e["bytes"] = static_cast<size_t>(t.numel()) * 8;
  e["crc32"] = crc32(blob.data() + offset, static_cast<size_t>(t.numel()) * 8);
  return e;
}

}  // namespace

void save_checkpoint(const Model& model, const CheckpointInfo& info, const std::string& prefix) {
  std::string blob;
  ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["format_version"] = kVersion;
  manifest["arch"] = model.arch;
  manifest["input_shape"] = model.input_shape;
  manifest["classes"] = model.classes;
  manifest["seed"] = info.seed;
  manifest["epoch"] = info.epoch;
  if (info.ratio.has_value())
    manifest["ratio"] = info.ratio->str();
  else
    manifest["ratio"] = nullptr;

  ordered_json layers = ordered_json::array();
  for (const auto& l : model.layers) {
    ordered_json jl;
    jl["kind"] = layer_kind_name(l.kind);
    jl["stride"] = l.stride;
    jl["pad"] = l.pad;
    ordered_json tensors = ordered_json::array();
    if (l.weight.defined()) {
      const size_t off = blob.size();
      append_le_doubles(&blob, l.weight.value());
      tensors.push_back(tensor_entry("weight", l.weight.value(), off, blob));
    }
    if (l.bias.defined()) {
      const size_t off = blob.size();
      append_le_doubles(&blob, l.bias.value());
      tensors.push_back(tensor_entry("bias", l.bias.value(), off, blob));
    }
    jl["tensors"] = std::move(tensors);
    if (l.quantizable()) {
      jl["act_clip"] = l.act_clip.value()[0];
      if (l.assignment.has_value()) {
        ordered_json ja;
        ja["specs"] = ordered_json::array();
        for (const auto& s : l.assignment->specs) ja["specs"].push_back(s.name());
        ja["alphas"] = l.assignment->alphas;
        jl["assignment"] = std::move(ja);
      } else {
        jl["assignment"] = nullptr;
      }
    }
    layers.push_back(std::move(jl));
  }
  manifest["layers"] = std::move(layers);

  std::ofstream mf(prefix + ".manifest");
  RQ_CHECK(mf.good(), "cannot write checkpoint manifest: " + prefix + ".manifest");
  mf << manifest.dump(2) << "\n";
  RQ_CHECK(mf.good(), "I/O failure writing " + prefix + ".manifest");

  std::ofstream bf(prefix + ".tensors", std::ios::binary);
  RQ_CHECK(bf.good(), "cannot write checkpoint blob: " + prefix + ".tensors");
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  RQ_CHECK(bf.good(), "I/O failure writing " + prefix + ".tensors");
}

LoadedCheckpoint load_checkpoint(const std::string& prefix) {
  std::ifstream mf(prefix + ".manifest");
  RQ_CHECK(mf.good(), "cannot open checkpoint manifest: " + prefix + ".manifest");
  ordered_json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    fail("malformed checkpoint manifest: " + std::string(e.what()));
  }
  RQ_CHECK(manifest.value("format", "") == kFormat, "not a checkpoint manifest: " + prefix);
  const std::string version = manifest.value("format_version", "0.0");
  RQ_CHECK(version.substr(0, version.find('.')) == "1",
           "checkpoint format version mismatch: got " + version + ", reader supports 1.x");

  std::ifstream bf(prefix + ".tensors", std::ios::binary);
  RQ_CHECK(bf.good(), "cannot open checkpoint blob: " + prefix + ".tensors");
  std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  LoadedCheckpoint out;
  out.info.arch = manifest.at("arch").get<std::string>();
  out.info.input_shape = manifest.at("input_shape").get<std::vector<int64_t>>();
  out.info.classes = manifest.at("classes").get<int>();
  out.info.seed = manifest.at("seed").get<uint64_t>();
  out.info.epoch = manifest.at("epoch").get<int>();
  if (!manifest.at("ratio").is_null())
    out.info.ratio = RatioConfig::parse(manifest.at("ratio").get<std::string>());

  out.model = make_model(out.info.arch, out.info.input_shape, out.info.classes, out.info.seed);
  const auto& jlayers = manifest.at("layers");
  RQ_CHECK(jlayers.size() == out.model.layers.size(), "layer count mismatch in " + prefix);

  for (size_t i = 0; i < out.model.layers.size(); ++i) {
    Layer& l = out.model.layers[i];
    const auto& jl = jlayers[i];
    RQ_CHECK(parse_layer_kind(jl.at("kind").get<std::string>()) == l.kind,
             "layer kind mismatch in " + prefix);
    for (const auto& jt : jl.at("tensors")) {
      const std::string name = jt.at("name").get<std::string>();
      const auto shape = jt.at("shape").get<std::vector<int64_t>>();
      const size_t offset = jt.at("offset").get<size_t>();
      const size_t bytes = jt.at("bytes").get<size_t>();
      RQ_CHECK(offset + bytes <= blob.size(), "tensor blob is truncated");
      RQ_CHECK(crc32(blob.data() + offset, bytes) == jt.at("crc32").get<uint32_t>(),
               "checksum failure on tensor '" + name + "' in " + prefix);
      Tensor t = read_le_doubles(blob, offset, shape);
      Var& target = name == "weight" ? l.weight : l.bias;
      RQ_CHECK(target.defined() && target.value().same_shape(t),
               "tensor shape mismatch on '" + name + "' in " + prefix);
      target.value_mut() = std::move(t);
    }
    if (l.quantizable()) {
      l.act_clip.value_mut()[0] = jl.at("act_clip").get<double>();
      if (!jl.at("assignment").is_null()) {
        LayerAssignment asg;
        for (const auto& s : jl.at("assignment").at("specs"))
          asg.specs.push_back(QuantSpec::parse(s.get<std::string>()));
        asg.alphas = jl.at("assignment").at("alphas").get<std::vector<double>>();
        RQ_CHECK(asg.rows() == l.rows(), "assignment row count mismatch in " + prefix);
        RQ_CHECK(asg.alphas.size() == asg.specs.size(), "assignment alpha count mismatch");
        for (double a : asg.alphas) RQ_CHECK(a > 0, "non-positive alpha in checkpoint");
        l.assignment = std::move(asg);
      }
    }
  }

  // Re-validate the row-count invariants against the recorded ratio.
  if (out.info.ratio.has_value() && out.model.fully_assigned()) {
    for (size_t li : out.model.quantizable_layers()) {
      const Layer& l = out.model.layers[li];
      const SpecCounts want = plan_counts(l.rows(), *out.info.ratio);
      SpecCounts got;
      for (const auto& s : l.assignment->specs) {
        if (s == QuantSpec::fixed8())
          ++got.fixed8;
        else if (s == QuantSpec::pot4())
          ++got.pot4;
        else
          ++got.fixed4;
      }
      RQ_CHECK(got.fixed8 == want.fixed8 && got.pot4 == want.pot4 && got.fixed4 == want.fixed4,
               "assignment counts violate the ratio invariant in " + prefix);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// packed export
// ---------------------------------------------------------------------------

namespace {

constexpr char kPackedMagic[4] = {'R', 'Q', 'P', 'K'};

void put_u32(std::string* out, uint32_t v) {
  for (int b = 0; b < 4; ++b) out->push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

void put_f32(std::string* out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

uint32_t get_u32(const std::string& s, size_t* pos) {
  RQ_CHECK(*pos + 4 <= s.size(), "packed export is truncated");
  uint32_t v = 0;
  for (int b = 0; b < 4; ++b)
    v |= static_cast<uint32_t>(static_cast<unsigned char>(s[*pos + static_cast<size_t>(b)]))
         << (8 * b);
  *pos += 4;
  return v;
}

float get_f32(const std::string& s, size_t* pos) {
  const uint32_t bits = get_u32(s, pos);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

// PoT nibble code: sign * (expn + 7), zero level -> 0. Range [-7, 7].
int8_t pot_nibble(int8_t sign, int8_t expn) {
  if (sign == 0) return 0;
  return static_cast<int8_t>(sign * (expn + 7));
}

uint8_t spec_tag(const QuantSpec& s) {
  if (s == QuantSpec::pot4()) return 0;
  if (s == QuantSpec::fixed4()) return 1;
  return 2;
}

QuantSpec tag_spec(uint8_t t) {
  switch (t) {
    case 0: return QuantSpec::pot4();
    case 1: return QuantSpec::fixed4();
    case 2: return QuantSpec::fixed8();
  }
  fail("unknown spec tag in packed export");
}

void pack_nibbles(std::string* out, const std::vector<int8_t>& codes) {
  for (size_t i = 0; i < codes.size(); i += 2) {
    const uint8_t lo = static_cast<uint8_t>(codes[i]) & 0x0F;
    const uint8_t hi = i + 1 < codes.size() ? static_cast<uint8_t>(codes[i + 1]) & 0x0F : 0;
    out->push_back(static_cast<char>(lo | (hi << 4)));
  }
}

int8_t sign_extend4(uint8_t nibble) {
  return static_cast<int8_t>((nibble & 0x08) ? static_cast<int>(nibble) - 16
                                             : static_cast<int>(nibble));
}

}  // namespace

void export_packed(const Model& model, const std::string& path) {
  RQ_CHECK(model.fully_assigned(), "packed export needs a fully assigned model");
  std::string out;
  out.append(kPackedMagic, 4);
  put_u32(&out, 1);  // version
  const auto qlayers = model.quantizable_layers();
  put_u32(&out, static_cast<uint32_t>(qlayers.size()));

  for (size_t li : qlayers) {
    const Layer& l = model.layers[li];
    const auto kernels = layer_row_kernels(l);
    put_u32(&out, static_cast<uint32_t>(l.rows()));
    put_u32(&out, static_cast<uint32_t>(l.row_len()));
    put_f32(&out, static_cast<float>(l.act_clip.value()[0]));
    for (const auto& k : kernels) {
      out.push_back(static_cast<char>(spec_tag(k.spec)));
      put_f32(&out, static_cast<float>(k.weight_scale));
      if (k.spec == QuantSpec::fixed8()) {
        for (int32_t c : k.fixed_codes) out.push_back(static_cast<char>(static_cast<int8_t>(c)));
      } else if (k.spec == QuantSpec::fixed4()) {
        std::vector<int8_t> codes;
        codes.reserve(k.fixed_codes.size());
        for (int32_t c : k.fixed_codes) codes.push_back(static_cast<int8_t>(c));
        pack_nibbles(&out, codes);
      } else {
        std::vector<int8_t> codes;
        codes.reserve(k.pot_sign.size());
        for (size_t i = 0; i < k.pot_sign.size(); ++i)
          codes.push_back(pot_nibble(k.pot_sign[i], k.pot_expn[i]));
        pack_nibbles(&out, codes);
      }
    }
  }

  std::ofstream f(path, std::ios::binary);
  RQ_CHECK(f.good(), "cannot write packed export: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  RQ_CHECK(f.good(), "I/O failure writing " + path);
}

std::vector<PackedLayer> load_packed(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  RQ_CHECK(f.good(), "cannot open packed export: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  RQ_CHECK(s.size() >= 12 && std::memcmp(s.data(), kPackedMagic, 4) == 0,
           "bad magic in packed export: " + path);
  size_t pos = 4;
  const uint32_t version = get_u32(s, &pos);
  RQ_CHECK(version == 1, "unsupported packed export version");
  const uint32_t layer_count = get_u32(s, &pos);

  std::vector<PackedLayer> out;
  for (uint32_t li = 0; li < layer_count; ++li) {
    PackedLayer pl;
    const uint32_t rows = get_u32(s, &pos);
    const uint32_t row_len = get_u32(s, &pos);
    pl.act_clip = static_cast<double>(get_f32(s, &pos));
    for (uint32_t r = 0; r < rows; ++r) {
      RQ_CHECK(pos < s.size(), "packed export is truncated");
      const uint8_t tag = static_cast<uint8_t>(s[pos++]);
      RowKernel k;
      k.spec = tag_spec(tag);
      k.weight_scale = static_cast<double>(get_f32(s, &pos));
      if (k.spec == QuantSpec::fixed8()) {
        RQ_CHECK(pos + row_len <= s.size(), "packed export is truncated");
        for (uint32_t i = 0; i < row_len; ++i)
          k.fixed_codes.push_back(static_cast<int8_t>(s[pos++]));
      } else {
        const uint32_t bytes = (row_len + 1) / 2;
        RQ_CHECK(pos + bytes <= s.size(), "packed export is truncated");
        std::vector<int8_t> codes;
        for (uint32_t i = 0; i < bytes; ++i) {
          const uint8_t b = static_cast<uint8_t>(s[pos++]);
          codes.push_back(sign_extend4(b & 0x0F));
          if (codes.size() < row_len) codes.push_back(sign_extend4((b >> 4) & 0x0F));
        }
        codes.resize(row_len);
        if (k.spec == QuantSpec::fixed4()) {
          for (int8_t c : codes) k.fixed_codes.push_back(c);
        } else {
          for (int8_t c : codes) {
            if (c == 0) {
              k.pot_sign.push_back(0);
              k.pot_expn.push_back(0);
            } else {
              k.pot_sign.push_back(c > 0 ? 1 : -1);
              k.pot_expn.push_back(static_cast<int8_t>((c > 0 ? c : -c) - 7));
            }
          }
        }
      }
      pl.rows.push_back(std::move(k));
    }
    out.push_back(std::move(pl));
  }
  return out;
}

}  // namespace rowquant
