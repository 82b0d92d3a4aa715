#include "rowquant/nn.hpp"

#include <cmath>

#include "rowquant/rng.hpp"

namespace rowquant {

std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::ChannelAffine: return "channel_affine";
    case LayerKind::Flatten: return "flatten";
  }
  fail("unreachable layer kind");
}

LayerKind parse_layer_kind(const std::string& s) {
  if (s == "dense") return LayerKind::Dense;
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "relu") return LayerKind::Relu;
  if (s == "maxpool2") return LayerKind::MaxPool2;
  if (s == "channel_affine") return LayerKind::ChannelAffine;
  if (s == "flatten") return LayerKind::Flatten;
  fail("unknown layer kind: " + s);
}

int64_t Layer::rows() const {
  RQ_CHECK(quantizable(), "rows() on a non-quantizable layer");
  return weight.shape()[0];
}

int64_t Layer::row_len() const { return weight.numel() / rows(); }

int64_t Model::input_dim() const {
  int64_t d = 1;
  for (int64_t v : input_shape) d *= v;
  return d;
}

std::vector<size_t> Model::quantizable_layers() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < layers.size(); ++i)
    if (layers[i].quantizable()) out.push_back(i);
  return out;
}

bool Model::fully_assigned() const {
  for (const auto& l : layers)
    if (l.quantizable() && !l.assignment.has_value()) return false;
  return true;
}

namespace {

Tensor he_init(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.gaussian();
  return t;
}

Layer make_dense(int64_t in, int64_t out, Rng& rng) {
  Layer l;
  l.kind = LayerKind::Dense;
  l.weight = Var(he_init({out, in}, in, rng), true);
  l.bias = Var(Tensor({out}), true);
  l.act_clip = Var(Tensor::scalar(6.0), true);
  return l;
}

Layer make_conv(int64_t in_ch, int64_t out_ch, int64_t k, int64_t pad, Rng& rng) {
  Layer l;
  l.kind = LayerKind::Conv2d;
  l.weight = Var(he_init({out_ch, in_ch, k, k}, in_ch * k * k, rng), true);
  l.bias = Var(Tensor({out_ch}), true);
  l.stride = 1;
  l.pad = pad;
  l.act_clip = Var(Tensor::scalar(6.0), true);
  return l;
}

Layer make_affine(int64_t ch) {
  Layer l;
  l.kind = LayerKind::ChannelAffine;
  l.weight = Var(Tensor::full({ch}, 1.0), true);
  l.bias = Var(Tensor({ch}), true);
  return l;
}

Layer make_plain(LayerKind k) {
  Layer l;
  l.kind = k;
  return l;
}

}  // namespace

Model make_model(const std::string& arch, const std::vector<int64_t>& input_shape, int classes,
                 uint64_t seed) {
  RQ_CHECK(classes >= 2, "model needs at least two classes");
  Model m;
  m.arch = arch;
  m.input_shape = input_shape;
  m.classes = classes;
  Rng rng(Rng::mix(seed, 0xA11C0DE));

  const bool image = input_shape.size() == 3;
  const int64_t c = image ? input_shape[0] : 0;
  const int64_t h = image ? input_shape[1] : 0;
  const int64_t w = image ? input_shape[2] : 0;

  if (arch == "mlp-small") {
    m.layers.push_back(make_dense(m.input_dim(), 128, rng));
    m.layers.push_back(make_plain(LayerKind::Relu));
    m.layers.push_back(make_dense(128, classes, rng));
  } else if (arch == "cnn-small") {
    RQ_CHECK(image && h % 4 == 0 && w % 4 == 0,
             "cnn-small needs image input with spatial dims divisible by 4");
    m.layers.push_back(make_conv(c, 8, 3, 1, rng));
    m.layers.push_back(make_affine(8));
    m.layers.push_back(make_plain(LayerKind::Relu));
    m.layers.push_back(make_plain(LayerKind::MaxPool2));
    m.layers.push_back(make_conv(8, 16, 3, 1, rng));
    m.layers.push_back(make_affine(16));
    m.layers.push_back(make_plain(LayerKind::Relu));
    m.layers.push_back(make_plain(LayerKind::MaxPool2));
    m.layers.push_back(make_plain(LayerKind::Flatten));
    m.layers.push_back(make_dense(16 * (h / 4) * (w / 4), 64, rng));
    m.layers.push_back(make_plain(LayerKind::Relu));
    m.layers.push_back(make_dense(64, classes, rng));
  } else if (arch == "cnn-tiny") {
    RQ_CHECK(image && h % 2 == 0 && w % 2 == 0,
             "cnn-tiny needs image input with even spatial dims");
    m.layers.push_back(make_conv(c, 8, 3, 1, rng));
    m.layers.push_back(make_plain(LayerKind::Relu));
    m.layers.push_back(make_plain(LayerKind::MaxPool2));
    m.layers.push_back(make_plain(LayerKind::Flatten));
    m.layers.push_back(make_dense(8 * (h / 2) * (w / 2), classes, rng));
  } else {
    fail("unknown model architecture: " + arch);
  }
  return m;
}

Var ste_project_weights(const Var& w, const LayerAssignment& asg) {
  const Tensor& t = w.value();
  const int64_t rows = t.dim(0);
  RQ_CHECK(asg.rows() == rows, "assignment row count does not match weight rows");
  const int64_t row_len = t.numel() / rows;

  Tensor out(t.shape());
  auto mask = std::make_shared<Tensor>(t.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const QuantSpec& spec = asg.specs[static_cast<size_t>(r)];
    const double alpha = asg.alphas[static_cast<size_t>(r)];
    for (int64_t j = 0; j < row_len; ++j) {
      const int64_t i = r * row_len + j;
      out[i] = quantize_weight(t[i], spec, alpha);
      (*mask)[i] = std::fabs(t[i]) <= alpha ? 1.0 : 0.0;
    }
  }
  return make_op("ste_project_weights", std::move(out), {w},
                 [mask = std::shared_ptr<const Tensor>(mask)](const Var& g) {
                   return std::vector<Var>{mul_mask(g, mask)};
                 });
}

Var ste_project_acts(const Var& x, const Var& clip, int bits) {
  RQ_CHECK(clip.numel() == 1, "activation clip must be a scalar");
  const double c = clip.value()[0];
  RQ_CHECK(c > 0, "activation clip must be positive");
  const Tensor& t = x.value();

  Tensor out(t.shape());
  auto keep = std::make_shared<Tensor>(t.shape());
  auto sat = std::make_shared<Tensor>(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) {
    out[i] = quantize_activation_value(t[i], bits, c);
    const bool saturated = t[i] > c;
    (*keep)[i] = saturated ? 0.0 : 1.0;
    (*sat)[i] = saturated ? 1.0 : 0.0;
  }
  return make_op("ste_project_acts", std::move(out), {x, clip},
                 [keep = std::shared_ptr<const Tensor>(keep),
                  sat = std::shared_ptr<const Tensor>(sat)](const Var& g) {
                   return std::vector<Var>{mul_mask(g, keep), sum_all(mul_mask(g, sat))};
                 });
}

Var forward(const Model& model, const Var& input, bool quantized) {
  RQ_CHECK(input.shape().size() == 2 && input.shape()[1] == model.input_dim(),
           "forward expects [batch, input_dim] input");
  const int64_t batch = input.shape()[0];

  Var h = input;
  if (model.input_shape.size() == 3)
    h = reshape(h, {batch, model.input_shape[0], model.input_shape[1], model.input_shape[2]});

  for (const auto& layer : model.layers) {
    switch (layer.kind) {
      case LayerKind::Dense: {
        Var x = h;
        Var w = layer.weight;
        if (quantized) {
          RQ_CHECK(layer.assignment.has_value(), "quantized forward: layer missing assignment");
          x = ste_project_acts(x, layer.act_clip);
          w = ste_project_weights(w, *layer.assignment);
        }
        h = dense(x, w, layer.bias);
        break;
      }
      case LayerKind::Conv2d: {
        Var x = h;
        Var w = layer.weight;
        if (quantized) {
          RQ_CHECK(layer.assignment.has_value(), "quantized forward: layer missing assignment");
          x = ste_project_acts(x, layer.act_clip);
          w = ste_project_weights(w, *layer.assignment);
        }
        h = add_channel_bias(conv2d(x, w, layer.stride, layer.pad), layer.bias);
        break;
      }
      case LayerKind::Relu:
        h = relu(h);
        break;
      case LayerKind::MaxPool2:
        h = maxpool2x2(h);
        break;
      case LayerKind::ChannelAffine:
        h = channel_affine(h, layer.weight, layer.bias);
        break;
      case LayerKind::Flatten:
        h = reshape(h, {batch, h.numel() / batch});
        break;
    }
  }
  RQ_CHECK(h.shape().size() == 2 && h.shape()[1] == model.classes,
           "model output does not match class count");
  return h;
}

Var model_loss(const Model& model, const Tensor& features, const std::vector<int>& labels,
               bool quantized) {
  Var logits = forward(model, Var(features), quantized);
  return softmax_cross_entropy(logits, labels);
}

std::vector<Var> parameters(const Model& model) {
  std::vector<Var> out;
  for (const auto& l : model.layers) {
    if (l.weight.defined()) out.push_back(l.weight);
    if (l.bias.defined()) out.push_back(l.bias);
    if (l.act_clip.defined()) out.push_back(l.act_clip);
  }
  return out;
}

Model clone_model(const Model& model) {
  Model m;
  m.arch = model.arch;
  m.input_shape = model.input_shape;
  m.classes = model.classes;
  for (const auto& l : model.layers) {
    Layer c;
    c.kind = l.kind;
    c.stride = l.stride;
    c.pad = l.pad;
    if (l.weight.defined()) c.weight = Var(l.weight.value(), l.weight.requires_grad());
    if (l.bias.defined()) c.bias = Var(l.bias.value(), l.bias.requires_grad());
    if (l.act_clip.defined()) c.act_clip = Var(l.act_clip.value(), l.act_clip.requires_grad());
    c.assignment = l.assignment;
    m.layers.push_back(std::move(c));
  }
  return m;
}

}  // namespace rowquant
