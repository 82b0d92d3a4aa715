#ifndef ROWQUANT_NN_HPP
#define ROWQUANT_NN_HPP

#include <optional>
#include <string>
#include <vector>

#include "rowquant/autograd.hpp"
#include "rowquant/quant.hpp"

namespace rowquant {

enum class LayerKind { Dense, Conv2d, Relu, MaxPool2, ChannelAffine, Flatten };

std::string layer_kind_name(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);

/// One model layer. Dense and Conv2d are the quantizable kinds: their weight
/// rows (output neurons / filters) carry the per-row scheme assignment, and
/// their input activations go through the learnable-clip quantizer.
struct Layer {
  LayerKind kind = LayerKind::Relu;
  Var weight;  // Dense [out,in]; Conv2d [F,C,k,k]; ChannelAffine gamma [C]
  Var bias;    // Dense/Conv2d bias; ChannelAffine beta
  int64_t stride = 1;
  int64_t pad = 0;

  std::optional<LayerAssignment> assignment;
  Var act_clip;  // scalar, PACT-style learnable input clip (init 6.0)

  bool quantizable() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
  int64_t rows() const;     // output neurons / filters
  int64_t row_len() const;  // weights per row
};

struct Model {
  std::string arch;
  std::vector<int64_t> input_shape;  // {C,H,W} for images, {D} for flat features
  int classes = 0;
  std::vector<Layer> layers;

  int64_t input_dim() const;
  std::vector<size_t> quantizable_layers() const;
  bool fully_assigned() const;
};

/// Named presets: "mlp-small" (hidden 128), "cnn-small" (2 conv + 2 fc),
/// "cnn-tiny" (1 conv + 1 fc). Conv presets require image input with
/// spatial dims divisible by the pooling factor.
Model make_model(const std::string& arch, const std::vector<int64_t>& input_shape, int classes,
                 uint64_t seed);

/// Forward pass on a flat [batch, input_dim] tensor. With quantized=true
/// every quantizable layer projects its weights row-wise by the assigned
/// quantizer and its input through the activation quantizer (STE backward).
Var forward(const Model& model, const Var& input, bool quantized);

/// Mean softmax cross-entropy over one batch of flat features.
Var model_loss(const Model& model, const Tensor& features, const std::vector<int>& labels,
               bool quantized);

std::vector<Var> parameters(const Model& model);
Model clone_model(const Model& model);

/// Weight projection with straight-through backward: gradient passes where
/// |w| <= alpha(row) and is zero outside.
Var ste_project_weights(const Var& w, const LayerAssignment& asg);

/// Activation projection with straight-through backward; the clip scalar
/// receives the summed gradient of the saturated elements.
Var ste_project_acts(const Var& x, const Var& clip, int bits = 4);

}  // namespace rowquant

#endif  // ROWQUANT_NN_HPP
