#pragma once

// Declarative CNNs: VGG-style chains plus single-skip residual blocks, with a
// quantization-aware forward pass.
//
// Architecture text format (one layer per line, or ';'-separated):
//
//   input C H W                 input geometry, must come first
//   conv I O k=3 s=1 p=1        also "conv I->O k3 s1 p1"
//   dense F C                   flattens 4-D input automatically
//   bn | batchnorm
//   relu
//   maxpool                     2x2, stride 2
//   avgpool [window|global]     default window 2
//   add from=ID [proj]          residual add of layer ID's output; "proj"
//                               inserts a 1x1 strided conv on the shortcut
//   # comment
//
// Layer ids count the non-input lines from 0.
//
// Quantization layout. Every conv/dense layer except the last one (the
// classifier) is quantizable. A quantizable layer owns the run of bn / relu /
// add layers that directly follows it; the last layer of that run is its
// activation tap. In quantized mode the layer's weights and the tap output
// are fake-quantized to the layer's planned width, and so is any residual
// shortcut (including its projection) that is added inside the run. Pooling
// layers consume the already quantized tap output.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "quanos/ops.hpp"
#include "quanos/quantizer.hpp"
#include "quanos/rng.hpp"
#include "quanos/tensor.hpp"

namespace quanos {

enum class LayerKind { conv, dense, relu, batchnorm, maxpool, avgpool, residual_add };

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int id = 0;
  std::size_t in_channels = 0;  // conv: I, dense: F
  std::size_t out_channels = 0; // conv: O, dense: C
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 2;  // avgpool; 0 = global
  std::optional<int> shortcut_from;
  bool projection = false;
};

struct ArchSpec {
  std::size_t in_channels = 1, in_height = 28, in_width = 28;
  std::vector<LayerSpec> layers;

  /// Parses the text format above. Throws ValidationError on syntax errors.
  static ArchSpec parse(std::string_view text);
  std::string to_text() const;

  /// Per-sample output shape of every layer ([C,H,W] or [F]). Throws
  /// ValidationError naming the first inconsistent layer id.
  std::vector<Shape> infer_shapes() const;
};

/// Built-in architectures: mnist-cnn, mnist-mlp, toy-mlp, vgg19-cifar,
/// resnet18-cifar. Throws ArgumentError for unknown names.
std::string arch_preset(const std::string& name);
std::vector<std::string> arch_preset_names();

/// Spec text from a preset name or a file path.
std::string load_arch_text(const std::string& preset_or_path);

enum class ForwardMode { clean, quantized };

/// Per-sample keep mask (1 keeps a unit, 0 clamps it to zero) applied to one
/// layer's activation output.
struct AblationMask {
  int layer_id = -1;
  std::vector<float> keep;
};

struct ForwardOptions {
  std::optional<ForwardMode> mode;  // unset: the model's default mode
  bool training = false;            // batch statistics + running-stat updates
  bool capture = false;
  bool param_grads = true;  // false: parameters enter the graph as constants
  const AblationMask* ablation = nullptr;
};

/// Anything that maps an input batch to logits differentiably in x.
class Classifier {
 public:
  virtual ~Classifier() = default;
  /// Eval-mode logits; the graph reaches x but never the parameters.
  virtual Tensor<float> logits(const Tensor<float>& x) const = 0;
};

/// Geometry of one weight layer as seen by the cost model.
struct WeightLayerGeometry {
  int id = 0;        // layer id (projection: the add layer's id)
  int owner_id = 0;  // quantizable layer whose width applies
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t in_size = 0, kernel = 1, out_size = 0;
  bool classifier = false;
  bool projection = false;
};

struct LayerParams {
  Tensor<float> weight, bias;
  Tensor<float> gamma, beta;
  ops::BatchNormState<float> bn;
  Tensor<float> proj_weight, proj_bias;
};

class NetworkModel : public Classifier {
 public:
  NetworkModel() = default;
  /// Validates the spec and initializes parameters (He-uniform weights, zero
  /// biases, BN gamma=1 beta=0) from `seed`.
  NetworkModel(ArchSpec arch, std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Shape>& output_shapes() const { return shapes_; }

  const std::vector<int>& quantizable_ids() const { return quantizable_; }
  int classifier_id() const { return classifier_; }
  /// Layer id whose output is the activation tap of quantizable layer `id`.
  int tap_of(int id) const;

  void set_plan(BitWidthPlan plan);
  void clear_plan();
  const std::optional<BitWidthPlan>& plan() const { return plan_; }
  ForwardMode default_mode() const { return plan_ ? ForwardMode::quantized : ForwardMode::clean; }

  void enable_capture(bool on) { capture_enabled_ = on; }
  bool capture_enabled() const { return capture_enabled_; }
  /// Activation snapshots from the last forward with capture on, keyed by
  /// quantizable layer id, each [B, ...].
  const std::map<int, Tensor<float>>& captured() const { return captured_; }
  /// Shortcut branch values (after projection/quantization) keyed by add id.
  const std::map<int, Tensor<float>>& captured_shortcuts() const { return captured_shortcuts_; }

  /// Full forward pass. Quantized mode without a plan throws StateError.
  Tensor<float> forward(const Tensor<float>& x, const ForwardOptions& opts = {});
  /// Eval-mode forward in the default mode without parameter gradients.
  Tensor<float> infer(const Tensor<float>& x, const AblationMask* ablation = nullptr) const;
  Tensor<float> logits(const Tensor<float>& x) const override { return infer(x); }

  /// Trainable tensors in a fixed order, with stable names.
  std::vector<Tensor<float>*> parameters();
  std::vector<std::pair<std::string, const Tensor<float>*>> named_parameters() const;
  std::vector<LayerParams>& layer_params() { return params_; }
  const std::vector<LayerParams>& layer_params() const { return params_; }
  std::size_t parameter_count() const;
  /// Sum of I*O*k^2 over non-projection conv layers.
  std::size_t conv_parameter_count() const;
  void zero_grad();

  /// SHA-256 hex over parameters and BN running statistics.
  std::string state_hash() const;

  /// Weight layers (quantizable convs/denses, projections, classifier) for
  /// the cost model.
  std::vector<WeightLayerGeometry> weight_geometry() const;

  /// Output units per sample at the point where an ablation of `layer_id`
  /// applies. Throws ArgumentError for unknown ids.
  std::size_t ablation_units(int layer_id) const;

  rng::Engine& engine() { return engine_; }
  const rng::Engine& engine() const { return engine_; }

 private:
  // train_params is non-null only for training passes (BN statistics update).
  Tensor<float> execute(const Tensor<float>& x, const ForwardOptions& opts, std::vector<LayerParams>* train_params,
                        std::map<int, Tensor<float>>* capture, std::map<int, Tensor<float>>* shortcuts) const;
  void index_layers();

  ArchSpec arch_;
  std::uint64_t seed_ = 0;
  rng::Engine engine_;
  std::vector<Shape> shapes_;
  std::vector<LayerParams> params_;
  std::vector<int> quantizable_;
  std::vector<int> owner_;    // per layer: quantizable owner id or -1
  std::vector<bool> is_tap_;  // per layer
  std::vector<std::size_t> proj_stride_;  // per add layer with a projection
  int classifier_ = -1;
  std::optional<BitWidthPlan> plan_;
  bool capture_enabled_ = false;
  std::map<int, Tensor<float>> captured_;
  std::map<int, Tensor<float>> captured_shortcuts_;

  friend std::vector<std::uint8_t> save_checkpoint(const NetworkModel&);
  friend NetworkModel load_checkpoint(std::span<const std::uint8_t>);
};

/// Ablation of a seeded random `fraction` of a layer's units. The mask is
/// the same for every input.
AblationMask make_ablation(const NetworkModel& model, int layer_id, double fraction, std::uint64_t seed);

/// Forward view of a model with one layer partially clamped to zero. The
/// model's parameters are not touched.
class AblatedModel : public Classifier {
 public:
  AblatedModel(const NetworkModel& model, AblationMask mask) : model_(&model), mask_(std::move(mask)) {}
  Tensor<float> logits(const Tensor<float>& x) const override { return model_->infer(x, &mask_); }
  const AblationMask& mask() const { return mask_; }

 private:
  const NetworkModel* model_;
  AblationMask mask_;
};

/// Versioned binary container: magic "QNOSCKPT", format version, payload
/// length and SHA-256 of the payload, then the payload (architecture text,
/// seed, RNG state, plan, parameters, BN statistics).
std::vector<std::uint8_t> save_checkpoint(const NetworkModel& model);
/// Throws CorruptionError on bad magic, unsupported version, truncation or
/// hash mismatch.
NetworkModel load_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint_file(const NetworkModel& model, const std::filesystem::path& path);
NetworkModel load_checkpoint_file(const std::filesystem::path& path);

}  // namespace quanos
