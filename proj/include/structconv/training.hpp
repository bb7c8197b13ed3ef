#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "structconv/structured.hpp"
#include "structconv/tensor.hpp"

namespace structconv {

// Structural regularization ---------------------------------------------------

/// Smoothing added to ||PW||^2 in the gradient so that it stays finite at
/// exactly structured weights.
inline constexpr double kSrEpsilon = 1e-12;

struct SrLoss {
  double total = 0.0;
  std::vector<double> per_layer;
};

/// r_l = ||(I - A_l A_l+) W_l||_F / ||W_l||_F per layer and their plain sum.
/// Each weight may be a single kernel, a C_out x C x N x N layer or a P x Q
/// matrix (with N = 1). Throws Error on a zero-norm weight.
SrLoss sr_loss(std::span<const Tensor> weights, std::span<const StructuredConfig> cfgs);

/// Gradient of r(W) = ||PW|| / ||W|| with P = I - AA+ applied kernel-wise:
/// PW / (||PW||_eps ||W||) - ||PW||_eps W / ||W||^3, ||v||_eps = sqrt(||v||^2 + eps).
Tensor sr_grad(const Tensor& weights, const StructuredConfig& cfg);

// Toy networks -----------------------------------------------------------------

enum class ToyLayerKind { conv, dwconv, relu, global_avg_pool, linear };

/// Layer of a toy classifier. conv and dwconv use kernel_size, geom and
/// {alpha_channels, alpha_size} = {c, n}; linear uses out_channels = P and
/// alpha_channels = R.
struct ToyLayer {
  ToyLayerKind kind = ToyLayerKind::relu;
  std::string name;
  std::size_t out_channels = 0;
  std::size_t kernel_size = 1;
  ConvGeometry geom;
  std::size_t alpha_channels = 1;
  std::size_t alpha_size = 1;
};

struct ToyModelSpec {
  Shape input_shape{3, 8, 8};
  std::size_t classes = 4;
  std::vector<ToyLayer> layers;

  /// Checks that shapes chain from input to a `classes`-wide linear output and
  /// that every structure parameter is admissible.
  void validate() const;

  /// conv 3->16 (c=2, n=2), depthwise 3x3 (n=2), pointwise 16->16 (c=8),
  /// global pooling and a 16->4 linear layer (R=8), with ReLUs between.
  static ToyModelSpec default_student();
};

struct ConvOp {
  Tensor weight;  // C_out x C/g x k x k
  Tensor bias;    // C_out
  ConvGeometry geom;
};
struct SumPoolOp {
  PoolDims dims;
  ConvGeometry geom;
};
struct ReluOp {};
struct GlobalAvgPoolOp {};
struct LinearOp {
  Tensor weight;  // P x Q
  Tensor bias;    // P
};

using Op = std::variant<ConvOp, SumPoolOp, ReluOp, GlobalAvgPoolOp, LinearOp>;

/// A trainable layer of the source spec and the op that holds its parameters.
struct LayerBinding {
  std::string name;
  std::size_t op_index = 0;
  StructuredConfig cfg;  // per-kernel structure ({Q, 1, R, 1} for linear)
  bool is_linear = false;
};

/// Sequential network. `decomposed` selects the parameterization: full
/// C x N x N kernels, or sum-pool + alpha kernels (the op holding each layer's
/// parameters then stores alpha).
struct Model {
  ToyModelSpec spec;
  bool decomposed = false;
  std::vector<Op> ops;
  std::vector<LayerBinding> layers;
};

/// Random initialization. Full and decomposed models built from the same seed
/// share their full-weight draw; the decomposed one keeps its projection A+W.
Model build_model(const ToyModelSpec& spec, std::uint64_t seed, bool decomposed);

/// Logits for one C x H x W input.
Tensor forward(const Model& model, const Tensor& input);

/// Full-size weight of every trainable layer (A alpha for decomposed models).
std::vector<Tensor> effective_weights(const Model& model);
std::vector<double> layer_residuals(const Model& model);

/// Equivalent model with full kernels.
Model materialize(const Model& model);

struct DecomposedModel {
  Model model;
  std::vector<double> residuals;  // per trainable layer, at decomposition time
};

/// Replaces every conv / linear layer by its sum-pool decomposition.
/// Throws ResidualError naming the layer if a kernel exceeds residual_tol.
DecomposedModel decompose_model(const Model& model, double residual_tol);

// Data ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  std::size_t size() const { return inputs.size(); }
};

struct ToyData {
  Dataset train;
  Dataset test;
  Model teacher;
  std::uint64_t teacher_seed = 0;  // seed actually used after any resampling
};

inline constexpr std::size_t kToyTrainSize = 2048;
inline constexpr std::size_t kToyTestSize = 512;
inline constexpr std::size_t kToyClasses = 4;

/// Deterministic synthetic task: 3 x 8 x 8 inputs uniform on [-1, 1), labels
/// from the argmax of a frozen random teacher (2 conv + linear). The teacher's
/// output bias is calibrated for balance, and its seed advanced until every
/// class holds within 10% of a uniform share in both splits.
ToyData make_toy_dataset(std::uint64_t seed);

std::vector<std::size_t> class_histogram(const Dataset& data, std::size_t classes);

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

Evaluation evaluate(const Model& model, const Dataset& data);

// Training -----------------------------------------------------------------------

enum class TrainMode { regularized, direct, plain };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct TrainingConfig {
  double lambda = 0.1;
  double learning_rate = 0.05;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::regularized;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double task_loss = 0.0;  // mean over the epoch's batches
  double sr_loss = 0.0;    // sum of layer residuals after the epoch
  std::vector<double> residuals;
  double eval_accuracy = 0.0;
};

struct TrainLog {
  std::string mode;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> layer_names;
  std::vector<EpochRecord> epochs;
  double acc_pre = 0.0;   // full-kernel model on the test split
  double acc_post = 0.0;  // decomposed model on the test split
  std::vector<double> decomposition_residuals;

  double final_mean_residual() const;
  /// One JSON object per epoch followed by a summary record.
  std::string to_jsonl() const;
};

struct TrainResult {
  Model model;
  TrainLog log;
};

/// Mini-batch SGD on softmax cross-entropy + lambda * sum of layer residuals.
/// `plain` forces lambda = 0; `direct` trains the decomposed parameterization
/// and ignores lambda. Throws DivergenceError on a non-finite loss.
TrainResult train(const ToyModelSpec& spec, const ToyData& data, TrainingConfig config);

// Exposed for gradient tests --------------------------------------------------------

/// Cross-entropy loss of one sample and the gradient of every op's parameters
/// (weight gradients followed by bias gradients, in op order; ops without
/// parameters contribute nothing).
struct SampleGradient {
  double loss = 0.0;
  std::vector<Tensor> weight_grads;  // indexed like model.ops; empty for parameter-free ops
  std::vector<Tensor> bias_grads;
};

SampleGradient sample_gradient(const Model& model, const Tensor& input, int label);

}  // namespace structconv
