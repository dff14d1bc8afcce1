#pragma once

#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "fedgcn/domain_graph.hpp"
#include "fedgcn/layers.hpp"

namespace fedgcn {

/// Ordered stack of layers ending in a softmax cross-entropy head, with
/// optional per-layer domain-specific residual blocks connected by a GCN.
///
/// Parameter layout: one segment per layer (empty for parameterless kinds),
/// followed, for each specialized layer in order, by its node matrix V
/// (num_domains x q), the projection (either a single q x q block or a
/// two-stage bottleneck pair), and the scalar residual weight lambda.
class LayeredModel {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  struct SpecEntry {
    std::size_t layer = 0;        // index into layers()
    std::size_t q = 0;            // parameters per domain at this layer
    std::size_t hidden = 0;       // bottleneck width, 0 for single-stage
    std::size_t v_seg = 0;
    std::size_t w1_seg = 0;
    std::size_t w2_seg = npos;
    std::size_t lambda_seg = 0;
  };

  LayeredModel() = default;
  LayeredModel(std::vector<std::size_t> input_shape, std::vector<LayerSpec> layers);

  /// Attaches domain-specific residual blocks per the plan. Node rows start
  /// at zero so the residual path is inert until trained; projections are
  /// initialized like dense weights.
  void specialize(std::size_t num_domains, SpecializationPlan plan, double lambda_init = 1.0,
                  std::size_t bottleneck_threshold = 4096, std::size_t bottleneck_factor = 16);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<std::size_t>& input_shape() const { return input_shape_; }
  /// Output shape of layer i (batch axis excluded).
  const std::vector<std::size_t>& output_shape(std::size_t i) const { return shapes_[i + 1]; }
  std::size_t num_classes() const { return shapes_.back()[0]; }

  bool specialized() const { return !spec_.empty(); }
  std::size_t num_domains() const { return num_domains_; }
  const SpecializationPlan& plan() const { return plan_; }
  const std::vector<SpecEntry>& specialization() const { return spec_; }

  const std::vector<ParamSegment>& layout() const { return layout_; }
  std::size_t param_count() const { return total_params_; }

  ParamVector init_params(Rng& rng) const;
  ParamVector zero_params() const;

  /// Residual scale per specialized layer, extracted from params.
  std::vector<double> lambdas(const ParamVector& params) const;
  /// Concatenated node rows across specialized layers, one row per domain;
  /// the parameter-space representation each domain owns.
  Matrix domain_param_rows(const ParamVector& params) const;

 private:
  std::vector<std::size_t> input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<std::vector<std::size_t>> shapes_;  // size L+1, [0] = input
  std::vector<ParamSegment> layout_;
  std::vector<SpecEntry> spec_;
  std::size_t num_domains_ = 0;
  SpecializationPlan plan_;
  double lambda_init_ = 1.0;
  std::size_t total_params_ = 0;

  void rebuild_layout();
};

struct ForwardOptions {
  /// Required when the model is specialized: row-stochastic D x D matrix.
  const Matrix* adjacency = nullptr;
  /// Required when the model is specialized: row-major (batch x D) mixture
  /// weights, one simplex row per sample.
  const std::vector<double>* domain_weights = nullptr;
  /// When true and a layer's lambda is exactly 0, its residual branches are
  /// skipped entirely (training with frozen lambda needs no branch values).
  bool frozen_lambda = false;
};

/// Everything backward() needs from the matching forward() call.
struct ActivationCache {
  std::vector<Tensor> acts;  // acts[0] = input, acts[i+1] = output of layer i
  std::vector<detail::ConvScratch> conv;
  struct SpecCache {
    Matrix av;        // adjacency * V
    Matrix pre1;      // av * W1 (pre-activation)
    Matrix hidden;    // act(pre1), two-stage only
    Matrix pre2;      // hidden * W2 (pre-activation), two-stage only
    Matrix vhat;      // final activated node matrix
    std::vector<Tensor> branch_out;  // per-domain branch outputs
    bool skipped = false;            // frozen lambda == 0 fast path
  };
  std::vector<SpecCache> spec;   // parallel to model.specialization()
  std::vector<double> domain_weights;
  Matrix adjacency;
  bool frozen_lambda = false;
  Tensor logits;
  std::size_t batch = 0;
};

/// Runs the model on a batch; returns logits of shape (batch, classes).
/// `cache` may be null when no backward pass will follow.
Tensor forward(const LayeredModel& model, const ParamVector& params, const Tensor& x,
               ActivationCache* cache = nullptr, const ForwardOptions& opts = {});

struct BackwardResult {
  double loss = 0.0;
  Gradient grad;
};

/// Mean cross-entropy loss over the batch plus gradients for every
/// parameter, including node rows, projections and lambdas of specialized
/// layers. The adjacency is treated as a constant. `sample_weights`, when
/// non-empty, reweights each sample's loss term (mean over weights).
BackwardResult backward(const LayeredModel& model, const ParamVector& params,
                        const ActivationCache& cache, std::span<const int> labels,
                        std::span<const double> sample_weights = {});

/// params - lr * grad, elementwise. lr must be >= 0.
ParamVector sgd_step(const ParamVector& params, const Gradient& grad, double lr);
void sgd_step_inplace(ParamVector& params, const Gradient& grad, double lr);

/// Mean cross-entropy of logits (batch x classes) against integer labels.
double cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Row-wise softmax.
Tensor softmax_rows(const Tensor& logits);

/// Argmax per row; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace fedgcn
