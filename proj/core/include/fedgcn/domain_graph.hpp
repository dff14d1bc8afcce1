#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <span>
#include <vector>

#include "fedgcn/layers.hpp"

namespace fedgcn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Ablation switches for the domain-specific residual machinery.
struct SpecializationPlan {
  enum class Layers { all, last };
  enum class AdjacencyInit { identity, random, uniform };
  enum class Activation { relu, none };
  enum class Assignment { hard, soft };

  Layers layers = Layers::last;
  AdjacencyInit adjacency_init = AdjacencyInit::identity;
  Activation activation = Activation::relu;
  Assignment assignment = Assignment::soft;
};

/// Inverse euclidean distance between two equally laid out parameter rows,
/// floored at `distance_floor` so identical rows stay finite.
double domain_similarity(std::span<const double> a, std::span<const double> b,
                         double distance_floor);

/// Row-stochastic adjacency over domain parameter rows: diagonal is exactly
/// `self_weight`, off-diagonal mass (1 - self_weight) splits proportionally
/// to pairwise similarity. A single domain yields [[1]].
Matrix build_adjacency(const Matrix& rows, double self_weight, double distance_floor);

/// Initial adjacency used before any refresh has happened.
Matrix initial_adjacency(std::size_t num_domains, SpecializationPlan::AdjacencyInit init,
                         double self_weight, Rng& rng);

/// One graph-convolution step over the domain node matrix: act(A * V * W).
/// `activation` applies elementwise; relu keeps subgradient 1 at exactly 0 so
/// zero-initialized node rows remain trainable.
Matrix gcn_transform(const Matrix& adjacency, const Matrix& nodes, const Matrix& projection,
                     SpecializationPlan::Activation activation);

/// Composes the domain-agnostic layer output with the weighted domain
/// branches: out = f(z; theta_a) + lambda * sum_d w[d] * f(z; vhat row d).
/// One weight vector is broadcast over the whole batch; the model's training
/// path generalizes this to per-sample weights.
Tensor residual_forward(const LayerSpec& layer, const Tensor& z,
                        std::span<const double> theta_a, const Matrix& vhat, double lambda,
                        std::span<const double> weights);

}  // namespace fedgcn
