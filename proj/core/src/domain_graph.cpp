#include "fedgcn/domain_graph.hpp"

#include <cmath>

namespace fedgcn {

double domain_similarity(std::span<const double> a, std::span<const double> b,
                         double distance_floor) {
  if (a.size() != b.size()) {
    throw LayoutError("domain parameter rows differ in length");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
  }
  const double dist = std::sqrt(sq);
  return 1.0 / (dist > distance_floor ? dist : distance_floor);
}

Matrix build_adjacency(const Matrix& rows, double self_weight, double distance_floor) {
  const std::size_t d = static_cast<std::size_t>(rows.rows());
  if (d == 0) throw ConfigError("adjacency needs at least one domain");
  Matrix a = Matrix::Zero(d, d);
  if (d == 1) {
    a(0, 0) = 1.0;
    return a;
  }
  const std::size_t q = static_cast<std::size_t>(rows.cols());
  for (std::size_t i = 0; i < d; ++i) {
    a(i, i) = self_weight;
    double total = 0.0;
    std::vector<double> sim(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      if (j == i) continue;
      sim[j] = domain_similarity({rows.data() + i * q, q}, {rows.data() + j * q, q},
                                 distance_floor);
      total += sim[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (j == i) continue;
      a(i, j) = (1.0 - self_weight) * sim[j] / total;
    }
  }
  return a;
}

Matrix initial_adjacency(std::size_t num_domains, SpecializationPlan::AdjacencyInit init,
                         double self_weight, Rng& rng) {
  if (num_domains == 0) throw ConfigError("adjacency needs at least one domain");
  Matrix a = Matrix::Zero(num_domains, num_domains);
  if (num_domains == 1) {
    a(0, 0) = 1.0;
    return a;
  }
  switch (init) {
    case SpecializationPlan::AdjacencyInit::identity:
      a.setIdentity();
      break;
    case SpecializationPlan::AdjacencyInit::uniform: {
      const double off = (1.0 - self_weight) / static_cast<double>(num_domains - 1);
      a.setConstant(off);
      a.diagonal().setConstant(self_weight);
      break;
    }
    case SpecializationPlan::AdjacencyInit::random: {
      for (std::size_t i = 0; i < num_domains; ++i) {
        double total = 0.0;
        std::vector<double> r(num_domains, 0.0);
        for (std::size_t j = 0; j < num_domains; ++j) {
          if (j == i) continue;
          r[j] = rng.uniform(0.05, 1.0);
          total += r[j];
        }
        a(i, i) = self_weight;
        for (std::size_t j = 0; j < num_domains; ++j) {
          if (j != i) a(i, j) = (1.0 - self_weight) * r[j] / total;
        }
      }
      break;
    }
  }
  return a;
}

Matrix gcn_transform(const Matrix& adjacency, const Matrix& nodes, const Matrix& projection,
                     SpecializationPlan::Activation activation) {
  if (adjacency.rows() != adjacency.cols() || adjacency.rows() != nodes.rows()) {
    throw ShapeError("adjacency/node dimension mismatch in gcn_transform");
  }
  if (nodes.cols() != projection.rows()) {
    throw ShapeError("node/projection dimension mismatch in gcn_transform");
  }
  Matrix out = adjacency * nodes * projection;
  if (activation == SpecializationPlan::Activation::relu) {
    out = out.cwiseMax(0.0);
  }
  return out;
}

Tensor residual_forward(const LayerSpec& layer, const Tensor& z,
                        std::span<const double> theta_a, const Matrix& vhat, double lambda,
                        std::span<const double> weights) {
  if (static_cast<std::size_t>(vhat.rows()) != weights.size()) {
    throw DomainCountError("weight vector length " + std::to_string(weights.size()) +
                           " does not match domain count " + std::to_string(vhat.rows()));
  }
  if (static_cast<std::size_t>(vhat.cols()) != layer.param_count()) {
    throw ShapeError("vhat row length does not match layer parameter count");
  }
  Tensor out = layer_apply(layer, theta_a.data(), z);
  if (lambda == 0.0) return out;
  for (Eigen::Index d = 0; d < vhat.rows(); ++d) {
    const double w = weights[static_cast<std::size_t>(d)];
    if (w == 0.0) continue;
    const Tensor branch = layer_apply(layer, vhat.data() + d * vhat.cols(), z);
    const double s = lambda * w;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += s * branch.data[i];
  }
  return out;
}

}  // namespace fedgcn
