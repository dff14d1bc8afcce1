#pragma once

// Shared test-only helpers: the finite-difference gradient oracle, random
// small-model generation for gradient sweeps, and clustering metrics. These
// stay independent of the library's backward pass — the oracle only ever
// calls forward().

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "fedgcn/clustering.hpp"
#include "fedgcn/model.hpp"

namespace fedgcn::testutil {

struct GradCheckCase {
  LayeredModel model;
  ParamVector params;
  Tensor x;
  std::vector<int> labels;
  Matrix adjacency;                   // used when specialized
  std::vector<double> domain_weights;  // batch x D, used when specialized
  std::string name;

  ForwardOptions options() const {
    ForwardOptions opts;
    if (model.specialized()) {
      opts.adjacency = &adjacency;
      opts.domain_weights = &domain_weights;
    }
    return opts;
  }
};

inline double loss_at(const GradCheckCase& c, const ParamVector& params) {
  const Tensor logits = forward(c.model, params, c.x, nullptr, c.options());
  return cross_entropy(logits, c.labels);
}

/// Central finite differences over every parameter coordinate.
inline std::vector<double> finite_difference_grad(const GradCheckCase& c,
                                                  double eps = 1e-5) {
  std::vector<double> grad(c.params.size());
  ParamVector probe = c.params;
  for (std::size_t i = 0; i < probe.values.size(); ++i) {
    const double saved = probe.values[i];
    probe.values[i] = saved + eps;
    const double up = loss_at(c, probe);
    probe.values[i] = saved - eps;
    const double down = loss_at(c, probe);
    probe.values[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// Relative error with an absolute floor, as used by every gradient check.
inline double grad_error(double analytic, double numeric, double abs_floor = 1e-7) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return diff / scale;
}

/// Worst-coordinate gradient error of backward() against the oracle.
/// Central differences are biased when a ReLU kink falls inside the probe
/// window, so coordinates that disagree at the primary eps are re-probed at
/// smaller steps; a genuinely wrong gradient stays wrong at every scale.
inline double max_grad_error(const GradCheckCase& c, double eps = 1e-5) {
  ActivationCache cache;
  forward(c.model, c.params, c.x, &cache, c.options());
  const auto back = backward(c.model, c.params, cache, c.labels);
  const auto numeric = finite_difference_grad(c, eps);
  ParamVector probe = c.params;
  auto fd_at = [&](std::size_t i, double e) {
    const double saved = probe.values[i];
    probe.values[i] = saved + e;
    const double up = loss_at(c, probe);
    probe.values[i] = saved - e;
    const double down = loss_at(c, probe);
    probe.values[i] = saved;
    return (up - down) / (2.0 * e);
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    double err = grad_error(back.grad.values[i], numeric[i]);
    if (err > 1e-5) {
      for (double e : {eps * 0.1, eps * 0.01}) {
        err = std::min(err, grad_error(back.grad.values[i], fd_at(i, e)));
      }
    }
    worst = std::max(worst, err);
  }
  return worst;
}

/// Random small model (a few hundred parameters) drawn from a family that
/// covers every layer kind and, optionally, the specialized residual path.
inline GradCheckCase random_case(Rng& rng, bool allow_specialized) {
  GradCheckCase c;
  const std::size_t classes = 2 + rng.uniform_int(3);
  const std::size_t batch = 2 + rng.uniform_int(2);
  const int family = static_cast<int>(rng.uniform_int(allow_specialized ? 5 : 2));

  std::vector<LayerSpec> layers;
  std::vector<std::size_t> input_shape;
  switch (family) {
    case 0: {  // dense stack
      const std::size_t in = 3 + rng.uniform_int(4);
      const std::size_t hidden = 3 + rng.uniform_int(5);
      input_shape = {in};
      layers = {LayerSpec::Dense(in, hidden), LayerSpec::Relu(),
                LayerSpec::Dense(hidden, classes), LayerSpec::SoftmaxXentHead()};
      c.name = "dense-stack";
      break;
    }
    case 1: {  // conv stack
      const std::size_t ch = 1 + rng.uniform_int(2);
      const std::size_t filters = 2 + rng.uniform_int(2);
      const std::size_t hw = 6;
      input_shape = {ch, hw, hw};
      layers = {LayerSpec::Conv2d(ch, filters, 3),
                LayerSpec::Relu(),
                LayerSpec::AvgPool(2, 2),
                LayerSpec::Flatten(),
                LayerSpec::Dense(filters * 3 * 3, classes),
                LayerSpec::SoftmaxXentHead()};
      c.name = "conv-stack";
      break;
    }
    default: {  // specialized dense (last or all), optionally bottlenecked
      const std::size_t in = 3 + rng.uniform_int(3);
      const std::size_t hidden = 4 + rng.uniform_int(3);
      input_shape = {in};
      layers = {LayerSpec::Dense(in, hidden), LayerSpec::Relu(),
                LayerSpec::Dense(hidden, classes), LayerSpec::SoftmaxXentHead()};
      c.name = "specialized";
      break;
    }
  }
  c.model = LayeredModel(input_shape, std::move(layers));

  if (family >= 2) {
    const std::size_t d = 2 + rng.uniform_int(2);
    SpecializationPlan plan;
    plan.layers = family == 3 ? SpecializationPlan::Layers::all
                              : SpecializationPlan::Layers::last;
    plan.activation = rng.uniform() < 0.5 ? SpecializationPlan::Activation::relu
                                          : SpecializationPlan::Activation::none;
    // family 4 forces the two-stage bottleneck path via a tiny threshold
    const std::size_t threshold = family == 4 ? 4 : 4096;
    c.model.specialize(d, plan, 0.75 + rng.uniform(), threshold, 4);
    c.name += family == 4 ? "-bottleneck" : "";

    Matrix rows = Matrix::Zero(static_cast<Eigen::Index>(d), 3);
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      for (Eigen::Index j = 0; j < rows.cols(); ++j) rows(i, j) = rng.uniform(-1.0, 1.0);
    }
    c.adjacency = build_adjacency(rows, 0.5, 1e-8);
    c.domain_weights.assign(batch * d, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      if (rng.uniform() < 0.5) {
        // hard one-hot row
        c.domain_weights[b * d + rng.uniform_int(d)] = 1.0;
      } else {
        // soft simplex row
        double sum = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          c.domain_weights[b * d + k] = 0.05 + rng.uniform();
          sum += c.domain_weights[b * d + k];
        }
        for (std::size_t k = 0; k < d; ++k) c.domain_weights[b * d + k] /= sum;
      }
    }
  }

  c.params = c.model.init_params(rng);
  // Node rows start at zero by design; perturb them so the gradient sweep
  // explores a generic point of the specialized path.
  for (const auto& e : c.model.specialization()) {
    double* v = c.params.segment(e.v_seg);
    for (std::size_t i = 0; i < c.params.segment_length(e.v_seg); ++i) {
      v[i] = rng.uniform(-0.5, 0.5);
    }
  }

  std::vector<std::size_t> xshape = {batch};
  for (auto s : c.model.input_shape()) xshape.push_back(s);
  c.x = Tensor::zeros(xshape);
  for (auto& v : c.x.data) v = rng.uniform(-1.0, 1.0);
  c.labels.resize(batch);
  for (auto& y : c.labels) y = static_cast<int>(rng.uniform_int(classes));
  return c;
}

/// Adjusted Rand index between two labelings of the same samples.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size();
  std::map<std::pair<int, int>, std::size_t> cells;
  std::map<int, std::size_t> rows, cols;
  for (std::size_t i = 0; i < n; ++i) {
    cells[{a[i], b[i]}] += 1;
    rows[a[i]] += 1;
    cols[b[i]] += 1;
  }
  auto choose2 = [](std::size_t m) {
    return static_cast<double>(m) * static_cast<double>(m ? m - 1 : 0) / 2.0;
  };
  double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [k, v] : cells) sum_cells += choose2(v);
  for (const auto& [k, v] : rows) sum_rows += choose2(v);
  for (const auto& [k, v] : cols) sum_cols += choose2(v);
  const double total = choose2(n);
  const double expected = sum_rows * sum_cols / total;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 0.0;
  return (sum_cells - expected) / (max_index - expected);
}

}  // namespace fedgcn::testutil
