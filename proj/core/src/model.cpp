#include "fedgcn/model.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace fedgcn {

using MapConstMat = Eigen::Map<const Matrix>;

LayeredModel::LayeredModel(std::vector<std::size_t> input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (layers_.empty()) throw ConfigError("model needs at least one layer");
  for (const auto& d : input_shape_) {
    if (d == 0) throw ConfigError("input shape must be positive");
  }
  shapes_.clear();
  shapes_.push_back(input_shape_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].validate();
    if (layers_[i].kind == LayerKind::softmax_xent_head && i + 1 != layers_.size()) {
      throw ConfigError("classification head must be the final layer");
    }
    shapes_.push_back(layer_output_shape(layers_[i], shapes_.back()));
  }
  if (layers_.back().kind != LayerKind::softmax_xent_head) {
    throw ConfigError("model must end in a softmax_xent_head layer");
  }
  rebuild_layout();
}

void LayeredModel::specialize(std::size_t num_domains, SpecializationPlan plan,
                              double lambda_init, std::size_t bottleneck_threshold,
                              std::size_t bottleneck_factor) {
  if (num_domains == 0) throw ConfigError("specialize needs at least one domain");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].parameterized()) candidates.push_back(i);
  }
  if (candidates.empty()) throw ConfigError("no parameterized layer to specialize");
  if (plan.layers == SpecializationPlan::Layers::last) {
    candidates = {candidates.back()};
  }
  num_domains_ = num_domains;
  plan_ = plan;
  lambda_init_ = lambda_init;
  spec_.clear();
  for (std::size_t l : candidates) {
    SpecEntry e;
    e.layer = l;
    e.q = layers_[l].param_count();
    e.hidden = e.q > bottleneck_threshold ? std::max<std::size_t>(1, e.q / bottleneck_factor) : 0;
    spec_.push_back(e);
  }
  rebuild_layout();
}

void LayeredModel::rebuild_layout() {
  layout_.clear();
  std::size_t offset = 0;
  auto push = [&](std::size_t len) {
    layout_.push_back({offset, len});
    offset += len;
    return layout_.size() - 1;
  };
  for (const auto& layer : layers_) push(layer.param_count());
  for (auto& e : spec_) {
    e.v_seg = push(num_domains_ * e.q);
    if (e.hidden > 0) {
      e.w1_seg = push(e.q * e.hidden);
      e.w2_seg = push(e.hidden * e.q);
    } else {
      e.w1_seg = push(e.q * e.q);
      e.w2_seg = npos;
    }
    e.lambda_seg = push(1);
  }
  total_params_ = offset;
}

ParamVector LayeredModel::zero_params() const {
  ParamVector p;
  p.layout = layout_;
  p.values.assign(total_params_, 0.0);
  return p;
}

ParamVector LayeredModel::init_params(Rng& rng) const {
  ParamVector p = zero_params();
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (!layer.parameterized()) continue;
    double* dst = p.segment(l);
    std::size_t fan_in = 0, weights = 0;
    if (layer.kind == LayerKind::dense) {
      fan_in = layer.in_features;
      weights = layer.out_features * layer.in_features;
    } else {
      fan_in = layer.in_channels * layer.kernel * layer.kernel;
      weights = layer.out_channels * fan_in;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < weights; ++i) dst[i] = rng.uniform(-bound, bound);
    // biases stay zero
  }
  for (const auto& e : spec_) {
    // node rows stay zero: the residual path is inert until trained
    auto fill = [&](std::size_t seg, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      double* dst = p.segment(seg);
      for (std::size_t i = 0; i < p.segment_length(seg); ++i) {
        dst[i] = rng.uniform(-bound, bound);
      }
    };
    if (e.hidden > 0) {
      fill(e.w1_seg, e.q);
      fill(e.w2_seg, e.hidden);
    } else {
      fill(e.w1_seg, e.q);
    }
    p.segment(e.lambda_seg)[0] = lambda_init_;
  }
  return p;
}

std::vector<double> LayeredModel::lambdas(const ParamVector& params) const {
  std::vector<double> out;
  out.reserve(spec_.size());
  for (const auto& e : spec_) out.push_back(params.segment(e.lambda_seg)[0]);
  return out;
}

Matrix LayeredModel::domain_param_rows(const ParamVector& params) const {
  std::size_t total_q = 0;
  for (const auto& e : spec_) total_q += e.q;
  Matrix rows = Matrix::Zero(static_cast<Eigen::Index>(num_domains_),
                             static_cast<Eigen::Index>(total_q));
  std::size_t col = 0;
  for (const auto& e : spec_) {
    MapConstMat v(params.segment(e.v_seg), static_cast<Eigen::Index>(num_domains_),
                  static_cast<Eigen::Index>(e.q));
    rows.block(0, static_cast<Eigen::Index>(col), rows.rows(),
               static_cast<Eigen::Index>(e.q)) = v;
    col += e.q;
  }
  return rows;
}

namespace {

Matrix apply_activation(const Matrix& m, SpecializationPlan::Activation act) {
  if (act == SpecializationPlan::Activation::relu) return m.cwiseMax(0.0);
  return m;
}

// Subgradient 1 at exactly 0 so zero-initialized node rows keep a live path.
Matrix activation_mask(const Matrix& pre, SpecializationPlan::Activation act) {
  if (act == SpecializationPlan::Activation::none) return Matrix::Ones(pre.rows(), pre.cols());
  return (pre.array() >= 0.0).cast<double>();
}

Tensor plain_layer_forward(const LayerSpec& layer, const double* params, const Tensor& x,
                           detail::ConvScratch* scratch) {
  switch (layer.kind) {
    case LayerKind::dense: return detail::dense_forward(layer, params, x);
    case LayerKind::conv2d: return detail::conv2d_forward(layer, params, x, scratch);
    case LayerKind::relu: return detail::relu_forward(x);
    case LayerKind::avgpool: return detail::avgpool_forward(layer, x);
    case LayerKind::flatten: return detail::flatten_forward(x);
    case LayerKind::softmax_xent_head: return x;
  }
  throw ConfigError("unknown layer kind");
}

// Branch forward reusing the agnostic pass's im2col patches.
Tensor branch_forward(const LayerSpec& layer, const double* params, const Tensor& x,
                      const detail::ConvScratch& scratch,
                      const std::vector<std::size_t>& out_shape) {
  if (layer.kind == LayerKind::dense) return detail::dense_forward(layer, params, x);
  const std::size_t batch = x.dim(0);
  const std::size_t patch = scratch.patch_rows;
  const std::size_t pos = scratch.positions;
  Tensor y = Tensor::zeros({batch, out_shape[0], out_shape[1], out_shape[2]});
  MapConstMat w(params, static_cast<Eigen::Index>(layer.out_channels),
                static_cast<Eigen::Index>(patch));
  const double* bias = params + layer.out_channels * patch;
  for (std::size_t b = 0; b < batch; ++b) {
    MapConstMat c(scratch.col.data() + b * patch * pos, static_cast<Eigen::Index>(patch),
                  static_cast<Eigen::Index>(pos));
    Eigen::Map<Matrix> yb(y.data.data() + b * layer.out_channels * pos,
                          static_cast<Eigen::Index>(layer.out_channels),
                          static_cast<Eigen::Index>(pos));
    yb.noalias() = w * c;
    for (std::size_t oc = 0; oc < layer.out_channels; ++oc) {
      yb.row(static_cast<Eigen::Index>(oc)).array() += bias[oc];
    }
  }
  return y;
}

void param_layer_backward(const LayerSpec& layer, const double* params, const Tensor& x,
                          const detail::ConvScratch& scratch, const Tensor& grad_out,
                          double* param_grad, Tensor* grad_in) {
  if (layer.kind == LayerKind::dense) {
    detail::dense_backward(layer, params, x, grad_out, param_grad, grad_in);
  } else {
    detail::conv2d_backward(layer, params, scratch, grad_out, param_grad, grad_in);
  }
}

}  // namespace

Tensor forward(const LayeredModel& model, const ParamVector& params, const Tensor& x,
               ActivationCache* cache, const ForwardOptions& opts) {
  if (params.layout != model.layout()) {
    throw LayoutError("parameter layout does not match model");
  }
  if (x.rank() != model.input_shape().size() + 1 || x.dim(0) == 0) {
    throw ShapeError("input tensor must be a non-empty batch of " +
                     shape_string(model.input_shape()));
  }
  for (std::size_t i = 0; i < model.input_shape().size(); ++i) {
    if (x.dim(i + 1) != model.input_shape()[i]) {
      throw ShapeError("input shape mismatch: expected batch of " +
                       shape_string(model.input_shape()));
    }
  }
  const std::size_t batch = x.dim(0);
  const std::size_t d = model.num_domains();
  if (model.specialized()) {
    if (opts.adjacency == nullptr || opts.domain_weights == nullptr) {
      throw ConfigError("specialized model needs adjacency and domain weights");
    }
    if (static_cast<std::size_t>(opts.adjacency->rows()) != d ||
        static_cast<std::size_t>(opts.adjacency->cols()) != d) {
      throw ShapeError("adjacency must be D x D");
    }
    if (opts.domain_weights->size() != batch * d) {
      throw DomainCountError("domain weight rows must have length D = " + std::to_string(d));
    }
  }

  ActivationCache local;
  ActivationCache& c = cache ? *cache : local;
  c.acts.clear();
  c.acts.reserve(model.layers().size() + 1);
  c.acts.push_back(x);
  c.conv.assign(model.layers().size(), {});
  c.spec.assign(model.specialization().size(), {});
  c.batch = batch;
  c.frozen_lambda = opts.frozen_lambda;
  if (model.specialized()) {
    c.adjacency = *opts.adjacency;
    c.domain_weights = *opts.domain_weights;
  }

  // layer index -> specialization slot
  std::vector<std::size_t> spec_slot(model.layers().size(), LayeredModel::npos);
  for (std::size_t i = 0; i < model.specialization().size(); ++i) {
    spec_slot[model.specialization()[i].layer] = i;
  }

  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const auto& layer = model.layers()[l];
    const Tensor& in = c.acts.back();
    Tensor out;
    if (spec_slot[l] != LayeredModel::npos) {
      const auto& e = model.specialization()[spec_slot[l]];
      auto& sc = c.spec[spec_slot[l]];
      const double lambda = params.segment(e.lambda_seg)[0];

      out = plain_layer_forward(layer, params.segment(l), in, &c.conv[l]);
      if (opts.frozen_lambda && lambda == 0.0) {
        sc.skipped = true;
      } else {
        MapConstMat v(params.segment(e.v_seg), static_cast<Eigen::Index>(d),
                      static_cast<Eigen::Index>(e.q));
        sc.av = c.adjacency * v;
        if (e.hidden > 0) {
          MapConstMat w1(params.segment(e.w1_seg), static_cast<Eigen::Index>(e.q),
                         static_cast<Eigen::Index>(e.hidden));
          MapConstMat w2(params.segment(e.w2_seg), static_cast<Eigen::Index>(e.hidden),
                         static_cast<Eigen::Index>(e.q));
          sc.pre1 = sc.av * w1;
          sc.hidden = apply_activation(sc.pre1, model.plan().activation);
          sc.pre2 = sc.hidden * w2;
          sc.vhat = apply_activation(sc.pre2, model.plan().activation);
        } else {
          MapConstMat w1(params.segment(e.w1_seg), static_cast<Eigen::Index>(e.q),
                         static_cast<Eigen::Index>(e.q));
          sc.pre1 = sc.av * w1;
          sc.vhat = apply_activation(sc.pre1, model.plan().activation);
        }
        sc.branch_out.assign(d, Tensor{});
        const std::vector<double>& dw = c.domain_weights;
        const std::size_t per_sample = out.numel() / batch;
        for (std::size_t dom = 0; dom < d; ++dom) {
          bool used = false;
          for (std::size_t b = 0; b < batch && !used; ++b) used = dw[b * d + dom] != 0.0;
          if (!used) continue;
          sc.branch_out[dom] = branch_forward(layer, sc.vhat.data() + dom * e.q, in,
                                              c.conv[l], model.output_shape(l));
          for (std::size_t b = 0; b < batch; ++b) {
            const double w = dw[b * d + dom];
            if (w == 0.0) continue;
            const double s = lambda * w;
            double* o = out.data.data() + b * per_sample;
            const double* br = sc.branch_out[dom].data.data() + b * per_sample;
            for (std::size_t i = 0; i < per_sample; ++i) o[i] += s * br[i];
          }
        }
      }
    } else {
      out = plain_layer_forward(layer, params.segment(l), in, &c.conv[l]);
    }
    check_finite(out, std::string(layer_kind_name(layer.kind)) + " output (layer " +
                          std::to_string(l) + ")");
    c.acts.push_back(std::move(out));
  }
  c.logits = c.acts.back();
  return c.logits;
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("logits must be (batch, classes) matching labels");
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const double* row = logits.data.data() + b * classes;
    double m = row[0];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - m);
    total += m + std::log(sum) - row[static_cast<std::size_t>(y)];
  }
  return total / static_cast<double>(batch);
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax_rows expects (batch, classes)");
  Tensor out = logits;
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  for (std::size_t b = 0; b < batch; ++b) {
    double* row = out.data.data() + b * classes;
    double m = row[0];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      row[c] = std::exp(row[c] - m);
      sum += row[c];
    }
    for (std::size_t c = 0; c < classes; ++c) row[c] /= sum;
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects (batch, classes)");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> out(batch, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = logits.data.data() + b * classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[b] = static_cast<int>(best);
  }
  return out;
}

BackwardResult backward(const LayeredModel& model, const ParamVector& params,
                        const ActivationCache& cache, std::span<const int> labels,
                        std::span<const double> sample_weights) {
  if (cache.acts.size() != model.layers().size() + 1) {
    throw ConfigError("activation cache does not match model");
  }
  if (labels.size() != cache.batch) {
    throw LabelError("label count does not match cached batch");
  }
  if (!sample_weights.empty() && sample_weights.size() != cache.batch) {
    throw ShapeError("sample weight count does not match cached batch");
  }
  const std::size_t batch = cache.batch;
  const std::size_t classes = model.num_classes();

  BackwardResult result;
  result.grad = ParamVector::zeros_like(params);
  Gradient& grad = result.grad;

  // Head seed: weight_b * (softmax - onehot) / batch.
  Tensor delta = softmax_rows(cache.logits);
  const double inv_b = 1.0 / static_cast<double>(batch);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const double w = sample_weights.empty() ? 1.0 : sample_weights[b];
    const double* row = cache.logits.data.data() + b * classes;
    double m = row[0];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - m);
    loss += w * (m + std::log(sum) - row[static_cast<std::size_t>(y)]) * inv_b;
    delta.data[b * classes + static_cast<std::size_t>(y)] -= 1.0;
    for (std::size_t c = 0; c < classes; ++c) {
      delta.data[b * classes + c] *= w * inv_b;
    }
  }
  result.loss = loss;

  std::vector<std::size_t> spec_slot(model.layers().size(), LayeredModel::npos);
  for (std::size_t i = 0; i < model.specialization().size(); ++i) {
    spec_slot[model.specialization()[i].layer] = i;
  }

  const std::size_t d = model.num_domains();
  for (std::size_t li = model.layers().size(); li-- > 0;) {
    const auto& layer = model.layers()[li];
    const Tensor& in = cache.acts[li];
    switch (layer.kind) {
      case LayerKind::softmax_xent_head:
        break;  // delta already seeded at the head input
      case LayerKind::relu:
        delta = detail::relu_backward(in, delta);
        break;
      case LayerKind::avgpool:
        delta = detail::avgpool_backward(layer, in, delta);
        break;
      case LayerKind::flatten:
        delta = detail::flatten_backward(in, delta);
        break;
      case LayerKind::dense:
      case LayerKind::conv2d: {
        Tensor next = li > 0 ? Tensor::zeros(in.shape) : Tensor{};
        Tensor* grad_in = li > 0 ? &next : nullptr;
        if (spec_slot[li] != LayeredModel::npos) {
          const auto& e = model.specialization()[spec_slot[li]];
          const auto& sc = cache.spec[spec_slot[li]];
          const double lambda = params.segment(e.lambda_seg)[0];
          const std::size_t per_sample = delta.numel() / batch;

          if (!sc.skipped) {
            double dlambda = 0.0;
            for (std::size_t dom = 0; dom < d; ++dom) {
              if (sc.branch_out[dom].data.empty()) continue;
              for (std::size_t b = 0; b < batch; ++b) {
                const double w = cache.domain_weights[b * d + dom];
                if (w == 0.0) continue;
                const double* br = sc.branch_out[dom].data.data() + b * per_sample;
                const double* dl = delta.data.data() + b * per_sample;
                double dot = 0.0;
                for (std::size_t i = 0; i < per_sample; ++i) dot += br[i] * dl[i];
                dlambda += w * dot;
              }
            }
            if (!cache.frozen_lambda) grad.segment(e.lambda_seg)[0] = dlambda;
          }

          param_layer_backward(layer, params.segment(li), in, cache.conv[li], delta,
                               grad.segment(li), grad_in);

          if (!sc.skipped && lambda != 0.0) {
            Matrix g = Matrix::Zero(static_cast<Eigen::Index>(d),
                                    static_cast<Eigen::Index>(e.q));
            Tensor scaled = Tensor::zeros(delta.shape);
            for (std::size_t dom = 0; dom < d; ++dom) {
              if (sc.branch_out[dom].data.empty()) continue;
              std::fill(scaled.data.begin(), scaled.data.end(), 0.0);
              for (std::size_t b = 0; b < batch; ++b) {
                const double w = cache.domain_weights[b * d + dom];
                if (w == 0.0) continue;
                const double s = lambda * w;
                const double* src = delta.data.data() + b * per_sample;
                double* dst = scaled.data.data() + b * per_sample;
                for (std::size_t i = 0; i < per_sample; ++i) dst[i] = s * src[i];
              }
              param_layer_backward(layer, sc.vhat.data() + dom * e.q, in, cache.conv[li],
                                   scaled, g.data() + dom * e.q, grad_in);
            }
            // Back through act(A V W); the adjacency is a constant here.
            if (e.hidden > 0) {
              MapConstMat w2(params.segment(e.w2_seg), static_cast<Eigen::Index>(e.hidden),
                             static_cast<Eigen::Index>(e.q));
              MapConstMat w1(params.segment(e.w1_seg), static_cast<Eigen::Index>(e.q),
                             static_cast<Eigen::Index>(e.hidden));
              const Matrix m2 =
                  g.cwiseProduct(activation_mask(sc.pre2, model.plan().activation));
              Eigen::Map<Matrix> dw2(grad.segment(e.w2_seg),
                                     static_cast<Eigen::Index>(e.hidden),
                                     static_cast<Eigen::Index>(e.q));
              dw2.noalias() += sc.hidden.transpose() * m2;
              const Matrix dh = m2 * w2.transpose();
              const Matrix m1 =
                  dh.cwiseProduct(activation_mask(sc.pre1, model.plan().activation));
              Eigen::Map<Matrix> dw1(grad.segment(e.w1_seg), static_cast<Eigen::Index>(e.q),
                                     static_cast<Eigen::Index>(e.hidden));
              dw1.noalias() += sc.av.transpose() * m1;
              Eigen::Map<Matrix> dv(grad.segment(e.v_seg), static_cast<Eigen::Index>(d),
                                    static_cast<Eigen::Index>(e.q));
              dv.noalias() += cache.adjacency.transpose() * (m1 * w1.transpose());
            } else {
              MapConstMat w1(params.segment(e.w1_seg), static_cast<Eigen::Index>(e.q),
                             static_cast<Eigen::Index>(e.q));
              const Matrix m =
                  g.cwiseProduct(activation_mask(sc.pre1, model.plan().activation));
              Eigen::Map<Matrix> dw1(grad.segment(e.w1_seg), static_cast<Eigen::Index>(e.q),
                                     static_cast<Eigen::Index>(e.q));
              dw1.noalias() += sc.av.transpose() * m;
              Eigen::Map<Matrix> dv(grad.segment(e.v_seg), static_cast<Eigen::Index>(d),
                                    static_cast<Eigen::Index>(e.q));
              dv.noalias() += cache.adjacency.transpose() * (m * w1.transpose());
            }
          }
        } else {
          param_layer_backward(layer, params.segment(li), in, cache.conv[li], delta,
                               grad.segment(li), grad_in);
        }
        if (li > 0) delta = std::move(next);
        break;
      }
    }
  }
  return result;
}

ParamVector sgd_step(const ParamVector& params, const Gradient& grad, double lr) {
  ParamVector out = params;
  sgd_step_inplace(out, grad, lr);
  return out;
}

void sgd_step_inplace(ParamVector& params, const Gradient& grad, double lr) {
  if (!params.same_layout(grad)) {
    throw LayoutError("gradient layout does not match parameters");
  }
  if (lr < 0.0) throw ConfigError("learning rate must be >= 0");
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    params.values[i] -= lr * grad.values[i];
  }
}

}  // namespace fedgcn
