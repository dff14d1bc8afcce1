#include "fedgcn/clustering.hpp"

#include <numeric>

namespace fedgcn {

LayeredModel domain_classifier_model(const std::vector<std::size_t>& input_shape,
                                     std::size_t num_domains) {
  if (input_shape.size() != 3) {
    throw ConfigError("domain classifier expects (channels, h, w) input");
  }
  if (num_domains == 0) throw ConfigError("domain classifier needs D >= 1");
  const std::size_t h = input_shape[1];
  const std::size_t w = input_shape[2];
  std::vector<LayerSpec> layers = {
      LayerSpec::Conv2d(input_shape[0], 32, 3),
      LayerSpec::Relu(),
      LayerSpec::Conv2d(32, 64, 3),
      LayerSpec::Relu(),
      LayerSpec::AvgPool(std::min(h, w), std::min(h, w)),  // global pooling
      LayerSpec::Flatten(),
      LayerSpec::Dense(64, num_domains),
      LayerSpec::SoftmaxXentHead(),
  };
  return LayeredModel(input_shape, std::move(layers));
}

ParamVector init_domain_classifier(const LayeredModel& clf, Rng& rng) {
  ParamVector params = clf.init_params(rng);
  std::size_t head = clf.layers().size();
  for (std::size_t i = 0; i < clf.layers().size(); ++i) {
    if (clf.layers()[i].kind == LayerKind::dense) head = i;
  }
  if (head == clf.layers().size()) {
    throw ConfigError("domain classifier needs a dense head to calibrate");
  }
  // Pooled features carry a large common mode; a random head projects it
  // onto the logits and one domain then wins the argmax for every input.
  // Re-center the logits on a data-free reference batch (iid uniform noise
  // in the documented [0, 1] input range) so that input structure, not the
  // common mode, decides the initial pseudo-labels.
  const auto& shape = clf.input_shape();
  const std::size_t refs = 16;
  Tensor noise = Tensor::zeros({refs, shape[0], shape[1], shape[2]});
  Rng ref_rng = rng.derive(0x0ddf);
  for (auto& v : noise.data) v = ref_rng.uniform();
  const Tensor logits = forward(clf, params, noise);
  const auto& layer = clf.layers()[head];
  double* bias = params.segment(head) + layer.out_features * layer.in_features;
  for (std::size_t d = 0; d < layer.out_features; ++d) {
    double mean = 0.0;
    for (std::size_t r = 0; r < refs; ++r) {
      mean += logits.data[r * layer.out_features + d];
    }
    bias[d] -= mean / static_cast<double>(refs);
  }
  return params;
}

Tensor domain_probabilities(const LayeredModel& clf, const ParamVector& params,
                            const Tensor& x) {
  return softmax_rows(forward(clf, params, x));
}

std::vector<int> pseudo_label(const LayeredModel& clf, const ParamVector& teacher,
                              const Tensor& x) {
  return argmax_rows(forward(clf, teacher, x));
}

std::vector<int> pseudo_label(const DomainClassifier& teacher, const Tensor& x) {
  return pseudo_label(teacher.model, teacher.params, x);
}

std::vector<int> pseudo_label_dataset(const LayeredModel& clf, const ParamVector& teacher,
                                      const ClientDataset& data, std::size_t batch_size) {
  if (data.n() == 0) throw DataError("cannot pseudo-label an empty dataset");
  std::vector<int> labels;
  labels.reserve(data.n());
  std::vector<std::size_t> idx(data.n());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, idx.size() - start);
    const Tensor xb = stack_samples(data, {idx.data() + start, count});
    const auto batch_labels = pseudo_label(clf, teacher, xb);
    labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
  }
  return labels;
}

ParamVector student_local_update(const LayeredModel& clf, const ParamVector& student,
                                 const ParamVector& teacher, const ClientDataset& data,
                                 double lr, std::size_t epochs, std::size_t batch_size,
                                 Rng rng, const std::vector<int>* pseudo_labels,
                                 double* mean_loss) {
  if (data.n() == 0) throw DataError("student update on empty dataset");
  std::vector<int> local_labels;
  if (pseudo_labels == nullptr) {
    local_labels = pseudo_label_dataset(clf, teacher, data);
    pseudo_labels = &local_labels;
  }
  if (pseudo_labels->size() != data.n()) {
    throw DataError("pseudo-label count does not match dataset size");
  }

  // Inverse-frequency weights over the client's pseudo-labels. Uniform
  // weighting lets the majority label's bias drift swallow the minority
  // groups long before the boundary-carving directions can learn.
  std::vector<std::size_t> counts(clf.num_classes(), 0);
  for (int l : *pseudo_labels) counts.at(static_cast<std::size_t>(l)) += 1;
  std::size_t present = 0;
  for (std::size_t c : counts) present += c > 0 ? 1 : 0;
  std::vector<double> weight_of(data.n());
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto label = static_cast<std::size_t>((*pseudo_labels)[i]);
    weight_of[i] = static_cast<double>(data.n()) /
                   (static_cast<double>(present) * static_cast<double>(counts[label]));
  }

  ParamVector params = student;
  std::vector<std::size_t> order(data.n());
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    const bool last = epoch + 1 == epochs;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t count = std::min(batch_size, order.size() - start);
      const Tensor xb = stack_samples(data, {order.data() + start, count});
      std::vector<int> yb(count);
      std::vector<double> wb(count);
      for (std::size_t i = 0; i < count; ++i) {
        yb[i] = (*pseudo_labels)[order[start + i]];
        wb[i] = weight_of[order[start + i]];
      }
      ActivationCache cache;
      forward(clf, params, xb, &cache);
      const auto back = backward(clf, params, cache, yb, wb);
      sgd_step_inplace(params, back.grad, lr);
      if (last) {
        loss_sum += back.loss * static_cast<double>(count);
        loss_count += count;
      }
    }
  }
  if (mean_loss) {
    *mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
  }
  return params;
}

void sync_teacher(ClusterState& state) {
  if (state.sync_period == 0) throw ConfigError("teacher sync period must be >= 1");
  if (state.rounds_since_sync + 1 == state.sync_period) {
    state.teacher = state.student;
    state.rounds_since_sync = 0;
  } else {
    state.rounds_since_sync += 1;
  }
}

Tensor domain_weights_test(const LayeredModel& clf, const ParamVector& student,
                           const Tensor& x) {
  return domain_probabilities(clf, student, x);
}

Tensor domain_weights_train(const LayeredModel& clf, const ParamVector& teacher,
                            const Tensor& x) {
  const auto labels = pseudo_label(clf, teacher, x);
  return one_hot_weights(labels, clf.num_classes());
}

Tensor one_hot_weights(std::span<const int> labels, std::size_t num_domains) {
  Tensor w = Tensor::zeros({labels.size(), num_domains});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int d = labels[i];
    if (d < 0 || static_cast<std::size_t>(d) >= num_domains) {
      throw LabelError("domain label outside [0, D)");
    }
    w.data[i * num_domains + static_cast<std::size_t>(d)] = 1.0;
  }
  return w;
}

}  // namespace fedgcn
