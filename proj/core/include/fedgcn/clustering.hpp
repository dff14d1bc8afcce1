#pragma once

#include <cstddef>
#include <vector>

#include "fedgcn/data.hpp"
#include "fedgcn/model.hpp"

namespace fedgcn {

/// Domain classifier topology shared by teacher and student: two 3x3
/// convolutions of 32 and 64 features, global average pooling and a linear
/// map onto the domain simplex.
LayeredModel domain_classifier_model(const std::vector<std::size_t>& input_shape,
                                     std::size_t num_domains);

/// A classifier plus its parameters; outputs are softmax probabilities over
/// the configured domains.
struct DomainClassifier {
  LayeredModel model;
  ParamVector params;
};

/// Random classifier parameters with the head bias shifted so a flat
/// mid-gray image (inputs are normalized to [0, 1]) maps to all-zero logits.
/// Without this the pooled-feature common mode dominates the initial argmax
/// and the very first pseudo-labeling degenerates to a single domain.
ParamVector init_domain_classifier(const LayeredModel& clf, Rng& rng);

/// Post-softmax probabilities, shape (batch, D).
Tensor domain_probabilities(const LayeredModel& clf, const ParamVector& params,
                            const Tensor& x);

/// Teacher argmax domain per sample; exact ties resolve to the lowest index.
std::vector<int> pseudo_label(const LayeredModel& clf, const ParamVector& teacher,
                              const Tensor& x);
std::vector<int> pseudo_label(const DomainClassifier& teacher, const Tensor& x);

/// Labels every sample of a client with the teacher, in batches.
std::vector<int> pseudo_label_dataset(const LayeredModel& clf, const ParamVector& teacher,
                                      const ClientDataset& data,
                                      std::size_t batch_size = 64);

/// Local student refinement: minibatch SGD on the cross-entropy between the
/// student's domain predictions and fixed teacher pseudo-labels.
/// `pseudo_labels` may pass precomputed labels for the whole dataset;
/// otherwise they are computed here. Returns the updated student parameters;
/// `mean_loss`, when given, receives the mean loss over the last epoch.
ParamVector student_local_update(const LayeredModel& clf, const ParamVector& student,
                                 const ParamVector& teacher, const ClientDataset& data,
                                 double lr, std::size_t epochs, std::size_t batch_size,
                                 Rng rng, const std::vector<int>* pseudo_labels = nullptr,
                                 double* mean_loss = nullptr);

/// Teacher/student pair plus the sync schedule. The teacher is immutable
/// between syncs; after `sync_period` rounds it is replaced by the student.
struct ClusterState {
  ParamVector teacher;
  ParamVector student;
  std::size_t num_domains = 0;
  std::size_t sync_period = 10;
  std::size_t rounds_since_sync = 0;
};

/// Advances the sync counter; on the sync_period-th round the teacher takes
/// the student's parameters and the counter resets.
void sync_teacher(ClusterState& state);

/// Soft test-time assignment: the student's full probability row per sample,
/// used as mixture weights over domain branches. Shape (batch, D).
Tensor domain_weights_test(const LayeredModel& clf, const ParamVector& student,
                           const Tensor& x);

/// Hard train-time assignment: one-hot rows at the teacher's pseudo-label.
Tensor domain_weights_train(const LayeredModel& clf, const ParamVector& teacher,
                            const Tensor& x);

/// One-hot rows built from precomputed labels.
Tensor one_hot_weights(std::span<const int> labels, std::size_t num_domains);

}  // namespace fedgcn
