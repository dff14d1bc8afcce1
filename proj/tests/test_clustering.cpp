#include <cmath>
#include <cstring>
#include <numeric>

#include "doctest.h"
#include "fedgcn/clustering.hpp"
#include "fedgcn/data.hpp"
#include "test_util.hpp"

using namespace fedgcn;

namespace {

LayeredModel logit_passthrough(std::size_t d) {
  // identity map from d inputs to d logits, for hand-built probability cases
  return LayeredModel({d}, {LayerSpec::Dense(d, d), LayerSpec::SoftmaxXentHead()});
}

ParamVector identity_dense_params(const LayeredModel& model, std::size_t d) {
  ParamVector p = model.zero_params();
  for (std::size_t i = 0; i < d; ++i) p.segment(0)[i * d + i] = 1.0;
  return p;
}

/// Teacher whose logits are per-channel mean brightness: conv filters pass
/// channel c through, the head picks channel energy. Labels are then a fixed
/// function of which input channel is lit.
ParamVector channel_energy_teacher(const LayeredModel& clf, std::size_t channels,
                                   std::size_t domains) {
  ParamVector p = clf.zero_params();
  {
    double* w = p.segment(0);  // conv1: filter f copies input channel f
    const std::size_t in = channels, k = 3;
    for (std::size_t f = 0; f < std::min<std::size_t>(32, channels); ++f) {
      w[(f * in + f) * k * k + 4] = 1.0;  // center tap
    }
  }
  {
    double* w = p.segment(2);  // conv2: filter f copies its input channel f
    const std::size_t in = 32, k = 3;
    for (std::size_t f = 0; f < 64; ++f) {
      if (f < in) w[(f * in + f) * k * k + 4] = 1.0;
    }
  }
  {
    double* w = p.segment(6);  // head: logit d reads pooled feature d
    for (std::size_t d = 0; d < domains; ++d) w[d * 64 + d] = 1.0;
  }
  return p;
}

ClientDataset channel_dataset(std::size_t samples, std::size_t channels, Rng& rng) {
  ClientDataset data;
  data.client_id = "probe";
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t lit = rng.uniform_int(channels);
    Tensor x = Tensor::zeros({channels, 5, 5});
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < 25; ++i) {
        const double base = c == lit ? 0.8 : 0.2;
        x.data[c * 25 + i] = base + 0.05 * rng.uniform(-1.0, 1.0);
      }
    }
    data.samples.push_back({std::move(x), 0});
  }
  return data;
}

}  // namespace

TEST_CASE("domain classifier outputs a probability simplex") {
  const auto clf = domain_classifier_model({1, 8, 8}, 4);
  Rng rng(42);
  const ParamVector params = clf.init_params(rng);
  Tensor x = Tensor::zeros({5, 1, 8, 8});
  for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
  const Tensor probs = domain_probabilities(clf, params, x);
  REQUIRE(probs.shape == std::vector<std::size_t>{5, 4});
  for (std::size_t b = 0; b < 5; ++b) {
    double sum = 0.0;
    for (std::size_t d = 0; d < 4; ++d) {
      const double p = probs.data[b * 4 + d];
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("domain classifier matches the fixed topology") {
  const auto clf = domain_classifier_model({1, 8, 8}, 3);
  const auto& layers = clf.layers();
  REQUIRE(layers.size() == 8);
  CHECK(layers[0].kind == LayerKind::conv2d);
  CHECK(layers[0].out_channels == 32);
  CHECK(layers[0].kernel == 3);
  CHECK(layers[2].kind == LayerKind::conv2d);
  CHECK(layers[2].out_channels == 64);
  CHECK(layers[4].kind == LayerKind::avgpool);
  CHECK(layers[4].kernel == 8);  // global pooling
  CHECK(layers[6].kind == LayerKind::dense);
  CHECK(layers[6].out_features == 3);
  CHECK(clf.num_classes() == 3);
}

TEST_CASE("pseudo label picks the argmax domain") {
  const auto clf = logit_passthrough(3);
  const ParamVector params = identity_dense_params(clf, 3);
  const Tensor x({1, 3}, {std::log(0.1), std::log(0.7), std::log(0.2)});
  CHECK(pseudo_label(clf, params, x) == std::vector<int>{1});
}

TEST_CASE("pseudo label ties resolve to the lowest index") {
  const auto clf = logit_passthrough(4);
  const ParamVector params = identity_dense_params(clf, 4);
  const Tensor x({2, 4}, {0.5, 0.5, 0.5, 0.5, -1.0, 2.0, 2.0, 0.0});
  CHECK(pseudo_label(clf, params, x) == std::vector<int>{0, 1});
}

TEST_CASE("pseudo label is invariant under strictly monotone logit rescaling") {
  const auto clf = logit_passthrough(5);
  const ParamVector params = identity_dense_params(clf, 5);
  Rng rng(66);
  for (int t = 0; t < 40; ++t) {
    Tensor x = Tensor::zeros({1, 5});
    for (auto& v : x.data) v = rng.uniform(-3.0, 3.0);
    const auto base = pseudo_label(clf, params, x);
    const double scale = rng.uniform(0.1, 4.0);
    const double shift = rng.uniform(-2.0, 2.0);
    Tensor scaled = x;
    for (auto& v : scaled.data) v = scale * v + shift;
    CHECK(pseudo_label(clf, params, scaled) == base);
    Tensor exped = x;
    for (auto& v : exped.data) v = std::exp(v);
    CHECK(pseudo_label(clf, params, exped) == base);
  }
}

TEST_CASE("student update is the identity at lr zero") {
  const auto clf = domain_classifier_model({1, 5, 5}, 3);
  Rng rng(7);
  const ParamVector teacher = clf.init_params(rng);
  const ParamVector student = clf.init_params(rng);
  ClientDataset data;
  data.client_id = "a";
  for (int i = 0; i < 4; ++i) {
    Tensor x = Tensor::zeros({1, 5, 5});
    for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
    data.samples.push_back({std::move(x), 0});
  }
  const ParamVector out =
      student_local_update(clf, student, teacher, data, 0.0, 2, 2, Rng(5));
  CHECK(std::memcmp(out.values.data(), student.values.data(),
                    student.size() * sizeof(double)) == 0);
}

TEST_CASE("student with saturated agreement keeps zero gradient") {
  const auto clf = domain_classifier_model({1, 5, 5}, 2);
  // zero conv weights, huge head bias on domain 0: the teacher labels
  // everything 0 and the student (same params) predicts it with probability 1
  ParamVector params = clf.zero_params();
  params.segment(6)[2 * 64 + 0] = 800.0;
  params.segment(6)[2 * 64 + 1] = -800.0;
  ClientDataset data;
  data.client_id = "a";
  Rng rng(8);
  for (int i = 0; i < 3; ++i) {
    Tensor x = Tensor::zeros({1, 5, 5});
    for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
    data.samples.push_back({std::move(x), 0});
  }
  const ParamVector out =
      student_local_update(clf, params, params, data, 1e-2, 1, 3, Rng(5));
  CHECK(std::memcmp(out.values.data(), params.values.data(),
                    params.size() * sizeof(double)) == 0);
}

TEST_CASE("student update rejects empty datasets") {
  const auto clf = domain_classifier_model({1, 5, 5}, 2);
  Rng rng(3);
  const ParamVector params = clf.init_params(rng);
  const ClientDataset empty{"none", {}};
  CHECK_THROWS_AS(student_local_update(clf, params, params, empty, 1e-4, 1, 2, Rng(1)),
                  DataError);
}

TEST_CASE("student loss falls when teacher labels are a fixed channel rule") {
  const std::size_t channels = 4, domains = 4;
  const auto clf = domain_classifier_model({channels, 5, 5}, domains);
  const ParamVector teacher = channel_energy_teacher(clf, channels, domains);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    ClientDataset data = channel_dataset(24, channels, rng);
    const auto labels = pseudo_label_dataset(clf, teacher, data);
    ParamVector student = clf.init_params(rng);
    double first_loss = 0.0, last_loss = 0.0;
    student_local_update(clf, student, teacher, data, 0.0, 1, 4, Rng(seed), &labels,
                         &first_loss);
    ParamVector trained = student;
    for (int epoch = 0; epoch < 5; ++epoch) {
      trained = student_local_update(clf, trained, teacher, data, 5e-2, 1, 4,
                                     Rng(seed + 10 * epoch), &labels, &last_loss);
    }
    CAPTURE(seed);
    CHECK(last_loss < first_loss);
  }
}

TEST_CASE("teacher sync period one copies the student every round") {
  const auto clf = logit_passthrough(2);
  ClusterState state;
  state.teacher = clf.zero_params();
  state.student = identity_dense_params(clf, 2);
  state.num_domains = 2;
  state.sync_period = 1;
  sync_teacher(state);
  CHECK(state.teacher.values == state.student.values);
  CHECK(state.rounds_since_sync == 0);
}

TEST_CASE("teacher holds for sync_period-1 rounds then syncs") {
  const auto clf = logit_passthrough(2);
  ClusterState state;
  state.teacher = clf.zero_params();
  state.student = identity_dense_params(clf, 2);
  state.num_domains = 2;
  state.sync_period = 5;
  const ParamVector before = state.teacher;
  for (int round = 0; round < 4; ++round) {
    sync_teacher(state);
    CHECK(state.teacher.values == before.values);
    CHECK(state.rounds_since_sync == static_cast<std::size_t>(round + 1));
  }
  sync_teacher(state);
  CHECK(state.teacher.values == state.student.values);
  CHECK(state.rounds_since_sync == 0);
}

TEST_CASE("after a sync the teacher reproduces the student's labels") {
  const auto clf = domain_classifier_model({1, 6, 6}, 3);
  Rng rng(12);
  ClusterState state;
  state.teacher = clf.init_params(rng);
  state.student = clf.init_params(rng);
  state.num_domains = 3;
  state.sync_period = 1;
  sync_teacher(state);
  Tensor probe = Tensor::zeros({8, 1, 6, 6});
  for (auto& v : probe.data) v = rng.uniform(0.0, 1.0);
  const auto teacher_labels = pseudo_label(clf, state.teacher, probe);
  const auto student_labels = argmax_rows(forward(clf, state.student, probe));
  CHECK(teacher_labels == student_labels);
}

TEST_CASE("soft test weights equal a direct softmax of the student logits") {
  const auto clf = domain_classifier_model({1, 6, 6}, 4);
  Rng rng(31);
  const ParamVector student = clf.init_params(rng);
  Tensor x = Tensor::zeros({3, 1, 6, 6});
  for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
  const Tensor weights = domain_weights_test(clf, student, x);
  const Tensor expect = softmax_rows(forward(clf, student, x));
  CHECK(weights.data == expect.data);
  for (std::size_t b = 0; b < 3; ++b) {
    double sum = 0.0;
    for (std::size_t d = 0; d < 4; ++d) sum += weights.data[b * 4 + d];
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("uniform student output gives uniform weights") {
  const auto clf = logit_passthrough(4);
  const ParamVector zero = clf.zero_params();
  const Tensor x({1, 4}, {0.7, 0.7, 0.7, 0.7});
  const Tensor w = domain_weights_test(clf, zero, x);
  for (double v : w.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("hard train weights are one-hot at the pseudo label") {
  const auto clf = logit_passthrough(4);
  const ParamVector params = identity_dense_params(clf, 4);
  const Tensor x({1, 4}, {0.0, 0.1, 3.0, -2.0});
  const Tensor w = domain_weights_train(clf, params, x);
  CHECK(w.data == std::vector<double>{0.0, 0.0, 1.0, 0.0});
}

TEST_CASE("hard weight rows always sum to one") {
  const auto clf = logit_passthrough(3);
  const ParamVector params = identity_dense_params(clf, 3);
  Rng rng(14);
  Tensor x = Tensor::zeros({16, 3});
  for (auto& v : x.data) v = rng.uniform(-2.0, 2.0);
  const Tensor w = domain_weights_train(clf, params, x);
  for (std::size_t b = 0; b < 16; ++b) {
    double sum = 0.0;
    for (std::size_t d = 0; d < 3; ++d) sum += w.data[b * 3 + d];
    CHECK(sum == 1.0);
  }
}

TEST_CASE("hard weights equal the low-temperature softmax limit") {
  const auto clf = logit_passthrough(4);
  const ParamVector params = identity_dense_params(clf, 4);
  Rng rng(19);
  for (int t = 0; t < 20; ++t) {
    Tensor x = Tensor::zeros({1, 4});
    for (auto& v : x.data) v = rng.uniform(-2.0, 2.0);
    const Tensor hard = domain_weights_train(clf, params, x);
    Tensor cooled = x;
    for (auto& v : cooled.data) v /= 1e-3;  // temperature -> 0
    const Tensor limit = softmax_rows(cooled);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(hard.data[i] == doctest::Approx(limit.data[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("saturated student probabilities make soft and hard weights identical") {
  const auto clf = logit_passthrough(3);
  const ParamVector params = identity_dense_params(clf, 3);
  // logit gaps of 800 underflow the softmax to an exact one-hot
  const Tensor x({2, 3}, {0.0, -800.0, -800.0, -800.0, -800.0, 0.0});
  const Tensor soft = domain_weights_test(clf, params, x);
  const Tensor hard = domain_weights_train(clf, params, x);
  CHECK(std::memcmp(soft.data.data(), hard.data.data(),
                    soft.numel() * sizeof(double)) == 0);
}

TEST_CASE("self-labelling discovers separated input clusters above chance") {
  // strongly separated brightness domains; the student's hard partition must
  // beat a shuffled-assignment baseline on adjusted Rand index
  SyntheticSpec spec;
  spec.true_domains = 2;
  spec.classes = 2;
  spec.height = spec.width = 8;
  spec.samples_per_client = 10;
  spec.clients = 4;
  spec.transform = SyntheticSpec::Transform::channel_shift;
  spec.alpha = 0.05;
  spec.seed = 91;
  const FederatedDataset ds = generate_synthetic(spec);

  const auto clf = domain_classifier_model({1, 8, 8}, 2);
  Rng rng(91);
  ClusterState state;
  state.teacher = clf.init_params(rng);
  state.student = state.teacher;
  state.num_domains = 2;
  state.sync_period = 5;
  for (int round = 0; round < 20; ++round) {
    std::vector<ParamVector> updates;
    for (const auto& client : ds.clients) {
      updates.push_back(student_local_update(clf, state.student, state.teacher, client,
                                             1e-2, 1, 5,
                                             Rng(1000 + round * 10 + updates.size())));
    }
    ParamVector mean = ParamVector::zeros_like(state.student);
    for (const auto& up : updates) {
      mean.axpy(1.0 / static_cast<double>(updates.size()), up);
    }
    state.student = mean;
    sync_teacher(state);
  }

  std::vector<int> predicted, truth;
  for (const auto& client : ds.clients) {
    std::vector<std::size_t> idx(client.n());
    std::iota(idx.begin(), idx.end(), 0);
    const Tensor xb = stack_samples(client, idx);
    const auto labels = argmax_rows(forward(clf, state.student, xb));
    predicted.insert(predicted.end(), labels.begin(), labels.end());
    const auto& t = ds.domain_truth.at(client.client_id);
    truth.insert(truth.end(), t.begin(), t.end());
  }
  const double ari = testutil::adjusted_rand_index(predicted, truth);

  Rng shuffle_rng(5);
  std::vector<double> baseline;
  std::vector<int> shuffled = predicted;
  for (int t = 0; t < 200; ++t) {
    shuffle_rng.shuffle(shuffled);
    baseline.push_back(testutil::adjusted_rand_index(shuffled, truth));
  }
  std::sort(baseline.begin(), baseline.end());
  const double pct95 = baseline[static_cast<std::size_t>(0.95 * baseline.size())];
  CAPTURE(ari);
  CAPTURE(pct95);
  CHECK(ari > pct95);
}

TEST_CASE("domain weights are a pure function of student parameters and input") {
  const auto clf = domain_classifier_model({1, 6, 6}, 3);
  Rng rng(77);
  const ParamVector student = clf.init_params(rng);
  Tensor unseen = Tensor::zeros({4, 1, 6, 6});
  for (auto& v : unseen.data) v = rng.uniform(0.0, 1.0);
  const Tensor w1 = domain_weights_test(clf, student, unseen);
  const Tensor w2 = domain_weights_test(clf, student, unseen);
  CHECK(w1.data == w2.data);
}
