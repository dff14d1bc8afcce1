#include "fedgcn/federated.hpp"

#include <future>
#include <numeric>

namespace fedgcn {

void RoundConfig::validate(std::size_t num_clients) const {
  if (clients_per_round < 1) throw ConfigError("clients_per_round must be >= 1");
  if (clients_per_round > num_clients) {
    throw ConfigError("clients_per_round " + std::to_string(clients_per_round) +
                      " exceeds client count " + std::to_string(num_clients));
  }
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lr < 0.0) throw ConfigError("lr must be >= 0");
  if (total_rounds < 1) throw ConfigError("total_rounds must be >= 1");
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t k, Rng& rng) {
  if (k > num_clients) {
    throw ConfigError("cannot sample " + std::to_string(k) + " of " +
                      std::to_string(num_clients) + " clients");
  }
  std::vector<std::size_t> pool(num_clients);
  std::iota(pool.begin(), pool.end(), 0);
  // Partial Fisher-Yates: the first k slots are a uniform draw without
  // replacement.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.uniform_int(num_clients - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

ClientUpdate client_local_update(const LayeredModel& model, const ParamVector& broadcast,
                                 const ClientDataset& data, const RoundConfig& cfg, Rng rng,
                                 const DomainRuntime* domain,
                                 const std::vector<int>* pseudo_labels) {
  if (data.n() == 0) throw DataError("client " + data.client_id + " has no samples");
  if (model.specialized()) {
    if (domain == nullptr || domain->classifier == nullptr || domain->teacher == nullptr ||
        domain->adjacency == nullptr) {
      throw ConfigError("specialized model needs a DomainRuntime");
    }
  }

  std::vector<int> local_labels;
  if (model.specialized() && pseudo_labels == nullptr) {
    local_labels = pseudo_label_dataset(*domain->classifier, *domain->teacher, data);
    pseudo_labels = &local_labels;
  }

  ParamVector params = broadcast;
  const std::size_t d = model.num_domains();
  std::vector<std::size_t> order(data.n());
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    rng.shuffle(order);
    const bool last = epoch + 1 == cfg.local_epochs;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      const Tensor xb = stack_samples(data, {order.data() + start, count});
      const std::vector<int> yb = gather_labels(data, {order.data() + start, count});

      ForwardOptions opts;
      std::vector<double> weights;
      if (model.specialized()) {
        weights.assign(count * d, 0.0);
        for (std::size_t i = 0; i < count; ++i) {
          const int dom = (*pseudo_labels)[order[start + i]];
          weights[i * d + static_cast<std::size_t>(dom)] = 1.0;
        }
        opts.adjacency = domain->adjacency;
        opts.domain_weights = &weights;
        opts.frozen_lambda = domain->frozen_lambda;
      }
      ActivationCache cache;
      const Tensor logits = forward(model, params, xb, &cache, opts);
      const auto back = backward(model, params, cache, yb);
      if (last) {
        loss_sum += back.loss * static_cast<double>(count);
        const auto preds = argmax_rows(logits);
        for (std::size_t i = 0; i < count; ++i) {
          if (preds[i] == yb[i]) correct += 1;
        }
        seen += count;
      }
      sgd_step_inplace(params, back.grad, cfg.lr);
    }
  }

  ClientUpdate up;
  up.client_id = data.client_id;
  up.params = std::move(params);
  up.n_k = data.n();
  up.local_loss = loss_sum / static_cast<double>(seen);
  up.local_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  return up;
}

ParamVector fedavg_aggregate(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw AggregationError("no client updates to aggregate");
  double total = 0.0;
  for (const auto& up : updates) {
    if (up.n_k < 1) throw AggregationError("client update with empty sample count");
    if (!up.params.same_layout(updates.front().params)) {
      throw LayoutError("client updates have mismatched layouts");
    }
    total += static_cast<double>(up.n_k);
  }
  ParamVector out = ParamVector::zeros_like(updates.front().params);
  for (const auto& up : updates) {
    out.axpy(static_cast<double>(up.n_k), up.params);
  }
  out.scale(1.0 / total);
  return out;
}

ParamVector aggregate_students(const std::vector<ClientUpdate>& updates) {
  return fedavg_aggregate(updates);
}

void refresh_graph(ServerState& state) {
  if (!state.model.specialized()) return;
  const Matrix rows = state.model.domain_param_rows(state.params);
  state.adjacency = build_adjacency(rows, state.self_weight, state.distance_floor);
}

namespace {

constexpr std::uint64_t kSampleTag = 0x5a3c;
constexpr std::uint64_t kClientTag = 0xc0de;

struct ClientResult {
  ClientUpdate model_update;
  ClientUpdate student_update;  // params empty when clustering is off
  double student_loss = 0.0;
};

ClientResult run_client(const ServerState& state, const ClientDataset& data,
                        const RoundConfig& cfg, std::uint64_t master_seed) {
  const Rng base = Rng(master_seed).derive(kClientTag, state.round, fnv1a(data.client_id));
  ClientResult res;
  std::vector<int> labels;
  DomainRuntime rt;
  const DomainRuntime* rt_ptr = nullptr;
  if (state.clustering.has_value()) {
    labels = pseudo_label_dataset(state.clustering->classifier,
                                  state.clustering->state.teacher, data);
  }
  if (state.model.specialized()) {
    rt.classifier = &state.clustering->classifier;
    rt.teacher = &state.clustering->state.teacher;
    rt.adjacency = &state.adjacency;
    rt.frozen_lambda = state.freeze_lambda;
    rt_ptr = &rt;
  }
  res.model_update = client_local_update(state.model, state.params, data, cfg,
                                         base.derive(0), rt_ptr,
                                         labels.empty() ? nullptr : &labels);
  if (state.clustering.has_value()) {
    res.student_update.client_id = data.client_id;
    res.student_update.n_k = data.n();
    res.student_update.params = student_local_update(
        state.clustering->classifier, state.clustering->state.student,
        state.clustering->state.teacher, data, state.clustering->student_lr,
        cfg.local_epochs, cfg.batch_size, base.derive(1), &labels, &res.student_loss);
    res.student_update.local_loss = res.student_loss;
  }
  return res;
}

}  // namespace

RoundReport run_round(ServerState& state, const std::vector<ClientDataset>& clients,
                      const RoundConfig& cfg, std::uint64_t master_seed, bool parallel) {
  cfg.validate(clients.size());
  if (state.model.specialized() && !state.clustering.has_value()) {
    throw ConfigError("specialized model needs clustering state for hard assignments");
  }

  Rng sample_rng = Rng(master_seed).derive(kSampleTag, state.round);
  const auto selected = sample_clients(clients.size(), cfg.clients_per_round, sample_rng);

  std::vector<ClientResult> results(selected.size());
  if (parallel) {
    std::vector<std::future<ClientResult>> futures;
    futures.reserve(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) {
      futures.push_back(std::async(std::launch::async, [&, i] {
        return run_client(state, clients[selected[i]], cfg, master_seed);
      }));
    }
    for (std::size_t i = 0; i < selected.size(); ++i) results[i] = futures[i].get();
  } else {
    for (std::size_t i = 0; i < selected.size(); ++i) {
      results[i] = run_client(state, clients[selected[i]], cfg, master_seed);
    }
  }

  // All clients succeeded; only now mutate server state.
  RoundReport report;
  report.round = state.round;
  report.adjacency = state.adjacency;
  std::vector<ClientUpdate> model_updates;
  std::vector<ClientUpdate> student_updates;
  double student_loss_sum = 0.0;
  for (auto& res : results) {
    report.participants.push_back(res.model_update.client_id);
    report.client_losses.push_back(res.model_update.local_loss);
    report.client_accuracies.push_back(res.model_update.local_accuracy);
    student_loss_sum += res.student_loss;
    model_updates.push_back(std::move(res.model_update));
    if (state.clustering.has_value()) {
      student_updates.push_back(std::move(res.student_update));
    }
  }
  report.mean_loss =
      std::accumulate(report.client_losses.begin(), report.client_losses.end(), 0.0) /
      static_cast<double>(report.client_losses.size());
  report.mean_student_loss =
      state.clustering ? student_loss_sum / static_cast<double>(results.size()) : 0.0;

  state.params = fedavg_aggregate(model_updates);
  if (state.clustering.has_value()) {
    state.clustering->state.student = aggregate_students(student_updates);
    sync_teacher(state.clustering->state);
  }
  refresh_graph(state);
  state.round += 1;
  return report;
}

}  // namespace fedgcn
