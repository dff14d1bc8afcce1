#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedgcn/clustering.hpp"
#include "fedgcn/data.hpp"
#include "fedgcn/model.hpp"

namespace fedgcn {

struct RoundConfig {
  std::size_t clients_per_round = 10;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 5;
  double lr = 1e-3;
  std::size_t total_rounds = 100;

  /// Throws ConfigError when a field is out of range for `num_clients`.
  void validate(std::size_t num_clients) const;
};

/// What a client sends back: parameters, its sample count for Eq-style
/// weighting, and running training metrics. No raw samples.
struct ClientUpdate {
  std::string client_id;
  ParamVector params;
  std::size_t n_k = 0;
  double local_loss = 0.0;
  double local_accuracy = 0.0;
};

/// K distinct indices into the client list, uniform without replacement.
std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t k, Rng& rng);

/// Broadcast state a specialized model needs on the client: the fixed
/// teacher for hard assignments and the current adjacency.
struct DomainRuntime {
  const LayeredModel* classifier = nullptr;
  const ParamVector* teacher = nullptr;
  const Matrix* adjacency = nullptr;
  bool frozen_lambda = false;
};

/// Local minibatch SGD on the broadcast parameters; the input stays
/// unmodified. For specialized models, per-sample hard domain weights come
/// from the teacher (`pseudo_labels` may be precomputed). Loss/accuracy are
/// running means over the last local epoch.
ClientUpdate client_local_update(const LayeredModel& model, const ParamVector& broadcast,
                                 const ClientDataset& data, const RoundConfig& cfg, Rng rng,
                                 const DomainRuntime* domain = nullptr,
                                 const std::vector<int>* pseudo_labels = nullptr);

/// Sample-count weighted mean of the updates: sum_k n_k p_k / sum_k n_k.
ParamVector fedavg_aggregate(const std::vector<ClientUpdate>& updates);

/// Same contract as fedavg_aggregate, applied to student parameters.
ParamVector aggregate_students(const std::vector<ClientUpdate>& updates);

/// Everything the server owns between rounds.
struct ServerState {
  LayeredModel model;
  ParamVector params;
  struct Clustering {
    LayeredModel classifier;
    ClusterState state;
    double student_lr = 1e-4;
  };
  std::optional<Clustering> clustering;
  Matrix adjacency;  // D x D when the model is specialized, else empty
  double self_weight = 0.5;
  double distance_floor = 1e-8;
  bool freeze_lambda = false;
  std::size_t round = 0;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<std::string> participants;
  std::vector<double> client_losses;
  std::vector<double> client_accuracies;
  double mean_loss = 0.0;
  double mean_student_loss = 0.0;
  /// The adjacency the participating clients received this round.
  Matrix adjacency;
};

/// Recomputes the adjacency from the current central domain parameter rows.
/// Harmless no-op for unspecialized models.
void refresh_graph(ServerState& state);

/// One synchronous communication round: sample K clients, run local model
/// (and, when clustering, student) updates, aggregate with fedavg, advance
/// the teacher schedule, refresh the graph. Any client failure aborts the
/// round before server state changes. Per-client RNG streams derive from
/// (master_seed, round, client id), so parallel execution equals serial.
RoundReport run_round(ServerState& state, const std::vector<ClientDataset>& clients,
                      const RoundConfig& cfg, std::uint64_t master_seed,
                      bool parallel = false);

}  // namespace fedgcn
