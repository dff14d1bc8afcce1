#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedgcn/tensor.hpp"

namespace fedgcn {

struct Sample {
  Tensor x;  // (channels, height, width)
  int y = 0;
};

/// Labeled samples local to one client. Raw samples never cross the server
/// boundary; server-side operations accept only parameter vectors, counts
/// and losses.
struct ClientDataset {
  std::string client_id;
  std::vector<Sample> samples;
  std::size_t n() const { return samples.size(); }
};

/// Spec for the synthetic multi-domain generator. Every class has a fixed
/// random template; each domain applies a fixed label-preserving input
/// transform; clients draw domain mixtures from a Dirichlet(alpha), so small
/// alpha gives near-single-domain clients and large alpha mixed ones.
struct SyntheticSpec {
  std::size_t true_domains = 4;
  std::size_t classes = 5;
  std::size_t channels = 1;
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t samples_per_client = 20;
  std::size_t clients = 50;
  enum class Transform { rotation, channel_shift, affine };
  Transform transform = Transform::affine;
  double alpha = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

const char* transform_name(SyntheticSpec::Transform t);
SyntheticSpec::Transform transform_from_name(const std::string& name);

struct FederatedDataset {
  std::vector<ClientDataset> clients;
  std::vector<ClientDataset> held_out_clients;
  /// Ground-truth domain per sample, keyed by client id. Synthetic only;
  /// consumed exclusively by evaluation, never by training operations.
  std::map<std::string, std::vector<int>> domain_truth;
};

FederatedDataset generate_synthetic(const SyntheticSpec& spec);

/// Loads a LEAF-style federated dataset: top-level keys `users` (string
/// list), `num_samples` (int list) and `user_data` (map of user to
/// {x: list of flat pixel rows, y: int labels}). Each flat x row must have
/// exactly prod(input_shape) values.
FederatedDataset load_json_federated(const std::string& path,
                                     const std::vector<std::size_t>& input_shape,
                                     std::size_t num_classes);

/// Writes `ds.clients` in the same JSON shape load_json_federated accepts.
void save_json_federated(const FederatedDataset& ds, const std::string& path);

/// Moves a deterministic train_fraction share of clients into `clients` and
/// the rest into `held_out_clients`. The input must not be split already.
FederatedDataset split_clients(const FederatedDataset& ds, double train_fraction,
                               std::uint64_t seed);

/// Mean (over clients) entropy in nats of the per-client empirical domain
/// distribution; diagnostic for heterogeneity sweeps.
double mean_domain_entropy(const FederatedDataset& ds);

/// Stacks the selected samples into a (batch, channels, height, width)
/// tensor. Throws DataError when indices is empty.
Tensor stack_samples(const ClientDataset& data, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const ClientDataset& data,
                               std::span<const std::size_t> indices);

}  // namespace fedgcn
