#pragma once

#include <map>
#include <string>
#include <vector>

#include "fedgcn/federated.hpp"
#include "fedgcn/metrics.hpp"

namespace fedgcn {

/// Full description of one reproducible run. Config files are plain
/// `key = value` lines whose keys mirror these field names (nested specs use
/// `synthetic.` / `plan.` prefixes).
struct ExperimentConfig {
  std::string algorithm = "fedgcn";  // fedavg | fedgcn
  std::string dataset = "synthetic";  // synthetic | json
  std::string json_path;
  std::vector<std::size_t> json_input_shape;  // channels x height x width
  std::size_t json_classes = 0;
  SyntheticSpec synthetic;
  double train_fraction = 0.8;

  RoundConfig round;
  double student_lr = 1e-4;
  std::size_t num_domains = 4;        // D
  std::size_t teacher_sync_period = 10;  // T
  double beta = 0.5;                  // adjacency self-weight
  double eps_dist = 1e-8;             // similarity distance floor
  double lambda_init = 1.0;
  bool freeze_lambda = false;
  SpecializationPlan plan;

  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t eval_every = 10;
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  bool parallel_clients = false;
  bool identical_teacher_student_init = true;
  std::size_t conv_filters = 6;  // main model width

  void validate() const;
};

ExperimentConfig parse_config_file(const std::string& path);
/// Applies one `key = value` assignment; throws ConfigError on unknown keys.
void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                        const std::string& value);
/// JSON object describing every exposed hyperparameter; embedded in the run
/// summary so results are self-describing.
std::string config_json(const ExperimentConfig& cfg);

/// Default task model: a small convolution, ReLU, average pooling and a
/// linear classifier head.
LayeredModel build_main_model(const std::vector<std::size_t>& input_shape,
                              std::size_t num_classes, std::size_t conv_filters);

/// Fresh server state for the configured algorithm (dataset shapes needed to
/// size the models).
ServerState make_server_state(const ExperimentConfig& cfg,
                              const std::vector<std::size_t>& input_shape,
                              std::size_t num_classes);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_domain_accuracy;  // empty without ground truth
  std::vector<std::size_t> per_domain_total;
  std::size_t total = 0;
  // simplex diagnostics over every evaluated sample's weight row
  double weight_sum_min = 1.0;
  double weight_sum_max = 1.0;
  double weight_min = 0.0;
};

/// Pooled accuracy over the held-out clients. Uses the plan's test-time
/// assignment (soft by default) for specialized models; held-out clients get
/// no training of any kind.
EvalResult evaluate_global(const ServerState& state,
                           const std::vector<ClientDataset>& held_out,
                           const std::map<std::string, std::vector<int>>* domain_truth,
                           std::size_t true_domains);

struct ExperimentResult {
  std::vector<MetricsRow> rows;
  ServerState state;
  FederatedDataset data;
  double final_accuracy = 0.0;
};

/// Runs the configured experiment end to end; when out_dir is set, streams
/// metrics.csv and writes summary.json (and periodic checkpoints) there.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace fedgcn
