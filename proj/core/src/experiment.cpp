#include "fedgcn/experiment.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedgcn/serialize.hpp"
#include "json.hpp"

namespace fedgcn {

namespace {

constexpr std::uint64_t kInitTag = 0x111d;
constexpr std::uint64_t kClassifierTag = 0xc1a5;
constexpr std::uint64_t kStudentTag = 0x51ed;
constexpr std::uint64_t kAdjacencyTag = 0xad7a;
constexpr std::uint64_t kSplitTag = 0x5b11;

std::vector<std::size_t> parse_shape(const std::string& value) {
  std::vector<std::size_t> out;
  std::string cur;
  for (char c : value + "x") {
    if (c == 'x' || c == 'X') {
      if (cur.empty()) throw ConfigError("bad shape '" + value + "'");
      out.push_back(std::stoull(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected boolean, got '" + v + "'");
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (algorithm != "fedavg" && algorithm != "fedgcn") {
    throw ConfigError("algorithm must be fedavg or fedgcn, got '" + algorithm + "'");
  }
  if (dataset != "synthetic" && dataset != "json") {
    throw ConfigError("dataset must be synthetic or json, got '" + dataset + "'");
  }
  if (dataset == "synthetic") {
    synthetic.validate();
  } else {
    if (json_path.empty()) throw ConfigError("json dataset needs json_path");
    if (json_input_shape.size() != 3) {
      throw ConfigError("json dataset needs json_input_shape = CxHxW");
    }
    if (json_classes < 2) throw ConfigError("json dataset needs json_classes >= 2");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  if (round.local_epochs < 1 || round.batch_size < 1 || round.total_rounds < 1 ||
      round.clients_per_round < 1) {
    throw ConfigError("round fields must be positive");
  }
  if (round.lr < 0.0 || student_lr < 0.0) throw ConfigError("learning rates must be >= 0");
  if (algorithm == "fedgcn") {
    if (num_domains < 1) throw ConfigError("num_domains must be >= 1");
    if (teacher_sync_period < 1) throw ConfigError("teacher_sync_period must be >= 1");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    if (!(eps_dist > 0.0)) throw ConfigError("eps_dist must be positive");
  }
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (conv_filters < 1) throw ConfigError("conv_filters must be >= 1");
}

void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                        const std::string& value) {
  if (key == "algorithm") cfg.algorithm = value;
  else if (key == "dataset") cfg.dataset = value;
  else if (key == "json_path") cfg.json_path = value;
  else if (key == "json_input_shape") cfg.json_input_shape = parse_shape(value);
  else if (key == "json_classes") cfg.json_classes = std::stoull(value);
  else if (key == "train_fraction") cfg.train_fraction = std::stod(value);
  else if (key == "synthetic.true_domains") cfg.synthetic.true_domains = std::stoull(value);
  else if (key == "synthetic.classes") cfg.synthetic.classes = std::stoull(value);
  else if (key == "synthetic.channels") cfg.synthetic.channels = std::stoull(value);
  else if (key == "synthetic.height") cfg.synthetic.height = std::stoull(value);
  else if (key == "synthetic.width") cfg.synthetic.width = std::stoull(value);
  else if (key == "synthetic.samples_per_client")
    cfg.synthetic.samples_per_client = std::stoull(value);
  else if (key == "synthetic.clients") cfg.synthetic.clients = std::stoull(value);
  else if (key == "synthetic.transform") cfg.synthetic.transform = transform_from_name(value);
  else if (key == "synthetic.alpha") cfg.synthetic.alpha = std::stod(value);
  else if (key == "synthetic.seed") cfg.synthetic.seed = std::stoull(value);
  else if (key == "clients_per_round") cfg.round.clients_per_round = std::stoull(value);
  else if (key == "local_epochs") cfg.round.local_epochs = std::stoull(value);
  else if (key == "batch_size") cfg.round.batch_size = std::stoull(value);
  else if (key == "lr") cfg.round.lr = std::stod(value);
  else if (key == "total_rounds") cfg.round.total_rounds = std::stoull(value);
  else if (key == "student_lr") cfg.student_lr = std::stod(value);
  else if (key == "num_domains") cfg.num_domains = std::stoull(value);
  else if (key == "teacher_sync_period") cfg.teacher_sync_period = std::stoull(value);
  else if (key == "beta") cfg.beta = std::stod(value);
  else if (key == "eps_dist") cfg.eps_dist = std::stod(value);
  else if (key == "lambda_init") cfg.lambda_init = std::stod(value);
  else if (key == "freeze_lambda") cfg.freeze_lambda = parse_bool(value);
  else if (key == "plan.layers") {
    if (value == "all") cfg.plan.layers = SpecializationPlan::Layers::all;
    else if (value == "last") cfg.plan.layers = SpecializationPlan::Layers::last;
    else throw ConfigError("plan.layers must be all or last");
  } else if (key == "plan.adjacency_init") {
    if (value == "identity") cfg.plan.adjacency_init = SpecializationPlan::AdjacencyInit::identity;
    else if (value == "random") cfg.plan.adjacency_init = SpecializationPlan::AdjacencyInit::random;
    else if (value == "uniform") cfg.plan.adjacency_init = SpecializationPlan::AdjacencyInit::uniform;
    else throw ConfigError("plan.adjacency_init must be identity, random or uniform");
  } else if (key == "plan.activation") {
    if (value == "relu") cfg.plan.activation = SpecializationPlan::Activation::relu;
    else if (value == "none") cfg.plan.activation = SpecializationPlan::Activation::none;
    else throw ConfigError("plan.activation must be relu or none");
  } else if (key == "plan.assignment") {
    if (value == "hard") cfg.plan.assignment = SpecializationPlan::Assignment::hard;
    else if (value == "soft") cfg.plan.assignment = SpecializationPlan::Assignment::soft;
    else throw ConfigError("plan.assignment must be hard or soft");
  }
  else if (key == "seed") cfg.seed = std::stoull(value);
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "eval_every") cfg.eval_every = std::stoull(value);
  else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoull(value);
  else if (key == "parallel_clients") cfg.parallel_clients = parse_bool(value);
  else if (key == "identical_teacher_student_init")
    cfg.identical_teacher_student_init = parse_bool(value);
  else if (key == "conv_filters") cfg.conv_filters = std::stoull(value);
  else throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  ExperimentConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    lineno += 1;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument&) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": bad value");
    }
  }
  return cfg;
}

std::string config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["algorithm"] = cfg.algorithm;
  j["dataset"] = cfg.dataset;
  if (cfg.dataset == "json") {
    j["json_path"] = cfg.json_path;
    j["json_input_shape"] = cfg.json_input_shape;
    j["json_classes"] = cfg.json_classes;
  } else {
    j["synthetic"] = {{"true_domains", cfg.synthetic.true_domains},
                      {"classes", cfg.synthetic.classes},
                      {"channels", cfg.synthetic.channels},
                      {"height", cfg.synthetic.height},
                      {"width", cfg.synthetic.width},
                      {"samples_per_client", cfg.synthetic.samples_per_client},
                      {"clients", cfg.synthetic.clients},
                      {"transform", transform_name(cfg.synthetic.transform)},
                      {"alpha", cfg.synthetic.alpha},
                      {"seed", cfg.synthetic.seed}};
  }
  j["train_fraction"] = cfg.train_fraction;
  j["clients_per_round"] = cfg.round.clients_per_round;
  j["local_epochs"] = cfg.round.local_epochs;
  j["batch_size"] = cfg.round.batch_size;
  j["lr"] = cfg.round.lr;
  j["total_rounds"] = cfg.round.total_rounds;
  j["student_lr"] = cfg.student_lr;
  j["num_domains"] = cfg.num_domains;
  j["teacher_sync_period"] = cfg.teacher_sync_period;
  j["beta"] = cfg.beta;
  j["eps_dist"] = cfg.eps_dist;
  j["lambda_init"] = cfg.lambda_init;
  j["freeze_lambda"] = cfg.freeze_lambda;
  j["plan.layers"] = cfg.plan.layers == SpecializationPlan::Layers::all ? "all" : "last";
  j["plan.adjacency_init"] =
      cfg.plan.adjacency_init == SpecializationPlan::AdjacencyInit::identity ? "identity"
      : cfg.plan.adjacency_init == SpecializationPlan::AdjacencyInit::random ? "random"
                                                                             : "uniform";
  j["plan.activation"] =
      cfg.plan.activation == SpecializationPlan::Activation::relu ? "relu" : "none";
  j["plan.assignment"] =
      cfg.plan.assignment == SpecializationPlan::Assignment::soft ? "soft" : "hard";
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["eval_every"] = cfg.eval_every;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["parallel_clients"] = cfg.parallel_clients;
  j["identical_teacher_student_init"] = cfg.identical_teacher_student_init;
  j["conv_filters"] = cfg.conv_filters;
  return j.dump();
}

LayeredModel build_main_model(const std::vector<std::size_t>& input_shape,
                              std::size_t num_classes, std::size_t conv_filters) {
  if (input_shape.size() != 3) throw ConfigError("main model expects (c, h, w) input");
  const std::size_t h = input_shape[1], w = input_shape[2];
  std::size_t pool = (h == w && h % 4 == 0) ? h / 4 : 2;
  if (pool < 1) pool = 1;
  std::vector<LayerSpec> layers = {
      LayerSpec::Conv2d(input_shape[0], conv_filters, 3),
      LayerSpec::Relu(),
      LayerSpec::AvgPool(pool, pool),
  };
  const std::size_t ph = (h - pool) / pool + 1;
  const std::size_t pw = (w - pool) / pool + 1;
  layers.push_back(LayerSpec::Flatten());
  layers.push_back(LayerSpec::Dense(conv_filters * ph * pw, num_classes));
  layers.push_back(LayerSpec::SoftmaxXentHead());
  return LayeredModel(input_shape, std::move(layers));
}

ServerState make_server_state(const ExperimentConfig& cfg,
                              const std::vector<std::size_t>& input_shape,
                              std::size_t num_classes) {
  ServerState state;
  state.model = build_main_model(input_shape, num_classes, cfg.conv_filters);
  state.self_weight = cfg.beta;
  state.distance_floor = cfg.eps_dist;
  state.freeze_lambda = cfg.freeze_lambda;
  const Rng root(cfg.seed);
  if (cfg.algorithm == "fedgcn") {
    state.model.specialize(cfg.num_domains, cfg.plan, cfg.lambda_init);
    Rng adj_rng = root.derive(kAdjacencyTag);
    state.adjacency =
        initial_adjacency(cfg.num_domains, cfg.plan.adjacency_init, cfg.beta, adj_rng);
    ServerState::Clustering clustering;
    clustering.classifier = domain_classifier_model(input_shape, cfg.num_domains);
    Rng clf_rng = root.derive(kClassifierTag);
    clustering.state.teacher = init_domain_classifier(clustering.classifier, clf_rng);
    if (cfg.identical_teacher_student_init) {
      clustering.state.student = clustering.state.teacher;
    } else {
      Rng student_rng = root.derive(kStudentTag);
      clustering.state.student = init_domain_classifier(clustering.classifier, student_rng);
    }
    clustering.state.num_domains = cfg.num_domains;
    clustering.state.sync_period = cfg.teacher_sync_period;
    clustering.student_lr = cfg.student_lr;
    state.clustering = std::move(clustering);
  }
  Rng init_rng = root.derive(kInitTag);
  state.params = state.model.init_params(init_rng);
  return state;
}

EvalResult evaluate_global(const ServerState& state,
                           const std::vector<ClientDataset>& held_out,
                           const std::map<std::string, std::vector<int>>* domain_truth,
                           std::size_t true_domains) {
  if (held_out.empty()) throw EvalError("no held-out clients to evaluate");
  EvalResult res;
  const bool with_truth = domain_truth != nullptr && true_domains > 0;
  if (with_truth) {
    res.per_domain_accuracy.assign(true_domains, 0.0);
    res.per_domain_total.assign(true_domains, 0);
  }
  std::vector<std::size_t> per_domain_correct(true_domains, 0);
  std::size_t correct = 0;
  const std::size_t eval_batch = 64;
  const std::size_t d = state.model.num_domains();
  res.weight_sum_min = 1.0;
  res.weight_sum_max = 1.0;
  res.weight_min = state.model.specialized() ? 1.0 : 0.0;

  for (const auto& client : held_out) {
    std::vector<std::size_t> idx(client.n());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t start = 0; start < idx.size(); start += eval_batch) {
      const std::size_t count = std::min(eval_batch, idx.size() - start);
      const Tensor xb = stack_samples(client, {idx.data() + start, count});
      Tensor logits;
      if (state.model.specialized()) {
        const auto& clf = state.clustering->classifier;
        const auto& student = state.clustering->state.student;
        Tensor weights;
        if (state.model.plan().assignment == SpecializationPlan::Assignment::soft) {
          weights = domain_weights_test(clf, student, xb);
        } else {
          weights = one_hot_weights(pseudo_label(clf, student, xb), d);
        }
        for (std::size_t b = 0; b < count; ++b) {
          double sum = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            const double w = weights.data[b * d + k];
            sum += w;
            res.weight_min = std::min(res.weight_min, w);
          }
          res.weight_sum_min = std::min(res.weight_sum_min, sum);
          res.weight_sum_max = std::max(res.weight_sum_max, sum);
        }
        ForwardOptions opts;
        opts.adjacency = &state.adjacency;
        opts.domain_weights = &weights.data;
        opts.frozen_lambda = state.freeze_lambda;
        logits = forward(state.model, state.params, xb, nullptr, opts);
      } else {
        logits = forward(state.model, state.params, xb);
      }
      const auto preds = argmax_rows(logits);
      for (std::size_t b = 0; b < count; ++b) {
        const std::size_t sample_index = start + b;
        const bool ok = preds[b] == client.samples[sample_index].y;
        correct += ok ? 1 : 0;
        res.total += 1;
        if (with_truth) {
          const auto it = domain_truth->find(client.client_id);
          if (it != domain_truth->end() && sample_index < it->second.size()) {
            const auto dom = static_cast<std::size_t>(it->second[sample_index]);
            if (dom < true_domains) {
              res.per_domain_total[dom] += 1;
              per_domain_correct[dom] += ok ? 1 : 0;
            }
          }
        }
      }
    }
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(res.total);
  if (with_truth) {
    for (std::size_t dom = 0; dom < true_domains; ++dom) {
      res.per_domain_accuracy[dom] =
          res.per_domain_total[dom]
              ? static_cast<double>(per_domain_correct[dom]) /
                    static_cast<double>(res.per_domain_total[dom])
              : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return res;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto start_time = std::chrono::steady_clock::now();

  FederatedDataset raw;
  std::vector<std::size_t> input_shape;
  std::size_t num_classes = 0;
  if (cfg.dataset == "synthetic") {
    raw = generate_synthetic(cfg.synthetic);
    input_shape = {cfg.synthetic.channels, cfg.synthetic.height, cfg.synthetic.width};
    num_classes = cfg.synthetic.classes;
  } else {
    raw = load_json_federated(cfg.json_path, cfg.json_input_shape, cfg.json_classes);
    input_shape = cfg.json_input_shape;
    num_classes = cfg.json_classes;
  }
  const std::uint64_t split_seed = mix64(cfg.seed, kSplitTag);

  ExperimentResult result;
  result.data = split_clients(raw, cfg.train_fraction, split_seed);
  result.state = make_server_state(cfg, input_shape, num_classes);

  const bool synthetic = cfg.dataset == "synthetic";
  const std::size_t true_domains = synthetic ? cfg.synthetic.true_domains : 0;
  const std::size_t lambda_count =
      cfg.algorithm == "fedgcn" ? result.state.model.specialization().size() : 0;

  std::optional<MetricsWriter> writer;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    writer.emplace(cfg.out_dir + "/metrics.csv", synthetic ? true_domains : 0, lambda_count);
  }

  for (std::size_t r = 0; r < cfg.round.total_rounds; ++r) {
    const RoundReport report = run_round(result.state, result.data.clients, cfg.round,
                                         cfg.seed, cfg.parallel_clients);
    const bool eval_now =
        (r + 1) % cfg.eval_every == 0 || r + 1 == cfg.round.total_rounds;
    if (eval_now) {
      const EvalResult eval =
          evaluate_global(result.state, result.data.held_out_clients,
                          synthetic ? &result.data.domain_truth : nullptr, true_domains);
      MetricsRow row;
      row.round = report.round;
      row.algorithm = cfg.algorithm;
      row.train_loss_mean = report.mean_loss;
      row.global_test_accuracy = eval.accuracy;
      row.per_domain_accuracy = eval.per_domain_accuracy;
      if (cfg.algorithm == "fedgcn") {
        row.lambdas = result.state.model.lambdas(result.state.params);
        const auto& a = result.state.adjacency;
        double lo = 1.0, hi = 0.0;
        if (a.rows() > 1) {
          for (Eigen::Index i = 0; i < a.rows(); ++i) {
            for (Eigen::Index j = 0; j < a.cols(); ++j) {
              if (i == j) continue;
              lo = std::min(lo, a(i, j));
              hi = std::max(hi, a(i, j));
            }
          }
        } else {
          lo = hi = 0.0;
        }
        row.adj_min_offdiag = lo;
        row.adj_max_offdiag = hi;
      }
      row.wall_clock_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time)
              .count();
      result.rows.push_back(row);
      if (writer) writer->append(row);
      result.final_accuracy = eval.accuracy;
    }
    if (cfg.checkpoint_every > 0 && ((r + 1) % cfg.checkpoint_every == 0)) {
      if (!cfg.out_dir.empty()) {
        save_checkpoint(cfg.out_dir + "/checkpoint_" + std::to_string(r + 1) + ".bin",
                        result.state);
      }
    }
  }

  if (!cfg.out_dir.empty()) {
    nlohmann::json summary = nlohmann::json::parse(config_json(cfg));
    nlohmann::json doc;
    doc["config"] = summary;
    doc["rows"] = result.rows.size();
    if (!result.rows.empty()) {
      doc["final_round"] = result.rows.back().round;
      doc["final_train_loss_mean"] = result.rows.back().train_loss_mean;
      doc["final_global_test_accuracy"] = result.rows.back().global_test_accuracy;
      if (!result.rows.back().lambdas.empty()) {
        doc["final_lambdas"] = result.rows.back().lambdas;
      }
      if (!result.rows.back().per_domain_accuracy.empty()) {
        doc["final_per_domain_accuracy"] = result.rows.back().per_domain_accuracy;
      }
    }
    std::ofstream out(cfg.out_dir + "/summary.json");
    if (!out) throw IoError("cannot write summary.json in " + cfg.out_dir);
    out << doc.dump(2) << "\n";
  }
  return result;
}

}  // namespace fedgcn
