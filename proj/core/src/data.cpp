#include "fedgcn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace fedgcn {

void SyntheticSpec::validate() const {
  if (true_domains < 1) throw ConfigError("true_domains must be >= 1");
  if (classes < 2) throw ConfigError("classes must be >= 2");
  if (channels < 1 || height < 3 || width < 3) {
    throw ConfigError("input shape must be at least 1x3x3");
  }
  if (samples_per_client < 1) throw ConfigError("samples_per_client must be >= 1");
  if (clients < 1) throw ConfigError("clients must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (transform != Transform::channel_shift && true_domains > 8) {
    throw ConfigError("rotation/affine transforms support at most 8 domains");
  }
  if (transform == Transform::rotation && true_domains > 1 && height != width) {
    throw ConfigError("rotation domains need square images");
  }
}

const char* transform_name(SyntheticSpec::Transform t) {
  switch (t) {
    case SyntheticSpec::Transform::rotation: return "rotation";
    case SyntheticSpec::Transform::channel_shift: return "channel_shift";
    case SyntheticSpec::Transform::affine: return "affine";
  }
  return "?";
}

SyntheticSpec::Transform transform_from_name(const std::string& name) {
  if (name == "rotation") return SyntheticSpec::Transform::rotation;
  if (name == "channel_shift") return SyntheticSpec::Transform::channel_shift;
  if (name == "affine") return SyntheticSpec::Transform::affine;
  throw ConfigError("unknown transform '" + name + "'");
}

namespace {

constexpr double kBaseScale = 0.35;    // shared structure amplitude
constexpr double kClassDetail = 0.35;  // class-specific structure amplitude
// Off-center mean keeps inverted domains at a distinct brightness.
constexpr double kTemplateMean = 0.38;
constexpr double kPixelNoise = 0.1;

// Affine domain maps y = a*x + offset(pixel), domain 0 the identity. The
// scale alternates polarity, which makes the domains collide in a shared
// classifier head, while the fixed per-domain offset pattern keeps every
// domain separable in input statistics.
constexpr double kAffineScale[8] = {1.0, -1.0, 0.7, -0.7, 0.85, -0.85, 0.55, -0.55};
constexpr double kAffinePattern = 0.22;  // offset pattern amplitude

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Quarter-turn rotations (and a horizontal flip for domains 4..7); exact
// pixel permutations, no interpolation. Requires square images.
void apply_rotation(std::vector<double>& img, std::size_t channels, std::size_t h,
                    std::size_t w, std::size_t domain) {
  const std::size_t quarter = domain % 4;
  const bool flip = domain >= 4;
  if (quarter == 0 && !flip) return;
  std::vector<double> src = img;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* s = src.data() + c * h * w;
    double* d = img.data() + c * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t sy = y, sx = x;
        switch (quarter) {
          case 0: break;
          case 1: sy = h - 1 - x; sx = y; break;
          case 2: sy = h - 1 - y; sx = w - 1 - x; break;
          case 3: sy = x; sx = w - 1 - y; break;
        }
        if (flip) sx = w - 1 - sx;
        d[y * w + x] = s[sy * w + sx];
      }
    }
  }
}

void apply_transform(std::vector<double>& img, const SyntheticSpec& spec,
                     std::size_t domain, const std::vector<std::vector<double>>& patterns) {
  switch (spec.transform) {
    case SyntheticSpec::Transform::rotation:
      apply_rotation(img, spec.channels, spec.height, spec.width, domain);
      break;
    case SyntheticSpec::Transform::channel_shift: {
      const double offset =
          spec.true_domains == 1
              ? 0.0
              : -0.3 + 0.6 * static_cast<double>(domain) /
                           static_cast<double>(spec.true_domains - 1);
      for (auto& v : img) v = clamp01(v + offset);
      break;
    }
    case SyntheticSpec::Transform::affine: {
      const double a = kAffineScale[domain % 8];
      const double b = (1.0 - a) / 2.0;  // keeps the range inside [0, 1]
      const auto& pattern = patterns[domain];
      for (std::size_t p = 0; p < img.size(); ++p) {
        img[p] = clamp01(a * img[p] + b + pattern[p]);
      }
      break;
    }
  }
}

std::string client_name(std::size_t i) {
  std::ostringstream out;
  out << "client_" << std::setw(3) << std::setfill('0') << i;
  return out.str();
}

}  // namespace

FederatedDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng template_rng = root.derive(0x7e3a);
  const std::size_t pixels = spec.channels * spec.height * spec.width;

  std::vector<double> base(pixels);
  for (auto& v : base) v = template_rng.uniform(-1.0, 1.0);
  std::vector<std::vector<double>> templates(spec.classes, std::vector<double>(pixels));
  for (std::size_t y = 0; y < spec.classes; ++y) {
    auto& tpl = templates[y];
    double mean = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) {
      tpl[p] = kBaseScale * base[p] + kClassDetail * template_rng.uniform(-1.0, 1.0);
      mean += tpl[p];
    }
    mean /= static_cast<double>(pixels);
    // equal mean brightness across classes: brightness stays a pure domain cue
    for (std::size_t p = 0; p < pixels; ++p) {
      tpl[p] = std::min(std::max(tpl[p] - mean + kTemplateMean, 0.02), 0.9);
    }
  }

  // fixed offset pattern per affine domain; domain 0 stays the identity
  std::vector<std::vector<double>> patterns(spec.true_domains,
                                            std::vector<double>(pixels, 0.0));
  Rng pattern_rng = root.derive(0xba7e);
  for (std::size_t d = 1; d < spec.true_domains; ++d) {
    for (auto& v : patterns[d]) v = pattern_rng.uniform(-kAffinePattern, kAffinePattern);
  }

  FederatedDataset ds;
  ds.clients.reserve(spec.clients);
  for (std::size_t c = 0; c < spec.clients; ++c) {
    Rng crng = root.derive(0xc11e, c);
    ClientDataset client;
    client.client_id = client_name(c);
    std::vector<int>& truth = ds.domain_truth[client.client_id];
    const std::vector<double> mixture = crng.dirichlet(spec.alpha, spec.true_domains);
    for (std::size_t s = 0; s < spec.samples_per_client; ++s) {
      const double u = crng.uniform();
      std::size_t domain = spec.true_domains - 1;
      double acc = 0.0;
      for (std::size_t d = 0; d < spec.true_domains; ++d) {
        acc += mixture[d];
        if (u < acc) {
          domain = d;
          break;
        }
      }
      const int label = static_cast<int>(crng.uniform_int(spec.classes));
      std::vector<double> img(pixels);
      const auto& tpl = templates[static_cast<std::size_t>(label)];
      for (std::size_t p = 0; p < pixels; ++p) {
        img[p] = clamp01(tpl[p] + kPixelNoise * crng.normal());
      }
      apply_transform(img, spec, domain, patterns);
      client.samples.push_back(
          {Tensor({spec.channels, spec.height, spec.width}, std::move(img)), label});
      truth.push_back(static_cast<int>(domain));
    }
    ds.clients.push_back(std::move(client));
  }
  return ds;
}

FederatedDataset load_json_federated(const std::string& path,
                                     const std::vector<std::size_t>& input_shape,
                                     std::size_t num_classes) {
  if (input_shape.size() != 3) {
    throw ConfigError("input_shape must be (channels, height, width)");
  }
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("malformed JSON in " + path + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("users") || !doc.contains("num_samples") ||
      !doc.contains("user_data")) {
    throw SchemaError(path + ": expected keys users, num_samples, user_data");
  }
  const auto& users = doc["users"];
  const auto& counts = doc["num_samples"];
  const auto& data = doc["user_data"];
  if (!users.is_array() || !counts.is_array() || users.size() != counts.size()) {
    throw SchemaError(path + ": users and num_samples must be arrays of equal length");
  }
  const std::size_t flat = input_shape[0] * input_shape[1] * input_shape[2];
  FederatedDataset ds;
  for (std::size_t i = 0; i < users.size(); ++i) {
    if (!users[i].is_string()) throw SchemaError(path + ": users must be strings");
    const std::string uid = users[i].get<std::string>();
    if (!data.contains(uid)) throw SchemaError(path + ": missing user_data for " + uid);
    const auto& entry = data[uid];
    if (!entry.contains("x") || !entry.contains("y")) {
      throw SchemaError(path + ": user " + uid + " needs x and y");
    }
    const auto& xs = entry["x"];
    const auto& ys = entry["y"];
    if (!xs.is_array() || !ys.is_array() || xs.size() != ys.size()) {
      throw SchemaError(path + ": user " + uid + " has mismatched x/y lengths");
    }
    const std::size_t declared = counts[i].get<std::size_t>();
    if (declared != ys.size()) {
      throw SchemaError(path + ": num_samples disagrees with data length for " + uid);
    }
    ClientDataset client;
    client.client_id = uid;
    for (std::size_t s = 0; s < xs.size(); ++s) {
      const auto& row = xs[s];
      if (!row.is_array() || row.size() != flat) {
        throw SchemaError(path + ": user " + uid + " sample " + std::to_string(s) +
                          " needs " + std::to_string(flat) + " values");
      }
      std::vector<double> pix(flat);
      for (std::size_t p = 0; p < flat; ++p) pix[p] = row[p].get<double>();
      const int label = ys[s].get<int>();
      if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
        throw SchemaError(path + ": label " + std::to_string(label) + " outside [0, " +
                          std::to_string(num_classes) + ") for " + uid);
      }
      client.samples.push_back(
          {Tensor({input_shape[0], input_shape[1], input_shape[2]}, std::move(pix)), label});
    }
    if (client.samples.empty()) {
      throw SchemaError(path + ": user " + uid + " has no samples");
    }
    ds.clients.push_back(std::move(client));
  }
  return ds;
}

void save_json_federated(const FederatedDataset& ds, const std::string& path) {
  nlohmann::json doc;
  doc["users"] = nlohmann::json::array();
  doc["num_samples"] = nlohmann::json::array();
  doc["user_data"] = nlohmann::json::object();
  for (const auto& client : ds.clients) {
    doc["users"].push_back(client.client_id);
    doc["num_samples"].push_back(client.n());
    nlohmann::json entry;
    entry["x"] = nlohmann::json::array();
    entry["y"] = nlohmann::json::array();
    for (const auto& sample : client.samples) {
      entry["x"].push_back(sample.x.data);
      entry["y"].push_back(sample.y);
    }
    doc["user_data"][client.client_id] = std::move(entry);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset file: " + path);
  out << doc.dump();
  if (!out) throw IoError("failed writing dataset file: " + path);
}

FederatedDataset split_clients(const FederatedDataset& ds, double train_fraction,
                               std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw SplitError("train_fraction must lie in (0, 1)");
  }
  if (!ds.held_out_clients.empty()) throw SplitError("dataset is already split");
  const std::size_t n = ds.clients.size();
  const auto train_n =
      static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (train_n < 1 || train_n >= n) {
    throw SplitError("too few clients (" + std::to_string(n) + ") for fraction " +
                     std::to_string(train_fraction));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  FederatedDataset out;
  out.domain_truth = ds.domain_truth;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < train_n) {
      out.clients.push_back(ds.clients[order[i]]);
    } else {
      out.held_out_clients.push_back(ds.clients[order[i]]);
    }
  }
  return out;
}

double mean_domain_entropy(const FederatedDataset& ds) {
  double total = 0.0;
  std::size_t count = 0;
  auto accumulate = [&](const ClientDataset& client) {
    const auto it = ds.domain_truth.find(client.client_id);
    if (it == ds.domain_truth.end() || it->second.empty()) return;
    std::map<int, std::size_t> hist;
    for (int d : it->second) hist[d] += 1;
    double h = 0.0;
    for (const auto& [d, c] : hist) {
      const double p = static_cast<double>(c) / static_cast<double>(it->second.size());
      h -= p * std::log(p);
    }
    total += h;
    count += 1;
  };
  for (const auto& c : ds.clients) accumulate(c);
  for (const auto& c : ds.held_out_clients) accumulate(c);
  if (count == 0) throw DataError("no domain ground truth available");
  return total / static_cast<double>(count);
}

Tensor stack_samples(const ClientDataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("empty batch");
  const auto& shape = data.samples.at(indices[0]).x.shape;
  Tensor out = Tensor::zeros({indices.size(), shape[0], shape[1], shape[2]});
  const std::size_t per = Tensor::size_of(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = data.samples.at(indices[i]);
    if (s.x.shape != shape) throw ShapeError("inconsistent sample shapes in client data");
    std::copy(s.x.data.begin(), s.x.data.end(), out.data.begin() + i * per);
  }
  return out;
}

std::vector<int> gather_labels(const ClientDataset& data,
                               std::span<const std::size_t> indices) {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = data.samples.at(indices[i]).y;
  return out;
}

}  // namespace fedgcn
