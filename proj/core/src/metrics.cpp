#include "fedgcn/metrics.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "fedgcn/common.hpp"
#include "json.hpp"

namespace fedgcn {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> metrics_header(std::size_t num_domains, std::size_t num_lambdas) {
  std::vector<std::string> cols = {"round", "algorithm", "train_loss_mean",
                                   "global_test_accuracy"};
  for (std::size_t d = 0; d < num_domains; ++d) {
    cols.push_back("domain" + std::to_string(d) + "_accuracy");
  }
  for (std::size_t l = 0; l < num_lambdas; ++l) {
    cols.push_back("lambda" + std::to_string(l));
  }
  cols.push_back("adj_min_offdiag");
  cols.push_back("adj_max_offdiag");
  cols.push_back("wall_clock_seconds");
  return cols;
}

namespace {

std::string join(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out;
}

std::vector<std::string> row_cells(const MetricsRow& row, std::size_t num_domains,
                                   std::size_t num_lambdas) {
  std::vector<std::string> cells;
  cells.push_back(std::to_string(row.round));
  cells.push_back(row.algorithm);
  cells.push_back(format_double(row.train_loss_mean));
  cells.push_back(format_double(row.global_test_accuracy));
  for (std::size_t d = 0; d < num_domains; ++d) {
    cells.push_back(d < row.per_domain_accuracy.size()
                        ? format_double(row.per_domain_accuracy[d])
                        : "");
  }
  for (std::size_t l = 0; l < num_lambdas; ++l) {
    cells.push_back(l < row.lambdas.size() ? format_double(row.lambdas[l]) : "");
  }
  if (row.lambdas.empty()) {
    cells.push_back("");
    cells.push_back("");
  } else {
    cells.push_back(format_double(row.adj_min_offdiag));
    cells.push_back(format_double(row.adj_max_offdiag));
  }
  cells.push_back(format_double(row.wall_clock_seconds));
  return cells;
}

}  // namespace

MetricsWriter::MetricsWriter(const std::string& path, std::size_t num_domains,
                             std::size_t num_lambdas)
    : out_(path), num_domains_(num_domains), num_lambdas_(num_lambdas) {
  if (!out_) throw IoError("cannot open metrics file for writing: " + path);
  out_ << join(metrics_header(num_domains, num_lambdas)) << "\n";
  out_.flush();
}

void MetricsWriter::append(const MetricsRow& row) {
  out_ << join(row_cells(row, num_domains_, num_lambdas_)) << "\n";
  out_.flush();
  if (!out_) throw IoError("failed appending metrics row");
}

void emit_metrics(const std::vector<MetricsRow>& rows, const std::string& dir,
                  const std::string& config_json) {
  std::filesystem::create_directories(dir);
  const std::size_t num_domains = rows.empty() ? 0 : rows.front().per_domain_accuracy.size();
  const std::size_t num_lambdas = rows.empty() ? 0 : rows.front().lambdas.size();
  MetricsWriter writer(dir + "/metrics.csv", num_domains, num_lambdas);
  for (const auto& row : rows) writer.append(row);

  nlohmann::json summary;
  if (!config_json.empty()) {
    try {
      summary["config"] = nlohmann::json::parse(config_json);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("config summary is not valid JSON: ") + e.what());
    }
  }
  summary["rows"] = rows.size();
  if (!rows.empty()) {
    summary["final_round"] = rows.back().round;
    summary["final_train_loss_mean"] = rows.back().train_loss_mean;
    summary["final_global_test_accuracy"] = rows.back().global_test_accuracy;
    if (!rows.back().lambdas.empty()) summary["final_lambdas"] = rows.back().lambdas;
    if (!rows.back().per_domain_accuracy.empty()) {
      summary["final_per_domain_accuracy"] = rows.back().per_domain_accuracy;
    }
  }
  std::ofstream out(dir + "/summary.json");
  if (!out) throw IoError("cannot write summary.json in " + dir);
  out << summary.dump(2) << "\n";
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("metrics file has no header: " + path);

  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        cells.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    cells.push_back(cur);
    return cells;
  };
  const auto header = split(line);
  std::size_t num_domains = 0, num_lambdas = 0;
  for (const auto& col : header) {
    if (col.rfind("domain", 0) == 0) num_domains += 1;
    if (col.rfind("lambda", 0) == 0) num_lambdas += 1;
  }
  auto cell_double = [](const std::string& s) {
    return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
  };

  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw IoError("metrics row has " + std::to_string(cells.size()) + " cells, header " +
                    std::to_string(header.size()));
    }
    MetricsRow row;
    std::size_t i = 0;
    row.round = static_cast<std::size_t>(std::stoull(cells[i++]));
    row.algorithm = cells[i++];
    row.train_loss_mean = cell_double(cells[i++]);
    row.global_test_accuracy = cell_double(cells[i++]);
    for (std::size_t d = 0; d < num_domains; ++d) {
      if (!cells[i].empty()) row.per_domain_accuracy.push_back(cell_double(cells[i]));
      ++i;
    }
    for (std::size_t l = 0; l < num_lambdas; ++l) {
      if (!cells[i].empty()) row.lambdas.push_back(cell_double(cells[i]));
      ++i;
    }
    row.adj_min_offdiag = cell_double(cells[i++]);
    row.adj_max_offdiag = cell_double(cells[i++]);
    row.wall_clock_seconds = cell_double(cells[i++]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace fedgcn
