#pragma once

#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

namespace fedgcn {

/// One evaluation record. Per-domain accuracies exist for synthetic data
/// only; lambda and adjacency fields are empty for the fedavg baseline.
struct MetricsRow {
  std::size_t round = 0;
  std::string algorithm;
  double train_loss_mean = 0.0;
  double global_test_accuracy = 0.0;
  std::vector<double> per_domain_accuracy;
  std::vector<double> lambdas;
  double adj_min_offdiag = 0.0;
  double adj_max_offdiag = 0.0;
  double wall_clock_seconds = 0.0;
};

/// Column names for a run with the given per-domain / lambda column counts.
std::vector<std::string> metrics_header(std::size_t num_domains, std::size_t num_lambdas);

/// Streams rows to CSV, flushing after each append so partial runs stay
/// readable. Column order is fixed per run by the header.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, std::size_t num_domains, std::size_t num_lambdas);
  void append(const MetricsRow& row);

 private:
  std::ofstream out_;
  std::size_t num_domains_;
  std::size_t num_lambdas_;
};

/// Writes `<dir>/metrics.csv` (and `<dir>/summary.json` when `config_json`
/// is a non-empty JSON object) from already collected rows. Column counts
/// are taken from the first row; zero rows yield a header-only CSV.
void emit_metrics(const std::vector<MetricsRow>& rows, const std::string& dir,
                  const std::string& config_json = "");

/// Parses a metrics.csv produced by MetricsWriter/emit_metrics. Empty cells
/// read back as NaN.
std::vector<MetricsRow> parse_metrics_csv(const std::string& path);

/// Shortest round-trip decimal encoding used for all CSV doubles.
std::string format_double(double v);

}  // namespace fedgcn
