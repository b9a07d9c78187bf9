#include "tdsm/metrics.hpp"

#include <fstream>
#include "json.hpp"
#include <sstream>

#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"

namespace tdsm {

Eigen::MatrixXd make_grid(double lo, double hi, int n) {
  if (n < 2) throw ConfigError("grid needs at least 2 points per axis");
  if (!(lo < hi)) throw ConfigError("grid range must satisfy lo < hi");
  Eigen::VectorXd xs = Eigen::VectorXd::LinSpaced(n, lo, hi);
  Eigen::MatrixXd grid(static_cast<Eigen::Index>(n) * n, 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      grid(static_cast<Eigen::Index>(i) * n + j, 0) = xs(i);
      grid(static_cast<Eigen::Index>(i) * n + j, 1) = xs(j);
    }
  return grid;
}

Eigen::VectorXd density_weights(const GaussianMixture& gmm,
                                const VESchedule& sched,
                                const Eigen::MatrixXd& grid, int label,
                                double t) {
  if (label < 0 || label >= gmm.classes)
    throw InconsistentInputError("density_weights: class index out of range");
  Eigen::VectorXd w(grid.rows());
  for (Eigen::Index i = 0; i < grid.rows(); ++i)
    w(i) = perturbed_class_density(gmm, sched, grid.row(i).transpose(), label, t);
  const double total = w.sum();
  if (!(total > 0.0))
    throw NumericUnderflowError("density_weights: grid carries no mass");
  return w / total;
}

double density_weighted_field_mse(const Eigen::VectorXd& weights,
                                  const Eigen::MatrixXd& field,
                                  const Eigen::MatrixXd& reference) {
  if (field.rows() != reference.rows() || field.cols() != reference.cols() ||
      field.rows() != weights.size())
    throw InconsistentInputError("field_mse: shape mismatch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < field.rows(); ++i)
    acc += weights(i) * (field.row(i) - reference.row(i)).squaredNorm();
  return acc;
}

std::vector<FieldMseEntry> field_mse_table(const GaussianMixture& gmm,
                                           const VESchedule& sched,
                                           const Eigen::MatrixXd& grid,
                                           const BatchScoreFn& field,
                                           const BatchScoreFn& reference,
                                           const std::vector<double>& times) {
  std::vector<FieldMseEntry> table;
  table.reserve(static_cast<std::size_t>(gmm.classes) * times.size());
  for (int y = 0; y < gmm.classes; ++y)
    for (double t : times) {
      const Eigen::VectorXd w = density_weights(gmm, sched, grid, y, t);
      const Eigen::MatrixXd f = field(grid, y, t);
      const Eigen::MatrixXd r = reference(grid, y, t);
      table.push_back({y, t, density_weighted_field_mse(w, f, r)});
    }
  return table;
}

double mean_mse(const std::vector<FieldMseEntry>& table) {
  if (table.empty()) throw InconsistentInputError("mean_mse: empty table");
  double acc = 0.0;
  for (const FieldMseEntry& e : table) acc += e.mse;
  return acc / static_cast<double>(table.size());
}

std::vector<int> bayes_clean_labels(const GaussianMixture& gmm,
                                    const Eigen::MatrixXd& x) {
  VESchedule base;  // posterior at t = 0 only uses the base variances
  std::vector<int> labels(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd post =
        clean_posterior(gmm, base, x.row(i).transpose(), 0.0);
    Eigen::Index best = 0;
    post.maxCoeff(&best);
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return labels;
}

double condition_accuracy(const GaussianMixture& gmm,
                          const Eigen::MatrixXd& samples,
                          const std::vector<int>& requested) {
  if (samples.rows() == 0)
    throw InconsistentInputError("condition_accuracy: no samples");
  if (static_cast<Eigen::Index>(requested.size()) != samples.rows())
    throw InconsistentInputError("condition_accuracy: label count mismatch");
  const std::vector<int> bayes = bayes_clean_labels(gmm, samples);
  Eigen::Index hits = 0;
  for (std::size_t i = 0; i < bayes.size(); ++i)
    if (bayes[i] == requested[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(samples.rows());
}

Eigen::VectorXd sample_mean(const Eigen::MatrixXd& x) {
  if (x.rows() == 0) throw InconsistentInputError("sample_mean: no rows");
  return x.colwise().mean().transpose();
}

Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw InconsistentInputError("sample_covariance: < 2 rows");
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

std::vector<double> per_class_mean_error(const GaussianMixture& gmm,
                                         const Eigen::MatrixXd& samples,
                                         const std::vector<int>& requested) {
  if (static_cast<Eigen::Index>(requested.size()) != samples.rows())
    throw InconsistentInputError("per_class_mean_error: label count mismatch");
  std::vector<double> errors(static_cast<std::size_t>(gmm.classes), -1.0);
  for (int y = 0; y < gmm.classes; ++y) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(samples.cols());
    Eigen::Index count = 0;
    for (Eigen::Index i = 0; i < samples.rows(); ++i)
      if (requested[static_cast<std::size_t>(i)] == y) {
        acc += samples.row(i).transpose();
        ++count;
      }
    if (count > 0)
      errors[static_cast<std::size_t>(y)] =
          (acc / static_cast<double>(count) - gmm.means.row(y).transpose())
              .norm();
  }
  return errors;
}

void MetricsReport::validate() const {
  if (condition_accuracy >= 0.0 &&
      (condition_accuracy < 0.0 || condition_accuracy > 1.0))
    throw InconsistentInputError("metrics: accuracy outside [0, 1]");
  for (const FieldMseEntry& e : score_field_mse_clean)
    if (e.mse < 0.0) throw InconsistentInputError("metrics: negative MSE");
  for (const FieldMseEntry& e : score_field_mse_noisy)
    if (e.mse < 0.0) throw InconsistentInputError("metrics: negative MSE");
}

namespace {

nlohmann::json mse_table_json(const std::vector<FieldMseEntry>& table) {
  nlohmann::json arr = nlohmann::json::array();
  for (const FieldMseEntry& e : table)
    arr.push_back({{"label", e.label + 1}, {"t", e.t}, {"mse", e.mse}});
  return arr;
}

std::vector<FieldMseEntry> mse_table_from_json(const nlohmann::json& arr) {
  std::vector<FieldMseEntry> table;
  for (const nlohmann::json& e : arr)
    table.push_back({e.at("label").get<int>() - 1, e.at("t").get<double>(),
                     e.at("mse").get<double>()});
  return table;
}

}  // namespace

std::string metrics_to_json(const MetricsReport& report,
                            const std::string& config_hash) {
  report.validate();
  nlohmann::json j;
  j["format_version"] = 1;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  if (report.condition_accuracy >= 0.0)
    j["condition_accuracy"] = report.condition_accuracy;
  j["score_field_mse_clean"] = mse_table_json(report.score_field_mse_clean);
  j["score_field_mse_noisy"] = mse_table_json(report.score_field_mse_noisy);
  j["per_class_sample_mean_error"] = report.per_class_mean_error;
  if (report.weight_estimator_max_deviation >= 0.0)
    j["weight_estimator_max_deviation"] = report.weight_estimator_max_deviation;
  j["runtime_seconds"] = report.runtime_seconds;
  return j.dump(2) + "\n";
}

MetricsReport metrics_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics JSON parse failure: ") + e.what());
  }
  MetricsReport report;
  try {
    if (j.contains("condition_accuracy"))
      report.condition_accuracy = j["condition_accuracy"].get<double>();
    report.score_field_mse_clean =
        mse_table_from_json(j.at("score_field_mse_clean"));
    report.score_field_mse_noisy =
        mse_table_from_json(j.at("score_field_mse_noisy"));
    report.per_class_mean_error =
        j.at("per_class_sample_mean_error").get<std::vector<double>>();
    if (j.contains("weight_estimator_max_deviation"))
      report.weight_estimator_max_deviation =
          j["weight_estimator_max_deviation"].get<double>();
    report.runtime_seconds = j.at("runtime_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics JSON field failure: ") + e.what());
  }
  report.validate();
  return report;
}

void write_metrics_json(const std::string& path, const MetricsReport& report,
                        const std::string& config_hash) {
  write_text_file(path, metrics_to_json(report, config_hash));
}

MetricsReport read_metrics_json(const std::string& path) {
  return metrics_from_json(read_text_file(path));
}

void write_samples_csv(const std::string& path, const Eigen::MatrixXd& samples,
                       const std::vector<int>& requested,
                       const std::string& config_hash) {
  if (static_cast<Eigen::Index>(requested.size()) != samples.rows())
    throw InconsistentInputError("samples csv: label count mismatch");
  std::ostringstream out;
  if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
  const int d = static_cast<int>(samples.cols());
  for (int j = 0; j < d; ++j) out << "x" << (j + 1) << ",";
  out << "requested_label\n";
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    for (int j = 0; j < d; ++j) out << format_double(samples(i, j)) << ",";
    out << requested[static_cast<std::size_t>(i)] + 1 << "\n";
  }
  write_text_file(path, out.str());
}

void read_samples_csv(const std::string& path, Eigen::MatrixXd* samples,
                      std::vector<int>* requested) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open samples: " + path);
  std::string line;
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  int d = -1;
  bool header_seen = false;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (d < 0) d = static_cast<int>(cells.size()) - 1;
    if (static_cast<int>(cells.size()) != d + 1 || d < 1)
      throw ConfigError("samples csv: ragged row");
    std::vector<double> coords(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j)
      coords[static_cast<std::size_t>(j)] = parse_double_string(cells[j]);
    rows.push_back(std::move(coords));
    labels.push_back(std::stoi(cells[static_cast<std::size_t>(d)]) - 1);
  }
  if (rows.empty()) throw ConfigError("samples csv: no data rows");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < d; ++j)
      x(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  *samples = std::move(x);
  *requested = std::move(labels);
}

}  // namespace tdsm
