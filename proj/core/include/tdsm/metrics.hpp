#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "tdsm/gmm.hpp"
#include "tdsm/sampler.hpp"

namespace tdsm {

// Square lattice over [lo, hi]^2, row-major in the first coordinate:
// row i*n + j holds (xs(i), xs(j)). Returns an (n*n, 2) matrix.
Eigen::MatrixXd make_grid(double lo, double hi, int n);

// Normalized perturbed-class density over the grid rows: the weighting used
// by every field comparison, so errors count where class mass actually sits.
Eigen::VectorXd density_weights(const GaussianMixture& gmm,
                                const VESchedule& sched,
                                const Eigen::MatrixXd& grid, int label,
                                double t);

// sum_g w_g ||field.row(g) - reference.row(g)||^2 with w from above.
double density_weighted_field_mse(const Eigen::VectorXd& weights,
                                  const Eigen::MatrixXd& field,
                                  const Eigen::MatrixXd& reference);

struct FieldMseEntry {
  int label = 0;  // 0-based class
  double t = 0.0;
  double mse = 0.0;
};

// Density-weighted MSE between two score fields for every (class, time)
// pair, plus the mean over the table for single-number comparisons.
std::vector<FieldMseEntry> field_mse_table(const GaussianMixture& gmm,
                                           const VESchedule& sched,
                                           const Eigen::MatrixXd& grid,
                                           const BatchScoreFn& field,
                                           const BatchScoreFn& reference,
                                           const std::vector<double>& times);

double mean_mse(const std::vector<FieldMseEntry>& table);

// Bayes-optimal clean class of each row under the unperturbed mixture.
std::vector<int> bayes_clean_labels(const GaussianMixture& gmm,
                                    const Eigen::MatrixXd& x);

// Fraction of samples whose Bayes-optimal clean class matches the label the
// sampler was asked for.
double condition_accuracy(const GaussianMixture& gmm,
                          const Eigen::MatrixXd& samples,
                          const std::vector<int>& requested);

Eigen::VectorXd sample_mean(const Eigen::MatrixXd& x);
Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& x);

// Distance between each class's sample mean and its mixture mean. Classes
// with no samples report -1.
std::vector<double> per_class_mean_error(const GaussianMixture& gmm,
                                         const Eigen::MatrixXd& samples,
                                         const std::vector<int>& requested);

struct MetricsReport {
  double condition_accuracy = -1.0;  // negative = not evaluated
  std::vector<FieldMseEntry> score_field_mse_clean;
  std::vector<FieldMseEntry> score_field_mse_noisy;
  std::vector<double> per_class_mean_error;
  double weight_estimator_max_deviation = -1.0;
  double runtime_seconds = 0.0;

  void validate() const;
};

// JSON artifact (labels written 1-based; negative "not evaluated" fields are
// omitted). A nonempty hash is stored under "config_hash".
std::string metrics_to_json(const MetricsReport& report,
                            const std::string& config_hash = "");
MetricsReport metrics_from_json(const std::string& text);
void write_metrics_json(const std::string& path, const MetricsReport& report,
                        const std::string& config_hash = "");
MetricsReport read_metrics_json(const std::string& path);

// Samples CSV: header `x1,...,xd,requested_label`, labels 1-based, with an
// optional `# config_hash=<hex>` comment line.
void write_samples_csv(const std::string& path, const Eigen::MatrixXd& samples,
                       const std::vector<int>& requested,
                       const std::string& config_hash = "");
void read_samples_csv(const std::string& path, Eigen::MatrixXd* samples,
                      std::vector<int>* requested);

}  // namespace tdsm
