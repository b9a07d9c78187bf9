#include "tdsm/dataset.hpp"

#include <fstream>
#include <sstream>

#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"
#include "tdsm/rng.hpp"

namespace tdsm {

void NoisyDataset::validate() const {
  const Eigen::Index n = instances.rows();
  if (static_cast<Eigen::Index>(noisy_labels.size()) != n)
    throw InconsistentInputError("dataset: noisy label count mismatch");
  if (!clean_labels.empty() &&
      static_cast<Eigen::Index>(clean_labels.size()) != n)
    throw InconsistentInputError("dataset: clean label count mismatch");
  if (classes <= 0) throw InconsistentInputError("dataset: classes unset");
  Eigen::VectorXi tally = Eigen::VectorXi::Zero(classes);
  for (int y : noisy_labels) {
    if (y < 0 || y >= classes)
      throw InconsistentInputError("dataset: noisy label out of range");
    ++tally(y);
  }
  for (int y : clean_labels)
    if (y < 0 || y >= classes)
      throw InconsistentInputError("dataset: clean label out of range");
  if (counts.size() != classes || counts != tally)
    throw InconsistentInputError("dataset: counts do not match noisy labels");
}

MixtureSample sample_mixture(const GaussianMixture& gmm, Eigen::Index n,
                             std::uint64_t seed) {
  gmm.validate();
  Rng rng(seed);
  MixtureSample out;
  out.instances.resize(n, gmm.dim);
  out.labels.resize(n);
  Eigen::VectorXd cum(gmm.classes);
  double acc = 0.0;
  for (int y = 0; y < gmm.classes; ++y) cum(y) = (acc += gmm.clean_prior(y));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = rng.uniform();
    int y = gmm.classes - 1;
    for (int k = 0; k < gmm.classes; ++k)
      if (u < cum(k)) {
        y = k;
        break;
      }
    out.labels[i] = y;
    const double sd = std::sqrt(gmm.variances(y));
    for (int j = 0; j < gmm.dim; ++j)
      out.instances(i, j) = gmm.means(y, j) + sd * rng.normal();
  }
  return out;
}

NoisyDataset corrupt_labels(const Eigen::MatrixXd& instances,
                            const std::vector<int>& clean_labels,
                            const TransitionMatrix& T, std::uint64_t seed) {
  T.validate();
  if (T.orientation != Orientation::forward)
    throw InconsistentInputError("corrupt_labels: expected a forward matrix");
  const Eigen::Index n = instances.rows();
  if (static_cast<Eigen::Index>(clean_labels.size()) != n)
    throw InconsistentInputError("corrupt_labels: label count mismatch");
  NoisyDataset ds;
  ds.instances = instances;
  ds.clean_labels = clean_labels;
  ds.noisy_labels.resize(n);
  ds.counts = Eigen::VectorXi::Zero(T.c);
  ds.seed = seed;
  ds.classes = T.c;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = clean_labels[i];
    if (y < 0 || y >= T.c)
      throw InconsistentInputError("corrupt_labels: label out of range");
    const double u = counter_uniform(seed, static_cast<std::uint64_t>(i));
    double cum = 0.0;
    int drawn = T.c - 1;
    for (int j = 0; j < T.c; ++j) {
      cum += T.rows(y, j);
      if (u < cum) {
        drawn = j;
        break;
      }
    }
    ds.noisy_labels[i] = drawn;
    ++ds.counts(drawn);
  }
  return ds;
}

void write_dataset_csv(const std::string& path, const NoisyDataset& ds,
                       const std::string& config_hash) {
  ds.validate();
  std::ostringstream out;
  if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
  const int d = static_cast<int>(ds.instances.cols());
  for (int j = 0; j < d; ++j) out << "x" << (j + 1) << ",";
  out << "clean_label,noisy_label\n";
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < d; ++j) out << format_double(ds.instances(i, j)) << ",";
    if (!ds.clean_labels.empty()) out << ds.clean_labels[i] + 1;
    out << "," << ds.noisy_labels[i] + 1 << "\n";
  }
  write_text_file(path, out.str());
}

NoisyDataset read_dataset_csv(const std::string& path, int classes) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open dataset: " + path);
  std::string line;
  std::vector<std::vector<double>> rows;
  std::vector<int> clean, noisy;
  int d = -1;
  bool have_clean = true;
  bool header_seen = false;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // header names are positional; content not needed
      std::stringstream ss(line);
      std::string cell;
      int cols = 0;
      while (std::getline(ss, cell, ',')) ++cols;
      d = cols - 2;
      if (d <= 0) throw ConfigError("dataset header must contain x columns");
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    // A trailing empty cell is dropped by getline; restore it.
    while (static_cast<int>(cells.size()) < d + 2) cells.push_back("");
    if (static_cast<int>(cells.size()) != d + 2)
      throw ConfigError("dataset row has wrong column count");
    std::vector<double> x(d);
    for (int j = 0; j < d; ++j) x[j] = parse_double_string(cells[j]);
    rows.push_back(std::move(x));
    if (cells[d].empty()) {
      have_clean = false;
    } else {
      clean.push_back(static_cast<int>(parse_double_string(cells[d])) - 1);
    }
    noisy.push_back(static_cast<int>(parse_double_string(cells[d + 1])) - 1);
  }
  if (!have_clean && !clean.empty())
    throw ConfigError("dataset mixes present and missing clean labels");
  NoisyDataset ds;
  ds.classes = classes;
  ds.instances.resize(static_cast<Eigen::Index>(rows.size()), d);
  for (size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < d; ++j) ds.instances(static_cast<Eigen::Index>(i), j) = rows[i][j];
  ds.clean_labels = have_clean ? clean : std::vector<int>{};
  ds.noisy_labels = noisy;
  ds.counts = Eigen::VectorXi::Zero(classes);
  for (int y : ds.noisy_labels) {
    if (y < 0 || y >= classes)
      throw ConfigError("dataset noisy label out of range");
    ++ds.counts(y);
  }
  ds.validate();
  return ds;
}

}  // namespace tdsm
