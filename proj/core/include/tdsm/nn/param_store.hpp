#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tdsm {
class Rng;
}

namespace tdsm::nn {

using Mat = Eigen::MatrixXd;

// Named parameter arrays with a shape-congruent gradient buffer. Iteration
// is in name order, which makes every consumer (optimizers, checkpoints,
// gradient checks) deterministic.
class ParamStore {
 public:
  Mat& add(const std::string& name, Mat init);
  bool has(const std::string& name) const;
  Mat& value(const std::string& name);
  const Mat& value(const std::string& name) const;
  Mat& grad(const std::string& name);
  const Mat& grad(const std::string& name) const;
  void zero_grad();
  std::vector<std::string> names() const;
  Eigen::Index coordinate_count() const;

  // Versioned JSON checkpoint {format_version, shapes, arrays}. Array
  // entries are decimal strings that round-trip exactly to the same bits.
  std::string to_json() const;
  static ParamStore from_json(const std::string& text);

  // Fan-in-scaled uniform initializer for a dense layer mapping `rows`
  // inputs to `cols` outputs.
  static Mat fan_in_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng);

 private:
  struct Entry {
    Mat value;
    Mat grad;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace tdsm::nn
