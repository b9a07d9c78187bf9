#include "tdsm/nn/param_store.hpp"

#include <cmath>

#include "json.hpp"
#include "json_util.hpp"
#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"
#include "tdsm/rng.hpp"

namespace tdsm::nn {

Mat& ParamStore::add(const std::string& name, Mat init) {
  if (entries_.count(name))
    throw InconsistentInputError("parameter already exists: " + name);
  Entry e;
  e.grad = Mat::Zero(init.rows(), init.cols());
  e.value = std::move(init);
  auto [it, ok] = entries_.emplace(name, std::move(e));
  (void)ok;
  return it->second.value;
}

bool ParamStore::has(const std::string& name) const {
  return entries_.count(name) != 0;
}

Mat& ParamStore::value(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw InconsistentInputError("unknown parameter: " + name);
  return it->second.value;
}

const Mat& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw InconsistentInputError("unknown parameter: " + name);
  return it->second.value;
}

Mat& ParamStore::grad(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw InconsistentInputError("unknown parameter: " + name);
  return it->second.grad;
}

const Mat& ParamStore::grad(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw InconsistentInputError("unknown parameter: " + name);
  return it->second.grad;
}

void ParamStore::zero_grad() {
  for (auto& [name, e] : entries_) e.grad.setZero();
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

Eigen::Index ParamStore::coordinate_count() const {
  Eigen::Index n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

std::string ParamStore::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  nlohmann::json shapes = nlohmann::json::object();
  nlohmann::json arrays = nlohmann::json::object();
  for (const auto& [name, e] : entries_) {
    shapes[name] = {e.value.rows(), e.value.cols()};
    nlohmann::json arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < e.value.rows(); ++i)
      for (Eigen::Index k = 0; k < e.value.cols(); ++k)
        arr.push_back(format_double(e.value(i, k)));
    arrays[name] = std::move(arr);
  }
  j["shapes"] = std::move(shapes);
  j["arrays"] = std::move(arrays);
  return j.dump(2);
}

ParamStore ParamStore::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint parse error: ") + e.what());
  }
  ParamStore store;
  try {
    if (j.at("format_version").get<int>() != 1)
      throw ConfigError("unsupported checkpoint format_version");
    const auto& shapes = j.at("shapes");
    const auto& arrays = j.at("arrays");
    for (auto it = shapes.begin(); it != shapes.end(); ++it) {
      const std::string& name = it.key();
      const Eigen::Index rows = it.value().at(0).get<Eigen::Index>();
      const Eigen::Index cols = it.value().at(1).get<Eigen::Index>();
      const auto& arr = arrays.at(name);
      if (static_cast<Eigen::Index>(arr.size()) != rows * cols)
        throw ConfigError("checkpoint array size mismatch for " + name);
      Mat m(rows, cols);
      Eigen::Index pos = 0;
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index k = 0; k < cols; ++k)
          m(i, k) = parse_double_field(arr[pos++]);
      store.add(name, std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint field error: ") + e.what());
  }
  return store;
}

Mat ParamStore::fan_in_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double a = std::sqrt(1.0 / static_cast<double>(rows));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = rng.uniform(-a, a);
  return m;
}

}  // namespace tdsm::nn
