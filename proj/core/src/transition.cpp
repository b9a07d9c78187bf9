#include "tdsm/transition.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "json_util.hpp"
#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"

namespace tdsm {

void TransitionMatrix::validate(double tol) const {
  if (c <= 0 || rows.rows() != c || rows.cols() != c)
    throw InconsistentInputError("transition matrix must be c x c with c > 0");
  for (int i = 0; i < c; ++i) {
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      const double v = rows(i, j);
      if (!(v >= 0.0 && v <= 1.0))
        throw InconsistentInputError("transition entries must lie in [0, 1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol)
      throw InconsistentInputError("transition row does not sum to 1");
  }
}

TransitionMatrix make_symmetric(int c, double rate) {
  if (c < 2) throw InconsistentInputError("make_symmetric: need c >= 2");
  if (!(rate >= 0.0) || rate >= static_cast<double>(c - 1) / c)
    throw InconsistentInputError(
        "make_symmetric: rate must lie in [0, (c-1)/c) to keep the diagonal "
        "dominant");
  TransitionMatrix m;
  m.orientation = Orientation::forward;
  m.c = c;
  m.rows = Eigen::MatrixXd::Constant(c, c, rate / (c - 1));
  m.rows.diagonal().setConstant(1.0 - rate);
  return m;
}

TransitionMatrix make_asymmetric(int c,
                                 const std::vector<std::pair<int, int>>& flips,
                                 double rate) {
  if (c < 2) throw InconsistentInputError("make_asymmetric: need c >= 2");
  if (!(rate >= 0.0 && rate < 1.0))
    throw InconsistentInputError("make_asymmetric: rate must lie in [0, 1)");
  TransitionMatrix m;
  m.orientation = Orientation::forward;
  m.c = c;
  m.rows = Eigen::MatrixXd::Identity(c, c);
  std::set<int> seen;
  for (const auto& [from, to] : flips) {
    if (from < 0 || from >= c || to < 0 || to >= c)
      throw InconsistentInputError("make_asymmetric: flip index out of range");
    if (from == to)
      throw InconsistentInputError("make_asymmetric: flip source equals target");
    if (!seen.insert(from).second)
      throw InconsistentInputError("make_asymmetric: duplicate flip source");
    m.rows(from, from) = 1.0 - rate;
    m.rows(from, to) = rate;
  }
  return m;
}

namespace {

Eigen::VectorXd check_prior(const Eigen::VectorXd& p, int c, const char* who) {
  if (p.size() != c)
    throw InconsistentInputError(std::string(who) + ": prior length mismatch");
  if ((p.array() < 0.0).any() || std::abs(p.sum() - 1.0) > 1e-10)
    throw InconsistentInputError(std::string(who) +
                                 ": prior must be a probability vector");
  return p;
}

OrientedPair assemble(const TransitionMatrix& T, const Eigen::VectorXd& clean,
                      const Eigen::VectorXd& noisy) {
  const int c = T.c;
  TransitionMatrix S;
  S.orientation = Orientation::reverse;
  S.c = c;
  S.rows.resize(c, c);
  for (int i = 0; i < c; ++i) {
    if (noisy(i) <= 0.0)
      throw InconsistentInputError(
          "reverse_from_forward: noisy prior has a zero entry");
    for (int j = 0; j < c; ++j) S.rows(i, j) = T.rows(j, i) * clean(j) / noisy(i);
  }
  S.validate(1e-9);
  return OrientedPair{T, S, clean, noisy};
}

}  // namespace

OrientedPair reverse_from_forward(const TransitionMatrix& T,
                                  const Eigen::VectorXd& prior,
                                  PriorSide side) {
  T.validate();
  if (T.orientation != Orientation::forward)
    throw InconsistentInputError("reverse_from_forward: expected a forward matrix");
  const int c = T.c;
  if (side == PriorSide::clean) {
    const Eigen::VectorXd clean = check_prior(prior, c, "reverse_from_forward");
    const Eigen::VectorXd noisy = T.rows.transpose() * clean;
    return assemble(T, clean, noisy);
  }
  // Noisy prior given: solve diag(1/noisy) T^t clean = 1 for the clean prior.
  const Eigen::VectorXd noisy = check_prior(prior, c, "reverse_from_forward");
  Eigen::MatrixXd A = T.rows.transpose();
  for (int i = 0; i < c; ++i) {
    if (noisy(i) <= 0.0)
      throw InconsistentInputError(
          "reverse_from_forward: noisy prior has a zero entry");
    A.row(i) /= noisy(i);
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  if (std::abs(lu.determinant()) < 1e-12)
    throw SingularMatrixError(
        "reverse_from_forward: prior system is singular; cannot recover the "
        "clean prior");
  const Eigen::VectorXd clean = lu.solve(Eigen::VectorXd::Ones(c));
  if ((clean.array() < -1e-12).any())
    throw InconsistentInputError(
        "reverse_from_forward: solved clean prior has negative entries; the "
        "supplied noisy prior is inconsistent with T");
  Eigen::VectorXd clipped = clean.cwiseMax(0.0);
  clipped /= clipped.sum();
  return assemble(T, clipped, noisy);
}

OrientedPair forward_from_reverse(const TransitionMatrix& S,
                                  const Eigen::VectorXd& prior,
                                  PriorSide side) {
  S.validate();
  if (S.orientation != Orientation::reverse)
    throw InconsistentInputError("forward_from_reverse: expected a reverse matrix");
  // The conversion is symmetric in the two orientations: swap the roles of
  // clean/noisy and reuse the forward-to-reverse machinery.
  TransitionMatrix flipped = S;
  flipped.orientation = Orientation::forward;
  const PriorSide swapped =
      side == PriorSide::clean ? PriorSide::noisy : PriorSide::clean;
  OrientedPair p = reverse_from_forward(
      flipped, prior, swapped == PriorSide::noisy ? PriorSide::noisy : PriorSide::clean);
  // In the flipped solve, "clean" meant the noisy side and vice versa.
  OrientedPair out;
  out.reverse = S;
  out.forward = p.reverse;
  out.forward.orientation = Orientation::forward;
  out.noisy_prior = p.clean_prior;
  out.clean_prior = p.noisy_prior;
  return out;
}

InvertibleResult ensure_invertible(const TransitionMatrix& M, double mix) {
  M.validate();
  if (!(mix >= 0.0 && mix < 1.0))
    throw InconsistentInputError("ensure_invertible: mix must lie in [0, 1)");
  InvertibleResult r;
  r.matrix = M;
  r.matrix.rows = (1.0 - mix) * M.rows +
                  mix * Eigen::MatrixXd::Identity(M.c, M.c);
  r.determinant = r.matrix.rows.determinant();
  return r;
}

std::string transition_to_json(const TransitionMatrix& m) {
  nlohmann::json j;
  j["orientation"] =
      m.orientation == Orientation::forward ? "forward" : "reverse";
  j["c"] = m.c;
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.c; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int k = 0; k < m.c; ++k) row.push_back(format_double(m.rows(i, k)));
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j.dump(2);
}

TransitionMatrix transition_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("transition JSON parse error: ") + e.what());
  }
  TransitionMatrix m;
  try {
    const std::string o = j.at("orientation").get<std::string>();
    if (o == "forward")
      m.orientation = Orientation::forward;
    else if (o == "reverse")
      m.orientation = Orientation::reverse;
    else
      throw ConfigError("transition orientation must be forward or reverse");
    m.c = j.at("c").get<int>();
    const auto& rows = j.at("rows");
    if (static_cast<int>(rows.size()) != m.c)
      throw ConfigError("transition rows count mismatch");
    m.rows.resize(m.c, m.c);
    for (int i = 0; i < m.c; ++i) {
      if (static_cast<int>(rows[i].size()) != m.c)
        throw ConfigError("transition row length mismatch");
      for (int k = 0; k < m.c; ++k)
        m.rows(i, k) = parse_double_field(rows[i][k]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("transition JSON field error: ") + e.what());
  }
  m.validate(1e-9);
  return m;
}

void write_transition_json(const std::string& path, const TransitionMatrix& m,
                           const std::string& config_hash) {
  nlohmann::json j = nlohmann::json::parse(transition_to_json(m));
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
}

TransitionMatrix read_transition_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open transition matrix file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return transition_from_json(ss.str());
}

}  // namespace tdsm
