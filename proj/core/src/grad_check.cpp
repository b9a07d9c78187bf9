#include "tdsm/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "tdsm/errors.hpp"

namespace tdsm::nn {

GradCheckResult grad_check(ParamStore& store,
                           const std::function<double()>& loss, double step,
                           int max_coords_per_param) {
  if (!(step > 0.0)) throw ConfigError("grad_check step must be positive");
  GradCheckResult res;
  for (const std::string& name : store.names()) {
    Mat& value = store.value(name);
    const Mat analytic = store.grad(name);
    const Eigen::Index total = value.size();
    const Eigen::Index probes =
        std::min<Eigen::Index>(total, std::max(1, max_coords_per_param));
    // Evenly strided flat indices so every region of the tensor is touched.
    for (Eigen::Index k = 0; k < probes; ++k) {
      const Eigen::Index flat = (k * total) / probes;
      const Eigen::Index r = flat % value.rows();
      const Eigen::Index c = flat / value.rows();
      const double saved = value(r, c);
      value(r, c) = saved + step;
      const double up = loss();
      value(r, c) = saved - step;
      const double down = loss();
      value(r, c) = saved;
      const double fd = (up - down) / (2.0 * step);
      const double g = analytic(r, c);
      const double rel =
          std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = name;
        res.worst_row = r;
        res.worst_col = c;
      }
    }
  }
  return res;
}

Mat fd_gradient(const std::function<double(const Mat&)>& f, const Mat& x,
                double step) {
  if (!(step > 0.0)) throw ConfigError("fd_gradient step must be positive");
  Mat g(x.rows(), x.cols());
  Mat probe = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double saved = probe(r, c);
      probe(r, c) = saved + step;
      const double up = f(probe);
      probe(r, c) = saved - step;
      const double down = f(probe);
      probe(r, c) = saved;
      g(r, c) = (up - down) / (2.0 * step);
    }
  }
  return g;
}

}  // namespace tdsm::nn
