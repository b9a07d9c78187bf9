#include "tdsm/nn/optimizer.hpp"

#include <cmath>

#include "tdsm/errors.hpp"

namespace tdsm::nn {

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) ||
      !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
    throw ConfigError("invalid Adam hyperparameters");
}

void Adam::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  lr_ = lr;
}

void Adam::step(ParamStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const std::string& name : store.names()) {
    const Mat& g = store.grad(name);
    if (!g.allFinite())
      throw DivergedError("non-finite gradient for parameter " + name);
    auto it = state_.find(name);
    if (it == state_.end()) {
      Moments z;
      z.m = Mat::Zero(g.rows(), g.cols());
      z.v = Mat::Zero(g.rows(), g.cols());
      it = state_.emplace(name, std::move(z)).first;
    }
    Moments& s = it->second;
    s.m = beta1_ * s.m + (1.0 - beta1_) * g;
    s.v = (beta2_ * s.v.array() + (1.0 - beta2_) * g.array().square()).matrix();
    const Mat mhat = s.m / bc1;
    const Mat vhat = s.v / bc2;
    store.value(name).array() -=
        lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    if (!store.value(name).allFinite())
      throw DivergedError("parameter " + name + " became non-finite");
  }
}

void Sgd::step(ParamStore& store) {
  for (const std::string& name : store.names()) {
    const Mat& g = store.grad(name);
    if (!g.allFinite())
      throw DivergedError("non-finite gradient for parameter " + name);
    store.value(name) -= lr_ * g;
  }
}

}  // namespace tdsm::nn
