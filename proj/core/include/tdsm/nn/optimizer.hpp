#pragma once

#include <map>
#include <string>

#include "tdsm/nn/param_store.hpp"

namespace tdsm::nn {

// Adam with bias correction. State is keyed by parameter name, so one
// optimizer instance must stay paired with one ParamStore.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  // Applies one update from the accumulated gradients; does not clear them.
  void step(ParamStore& store);

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr);

 private:
  struct Moments {
    Mat m;
    Mat v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// Plain gradient descent, for tests that want a hand-checkable update rule.
class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(ParamStore& store);

 private:
  double lr_;
};

}  // namespace tdsm::nn
