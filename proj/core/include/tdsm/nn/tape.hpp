#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

#include "tdsm/nn/param_store.hpp"

namespace tdsm::nn {

// Reverse-mode autodiff over batched matrix values (rows = batch examples).
// A Tape records one forward pass; backward() replays it in reverse, running
// each node's vector-Jacobian product. Parameter gradients accumulate into
// the owning ParamStore, so a fresh Tape per step plus ParamStore::zero_grad
// is the intended usage. Node ids are indices into the tape.
class Tape {
 public:
  // --- leaves ---
  int input(Mat v, bool needs_grad = false);
  int param(ParamStore& store, const std::string& name);

  // --- linear algebra ---
  int matmul(int a, int b);
  int matmul_const(int a, const Mat& m);  // value = a * m
  int add(int a, int b);
  int sub(int a, int b);
  int add_rowvec(int a, int bias);  // bias is 1 x cols, broadcast over rows
  int scale(int a, double s);
  int row_scale(int a, Eigen::VectorXd s);  // row i scaled by s(i)

  // --- shape ---
  int concat_cols(const std::vector<int>& parts);
  int gather_rows(int a, std::vector<int> rows);
  // value = zeros(out_rows, cols); value[rows[k]] += w(k) * sub[k]
  int scatter_rows(int sub, std::vector<int> rows, Eigen::VectorXd w,
                   Eigen::Index out_rows);
  int embed_rows(int table, std::vector<int> rows);

  // --- nonlinear ---
  int silu(int a);
  int row_softmax(int a);

  // --- stop-gradient ---
  int detach(int a);

  // --- reductions / heads ---
  int row_sqnorm(int a);                       // (B, d) -> (B, 1)
  int weighted_sum(int a, Eigen::VectorXd w);  // (B, 1) -> (1, 1)
  // Per-row cross entropy of softmax(logits) against target rows (each a
  // distribution); returns (B, 1).
  int softmax_xent(int logits, const Mat& targets);
  // Per-row -log(probs(i, picks[i])); probs are already probabilities.
  int neg_log_pick(int probs, std::vector<int> picks);
  int logabsdet(int a);  // (k, k) -> (1, 1)

  // Runs the reverse sweep from a scalar (1 x 1) node.
  void backward(int loss);

  const Mat& value(int id) const { return nodes_[id].value; }
  // Gradient of the last backward() target with respect to node `id`;
  // all-zero if the node was never reached.
  Mat grad_of(int id) const;
  Eigen::Index size() const { return static_cast<Eigen::Index>(nodes_.size()); }

 private:
  struct Node {
    Mat value;
    Mat grad;  // lazily sized on first accumulation
    bool needs_grad = false;
    std::function<void(Tape&, int)> back;  // null for leaves / detached
  };

  int push(Mat value, bool needs_grad, std::function<void(Tape&, int)> back);
  void accum(int id, const Mat& g);
  const Mat& checked(int id) const;

  std::vector<Node> nodes_;
};

}  // namespace tdsm::nn
