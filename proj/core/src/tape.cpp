#include "tdsm/nn/tape.hpp"

#include <Eigen/LU>
#include <cmath>
#include <utility>

#include "tdsm/errors.hpp"

namespace tdsm::nn {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Mat stable_row_softmax(const Mat& a) {
  Mat p(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    p.row(i) = (a.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

int Tape::push(Mat value, bool needs_grad,
               std::function<void(Tape&, int)> back) {
  if (!value.allFinite())
    throw DivergedError("tape node value is not finite");
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Mat& Tape::checked(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw Error("tape node id out of range");
  return nodes_[static_cast<std::size_t>(id)].value;
}

void Tape::accum(int id, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    if (n.grad.rows() != g.rows() || n.grad.cols() != g.cols())
      throw Error("tape gradient shape mismatch");
    n.grad += g;
  }
}

int Tape::input(Mat v, bool needs_grad) {
  return push(std::move(v), needs_grad, nullptr);
}

int Tape::param(ParamStore& store, const std::string& name) {
  Mat* gptr = &store.grad(name);
  return push(store.value(name), true, [gptr](Tape& t, int self) {
    *gptr += t.nodes_[static_cast<std::size_t>(self)].grad;
  });
}

int Tape::matmul(int a, int b) {
  const Mat& A = checked(a);
  const Mat& B = checked(b);
  if (A.cols() != B.rows()) throw Error("matmul inner dimension mismatch");
  const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(A * B, ng, [a, b](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.accum(a, g * t.checked(b).transpose());
    t.accum(b, t.checked(a).transpose() * g);
  });
}

int Tape::matmul_const(int a, const Mat& m) {
  const Mat& A = checked(a);
  if (A.cols() != m.rows()) throw Error("matmul_const dimension mismatch");
  Mat mt = m.transpose();
  return push(A * m, nodes_[a].needs_grad,
              [a, mt = std::move(mt)](Tape& t, int self) {
                t.accum(a, t.nodes_[static_cast<std::size_t>(self)].grad * mt);
              });
}

int Tape::add(int a, int b) {
  const Mat& A = checked(a);
  const Mat& B = checked(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw Error("add shape mismatch");
  const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(A + B, ng, [a, b](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.accum(a, g);
    t.accum(b, g);
  });
}

int Tape::sub(int a, int b) {
  const Mat& A = checked(a);
  const Mat& B = checked(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw Error("sub shape mismatch");
  const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(A - B, ng, [a, b](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.accum(a, g);
    t.accum(b, -g);
  });
}

int Tape::add_rowvec(int a, int bias) {
  const Mat& A = checked(a);
  const Mat& B = checked(bias);
  if (B.rows() != 1 || B.cols() != A.cols())
    throw Error("add_rowvec expects a 1 x cols bias");
  const bool ng = nodes_[a].needs_grad || nodes_[bias].needs_grad;
  Mat v = A.rowwise() + B.row(0);
  return push(std::move(v), ng, [a, bias](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.accum(a, g);
    t.accum(bias, g.colwise().sum());
  });
}

int Tape::scale(int a, double s) {
  return push(checked(a) * s, nodes_[a].needs_grad, [a, s](Tape& t, int self) {
    t.accum(a, t.nodes_[static_cast<std::size_t>(self)].grad * s);
  });
}

int Tape::row_scale(int a, Eigen::VectorXd s) {
  const Mat& A = checked(a);
  if (s.size() != A.rows()) throw Error("row_scale length mismatch");
  Mat v = s.asDiagonal() * A;
  return push(std::move(v), nodes_[a].needs_grad,
              [a, s = std::move(s)](Tape& t, int self) {
                const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
                t.accum(a, s.asDiagonal() * g);
              });
}

int Tape::concat_cols(const std::vector<int>& parts) {
  if (parts.empty()) throw Error("concat_cols needs at least one part");
  Eigen::Index rows = checked(parts[0]).rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (int p : parts) {
    const Mat& m = checked(p);
    if (m.rows() != rows) throw Error("concat_cols row count mismatch");
    cols += m.cols();
    ng = ng || nodes_[p].needs_grad;
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  for (int p : parts) {
    const Mat& m = checked(p);
    v.middleCols(at, m.cols()) = m;
    at += m.cols();
  }
  std::vector<int> ps = parts;
  return push(std::move(v), ng, [ps = std::move(ps)](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    Eigen::Index at = 0;
    for (int p : ps) {
      const Eigen::Index w = t.checked(p).cols();
      t.accum(p, g.middleCols(at, w));
      at += w;
    }
  });
}

int Tape::gather_rows(int a, std::vector<int> rows) {
  const Mat& A = checked(a);
  Mat v(static_cast<Eigen::Index>(rows.size()), A.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= A.rows())
      throw Error("gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(k)) = A.row(rows[k]);
  }
  return push(std::move(v), nodes_[a].needs_grad,
              [a, rows = std::move(rows)](Tape& t, int self) {
                const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
                Mat da = Mat::Zero(t.checked(a).rows(), t.checked(a).cols());
                for (std::size_t k = 0; k < rows.size(); ++k)
                  da.row(rows[k]) += g.row(static_cast<Eigen::Index>(k));
                t.accum(a, da);
              });
}

int Tape::embed_rows(int table, std::vector<int> rows) {
  return gather_rows(table, std::move(rows));
}

int Tape::scatter_rows(int sub, std::vector<int> rows, Eigen::VectorXd w,
                       Eigen::Index out_rows) {
  const Mat& S = checked(sub);
  if (static_cast<Eigen::Index>(rows.size()) != S.rows() ||
      w.size() != S.rows())
    throw Error("scatter_rows length mismatch");
  Mat v = Mat::Zero(out_rows, S.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= out_rows)
      throw Error("scatter_rows index out of range");
    v.row(rows[k]) += w(static_cast<Eigen::Index>(k)) *
                      S.row(static_cast<Eigen::Index>(k));
  }
  return push(std::move(v), nodes_[sub].needs_grad,
              [sub, rows = std::move(rows), w = std::move(w)](Tape& t,
                                                              int self) {
                const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
                Mat ds(static_cast<Eigen::Index>(rows.size()), g.cols());
                for (std::size_t k = 0; k < rows.size(); ++k)
                  ds.row(static_cast<Eigen::Index>(k)) =
                      w(static_cast<Eigen::Index>(k)) * g.row(rows[k]);
                t.accum(sub, ds);
              });
}

int Tape::silu(int a) {
  const Mat& A = checked(a);
  Mat v = A.unaryExpr([](double x) { return x * sigmoid(x); });
  return push(std::move(v), nodes_[a].needs_grad, [a](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    Mat d = t.checked(a).unaryExpr([](double x) {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    });
    t.accum(a, g.cwiseProduct(d));
  });
}

int Tape::row_softmax(int a) {
  Mat p = stable_row_softmax(checked(a));
  return push(p, nodes_[a].needs_grad, [a](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    const Mat& p = t.nodes_[static_cast<std::size_t>(self)].value;
    Mat da(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double dot = g.row(i).dot(p.row(i));
      da.row(i) = (p.row(i).array() * (g.row(i).array() - dot)).matrix();
    }
    t.accum(a, da);
  });
}

int Tape::detach(int a) { return push(checked(a), false, nullptr); }

int Tape::row_sqnorm(int a) {
  const Mat& A = checked(a);
  Mat v = A.rowwise().squaredNorm();
  return push(std::move(v), nodes_[a].needs_grad, [a](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    const Mat& A = t.checked(a);
    Mat da(A.rows(), A.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      da.row(i) = 2.0 * g(i, 0) * A.row(i);
    t.accum(a, da);
  });
}

int Tape::weighted_sum(int a, Eigen::VectorXd w) {
  const Mat& A = checked(a);
  if (A.cols() != 1 || w.size() != A.rows())
    throw Error("weighted_sum expects a column and matching weights");
  Mat v(1, 1);
  v(0, 0) = A.col(0).dot(w);
  return push(std::move(v), nodes_[a].needs_grad,
              [a, w = std::move(w)](Tape& t, int self) {
                const double g =
                    t.nodes_[static_cast<std::size_t>(self)].grad(0, 0);
                t.accum(a, g * w);
              });
}

int Tape::softmax_xent(int logits, const Mat& targets) {
  const Mat& L = checked(logits);
  if (L.rows() != targets.rows() || L.cols() != targets.cols())
    throw Error("softmax_xent shape mismatch");
  Mat p = stable_row_softmax(L);
  Mat v(L.rows(), 1);
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    const double m = L.row(i).maxCoeff();
    const double lse = m + std::log((L.row(i).array() - m).exp().sum());
    v(i, 0) = targets.row(i).sum() * lse - targets.row(i).dot(L.row(i));
  }
  return push(std::move(v), nodes_[logits].needs_grad,
              [logits, p = std::move(p), targets](Tape& t, int self) {
                const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
                Mat dl(p.rows(), p.cols());
                for (Eigen::Index i = 0; i < p.rows(); ++i)
                  dl.row(i) = g(i, 0) * (targets.row(i).sum() * p.row(i) -
                                         targets.row(i));
                t.accum(logits, dl);
              });
}

int Tape::neg_log_pick(int probs, std::vector<int> picks) {
  const Mat& P = checked(probs);
  if (static_cast<Eigen::Index>(picks.size()) != P.rows())
    throw Error("neg_log_pick length mismatch");
  Mat v(P.rows(), 1);
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    const int j = picks[static_cast<std::size_t>(i)];
    if (j < 0 || j >= P.cols()) throw Error("neg_log_pick index out of range");
    const double pij = P(i, j);
    if (!(pij > 0.0))
      throw NumericUnderflowError("probability vanished in log-likelihood");
    v(i, 0) = -std::log(pij);
  }
  return push(std::move(v), nodes_[probs].needs_grad,
              [probs, picks = std::move(picks)](Tape& t, int self) {
                const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
                const Mat& P = t.checked(probs);
                Mat dp = Mat::Zero(P.rows(), P.cols());
                for (Eigen::Index i = 0; i < P.rows(); ++i) {
                  const int j = picks[static_cast<std::size_t>(i)];
                  dp(i, j) = -g(i, 0) / P(i, j);
                }
                t.accum(probs, dp);
              });
}

int Tape::logabsdet(int a) {
  const Mat& A = checked(a);
  if (A.rows() != A.cols()) throw Error("logabsdet expects a square matrix");
  Eigen::PartialPivLU<Mat> lu(A);
  const double det = lu.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-300)
    throw SingularMatrixError("determinant vanished in logabsdet");
  Mat inv_t = lu.inverse().transpose();
  Mat v(1, 1);
  v(0, 0) = std::log(std::abs(det));
  return push(std::move(v), nodes_[a].needs_grad,
              [a, inv_t = std::move(inv_t)](Tape& t, int self) {
                const double g =
                    t.nodes_[static_cast<std::size_t>(self)].grad(0, 0);
                t.accum(a, g * inv_t);
              });
}

void Tape::backward(int loss) {
  const Mat& L = checked(loss);
  if (L.rows() != 1 || L.cols() != 1)
    throw Error("backward expects a scalar loss node");
  if (!nodes_[static_cast<std::size_t>(loss)].needs_grad)
    throw Error("backward target does not depend on any gradient leaf");
  accum(loss, Mat::Ones(1, 1));
  for (int id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() != 0 && n.back) n.back(*this, id);
  }
}

Mat Tape::grad_of(int id) const {
  const Mat& v = checked(id);
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) return Mat::Zero(v.rows(), v.cols());
  return n.grad;
}

}  // namespace tdsm::nn
