#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "tdsm/classifier.hpp"
#include "tdsm/dataset.hpp"
#include "tdsm/errors.hpp"
#include "tdsm/gmm.hpp"
#include "tdsm/nn/grad_check.hpp"
#include "tdsm/nn/optimizer.hpp"
#include "tdsm/nn/param_store.hpp"
#include "tdsm/nn/tape.hpp"
#include "tdsm/rng.hpp"
#include "tdsm/score_model.hpp"

using namespace tdsm;
using nn::Mat;
using nn::Tape;

namespace {

// Deterministic positive row weights for scalarizing matrix outputs.
Eigen::VectorXd probe_weights(Eigen::Index n) {
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) w(i) = 0.3 + 0.1 * double(i % 5);
  return w;
}

// loss = sum_i w_i ||row_i||^2 of an arbitrary (B, d) node.
int scalarize(Tape& tp, int id) {
  return tp.weighted_sum(tp.row_sqnorm(id), probe_weights(tp.value(id).rows()));
}

double entrywise_rel_error(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      double denom = std::max({1.0, std::abs(a(i, j)), std::abs(b(i, j))});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  return worst;
}

// Backward of a single-input op against finite differences of its rebuild.
void check_input_grad(const std::function<int(Tape&, int)>& op, const Mat& x,
                      double tol = 1e-6) {
  auto rebuild = [&](const Mat& v) {
    Tape tp;
    int out = op(tp, tp.input(v));
    return tp.value(scalarize(tp, out))(0, 0);
  };
  Tape tp;
  int a = tp.input(x, true);
  tp.backward(scalarize(tp, op(tp, a)));
  Mat fd = nn::fd_gradient(rebuild, x);
  CHECK(entrywise_rel_error(tp.grad_of(a), fd) < tol);
}

}  // namespace

TEST_CASE("tape reductions are finite-difference consistent") {
  Rng rng(1);
  Mat x = rng.normal_matrix(4, 3);
  // row_sqnorm + weighted_sum are scalarize itself; test them directly
  auto rebuild = [&](const Mat& v) {
    Tape tp;
    return tp.value(scalarize(tp, tp.input(v)))(0, 0);
  };
  Tape tp;
  int a = tp.input(x, true);
  tp.backward(scalarize(tp, a));
  CHECK(entrywise_rel_error(tp.grad_of(a), nn::fd_gradient(rebuild, x)) < 1e-6);
  // and the forward value is what the straight-line formula says
  double expect = 0.0;
  auto w = probe_weights(4);
  for (int i = 0; i < 4; ++i) expect += w(i) * x.row(i).squaredNorm();
  Tape tv;
  CHECK(tv.value(scalarize(tv, tv.input(x)))(0, 0) ==
        doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("linear-algebra ops match finite differences") {
  Rng rng(2);
  Mat x = rng.normal_matrix(4, 3);
  Mat m = rng.normal_matrix(3, 5);
  Mat other = rng.normal_matrix(4, 3);
  Eigen::VectorXd rs(4);
  rs << 0.5, -1.0, 2.0, 0.25;

  check_input_grad([&](Tape& tp, int a) { return tp.matmul_const(a, m); }, x);
  check_input_grad([&](Tape& tp, int a) { return tp.add(a, tp.input(other)); },
                   x);
  check_input_grad([&](Tape& tp, int a) { return tp.sub(tp.input(other), a); },
                   x);
  check_input_grad([&](Tape& tp, int a) { return tp.scale(a, -1.7); }, x);
  check_input_grad([&](Tape& tp, int a) { return tp.row_scale(a, rs); }, x);

  // matmul: gradients with respect to both factors
  Mat b = rng.normal_matrix(3, 5);
  {
    Tape tp;
    int an = tp.input(x, true), bn = tp.input(b, true);
    tp.backward(scalarize(tp, tp.matmul(an, bn)));
    auto fa = nn::fd_gradient(
        [&](const Mat& v) {
          Tape t2;
          return t2.value(
              scalarize(t2, t2.matmul(t2.input(v), t2.input(b))))(0, 0);
        },
        x);
    auto fb = nn::fd_gradient(
        [&](const Mat& v) {
          Tape t2;
          return t2.value(
              scalarize(t2, t2.matmul(t2.input(x), t2.input(v))))(0, 0);
        },
        b);
    CHECK(entrywise_rel_error(tp.grad_of(an), fa) < 1e-6);
    CHECK(entrywise_rel_error(tp.grad_of(bn), fb) < 1e-6);
  }

  // add_rowvec broadcasts a 1 x d bias over rows
  Mat bias = rng.normal_matrix(1, 3);
  {
    Tape tp;
    int an = tp.input(x, true), bn = tp.input(bias, true);
    tp.backward(scalarize(tp, tp.add_rowvec(an, bn)));
    auto fbias = nn::fd_gradient(
        [&](const Mat& v) {
          Tape t2;
          return t2.value(scalarize(
              t2, t2.add_rowvec(t2.input(x), t2.input(v))))(0, 0);
        },
        bias);
    CHECK(entrywise_rel_error(tp.grad_of(bn), fbias) < 1e-6);
    Tape tv;
    int out = tv.add_rowvec(tv.input(x), tv.input(bias));
    CHECK((tv.value(out) - (x.rowwise() + bias.row(0))).norm() == 0.0);
  }
}

TEST_CASE("shape ops route gradients to the right rows") {
  Rng rng(3);
  Mat x = rng.normal_matrix(5, 3);
  std::vector<int> rows = {3, 0, 3, 1};

  check_input_grad([&](Tape& tp, int a) { return tp.gather_rows(a, rows); }, x);
  check_input_grad([&](Tape& tp, int a) { return tp.embed_rows(a, rows); }, x);
  check_input_grad(
      [&](Tape& tp, int a) {
        return tp.concat_cols({a, tp.input(x), a});
      },
      x);

  Eigen::VectorXd sw(4);
  sw << 1.0, 0.5, -2.0, 0.0;
  Mat sub = rng.normal_matrix(4, 3);
  check_input_grad(
      [&](Tape& tp, int a) { return tp.scatter_rows(a, rows, sw, 5); }, sub);

  // scatter semantics: duplicate targets accumulate
  Tape tv;
  Mat got = tv.value(tv.scatter_rows(tv.input(sub), rows, sw, 5));
  Mat expect = Mat::Zero(5, 3);
  for (int k = 0; k < 4; ++k) expect.row(rows[k]) += sw(k) * sub.row(k);
  CHECK((got - expect).norm() == 0.0);
  // gather semantics
  Tape tg;
  Mat gathered = tg.value(tg.gather_rows(tg.input(x), rows));
  for (int k = 0; k < 4; ++k) CHECK((gathered.row(k) - x.row(rows[k])).norm() == 0.0);
}

TEST_CASE("nonlinear ops match their formulas and finite differences") {
  Rng rng(4);
  Mat x = rng.normal_matrix(4, 3);

  check_input_grad([](Tape& tp, int a) { return tp.silu(a); }, x);
  check_input_grad([](Tape& tp, int a) { return tp.row_softmax(a); }, x);

  Tape tv;
  Mat silu_val = tv.value(tv.silu(tv.input(x)));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      double v = x(i, j);
      CHECK(silu_val(i, j) ==
            doctest::Approx(v / (1.0 + std::exp(-v))).epsilon(1e-14));
    }
  Mat sm = tv.value(tv.row_softmax(tv.input(x)));
  for (int i = 0; i < 4; ++i) {
    CHECK(sm.row(i).sum() == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(sm.row(i).minCoeff() > 0.0);
  }
}

TEST_CASE("probability heads match finite differences") {
  Rng rng(5);
  Mat logits = rng.normal_matrix(4, 3);
  Mat targets(4, 3);
  targets << 1, 0, 0, 0, 1, 0, 0.5, 0.25, 0.25, 0, 0, 1;
  std::vector<int> picks = {2, 0, 1, 1};

  check_input_grad(
      [&](Tape& tp, int a) { return tp.softmax_xent(a, targets); }, logits);
  check_input_grad(
      [&](Tape& tp, int a) {
        return tp.neg_log_pick(tp.row_softmax(a), picks);
      },
      logits);

  // logabsdet on a well-conditioned square input, loss used directly
  Mat sq = 0.2 * rng.normal_matrix(3, 3) + 3.0 * Mat::Identity(3, 3);
  auto rebuild = [&](const Mat& v) {
    Tape tp;
    return tp.value(tp.logabsdet(tp.input(v)))(0, 0);
  };
  Tape tp;
  int a = tp.input(sq, true);
  tp.backward(tp.logabsdet(a));
  CHECK(entrywise_rel_error(tp.grad_of(a), nn::fd_gradient(rebuild, sq)) <
        1e-6);
  CHECK(rebuild(sq) ==
        doctest::Approx(std::log(std::abs(sq.determinant()))).epsilon(1e-12));
}

TEST_CASE("detach blocks gradient flow but keeps the value") {
  Rng rng(6);
  Mat x = rng.normal_matrix(3, 2);
  Tape tp;
  int a = tp.input(x, true);
  int mixed = tp.add(a, tp.detach(tp.scale(a, 2.0)));
  CHECK((tp.value(mixed) - 3.0 * x).norm() == 0.0);
  tp.backward(scalarize(tp, mixed));
  // gradient sees only the live branch: d/dx of sum w ||3x||^2 restricted
  // to the undetached path = 2 w (3x) * 1
  Mat expect = Mat::Zero(3, 2);
  auto w = probe_weights(3);
  for (int i = 0; i < 3; ++i) expect.row(i) = 2.0 * w(i) * 3.0 * x.row(i);
  CHECK((tp.grad_of(a) - expect).norm() < 1e-12);
}

TEST_CASE("gradient checker flags an injected gradient fault") {
  nn::ParamStore store;
  Rng rng(7);
  store.add("w", rng.normal_matrix(3, 3));
  Mat x = rng.normal_matrix(5, 3);
  auto loss = [&]() {
    Tape tp;
    int out = tp.matmul(tp.input(x), tp.param(store, "w"));
    return tp.value(scalarize(tp, tp.silu(out)))(0, 0);
  };
  auto run_backward = [&]() {
    store.zero_grad();
    Tape tp;
    int out = tp.matmul(tp.input(x), tp.param(store, "w"));
    tp.backward(scalarize(tp, tp.silu(out)));
  };
  run_backward();
  auto ok = nn::grad_check(store, loss);
  CHECK(ok.max_rel_error < 1e-6);

  run_backward();
  store.grad("w")(1, 2) += 0.5;  // simulated backward bug
  auto bad = nn::grad_check(store, loss);
  CHECK(bad.max_rel_error > 1e-2);
  CHECK(bad.worst_param == "w");
  CHECK(bad.worst_row == 1);
  CHECK(bad.worst_col == 2);
}

TEST_CASE("sgd and adam apply their textbook updates") {
  nn::ParamStore store;
  Mat init(1, 2);
  init << 2.0, -3.0;
  store.add("p", init);
  store.grad("p") << 0.5, -1.0;
  nn::Sgd sgd(0.1);
  sgd.step(store);
  CHECK(store.value("p")(0, 0) == doctest::Approx(2.0 - 0.05).epsilon(1e-15));
  CHECK(store.value("p")(0, 1) == doctest::Approx(-3.0 + 0.1).epsilon(1e-15));

  nn::ParamStore astore;
  astore.add("p", init);
  astore.grad("p") << 0.5, -1.0;
  nn::Adam adam(0.1);
  adam.step(astore);
  // first step with bias correction: delta = lr * g / (|g| + eps)
  for (int j = 0; j < 2; ++j) {
    double g = astore.grad("p")(0, j);
    double expect = init(0, j) - 0.1 * g / (std::abs(g) + 1e-8);
    CHECK(astore.value("p")(0, j) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("adam minimizes a quadratic through the tape") {
  nn::ParamStore store;
  Rng rng(8);
  store.add("x", rng.normal_matrix(1, 4));
  Mat target(1, 4);
  target << 1.0, -2.0, 0.5, 3.0;
  nn::Adam adam(0.05);
  for (int step = 0; step < 500; ++step) {
    store.zero_grad();
    Tape tp;
    int diff = tp.sub(tp.param(store, "x"), tp.input(target));
    tp.backward(tp.weighted_sum(tp.row_sqnorm(diff), Eigen::VectorXd::Ones(1)));
    adam.step(store);
  }
  CHECK((store.value("x") - target).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("param store round-trips through json bitwise") {
  nn::ParamStore store;
  Rng rng(9);
  store.add("layer.weight", rng.normal_matrix(3, 2));
  store.add("layer.bias", Mat::Zero(1, 2));
  store.value("layer.weight")(0, 0) = 1.0 / 3.0;
  auto names = store.names();
  CHECK(names == std::vector<std::string>{"layer.bias", "layer.weight"});
  CHECK(store.coordinate_count() == 8);

  auto back = nn::ParamStore::from_json(store.to_json());
  for (const auto& n : names)
    CHECK((back.value(n).array() == store.value(n).array()).all());
  CHECK_THROWS_AS(nn::ParamStore::from_json("{\"format_version\": 99}"), Error);

  store.grad("layer.bias")(0, 1) = 5.0;
  store.zero_grad();
  CHECK(store.grad("layer.bias").cwiseAbs().maxCoeff() == 0.0);
  CHECK_FALSE(store.has("missing"));
  CHECK_THROWS_AS(store.value("missing"), Error);
}

TEST_CASE("fan-in initializer stays inside its stated range") {
  Rng rng(10);
  auto m = nn::ParamStore::fan_in_uniform(16, 8, rng);
  const double a = std::sqrt(1.0 / 16.0);
  CHECK(m.maxCoeff() <= a);
  CHECK(m.minCoeff() >= -a);
  CHECK(m.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("time embedding is bounded and injective over the schedule") {
  Eigen::VectorXd t(5);
  t << 0.05, 0.1, 1.0, 3.0, 10.0;
  auto emb = time_embedding(t, 16);
  CHECK(emb.rows() == 5);
  CHECK(emb.cols() == 16);
  CHECK(emb.maxCoeff() <= 1.0 + 1e-12);
  CHECK(emb.minCoeff() >= -1.0 - 1e-12);
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j)
      CHECK((emb.row(i) - emb.row(j)).norm() > 1e-3);
  CHECK_THROWS_AS(time_embedding(t, 15), Error);
}

TEST_CASE("score model starts at the zero field and round-trips") {
  ScoreModelArch arch;
  arch.hidden = {16, 16};
  ScoreModel model(arch, 99);
  Rng rng(11);
  Mat x = rng.normal_matrix(6, 2);
  Eigen::VectorXd t = Eigen::VectorXd::Constant(6, 0.8);
  std::vector<int> labels = {0, 1, 0, 1, 2, 2};  // 2 = null label

  CHECK(model.null_label() == 2);
  CHECK(model.eval(x, labels, t).cwiseAbs().maxCoeff() == 0.0);

  // make the field nontrivial, then compare every evaluation path
  for (const auto& name : model.params().names())
    model.params().value(name) = 0.3 * rng.normal_matrix(
        model.params().value(name).rows(), model.params().value(name).cols());

  Tape tp;
  int out = model.forward(tp, x, labels, t);
  Tape tf;
  int frozen = model.forward_frozen(tf, x, labels, t);
  Mat evaled = model.eval(x, labels, t);
  CHECK((tp.value(out) - tf.value(frozen)).norm() == 0.0);
  CHECK((tp.value(out) - evaled).norm() == 0.0);
  CHECK((model.eval(x, 1, 0.8) -
         model.eval(x, std::vector<int>(6, 1), t))
            .norm() == 0.0);

  // denoiser view
  Mat denoised = model.denoise(x, labels, t);
  CHECK((denoised - (x + 0.64 * evaled)).cwiseAbs().maxCoeff() < 1e-15);

  auto back = ScoreModel::from_checkpoint_json(model.to_checkpoint_json());
  CHECK(back.arch().hidden == arch.hidden);
  CHECK((back.eval(x, labels, t) - evaled).norm() == 0.0);

  CHECK_THROWS_AS(model.eval(x, 5, 0.8), Error);
  CHECK_THROWS_AS(model.eval(x, -1, 0.8), Error);
}

TEST_CASE("noise parameterization rescales the direct output") {
  ScoreModelArch direct;
  direct.hidden = {8};
  ScoreModelArch noise = direct;
  noise.parameterization = "noise";
  ScoreModel a(direct, 7), b(noise, 7);  // same seed, same raw network
  Rng rng(12);
  for (const auto& name : a.params().names()) {
    Mat v = 0.5 * rng.normal_matrix(a.params().value(name).rows(),
                                    a.params().value(name).cols());
    a.params().value(name) = v;
    b.params().value(name) = v;
  }
  Mat x = rng.normal_matrix(4, 2);
  for (double t : {0.1, 1.0, 4.0}) {
    Mat raw = a.eval(x, 1, t);
    Mat rescaled = b.eval(x, 1, t);
    CHECK((rescaled - (-raw / t)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("score model gradients pass the checker") {
  ScoreModelArch arch;
  arch.hidden = {8, 8};
  arch.class_embed = 4;
  arch.time_embed = 4;
  ScoreModel model(arch, 3);
  Rng rng(13);
  for (const auto& name : model.params().names())
    model.params().value(name) = 0.4 * rng.normal_matrix(
        model.params().value(name).rows(), model.params().value(name).cols());
  Mat x = rng.normal_matrix(6, 2);
  Eigen::VectorXd t(6);
  t << 0.05, 0.2, 0.7, 1.0, 4.0, 9.0;
  std::vector<int> labels = {0, 1, 1, 0, 2, 1};

  auto loss = [&]() {
    Tape tp;
    int out = model.forward(tp, x, labels, t);
    return tp.value(scalarize(tp, out))(0, 0);
  };
  model.params().zero_grad();
  Tape tp;
  tp.backward(scalarize(tp, model.forward(tp, x, labels, t)));
  auto res = nn::grad_check(model.params(), loss);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("untrained classifier is exactly uniform and projectable") {
  ClassifierArch arch;
  arch.hidden = {8};
  NoisyClassifier clf(arch, 21);
  Rng rng(14);
  Mat x = rng.normal_matrix(4, 2);
  Eigen::VectorXd t = Eigen::VectorXd::Constant(4, 1.0);

  Mat p = clf.classify(x, t);
  CHECK((p.array() == 0.5).all());

  TransitionMatrix T;
  T.orientation = Orientation::forward;
  T.c = 2;
  T.rows.resize(2, 2);
  T.rows << 0.9, 0.1, 0.3, 0.7;
  clf.set_simplex_projection(T);
  CHECK(clf.has_simplex_projection());
  Mat projected = clf.classify(x, t);
  // uniform softmax through the projection: 0.5 row0 + 0.5 row1
  CHECK((projected.col(0).array() == 0.6).all());
  CHECK((projected.col(1).array() == 0.4).all());

  TransitionMatrix rev = T;
  rev.orientation = Orientation::reverse;
  CHECK_THROWS_AS(clf.set_simplex_projection(rev), Error);
  clf.clear_simplex_projection();
  CHECK_FALSE(clf.has_simplex_projection());
}

TEST_CASE("classifier probabilities, gradients, and checkpoints agree") {
  ClassifierArch arch;
  arch.hidden = {8, 8};
  NoisyClassifier clf(arch, 5);
  Rng rng(15);
  for (const auto& name : clf.params().names())
    clf.params().value(name) = 0.5 * rng.normal_matrix(
        clf.params().value(name).rows(), clf.params().value(name).cols());

  Mat x = rng.normal_matrix(5, 2);
  Eigen::VectorXd t(5);
  t << 0.05, 0.3, 1.0, 2.0, 8.0;
  Mat p = clf.classify(x, t);
  for (int i = 0; i < 5; ++i) {
    CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((clf.classify_one(x.row(i).transpose(), t(i)) -
           p.row(i).transpose())
              .norm() == 0.0);
  }

  std::vector<int> labels = {0, 1, 1, 0, 1};
  Mat g = clf.log_prob_input_grad(x, labels, t);
  for (int i = 0; i < 5; ++i) {
    Eigen::VectorXd fd(2);
    for (int j = 0; j < 2; ++j) {
      Eigen::MatrixXd hi = x, lo = x;
      hi(i, j) += 1e-5;
      lo(i, j) -= 1e-5;
      fd(j) = (std::log(clf.classify(hi, t)(i, labels[i])) -
               std::log(clf.classify(lo, t)(i, labels[i]))) /
              2e-5;
    }
    CHECK((g.row(i).transpose() - fd).norm() < 1e-5);
  }

  auto back = NoisyClassifier::from_checkpoint_json(clf.to_checkpoint_json());
  CHECK((back.classify(x, t) - p).norm() == 0.0);
  CHECK(back.has_simplex_projection() == clf.has_simplex_projection());
}

TEST_CASE("classifier training separates the toy classes") {
  auto gmm = GaussianMixture::toy_two_class();
  VESchedule sched;
  auto draw = sample_mixture(gmm, 600, 77);
  auto ds = corrupt_labels(draw.instances, draw.labels, make_symmetric(2, 0.0),
                           78);
  ClassifierArch arch;
  arch.hidden = {16, 16};
  ClassifierTrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 64;
  cfg.seed = 17;

  NoisyClassifier clf(arch, 1);
  auto trace = train_classifier(clf, ds, sched, cfg);
  REQUIRE(!trace.empty());
  CHECK(trace.back().loss < trace.front().loss);

  // redo from scratch: training is deterministic
  NoisyClassifier clf2(arch, 1);
  auto trace2 = train_classifier(clf2, ds, sched, cfg);
  CHECK(trace2.back().loss == trace.back().loss);

  // near-clean inputs are classified correctly
  Eigen::VectorXd tsmall = Eigen::VectorXd::Constant(ds.size(), 0.05);
  Mat p = clf.classify(ds.instances, tsmall);
  int hits = 0;
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    int pick = p(i, 0) >= p(i, 1) ? 0 : 1;
    if (pick == ds.clean_labels[i]) ++hits;
  }
  CHECK(double(hits) / double(ds.size()) > 0.95);
}

TEST_CASE("trainable transition starts diagonally dominant") {
  TrainableTransition trans(2);
  auto m = trans.realized();
  m.validate();
  CHECK(m.orientation == Orientation::forward);
  const double expect = std::exp(2.0) / (std::exp(2.0) + 1.0);
  for (int i = 0; i < 2; ++i)
    CHECK(m.rows(i, i) == doctest::Approx(expect).epsilon(1e-12));
}
