#include <doctest.h>

#include <functional>
#include <random>

#include "oracles.hpp"
#include "semdvc/autograd.hpp"
#include "semdvc/error.hpp"

using namespace semdvc;
using ag::Matrix;
using ag::Var;

namespace {

using Build = std::function<Var(ag::Binder&)>;

// Reduces a matrix to a scalar with fixed random weights so every entry
// carries a distinct gradient.
Var weigh(ag::Tape& t, Var x) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix l(1, x.rows());
  Matrix r(x.cols(), 1);
  for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = u(rng);
  return ag::matmul(ag::matmul(t.constant(l), x), t.constant(r));
}

double run(ag::ParamStore& p, const Build& build, ag::ParamMap* grads = nullptr) {
  ag::Tape tape(grads != nullptr);
  ag::Binder bind(tape, p, true);
  const Var out = weigh(tape, build(bind));
  if (grads) {
    tape.backward(out);
    *grads = bind.gradients();
  }
  return out.value()(0, 0);
}

void check_op(ag::ParamStore& p, const Build& build) {
  ag::ParamMap grads;
  run(p, build, &grads);
  const auto res = oracle::check_gradients(p, grads, [&] { return run(p, build); }, 50);
  CAPTURE(res.worst_block);
  CHECK(res.max_block_rel < 1e-7);
}

ag::ParamStore store(std::initializer_list<std::pair<const char*, Matrix>> blocks) {
  ag::ParamStore p;
  for (const auto& [n, m] : blocks) p.set(n, m);
  return p;
}

}  // namespace

TEST_CASE("elementwise and linear ops") {
  auto p = store({{"a", Matrix::Random(3, 4)}, {"b", Matrix::Random(4, 2)}, {"c", Matrix::Random(3, 2)},
                  {"r", Matrix::Random(1, 2)}});
  check_op(p, [](ag::Binder& b) {
    return ag::add_row(ag::add(ag::matmul(b("a"), b("b")), ag::scale(b("c"), -1.5)), b("r"));
  });
  check_op(p, [](ag::Binder& b) { return ag::relu(ag::matmul(b("a"), b("b"))); });
}

TEST_CASE("layer norm") {
  auto p = store({{"x", Matrix::Random(4, 5)}, {"g", Matrix::Random(1, 5)}, {"h", Matrix::Random(1, 5)}});
  check_op(p, [](ag::Binder& b) { return ag::layer_norm(b("x"), b("g"), b("h")); });
  ag::Tape t(false);
  const Matrix x = Matrix::Random(3, 6);
  const Matrix y = ag::layer_norm(t.constant(x), t.constant(Matrix::Ones(1, 6)), t.constant(Matrix::Zero(1, 6)))
                       .value();
  CHECK(y.rowwise().mean().cwiseAbs().maxCoeff() < 1e-12);
  CHECK(((y.array().square().rowwise().mean()) - 1.0).abs().maxCoeff() < 1e-4);
}

TEST_CASE("column plumbing and lookups") {
  auto p = store({{"x", Matrix::Random(3, 5)}, {"y", Matrix::Random(3, 2)}, {"e", Matrix::Random(6, 3)}});
  check_op(p, [](ag::Binder& b) { return ag::concat_cols({ag::slice_cols(b("x"), 1, 3), b("y"), b("x")}); });
  check_op(p, [](ag::Binder& b) { return ag::gather_rows(b("e"), {4, 0, 4, 2}); });
  check_op(p, [](ag::Binder& b) { return ag::im2col(b("x"), 3); });
  ag::Tape t(false);
  Matrix x(3, 1);
  x << 1, 2, 3;
  Matrix want(3, 3);
  want << 0, 1, 2, 1, 2, 3, 2, 3, 0;
  CHECK(ag::im2col(t.constant(x), 3).value() == want);
}

TEST_CASE("attention op with and without a mask") {
  auto p = store({{"q", Matrix::Random(3, 4)}, {"k", Matrix::Random(5, 4)}, {"v", Matrix::Random(5, 2)}});
  check_op(p, [](ag::Binder& b) { return ag::attention(b("q"), b("k"), b("v")); });
  const ag::Mask m = ag::causal_mask(3, 5);
  check_op(p, [&m](ag::Binder& b) { return ag::attention(b("q"), b("k"), b("v"), &m); });
  CHECK(m(0, 1));
  CHECK(!m(2, 2));
  ag::Mask blocked = ag::Mask::Constant(3, 5, false);
  blocked.row(1).setConstant(true);
  CHECK_THROWS_AS(ag::softmax_rows(Matrix::Random(3, 5), &blocked), Error);
}

TEST_CASE("label-smoothed KL op and external scalars") {
  auto p = store({{"z", Matrix::Random(4, 6)}});
  check_op(p, [](ag::Binder& b) { return ag::label_smoothed_kl(b("z"), {3, 0, 5, 1}, 0.1, 0); });
  check_op(p, [](ag::Binder& b) {
    Var z = b("z");
    const Matrix& v = z.value();
    return ag::external_scalar(z, v.squaredNorm(), 2.0 * v);
  });
  check_op(p, [](ag::Binder& b) {
    Var z = b("z");
    return ag::sum({ag::label_smoothed_kl(z, {1, 2, 3, 4}, 0.0, 0), ag::label_smoothed_kl(z, {2, 2, 0, 0}, 0.3, 0)});
  });
}

TEST_CASE("dropout is identity at rate zero and scales survivors") {
  std::mt19937_64 rng(3);
  ag::Tape t;
  const Matrix x = Matrix::Ones(20, 20);
  CHECK(ag::dropout(t.constant(x), 0.0, rng).value() == x);
  const Matrix y = ag::dropout(t.constant(x), 0.5, rng).value();
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK((y.data()[i] == 0.0 || y.data()[i] == 2.0));
}

TEST_CASE("adam moves against the gradient") {
  ag::ParamStore p;
  p.set("w", Matrix::Constant(1, 2, 1.0));
  ag::Adam opt({0.1, 0.9, 0.999, 1e-8});
  ag::ParamMap g{{"w", (Matrix(1, 2) << 1.0, -2.0).finished()}};
  opt.step(p, g);
  // First step has magnitude lr after bias correction.
  CHECK(p.at("w")(0, 0) == doctest::Approx(0.9));
  CHECK(p.at("w")(0, 1) == doctest::Approx(1.1));
  CHECK_THROWS_AS(p.at("missing"), Error);
}
