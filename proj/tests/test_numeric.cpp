#include <doctest.h>

#include <cmath>

#include "lindit/ops.hpp"
#include "support/grad_suite.hpp"

using namespace lindit;
using lindit::testing::gradcheck;
using lindit::testing::readout;
using lindit::testing::uniform;

namespace {

MatrixD mat(std::initializer_list<std::initializer_list<double>> rows) {
  MatrixD m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("matmul examples") {
  Tape<double> t(false);
  const MatrixD A = mat({{1, 2}, {3, 4}});
  CHECK(matmul(t.constant(MatrixD::Identity(2, 2)), t.constant(A)).value() == A);
  CHECK(matmul(t.constant(A), t.constant(mat({{1}, {1}}))).value() == mat({{3}, {7}}));
}

TEST_CASE("matmul shape error names both shapes") {
  Tape<double> t(false);
  try {
    matmul(t.constant(MatrixD::Zero(2, 3)), t.constant(MatrixD::Zero(2, 3)));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(a b) is ones b^T") {
  Rng rng(3);
  const MatrixD a = uniform(5, 7, rng), b = uniform(7, 3, rng);
  Tape<double> t;
  auto va = t.parameter(a);
  auto vb = t.parameter(b);
  t.backward(sum(matmul(va, vb)));
  const MatrixD expect = MatrixD::Ones(5, 3) * b.transpose();
  CHECK((t.grad(va) - expect).cwiseAbs().maxCoeff() < 1e-12);
  const auto res = gradcheck([](Tape<double>&, const std::vector<Var<double>>& v) { return sum(matmul(v[0], v[1])); },
                             {a, b});
  CHECK(res.max_rel < 1e-6);
}

TEST_CASE("rms_norm examples") {
  Tape<double> t(false);
  const MatrixD y = rms_norm(t.constant(mat({{3, 4}})), t.constant(mat({{1, 1}}))).value();
  CHECK(y(0, 0) == doctest::Approx(3.0 / std::sqrt(12.5 + 1e-6)).epsilon(1e-12));
  CHECK(y(0, 1) == doctest::Approx(4.0 / std::sqrt(12.5 + 1e-6)).epsilon(1e-12));
  CHECK(y(0, 0) == doctest::Approx(0.8485).epsilon(1e-4));
  CHECK(y(0, 1) == doctest::Approx(1.1314).epsilon(1e-4));

  CHECK(rms_norm(t.constant(MatrixD::Zero(2, 4)), t.constant(MatrixD::Ones(1, 4))).value().isZero(0.0));

  Rng rng(11);
  const MatrixD x = uniform(6, 8, rng);
  const MatrixD g = MatrixD::Ones(1, 8);
  const MatrixD a = rms_norm(t.constant(x), t.constant(g)).value();
  const MatrixD b = rms_norm(t.constant(MatrixD(x * 1e4)), t.constant(g)).value();
  CHECK(((a - b).cwiseAbs().array() / a.cwiseAbs().array().max(1e-12)).maxCoeff() < 1e-5);
}

TEST_CASE("rms_norm output RMS with unit gain") {
  Rng rng(5);
  Tape<double> t(false);
  for (double s : {1e-3, 1e-2, 0.2, 1.0, 100.0}) {
    const MatrixD x = uniform(10, 16, rng) * s;
    const MatrixD y = rms_norm(t.constant(x), t.constant(MatrixD::Ones(1, 16))).value();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double rms_in = std::sqrt(x.row(r).squaredNorm() / 16.0);
      const double rms_out = std::sqrt(y.row(r).squaredNorm() / 16.0);
      // Exact at every scale: rms_out = rms_in / sqrt(rms_in^2 + eps).
      CHECK(rms_out == doctest::Approx(rms_in / std::sqrt(rms_in * rms_in + kNormEps)).epsilon(1e-12));
      // Unit within 1e-5 once eps / (2 rms^2) < 1e-5, i.e. rms above ~0.224.
      if (rms_in >= 0.25) CHECK(std::abs(rms_out - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("rms_norm shape errors") {
  Tape<double> t(false);
  CHECK_THROWS_AS(rms_norm(t.constant(MatrixD::Zero(2, 3)), t.constant(MatrixD::Ones(1, 4))), ShapeError);
  CHECK_THROWS_AS(rms_norm(t.constant(MatrixD::Zero(2, 0)), t.constant(MatrixD::Ones(1, 0))), ShapeError);
}

TEST_CASE("elementwise examples") {
  Tape<double> t(false);
  CHECK(relu(t.constant(mat({{-1, 0, 2}}))).value() == mat({{0, 0, 2}}));
  CHECK(softmax_rows(t.constant(mat({{0, 0}}))).value() == mat({{0.5, 0.5}}));
  Rng rng(1);
  const MatrixD x = uniform(4, 5, rng);
  CHECK(mse(t.constant(x), t.constant(x)).value()(0, 0) == 0.0);
  CHECK_THROWS_AS(add(t.constant(MatrixD::Zero(2, 2)), t.constant(MatrixD::Zero(2, 3))), ShapeError);
  CHECK_THROWS_AS(mul(t.constant(MatrixD::Zero(2, 2)), t.constant(MatrixD::Zero(3, 2))), ShapeError);
  CHECK_THROWS_AS(mse(t.constant(MatrixD::Zero(2, 2)), t.constant(MatrixD::Zero(3, 2))), ShapeError);
}

TEST_CASE("backward examples") {
  Rng rng(2);
  const MatrixD x = uniform(1, 6, rng);
  {
    Tape<double> t;
    auto w = t.parameter(uniform(1, 6, rng));
    t.backward(sum(mul(w, t.constant(x))));
    CHECK(t.grad(w) == x);
  }
  {
    Tape<double> t;
    const MatrixD w0 = uniform(3, 4, rng);
    auto w = t.parameter(w0);
    t.backward(mse(w, t.constant(MatrixD::Zero(3, 4))));
    CHECK((t.grad(w) - 2.0 * w0 / 12.0).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("backward contract errors and untouched parameters") {
  Tape<double> t;
  auto a = t.parameter(MatrixD::Ones(2, 2));
  auto unused = t.parameter(MatrixD::Ones(3, 1));
  CHECK_THROWS_AS(t.backward(a), ContractError);
  t.backward(sum(a));
  CHECK(t.grad(unused) == MatrixD::Zero(3, 1));

  Tape<double> off(false);
  auto b = off.parameter(MatrixD::Ones(1, 1));
  CHECK_THROWS_AS(off.backward(b), ContractError);
}

TEST_CASE("gradient suite: every differentiable op and a full block") {
  for (const auto& e : lindit::testing::run_gradient_suite(20)) {
    INFO(e.name << " worst elementwise " << e.worst_elem_rel << " worst abs " << e.worst_abs);
    CHECK(e.draws == 20);
    CHECK(e.worst_rel < 1e-4);
  }
}

TEST_CASE("depthwise_conv3x3 against a direct stencil") {
  Rng rng(4);
  const MatrixD x = uniform(2 * 12, 3, rng), k = uniform(9, 3, rng);
  Tape<double> t(false);
  const MatrixD y = depthwise_conv3x3(t.constant(x), t.constant(k), 3, 4).value();
  for (int s = 0; s < 2; ++s) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) {
        for (int ch = 0; ch < 3; ++ch) {
          double acc = 0.0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              if (r + dy < 0 || r + dy >= 3 || c + dx < 0 || c + dx >= 4) continue;
              acc += k((dy + 1) * 3 + dx + 1, ch) * x(s * 12 + (r + dy) * 4 + c + dx, ch);
            }
          }
          CHECK(y(s * 12 + r * 4 + c, ch) == doctest::Approx(acc).epsilon(1e-14));
        }
      }
    }
  }
  MatrixD centre = MatrixD::Zero(9, 3);
  centre.row(4).setOnes();
  CHECK(depthwise_conv3x3(t.constant(x), t.constant(centre), 3, 4).value() == x);
  CHECK_THROWS_AS(depthwise_conv3x3(t.constant(x), t.constant(MatrixD::Zero(8, 3)), 3, 4), ShapeError);
  CHECK_THROWS_AS(depthwise_conv3x3(t.constant(x), t.constant(k), 5, 5), ShapeError);
}

TEST_CASE("embedding rejects out-of-range ids") {
  Tape<double> t(false);
  const std::vector<int> ids{0, 3};
  CHECK_THROWS_AS(embedding(t.constant(MatrixD::Zero(3, 2)), ids), InputError);
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
  Rng r1(9), r2(9);
  const MatrixD a = uniform(8, 8, r1), b = uniform(8, 8, r2);
  Tape<double> t(false);
  const MatrixD x = linear_attention(t.constant(a), t.constant(a), t.constant(a), 4).value();
  const MatrixD y = linear_attention(t.constant(b), t.constant(b), t.constant(b), 4).value();
  CHECK(std::memcmp(x.data(), y.data(), sizeof(double) * x.size()) == 0);
}
