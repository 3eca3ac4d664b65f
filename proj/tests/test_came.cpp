#include <doctest.h>

#include <cmath>
#include <limits>

#include "lindit/came8bit.hpp"
#include "lindit/ops.hpp"

using namespace lindit;

namespace {

float ulp(float x) {
  const float a = std::abs(x);
  return std::nextafter(a, std::numeric_limits<float>::infinity()) - a;
}

std::vector<float> random_block(Rng& rng, int kind) {
  const int n = 2048;
  std::vector<float> x(n);
  std::uniform_real_distribution<float> u(-10.f, 10.f);
  switch (kind) {
    case 0:
      for (auto& v : x) v = u(rng);
      break;
    case 1: {  // near-constant: a few ulps around a random centre
      const float c = u(rng);
      std::uniform_int_distribution<int> k(0, 4);
      for (auto& v : x) {
        v = c;
        for (int i = k(rng); i > 0; --i) v = std::nextafter(v, 11.f);
      }
      break;
    }
    default: {  // mostly constant with a single outlier
      const float c = u(rng);
      for (auto& v : x) v = c;
      x[std::uniform_int_distribution<int>(0, n - 1)(rng)] = u(rng);
    }
  }
  return x;
}

// Scalar reference of the unfactored recurrences: 32-bit state, double arithmetic.
struct ScalarCame {
  float m = 0.f, v = 0.f, s = 0.f;
  float step(float theta, float g, const CameConfig& c) {
    const double gd = g;
    v = static_cast<float>(c.beta2 * v + (1.0 - c.beta2) * (gd * gd + c.eps1));
    double u = gd / std::sqrt(static_cast<double>(v));
    u /= std::max(1.0, std::abs(u) / c.clip_d);
    const double md = c.beta1 * m + (1.0 - c.beta1) * u;
    m = static_cast<float>(md);
    s = static_cast<float>(c.beta3 * s + (1.0 - c.beta3) * (u - md) * (u - md));
    return static_cast<float>(theta - c.lr * m / std::sqrt(s + c.eps2));
  }
};

}  // namespace

TEST_CASE("quantize_block examples") {
  const std::vector<float> x{0.0f, 0.5f, 1.0f};
  const auto q = quantize_block(x);
  CHECK(q.codes == std::vector<std::uint8_t>{0, 128, 255});
  CHECK(q.lo == 0.0f);
  CHECK(q.hi == 1.0f);

  const std::vector<float> c(17, 3.25f);
  const auto qc = quantize_block(c);
  CHECK(std::all_of(qc.codes.begin(), qc.codes.end(), [](auto v) { return v == 0; }));
  CHECK(qc.lo == 3.25f);
  CHECK(qc.hi == 3.25f);
  for (float v : dequantize_block(qc)) CHECK(v == 3.25f);
}

TEST_CASE("dequantize_block examples") {
  const QuantizedBlock q{{0, 255}, -1.f, 1.f};
  CHECK(dequantize_block(q) == std::vector<float>{-1.f, 1.f});
}

TEST_CASE("quantize_block rejects non-finite input") {
  CHECK_THROWS_AS(quantize_block(std::vector<float>{1.f, std::nanf("")}), NumericError);
  CHECK_THROWS_AS(quantize_block(std::vector<float>{std::numeric_limits<float>::infinity()}), NumericError);
  CHECK_THROWS_AS(quantize_block(std::vector<float>{}), InputError);
}

TEST_CASE("quantizer error bound and idempotence over 1000 blocks") {
  Rng rng(1);
  for (int b = 0; b < 1000; ++b) {
    const auto x = random_block(rng, b % 3);
    const auto q = quantize_block(x);
    CHECK(q.lo <= q.hi);
    const auto xh = dequantize_block(q);
    const double bound = (static_cast<double>(q.hi) - q.lo) / 510.0;
    bool ok = true;
    for (std::size_t i = 0; i < x.size(); ++i) {
      ok = ok && std::abs(static_cast<double>(xh[i]) - x[i]) <= bound + ulp(x[i]);
      ok = ok && xh[i] >= q.lo && xh[i] <= q.hi;
    }
    CHECK(ok);
    const auto q2 = quantize_block(xh);
    CHECK(q2.codes == q.codes);
    CHECK(q2 == q);
    CHECK(dequantize_block(q2) == xh);
  }
}

TEST_CASE("state layout follows the strict >16K threshold") {
  const CameConfig cfg;
  const auto big = make_state("w", 2048, 64, ParamKind::Matrix, cfg);
  CHECK(big.mode == StateMode::Quantized);
  CHECK(big.m_blocks.size() == 64);
  CHECK(big.r.size() == 2048);
  CHECK(big.c.size() == 64);
  const auto edge = make_state("w", 2048, 8, ParamKind::Matrix, cfg);
  CHECK(edge.elements() == 16384);
  CHECK(edge.mode == StateMode::FullPrecision);
  CHECK(edge.factored);
  const auto vec = make_state("g", 1, 40000, ParamKind::Vector, cfg);
  CHECK(vec.mode == StateMode::FullPrecision);
  CHECK_FALSE(vec.factored);
  const auto emb = make_state("e", 300, 100, ParamKind::Embedding, cfg);
  CHECK_FALSE(emb.factored);
  CHECK(emb.mode == StateMode::FullPrecision);
  CameConfig off = cfg;
  off.quantize = false;
  CHECK(make_state("w", 2048, 64, ParamKind::Matrix, off).mode == StateMode::FullPrecision);
}

TEST_CASE("zero gradient is a fixed point") {
  CameConfig cfg;
  cfg.lr = 0.1;
  Rng rng(2);
  for (auto [r, c] : {std::pair{1, 1}, std::pair{4, 7}, std::pair{300, 64}}) {
    auto st = make_state("p", r, c, ParamKind::Matrix, cfg);
    MatrixF theta = normal_matrix<float>(r, c, 1.0, rng);
    const MatrixF before = theta;
    for (int i = 0; i < 10; ++i) came_step(st, theta, MatrixF::Zero(r, c), cfg);
    CHECK(theta == before);
  }
}

TEST_CASE("one-dimensional quadratic converges and matches a scalar 32-bit reference") {
  CameConfig cfg;
  cfg.lr = 0.1;
  auto st = make_state("theta", 1, 1, ParamKind::Vector, cfg);
  MatrixF theta = MatrixF::Constant(1, 1, 1.0f);
  ScalarCame ref;
  float ref_theta = 1.0f;
  std::vector<double> losses{0.5};
  for (int i = 0; i < 200; ++i) {
    const MatrixF g = theta;
    came_step(st, theta, g, cfg);
    ref_theta = ref.step(ref_theta, ref_theta, cfg);
    CHECK(std::abs(theta(0, 0) - ref_theta) <= 1e-6);
    losses.push_back(0.5 * theta(0, 0) * theta(0, 0));
  }
  CHECK(std::abs(theta(0, 0)) < 0.05);
  // Loss after every step from the 5th on stays below the starting loss.
  for (std::size_t i = 5; i < losses.size(); ++i) CHECK(losses[i] < losses[0]);
}

TEST_CASE("factored statistics reproduce an exactly rank-1 second moment") {
  CameConfig cfg;
  auto st = make_state("w", 6, 5, ParamKind::Matrix, cfg);
  Eigen::VectorXd a(6), b(5);
  a << 1, 2, 0.5, 3, 1.5, 0.25;
  b << 2, 1, 4, 0.5, 1;
  MatrixF theta = MatrixF::Zero(6, 5);
  Eigen::ArrayXXd running = Eigen::ArrayXXd::Zero(6, 5);
  for (int step = 0; step < 3; ++step) {
    const double s = 1.0 + step;
    const MatrixF g = (s * a * b.transpose()).cast<float>();
    came_step(st, theta, g, cfg);
    running = cfg.beta2 * running + (1 - cfg.beta2) * (g.cast<double>().array().square() + cfg.eps1);
    const Eigen::RowVectorXd r = st.r.cast<double>(), c = st.c.cast<double>();
    const Eigen::ArrayXXd v = (r.transpose() * c).array() / r.mean();
    CHECK(((v - running).abs() / running).maxCoeff() < 1e-5);
  }
  CHECK((st.r.array() >= 0).all());
  CHECK((st.c.array() >= 0).all());
  CHECK((st.R.array() >= 0).all());
  CHECK((st.C.array() >= 0).all());
}

TEST_CASE("came_step errors") {
  CameConfig cfg;
  auto st = make_state("w", 3, 4, ParamKind::Matrix, cfg);
  MatrixF theta = MatrixF::Zero(3, 4);
  MatrixF wrong = MatrixF::Zero(4, 3);
  CHECK_THROWS_AS(came_step(st, wrong, wrong, cfg), ContractError);
  MatrixF g = MatrixF::Zero(3, 4);
  g(1, 1) = std::nanf("");
  try {
    came_step(st, theta, g, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("w") != std::string::npos);
  }
}

TEST_CASE("memory report") {
  const CameConfig cfg;
  std::vector<ParamState> states{make_state("big", 2240, 5600, ParamKind::Matrix, cfg)};
  const auto rep = memory_report(states);
  CHECK(rep.bytes_saved == 301056000ull);
  const double n = 2240.0 * 5600.0;
  const double predicted = n * (1.0 + 16.0 / 2048.0);
  CHECK(std::abs(states[0].first_moment_bytes() - predicted) / predicted < 0.01);
  CHECK(states[0].first_moment_bytes() < n * 4);

  std::vector<ParamState> small{make_state("s", 64, 64, ParamKind::Matrix, cfg)};
  CHECK(memory_report(small).bytes_saved == 0);
  CHECK(memory_report(small).bytes_used == 64 * 64 * 4 + 4 * (64 + 64) * 4 / 2);
}

TEST_CASE("quantized first-moment bytes stay below full precision while training") {
  CameConfig cfg;
  cfg.lr = 1e-3;
  auto st = make_state("w", 256, 128, ParamKind::Matrix, cfg);
  REQUIRE(st.mode == StateMode::Quantized);
  Rng rng(3);
  MatrixF theta = normal_matrix<float>(256, 128, 1.0, rng);
  for (int i = 0; i < 5; ++i) {
    came_step(st, theta, normal_matrix<float>(256, 128, 1.0, rng), cfg);
    CHECK(st.first_moment_bytes() < static_cast<std::size_t>(st.elements()) * 4);
  }
}
