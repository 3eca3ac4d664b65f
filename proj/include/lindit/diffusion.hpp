#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "lindit/model.hpp"

namespace lindit {

// Discrete cosine noise schedule over T training timesteps (t = 0 is the least noisy).
class CosineSchedule {
 public:
  explicit CosineSchedule(int timesteps, double offset = 0.008) {
    if (timesteps < 1) throw InputError("CosineSchedule: timesteps must be >= 1");
    auto f = [&](double t) {
      const double c = std::cos((t / timesteps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    alpha_bar_.resize(timesteps);
    double prod = 1.0;
    for (int t = 0; t < timesteps; ++t) {
      const double beta = std::min(1.0 - f(t + 1) / f(t), 0.999);
      prod *= 1.0 - beta;
      alpha_bar_[t] = prod;
    }
  }

  int timesteps() const { return static_cast<int>(alpha_bar_.size()); }

  double alpha_bar(int t) const {
    if (t < 0 || t >= timesteps()) {
      throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(timesteps()) + ")");
    }
    return alpha_bar_[t];
  }

 private:
  std::vector<double> alpha_bar_;
};

// Grids live in [0, 1]; diffusion runs on x0 = 2 * grid - 1.
template <typename Scalar>
Matrix<Scalar> to_diffusion_space(const Matrix<Scalar>& grids) {
  return (grids.array() * Scalar(2) - Scalar(1)).matrix();
}

template <typename Scalar>
Matrix<Scalar> to_grid_space(const Matrix<Scalar>& x) {
  return ((x.array() + Scalar(1)) * Scalar(0.5)).cwiseMax(Scalar(0)).cwiseMin(Scalar(1)).matrix();
}

// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps, row by row.
template <typename Scalar>
Matrix<Scalar> add_noise(const CosineSchedule& schedule, const Matrix<Scalar>& x0, const Matrix<Scalar>& eps,
                         std::span<const int> t) {
  require_same_shape(x0, eps, "add_noise");
  if (static_cast<Eigen::Index>(t.size()) != x0.rows()) throw ShapeError("add_noise: one timestep per row required");
  Matrix<Scalar> out(x0.rows(), x0.cols());
  for (Eigen::Index b = 0; b < x0.rows(); ++b) {
    const double ab = schedule.alpha_bar(t[b]);
    out.row(b) = x0.row(b) * static_cast<Scalar>(std::sqrt(ab)) + eps.row(b) * static_cast<Scalar>(std::sqrt(1.0 - ab));
  }
  return out;
}

// Evenly spaced descending subsequence of [0, T) with `steps` entries; always ends at 0.
inline std::vector<int> sampling_timesteps(int T, int steps) {
  if (steps < 1) throw InputError("sampling steps must be >= 1, got " + std::to_string(steps));
  if (steps > T) {
    throw InputError("sampling steps " + std::to_string(steps) + " exceed the " + std::to_string(T) +
                     " training timesteps");
  }
  std::vector<int> ts;
  if (steps == 1) {
    ts.push_back(T - 1);
  } else {
    for (int i = 0; i < steps; ++i) {
      ts.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (T - 1) / (steps - 1))));
    }
  }
  std::reverse(ts.begin(), ts.end());
  return ts;
}

// A batch of noised inputs with their noise targets, in diffusion space (batch x H*W*C).
struct NoisedBatch {
  MatrixF x_t;
  MatrixF eps;
  std::vector<int> t;
  Conditioning cond;
};

// Called after the model is evaluated at a traced timestep.
template <typename Scalar>
using TraceCallback = std::function<void(int timestep, const ForwardTrace<Scalar>&)>;

struct SampleRequest {
  std::vector<std::vector<int>> prompts;  // token ids per sample
  std::vector<std::uint64_t> seeds;       // one per sample
  int steps = 20;
};

// Ancestral DDPM sampling over a respaced cosine schedule, from pure noise.
// Each sample draws all of its noise from its own seed. Returns grids in [0,1]
// as (batch x H*W*C).
template <typename Scalar>
Matrix<Scalar> sample_batch(const LinearDiT<Scalar>& model, const SampleRequest& req,
                            std::span<const int> traced_timesteps = {}, const TraceCallback<Scalar>& on_trace = {}) {
  const ModelConfig& cfg = model.config;
  if (req.prompts.size() != req.seeds.size() || req.prompts.empty()) {
    throw InputError("sample: need one seed per prompt and at least one prompt");
  }
  std::vector<int> ts = sampling_timesteps(cfg.timesteps, req.steps);
  if (!traced_timesteps.empty()) {
    ts.insert(ts.end(), traced_timesteps.begin(), traced_timesteps.end());
    std::sort(ts.begin(), ts.end(), std::greater<>());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    for (int t : ts) {
      if (t < 0 || t >= cfg.timesteps) throw InputError("sample: traced timestep outside schedule");
    }
  }
  const CosineSchedule schedule(cfg.timesteps);
  const Eigen::Index batch = static_cast<Eigen::Index>(req.prompts.size());
  std::vector<Rng> rngs;
  for (auto s : req.seeds) rngs.emplace_back(derive_seed(s, {0x5a3b1e}));
  auto draw = [&](Matrix<Scalar>& z) {
    for (Eigen::Index b = 0; b < batch; ++b) {
      std::normal_distribution<double> nd(0.0, 1.0);
      for (Eigen::Index j = 0; j < z.cols(); ++j) z(b, j) = static_cast<Scalar>(nd(rngs[b]));
    }
  };
  Matrix<Scalar> x(batch, cfg.grid_size());
  draw(x);
  Matrix<Scalar> z(batch, cfg.grid_size());

  Conditioning cond;
  for (const auto& p : req.prompts) cond.add(p, 0.0);

  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    std::fill(cond.timesteps.begin(), cond.timesteps.end(), static_cast<double>(t));
    const bool traced = std::find(traced_timesteps.begin(), traced_timesteps.end(), t) != traced_timesteps.end();
    ForwardTrace<Scalar> trace;
    trace.record_block_inputs = traced;
    const Matrix<Scalar> eps = predict_noise(model, x, cond, traced ? &trace : nullptr);
    if (traced && on_trace) on_trace(t, trace);

    const double ab = schedule.alpha_bar(t);
    const double ab_prev = (i + 1 < ts.size()) ? schedule.alpha_bar(ts[i + 1]) : 1.0;
    Matrix<Scalar> x0 = ((x - eps * static_cast<Scalar>(std::sqrt(1.0 - ab))) / static_cast<Scalar>(std::sqrt(ab)))
                            .cwiseMax(Scalar(-1))
                            .cwiseMin(Scalar(1));
    if (i + 1 == ts.size()) {
      x = x0;
      break;
    }
    const double alpha = ab / ab_prev;
    const double beta = 1.0 - alpha;
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
    const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
    draw(z);
    x = x0 * static_cast<Scalar>(c0) + x * static_cast<Scalar>(ct) + z * static_cast<Scalar>(std::sqrt(var));
  }
  return to_grid_space(x);
}

// Single-sample convenience wrapper.
template <typename Scalar>
Matrix<Scalar> sample(const LinearDiT<Scalar>& model, std::span<const int> prompt, int steps, std::uint64_t seed) {
  SampleRequest req;
  req.prompts.emplace_back(prompt.begin(), prompt.end());
  req.seeds.push_back(seed);
  req.steps = steps;
  return sample_batch(model, req);
}

}  // namespace lindit
