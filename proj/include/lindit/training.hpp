#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "lindit/came8bit.hpp"
#include "lindit/diffusion.hpp"

namespace lindit {

// Noise-prediction MSE of `model` on `batch`. When grads is non-null it receives
// d(loss)/d(param) for every parameter, zeros for parameters the loss does not reach.
template <typename Scalar>
double diffusion_loss(const LinearDiT<Scalar>& model, const NoisedBatch& batch, ModelParams<Scalar>* grads = nullptr) {
  Tape<Scalar> tape(grads != nullptr);
  const auto vars = bind(tape, model.params);
  const Matrix<Scalar> x = patchify(model.config, Matrix<Scalar>(batch.x_t.template cast<Scalar>()));
  const Matrix<Scalar> eps = patchify(model.config, Matrix<Scalar>(batch.eps.template cast<Scalar>()));
  Var<Scalar> pred = forward(tape, vars, model.config, x, batch.cond);
  Var<Scalar> loss = mse(pred, tape.constant(eps));
  if (grads != nullptr) {
    tape.backward(loss);
    grads->blocks.resize(vars.blocks.size());
    auto gs = named_slots(*grads);
    auto vs = named_slots(vars);
    for (std::size_t i = 0; i < vs.size(); ++i) *gs[i].slot = tape.grad(*vs[i].slot);
  }
  return static_cast<double>(loss.value()(0, 0));
}

using BatchStream = std::function<NoisedBatch(std::uint64_t step)>;

// Invoked after each optimizer step with (global step index, loss before the update).
using StepCallback = std::function<void(std::uint64_t step, double loss)>;

// Runs `steps` optimizer updates, drawing batch `first_step + k` for update k.
// Returns the per-step training losses. A non-finite loss aborts with NumericError.
inline std::vector<double> train_steps(LinearDiT<float>& model, CameOptimizer& opt, const BatchStream& stream,
                                       std::uint64_t first_step, int steps, const StepCallback& on_step = {}) {
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(std::max(steps, 0)));
  ModelParams<float> grads;
  for (int k = 0; k < steps; ++k) {
    const std::uint64_t step = first_step + static_cast<std::uint64_t>(k);
    const NoisedBatch batch = stream(step);
    const double loss = diffusion_loss(model, batch, &grads);
    if (!std::isfinite(loss)) {
      throw NumericError("training diverged: loss " + std::to_string(loss) + " at step " + std::to_string(step));
    }
    opt.step(model.params, grads);
    losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  return losses;
}

}  // namespace lindit
