#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lindit/training.hpp"

namespace lindit {

// Block importance: BI_i = 1 - mean cos(X_i, X_{i+1}) over calibration samples
// and timesteps, with each X the flattened (tokens x d) activation of one sample.
struct BlockImportanceReport {
  std::vector<double> scores;
  // similarities[i][k]: cosine for block i on the k-th (prompt, timestep) sample.
  std::vector<std::vector<double>> similarities;
  int prompt_count = 0;
  std::vector<int> timesteps;
  int excluded = 0;
  std::vector<std::string> warnings;
};

// Streams per-block cosine similarities into a report.
class BlockImportanceAccumulator {
 public:
  explicit BlockImportanceAccumulator(int depth) : sims_(static_cast<std::size_t>(depth)) {}

  // block_inputs: X_0..X_depth, each (batch * tokens) x d.
  template <typename Scalar>
  void add(const std::vector<Matrix<Scalar>>& block_inputs, Eigen::Index tokens) {
    if (block_inputs.size() != sims_.size() + 1) {
      throw ContractError("block importance: expected " + std::to_string(sims_.size() + 1) + " activations, got " +
                          std::to_string(block_inputs.size()));
    }
    const Eigen::Index batch = block_inputs.front().rows() / tokens;
    for (std::size_t i = 0; i < sims_.size(); ++i) {
      for (Eigen::Index b = 0; b < batch; ++b) {
        const auto x = block_inputs[i].middleRows(b * tokens, tokens);
        const auto y = block_inputs[i + 1].middleRows(b * tokens, tokens);
        const double nx = x.template cast<double>().norm();
        const double ny = y.template cast<double>().norm();
        if (nx == 0.0 || ny == 0.0) {
          ++excluded_;
          continue;
        }
        const double dot = x.template cast<double>().cwiseProduct(y.template cast<double>()).sum();
        sims_[i].push_back(std::clamp(dot / (nx * ny), -1.0, 1.0));
      }
    }
  }

  BlockImportanceReport finish() const {
    BlockImportanceReport rep;
    rep.similarities = sims_;
    rep.excluded = excluded_;
    if (excluded_ > 0) {
      rep.warnings.push_back(std::to_string(excluded_) + " zero-norm activation(s) excluded from block importance");
    }
    for (const auto& s : sims_) {
      if (s.empty()) throw InputError("block importance: no usable calibration samples");
      rep.scores.push_back(1.0 - std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size()));
    }
    return rep;
  }

 private:
  std::vector<std::vector<double>> sims_;
  int excluded_ = 0;
};

// `count` timesteps spread evenly over the sampler's schedule for `steps` steps.
inline std::vector<int> probe_timesteps(int T, int steps, int count) {
  const auto ts = sampling_timesteps(T, steps);
  std::vector<int> out;
  for (int i = 0; i < count; ++i) {
    const auto idx = static_cast<std::size_t>(std::lround(static_cast<double>(i) * (ts.size() - 1) / std::max(count - 1, 1)));
    out.push_back(ts[idx]);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Collects block inputs along real sampling trajectories (one per calibration
// prompt, seeded per prompt) at the given timesteps and averages the similarities.
template <typename Scalar>
BlockImportanceReport compute_block_importance(const LinearDiT<Scalar>& model,
                                               const std::vector<std::vector<int>>& calibration_prompts,
                                               const std::vector<int>& timesteps, std::uint64_t seed,
                                               int steps = 20) {
  if (calibration_prompts.empty()) throw InputError("block importance: empty calibration set");
  if (timesteps.empty()) throw InputError("block importance: no timesteps");
  BlockImportanceAccumulator acc(model.depth());
  SampleRequest req;
  req.prompts = calibration_prompts;
  req.steps = steps;
  for (std::size_t i = 0; i < calibration_prompts.size(); ++i) req.seeds.push_back(derive_seed(seed, {i}));
  sample_batch<Scalar>(model, req, timesteps, [&](int, const ForwardTrace<Scalar>& trace) {
    acc.add(trace.block_inputs, model.config.tokens());
  });
  BlockImportanceReport rep = acc.finish();
  rep.prompt_count = static_cast<int>(calibration_prompts.size());
  rep.timesteps = timesteps;
  return rep;
}

struct PruneSpec {
  int target_depth = 1;
};

// Indices of the blocks that survive pruning, ascending. Lowest scores are
// dropped first; among equal scores the deeper block goes first.
inline std::vector<int> blocks_to_keep(const std::vector<double>& scores, int target_depth) {
  const int depth = static_cast<int>(scores.size());
  if (target_depth < 1) throw PlanError("prune: target depth must be >= 1");
  if (target_depth >= depth) {
    throw PlanError("prune: target depth " + std::to_string(target_depth) + " must be below current depth " +
                    std::to_string(depth));
  }
  std::vector<int> order(static_cast<std::size_t>(depth));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a > b;
  });
  std::vector<int> keep(order.begin() + (depth - target_depth), order.end());
  std::sort(keep.begin(), keep.end());
  return keep;
}

template <typename Scalar>
LinearDiT<Scalar> prune(const LinearDiT<Scalar>& model, const BlockImportanceReport& report, const PruneSpec& spec) {
  if (static_cast<int>(report.scores.size()) != model.depth()) {
    throw ContractError("prune: report has " + std::to_string(report.scores.size()) + " scores for a " +
                        std::to_string(model.depth()) + "-block model");
  }
  const auto keep = blocks_to_keep(report.scores, spec.target_depth);
  LinearDiT<Scalar> out = model;
  out.params.blocks.clear();
  for (int i : keep) out.params.blocks.push_back(model.params.blocks[i]);
  out.config.depth = spec.target_depth;
  return out;
}

struct FinetuneResult {
  LinearDiT<float> model;
  std::vector<double> losses;
};

// Short recovery fine-tune with the pre-training diffusion loss and a fresh optimizer.
inline FinetuneResult finetune_recover(const LinearDiT<float>& model, const BatchStream& stream, int steps,
                                       const CameConfig& cfg, std::uint64_t first_step = 0) {
  if (steps < 0) throw InputError("finetune: steps must be >= 0");
  FinetuneResult res{model, {}};
  CameOptimizer opt(res.model.params, cfg);
  res.losses = train_steps(res.model, opt, stream, first_step, steps);
  return res;
}

}  // namespace lindit
