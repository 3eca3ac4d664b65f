#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lindit/model.hpp"

namespace lindit {

enum class GrowthKind { PartialPreservation, CyclicReplication, BlockReplication };

struct GrowthStrategy {
  GrowthKind kind = GrowthKind::PartialPreservation;
  double sigma = 0.02;  // PartialPreservation only

  static GrowthStrategy partial(double sigma = 0.02) { return {GrowthKind::PartialPreservation, sigma}; }
  static GrowthStrategy cyclic() { return {GrowthKind::CyclicReplication, 0.0}; }
  static GrowthStrategy block() { return {GrowthKind::BlockReplication, 0.0}; }
};

std::string to_string(GrowthKind kind);
GrowthKind parse_growth_kind(const std::string& name);  // "partial" | "cyclic" | "block"

struct GrowthPlan {
  int base_depth = 0;
  int target_depth = 0;
  int drop_last = 2;
  GrowthStrategy strategy;
  bool identity_init = true;

  // Number of base blocks carried over unchanged by PartialPreservation.
  int preserved() const { return strategy.kind == GrowthKind::PartialPreservation ? base_depth - drop_last : base_depth; }

  void validate() const {
    if (base_depth < 1) throw PlanError("growth: base depth must be >= 1");
    if (drop_last < 0 || drop_last >= base_depth) {
      throw PlanError("growth: drop_last must lie in [0, base_depth), got " + std::to_string(drop_last));
    }
    if (target_depth <= preserved()) {
      throw PlanError("growth: target depth " + std::to_string(target_depth) + " does not exceed the " +
                      std::to_string(preserved()) + " preserved blocks");
    }
    if (strategy.kind == GrowthKind::PartialPreservation && !(strategy.sigma > 0.0)) {
      throw PlanError("growth: sigma must be > 0");
    }
    if (strategy.kind == GrowthKind::BlockReplication && target_depth % base_depth != 0) {
      throw PlanError("growth: block replication needs target depth to be a multiple of " +
                      std::to_string(base_depth));
    }
  }
};

// Expands base to plan.target_depth blocks. Embeddings and head are copied from base.
//  - PartialPreservation: blocks [0, N - drop_last) copied; the rest drawn from
//    N(0, sigma^2) with unit norm gains, output projections zeroed if identity_init.
//  - CyclicReplication: block i copies base block i mod N (drop_last ignored).
//  - BlockReplication: block r*i + j copies base block i, r = target / N.
template <typename Scalar>
LinearDiT<Scalar> grow(const LinearDiT<Scalar>& base, const GrowthPlan& plan, std::uint64_t seed,
                       std::vector<std::string>* warnings = nullptr) {
  plan.validate();
  const int n = base.depth();
  if (plan.base_depth != n) {
    throw PlanError("growth: plan base depth " + std::to_string(plan.base_depth) + " != model depth " +
                    std::to_string(n));
  }
  LinearDiT<Scalar> out = base;
  out.config.depth = plan.target_depth;
  auto& blocks = out.params.blocks;
  blocks.clear();
  const auto& src = base.params.blocks;
  switch (plan.strategy.kind) {
    case GrowthKind::PartialPreservation: {
      Rng rng(derive_seed(seed, {0x67c0}));
      for (int i = 0; i < plan.preserved(); ++i) blocks.push_back(src[i]);
      while (static_cast<int>(blocks.size()) < plan.target_depth) {
        BlockParams<Scalar> b = random_block<Scalar>(out.config, plan.strategy.sigma, rng);
        if (plan.identity_init) zero_output_projections(b);
        blocks.push_back(std::move(b));
      }
      break;
    }
    case GrowthKind::CyclicReplication:
      if (plan.drop_last != 0 && warnings != nullptr) {
        warnings->push_back("cyclic replication ignores drop_last=" + std::to_string(plan.drop_last));
      }
      for (int i = 0; i < plan.target_depth; ++i) blocks.push_back(src[i % n]);
      break;
    case GrowthKind::BlockReplication: {
      if (plan.drop_last != 0 && warnings != nullptr) {
        warnings->push_back("block replication ignores drop_last=" + std::to_string(plan.drop_last));
      }
      const int r = plan.target_depth / n;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < r; ++j) blocks.push_back(src[i]);
      }
      break;
    }
  }
  return out;
}

// Largest |grown(x) - base(x)| over a probe batch of noised grids.
template <typename Scalar>
double verify_identity_growth(const LinearDiT<Scalar>& base, const LinearDiT<Scalar>& grown,
                              const Matrix<Scalar>& probe_grids, const Conditioning& probe_cond) {
  ModelConfig a = base.config, b = grown.config;
  a.depth = b.depth = 0;
  if (!(a == b)) throw ContractError("verify_identity_growth: models differ beyond depth");
  const Matrix<Scalar> ya = predict_noise(base, probe_grids, probe_cond);
  const Matrix<Scalar> yb = predict_noise(grown, probe_grids, probe_cond);
  return static_cast<double>((ya - yb).cwiseAbs().maxCoeff());
}

}  // namespace lindit
