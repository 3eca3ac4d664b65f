#pragma once

#include <cstring>

#include "lindit/model.hpp"
#include "lindit/toy_task.hpp"

namespace lindit::testing {

inline ModelConfig small_config(int depth = 3) {
  ModelConfig c;
  c.depth = depth;
  c.d_model = 16;
  c.d_ff = 32;
  c.patch = 2;
  c.timesteps = 100;
  return c;
}

// Noised probe grids and conditioning for `batch` random prompts.
struct Probe {
  MatrixF grids;
  Conditioning cond;
};

inline Probe make_probe(const ModelConfig& cfg, int batch, std::uint64_t seed) {
  Rng rng(seed);
  Probe p;
  p.grids = normal_matrix<float>(batch, cfg.grid_size(), 1.0, rng);
  toy::GrammarConfig g;
  for (int b = 0; b < batch; ++b) {
    const auto prompt = toy::sample_prompt(g, derive_seed(seed, {static_cast<std::uint64_t>(b)}));
    p.cond.add(prompt.tokens(), static_cast<double>((b * 37) % cfg.timesteps));
  }
  return p;
}

template <typename Scalar>
bool bit_equal(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

template <typename Scalar>
bool blocks_bit_equal(const BlockParams<Scalar>& a, const BlockParams<Scalar>& b) {
  std::vector<const Matrix<Scalar>*> pa, pb;
  a.each([&](const std::string&, const Matrix<Scalar>& m, ParamKind) { pa.push_back(&m); });
  b.each([&](const std::string&, const Matrix<Scalar>& m, ParamKind) { pb.push_back(&m); });
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!bit_equal(*pa[i], *pb[i])) return false;
  }
  return true;
}

template <typename Scalar>
bool non_block_bit_equal(const LinearDiT<Scalar>& a, const LinearDiT<Scalar>& b) {
  ModelParams<Scalar> x = a.params, y = b.params;
  x.blocks.clear();
  y.blocks.clear();
  auto sx = named_slots(x), sy = named_slots(y);
  if (sx.size() != sy.size()) return false;
  for (std::size_t i = 0; i < sx.size(); ++i) {
    if (!bit_equal(*sx[i].slot, *sy[i].slot)) return false;
  }
  return true;
}

}  // namespace lindit::testing
