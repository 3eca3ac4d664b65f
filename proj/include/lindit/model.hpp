#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lindit/ops.hpp"
#include "lindit/rng.hpp"

namespace lindit {

struct ModelConfig {
  int depth = 6;
  int d_model = 64;
  int d_ff = 160;
  int vocab = 12;
  int grid_h = 8;
  int grid_w = 8;
  int channels = 3;
  int patch = 1;
  int timesteps = 1000;
  int max_prompt_len = 8;
  bool qk_norm = true;

  int tokens() const { return (grid_h / patch) * (grid_w / patch); }
  int patch_dim() const { return patch * patch * channels; }
  int grid_size() const { return grid_h * grid_w * channels; }

  void validate() const {
    if (depth < 1) throw ConfigError("model depth must be >= 1");
    if (d_model < 2 || d_model % 2 != 0) throw ConfigError("d_model must be an even integer >= 2");
    if (d_ff < d_model) throw ConfigError("d_ff must be >= d_model");
    if (vocab < 1 || channels < 1 || timesteps < 1 || max_prompt_len < 1) {
      throw ConfigError("vocab, channels, timesteps and max_prompt_len must be positive");
    }
    if (patch < 1 || grid_h % patch != 0 || grid_w % patch != 0) {
      throw ConfigError("grid dimensions must be positive multiples of the patch size");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// How the optimizer treats a parameter: only Matrix parameters get factored
// second moments (and may be quantized).
enum class ParamKind { Matrix, Vector, Embedding };

// One transformer block. T is Matrix<S> for storage and Var<S> for a bound forward pass.
template <typename T>
struct BlockT {
  T attn_norm, q_proj, k_proj, v_proj, q_norm, k_norm, o_proj;
  T cross_norm, cq_proj, ck_proj, cv_proj, cq_norm, ck_norm, co_proj;
  T mlp_norm, fc1, mlp_conv, fc2;

  template <typename Self, typename Fn>
  static void each(Self& b, Fn&& fn) {
    fn("attn_norm", b.attn_norm, ParamKind::Vector);
    fn("q_proj", b.q_proj, ParamKind::Matrix);
    fn("k_proj", b.k_proj, ParamKind::Matrix);
    fn("v_proj", b.v_proj, ParamKind::Matrix);
    fn("q_norm", b.q_norm, ParamKind::Vector);
    fn("k_norm", b.k_norm, ParamKind::Vector);
    fn("o_proj", b.o_proj, ParamKind::Matrix);
    fn("cross_norm", b.cross_norm, ParamKind::Vector);
    fn("cq_proj", b.cq_proj, ParamKind::Matrix);
    fn("ck_proj", b.ck_proj, ParamKind::Matrix);
    fn("cv_proj", b.cv_proj, ParamKind::Matrix);
    fn("cq_norm", b.cq_norm, ParamKind::Vector);
    fn("ck_norm", b.ck_norm, ParamKind::Vector);
    fn("co_proj", b.co_proj, ParamKind::Matrix);
    fn("mlp_norm", b.mlp_norm, ParamKind::Vector);
    fn("fc1", b.fc1, ParamKind::Matrix);
    fn("mlp_conv", b.mlp_conv, ParamKind::Matrix);
    fn("fc2", b.fc2, ParamKind::Matrix);
  }
  template <typename Fn>
  void each(Fn&& fn) {
    each(*this, fn);
  }
  template <typename Fn>
  void each(Fn&& fn) const {
    each(*this, fn);
  }
};

template <typename T>
struct ModelT {
  T patch_in, patch_bias, pos_emb;
  T time_w1, time_b1, time_w2, time_b2;
  T token_emb, prompt_pos;
  T final_norm, head_w, head_b;
  std::vector<BlockT<T>> blocks;

  // Visits every parameter in a fixed order: stem, blocks in depth order, head.
  template <typename Self, typename Fn>
  static void each(Self& m, Fn&& fn) {
    fn("patch_in", m.patch_in, ParamKind::Matrix);
    fn("patch_bias", m.patch_bias, ParamKind::Vector);
    fn("pos_emb", m.pos_emb, ParamKind::Embedding);
    fn("time_w1", m.time_w1, ParamKind::Matrix);
    fn("time_b1", m.time_b1, ParamKind::Vector);
    fn("time_w2", m.time_w2, ParamKind::Matrix);
    fn("time_b2", m.time_b2, ParamKind::Vector);
    fn("token_emb", m.token_emb, ParamKind::Embedding);
    fn("prompt_pos", m.prompt_pos, ParamKind::Embedding);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
      const std::string prefix = "blocks." + std::to_string(i) + ".";
      BlockT<T>::each(m.blocks[i], [&](std::string_view name, auto& slot, ParamKind kind) {
        fn(prefix + std::string(name), slot, kind);
      });
    }
    fn("final_norm", m.final_norm, ParamKind::Vector);
    fn("head_w", m.head_w, ParamKind::Matrix);
    fn("head_b", m.head_b, ParamKind::Vector);
  }
  template <typename Fn>
  void each(Fn&& fn) {
    each(*this, fn);
  }
  template <typename Fn>
  void each(Fn&& fn) const {
    each(*this, fn);
  }
};

template <typename Scalar>
using BlockParams = BlockT<Matrix<Scalar>>;

template <typename Scalar>
using ModelParams = ModelT<Matrix<Scalar>>;

template <typename Scalar>
struct LinearDiT {
  ModelConfig config;
  ModelParams<Scalar> params;

  int depth() const { return static_cast<int>(params.blocks.size()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    params.each([&](const std::string&, const Matrix<Scalar>& m, ParamKind) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <typename To>
  LinearDiT<To> cast() const {
    LinearDiT<To> out;
    out.config = config;
    out.params.blocks.resize(params.blocks.size());
    std::vector<const Matrix<Scalar>*> src;
    params.each([&](const std::string&, const Matrix<Scalar>& m, ParamKind) { src.push_back(&m); });
    std::size_t i = 0;
    out.params.each([&](const std::string&, Matrix<To>& m, ParamKind) { m = src[i++]->template cast<To>(); });
    return out;
  }
};

// Flat (name, pointer, kind) listing used by optimizers, checkpoints and gradient maps.
template <typename T>
struct NamedSlot {
  std::string name;
  T* slot;
  ParamKind kind;
};

template <typename T>
std::vector<NamedSlot<T>> named_slots(ModelT<T>& m) {
  std::vector<NamedSlot<T>> out;
  m.each([&](const std::string& name, T& slot, ParamKind kind) { out.push_back({name, &slot, kind}); });
  return out;
}

template <typename T>
std::vector<NamedSlot<const T>> named_slots(const ModelT<T>& m) {
  std::vector<NamedSlot<const T>> out;
  m.each([&](const std::string& name, const T& slot, ParamKind kind) { out.push_back({name, &slot, kind}); });
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

// Block with unit norm gains and N(0, stddev^2) projections.
template <typename Scalar>
BlockParams<Scalar> random_block(const ModelConfig& cfg, double stddev, Rng& rng) {
  const int d = cfg.d_model;
  BlockParams<Scalar> b;
  auto ones = [&] { return Matrix<Scalar>::Ones(1, d); };
  b.attn_norm = ones();
  b.q_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.k_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.v_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.q_norm = ones();
  b.k_norm = ones();
  b.o_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.cross_norm = ones();
  b.cq_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.ck_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.cv_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.cq_norm = ones();
  b.ck_norm = ones();
  b.co_proj = normal_matrix<Scalar>(d, d, stddev, rng);
  b.mlp_norm = ones();
  b.fc1 = normal_matrix<Scalar>(d, cfg.d_ff, stddev, rng);
  b.mlp_conv = normal_matrix<Scalar>(9, cfg.d_ff, stddev, rng);
  b.fc2 = normal_matrix<Scalar>(cfg.d_ff, d, stddev, rng);
  return b;
}

// Zeroes the three residual output projections; the block becomes the identity map.
template <typename Scalar>
void zero_output_projections(BlockParams<Scalar>& b) {
  b.o_proj.setZero();
  b.co_proj.setZero();
  b.fc2.setZero();
}

// From-scratch initialization: fan-in scaled projections, residual outputs
// further scaled by 1/sqrt(2 * depth).
template <typename Scalar>
LinearDiT<Scalar> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x1d17}));
  const int d = cfg.d_model;
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_ff = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  const double resid = 1.0 / std::sqrt(2.0 * cfg.depth);
  LinearDiT<Scalar> m;
  m.config = cfg;
  auto& p = m.params;
  p.patch_in = normal_matrix<Scalar>(cfg.patch_dim(), d, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), rng);
  p.patch_bias = Matrix<Scalar>::Zero(1, d);
  p.pos_emb = normal_matrix<Scalar>(cfg.tokens(), d, 0.5, rng);
  p.time_w1 = normal_matrix<Scalar>(d, d, s_d, rng);
  p.time_b1 = Matrix<Scalar>::Zero(1, d);
  p.time_w2 = normal_matrix<Scalar>(d, d, s_d, rng);
  p.time_b2 = Matrix<Scalar>::Zero(1, d);
  p.token_emb = normal_matrix<Scalar>(cfg.vocab, d, 1.0, rng);
  p.prompt_pos = normal_matrix<Scalar>(cfg.max_prompt_len, d, 0.5, rng);
  for (int i = 0; i < cfg.depth; ++i) {
    BlockParams<Scalar> b = random_block<Scalar>(cfg, s_d, rng);
    b.o_proj *= static_cast<Scalar>(resid);
    b.co_proj *= static_cast<Scalar>(resid);
    b.fc2 = normal_matrix<Scalar>(cfg.d_ff, d, s_ff * resid, rng);
    b.mlp_conv = normal_matrix<Scalar>(9, cfg.d_ff, 0.1, rng);
    b.mlp_conv.row(4).array() += Scalar(1);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = Matrix<Scalar>::Ones(1, d);
  p.head_w = normal_matrix<Scalar>(d, cfg.patch_dim(), 0.02, rng);
  p.head_b = Matrix<Scalar>::Zero(1, cfg.patch_dim());
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

// Per-sample conditioning for a batch: prompt token ids (concatenated; sample b owns
// ids[offsets[b], offsets[b+1])) and a diffusion timestep in [0, T).
struct Conditioning {
  std::vector<int> prompt_ids;
  std::vector<int> prompt_offsets{0};
  std::vector<double> timesteps;

  int batch() const { return static_cast<int>(timesteps.size()); }

  void add(std::span<const int> ids, double t) {
    prompt_ids.insert(prompt_ids.end(), ids.begin(), ids.end());
    prompt_offsets.push_back(static_cast<int>(prompt_ids.size()));
    timesteps.push_back(t);
  }
};

// Optional diagnostics collected during a forward pass.
template <typename Scalar>
struct ForwardTrace {
  bool record_block_inputs = false;
  // X_0 .. X_depth: input of each block followed by the last block's output.
  std::vector<Matrix<Scalar>> block_inputs;
  // Largest relu(q_i) . relu(k_j) over all token pairs in any self-attention.
  double max_self_logit = 0.0;
  bool all_finite = true;
};

template <typename Scalar>
ModelT<Var<Scalar>> bind(Tape<Scalar>& tape, const ModelParams<Scalar>& params) {
  ModelT<Var<Scalar>> vars;
  vars.blocks.resize(params.blocks.size());
  auto src = named_slots(params);
  std::size_t i = 0;
  vars.each([&](const std::string&, Var<Scalar>& v, ParamKind) { v = tape.parameter(*src[i++].slot); });
  return vars;
}

template <typename Scalar>
Var<Scalar> block_forward(const BlockT<Var<Scalar>>& b, Var<Scalar> x, Eigen::Index tokens, Var<Scalar> prompt,
                          std::span<const int> prompt_offsets, bool qk_norm, int grid_h, int grid_w,
                          ForwardTrace<Scalar>* trace = nullptr) {
  {
    Var<Scalar> h = rms_norm(x, b.attn_norm);
    Var<Scalar> q = matmul(h, b.q_proj);
    Var<Scalar> k = matmul(h, b.k_proj);
    if (qk_norm) {
      q = rms_norm(q, b.q_norm);
      k = rms_norm(k, b.k_norm);
    }
    Var<Scalar> v = matmul(h, b.v_proj);
    if (trace != nullptr) {
      const Matrix<Scalar> fq = q.value().cwiseMax(Scalar(0));
      const Matrix<Scalar> fk = k.value().cwiseMax(Scalar(0));
      for (Eigen::Index s = 0; s < fq.rows() / tokens; ++s) {
        const auto r = Eigen::seqN(s * tokens, tokens);
        const double m = static_cast<double>((fq(r, Eigen::all) * fk(r, Eigen::all).transpose()).maxCoeff());
        trace->max_self_logit = std::max(trace->max_self_logit, m);
      }
    }
    Var<Scalar> o = matmul(linear_attention(q, k, v, tokens), b.o_proj);
    if (trace != nullptr) trace->all_finite = trace->all_finite && o.value().allFinite();
    x = x + o;
  }
  {
    Var<Scalar> h = rms_norm(x, b.cross_norm);
    Var<Scalar> q = matmul(h, b.cq_proj);
    Var<Scalar> k = matmul(prompt, b.ck_proj);
    if (qk_norm) {
      q = rms_norm(q, b.cq_norm);
      k = rms_norm(k, b.ck_norm);
    }
    Var<Scalar> v = matmul(prompt, b.cv_proj);
    Var<Scalar> o = matmul(segmented_softmax_attention(q, k, v, tokens, prompt_offsets), b.co_proj);
    if (trace != nullptr) trace->all_finite = trace->all_finite && o.value().allFinite();
    x = x + o;
  }
  {
    Var<Scalar> h = rms_norm(x, b.mlp_norm);
    Var<Scalar> o = matmul(relu(depthwise_conv3x3(matmul(h, b.fc1), b.mlp_conv, grid_h, grid_w)), b.fc2);
    if (trace != nullptr) trace->all_finite = trace->all_finite && o.value().allFinite();
    x = x + o;
  }
  return x;
}

// Sinusoidal timestep features, one row per sample.
template <typename Scalar>
Matrix<Scalar> timestep_features(std::span<const double> timesteps, int dim) {
  const int half = dim / 2;
  Matrix<Scalar> f(static_cast<Eigen::Index>(timesteps.size()), dim);
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      f(b, i) = static_cast<Scalar>(std::sin(timesteps[b] * freq));
      f(b, half + i) = static_cast<Scalar>(std::cos(timesteps[b] * freq));
    }
  }
  return f;
}

// Positions of each prompt token within its own prompt.
inline std::vector<int> prompt_positions(const Conditioning& cond) {
  std::vector<int> pos(cond.prompt_ids.size());
  for (int b = 0; b < cond.batch(); ++b) {
    for (int i = cond.prompt_offsets[b]; i < cond.prompt_offsets[b + 1]; ++i) pos[i] = i - cond.prompt_offsets[b];
  }
  return pos;
}

inline void validate_conditioning(const ModelConfig& cfg, const Conditioning& cond, Eigen::Index patch_rows) {
  const int batch = cond.batch();
  if (batch < 1) throw InputError("forward: empty batch");
  if (static_cast<int>(cond.prompt_offsets.size()) != batch + 1) throw InputError("forward: prompt offsets size");
  if (patch_rows != static_cast<Eigen::Index>(batch) * cfg.tokens()) {
    throw ShapeError("forward: expected " + std::to_string(batch * cfg.tokens()) + " token rows, got " +
                     std::to_string(patch_rows));
  }
  for (int b = 0; b < batch; ++b) {
    const int len = cond.prompt_offsets[b + 1] - cond.prompt_offsets[b];
    if (len < 1) throw InputError("forward: empty prompt for sample " + std::to_string(b));
    if (len > cfg.max_prompt_len) throw InputError("forward: prompt longer than max_prompt_len");
    const double t = cond.timesteps[b];
    if (!(t >= 0.0 && t < cfg.timesteps)) {
      throw InputError("forward: timestep " + std::to_string(t) + " outside [0, " + std::to_string(cfg.timesteps) + ")");
    }
  }
  for (int id : cond.prompt_ids) {
    if (id < 0 || id >= cfg.vocab) throw InputError("forward: prompt token " + std::to_string(id) + " outside vocab");
  }
}

// Embeds patches and runs the block stack; returns the final block output
// ((batch * tokens) x d_model), before the output head.
template <typename Scalar>
Var<Scalar> forward_trunk(Tape<Scalar>& tape, const ModelT<Var<Scalar>>& p, const ModelConfig& cfg,
                          const Matrix<Scalar>& x_patches, const Conditioning& cond,
                          ForwardTrace<Scalar>* trace = nullptr) {
  validate_conditioning(cfg, cond, x_patches.rows());
  if (x_patches.cols() != cfg.patch_dim()) {
    throw ShapeError("forward: patch width " + std::to_string(x_patches.cols()) + " != " +
                     std::to_string(cfg.patch_dim()));
  }
  const int batch = cond.batch();
  const Eigen::Index tokens = cfg.tokens();

  Var<Scalar> x = add_row(matmul(tape.constant(x_patches), p.patch_in), p.patch_bias);
  x = x + tile_rows(p.pos_emb, batch);
  Var<Scalar> temb = tape.constant(timestep_features<Scalar>(cond.timesteps, cfg.d_model));
  temb = add_row(matmul(relu(add_row(matmul(temb, p.time_w1), p.time_b1)), p.time_w2), p.time_b2);
  x = x + repeat_rows(temb, tokens);

  const std::vector<int> positions = prompt_positions(cond);
  Var<Scalar> prompt = embedding(p.token_emb, cond.prompt_ids) + embedding(p.prompt_pos, positions);

  if (trace != nullptr && trace->record_block_inputs) trace->block_inputs.clear();
  for (const auto& b : p.blocks) {
    if (trace != nullptr && trace->record_block_inputs) trace->block_inputs.push_back(x.value());
    x = block_forward(b, x, tokens, prompt, cond.prompt_offsets, cfg.qk_norm, cfg.grid_h / cfg.patch,
                      cfg.grid_w / cfg.patch, trace);
  }
  if (trace != nullptr && trace->record_block_inputs) trace->block_inputs.push_back(x.value());
  return x;
}

// Predicted noise in patch layout ((batch * tokens) x patch_dim).
template <typename Scalar>
Var<Scalar> forward(Tape<Scalar>& tape, const ModelT<Var<Scalar>>& p, const ModelConfig& cfg,
                    const Matrix<Scalar>& x_patches, const Conditioning& cond, ForwardTrace<Scalar>* trace = nullptr) {
  Var<Scalar> x = forward_trunk(tape, p, cfg, x_patches, cond, trace);
  return add_row(matmul(rms_norm(x, p.final_norm), p.head_w), p.head_b);
}

// ---------------------------------------------------------------------------
// Grid <-> patch token layout. A batch of grids is (batch x H*W*C), each row an
// (H, W, C) row-major image.

template <typename Scalar>
Matrix<Scalar> patchify(const ModelConfig& cfg, const Matrix<Scalar>& grids) {
  if (grids.cols() != cfg.grid_size()) {
    throw ShapeError("patchify: grid width " + std::to_string(grids.cols()) + " != " + std::to_string(cfg.grid_size()));
  }
  const int p = cfg.patch, C = cfg.channels, W = cfg.grid_w, pw = cfg.grid_w / p;
  Matrix<Scalar> out(grids.rows() * cfg.tokens(), cfg.patch_dim());
  for (Eigen::Index b = 0; b < grids.rows(); ++b) {
    for (int tok = 0; tok < cfg.tokens(); ++tok) {
      const int ty = tok / pw, tx = tok % pw;
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int c = 0; c < C; ++c) {
            const int src = ((ty * p + dy) * W + (tx * p + dx)) * C + c;
            out(b * cfg.tokens() + tok, (dy * p + dx) * C + c) = grids(b, src);
          }
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> unpatchify(const ModelConfig& cfg, const Matrix<Scalar>& patches) {
  if (patches.cols() != cfg.patch_dim() || patches.rows() % cfg.tokens() != 0) {
    throw ShapeError("unpatchify: unexpected layout " + shape_string(patches));
  }
  const Eigen::Index batch = patches.rows() / cfg.tokens();
  const int p = cfg.patch, C = cfg.channels, W = cfg.grid_w, pw = cfg.grid_w / p;
  Matrix<Scalar> out(batch, cfg.grid_size());
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int tok = 0; tok < cfg.tokens(); ++tok) {
      const int ty = tok / pw, tx = tok % pw;
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int c = 0; c < C; ++c) {
            const int dst = ((ty * p + dy) * W + (tx * p + dx)) * C + c;
            out(b, dst) = patches(b * cfg.tokens() + tok, (dy * p + dx) * C + c);
          }
        }
      }
    }
  }
  return out;
}

// Inference-only noise prediction on a batch of grids; returns (batch x H*W*C).
template <typename Scalar>
Matrix<Scalar> predict_noise(const LinearDiT<Scalar>& model, const Matrix<Scalar>& x_grids, const Conditioning& cond,
                             ForwardTrace<Scalar>* trace = nullptr) {
  Tape<Scalar> tape(false);
  const auto vars = bind(tape, model.params);
  Var<Scalar> out = forward(tape, vars, model.config, patchify(model.config, x_grids), cond, trace);
  return unpatchify(model.config, out.value());
}

}  // namespace lindit
