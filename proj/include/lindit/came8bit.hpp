#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lindit/model.hpp"

namespace lindit {

// 8-bit min/max quantized slice of a first-moment tensor.
struct QuantizedBlock {
  std::vector<std::uint8_t> codes;
  float lo = 0.f;
  float hi = 0.f;

  bool operator==(const QuantizedBlock&) const = default;
};

// codes = round((x - min) / (max - min) * 255), rounding half away from zero.
// A constant block gets all-zero codes and lo == hi.
QuantizedBlock quantize_block(std::span<const float> x);

// x = lo * (1 - code/255) + hi * code/255; codes 0 and 255 reproduce lo and hi exactly.
void dequantize_block(const QuantizedBlock& q, std::span<float> out);
std::vector<float> dequantize_block(const QuantizedBlock& q);

struct CameConfig {
  double lr = 2e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double beta3 = 0.9999;
  double eps1 = 1e-30;
  double eps2 = 1e-16;
  double clip_d = 1.0;
  int block_size = 2048;
  std::int64_t quant_threshold = 16384;
  // false gives the plain 32-bit optimizer with identical recurrences.
  bool quantize = true;

  void validate() const;
  bool operator==(const CameConfig&) const = default;
};

enum class StateMode { Quantized, FullPrecision };

// Optimizer state of one parameter tensor.
struct ParamState {
  std::string name;
  StateMode mode = StateMode::FullPrecision;
  bool factored = false;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::int64_t step = 0;

  std::vector<QuantizedBlock> m_blocks;  // Quantized mode
  MatrixF m;                             // FullPrecision mode

  // Factored second moment (r: per row, c: per column) and instability (R, C).
  RowVector<float> r, c, R, C;
  // Unfactored counterparts for vectors and embeddings.
  MatrixF v, s;

  std::int64_t elements() const { return static_cast<std::int64_t>(rows) * cols; }
  std::size_t first_moment_bytes() const;
  std::size_t second_order_bytes() const;
  std::size_t bytes() const { return first_moment_bytes() + second_order_bytes(); }

  bool operator==(const ParamState&) const = default;
};

ParamState make_state(const std::string& name, Eigen::Index rows, Eigen::Index cols, ParamKind kind,
                      const CameConfig& cfg);

// One optimizer update of theta in place.
void came_step(ParamState& state, MatrixF& theta, const MatrixF& grad, const CameConfig& cfg);

// Current first moment as a dense matrix (dequantized in Quantized mode).
MatrixF first_moment(const ParamState& state);

struct LayerMemory {
  std::string name;
  std::int64_t elements = 0;
  StateMode mode = StateMode::FullPrecision;
  std::size_t first_moment_bytes = 0;
  std::size_t second_order_bytes = 0;
};

struct MemoryReport {
  std::size_t bytes_saved = 0;  // sum over quantized layers of elements * 24
  std::size_t bytes_used = 0;   // measured from the state layout
  std::vector<LayerMemory> layers;
};

MemoryReport memory_report(std::span<const ParamState> states);

// CAME(-8bit) over every parameter of a model, states in named_slots order.
class CameOptimizer {
 public:
  CameOptimizer(const ModelParams<float>& params, CameConfig cfg);
  // Resumes from saved states.
  CameOptimizer(CameConfig cfg, std::vector<ParamState> states) : cfg_(cfg), states_(std::move(states)) {}

  void step(ModelParams<float>& params, const ModelParams<float>& grads);

  const CameConfig& config() const { return cfg_; }
  CameConfig& config() { return cfg_; }
  std::vector<ParamState>& states() { return states_; }
  const std::vector<ParamState>& states() const { return states_; }

 private:
  CameConfig cfg_;
  std::vector<ParamState> states_;
};

}  // namespace lindit
