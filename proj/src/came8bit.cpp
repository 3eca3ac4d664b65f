#include "lindit/came8bit.hpp"

#include <algorithm>
#include <cmath>

namespace lindit {

QuantizedBlock quantize_block(std::span<const float> x) {
  if (x.empty()) throw InputError("quantize_block: empty block");
  QuantizedBlock q;
  float lo = x[0], hi = x[0];
  for (float v : x) {
    if (std::isnan(v)) throw NumericError("quantize_block: NaN in block");
    if (!std::isfinite(v)) throw NumericError("quantize_block: infinite value in block");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  q.lo = lo;
  q.hi = hi;
  q.codes.resize(x.size(), 0);
  if (hi == lo) return q;
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double code = std::round((static_cast<double>(x[i]) - lo) / range * 255.0);
    q.codes[i] = static_cast<std::uint8_t>(std::clamp(code, 0.0, 255.0));
  }
  return q;
}

void dequantize_block(const QuantizedBlock& q, std::span<float> out) {
  if (out.size() != q.codes.size()) throw ShapeError("dequantize_block: output size mismatch");
  const double lo = q.lo, hi = q.hi;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = q.codes[i] / 255.0;
    out[i] = static_cast<float>(lo * (1.0 - s) + hi * s);
  }
}

std::vector<float> dequantize_block(const QuantizedBlock& q) {
  std::vector<float> out(q.codes.size());
  dequantize_block(q, out);
  return out;
}

void CameConfig::validate() const {
  auto open01 = [](double b) { return b > 0.0 && b < 1.0; };
  if (!open01(beta1) || !open01(beta2) || !open01(beta3)) throw ConfigError("CAME betas must lie in (0, 1)");
  if (block_size < 1) throw ConfigError("CAME block_size must be >= 1");
  if (!(lr >= 0.0) || !(weight_decay >= 0.0) || !(clip_d > 0.0)) throw ConfigError("CAME lr/weight_decay/clip_d");
}

std::size_t ParamState::first_moment_bytes() const {
  if (mode == StateMode::Quantized) {
    std::size_t b = 0;
    for (const auto& q : m_blocks) b += q.codes.size() + sizeof(q.lo) + sizeof(q.hi);
    return b;
  }
  return static_cast<std::size_t>(m.size()) * sizeof(float);
}

std::size_t ParamState::second_order_bytes() const {
  if (factored) return static_cast<std::size_t>(r.size() + c.size() + R.size() + C.size()) * sizeof(float);
  return static_cast<std::size_t>(v.size() + s.size()) * sizeof(float);
}

ParamState make_state(const std::string& name, Eigen::Index rows, Eigen::Index cols, ParamKind kind,
                      const CameConfig& cfg) {
  cfg.validate();
  ParamState st;
  st.name = name;
  st.rows = rows;
  st.cols = cols;
  st.factored = kind == ParamKind::Matrix && rows > 1 && cols > 1;
  const bool quantized = cfg.quantize && st.factored && st.elements() > cfg.quant_threshold;
  st.mode = quantized ? StateMode::Quantized : StateMode::FullPrecision;
  if (quantized) {
    const std::int64_t n = st.elements();
    for (std::int64_t start = 0; start < n; start += cfg.block_size) {
      const std::int64_t len = std::min<std::int64_t>(cfg.block_size, n - start);
      st.m_blocks.push_back(QuantizedBlock{std::vector<std::uint8_t>(static_cast<std::size_t>(len), 0), 0.f, 0.f});
    }
  } else {
    st.m = MatrixF::Zero(rows, cols);
  }
  if (st.factored) {
    st.r = RowVector<float>::Zero(rows);
    st.R = RowVector<float>::Zero(rows);
    st.c = RowVector<float>::Zero(cols);
    st.C = RowVector<float>::Zero(cols);
  } else {
    st.v = MatrixF::Zero(rows, cols);
    st.s = MatrixF::Zero(rows, cols);
  }
  return st;
}

MatrixF first_moment(const ParamState& st) {
  if (st.mode == StateMode::FullPrecision) return st.m;
  MatrixF m(st.rows, st.cols);
  std::size_t offset = 0;
  for (const auto& q : st.m_blocks) {
    dequantize_block(q, std::span<float>(m.data() + offset, q.codes.size()));
    offset += q.codes.size();
  }
  return m;
}

namespace {

using ArrayD = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// outer(row_stat, col_stat) / mean(row_stat); zero when the row statistic vanishes.
ArrayD factored_estimate(const RowVector<float>& row_stat, const RowVector<float>& col_stat) {
  const Eigen::RowVectorXd rs = row_stat.cast<double>();
  const Eigen::RowVectorXd cs = col_stat.cast<double>();
  const double mean = rs.mean();
  if (!(mean > 0.0)) return ArrayD::Zero(rs.size(), cs.size());
  return (rs.transpose() * cs).array() / mean;
}

}  // namespace

void came_step(ParamState& st, MatrixF& theta, const MatrixF& grad, const CameConfig& cfg) {
  if (theta.rows() != st.rows || theta.cols() != st.cols) {
    throw ContractError("came_step(" + st.name + "): parameter " + shape_string(theta) + " does not match state");
  }
  require_same_shape(theta, grad, "came_step");
  if (!grad.allFinite()) throw NumericError("came_step(" + st.name + "): non-finite gradient");
  const double b1 = cfg.beta1, b2 = cfg.beta2, b3 = cfg.beta3;
  const ArrayD g = grad.cast<double>().array();
  const ArrayD g2 = g.square() + cfg.eps1;

  // Second moment and normalized, clipped update.
  ArrayD v;
  if (st.factored) {
    st.r = (b2 * st.r.cast<double>().array() + (1.0 - b2) * g2.rowwise().mean().transpose()).cast<float>().matrix();
    st.c = (b2 * st.c.cast<double>().array() + (1.0 - b2) * g2.colwise().mean()).cast<float>().matrix();
    v = factored_estimate(st.r, st.c);
  } else {
    st.v = (b2 * st.v.cast<double>().array() + (1.0 - b2) * g2).cast<float>().matrix();
    v = st.v.cast<double>().array();
  }
  ArrayD u = (v > 0.0).select(g / v.sqrt(), 0.0);
  const double rms = std::sqrt(u.square().mean());
  u /= std::max(1.0, rms / cfg.clip_d);

  // First moment and instability statistic U = (u - m)^2.
  ArrayD U(st.rows, st.cols);
  if (st.mode == StateMode::Quantized) {
    std::vector<float> buf;
    std::int64_t offset = 0;
    for (auto& q : st.m_blocks) {
      buf.resize(q.codes.size());
      dequantize_block(q, buf);
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const std::int64_t k = offset + static_cast<std::int64_t>(i);
        const double uk = u(k / st.cols, k % st.cols);
        const double mk = b1 * buf[i] + (1.0 - b1) * uk;
        buf[i] = static_cast<float>(mk);
        U(k / st.cols, k % st.cols) = (uk - mk) * (uk - mk);
      }
      q = quantize_block(buf);
      offset += static_cast<std::int64_t>(buf.size());
    }
  } else {
    const ArrayD m = b1 * st.m.cast<double>().array() + (1.0 - b1) * u;
    st.m = m.cast<float>().matrix();
    U = (u - m).square();
  }

  ArrayD S;
  if (st.factored) {
    st.R = (b3 * st.R.cast<double>().array() + (1.0 - b3) * U.rowwise().mean().transpose()).cast<float>().matrix();
    st.C = (b3 * st.C.cast<double>().array() + (1.0 - b3) * U.colwise().mean()).cast<float>().matrix();
    S = factored_estimate(st.R, st.C);
  } else {
    st.s = (b3 * st.s.cast<double>().array() + (1.0 - b3) * U).cast<float>().matrix();
    S = st.s.cast<double>().array();
  }

  const ArrayD m = first_moment(st).cast<double>().array();
  const ArrayD th = theta.cast<double>().array();
  const ArrayD updated = th - cfg.lr * m / (S + cfg.eps2).sqrt() - cfg.lr * cfg.weight_decay * th;
  if (!updated.allFinite()) throw NumericError("came_step(" + st.name + "): non-finite update");
  theta = updated.cast<float>().matrix();
  ++st.step;
}

MemoryReport memory_report(std::span<const ParamState> states) {
  MemoryReport rep;
  for (const auto& st : states) {
    LayerMemory l{st.name, st.elements(), st.mode, st.first_moment_bytes(), st.second_order_bytes()};
    if (st.mode == StateMode::Quantized) rep.bytes_saved += static_cast<std::size_t>(st.elements()) * 24;
    rep.bytes_used += l.first_moment_bytes + l.second_order_bytes;
    rep.layers.push_back(std::move(l));
  }
  return rep;
}

CameOptimizer::CameOptimizer(const ModelParams<float>& params, CameConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  for (const auto& slot : named_slots(params)) {
    states_.push_back(make_state(slot.name, slot.slot->rows(), slot.slot->cols(), slot.kind, cfg_));
  }
}

void CameOptimizer::step(ModelParams<float>& params, const ModelParams<float>& grads) {
  auto ps = named_slots(params);
  auto gs = named_slots(grads);
  if (ps.size() != states_.size() || gs.size() != states_.size()) {
    throw ContractError("CameOptimizer: model layout changed since the optimizer was created");
  }
  for (std::size_t i = 0; i < ps.size(); ++i) came_step(states_[i], *ps[i].slot, *gs[i].slot, cfg_);
}

}  // namespace lindit
