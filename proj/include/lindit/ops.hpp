#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lindit/tape.hpp"

namespace lindit {

inline constexpr double kNormEps = 1e-6;
inline constexpr double kAttentionEps = 1e-6;

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(Var<Scalar> a, Var<Scalar> b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

// a * b where each output row depends only on its own input row, accumulated
// in a fixed order, so results do not change with batch composition.
template <typename Scalar>
Matrix<Scalar> row_stable_product(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  Matrix<Scalar> out = Matrix<Scalar>::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    auto row = out.row(i);
    for (Eigen::Index k = 0; k < a.cols(); ++k) row.noalias() += a(i, k) * b.row(k);
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& tape = detail::same_tape(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av) + " x " + shape_string(bv));
  }
  Matrix<Scalar> out = tape.recording() ? Matrix<Scalar>(av * bv) : detail::row_stable_product(av, bv);
  return tape.push_op(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  Matrix<Scalar> out = a.value().transpose();
  return a.tape->push_op(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g.transpose());
  });
}

// Row-major reinterpretation.
template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Eigen::Index rows, Eigen::Index cols) {
  const auto& av = a.value();
  if (rows * cols != av.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(av) + " as [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  }
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(av.data(), rows, cols);
  const auto r0 = av.rows(), c0 = av.cols();
  return a.tape->push_op(std::move(out), {a}, [a, r0, c0](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, Eigen::Map<const Matrix<Scalar>>(g.data(), r0, c0));
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& tape = detail::same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Matrix<Scalar> out = a.value() + b.value();
  return tape.push_op(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  auto& tape = detail::same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Matrix<Scalar> out = a.value() - b.value();
  return tape.push_op(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  return sub(a, b);
}

// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  auto& tape = detail::same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return tape.push_op(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
    if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return a.tape->push_op(std::move(out), {a}, [a, s](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g * s);
  });
}

// a (r x c) + row (1 x c) broadcast over rows.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  auto& tape = detail::same_tape(a, row, "add_row");
  const auto& av = a.value();
  const auto& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: cannot broadcast " + shape_string(rv) + " onto " + shape_string(av));
  }
  Matrix<Scalar> out = av.rowwise() + rv.row(0);
  return tape.push_op(std::move(out), {a, row}, [a, row](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

// Stacks `times` copies of a vertically: [a; a; ...].
template <typename Scalar>
Var<Scalar> tile_rows(Var<Scalar> a, Eigen::Index times) {
  const auto& av = a.value();
  Matrix<Scalar> out(av.rows() * times, av.cols());
  for (Eigen::Index k = 0; k < times; ++k) out.middleRows(k * av.rows(), av.rows()) = av;
  const auto r = av.rows();
  return a.tape->push_op(std::move(out), {a}, [a, r, times](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> acc = g.topRows(r);
    for (Eigen::Index k = 1; k < times; ++k) acc += g.middleRows(k * r, r);
    t.accumulate(a, acc);
  });
}

// Repeats each row of a `times` times consecutively.
template <typename Scalar>
Var<Scalar> repeat_rows(Var<Scalar> a, Eigen::Index times) {
  const auto& av = a.value();
  Matrix<Scalar> out(av.rows() * times, av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) out.middleRows(i * times, times).rowwise() = av.row(i);
  return a.tape->push_op(std::move(out), {a}, [a, times](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& av2 = t.value(a);
    Matrix<Scalar> acc(av2.rows(), av2.cols());
    for (Eigen::Index i = 0; i < av2.rows(); ++i) acc.row(i) = g.middleRows(i * times, times).colwise().sum();
    t.accumulate(a, acc);
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return a.tape->push_op(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, (t.value(a).array() > Scalar(0)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& x) {
  Matrix<Scalar> out = x.colwise() - x.rowwise().maxCoeff();
  out = out.array().exp();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  Matrix<Scalar> out = softmax_rows_value(a.value());
  auto y = std::make_shared<Matrix<Scalar>>(out);
  return a.tape->push_op(std::move(out), {a}, [a, y](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const ColVector<Scalar> dot = g.cwiseProduct(*y).rowwise().sum();
    t.accumulate(a, y->cwiseProduct((g.colwise() - dot)));
  });
}

// x / sqrt(mean(x^2) + eps) * gain, per row.
template <typename Scalar>
Var<Scalar> rms_norm(Var<Scalar> x, Var<Scalar> gain, double eps = kNormEps) {
  auto& tape = detail::same_tape(x, gain, "rms_norm");
  const auto& xv = x.value();
  const auto& gv = gain.value();
  if (xv.cols() == 0) throw ShapeError("rms_norm: zero-length normalization axis " + shape_string(xv));
  if (gv.rows() != 1 || gv.cols() != xv.cols()) {
    throw ShapeError("rms_norm: gain " + shape_string(gv) + " does not match rows of " + shape_string(xv));
  }
  const Scalar n = static_cast<Scalar>(xv.cols());
  auto inv = std::make_shared<ColVector<Scalar>>(
      ((xv.array().square().rowwise().sum() / n) + static_cast<Scalar>(eps)).rsqrt().matrix());
  Matrix<Scalar> normed = xv.array().colwise() * inv->array();
  Matrix<Scalar> out = normed.array().rowwise() * gv.row(0).array();
  return tape.push_op(std::move(out), {x, gain}, [x, gain, inv, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& xv2 = t.value(x);
    const auto& gv2 = t.value(gain);
    if (t.needs_grad(gain)) {
      t.accumulate(gain, (g.array() * (xv2.array().colwise() * inv->array())).colwise().sum().matrix());
    }
    if (t.needs_grad(x)) {
      Matrix<Scalar> gy = g.array().rowwise() * gv2.row(0).array();
      const ColVector<Scalar> proj = gy.cwiseProduct(xv2).rowwise().sum();
      const ColVector<Scalar> inv3 = inv->array().cube();
      Matrix<Scalar> dx = gy.array().colwise() * inv->array();
      dx.array() -= xv2.array().colwise() * (inv3.array() * proj.array() / n);
      t.accumulate(x, dx);
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const auto r = a.rows(), c = a.cols();
  return a.tape->push_op(std::move(out), {a}, [a, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, Matrix<Scalar>::Constant(r, c, g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

// Mean of squared differences.
template <typename Scalar>
Var<Scalar> mse(Var<Scalar> pred, Var<Scalar> target) {
  auto& tape = detail::same_tape(pred, target, "mse");
  require_same_shape(pred.value(), target.value(), "mse");
  const Scalar n = static_cast<Scalar>(pred.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = (pred.value() - target.value()).squaredNorm() / n;
  return tape.push_op(std::move(out), {pred, target}, [pred, target, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> d = (t.value(pred) - t.value(target)) * (Scalar(2) * g(0, 0) / n);
    if (t.needs_grad(target)) t.accumulate(target, -d);
    t.accumulate(pred, d);
  });
}

// Gathers rows of `table` by index.
template <typename Scalar>
Var<Scalar> embedding(Var<Scalar> table, std::span<const int> ids) {
  const auto& tv = table.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(tv.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape->push_op(std::move(out), {table}, [table, idx](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& tv2 = t.value(table);
    Matrix<Scalar> acc = Matrix<Scalar>::Zero(tv2.rows(), tv2.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) acc.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, acc);
  });
}

// 3x3 depthwise convolution with zero padding over an h x w token grid. x holds
// consecutive samples of h*w row-major tokens; kernel is 9 x channels with row
// (dy + 1) * 3 + (dx + 1) weighting the neighbour at offset (dy, dx).
template <typename Scalar>
Var<Scalar> depthwise_conv3x3(Var<Scalar> x, Var<Scalar> kernel, int h, int w) {
  auto& tape = detail::same_tape(x, kernel, "depthwise_conv3x3");
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  const Eigen::Index n = static_cast<Eigen::Index>(h) * w;
  if (kv.rows() != 9 || kv.cols() != xv.cols()) {
    throw ShapeError("depthwise_conv3x3: kernel " + shape_string(kv) + " for input " + shape_string(xv));
  }
  if (n <= 0 || xv.rows() % n != 0) {
    throw ShapeError("depthwise_conv3x3: " + std::to_string(xv.rows()) + " rows not divisible into " +
                     std::to_string(h) + "x" + std::to_string(w) + " grids");
  }
  const Eigen::Index samples = xv.rows() / n;
  auto each_tap = [h, w, n, samples](auto&& fn) {
    for (Eigen::Index s = 0; s < samples; ++s) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int sy = y + dy, sx = xx + dx;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
              fn(s * n + y * w + xx, s * n + sy * w + sx, (dy + 1) * 3 + (dx + 1));
            }
          }
        }
      }
    }
  };
  Matrix<Scalar> out = Matrix<Scalar>::Zero(xv.rows(), xv.cols());
  each_tap([&](Eigen::Index dst, Eigen::Index src, Eigen::Index k) {
    out.row(dst) += xv.row(src).cwiseProduct(kv.row(k));
  });
  return tape.push_op(std::move(out), {x, kernel}, [x, kernel, each_tap](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& xv2 = t.value(x);
    const auto& kv2 = t.value(kernel);
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(xv2.rows(), xv2.cols());
    Matrix<Scalar> dk = Matrix<Scalar>::Zero(kv2.rows(), kv2.cols());
    each_tap([&](Eigen::Index dst, Eigen::Index src, Eigen::Index k) {
      dx.row(src) += g.row(dst).cwiseProduct(kv2.row(k));
      dk.row(k) += g.row(dst).cwiseProduct(xv2.row(src));
    });
    if (t.needs_grad(x)) t.accumulate(x, dx);
    if (t.needs_grad(kernel)) t.accumulate(kernel, dk);
  });
}

// ReLU-kernel linear attention, applied independently to consecutive segments of
// `segment` rows (one segment per sample):
//   O = relu(Q)(relu(K)^T V) / (relu(Q)(relu(K)^T 1) + eps)
// The segment x segment score matrix is never formed.
template <typename Scalar>
Var<Scalar> linear_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Eigen::Index segment,
                             double eps = kAttentionEps) {
  detail::same_tape(q, k, "linear_attention");
  auto& tape = detail::same_tape(q, v, "linear_attention");
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  require_same_shape(qv, kv, "linear_attention(q,k)");
  if (vv.rows() != qv.rows()) throw ShapeError("linear_attention: v " + shape_string(vv) + " vs q " + shape_string(qv));
  if (segment <= 0 || qv.rows() % segment != 0) {
    throw ShapeError("linear_attention: " + std::to_string(qv.rows()) + " rows not divisible into segments of " +
                     std::to_string(segment));
  }
  const Scalar e = static_cast<Scalar>(eps);
  const Eigen::Index segments = qv.rows() / segment;
  const Matrix<Scalar> fq = qv.cwiseMax(Scalar(0));
  const Matrix<Scalar> fk = kv.cwiseMax(Scalar(0));
  Matrix<Scalar> out(qv.rows(), vv.cols());
  auto den = std::make_shared<ColVector<Scalar>>(qv.rows());
  for (Eigen::Index s = 0; s < segments; ++s) {
    const auto rows = Eigen::seqN(s * segment, segment);
    const Matrix<Scalar> kvs = fk(rows, Eigen::all).transpose() * vv(rows, Eigen::all);
    const ColVector<Scalar> ksum = fk(rows, Eigen::all).colwise().sum().transpose();
    den->segment(s * segment, segment) = (fq(rows, Eigen::all) * ksum).array() + e;
    out(rows, Eigen::all) = (fq(rows, Eigen::all) * kvs).array().colwise() / den->segment(s * segment, segment).array();
  }
  auto outv = std::make_shared<Matrix<Scalar>>(out);
  return tape.push_op(std::move(out), {q, k, v},
                      [q, k, v, segment, segments, den, outv](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& qv2 = t.value(q);
    const auto& kv2 = t.value(k);
    const auto& vv2 = t.value(v);
    const Matrix<Scalar> fq2 = qv2.cwiseMax(Scalar(0));
    const Matrix<Scalar> fk2 = kv2.cwiseMax(Scalar(0));
    Matrix<Scalar> dq(qv2.rows(), qv2.cols()), dk(kv2.rows(), kv2.cols()), dv(vv2.rows(), vv2.cols());
    for (Eigen::Index s = 0; s < segments; ++s) {
      const auto rows = Eigen::seqN(s * segment, segment);
      const auto A = fq2(rows, Eigen::all);
      const auto B = fk2(rows, Eigen::all);
      const auto V = vv2(rows, Eigen::all);
      const ColVector<Scalar> d = den->segment(s * segment, segment);
      const Matrix<Scalar> kvs = B.transpose() * V;
      const ColVector<Scalar> ksum = B.colwise().sum().transpose();
      const Matrix<Scalar> dnum = g(rows, Eigen::all).array().colwise() / d.array();
      const ColVector<Scalar> dden =
          -(g(rows, Eigen::all).cwiseProduct((*outv)(rows, Eigen::all)).rowwise().sum().array() / d.array()).matrix();
      Matrix<Scalar> dA = dnum * kvs.transpose() + dden * ksum.transpose();
      const Matrix<Scalar> dkvs = A.transpose() * dnum;
      const RowVector<Scalar> dksum = (A.transpose() * dden).transpose();
      Matrix<Scalar> dB = V * dkvs.transpose();
      dB.rowwise() += dksum;
      dv(rows, Eigen::all) = B * dkvs;
      dq(rows, Eigen::all) = (qv2(rows, Eigen::all).array() > Scalar(0)).select(dA, Scalar(0));
      dk(rows, Eigen::all) = (kv2(rows, Eigen::all).array() > Scalar(0)).select(dB, Scalar(0));
    }
    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
  });
}

// Scaled dot-product softmax attention from query segments of `q_segment` rows to
// variable-length key/value segments delimited by kv_offsets (size segments + 1).
template <typename Scalar>
Var<Scalar> segmented_softmax_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Eigen::Index q_segment,
                                        std::span<const int> kv_offsets) {
  detail::same_tape(q, k, "softmax_attention");
  auto& tape = detail::same_tape(q, v, "softmax_attention");
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (qv.cols() != kv.cols()) throw ShapeError("softmax_attention: q " + shape_string(qv) + " vs k " + shape_string(kv));
  if (kv.rows() != vv.rows()) throw ShapeError("softmax_attention: k " + shape_string(kv) + " vs v " + shape_string(vv));
  if (q_segment <= 0 || qv.rows() % q_segment != 0 ||
      static_cast<Eigen::Index>(kv_offsets.size()) != qv.rows() / q_segment + 1 ||
      kv_offsets.back() != kv.rows() || kv_offsets.front() != 0) {
    throw ShapeError("softmax_attention: segment layout does not match operand shapes");
  }
  const Eigen::Index segments = qv.rows() / q_segment;
  for (Eigen::Index s = 0; s < segments; ++s) {
    if (kv_offsets[s + 1] <= kv_offsets[s]) throw InputError("softmax_attention: empty key segment");
  }
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(qv.cols()));
  std::vector<int> offs(kv_offsets.begin(), kv_offsets.end());
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(segments);
  Matrix<Scalar> out(qv.rows(), vv.cols());
  for (Eigen::Index s = 0; s < segments; ++s) {
    const auto qr = Eigen::seqN(s * q_segment, q_segment);
    const auto kr = Eigen::seq(offs[s], offs[s + 1] - 1);
    (*probs)[s] = softmax_rows_value<Scalar>((qv(qr, Eigen::all) * kv(kr, Eigen::all).transpose()) * sc);
    out(qr, Eigen::all) = (*probs)[s] * vv(kr, Eigen::all);
  }
  return tape.push_op(std::move(out), {q, k, v},
                      [q, k, v, q_segment, segments, offs, probs, sc](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& qv2 = t.value(q);
    const auto& kv2 = t.value(k);
    const auto& vv2 = t.value(v);
    Matrix<Scalar> dq(qv2.rows(), qv2.cols());
    Matrix<Scalar> dk = Matrix<Scalar>::Zero(kv2.rows(), kv2.cols());
    Matrix<Scalar> dv = Matrix<Scalar>::Zero(vv2.rows(), vv2.cols());
    for (Eigen::Index s = 0; s < segments; ++s) {
      const auto qr = Eigen::seqN(s * q_segment, q_segment);
      const auto kr = Eigen::seq(offs[s], offs[s + 1] - 1);
      const Matrix<Scalar>& P = (*probs)[s];
      const auto G = g(qr, Eigen::all);
      dv(kr, Eigen::all) = P.transpose() * G;
      const Matrix<Scalar> dP = G * vv2(kr, Eigen::all).transpose();
      const ColVector<Scalar> dot = dP.cwiseProduct(P).rowwise().sum();
      const Matrix<Scalar> dL = P.cwiseProduct(dP.colwise() - dot) * sc;
      dq(qr, Eigen::all) = dL * kv2(kr, Eigen::all);
      dk(kr, Eigen::all) = dL.transpose() * qv2(qr, Eigen::all);
    }
    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
  });
}

}  // namespace lindit
