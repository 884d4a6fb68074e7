// SPDX-License-Identifier: Apache-2.0
#include "csn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>

namespace csn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct FaultState {
  std::atomic<bool> active{false};
  std::mutex mu;
  std::string op;
  double factor = 1.0;
};

FaultState& fault_state() {
  static FaultState s;
  return s;
}

// Multiplier applied to the gradient leaving `op`; 1 unless a fault is injected.
double fault(const char* op) {
  auto& s = fault_state();
  if (!s.active.load(std::memory_order_relaxed)) return 1.0;
  std::lock_guard lock(s.mu);
  return s.op == op ? s.factor : 1.0;
}

Tape& tape_of(Var v, const char* op) {
  if (!v.valid()) throw UsageError(std::string(op) + ": empty operand");
  return *v.tape();
}

void same_tape(Var a, Var b, const char* op) {
  if (a.tape() != b.tape()) throw UsageError(std::string(op) + ": operands live on different tapes");
}

void require_rank(Var v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(v.shape()));
  }
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

CMapMat cmat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapMat(t.ptr(), Eigen::Index(rows), Eigen::Index(cols));
}

MapMat mmat(std::span<double> buf, std::size_t rows, std::size_t cols) {
  return MapMat(buf.data(), Eigen::Index(rows), Eigen::Index(cols));
}

// Element-wise unary op with derivative expressed via input and output.
template <typename Fwd, typename Deriv>
Var unary(Var x, const char* op, Fwd fwd, Deriv deriv) {
  Tape& tape = tape_of(x, op);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const int xid = x.id();
  const int yid = static_cast<int>(tape.size());
  return tape.record(std::move(out), {x}, op, [xid, yid, deriv, op](Tape& t, const Tensor& g) {
    if (!t.needs_grad(xid)) return;
    const Tensor& xv = t.value(xid);
    const Tensor& yv = t.value(yid);
    const double f = fault(op);
    auto dx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * g[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

void inject_backward_fault(const std::string& op, double factor) {
  auto& s = fault_state();
  std::lock_guard lock(s.mu);
  s.op = op;
  s.factor = factor;
  s.active.store(!op.empty());
}

std::vector<std::string> op_names() {
  return {"matmul",       "add",        "sub",          "mul",
          "add_bias",     "add_channel_bias", "scale",  "mul_const",
          "mul_scalar",   "reshape",    "concat_cols",  "concat_rows",
          "slice_rows",   "slice_cols", "gather_rows",  "repeat_groups",
          "conv2d",       "maxpool2x2", "sum",          "mean",
          "tanh",         "sigmoid",    "relu",         "log",
          "softmax",      "tanh_derivative", "cross_entropy", "softmax_cross_entropy",
          "cosine_similarity", "row_outer"};
}

Var matmul(Var a, Var b, Transpose transpose_b) {
  constexpr const char* op = "matmul";
  Tape& tape = tape_of(a, op);
  same_tape(a, b, op);
  require_rank(a, 2, op);
  require_rank(b, 2, op);
  const bool tb = transpose_b == Transpose::Yes;
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t bk = tb ? b.shape()[1] : b.shape()[0];
  const std::size_t n = tb ? b.shape()[0] : b.shape()[1];
  if (k != bk) {
    throw DimensionError(std::string("matmul: inner dimensions differ, ") + shape_str(a.shape()) +
                         (tb ? " * T" : " * ") + shape_str(b.shape()));
  }
  Tensor out({m, n});
  auto A = cmat(a.value(), m, k);
  auto B = cmat(b.value(), b.shape()[0], b.shape()[1]);
  // Row by row: blocked GEMM sums tail rows in a different order, and an
  // example's output must not depend on its position in the batch.
  auto O = mmat(out.data(), m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = Eigen::Index(i);
    if (tb) {
      O.row(r).noalias() = A.row(r) * B.transpose();
    } else {
      O.row(r).noalias() = A.row(r) * B;
    }
  }
  const int aid = a.id(), bid = b.id();
  return tape.record(std::move(out), {a, b}, op,
                     [aid, bid, m, k, n, tb](Tape& t, const Tensor& g) {
                       const double f = fault("matmul");
                       auto G = cmat(g, m, n);
                       if (t.needs_grad(aid)) {
                         auto Bv = cmat(t.value(bid), tb ? n : k, tb ? k : n);
                         auto dA = mmat(t.grad_buffer(aid), m, k);
                         if (tb) {
                           dA.noalias() += f * (G * Bv);
                         } else {
                           dA.noalias() += f * (G * Bv.transpose());
                         }
                       }
                       if (t.needs_grad(bid)) {
                         auto Av = cmat(t.value(aid), m, k);
                         if (tb) {
                           auto dB = mmat(t.grad_buffer(bid), n, k);
                           dB.noalias() += f * (G.transpose() * Av);
                         } else {
                           auto dB = mmat(t.grad_buffer(bid), k, n);
                           dB.noalias() += f * (Av.transpose() * G);
                         }
                       }
                     });
}

namespace {

template <typename Fwd>
Var binary(Var a, Var b, const char* op, Fwd fwd, double sign_b, bool product) {
  Tape& tape = tape_of(a, op);
  same_tape(a, b, op);
  require_same_shape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const int aid = a.id(), bid = b.id();
  return tape.record(std::move(out), {a, b}, op,
                     [aid, bid, op, sign_b, product](Tape& t, const Tensor& g) {
                       const double f = fault(op);
                       if (t.needs_grad(aid)) {
                         auto da = t.grad_buffer(aid);
                         const Tensor& bv = t.value(bid);
                         for (std::size_t i = 0; i < da.size(); ++i) {
                           da[i] += f * g[i] * (product ? bv[i] : 1.0);
                         }
                       }
                       if (t.needs_grad(bid)) {
                         auto db = t.grad_buffer(bid);
                         const Tensor& av = t.value(aid);
                         for (std::size_t i = 0; i < db.size(); ++i) {
                           db[i] += f * g[i] * (product ? av[i] : sign_b);
                         }
                       }
                     });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; }, 1.0, false);
}

Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; }, -1.0, false);
}

Var mul(Var a, Var b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; }, 0.0, true);
}

Var add_bias(Var x, Var b) {
  constexpr const char* op = "add_bias";
  Tape& tape = tape_of(x, op);
  same_tape(x, b, op);
  require_rank(b, 1, op);
  const std::size_t n = b.shape()[0];
  if (x.shape().empty() || x.shape().back() != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match trailing dim of " +
                         shape_str(x.shape()));
  }
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + bv[i % n];
  const int xid = x.id(), bid = b.id();
  return tape.record(std::move(out), {x, b}, op, [xid, bid, n](Tape& t, const Tensor& g) {
    const double f = fault("add_bias");
    if (t.needs_grad(xid)) {
      auto dx = t.grad_buffer(xid);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * g[i];
    }
    if (t.needs_grad(bid)) {
      auto db = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) db[i % n] += f * g[i];
    }
  });
}

Var add_channel_bias(Var x, Var b) {
  constexpr const char* op = "add_channel_bias";
  Tape& tape = tape_of(x, op);
  same_tape(x, b, op);
  require_rank(x, 4, op);
  require_rank(b, 1, op);
  const auto& s = x.shape();
  const std::size_t channels = s[1], plane = s[2] * s[3];
  if (b.shape()[0] != channels) {
    throw DimensionError("add_channel_bias: bias " + shape_str(b.shape()) + " vs channels of " +
                         shape_str(s));
  }
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  Tensor out(s);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + bv[(i / plane) % channels];
  const int xid = x.id(), bid = b.id();
  return tape.record(std::move(out), {x, b}, op,
                     [xid, bid, channels, plane](Tape& t, const Tensor& g) {
                       const double f = fault("add_channel_bias");
                       if (t.needs_grad(xid)) {
                         auto dx = t.grad_buffer(xid);
                         for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * g[i];
                       }
                       if (t.needs_grad(bid)) {
                         auto db = t.grad_buffer(bid);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           db[(i / plane) % channels] += f * g[i];
                         }
                       }
                     });
}

Var scale(Var x, double factor) {
  constexpr const char* op = "scale";
  Tape& tape = tape_of(x, op);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op, [xid, factor](Tape& t, const Tensor& g) {
    const double f = fault("scale");
    auto dx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * g[i] * factor;
  });
}

Var mul_const(Var x, const Tensor& c) {
  constexpr const char* op = "mul_const";
  Tape& tape = tape_of(x, op);
  if (x.shape() != c.shape()) {
    throw DimensionError("mul_const: " + shape_str(x.shape()) + " vs " + shape_str(c.shape()));
  }
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c[i];
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op, [xid, c](Tape& t, const Tensor& g) {
    const double f = fault("mul_const");
    auto dx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * g[i] * c[i];
  });
}

Var mul_scalar(Var x, Var s) {
  constexpr const char* op = "mul_scalar";
  Tape& tape = tape_of(x, op);
  same_tape(x, s, op);
  if (s.value().size() != 1) {
    throw DimensionError("mul_scalar: scale must have one element, got " + shape_str(s.shape()));
  }
  const double sv = s.value()[0];
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
  const int xid = x.id(), sid = s.id();
  return tape.record(std::move(out), {x, s}, op, [xid, sid](Tape& t, const Tensor& g) {
    const double f = fault("mul_scalar");
    const Tensor& xv = t.value(xid);
    const double sv = t.value(sid)[0];
    if (t.needs_grad(xid)) {
      auto dx = t.grad_buffer(xid);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * g[i] * sv;
    }
    if (t.needs_grad(sid)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.grad_buffer(sid)[0] += f * acc;
    }
  });
}

Var reshape(Var x, Shape shape) {
  constexpr const char* op = "reshape";
  Tape& tape = tape_of(x, op);
  Tensor out = x.value().reshaped(std::move(shape));
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op, [xid](Tape& t, const Tensor& g) {
    const double f = fault("reshape");
    auto dx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * g[i];
  });
}

Var concat_cols(std::span<const Var> parts) {
  constexpr const char* op = "concat_cols";
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  Tape& tape = tape_of(parts[0], op);
  const std::size_t rows = parts[0].shape().at(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    same_tape(parts[0], p, op);
    require_rank(p, 2, op);
    if (p.shape()[0] != rows) {
      throw DimensionError("concat_cols: row counts differ, " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.ptr() + r * widths[k], widths[k], out.ptr() + r * total + off);
    }
    off += widths[k];
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return tape.record(std::move(out), parts, op,
                     [ids, widths, rows, total](Tape& t, const Tensor& g) {
                       const double f = fault("concat_cols");
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (t.needs_grad(ids[k])) {
                           auto d = t.grad_buffer(ids[k]);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < widths[k]; ++c) {
                               d[r * widths[k] + c] += f * g[r * total + off + c];
                             }
                           }
                         }
                         off += widths[k];
                       }
                     });
}

Var concat_rows(std::span<const Var> parts) {
  constexpr const char* op = "concat_rows";
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  Tape& tape = tape_of(parts[0], op);
  Shape inner(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    same_tape(parts[0], p, op);
    Shape pin(p.shape().begin() + 1, p.shape().end());
    if (pin != inner) {
      throw DimensionError("concat_rows: trailing shapes differ, " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    rows += p.shape()[0];
    sizes.push_back(p.value().size());
  }
  Shape s{rows};
  s.insert(s.end(), inner.begin(), inner.end());
  std::vector<double> data;
  data.reserve(shape_size(s));
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return tape.record(Tensor(std::move(s), std::move(data)), parts, op,
                     [ids, sizes](Tape& t, const Tensor& g) {
                       const double f = fault("concat_rows");
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (t.needs_grad(ids[k])) {
                           auto d = t.grad_buffer(ids[k]);
                           for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += f * g[off + i];
                         }
                         off += sizes[k];
                       }
                     });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  constexpr const char* op = "slice_rows";
  Tape& tape = tape_of(x, op);
  Tensor out = x.value().slice_rows(begin, end);
  const std::size_t offset = begin * x.value().row_size();
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op, [xid, offset](Tape& t, const Tensor& g) {
    const double f = fault("slice_rows");
    auto dx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) dx[offset + i] += f * g[i];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  constexpr const char* op = "slice_cols";
  Tape& tape = tape_of(x, op);
  require_rank(x, 2, op);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (begin >= end || end > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.ptr() + r * cols + begin, w, out.ptr() + r * w);
  }
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op,
                     [xid, rows, cols, begin, w](Tape& t, const Tensor& g) {
                       const double f = fault("slice_cols");
                       auto dx = t.grad_buffer(xid);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < w; ++c) {
                           dx[r * cols + begin + c] += f * g[r * w + c];
                         }
                       }
                     });
}

Var gather_rows(Var x, std::span<const std::size_t> index) {
  constexpr const char* op = "gather_rows";
  Tape& tape = tape_of(x, op);
  Tensor out = x.value().gather_rows(index);
  const std::size_t stride = x.value().row_size();
  std::vector<std::size_t> idx(index.begin(), index.end());
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op, [xid, idx, stride](Tape& t, const Tensor& g) {
    const double f = fault("gather_rows");
    auto dx = t.grad_buffer(xid);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      for (std::size_t c = 0; c < stride; ++c) dx[idx[k] * stride + c] += f * g[k * stride + c];
    }
  });
}

Var repeat_groups(Var x, std::size_t group) {
  constexpr const char* op = "repeat_groups";
  Tape& tape = tape_of(x, op);
  require_rank(x, 2, op);
  if (group == 0) throw DimensionError("repeat_groups: group size must be positive");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor out({rows, cols * group});
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::fill_n(out.ptr() + (r * cols + c) * group, group, xv[r * cols + c]);
    }
  }
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op, [xid, group](Tape& t, const Tensor& g) {
    const double f = fault("repeat_groups");
    auto dx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      double acc = 0.0;
      for (std::size_t s = 0; s < group; ++s) acc += g[i * group + s];
      dx[i] += f * acc;
    }
  });
}

namespace {

// cols[(c*K + ky)*K + kx, y*W + x] = img[c, y + ky - pad, x + kx - pad]
void im2col(const double* img, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t k, double* cols) {
  const std::ptrdiff_t pad = std::ptrdiff_t(k / 2);
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = std::ptrdiff_t(y) + std::ptrdiff_t(ky) - pad;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = std::ptrdiff_t(x) + std::ptrdiff_t(kx) - pad;
            const bool inside = sy >= 0 && sy < std::ptrdiff_t(h) && sx >= 0 && sx < std::ptrdiff_t(w);
            row[y * w + x] = inside ? img[c * plane + std::size_t(sy) * w + std::size_t(sx)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t k, double scale, double* img) {
  const std::ptrdiff_t pad = std::ptrdiff_t(k / 2);
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = std::ptrdiff_t(y) + std::ptrdiff_t(ky) - pad;
          if (sy < 0 || sy >= std::ptrdiff_t(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = std::ptrdiff_t(x) + std::ptrdiff_t(kx) - pad;
            if (sx < 0 || sx >= std::ptrdiff_t(w)) continue;
            img[c * plane + std::size_t(sy) * w + std::size_t(sx)] += scale * row[y * w + x];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var w) {
  constexpr const char* op = "conv2d";
  Tape& tape = tape_of(x, op);
  same_tape(x, w, op);
  require_rank(x, 4, op);
  require_rank(w, 4, op);
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::size_t batch = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  if (ws[1] != cin) {
    throw DimensionError("conv2d: kernel " + shape_str(ws) + " expects " + std::to_string(ws[1]) +
                         " input channels, input is " + shape_str(xs));
  }
  if (ws[3] != k || k % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square with odd size, got " + shape_str(ws));
  }
  const std::size_t plane = h * wd, patch = cin * k * k;
  Tensor out({batch, cout, h, wd});
  std::vector<double> cols(patch * plane);
  auto W = cmat(w.value(), cout, patch);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.value().ptr() + b * cin * plane, cin, h, wd, k, cols.data());
    MapMat(out.ptr() + b * cout * plane, Eigen::Index(cout), Eigen::Index(plane)).noalias() =
        W * CMapMat(cols.data(), Eigen::Index(patch), Eigen::Index(plane));
  }
  const int xid = x.id(), wid = w.id();
  return tape.record(
      std::move(out), {x, w}, op,
      [xid, wid, batch, cin, h, wd, cout, k, plane, patch](Tape& t, const Tensor& g) {
        const double f = fault("conv2d");
        const bool need_x = t.needs_grad(xid), need_w = t.needs_grad(wid);
        std::vector<double> cols(patch * plane);
        auto W = cmat(t.value(wid), cout, patch);
        for (std::size_t b = 0; b < batch; ++b) {
          CMapMat G(g.ptr() + b * cout * plane, Eigen::Index(cout), Eigen::Index(plane));
          if (need_w) {
            im2col(t.value(xid).ptr() + b * cin * plane, cin, h, wd, k, cols.data());
            auto dW = mmat(t.grad_buffer(wid), cout, patch);
            dW.noalias() += f * (G * CMapMat(cols.data(), Eigen::Index(patch), Eigen::Index(plane)).transpose());
          }
          if (need_x) {
            MapMat(cols.data(), Eigen::Index(patch), Eigen::Index(plane)).noalias() = W.transpose() * G;
            col2im(cols.data(), cin, h, wd, k, f, t.grad_buffer(xid).data() + b * cin * plane);
          }
        }
      });
}

Var maxpool2x2(Var x) {
  constexpr const char* op = "maxpool2x2";
  Tape& tape = tape_of(x, op);
  require_rank(x, 4, op);
  const auto& s = x.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor out({s[0], s[1], oh, ow});
  std::vector<std::size_t> arg(out.size());
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t y = 2 * oy + dy, xx = 2 * ox + dx;
            if (y >= h || xx >= w) continue;
            const std::size_t i = p * h * w + y * w + xx;
            if (xv[i] > best) {
              best = xv[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = p * oh * ow + oy * ow + ox;
        out[o] = best;
        arg[o] = best_i;
        BranchTrace::note(best_i);
      }
    }
  }
  const int xid = x.id();
  return tape.record(std::move(out), {x}, op, [xid, arg](Tape& t, const Tensor& g) {
    const double f = fault("maxpool2x2");
    auto dx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += f * g[o];
  });
}

Var sum(Var x) {
  constexpr const char* op = "sum";
  Tape& tape = tape_of(x, op);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const int xid = x.id();
  return tape.record(Tensor::scalar(s), {x}, op, [xid](Tape& t, const Tensor& g) {
    const double gv = g[0] * fault("sum");
    for (auto& d : t.grad_buffer(xid)) d += gv;
  });
}

Var mean(Var x) {
  constexpr const char* op = "mean";
  Tape& tape = tape_of(x, op);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const double n = double(x.value().size());
  const int xid = x.id();
  return tape.record(Tensor::scalar(s / n), {x}, op, [xid, n](Tape& t, const Tensor& g) {
    const double gv = g[0] * fault("mean") / n;
    for (auto& d : t.grad_buffer(xid)) d += gv;
  });
}

Var tanh(Var x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var x) {
  return unary(x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var x) {
  if (BranchTrace::active()) {
    for (double v : x.value().data()) BranchTrace::note(v > 0.0);
  }
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var log(Var x) {
  return unary(x, "log", [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Var tanh_derivative(Var x) {
  return unary(x, "tanh_derivative",
               [](double v) {
                 const double th = std::tanh(v);
                 return 1.0 - th * th;
               },
               [](double v, double) {
                 const double th = std::tanh(v);
                 return -2.0 * th * (1.0 - th * th);
               });
}

namespace {

void softmax_rows(const double* in, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = in + r * cols;
    double* y = out + r * cols;
    const double mx = *std::max_element(z, z + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(z[c] - mx);
      s += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= s;
  }
}

}  // namespace

Var softmax(Var x) {
  constexpr const char* op = "softmax";
  Tape& tape = tape_of(x, op);
  if (x.shape().empty()) throw DimensionError("softmax: rank-0 input");
  const std::size_t cols = x.shape().back(), rows = x.value().size() / cols;
  Tensor out(x.shape());
  softmax_rows(x.value().ptr(), out.ptr(), rows, cols);
  const int xid = x.id();
  const int yid = static_cast<int>(tape.size());
  return tape.record(std::move(out), {x}, op, [xid, yid, rows, cols](Tape& t, const Tensor& g) {
    const double f = fault("softmax");
    const Tensor& yv = t.value(yid);
    auto dx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * yv[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        dx[r * cols + c] += f * yv[r * cols + c] * (g[r * cols + c] - dot);
      }
    }
  });
}

Var cross_entropy(Var probs, Var targets) {
  constexpr const char* op = "cross_entropy";
  Tape& tape = tape_of(probs, op);
  same_tape(probs, targets, op);
  require_same_shape(probs, targets, op);
  const std::size_t cols = probs.shape().back(), rows = probs.value().size() / cols;
  const Tensor& pv = probs.value();
  const Tensor& yv = targets.value();
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double p = pv[r * cols + c];
      if (p < 0.0) throw UsageError("cross_entropy: negative probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw UsageError("cross_entropy: probabilities sum to " + std::to_string(total));
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const double y = yv[r * cols + c];
      if (y == 0.0) continue;
      double p = pv[r * cols + c];
      BranchTrace::note(p < kCrossEntropyEps);
      if (p < kCrossEntropyEps) {
        p = kCrossEntropyEps;
        TapeCounters::ce_clamps.fetch_add(1, std::memory_order_relaxed);
      }
      loss -= y * std::log(p);
    }
  }
  const int pid = probs.id(), yid = targets.id();
  return tape.record(Tensor::scalar(loss), {probs, targets}, op, [pid, yid](Tape& t, const Tensor& g) {
    const double f = fault("cross_entropy") * g[0];
    const Tensor& pv = t.value(pid);
    const Tensor& yv = t.value(yid);
    if (t.needs_grad(pid)) {
      auto dp = t.grad_buffer(pid);
      for (std::size_t i = 0; i < dp.size(); ++i) {
        if (yv[i] != 0.0) dp[i] -= f * yv[i] / std::max(pv[i], kCrossEntropyEps);
      }
    }
    if (t.needs_grad(yid)) {
      auto dy = t.grad_buffer(yid);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        dy[i] -= f * std::log(std::max(pv[i], kCrossEntropyEps));
      }
    }
  });
}

Var softmax_cross_entropy(Var logits, Var targets) {
  constexpr const char* op = "softmax_cross_entropy";
  Tape& tape = tape_of(logits, op);
  same_tape(logits, targets, op);
  require_same_shape(logits, targets, op);
  const std::size_t cols = logits.shape().back(), rows = logits.value().size() / cols;
  const Tensor& zv = logits.value();
  const Tensor& yv = targets.value();
  auto probs = std::make_shared<std::vector<double>>(zv.size());
  softmax_rows(zv.ptr(), probs->data(), rows, cols);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = zv.ptr() + r * cols;
    const double mx = *std::max_element(z, z + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(z[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) {
      const double y = yv[r * cols + c];
      if (y != 0.0) loss += y * (lse - z[c]);
    }
  }
  const int zid = logits.id(), yid = targets.id();
  return tape.record(Tensor::scalar(loss), {logits, targets}, op,
                     [zid, yid, probs, rows, cols](Tape& t, const Tensor& g) {
                       const double f = fault("softmax_cross_entropy") * g[0];
                       const Tensor& yv = t.value(yid);
                       if (t.needs_grad(zid)) {
                         auto dz = t.grad_buffer(zid);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double ysum = 0.0;
                           for (std::size_t c = 0; c < cols; ++c) ysum += yv[r * cols + c];
                           for (std::size_t c = 0; c < cols; ++c) {
                             const std::size_t i = r * cols + c;
                             dz[i] += f * ((*probs)[i] * ysum - yv[i]);
                           }
                         }
                       }
                       if (t.needs_grad(yid)) {
                         auto dy = t.grad_buffer(yid);
                         for (std::size_t i = 0; i < dy.size(); ++i) dy[i] -= f * std::log((*probs)[i]);
                       }
                     });
}

Var stop_gradient(Var x) {
  Tape& tape = tape_of(x, "stop_gradient");
  return tape.record(Tensor(x.value()), std::span<const Var>{}, "stop_gradient", nullptr);
}

Var cosine_similarity(Var q, Var k, double eps) {
  constexpr const char* op = "cosine_similarity";
  Tape& tape = tape_of(q, op);
  same_tape(q, k, op);
  require_rank(q, 2, op);
  require_rank(k, 2, op);
  const std::size_t b = q.shape()[0], n = k.shape()[0], d = q.shape()[1];
  if (k.shape()[1] != d) {
    throw DimensionError("cosine_similarity: key widths differ, " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
  }
  auto norms = [d](const Tensor& t, std::size_t rows) {
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += t[r * d + c] * t[r * d + c];
      out[r] = std::sqrt(s);
    }
    return out;
  };
  auto qn = std::make_shared<std::vector<double>>(norms(q.value(), b));
  auto kn = std::make_shared<std::vector<double>>(norms(k.value(), n));
  Tensor dots({b, n});
  mmat(dots.data(), b, n).noalias() = cmat(q.value(), b, d) * cmat(k.value(), n, d).transpose();
  Tensor out({b, n});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = dots[i * n + j] / ((*qn)[i] * (*kn)[j] + eps);
    }
  }
  const int qid = q.id(), kid = k.id();
  return tape.record(
      std::move(out), {q, k}, op,
      [qid, kid, b, n, d, eps, qn, kn, dots = std::move(dots)](Tape& t, const Tensor& g) {
        const double f = fault("cosine_similarity");
        const Tensor& qv = t.value(qid);
        const Tensor& kv = t.value(kid);
        // c = s / D, D = |q||k| + eps
        // dc/dq = k / D - s |k| q / (|q| D^2), symmetric for k.
        const bool need_q = t.needs_grad(qid), need_k = t.needs_grad(kid);
        std::span<double> dq, dk;
        if (need_q) dq = t.grad_buffer(qid);
        if (need_k) dk = t.grad_buffer(kid);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = f * g[i * n + j];
            if (gij == 0.0) continue;
            const double s = dots[i * n + j];
            const double D = (*qn)[i] * (*kn)[j] + eps;
            const double inv = 1.0 / D;
            const double cq = (*qn)[i] > 0.0 ? s * (*kn)[j] / ((*qn)[i] * D * D) : 0.0;
            const double ck = (*kn)[j] > 0.0 ? s * (*qn)[i] / ((*kn)[j] * D * D) : 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              if (need_q) dq[i * d + c] += gij * (kv[j * d + c] * inv - cq * qv[i * d + c]);
              if (need_k) dk[j * d + c] += gij * (qv[i * d + c] * inv - ck * kv[j * d + c]);
            }
          }
        }
      });
}

Var row_outer(Var a, Var e) {
  constexpr const char* op = "row_outer";
  Tape& tape = tape_of(a, op);
  same_tape(a, e, op);
  require_rank(a, 2, op);
  require_rank(e, 2, op);
  const std::size_t n = a.shape()[0], L = a.shape()[1], C = e.shape()[1];
  if (e.shape()[0] != n) {
    throw DimensionError("row_outer: row counts differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(e.shape()));
  }
  Tensor out({n * L, C});
  const Tensor& av = a.value();
  const Tensor& ev = e.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t c = 0; c < C; ++c) out[(i * L + l) * C + c] = av[i * L + l] * ev[i * C + c];
    }
  }
  const int aid = a.id(), eid = e.id();
  return tape.record(std::move(out), {a, e}, op, [aid, eid, n, L, C](Tape& t, const Tensor& g) {
    const double f = fault("row_outer");
    const Tensor& av = t.value(aid);
    const Tensor& ev = t.value(eid);
    if (t.needs_grad(aid)) {
      auto da = t.grad_buffer(aid);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < L; ++l) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) acc += g[(i * L + l) * C + c] * ev[i * C + c];
          da[i * L + l] += f * acc;
        }
      }
    }
    if (t.needs_grad(eid)) {
      auto de = t.grad_buffer(eid);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t l = 0; l < L; ++l) acc += g[(i * L + l) * C + c] * av[i * L + l];
          de[i * C + c] += f * acc;
        }
      }
    }
  });
}

}  // namespace csn::ops
