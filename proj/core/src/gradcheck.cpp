// SPDX-License-Identifier: Apache-2.0
#include "csn/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <optional>

#include "csn/ops.hpp"
#include "csn/rng.hpp"

namespace csn {

namespace {

double eval_loss(const LossFn& f) {
  Tape tape(TapeOptions{.track_params = false});
  Var loss = f(tape);
  if (loss.value().size() != 1) throw UsageError("gradient check: loss must be scalar");
  return loss.value()[0];
}

struct Sample {
  double value = 0.0;
  std::uint64_t pattern = 0;
};

// f with `coord` displaced by `delta`; the coordinate is restored.
Sample displaced(const LossFn& f, double& coord, double delta) {
  const double saved = coord;
  coord = saved + delta;
  Sample s;
  {
    BranchTrace trace;
    s.value = eval_loss(f);
    s.pattern = trace.fingerprint();
  }
  coord = saved;
  return s;
}

double central(const LossFn& f, double& coord, double h) {
  return (displaced(f, coord, h).value - displaced(f, coord, -h).value) / (2.0 * h);
}

constexpr double kMinStep = 1e-9;

// Largest step in h_max, h_max/10, ... whose displaced evaluation stays on the
// smooth piece of the base point; 0 when none does.
double stable_step(const LossFn& f, double& coord, int side, const Sample& base, double h_max) {
  for (double h = h_max; h >= kMinStep; h /= 10.0) {
    if (displaced(f, coord, side * h).pattern == base.pattern) return h;
  }
  return 0.0;
}

// Ridders: differences at steps h, h/1.4, ... combined by Richardson
// extrapolation, keeping the entry with the smallest error bound. `side` 0 is
// central, +1/-1 one-sided (error series in h rather than h^2). Empty when an
// evaluation leaves the smooth piece of the base point.
std::optional<double> ridders(const LossFn& f, double& coord, double h, int side,
                              const Sample& base) {
  constexpr int kTab = 10;
  constexpr double kCon = 1.4, kSafe = 2.0;
  const double ratio = side == 0 ? kCon * kCon : kCon;
  bool smooth = true;
  auto diff = [&](double step) {
    if (side == 0) {
      const Sample up = displaced(f, coord, step), down = displaced(f, coord, -step);
      smooth = smooth && up.pattern == base.pattern && down.pattern == base.pattern;
      return (up.value - down.value) / (2.0 * step);
    }
    const Sample moved = displaced(f, coord, side * step);
    smooth = smooth && moved.pattern == base.pattern;
    return (moved.value - base.value) / (side * step);
  };
  double a[kTab][kTab];
  a[0][0] = diff(h);
  double best = a[0][0], err = std::numeric_limits<double>::max();
  for (int i = 1; i < kTab && smooth; ++i) {
    h /= kCon;
    a[0][i] = diff(h);
    double fac = ratio;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= ratio;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  if (!smooth) return std::nullopt;
  return best;
}

// Derivative on the smooth piece containing the base point: central when both
// sides are smooth to the same step, otherwise one-sided on the wider side
// (a larger step shrinks rounding noise more than the lower order costs).
double smooth_piece_derivative(const LossFn& f, double& coord, double h_max, const Sample& base) {
  double up = stable_step(f, coord, 1, base, h_max);
  double down = stable_step(f, coord, -1, base, h_max);
  while (up > 0.0 || down > 0.0) {
    const double lo = std::min(up, down), hi = std::max(up, down);
    const int side = lo == hi ? 0 : (up > down ? 1 : -1);
    const double h = side == 0 ? lo : hi;
    if (const auto d = ridders(f, coord, h, side, base)) return *d;
    auto shrink = [](double& s) { s = s / 10.0 < kMinStep ? 0.0 : s / 10.0; };
    if (side >= 0) shrink(up);
    if (side <= 0) shrink(down);
  }
  // A kink at the base point itself: no smooth stencil exists.
  return central(f, coord, kMinStep);
}

}  // namespace

GradCheckResult finite_diff_check(const LossFn& f, std::span<Parameter* const> params,
                                  const GradCheckOptions& options) {
  const double max_step = options.method == DiffMethod::Ridders ? 1e-1 : 1e-3;
  if (options.step < 1e-7 || options.step > max_step) {
    throw UsageError("gradient check: step must lie in [1e-7, " + std::to_string(max_step) + "]");
  }
  Sample base;
  {
    BranchTrace trace;
    base.value = eval_loss(f);
    base.pattern = trace.fingerprint();
  }
  const double base1 = base.value;
  const double base2 = eval_loss(f);
  if (std::bit_cast<std::uint64_t>(base1) != std::bit_cast<std::uint64_t>(base2)) {
    throw OracleError("gradient check: loss is not deterministic (" + std::to_string(base1) +
                      " vs " + std::to_string(base2) + ")");
  }

  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
    for (Parameter* p : params) analytic.push_back(tape.grad(tape.param(*p)));
  }

  Rng rng(options.seed);
  GradCheckResult result;
  const double h = options.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    std::vector<std::size_t> coords;
    const std::size_t n = p.value.size();
    if (options.samples_per_param == 0 || options.samples_per_param >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      coords = rng.choose(n, options.samples_per_param);
    }
    for (auto i : coords) {
      const double numeric = options.method == DiffMethod::Ridders
                                 ? smooth_piece_derivative(f, p.value[i], h, base)
                                 : central(f, p.value[i], h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a), 1e-8);
      if (++result.checked == 1 || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p.name;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor random_distribution(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += t.at(r, c) = rng.uniform(0.2, 1.0);
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) /= s;
  }
  return t;
}

Tensor one_hot_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) t.at(r, rng.index(cols)) = 1.0;
  return t;
}

// Inputs of one op instance plus the expression mapping their tape nodes to
// the op output.
struct OpCase {
  std::vector<Tensor> inputs;
  std::function<Var(std::span<const Var>)> build;
  Tensor projection = {};  // empty: random weights in [0.5, 1.5]
};

OpCase make_case(const std::string& op, Rng& rng) {
  using namespace ops;
  if (op == "matmul") {
    if (rng.bernoulli(0.5)) {
      return {{random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})},
              [](auto v) { return matmul(v[0], v[1]); }};
    }
    return {{random_tensor(rng, {3, 4}), random_tensor(rng, {2, 4})},
            [](auto v) { return matmul(v[0], v[1], Transpose::Yes); }};
  }
  if (op == "add") return {{random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}, [](auto v) { return add(v[0], v[1]); }};
  if (op == "sub") return {{random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}, [](auto v) { return sub(v[0], v[1]); }};
  if (op == "mul") return {{random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}, [](auto v) { return mul(v[0], v[1]); }};
  if (op == "add_bias") return {{random_tensor(rng, {3, 4}), random_tensor(rng, {4})}, [](auto v) { return add_bias(v[0], v[1]); }};
  if (op == "add_channel_bias") {
    return {{random_tensor(rng, {2, 3, 2, 2}), random_tensor(rng, {3})},
            [](auto v) { return add_channel_bias(v[0], v[1]); }};
  }
  if (op == "scale") return {{random_tensor(rng, {2, 3})}, [](auto v) { return scale(v[0], -1.7); }};
  if (op == "mul_const") {
    Tensor c = random_tensor(rng, {2, 3});
    return {{random_tensor(rng, {2, 3})}, [c](auto v) { return mul_const(v[0], c); }};
  }
  if (op == "mul_scalar") return {{random_tensor(rng, {2, 3}), random_tensor(rng, {1})}, [](auto v) { return mul_scalar(v[0], v[1]); }};
  if (op == "reshape") return {{random_tensor(rng, {2, 6})}, [](auto v) { return reshape(v[0], {3, 4}); }};
  if (op == "concat_cols") {
    return {{random_tensor(rng, {2, 3}), random_tensor(rng, {2, 1})},
            [](auto v) { return concat_cols(v); }};
  }
  if (op == "concat_rows") {
    return {{random_tensor(rng, {2, 3}), random_tensor(rng, {1, 3})},
            [](auto v) { return concat_rows(v); }};
  }
  if (op == "slice_rows") return {{random_tensor(rng, {4, 3})}, [](auto v) { return slice_rows(v[0], 1, 3); }};
  if (op == "slice_cols") return {{random_tensor(rng, {3, 5})}, [](auto v) { return slice_cols(v[0], 1, 4); }};
  if (op == "gather_rows") {
    return {{random_tensor(rng, {4, 3})}, [](auto v) {
              const std::vector<std::size_t> idx{2, 0, 2};
              return gather_rows(v[0], idx);
            }};
  }
  if (op == "repeat_groups") return {{random_tensor(rng, {2, 3})}, [](auto v) { return repeat_groups(v[0], 4); }};
  if (op == "conv2d") {
    const std::size_t k = rng.bernoulli(0.5) ? 3 : 1;
    return {{random_tensor(rng, {2, 2, 4, 3}), random_tensor(rng, {3, 2, k, k})},
            [](auto v) { return conv2d(v[0], v[1]); }};
  }
  if (op == "maxpool2x2") return {{random_tensor(rng, {1, 2, 5, 4})}, [](auto v) { return maxpool2x2(v[0]); }};
  if (op == "sum") return {{random_tensor(rng, {2, 3})}, [](auto v) { return sum(v[0]); }};
  if (op == "mean") return {{random_tensor(rng, {2, 3})}, [](auto v) { return mean(v[0]); }};
  if (op == "tanh") return {{random_tensor(rng, {2, 3}, -2, 2)}, [](auto v) { return ops::tanh(v[0]); }};
  if (op == "sigmoid") return {{random_tensor(rng, {2, 3}, -3, 3)}, [](auto v) { return sigmoid(v[0]); }};
  if (op == "relu") {
    // Keep inputs away from the kink.
    Tensor t = random_tensor(rng, {2, 3}, 0.1, 1.0);
    for (auto& x : t.data()) {
      if (rng.bernoulli(0.5)) x = -x;
    }
    return {{t}, [](auto v) { return relu(v[0]); }};
  }
  if (op == "log") return {{random_tensor(rng, {2, 3}, 0.3, 2.0)}, [](auto v) { return ops::log(v[0]); }};
  if (op == "softmax") {
    // Picking one output per row keeps p_c (delta - p) away from zero; a dense
    // projection can cancel to ~1e-7 and drown in finite-difference noise.
    return {{random_tensor(rng, {3, 4}, -1, 1)}, [](auto v) { return softmax(v[0]); },
            one_hot_rows(rng, 3, 4)};
  }
  if (op == "tanh_derivative") return {{random_tensor(rng, {2, 3}, -2, 2)}, [](auto v) { return tanh_derivative(v[0]); }};
  if (op == "cross_entropy") {
    // Perturbing probabilities leaves the simplex, so check through a softmax.
    Tensor y = one_hot_rows(rng, 3, 4);
    return {{random_tensor(rng, {3, 4}, -2, 2)}, [y](auto v) {
              Var yv = v[0].tape()->constant(y);
              return cross_entropy(softmax(v[0]), yv);
            }};
  }
  if (op == "softmax_cross_entropy") {
    return {{random_tensor(rng, {3, 4}, -2, 2), random_distribution(rng, 3, 4)},
            [](auto v) { return softmax_cross_entropy(v[0], v[1]); }};
  }
  if (op == "cosine_similarity") {
    return {{random_tensor(rng, {2, 5}), random_tensor(rng, {3, 5})},
            [](auto v) { return cosine_similarity(v[0], v[1]); }};
  }
  if (op == "row_outer") {
    return {{random_tensor(rng, {2, 3}), random_tensor(rng, {2, 4})},
            [](auto v) { return row_outer(v[0], v[1]); }};
  }
  throw UsageError("no self-check case for op '" + op + "'");
}

}  // namespace

std::vector<OpCheck> check_primitive_ops(std::uint64_t seed, std::size_t points, double step) {
  std::vector<OpCheck> out;
  Rng rng(seed);
  for (const auto& op : ops::op_names()) {
    OpCheck check{op, 0.0};
    for (std::size_t k = 0; k < points; ++k) {
      OpCase c = make_case(op, rng);
      ParameterStore store;
      std::vector<Parameter*> params;
      for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        params.push_back(&store.add("in" + std::to_string(i), c.inputs[i]));
      }
      // Random projection to a scalar so every output coordinate matters.
      Tensor weights;
      {
        Tape tape(TapeOptions{.track_params = false});
        std::vector<Var> in;
        for (auto* p : params) in.push_back(tape.param(*p));
        Var y = c.build(in);
        weights = c.projection.empty() ? random_tensor(rng, y.shape(), 0.5, 1.5) : c.projection;
      }
      LossFn f = [&](Tape& tape) {
        std::vector<Var> in;
        for (auto* p : params) in.push_back(tape.param(*p));
        return ops::sum(ops::mul_const(c.build(in), weights));
      };
      GradCheckOptions opt;
      opt.step = step;
      const auto r = finite_diff_check(f, params, opt);
      check.max_rel_error = std::max(check.max_rel_error, r.max_rel_error);
    }
    out.push_back(check);
  }
  return out;
}

}  // namespace csn
