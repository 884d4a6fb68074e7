// SPDX-License-Identifier: Apache-2.0
#include "csn/conditioning.hpp"

#include <cmath>

namespace csn {

std::string to_string(ConditioningKind k) {
  return k == ConditioningKind::Gradient ? "grad" : "df";
}

ConditioningKind parse_conditioning(const std::string& s) {
  if (s == "grad" || s == "gradient") return ConditioningKind::Gradient;
  if (s == "df") return ConditioningKind::DirectFeedback;
  throw ConfigError("unknown conditioning mode '" + s + "' (expected grad|df)");
}

std::pair<double, double> preprocess_gradient(double g, double p) {
  if (std::abs(g) >= std::exp(-p)) return {std::log(std::abs(g)) / p, g > 0 ? 1.0 : -1.0};
  return {-1.0, std::exp(p) * g};
}

Tensor ConditioningInfo::slot(std::size_t t) const {
  const std::size_t begin = offsets.at(t), end = offsets.at(t + 1);
  Tensor out({examples, end - begin, m});
  for (std::size_t i = 0; i < examples; ++i) {
    for (std::size_t j = begin; j < end; ++j) {
      for (std::size_t c = 0; c < m; ++c) {
        out[(i * (end - begin) + (j - begin)) * m + c] = values[(i * width + j) * m + c];
      }
    }
  }
  return out;
}

namespace {

ConditioningInfo empty_info(const BaseNetwork& net, std::size_t n, std::size_t m) {
  ConditioningInfo info;
  info.examples = n;
  info.m = m;
  info.offsets.push_back(0);
  for (const auto& s : net.slots()) info.offsets.push_back(info.offsets.back() + s.width);
  info.width = info.offsets.back();
  if (n == 0) throw UsageError("conditioning: empty description");
  if (info.width == 0) throw ConfigError("conditioning: network has no CSN layers");
  info.values = Tensor({n * info.width, m});
  return info;
}

// Mean over consecutive groups of a flat per-example unit vector.
double group_mean(std::span<const double> units, std::size_t j, std::size_t group) {
  double s = 0.0;
  for (std::size_t u = 0; u < group; ++u) s += units[j * group + u];
  return s / double(group);
}

void check_labels(const Tensor& x, const Tensor& y, std::size_t classes) {
  if (y.rank() != 2 || y.dim(1) != classes || y.dim(0) != x.dim(0)) {
    throw DimensionError("labels must be one-hot [" + std::to_string(x.dim(0)) + " x " +
                         std::to_string(classes) + "], got " + shape_str(y.shape()));
  }
}

}  // namespace

ConditioningInfo extract_gradient_info(const BaseNetwork& net, const Tensor& x, const Tensor& y,
                                       const ConditioningMode& mode) {
  check_labels(x, y, net.spec().classes);
  const std::size_t n = x.dim(0);
  const std::size_t m = mode.preprocess ? 2 : 1;
  ConditioningInfo info = empty_info(net, n, m);
  const auto& slots = net.slots();
  static const std::string prefix = "cond.";
  for (std::size_t i = 0; i < n; ++i) {
    Tape tape(TapeOptions{.track_params = false});
    ForwardOptions fo;
    fo.capture_prefix = prefix;
    NetForward fwd = net.forward(tape, x.slice_rows(i, i + 1), fo);
    Var loss = ops::softmax_cross_entropy(fwd.logits, tape.constant(y.slice_rows(i, i + 1)));
    tape.backward(loss);
    for (std::size_t t = 0; t < slots.size(); ++t) {
      auto node = tape.find(prefix + slots[t].name);
      if (!node) {
        throw ConfigError("conditioning: slot '" + slots[t].name + "' has no pre-activation node");
      }
      const Tensor g = tape.grad(*node);
      for (std::size_t j = 0; j < slots[t].width; ++j) {
        const double v = group_mean(g.data(), j, slots[t].group);
        double* row = &info.values[(i * info.width + info.offsets[t] + j) * m];
        if (mode.preprocess) {
          const auto [a, b] = preprocess_gradient(v, mode.p);
          row[0] = a;
          row[1] = b;
        } else {
          row[0] = v;
        }
      }
    }
  }
  return info;
}

ConditioningInfo extract_df_info(const BaseNetwork& net, const Tensor& x, const Tensor& y) {
  check_labels(x, y, net.spec().classes);
  const std::size_t n = x.dim(0);
  const std::size_t classes = net.spec().classes;
  ConditioningInfo info = empty_info(net, n, classes);
  Tape tape(TapeOptions{.track_params = false});
  NetForward fwd = net.forward(tape, x);
  const Tensor probs = ops::softmax(fwd.logits).value();
  const auto& slots = net.slots();
  for (std::size_t t = 0; t < slots.size(); ++t) {
    const Tensor& a = fwd.preacts[t].value();
    const std::size_t units = a.size() / n;
    const Tensor deriv = activation_derivative(a, slots[t].activation);
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const double> di(deriv.ptr() + i * units, units);
      for (std::size_t j = 0; j < slots[t].width; ++j) {
        const double s = group_mean(di, j, slots[t].group);
        double* row = &info.values[(i * info.width + info.offsets[t] + j) * classes];
        for (std::size_t c = 0; c < classes; ++c) row[c] = s * (probs.at(i, c) - y.at(i, c));
      }
    }
  }
  return info;
}

ConditioningInfo extract_recurrent_info(const BaseNetwork& net, const Tensor& x, const Tensor& y,
                                        const ConditioningMode& mode) {
  if (input_kind(net.spec().arch) != InputKind::Sequence) {
    throw UsageError("recurrent conditioning requires a sequence model");
  }
  if (x.rank() != 2 || x.dim(1) != net.spec().seq_len) {
    throw UsageError("recurrent conditioning: sequences must be padded to length " +
                     std::to_string(net.spec().seq_len) + ", got " + shape_str(x.shape()));
  }
  return extract_info(net, x, y, mode);
}

ConditioningInfo extract_info(const BaseNetwork& net, const Tensor& x, const Tensor& y,
                              const ConditioningMode& mode) {
  return mode.kind == ConditioningKind::Gradient ? extract_gradient_info(net, x, y, mode)
                                                 : extract_df_info(net, x, y);
}

Var df_info_on_tape(Tape& tape, const BaseNetwork& net, const NetForward& fwd, const Tensor& y) {
  const auto& slots = net.slots();
  const std::size_t n = y.dim(0);
  Var err = ops::sub(ops::softmax(fwd.logits), tape.constant(y));
  std::vector<Var> derivs;
  for (std::size_t t = 0; t < slots.size(); ++t) {
    Var a = fwd.preacts[t];
    const std::size_t units = a.value().size() / n;
    if (slots[t].activation == Activation::Tanh) {
      if (slots[t].group != 1) throw ConfigError("tanh slots must be unit-granular");
      derivs.push_back(ops::tanh_derivative(ops::reshape(a, {n, units})));
      continue;
    }
    // relu' and identity' are piecewise constant: no gradient to propagate.
    const Tensor d = activation_derivative(a.value(), slots[t].activation);
    Tensor agg({n, slots[t].width});
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const double> di(d.ptr() + i * units, units);
      for (std::size_t j = 0; j < slots[t].width; ++j) agg.at(i, j) = group_mean(di, j, slots[t].group);
    }
    derivs.push_back(tape.constant(std::move(agg)));
  }
  return ops::row_outer(derivs.size() == 1 ? derivs[0] : ops::concat_cols(derivs), err);
}

}  // namespace csn
