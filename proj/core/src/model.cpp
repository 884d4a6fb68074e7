// SPDX-License-Identifier: Apache-2.0
#include "csn/model.hpp"

#include <chrono>
#include <charconv>
#include <fstream>
#include <limits>
#include <sstream>

#include "csn/tensor_io.hpp"

namespace csn {

namespace {

std::string number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string sizes(const std::vector<std::size_t>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::size_t value_input_dim(const ModelSpec& s) {
  if (s.cond.kind == ConditioningKind::DirectFeedback) return s.net.classes;
  return s.cond.preprocess ? 2 : 1;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

ModelSpec model_spec_from_config(const Config& c) {
  ModelSpec s;
  NetworkSpec& n = s.net;
  n.arch = parse_arch(c.get("model.arch"));
  n.classes = c.get_size("model.classes");
  n.input_dim = c.get_size("model.input_dim");
  n.image_size = c.get_size("model.image_size");
  n.vocab = c.get_size("model.vocab");
  n.seq_len = c.get_size("model.seq_len");
  n.embed_dim = c.get_size("model.embed_dim");
  n.hidden = c.get_sizes("model.hidden");
  n.activation = parse_activation(c.get("model.activation"));
  n.filters = c.get_size("model.filters");
  n.conv_layers = c.get_size("model.conv_layers");
  n.res_filters = c.get_sizes("model.res_filters");
  n.res_divisor = c.get_size("model.res_divisor");
  n.lstm_layers = c.get_size("model.lstm_layers");
  n.lstm_hidden = c.get_size("model.lstm_hidden");
  n.csn_layers = c.get("model.csn_layers") == "all" ? std::numeric_limits<std::size_t>::max()
                                                    : c.get_size("model.csn_layers");
  n.dropout = c.get_double("model.dropout");
  if (n.dropout < 0.0 || n.dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
  n.shift_mode = parse_shift_mode(c.get("ablation.shift_mode"));
  n.granularity = parse_granularity(c.get("ablation.resblock_shift_granularity"));
  if (n.conv_layers == 0 && n.arch == Arch::CNN) throw ConfigError("model.conv_layers must be positive");
  if (n.res_filters.empty() && n.arch == Arch::ResNet) throw ConfigError("model.res_filters is empty");
  if (n.lstm_layers == 0 && input_kind(n.arch) == InputKind::Sequence) {
    throw ConfigError("model.lstm_layers must be positive");
  }
  if (n.seq_len == 0 || n.input_dim == 0 || n.image_size == 0) {
    throw ConfigError("model input sizes must be positive");
  }

  s.cond.kind = parse_conditioning(c.get("cond.mode"));
  s.cond.p = c.get_double("cond.p");
  if (!(s.cond.p > 0.0)) throw ConfigError("cond.p must be positive");
  s.stop_grad = c.get_bool("cond.stop_grad");
  s.attention = parse_attention(c.get("memory.attention"));
  s.value = parse_value_kind(c.get("memory.value"));
  s.value_hidden = c.get_size("memory.value_hidden");
  s.key_dim = c.get_size("memory.key_dim");
  s.key_hidden = c.get_size("memory.key_hidden");
  s.shifts = c.get_bool("model.shifts");
  s.cond.preprocess = s.value != ValueKind::ScalarLambda;

  if (s.value == ValueKind::ScalarLambda && s.cond.kind != ConditioningKind::Gradient) {
    throw ConfigError("memory.value = scalar_lambda requires cond.mode = grad");
  }
  if (!s.stop_grad && s.cond.kind == ConditioningKind::Gradient) {
    throw ConfigError("cond.stop_grad = false needs second-order gradients in grad mode; use df");
  }
  if (s.key_dim == 0 || s.value_hidden == 0 || s.key_hidden == 0) {
    throw ConfigError("memory sizes must be positive");
  }
  return s;
}

Config model_spec_to_config(const ModelSpec& s) {
  Config c;
  const NetworkSpec& n = s.net;
  c.set("model.arch", to_string(n.arch));
  c.set("model.classes", std::to_string(n.classes));
  c.set("model.input_dim", std::to_string(n.input_dim));
  c.set("model.image_size", std::to_string(n.image_size));
  c.set("model.vocab", std::to_string(n.vocab));
  c.set("model.seq_len", std::to_string(n.seq_len));
  c.set("model.embed_dim", std::to_string(n.embed_dim));
  c.set("model.hidden", sizes(n.hidden));
  c.set("model.activation", to_string(n.activation));
  c.set("model.filters", std::to_string(n.filters));
  c.set("model.conv_layers", std::to_string(n.conv_layers));
  c.set("model.res_filters", sizes(n.res_filters));
  c.set("model.res_divisor", std::to_string(n.res_divisor));
  c.set("model.lstm_layers", std::to_string(n.lstm_layers));
  c.set("model.lstm_hidden", std::to_string(n.lstm_hidden));
  c.set("model.csn_layers", n.csn_layers == std::numeric_limits<std::size_t>::max()
                                ? "all"
                                : std::to_string(n.csn_layers));
  c.set("model.dropout", number(n.dropout));
  c.set("model.shifts", s.shifts ? "true" : "false");
  c.set("cond.mode", to_string(s.cond.kind));
  c.set("cond.p", number(s.cond.p));
  c.set("cond.stop_grad", s.stop_grad ? "true" : "false");
  c.set("memory.attention", to_string(s.attention));
  c.set("memory.value", to_string(s.value));
  c.set("memory.value_hidden", std::to_string(s.value_hidden));
  c.set("memory.key_dim", std::to_string(s.key_dim));
  c.set("memory.key_hidden", std::to_string(s.key_hidden));
  c.set("ablation.shift_mode", to_string(n.shift_mode));
  c.set("ablation.resblock_shift_granularity", to_string(n.granularity));
  return c;
}

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw DimensionError("label " + std::to_string(labels[i]) + " >= " + std::to_string(classes));
    t.at(i, labels[i]) = 1.0;
  }
  return t;
}

CSNModel::CSNModel(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  Rng rng(seed);
  net_ = std::make_unique<BaseNetwork>(spec.net, store_, "base.", rng);
  if (spec.shifts) {
    if (net_->slots().empty()) throw ConfigError("model has no CSN layers (model.csn_layers = 0)");
    key_ = std::make_unique<KeyFunction>(spec.net, spec.key_dim, spec.key_hidden, store_, rng);
    value_ = std::make_unique<ValueFunction>(spec.value, value_input_dim(spec), spec.value_hidden,
                                             store_, rng);
  }
}

ConditioningInfo CSNModel::conditioning(const Tensor& x, const Tensor& y) const {
  return extract_info(*net_, x, y, spec_.cond);
}

DescribeResult CSNModel::describe(Tape& tape, const Tensor& x, const Tensor& y,
                                  const ConditioningInfo* frozen) const {
  if (!spec_.shifts) throw UsageError("describe: the shift-disabled control has no memory");
  if (x.rank() == 0 || x.dim(0) == 0) throw UsageError("describe: empty description");
  DescribeResult out;
  const auto t0 = std::chrono::steady_clock::now();
  if (frozen != nullptr) {
    out.bank = write_memory(tape, x, *frozen, *key_, *value_);
  } else if (spec_.stop_grad) {
    const ConditioningInfo info = conditioning(x, y);
    out.extract_ms = elapsed_ms(t0);
    out.bank = write_memory(tape, x, info, *key_, *value_);
  } else {
    // Direct feedback on the training tape: the description forward and the
    // information it yields stay differentiable.
    NetForward fwd = net_->forward(tape, x);
    Var info = df_info_on_tape(tape, *net_, fwd, y);
    out.extract_ms = elapsed_ms(t0);
    std::vector<std::size_t> offsets{0};
    for (const auto& s : net_->slots()) offsets.push_back(offsets.back() + s.width);
    out.bank = write_memory(tape, x, info, offsets, *key_, *value_);
  }
  return out;
}

Var CSNModel::predict_logits(Tape& tape, const MemoryBank* bank, const Tensor& query_x,
                             Rng* dropout) const {
  ForwardOptions fo;
  fo.dropout_rng = dropout;
  if (spec_.shifts && bank != nullptr) {
    if (bank->offsets.size() != net_->slots().size() + 1 ||
        bank->offsets.back() != net_->shift_width()) {
      throw ConfigError("memory bank does not match the model's CSN layers");
    }
    fo.shifts = read_shifts(tape, query_x, *bank, *key_, spec_.attention).shifts;
  }
  return net_->forward(tape, query_x, fo).logits;
}

Tensor CSNModel::predict(const Tensor& support_x, const Tensor& support_y,
                         const Tensor& query_x) const {
  Tape tape(TapeOptions{.track_params = false});
  std::optional<MemoryBank> bank;
  if (spec_.shifts) bank = describe(tape, support_x, support_y).bank;
  return ops::softmax(predict_logits(tape, bank ? &*bank : nullptr, query_x)).value();
}

LossResult CSNModel::episode_loss(Tape& tape, const Episode& ep, Rng* dropout,
                                  const ConditioningInfo* frozen) const {
  LossResult r;
  std::optional<MemoryBank> bank;
  if (spec_.shifts) {
    DescribeResult d = describe(tape, ep.support_x, ep.support_y, frozen);
    r.extract_ms = d.extract_ms;
    bank = std::move(d.bank);
  }
  r.logits = predict_logits(tape, bank ? &*bank : nullptr, ep.query_x, dropout);
  r.loss = ops::softmax_cross_entropy(r.logits, tape.constant(ep.query_y));
  const Tensor& z = r.logits.value();
  for (std::size_t j = 0; j < z.dim(0); ++j) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.dim(1); ++c) {
      if (z.at(j, c) > z.at(j, best)) best = c;
    }
    if (best == ep.query_labels.at(j)) ++r.correct;
  }
  return r;
}

namespace {
constexpr char kModelMagic[4] = {'C', 'S', 'N', 'M'};
}

void save_model(const CSNModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write model file " + path.string());
  os.write(kModelMagic, 4);
  le::put_u8(os, kModelFileVersion);
  const std::string text = model_spec_to_config(model.spec()).to_text(model_key_prefixes());
  le::put_u32(os, std::uint32_t(text.size()));
  os.write(text.data(), std::streamsize(text.size()));
  const ParameterStore& ps = model.params();
  le::put_u32(os, std::uint32_t(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    le::put_u32(os, std::uint32_t(ps[i].name.size()));
    os.write(ps[i].name.data(), std::streamsize(ps[i].name.size()));
    csnt::write(os, ps[i].value, csnt::kVersionF64);
  }
  if (!os) throw Error("failed writing model file " + path.string());
}

std::unique_ptr<CSNModel> load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open model file " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kModelMagic)) {
    throw LoadError(path.string() + ": not a CSNM model file");
  }
  const auto version = le::get_u8(is);
  if (version != kModelFileVersion) {
    throw LoadError(path.string() + ": model file version " + std::to_string(version) +
                    ", expected " + std::to_string(kModelFileVersion));
  }
  const auto text_len = le::get_u32(is);
  std::string text(text_len, '\0');
  if (!is.read(text.data(), text_len)) throw LoadError(path.string() + ": truncated model spec");
  ModelSpec spec;
  try {
    spec = model_spec_from_config(resolve(Config::parse(text, path.string())));
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": bad model spec: " + e.what());
  }
  auto model = std::make_unique<CSNModel>(spec, 0);
  ParameterStore& ps = model->params();
  const auto count = le::get_u32(is);
  if (count != ps.size()) {
    throw LoadError(path.string() + ": expected " + std::to_string(ps.size()) +
                    " parameters for this architecture, found " + std::to_string(count));
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto len = le::get_u32(is);
    std::string name(len, '\0');
    if (len > 4096 || !is.read(name.data(), len)) throw LoadError(path.string() + ": truncated parameter name");
    if (name != ps[i].name) {
      throw LoadError(path.string() + ": parameter " + std::to_string(i) + " expected '" +
                      ps[i].name + "', found '" + name + "'");
    }
    Tensor v = csnt::read(is);
    if (v.shape() != ps[i].value.shape()) {
      throw LoadError(path.string() + ": parameter '" + name + "' expected shape " +
                      shape_str(ps[i].value.shape()) + ", found " + shape_str(v.shape()));
    }
    ps[i].value = std::move(v);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw LoadError(path.string() + ": trailing bytes");
  return model;
}

void check_model_compatible(const ModelSpec& model, const ModelSpec& expected) {
  if (model.net.arch != expected.net.arch) {
    throw ConfigError("model architecture is " + to_string(model.net.arch) + ", config expects " +
                      to_string(expected.net.arch));
  }
  if (model.net.classes != expected.net.classes) {
    throw ConfigError("model has " + std::to_string(model.net.classes) +
                      " output classes, episodes have " + std::to_string(expected.net.classes));
  }
  const InputKind k = input_kind(model.net.arch);
  if ((k == InputKind::Vector && model.net.input_dim != expected.net.input_dim) ||
      (k == InputKind::Image && model.net.image_size != expected.net.image_size) ||
      (k == InputKind::Sequence &&
       (model.net.seq_len != expected.net.seq_len || model.net.vocab != expected.net.vocab))) {
    throw ConfigError("model input size does not match the task source");
  }
}

}  // namespace csn
