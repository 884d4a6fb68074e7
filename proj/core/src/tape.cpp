// SPDX-License-Identifier: Apache-2.0
#include "csn/tape.hpp"

#include <cmath>

#include "csn/rng.hpp"

namespace csn {

std::atomic<std::uint64_t> TapeCounters::backward_traversals{0};

namespace {
thread_local BranchTrace* current_trace = nullptr;
}  // namespace

BranchTrace::BranchTrace() {
  if (current_trace != nullptr) throw UsageError("BranchTrace: traces do not nest");
  current_trace = this;
}

BranchTrace::~BranchTrace() { current_trace = nullptr; }

bool BranchTrace::active() { return current_trace != nullptr; }

void BranchTrace::note(std::uint64_t decision) {
  if (current_trace != nullptr) {
    current_trace->hash_ = splitmix64(current_trace->hash_ ^ (decision + 0x9e3779b97f4a7c15ULL));
  }
}
std::atomic<std::uint64_t> TapeCounters::ce_clamps{0};

void Parameter::zero_grad() {
  for (auto& g : grad.data()) g = 0.0;
}

Parameter& ParameterStore::add(std::string name, Tensor init) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_.emplace(name, params_.size());
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init)));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

double ParameterStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) {
    for (double g : p->grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

std::vector<Tensor> ParameterStore::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void ParameterStore::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) {
    throw UsageError("restore: expected " + std::to_string(params_.size()) + " tensors, got " +
                     std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i]->value.shape()) {
      throw DimensionError("restore: parameter '" + params_[i]->name + "' expects " +
                           shape_str(params_[i]->value.shape()) + ", got " +
                           shape_str(values[i].shape()));
    }
    params_[i]->value = values[i];
  }
}

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("value() on an empty Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->needs_grad(id_); }

Tape::Tape(TapeOptions options) : options_(options) { nodes_.reserve(256); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("constant", "non-finite value in constant");
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw NumericError("leaf", "non-finite value in leaf");
  Node n;
  n.value = std::move(value);
  n.op = "leaf";
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.op = "param";
  if (options_.track_params) {
    n.param = &p;
    n.requires_grad = true;
  }
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id_);
  return v;
}

Var Tape::capture(Var v, const std::string& name) {
  if (!owns(v)) throw UsageError("capture: node '" + name + "' is not on this tape");
  nodes_[v.id_].requires_grad = true;
  if (!name.empty()) names_[name] = v.id_;
  return v;
}

std::optional<Var> Tape::find(const std::string& name) const {
  auto it = names_.find(name);
  if (it == names_.end()) return std::nullopt;
  return Var(const_cast<Tape*>(this), it->second);
}

Var Tape::record(Tensor value, std::span<const Var> parents, const char* op,
                 BackwardFn backward) {
  bool rg = false;
  for (const auto& p : parents) {
    if (!owns(p)) throw UsageError(std::string(op) + ": operand is not on this tape");
    rg = rg || nodes_[p.id_].requires_grad;
  }
  if (!value.all_finite()) {
    throw NumericError(op, std::string("non-finite output in op '") + op + "'");
  }
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = rg;
  if (rg) n.backward = std::move(backward);
  return push(std::move(n));
}

std::span<double> Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad.data();
}

void Tape::accumulate(int id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  auto buf = grad_buffer(id);
  auto src = g.data();
  if (src.size() != buf.size()) {
    throw DimensionError(std::string("gradient size mismatch flowing into '") + nodes_[id].op +
                         "'");
  }
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += src[i];
}

void Tape::backward(Var root) {
  if (!owns(root)) throw UsageError("backward: root is not on this tape");
  if (root.value().size() != 1) {
    throw UsageError("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  ++backward_count_;
  TapeCounters::backward_traversals.fetch_add(1, std::memory_order_relaxed);
  if (!nodes_[root.id_].requires_grad) return;
  grad_buffer(root.id_)[0] = 1.0;
  for (int id = root.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    // Rules only touch parent buffers, which have smaller ids.
    n.backward(*this, n.grad);
  }
}

Tensor Tape::grad(Var v) const {
  if (!owns(v)) throw UsageError("grad: node is not on this tape");
  const Node& n = nodes_[v.id_];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

bool Tape::has_grad(Var v) const { return owns(v) && !nodes_[v.id_].grad.empty(); }

void Tape::accumulate_param_grads() {
  for (auto& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    auto dst = n.param->grad.data();
    auto src = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

}  // namespace csn
