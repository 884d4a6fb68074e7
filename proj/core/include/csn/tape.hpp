// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "csn/tensor.hpp"

namespace csn {

/// A learned tensor plus its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad();
};

/// Owns parameters with stable addresses, in registration order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(std::string name, Tensor init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  double grad_norm() const;

  /// Values only, in registration order.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct TapeOptions {
  /// When false, param() records constants and no parameter gradients are
  /// produced. Used for conditioning extraction on scratch tapes.
  bool track_params = true;
};

/// Process-wide instrumentation counters.
struct TapeCounters {
  static std::atomic<std::uint64_t> backward_traversals;
  static std::atomic<std::uint64_t> ce_clamps;
};

/// Fingerprint of the branch decisions taken by non-smooth operations (relu
/// signs, max-pool winners, argmax reads, probability clamps) on this thread
/// while the trace is alive. Two evaluations with equal fingerprints lie on
/// the same smooth piece of a piecewise-smooth function. Traces do not nest.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t fingerprint() const { return hash_; }

  static bool active();
  static void note(std::uint64_t decision);

 private:
  std::uint64_t hash_ = 0;
};

/// Wengert list with reverse-mode accumulation.
///
/// Nodes are appended in execution order, so every parent id is smaller than
/// its child id. backward() walks ids in decreasing order from the root and
/// visits each node at most once.
class Tape {
 public:
  /// Backward rule: receives the node's output gradient and pushes
  /// contributions into its parents through accumulate()/grad_buffer().
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(TapeOptions options = {});
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  /// Leaf bound to a parameter; one node per parameter per tape.
  Var param(Parameter& p);

  /// Marks an intermediate node for gradient capture and names it. Nodes
  /// recorded afterwards that depend on it participate in backward().
  Var capture(Var v, const std::string& name);
  std::optional<Var> find(const std::string& name) const;

  /// Records a new node. Checks finiteness and ownership of the parents.
  Var record(Tensor value, std::span<const Var> parents, const char* op, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> parents, const char* op,
             BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), op,
                  std::move(backward));
  }

  void backward(Var root);
  std::uint64_t backward_count() const { return backward_count_; }

  /// Gradient of the last backward() at v; zeros if none reached it.
  Tensor grad(Var v) const;
  bool has_grad(Var v) const;
  /// Adds every parameter leaf's gradient into Parameter::grad.
  void accumulate_param_grads();

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }
  /// Mutable gradient storage for a node, zero-initialized on first use.
  std::span<double> grad_buffer(int id);
  void accumulate(int id, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(int id) const { return nodes_[id].op; }
  bool owns(Var v) const { return v.tape_ == this && v.id_ >= 0 && v.id_ < int(nodes_.size()); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    const char* op = "";
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  TapeOptions options_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::unordered_map<std::string, int> names_;
  std::uint64_t backward_count_ = 0;
};

}  // namespace csn
