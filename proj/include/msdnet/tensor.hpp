#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace msdnet {

// Shape/contract violations on tensor operations. Message names the
// offending axis or dimension.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse (e.g. backward on a non-scalar node).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Non-finite values where finiteness is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense n-dimensional double tensor. `grad` stays empty unless the tensor is
/// used as a trainable parameter.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);
  static Tensor from(std::vector<int> s, std::vector<double> d);

  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  void ensure_grad();
  void zero_grad();
  bool all_finite() const;
  std::string shape_str() const;

  // rank-3 [C,H,W] accessors
  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * static_cast<std::size_t>(shape[1]) +
                 static_cast<std::size_t>(y)) *
                    static_cast<std::size_t>(shape[2]) +
                static_cast<std::size_t>(x)];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * static_cast<std::size_t>(shape[1]) +
                 static_cast<std::size_t>(y)) *
                    static_cast<std::size_t>(shape[2]) +
                static_cast<std::size_t>(x)];
  }
};

using NodeId = int;

/// Wengert list. Every operation appends one node holding its output value,
/// the input node ids and a backward rule; recording order is topological by
/// construction. backward() runs the rules in reverse and accumulates
/// gradients into every tracked node (and, for parameters, into the external
/// tensor's grad).
class Tape {
 public:
  NodeId constant(Tensor value);         // untracked leaf
  NodeId leaf(Tensor value);             // tracked leaf, tape-owned
  NodeId param(Tensor& external);        // tracked leaf bound to external storage

  const Tensor& val(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const std::vector<double>& grad(NodeId id) const;
  bool tracked(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].tracked; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Accumulates; call zero_all_grads() or use a fresh tape to reset.
  void backward(NodeId loss, bool into_externals = true);

  NodeId push(Tensor value, std::vector<NodeId> inputs,
              std::function<void(Tape&, NodeId)> backward_rule, const char* op);

  // Only valid inside a backward rule:
  std::span<const double> out_grad(NodeId id) const;
  double* in_grad(NodeId id);  // nullptr when `id` is untracked
  const std::vector<NodeId>& inputs_of(NodeId id) const {
    return nodes_[static_cast<std::size_t>(id)].inputs;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;  // accumulated across backward() calls
    bool tracked = false;
    Tensor* external = nullptr;
    std::vector<NodeId> inputs;
    std::function<void(Tape&, NodeId)> rule;
    const char* op = "";
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> pass_;  // pass-local gradient buffers
  std::vector<char> reachable_;
};

/// Binds parameter tensors onto a tape, memoizing so each parameter gets one
/// node per tape no matter how often it is referenced.
struct ParamBind {
  Tape& tape;
  std::unordered_map<const Tensor*, NodeId> ids;

  NodeId operator()(Tensor& t) {
    auto it = ids.find(&t);
    if (it != ids.end()) return it->second;
    const NodeId id = tape.param(t);
    ids.emplace(&t, id);
    return id;
  }
};

enum class Padding { same, valid };

// Convolution is cross-correlation (no kernel flip); same-padding zero-fills
// (k-1)/2 per side. Input rank 3 [Cin,H,W] or rank 4 [N,Cin,H,W].
NodeId conv2d(Tape& t, NodeId input, NodeId weight, NodeId bias, int stride = 1,
              Padding padding = Padding::same);
NodeId relu(Tape& t, NodeId x);
NodeId sigmoid(Tape& t, NodeId x);
// max backward routes to the first (row-major) argmax on ties
NodeId pool_max2x2(Tape& t, NodeId x);
NodeId pool_global_max(Tape& t, NodeId x);
NodeId pool_adaptive_avg(Tape& t, NodeId x, int bins);
NodeId pool_avg2x2(Tape& t, NodeId x);
NodeId resize_nearest(Tape& t, NodeId x, int factor);
NodeId resize_nearest_to(Tape& t, NodeId x, int out_h, int out_w);
NodeId concat_channels(Tape& t, const std::vector<NodeId>& parts);
NodeId fully_connected(Tape& t, NodeId x, NodeId weight, NodeId bias);
NodeId channel_scale(Tape& t, NodeId planes, NodeId gains);
NodeId reshape(Tape& t, NodeId x, std::vector<int> shape);
NodeId add(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);
NodeId scale(Tape& t, NodeId x, double c);
NodeId sum(Tape& t, NodeId x);

/// Central-finite-difference check of a scalar-valued tensor function.
/// Returns max over all input elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double gradient_check(const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& f,
                      std::vector<Tensor> inputs, double eps = 1e-5);

}  // namespace msdnet
