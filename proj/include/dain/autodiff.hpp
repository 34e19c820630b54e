#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dain/tensor.hpp"

namespace dain::ad {

/// Which training stage may update a parameter.
enum class ParamGroup : std::uint8_t { Backbone = 0, Head = 1, Classifier = 2 };

std::string_view group_name(ParamGroup g);

struct Parameter {
  Parameter(std::string name, Tensor value, ParamGroup group = ParamGroup::Head);

  std::string name;
  Tensor value;
  Tensor grad;
  ParamGroup group;
  bool requires_grad = true;

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  DType dtype() const { return value().dtype(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Accumulates into the gradient buffers of the inputs (null where no grad is needed).
using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor* const> in_grads)>;

/// Ordered record of primitive applications for one forward pass.
/// Single-threaded; one tape per training step or concurrent forward.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t);
  /// Leaf that requires grad; read its gradient with grad() after backward().
  Var leaf(Tensor t);
  /// Leaf bound to a parameter; backward() accumulates into p.grad.
  Var param(Parameter& p);

  /// Appends a node. Throws NumericError if value holds NaN/Inf.
  Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn fn);

  /// Reverse sweep from a scalar. Gradients accumulate; callers zero parameter grads between steps.
  void backward(Var loss);

  /// Gradient of a node after backward(); zeros when the node was not reached.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }
  /// Nodes whose adjoint ran during the last backward().
  std::size_t last_backward_visits() const { return visits_; }

 private:
  friend class Var;
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn fn;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Tensor& grad_buffer(std::size_t id);

  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
  bool grad_enabled_;
  std::size_t visits_ = 0;
};

// ---------------------------------------------------------------------------
// Primitive set. Each op checks shapes, records to the tape of its inputs and
// carries an analytic adjoint.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var log(Var a);
Var exp(Var a);

/// [M,K] x [K,N] -> [M,N]
Var matmul(Var a, Var b);
/// x[N,in] * W[out,in]^T + b[out]
Var linear(Var x, Var weight, Var bias);

/// input [N,Ci,H,W], weight [Co,Ci,kh,kw], bias [Co]. Output extent must divide exactly.
Var conv2d(Var input, Var weight, Var bias, std::size_t stride = 1, std::size_t pad = 0);
/// input [N,Ci,D,H,W], weight [Co,Ci,kd,kh,kw], bias [Co]; stride 1, same pad on all three axes.
Var conv3d(Var input, Var weight, Var bias, std::size_t pad = 1);

Var relu(Var x);
/// Floor-mode output extent; ties resolve to the first maximum in scan order.
Var max_pool2d(Var x, std::size_t kernel, std::size_t stride);
/// [N,C,H,W] -> [N,C]
Var global_avg_pool(Var x);

/// Row-wise over the last axis.
Var softmax(Var x);
Var log_softmax(Var x);
/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);
/// Mean over rows of -logp[label].
Var nll_loss(Var logp, std::span<const int> labels);

Var concat(const std::vector<Var>& xs, std::size_t axis);
/// Stacks equal-shape tensors along a new leading axis.
Var stack(const std::vector<Var>& xs);
/// Elementwise max; the gradient goes to a on ties.
Var maximum(Var a, Var b);
/// Max over the leading axis: [V, ...] -> [...]; ties go to the lowest index.
Var reduce_max0(Var x);

/// Row-wise outer product: a[N,I], b[N,J] -> [N, I*J] (rank-1 inputs give [I*J]).
Var outer(Var a, Var b);

inline constexpr double kL2Eps = 1e-12;
/// Row-wise x / max(||x||, eps) over the last axis.
Var l2_normalize(Var x);
/// Count of rows that hit the eps guard since process start (or last reset).
std::size_t l2_guard_hits();
void reset_l2_guard_hits();

Var reshape(Var x, Shape shape);
/// [N, ...] -> [N, prod(...)]
Var flatten(Var x);
Var permute(Var x, const std::vector<std::size_t>& perm);
/// Inverted dropout. Identity when !train or p == 0.
Var dropout(Var x, double p, bool train, std::mt19937_64& rng);

Var sum(Var x);
Var mean(Var x);

}  // namespace dain::ad
