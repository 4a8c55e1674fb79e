#pragma once

// Minimal tape-based reverse-mode differentiation over Tensor-valued nodes.
//
// A Tape records nodes in creation order, which is a topological order, so
// backward() is a single reverse sweep. Any node's adjoint can be read after
// backward(), which is how gradients with respect to intermediate activations
// are obtained.

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ktcr/tensor.hpp"

namespace ktcr::diff {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its Tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    double scalar() const { return value().item(); }
    std::size_t size() const { return value().size(); }
    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input.
    Var leaf(Tensor value);
    /// Non-differentiable input; receives no adjoint.
    Var constant(Tensor value);

    /// Records a computed node. `op` names the primitive in error messages.
    Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward, const char* op);

    /// Name an intermediate node so its adjoint is reported by value_and_grad.
    void watch(std::string name, Var v) { watched_.emplace(std::move(name), v); }
    const std::map<std::string, Var>& watched() const noexcept { return watched_; }

    /// Reverse sweep from a scalar root. May be called once per tape.
    void backward(Var root);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& grad(Var v) const;
    Tensor& adjoint(std::size_t id) { return grads_[id]; }
    bool tracks(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::map<std::string, Var> watched_;
    bool swept_ = false;
};

// ---- primitives ----------------------------------------------------------

Var matvec(Var w, Var x);              // [m,n] x [n] -> [m]
Var affine(Var w, Var x, Var b);       // w x + b
Var row(Var m, std::size_t i);         // i-th row of a matrix, as a vector
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                 // element-wise
Var scale(Var a, double s);
Var shift(Var a, double s);            // a + s, element-wise
Var tanh(Var a);
Var sigmoid(Var a);
Var abs(Var a);
Var sum(std::span<const Var> items);   // element-wise sum of same-shaped nodes
Var mean(std::span<const Var> items);  // element-wise mean of same-shaped nodes
Var reduce_mean(Var a);                // mean over elements -> scalar
Var dot(Var a, Var b);                 // -> scalar
Var squared_norm(Var a);               // -> scalar
Var cosine(Var a, Var b);              // -> scalar; throws on zero-norm input
Var softmax(Var logits);
Var softmax_cross_entropy(Var logits, std::size_t label);  // -> scalar

// ---- whole-function helpers ------------------------------------------------

/// Builds a scalar-valued graph from parameter nodes.
using GraphFn = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

struct ValueAndGrad {
    double value = 0.0;
    ParamSet grad;
    /// Adjoints of every node the graph registered with Tape::watch.
    std::map<std::string, Tensor> activation_grads;
};

ValueAndGrad value_and_grad(const GraphFn& fn, const ParamSet& at);
double evaluate(const GraphFn& fn, const ParamSet& at);

/// Central differences per coordinate. eps must lie in (0, 1e-2].
ParamSet finite_difference(const GraphFn& fn, const ParamSet& at, double eps);

struct GradReport {
    Tensor analytic;
    Tensor numeric;
    double max_rel_err = 0.0;
};

inline constexpr double kRelErrFloor = 1e-8;

GradReport compare_gradients(const Tensor& analytic, const Tensor& numeric);
/// Flattens both gradient collections in name order before comparing.
GradReport compare_gradients(const ParamSet& analytic, const ParamSet& numeric);
GradReport check_gradients(const GraphFn& fn, const ParamSet& at, double eps);

} // namespace ktcr::diff
