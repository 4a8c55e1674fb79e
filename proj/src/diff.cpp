#include "ktcr/diff.hpp"

#include <algorithm>
#include <cmath>

#include "ktcr/error.hpp"

namespace ktcr::diff {

namespace {

Tensor checked(Tensor t, const char* op)
{
    if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    return t;
}

void require(bool ok, const char* op, const std::string& detail)
{
    if (!ok) throw ShapeError(std::string("composition error in ") + op + ": " + detail);
}

Tape& tape_of(Var a)
{
    if (a.tape() == nullptr) throw ShapeError("composition error: uninitialised Var");
    return *a.tape();
}

Tape& tape_of(Var a, Var b)
{
    if (a.tape() != b.tape()) throw ShapeError("composition error: Vars from different tapes");
    return tape_of(a);
}

void accumulate(Tape& t, std::size_t id, const Tensor& g, double s = 1.0)
{
    if (!t.tracks(id)) return;
    auto& dst = t.adjoint(id);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * g[i];
}

} // namespace

const Tensor& Var::value() const
{
    if (tape_ == nullptr) throw ShapeError("composition error: uninitialised Var");
    return tape_->value(id_);
}

Var Tape::leaf(Tensor value)
{
    value = checked(std::move(value), "leaf");
    nodes_.push_back(Node{std::move(value), {}, {}, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value)
{
    value = checked(std::move(value), "constant");
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward, const char* op)
{
    value = checked(std::move(value), op);
    const bool rg = std::any_of(parents.begin(), parents.end(),
                                [this](std::size_t p) { return nodes_[p].requires_grad; });
    nodes_.push_back(Node{std::move(value), std::move(parents), rg ? std::move(backward) : BackwardFn{}, rg});
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root)
{
    if (root.tape() != this) throw ShapeError("backward: root belongs to another tape");
    if (value(root.id()).size() != 1) throw ShapeError("backward: root is not a scalar");
    if (swept_) throw ParameterError("backward: tape already swept");
    swept_ = true;

    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const auto& n : nodes_) {
        grads_.push_back(n.requires_grad ? Tensor::zeros(n.value.shape()) : Tensor{});
    }
    if (!nodes_[root.id()].requires_grad) return;
    grads_[root.id()][0] = 1.0;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
        auto& n = nodes_[id];
        if (n.requires_grad && n.backward) n.backward(*this, id);
    }
}

const Tensor& Tape::grad(Var v) const
{
    if (!swept_) throw ParameterError("grad: backward() has not been run");
    if (!nodes_[v.id()].requires_grad) {
        throw ParameterError("grad: node does not depend on any leaf");
    }
    return grads_[v.id()];
}

// ---- primitives ----------------------------------------------------------

Var matvec(Var w, Var x)
{
    auto& t = tape_of(w, x);
    const auto& W = w.value();
    const auto& X = x.value();
    require(W.rank() == 2 && X.rank() == 1 && W.cols() == X.size(), "matvec",
            shape_string(W.shape()) + " x " + shape_string(X.shape()));
    const std::size_t m = W.rows(), n = W.cols();
    Tensor out = Tensor::zeros({m});
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        const double* wr = W.data().data() + i * n;
        for (std::size_t j = 0; j < n; ++j) s += wr[j] * X[j];
        out[i] = s;
    }
    const auto wi = w.id(), xi = x.id();
    return t.push(std::move(out), {wi, xi}, [wi, xi, m, n](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        if (tp.tracks(wi)) {
            const auto& X = tp.value(xi);
            auto& gw = tp.adjoint(wi);
            for (std::size_t i = 0; i < m; ++i) {
                if (g[i] == 0.0) continue;
                double* gr = gw.data().data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gr[j] += g[i] * X[j];
            }
        }
        if (tp.tracks(xi)) {
            const auto& W = tp.value(wi);
            auto& gx = tp.adjoint(xi);
            for (std::size_t i = 0; i < m; ++i) {
                const double* wr = W.data().data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += wr[j] * g[i];
            }
        }
    }, "matvec");
}

Var affine(Var w, Var x, Var b) { return add(matvec(w, x), b); }

Var row(Var m, std::size_t i)
{
    auto& t = tape_of(m);
    const auto& M = m.value();
    require(M.rank() == 2 && i < M.rows(), "row",
            "index " + std::to_string(i) + " of " + shape_string(M.shape()));
    const std::size_t n = M.cols();
    const auto mi = m.id();
    return t.push(M.row(i), {mi}, [mi, i, n](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        auto& gm = tp.adjoint(mi);
        for (std::size_t j = 0; j < n; ++j) gm[i * n + j] += g[j];
    }, "row");
}

Var add(Var a, Var b)
{
    auto& t = tape_of(a, b);
    require(a.size() == b.size(), "add",
            shape_string(a.value().shape()) + " + " + shape_string(b.value().shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const auto ai = a.id(), bi = b.id();
    return t.push(std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        accumulate(tp, ai, g);
        accumulate(tp, bi, g);
    }, "add");
}

Var sub(Var a, Var b)
{
    auto& t = tape_of(a, b);
    require(a.size() == b.size(), "sub",
            shape_string(a.value().shape()) + " - " + shape_string(b.value().shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    const auto ai = a.id(), bi = b.id();
    return t.push(std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        accumulate(tp, ai, g);
        accumulate(tp, bi, g, -1.0);
    }, "sub");
}

Var mul(Var a, Var b)
{
    auto& t = tape_of(a, b);
    require(a.size() == b.size(), "mul",
            shape_string(a.value().shape()) + " * " + shape_string(b.value().shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const auto ai = a.id(), bi = b.id();
    return t.push(std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        const auto& A = tp.value(ai);
        const auto& B = tp.value(bi);
        if (tp.tracks(ai)) {
            auto& ga = tp.adjoint(ai);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (tp.tracks(bi)) {
            auto& gb = tp.adjoint(bi);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
        }
    }, "mul");
}

Var scale(Var a, double s)
{
    auto& t = tape_of(a);
    Tensor out = scaled(a.value(), s);
    const auto ai = a.id();
    return t.push(std::move(out), {ai}, [ai, s](Tape& tp, std::size_t self) {
        accumulate(tp, ai, tp.adjoint(self), s);
    }, "scale");
}

Var shift(Var a, double s)
{
    auto& t = tape_of(a);
    Tensor out = a.value();
    for (auto& v : out.values()) v += s;
    const auto ai = a.id();
    return t.push(std::move(out), {ai}, [ai](Tape& tp, std::size_t self) {
        accumulate(tp, ai, tp.adjoint(self));
    }, "shift");
}

Var tanh(Var a)
{
    auto& t = tape_of(a);
    Tensor out = a.value();
    for (auto& v : out.values()) v = std::tanh(v);
    const auto ai = a.id();
    return t.push(std::move(out), {ai}, [ai](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        const auto& y = tp.value(self);
        auto& ga = tp.adjoint(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    }, "tanh");
}

Var sigmoid(Var a)
{
    auto& t = tape_of(a);
    Tensor out = a.value();
    for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
    const auto ai = a.id();
    return t.push(std::move(out), {ai}, [ai](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        const auto& y = tp.value(self);
        auto& ga = tp.adjoint(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    }, "sigmoid");
}

Var abs(Var a)
{
    auto& t = tape_of(a);
    Tensor out = a.value();
    for (auto& v : out.values()) v = std::fabs(v);
    const auto ai = a.id();
    return t.push(std::move(out), {ai}, [ai](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        const auto& x = tp.value(ai);
        auto& ga = tp.adjoint(ai);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
        }
    }, "abs");
}

Var sum(std::span<const Var> items)
{
    require(!items.empty(), "sum", "no operands");
    auto& t = tape_of(items.front());
    Tensor out = Tensor::zeros(items.front().value().shape());
    std::vector<std::size_t> ids;
    ids.reserve(items.size());
    for (const auto& v : items) {
        tape_of(items.front(), v);
        require(v.size() == out.size(), "sum", "operand shapes differ");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += v.value()[i];
        ids.push_back(v.id());
    }
    auto parents = ids;
    return t.push(std::move(out), std::move(parents), [ids](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        for (auto id : ids) accumulate(tp, id, g);
    }, "sum");
}

Var mean(std::span<const Var> items)
{
    require(!items.empty(), "mean", "no operands");
    return scale(sum(items), 1.0 / static_cast<double>(items.size()));
}

Var reduce_mean(Var a)
{
    auto& t = tape_of(a);
    const auto n = a.size();
    require(n > 0, "reduce_mean", "empty tensor");
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const auto ai = a.id();
    return t.push(Tensor::scalar(s / static_cast<double>(n)), {ai}, [ai, n](Tape& tp, std::size_t self) {
        const double g = tp.adjoint(self)[0] / static_cast<double>(n);
        auto& ga = tp.adjoint(ai);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    }, "reduce_mean");
}

Var dot(Var a, Var b)
{
    auto& t = tape_of(a, b);
    require(a.size() == b.size(), "dot", "length mismatch");
    const auto ai = a.id(), bi = b.id();
    return t.push(Tensor::scalar(ktcr::dot(a.value().data(), b.value().data())), {ai, bi},
                  [ai, bi](Tape& tp, std::size_t self) {
                      const double g = tp.adjoint(self)[0];
                      accumulate(tp, ai, tp.value(bi), g);
                      accumulate(tp, bi, tp.value(ai), g);
                  }, "dot");
}

Var squared_norm(Var a)
{
    auto& t = tape_of(a);
    const auto ai = a.id();
    return t.push(Tensor::scalar(ktcr::dot(a.value().data(), a.value().data())), {ai},
                  [ai](Tape& tp, std::size_t self) {
                      accumulate(tp, ai, tp.value(ai), 2.0 * tp.adjoint(self)[0]);
                  }, "squared_norm");
}

Var cosine(Var a, Var b)
{
    auto& t = tape_of(a, b);
    require(a.size() == b.size(), "cosine", "length mismatch");
    const double na = norm(a.value().data());
    const double nb = norm(b.value().data());
    if (na == 0.0 || nb == 0.0) throw DegenerateDirectionError("cosine of a zero-norm vector");
    const double c = ktcr::dot(a.value().data(), b.value().data()) / (na * nb);
    const auto ai = a.id(), bi = b.id();
    return t.push(Tensor::scalar(std::clamp(c, -1.0, 1.0)), {ai, bi},
                  [ai, bi, na, nb, c](Tape& tp, std::size_t self) {
                      const double g = tp.adjoint(self)[0];
                      const auto& A = tp.value(ai);
                      const auto& B = tp.value(bi);
                      if (tp.tracks(ai)) {
                          auto& ga = tp.adjoint(ai);
                          for (std::size_t i = 0; i < A.size(); ++i) {
                              ga[i] += g * (B[i] / (na * nb) - c * A[i] / (na * na));
                          }
                      }
                      if (tp.tracks(bi)) {
                          auto& gb = tp.adjoint(bi);
                          for (std::size_t i = 0; i < B.size(); ++i) {
                              gb[i] += g * (A[i] / (na * nb) - c * B[i] / (nb * nb));
                          }
                      }
                  }, "cosine");
}

namespace {

Tensor softmax_values(const Tensor& z)
{
    const double mx = *std::max_element(z.data().begin(), z.data().end());
    Tensor out = z;
    double s = 0.0;
    for (auto& v : out.values()) {
        v = std::exp(v - mx);
        s += v;
    }
    for (auto& v : out.values()) v /= s;
    return out;
}

} // namespace

Var softmax(Var logits)
{
    auto& t = tape_of(logits);
    require(logits.value().rank() == 1 && logits.size() > 0, "softmax", "expects a non-empty vector");
    const auto li = logits.id();
    return t.push(softmax_values(logits.value()), {li}, [li](Tape& tp, std::size_t self) {
        const auto& g = tp.adjoint(self);
        const auto& s = tp.value(self);
        const double gs = ktcr::dot(g.data(), s.data());
        auto& gl = tp.adjoint(li);
        for (std::size_t i = 0; i < g.size(); ++i) gl[i] += s[i] * (g[i] - gs);
    }, "softmax");
}

Var softmax_cross_entropy(Var logits, std::size_t label)
{
    auto& t = tape_of(logits);
    const auto& z = logits.value();
    require(z.rank() == 1 && label < z.size(), "softmax_cross_entropy",
            "label " + std::to_string(label) + " for logits " + shape_string(z.shape()));
    const double mx = *std::max_element(z.data().begin(), z.data().end());
    double s = 0.0;
    for (double v : z.data()) s += std::exp(v - mx);
    const double loss = mx + std::log(s) - z[label];
    const auto li = logits.id();
    return t.push(Tensor::scalar(loss), {li}, [li, label](Tape& tp, std::size_t self) {
        const double g = tp.adjoint(self)[0];
        const Tensor p = softmax_values(tp.value(li));
        auto& gl = tp.adjoint(li);
        for (std::size_t i = 0; i < p.size(); ++i) {
            gl[i] += g * (p[i] - (i == label ? 1.0 : 0.0));
        }
    }, "softmax_cross_entropy");
}

// ---- whole-function helpers ------------------------------------------------

namespace {

Var build(Tape& tape, const GraphFn& fn, const ParamSet& at, std::map<std::string, Var>& vars,
          bool differentiable)
{
    for (const auto& [name, t] : at) {
        vars.emplace(name, differentiable ? tape.leaf(t) : tape.constant(t));
    }
    Var root = fn(tape, vars);
    if (root.tape() != &tape) throw ShapeError("composition error: graph returned a foreign Var");
    if (root.size() != 1) throw ShapeError("composition error: graph is not scalar-valued");
    return root;
}

} // namespace

ValueAndGrad value_and_grad(const GraphFn& fn, const ParamSet& at)
{
    Tape tape;
    std::map<std::string, Var> vars;
    Var root = build(tape, fn, at, vars, true);
    tape.backward(root);

    ValueAndGrad out;
    out.value = root.scalar();
    for (const auto& [name, v] : vars) out.grad.emplace(name, tape.grad(v));
    for (const auto& [name, v] : tape.watched()) {
        out.activation_grads.emplace(name, tape.tracks(v.id()) ? tape.grad(v)
                                                               : Tensor::zeros(v.value().shape()));
    }
    return out;
}

double evaluate(const GraphFn& fn, const ParamSet& at)
{
    Tape tape;
    std::map<std::string, Var> vars;
    return build(tape, fn, at, vars, false).scalar();
}

ParamSet finite_difference(const GraphFn& fn, const ParamSet& at, double eps)
{
    if (!(eps > 0.0 && eps <= 1e-2)) {
        throw ParameterError("finite_difference: eps must lie in (0, 1e-2], got " + std::to_string(eps));
    }
    ParamSet grad = zeros_like(at);
    ParamSet probe = at;
    for (auto& [name, t] : probe) {
        auto& g = grad.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t[i];
            t[i] = orig + eps;
            const double fp = evaluate(fn, probe);
            t[i] = orig - eps;
            const double fm = evaluate(fn, probe);
            t[i] = orig;
            g[i] = (fp - fm) / (2.0 * eps);
        }
    }
    return grad;
}

GradReport compare_gradients(const Tensor& analytic, const Tensor& numeric)
{
    if (!analytic.same_shape(numeric)) {
        throw ShapeError("compare_gradients: shapes " + shape_string(analytic.shape()) + " and "
                         + shape_string(numeric.shape()));
    }
    GradReport r{analytic, numeric, 0.0};
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double den = std::max({std::fabs(a), std::fabs(n), kRelErrFloor});
        r.max_rel_err = std::max(r.max_rel_err, std::fabs(a - n) / den);
    }
    return r;
}

GradReport compare_gradients(const ParamSet& analytic, const ParamSet& numeric)
{
    std::vector<double> a, n;
    for (const auto& [name, t] : analytic) {
        const auto it = numeric.find(name);
        if (it == numeric.end() || !it->second.same_shape(t)) {
            throw ShapeError("compare_gradients: parameter mismatch at " + name);
        }
        a.insert(a.end(), t.data().begin(), t.data().end());
        n.insert(n.end(), it->second.data().begin(), it->second.data().end());
    }
    if (numeric.size() != analytic.size()) throw ShapeError("compare_gradients: parameter count mismatch");
    return compare_gradients(Tensor::vector(std::move(a)), Tensor::vector(std::move(n)));
}

GradReport check_gradients(const GraphFn& fn, const ParamSet& at, double eps)
{
    const auto vg = value_and_grad(fn, at);
    return compare_gradients(vg.grad, finite_difference(fn, at, eps));
}

} // namespace ktcr::diff
