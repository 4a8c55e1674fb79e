#include <doctest.h>

#include <cmath>
#include <random>

#include "ktcr/diff.hpp"
#include "ktcr/error.hpp"

using namespace ktcr;
using namespace ktcr::diff;

namespace {

Tensor random_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape, double scale = 1.0)
{
    std::normal_distribution<double> d(0.0, scale);
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) v = d(rng);
    return t;
}

// A random composite over every supported primitive. The variant picks which
// head the composition ends in so that all primitives are exercised.
struct RandomComposite {
    ParamSet at;
    GraphFn fn;
};

RandomComposite random_composite(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    const std::size_t n = 2 + rng() % 4, m = 2 + rng() % 4;
    RandomComposite rc;
    rc.at.emplace("W", random_tensor(rng, {m, n}, 0.7));
    rc.at.emplace("b", random_tensor(rng, {m}, 0.3));
    rc.at.emplace("x", random_tensor(rng, {n}));
    rc.at.emplace("v", random_tensor(rng, {m}));
    const std::size_t label = rng() % m;
    const int variant = static_cast<int>(seed % 5);
    rc.fn = [variant, label](Tape&, const std::map<std::string, Var>& p) {
        const Var h = tanh(affine(p.at("W"), p.at("x"), p.at("b")));
        switch (variant) {
        case 0: return softmax_cross_entropy(h, label);
        case 1: return add(squared_norm(sub(h, p.at("v"))), reduce_mean(sigmoid(h)));
        case 2: return abs(cosine(h, p.at("v")));
        case 3: {
            const Var parts[] = {h, p.at("v"), mul(h, p.at("v"))};
            return dot(mean(parts), softmax(p.at("v")));
        }
        default: {
            const Var parts[] = {scale(h, 2.0), shift(p.at("v"), 0.5)};
            return squared_norm(sum(parts));
        }
        }
    };
    return rc;
}

} // namespace

TEST_CASE("value_and_grad on closed-form examples")
{
    SUBCASE("x^2 at 3")
    {
        const auto r = value_and_grad([](Tape&, const auto& p) { return mul(p.at("x"), p.at("x")); },
                                      {{"x", Tensor::scalar(3.0)}});
        CHECK(r.value == 9.0);
        CHECK(r.grad.at("x")[0] == 6.0);
    }
    SUBCASE("x*y at (2,5)")
    {
        const auto r = value_and_grad([](Tape&, const auto& p) { return mul(p.at("x"), p.at("y")); },
                                      {{"x", Tensor::scalar(2.0)}, {"y", Tensor::scalar(5.0)}});
        CHECK(r.value == 10.0);
        CHECK(r.grad.at("x")[0] == 5.0);
        CHECK(r.grad.at("y")[0] == 2.0);
    }
    SUBCASE("|v|^2 at (1,2)")
    {
        const auto r = value_and_grad([](Tape&, const auto& p) { return squared_norm(p.at("v")); },
                                      {{"v", Tensor::vector({1.0, 2.0})}});
        CHECK(r.value == 5.0);
        CHECK(r.grad.at("v")[0] == 2.0);
        CHECK(r.grad.at("v")[1] == 4.0);
    }
}

TEST_CASE("finite_difference examples and parameter checks")
{
    const GraphFn sq = [](Tape&, const auto& p) { return mul(p.at("x"), p.at("x")); };
    CHECK(finite_difference(sq, {{"x", Tensor::scalar(3.0)}}, 1e-4).at("x")[0] == doctest::Approx(6.0).epsilon(1e-6));

    const GraphFn nrm = [](Tape&, const auto& p) { return squared_norm(p.at("v")); };
    const auto g = finite_difference(nrm, {{"v", Tensor::vector({1.0, 2.0})}}, 1e-4).at("v");
    CHECK(std::fabs(g[0] - 2.0) < 1e-6);
    CHECK(std::fabs(g[1] - 4.0) < 1e-6);

    CHECK_THROWS_AS(finite_difference(sq, {{"x", Tensor::scalar(1.0)}}, 0.0), ParameterError);
    CHECK_THROWS_AS(finite_difference(sq, {{"x", Tensor::scalar(1.0)}}, 0.02), ParameterError);
    CHECK_THROWS_AS(finite_difference(sq, {{"x", Tensor::scalar(1.0)}}, -1e-4), ParameterError);
}

TEST_CASE("analytic gradients match finite differences on 100 random composites")
{
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto rc = random_composite(seed);
        const auto report = check_gradients(rc.fn, rc.at, 1e-4);
        worst = std::max(worst, report.max_rel_err);
        CHECK_MESSAGE(report.max_rel_err <= 1e-4, "seed " << seed);
    }
    MESSAGE("worst relative error " << worst);
}

TEST_CASE("constant function has zero gradient")
{
    const auto r = value_and_grad([](Tape& t, const auto&) { return t.constant(Tensor::scalar(4.0)); },
                                  {{"x", Tensor::vector({1.0, -2.0, 3.0})}});
    CHECK(r.value == 4.0);
    for (double v : r.grad.at("x").data()) CHECK(v == 0.0);
}

TEST_CASE("gradients with respect to watched intermediate activations")
{
    // f = |tanh(w x)|^2 ; df/dh = 2h for h = tanh(w x)
    const ParamSet at{{"W", Tensor::matrix(2, 2, {0.3, -0.1, 0.5, 0.2})}, {"x", Tensor::vector({1.0, 2.0})}};
    const auto r = value_and_grad([](Tape& t, const auto& p) {
        const Var h = tanh(matvec(p.at("W"), p.at("x")));
        t.watch("h", h);
        return squared_norm(h);
    }, at);
    const auto& gh = r.activation_grads.at("h");
    const double h0 = std::tanh(0.3 * 1.0 - 0.1 * 2.0);
    const double h1 = std::tanh(0.5 * 1.0 + 0.2 * 2.0);
    CHECK(gh[0] == doctest::Approx(2 * h0));
    CHECK(gh[1] == doctest::Approx(2 * h1));
}

TEST_CASE("cosine values, clamping and scale invariance")
{
    CHECK(cosine(Tensor::vector({1, 0}), Tensor::vector({1, 0})) == 1.0);
    CHECK(cosine(Tensor::vector({1, 0}), Tensor::vector({0, 1})) == 0.0);
    CHECK(cosine(Tensor::vector({1, 1}), Tensor::vector({-1, -1})) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(cosine(Tensor::vector({0, 0}), Tensor::vector({1, 0})), DegenerateDirectionError);

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> pos(0.1, 10.0);
    for (int i = 0; i < 200; ++i) {
        const auto u = random_tensor(rng, {5});
        const auto v = random_tensor(rng, {5});
        const double c = cosine(u, v);
        CHECK(c >= -1.0);
        CHECK(c <= 1.0);
        CHECK(std::fabs(cosine(scaled(u, pos(rng)), scaled(v, pos(rng))) - c) <= 1e-12);
    }
}

TEST_CASE("composition and numeric errors")
{
    Tape t;
    const Var a = t.leaf(Tensor::vector({1.0, 2.0}));
    const Var b = t.leaf(Tensor::vector({1.0, 2.0, 3.0}));
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matvec(a, b), ShapeError);

    Tape other;
    const Var c = other.leaf(Tensor::vector({1.0, 2.0}));
    CHECK_THROWS_AS(add(a, c), ShapeError);

    const Var big = t.leaf(Tensor::vector({1e308, 1e308}));
    try {
        (void)scale(big, 10.0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("scale") != std::string::npos);
    }
}

TEST_CASE("compare_gradients uses the relative error floor")
{
    const auto r = compare_gradients(Tensor::vector({0.0, 1.0}), Tensor::vector({1e-12, 1.0}));
    CHECK(r.max_rel_err == doctest::Approx(1e-4));
    CHECK_THROWS_AS(compare_gradients(Tensor::vector({0.0}), Tensor::vector({0.0, 1.0})), ShapeError);
}
