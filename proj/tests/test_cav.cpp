#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ktcr/cav.hpp"
#include "ktcr/error.hpp"

using namespace ktcr;

namespace {

std::vector<Tensor> blob(std::size_t n, std::size_t dim, double offset_e1, double sigma, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, sigma);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor t = Tensor::zeros({dim});
        for (auto& v : t.values()) v = z(rng);
        t[0] += offset_e1;
        out.push_back(std::move(t));
    }
    return out;
}

Tensor e(std::size_t dim, std::size_t i)
{
    Tensor t = Tensor::zeros({dim});
    t[i] = 1.0;
    return t;
}

EncoderModel small_model(std::uint64_t seed, std::vector<std::size_t> layers = {6, 5})
{
    const auto vocab = Vocabulary::build(std::vector<std::string>{"a b c d e f g h"});
    EncoderConfig cfg{vocab.size(), 4, layers, layers.back(), seed, false};
    return init_encoder(cfg, vocab);
}

} // namespace

TEST_CASE("planted direction is recovered")
{
    const auto concept_acts = blob(50, 8, 2.0, 0.1, 1);
    const auto random_acts = blob(50, 8, 0.0, 0.1, 2);
    const auto cav = compute_cav(concept_acts, random_acts, "layer2", 7);
    CHECK(std::fabs(cosine(cav.vector, e(8, 0))) >= 0.95);
    CHECK(cav.vector[0] > 0.0);
    CHECK(cav.probe_accuracy >= 0.99);
    CHECK(norm(cav.vector.data()) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(cav.warnings.empty());
    CHECK(cav.n_concept == 50);
    CHECK(cav.n_random == 50);
    CHECK(cav.probe.weights.size() == 8);
}

TEST_CASE("identical inputs give chance accuracy and a warning")
{
    const auto acts = blob(40, 6, 0.0, 1.0, 3);
    const auto cav = compute_cav(acts, acts, "layer1", 5);
    CHECK(cav.probe_accuracy <= 0.6);
    CHECK(cav.low_separability());
    CHECK_FALSE(cav.warnings.empty());
    CHECK(norm(cav.vector.data()) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("too few examples")
{
    const auto four = blob(4, 3, 1.0, 0.1, 1);
    const auto three = blob(3, 3, 0.0, 0.1, 2);
    CHECK_THROWS_AS(compute_cav(four, three, "layer1", 0), InsufficientDataError);
    CHECK_THROWS_AS(compute_cav(three, four, "layer1", 0), InsufficientDataError);
    CHECK_NOTHROW(compute_cav(four, four, "layer1", 0));
    auto bad = blob(5, 3, 0.0, 0.1, 2);
    bad[2] = Tensor::zeros({4});
    CHECK_THROWS_AS(compute_cav(four, bad, "layer1", 0), ShapeError);
}

TEST_CASE("direction is stable under scaling of the class separation")
{
    const auto base = blob(60, 6, 0.0, 0.1, 9);
    const auto near = blob(60, 6, 1.0, 0.1, 10);
    std::vector<Tensor> far_c, far_r;
    for (const auto& t : near) far_c.push_back(scaled(t, 3.0));
    for (const auto& t : base) far_r.push_back(scaled(t, 3.0));
    const auto a = compute_cav(near, base, "layer1", 1);
    const auto b = compute_cav(far_c, far_r, "layer1", 1);
    CHECK(std::fabs(cosine(a.vector, b.vector)) >= 0.99);
}

TEST_CASE("recomputation is bit-identical")
{
    const auto c = blob(30, 5, 1.0, 0.5, 1);
    const auto r = blob(30, 5, 0.0, 0.5, 2);
    const auto a = compute_cav(c, r, "layer1", 3);
    const auto b = compute_cav(c, r, "layer1", 3);
    CHECK(a.vector == b.vector);
    CHECK(a.probe_accuracy == b.probe_accuracy);
}

TEST_CASE("tcav sensitivity on the last layer is the head row")
{
    const auto model = small_model(4);
    const auto& head = model.params.at("head.W");
    Cav cav;
    cav.layer = "layer2";
    for (std::size_t i = 0; i < 5; ++i) {
        cav.vector = e(5, i);
        CHECK(tcav_sensitivity(model, cav, "a b c", kHate) == doctest::Approx(head.at(kHate, i)).epsilon(1e-12));
    }
}

TEST_CASE("tcav sensitivity: orthogonality, sign and linearity")
{
    const auto model = small_model(8);
    const std::string text = "b d f h";
    const auto grad = logit_gradient(model, "layer1", text, kHate);
    REQUIRE(norm(grad.data()) > 0.0);

    // A direction orthogonal to the gradient.
    Tensor v = e(6, 0);
    v = sub(v, scaled(grad, dot(v.data(), grad.data()) / dot(grad.data(), grad.data())));
    v = scaled(v, 1.0 / norm(v.data()));
    Cav cav{"layer1", v, 1.0, 4, 4, {}, {}};
    CHECK(std::fabs(tcav_sensitivity(model, cav, text, kHate)) <= 1e-9);

    std::mt19937_64 rng(1);
    std::normal_distribution<double> z;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor u = Tensor::zeros({6}), w = Tensor::zeros({6});
        for (auto& x : u.values()) x = z(rng);
        for (auto& x : w.values()) x = z(rng);
        const double alpha = z(rng), beta = z(rng);
        Cav cu{"layer1", u, 1.0, 4, 4, {}, {}};
        Cav neg{"layer1", scaled(u, -1.0), 1.0, 4, 4, {}, {}};
        CHECK(tcav_sensitivity(model, neg, text, kHate) == -tcav_sensitivity(model, cu, text, kHate));
        const double lhs = directional_sensitivity(model, "layer1", text, kHate, add(scaled(u, alpha), scaled(w, beta)));
        const double rhs = alpha * directional_sensitivity(model, "layer1", text, kHate, u)
                           + beta * directional_sensitivity(model, "layer1", text, kHate, w);
        CHECK(std::fabs(lhs - rhs) <= 1e-9);
    }

    Cav wrong{"layer7", e(6, 0), 1.0, 4, 4, {}, {}};
    CHECK_THROWS_AS(tcav_sensitivity(model, wrong, text, kHate), ConfigError);
    Cav wide{"layer1", e(9, 0), 1.0, 4, 4, {}, {}};
    CHECK_THROWS_AS(tcav_sensitivity(model, wide, text, kHate), ConfigError);
}

TEST_CASE("CAV text record round-trips exactly")
{
    const auto c = blob(10, 4, 1.0, 0.3, 1);
    const auto r = blob(10, 4, 0.0, 0.3, 2);
    const auto cav = compute_cav(c, r, "layer2", 1);
    const auto path = std::filesystem::temp_directory_path() / "ktcr_cav_record.txt";
    write_cav(path, cav);
    const auto back = read_cav(path);
    CHECK(back.layer == cav.layer);
    CHECK(back.vector == cav.vector);
    CHECK(back.probe_accuracy == cav.probe_accuracy);
    CHECK(back.probe.weights == cav.probe.weights);
    CHECK(back.probe.bias == cav.probe.bias);
    CHECK(back.n_concept == 10);
    CHECK(back.warnings == cav.warnings);
}
