#include <doctest.h>

#include <cmath>
#include <random>

#include "ktcr/bridge.hpp"
#include "ktcr/error.hpp"

using namespace ktcr;

namespace {

// Pairs with g_t = g_s = tanh(z), z ~ N(0, 0.3): the identity lies inside the
// autoencoder's reach.
std::vector<ActivationPair> identity_pairs(std::size_t n, std::size_t dim, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 0.3);
    std::vector<ActivationPair> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor g = Tensor::zeros({dim});
        for (auto& v : g.values()) v = std::tanh(z(rng));
        out.push_back({g, g});
    }
    return out;
}

std::vector<ActivationPair> random_pairs(std::size_t n, std::size_t td, std::size_t sd, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.9, 0.9);
    std::vector<ActivationPair> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor gt = Tensor::zeros({td}), gs = Tensor::zeros({sd});
        for (auto& v : gt.values()) v = u(rng);
        for (auto& v : gs.values()) v = u(rng);
        out.push_back({gt, gs});
    }
    return out;
}

} // namespace

TEST_CASE("identity mapping is attainable")
{
    const auto train = identity_pairs(100, 8, 1);
    const auto held_out = identity_pairs(20, 8, 2);
    const auto r = train_autoencoder(train, {0.05, 50, 3});
    REQUIRE(r.loss_curve.size() == 50);
    MESSAGE("final combined loss " << r.loss_curve.back());
    CHECK(r.loss_curve.back() < 1e-2);
    for (const auto& p : held_out) {
        const auto m = map_activation(r.ae, p.g_t);
        CHECK(std::sqrt(squared_distance(m.data(), p.g_s.data())) < 0.2);
    }
}

TEST_CASE("loss is non-negative and near-monotone at the default learning rate")
{
    const auto pairs = random_pairs(64, 10, 6, 5);
    const auto r = train_autoencoder(pairs, {0.005, 30, 9});
    std::size_t down = 0;
    for (std::size_t i = 1; i < r.loss_curve.size(); ++i) down += r.loss_curve[i] <= r.loss_curve[i - 1];
    CHECK(static_cast<double>(down) / (r.loss_curve.size() - 1) >= 0.95);
    for (const auto& p : pairs) {
        const auto l = autoencoder_loss(r.ae, p);
        CHECK(l.reconstruction >= 0.0);
        CHECK(l.mapping >= 0.0);
    }
}

TEST_CASE("analytic gradient of L_D + L_E matches finite differences")
{
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t td = 2 + rng() % 5, sd = 2 + rng() % 5;
        const auto ae = init_autoencoder(td, sd, seed);
        const auto pair = random_pairs(1, td, sd, seed + 1000)[0];
        const auto report = diff::check_gradients(
            [&pair](diff::Tape& t, const auto& p) {
                return autoencoder_loss_graph(p, t.constant(pair.g_t), t.constant(pair.g_s));
            },
            ae.params, 1e-4);
        worst = std::max(worst, report.max_rel_err);
        CHECK_MESSAGE(report.max_rel_err <= 1e-4, "seed " << seed);
    }
    MESSAGE("worst relative error " << worst);
}

TEST_CASE("graph loss agrees with the direct evaluation")
{
    const auto ae = init_autoencoder(5, 3, 4);
    const auto pair = random_pairs(1, 5, 3, 8)[0];
    const double graph = diff::evaluate(
        [&pair](diff::Tape& t, const auto& p) {
            return autoencoder_loss_graph(p, t.constant(pair.g_t), t.constant(pair.g_s));
        },
        ae.params);
    CHECK(graph == doctest::Approx(autoencoder_loss(ae, pair).combined()).epsilon(1e-12));
}

TEST_CASE("map_activation shapes and purity")
{
    const auto ae = init_autoencoder(7, 4, 1);
    const auto g = random_pairs(1, 7, 4, 2)[0].g_t;
    CHECK(map_activation(ae, g).size() == 4);
    CHECK(reconstruct(ae, g).size() == 7);
    CHECK(map_activation(ae, g) == map_activation(ae, g));
    CHECK_THROWS_AS(map_activation(ae, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("training determinism and errors")
{
    const auto pairs = random_pairs(20, 5, 3, 1);
    const auto a = train_autoencoder(pairs, {0.005, 3, 42});
    const auto b = train_autoencoder(pairs, {0.005, 3, 42});
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.ae.params == b.ae.params);

    CHECK_THROWS_AS(train_autoencoder(pairs, {0.005, 0, 42}), ParameterError);
    CHECK_THROWS_AS(train_autoencoder(std::span(pairs).first(1), {0.005, 3, 42}), InsufficientDataError);
    auto mixed = pairs;
    mixed[4].g_t = Tensor::zeros({6});
    CHECK_THROWS_AS(train_autoencoder(mixed, {0.005, 3, 42}), DataError);
}
