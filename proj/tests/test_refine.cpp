#include <doctest.h>

#include <cmath>
#include <random>

#include "ktcr/datalab.hpp"
#include "ktcr/error.hpp"
#include "ktcr/evalkit.hpp"
#include "ktcr/refine.hpp"

using namespace ktcr;

namespace {

Tensor vec(std::initializer_list<double> v) { return Tensor::vector(std::vector<double>(v)); }

Tensor gaussian(std::size_t dim, std::mt19937_64& rng, double sigma = 1.0)
{
    std::normal_distribution<double> z(0.0, sigma);
    Tensor t = Tensor::zeros({dim});
    for (auto& x : t.values()) x = z(rng);
    return t;
}

PrototypeSet protos_of(std::size_t cls, std::vector<Tensor> cs)
{
    PrototypeSet p;
    p.K = cs.size();
    p.per_class[cls] = std::move(cs);
    return p;
}

Cav cav_of(Tensor v)
{
    Cav c;
    c.vector = scaled(v, 1.0 / norm(v.data()));
    return c;
}

struct Fixture {
    std::vector<Example> train;
    std::vector<Example> heldout;
    EncoderModel teacher;
    EncoderModel student;
    Autoencoder ae;
    ConceptSets sets;
};

Fixture make_fixture()
{
    SynthSpec spec;
    spec.n_explicit_hate = 20;
    spec.n_implicit_hate = 20;
    spec.n_neutral = 20;
    spec.n_implicit_neutral = 20;
    spec.seed = 11;
    const auto records = synth_corpus(spec);
    Fixture f;
    const auto all = to_examples(records);
    f.train.assign(all.begin(), all.begin() + 64);
    f.heldout.assign(all.begin() + 64, all.end());

    const auto vocab = Vocabulary::build(texts_of(records));
    f.teacher = train_classifier(init_encoder({vocab.size(), 8, {10, 10}, 10, 1, true}, vocab), f.train,
                                 {0.2, 5, 16, 1})
                    .model;
    f.student = train_classifier(init_encoder({vocab.size(), 6, {7, 6}, 6, 2, true}, vocab), f.train,
                                 {0.2, 3, 16, 2})
                    .model;
    f.ae = init_autoencoder(10, 6, 3);
    for (const auto& e : f.train) {
        auto& side = e.label == kHate ? f.sets.concept_texts : f.sets.random_texts;
        if (side.size() < 8) side.push_back(e.text);
    }
    f.sets.k = 16;
    return f;
}

KtcrConfig small_config()
{
    KtcrConfig cfg;
    cfg.epochs = 4;
    cfg.lr = 0.2;
    cfg.batch_size = 16;
    cfg.seed = 5;
    cfg.ae.epochs = 1;
    cfg.probe.epochs = 50;
    return cfg;
}

} // namespace

TEST_CASE("k-means examples")
{
    const std::vector<Tensor> two{vec({0, 0}), vec({0, 2})};
    const auto one = kmeans(two, 1, 0);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == vec({0, 1}));
    const auto pair = kmeans(two, 2, 0);
    REQUIRE(pair.size() == 2);
    CHECK(((pair[0] == two[0] && pair[1] == two[1]) || (pair[0] == two[1] && pair[1] == two[0])));

    std::mt19937_64 rng(3);
    std::vector<Tensor> pts;
    const std::vector<Tensor> planted{vec({5, 0, 0}), vec({-5, 0, 0}), vec({0, 5, 5})};
    for (int i = 0; i < 60; ++i) pts.push_back(add(planted[i % 3], gaussian(3, rng, 0.2)));
    const auto cs = kmeans(pts, 3, 9);
    for (const auto& p : planted) {
        double best = 1e9;
        for (const auto& c : cs) best = std::min(best, std::sqrt(squared_distance(p.data(), c.data())));
        CHECK(best < 0.1);
    }
    CHECK(kmeans(pts, 3, 9) == cs);
    CHECK_THROWS_AS(kmeans(two, 3, 0), InsufficientDataError);
    CHECK_THROWS_AS(kmeans(two, 0, 0), ParameterError);
}

TEST_CASE("fit_prototypes with K=1 gives the class means")
{
    ClassActivations acts{{0, {vec({1, 1}), vec({3, 1})}}, {1, {vec({0, 0}), vec({0, 4}), vec({3, 2})}}};
    const auto p = fit_prototypes(acts, 1, 0);
    CHECK(p.centroids(0)[0] == vec({2, 1}));
    CHECK(p.centroids(1)[0] == vec({1, 2}));
    CHECK_THROWS_AS(p.centroids(7), ParameterError);
}

TEST_CASE("prototype loss and gradient agree with direct evaluation")
{
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t dim = 1 + rng() % 6, K = 1 + rng() % 4;
        std::vector<Tensor> cs;
        for (std::size_t k = 0; k < K; ++k) cs.push_back(gaussian(dim, rng));
        const auto p = protos_of(1, cs);
        const Tensor h = gaussian(dim, rng);

        double brute = 0.0;
        for (const auto& c : cs) {
            for (std::size_t j = 0; j < dim; ++j) brute += (h[j] - c[j]) * (h[j] - c[j]);
        }
        brute /= static_cast<double>(K);
        CHECK(prototype_loss(h, p, 1) == doctest::Approx(brute).epsilon(1e-12));

        const Tensor g = prototype_grad(h, p, 1);
        const Tensor closed = scaled(sub(h, p.centroid_mean(1)), 2.0);
        const double eps = 1e-5;
        for (std::size_t j = 0; j < dim; ++j) {
            CHECK(g[j] == doctest::Approx(closed[j]).epsilon(1e-12));
            Tensor hp = h, hm = h;
            hp[j] += eps;
            hm[j] -= eps;
            const double fd = (prototype_loss(hp, p, 1) - prototype_loss(hm, p, 1)) / (2 * eps);
            CHECK(std::fabs(fd - g[j]) <= 1e-6 * std::max(1.0, std::fabs(g[j])));
        }
    }
}

TEST_CASE("prototype EMA update")
{
    PrototypeSet before = protos_of(0, {vec({0, 0}), vec({10, 0})});
    const std::map<std::size_t, std::vector<Tensor>> current{{0, {vec({9, 1}), vec({1, 1})}}};

    before.beta = 0.0;
    CHECK(update_prototypes(before, current).centroids(0) == before.centroids(0));
    CHECK(prototype_drift(before, update_prototypes(before, current)) == 0.0);

    before.beta = 1.0;
    const auto full = update_prototypes(before, current);
    CHECK(full.centroids(0)[0] == vec({1, 1}));
    CHECK(full.centroids(0)[1] == vec({9, 1}));

    before.beta = 0.5;
    const auto half = update_prototypes(before, current);
    CHECK(half.centroids(0)[0] == vec({0.5, 0.5}));
    CHECK(half.centroids(0)[1] == vec({9.5, 0.5}));
    CHECK(prototype_drift(before, half) == doctest::Approx(std::sqrt(0.5 + 0.5)));

    const std::map<std::size_t, std::vector<Tensor>> wrong{{0, {vec({1, 1})}}};
    CHECK_THROWS_AS(update_prototypes(before, wrong), DataError);
}

TEST_CASE("EMA result lies on the segment between old and current centroids")
{
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const auto old_c = gaussian(4, rng), cur_c = gaussian(4, rng);
        auto p = protos_of(1, {old_c});
        p.beta = u(rng);
        const auto next = update_prototypes(p, {{1, {cur_c}}}).centroids(1)[0];
        const double d_old = std::sqrt(squared_distance(next.data(), old_c.data()));
        const double d_cur = std::sqrt(squared_distance(next.data(), cur_c.data()));
        const double d = std::sqrt(squared_distance(old_c.data(), cur_c.data()));
        CHECK(d_old + d_cur == doctest::Approx(d).epsilon(1e-9));
        CHECK(d_old == doctest::Approx(p.beta * d).epsilon(1e-9));
    }
}

TEST_CASE("concept loss geometry")
{
    const auto p = protos_of(1, {vec({0, 0, 0}), vec({2, 0, 0})});
    const auto cav = cav_of(vec({0, 1, 0}));

    // h - mean along the CAV: parallel.
    auto par = concept_loss(vec({1, 3, 0}), p, 1, cav, ConceptMode::sensitize);
    CHECK(par.l_c == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(par.term == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(concept_loss(vec({1, -3, 0}), p, 1, cav, ConceptMode::sensitize).l_c == doctest::Approx(1.0));

    // Orthogonal.
    auto orth = concept_loss(vec({1, 0, 4}), p, 1, cav, ConceptMode::sensitize);
    CHECK(orth.l_c == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(orth.term == doctest::Approx(1.0));
    CHECK(concept_loss(vec({1, 0, 4}), p, 1, cav, ConceptMode::desensitize).term == doctest::Approx(0.0));

    // Scaling h - mean leaves L_C unchanged.
    const auto base = concept_loss(vec({2, 1, 3}), p, 1, cav, ConceptMode::sensitize).l_c;
    const auto far = concept_loss(vec({1 + 7 * 1, 7 * 1, 7 * 3}), p, 1, cav, ConceptMode::sensitize).l_c;
    CHECK(far == doctest::Approx(base).epsilon(1e-12));

    const auto degen = concept_loss(vec({1, 0, 0}), p, 1, cav, ConceptMode::sensitize);
    CHECK(degen.degenerate);
    CHECK(degen.l_c == 0.0);
    CHECK(degen.term == 0.0);

    diff::Tape tape;
    CHECK_FALSE(concept_term_graph(tape.leaf(vec({1, 0, 0})), p, 1, cav, ConceptMode::sensitize).has_value());
}

TEST_CASE("concept term graph matches the direct loss and finite differences")
{
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = protos_of(0, {gaussian(5, rng), gaussian(5, rng)});
        const auto cav = cav_of(gaussian(5, rng));
        const auto h0 = gaussian(5, rng);
        const auto mode = trial % 2 ? ConceptMode::desensitize : ConceptMode::sensitize;

        diff::Tape tape;
        const auto h = tape.leaf(h0);
        const auto term = concept_term_graph(h, p, 0, cav, mode);
        REQUIRE(term.has_value());
        CHECK(term->scalar() == doctest::Approx(concept_loss(h0, p, 0, cav, mode).term).epsilon(1e-12));
        tape.backward(*term);
        const auto g = tape.grad(h);

        Tensor fd = Tensor::zeros({5});
        const double eps = 1e-6;
        for (std::size_t j = 0; j < 5; ++j) {
            Tensor hp = h0, hm = h0;
            hp[j] += eps;
            hm[j] -= eps;
            fd[j] = (concept_loss(hp, p, 0, cav, mode).term - concept_loss(hm, p, 0, cav, mode).term) / (2 * eps);
        }
        CHECK(diff::compare_gradients(g, fd).max_rel_err < 1e-5);
    }
}

TEST_CASE("combined loss")
{
    CHECK(combined_loss(0.6, 0.2, 5.0) == doctest::Approx(1.6));
    CHECK(combined_loss(0.6, 0.9, 0.0) == 0.6);
    CHECK(combined_loss(1.0, 0.5, 4.0) - combined_loss(1.0, 0.5, 2.0) == doctest::Approx(2 * 0.5 * 1.0));
    CHECK_THROWS_AS(combined_loss(1.0, 0.5, -1.0), ParameterError);
}

TEST_CASE("full per-sample objective matches finite differences")
{
    const auto f = make_fixture();
    const auto layer = f.student.layer_index("layer2");
    const auto protos = fit_prototypes({{0, {encode(f.student, f.train[0].text).bos("layer2"),
                                             encode(f.student, f.train[2].text).bos("layer2")}},
                                        {1, {encode(f.student, f.train[1].text).bos("layer2"),
                                             encode(f.student, f.train[3].text).bos("layer2")}}},
                                       1, 0, 0.5, "layer2");
    std::mt19937_64 rng(2);
    Cav cav = cav_of(gaussian(6, rng));
    cav.layer = "layer2";
    for (std::size_t i = 0; i < 6; ++i) {
        const auto& ex = f.train[i + 4];
        const auto ids = tokenize(f.student, ex.text);
        const diff::GraphFn fn = [&](diff::Tape&, const std::map<std::string, diff::Var>& vars) {
            const auto g = build_encoder_graph(vars, f.student.config, ids);
            auto loss = diff::softmax_cross_entropy(g.logits, ex.label);
            const auto term = concept_term_graph(g.bos(layer), protos, ex.label, cav, ConceptMode::sensitize);
            return term ? diff::add(loss, diff::scale(*term, 5.0)) : loss;
        };
        const auto report = diff::check_gradients(fn, f.student.params, 1e-4);
        CHECK(report.max_rel_err < 1e-4);
    }
}

TEST_CASE("ktcr with gamma 0 reproduces plain fine-tuning")
{
    const auto f = make_fixture();
    auto cfg = small_config();
    cfg.gamma = 0.0;
    const auto r = ktcr_train(f.student, f.teacher, f.ae, f.sets, f.train, cfg);
    const auto plain = train_classifier(f.student, f.train, {cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed}).model;
    for (const auto& [name, t] : plain.params) CHECK(r.student.params.at(name) == t);
    REQUIRE(r.history.epochs.size() == cfg.epochs);
    for (const auto& e : r.history.epochs) CHECK(e.l == e.l_o);
}

TEST_CASE("ktcr history, refresh cycles and teacher immutability")
{
    const auto f = make_fixture();
    auto cfg = small_config();
    cfg.epochs = 5;
    cfg.cav_update_cycle = 2;
    cfg.proto_update_cycle = 3;
    const auto teacher_hash = parameter_hash(f.teacher.params);
    const auto r = ktcr_train(f.student, f.teacher, f.ae, f.sets, f.train, cfg, {f.heldout});
    CHECK(parameter_hash(f.teacher.params) == teacher_hash);
    REQUIRE(r.history.epochs.size() == 5);
    CHECK(r.history.cav_refreshes == 2);
    CHECK(r.history.proto_refreshes == 1);
    for (const auto& e : r.history.epochs) {
        CHECK(e.cav_accuracy.has_value() == (e.epoch % 2 == 0));
        CHECK(e.heldout_l_c.has_value());
        CHECK(e.heldout_l_c_start.has_value());
        CHECK(std::isfinite(e.l));
        CHECK(e.l_c >= 0.0);
        CHECK(e.l_c <= 1.0 + 1e-12);
        CHECK(e.l == doctest::Approx(e.l_o + cfg.gamma * (1.0 - e.l_c)).epsilon(1e-9));
    }
    CHECK(r.student.params != f.student.params);

    const auto again = ktcr_train(f.student, f.teacher, f.ae, f.sets, f.train, cfg, {f.heldout});
    CHECK(again.student.params == r.student.params);
    CHECK(again.cav.vector == r.cav.vector);
    CHECK(again.history.epochs.back().l == r.history.epochs.back().l);
}

TEST_CASE("refinement reorders the per-token norms of a probe sentence")
{
    const auto f = make_fixture();
    const auto r = ktcr_train(f.student, f.teacher, f.ae, f.sets, f.train, small_config());
    const std::string probe = f.heldout[0].text;
    const ConceptTermConfig term{5.0, ConceptMode::sensitize};
    const NormContext ctx{f.heldout[0].label, "", &r.protos, &r.cav, &term};
    const auto before = norm_report(f.student, probe, ctx), after = norm_report(r.student, probe, ctx);
    REQUIRE(before.tokens.size() >= 3);
    REQUIRE(before.tokens == after.tokens);
    // Gradient norms off the BOS position are tied by construction (they reach
    // the head only through the sentence mean), so the ranking is over
    // activation norms.
    const double tau = kendall_tau(before.activation_norms, after.activation_norms);
    MESSAGE("kendall tau of activation-norm rankings " << tau);
    CHECK(tau < 1.0);
}

TEST_CASE("ktcr parameter validation")
{
    const auto f = make_fixture();
    auto cfg = small_config();
    cfg.cav_update_cycle = cfg.epochs + 1;
    CHECK_THROWS_AS(ktcr_train(f.student, f.teacher, f.ae, f.sets, f.train, cfg), ParameterError);
    cfg = small_config();
    cfg.gamma = -1.0;
    CHECK_THROWS_AS(ktcr_train(f.student, f.teacher, f.ae, f.sets, f.train, cfg), ParameterError);
    cfg = small_config();
    CHECK_THROWS_AS(ktcr_train(f.student, f.teacher, init_autoencoder(10, 5, 0), f.sets, f.train, cfg), ConfigError);
    std::vector<Example> one_class;
    for (const auto& e : f.train) {
        if (e.label == kHate) one_class.push_back(e);
    }
    CHECK_THROWS_AS(ktcr_train(f.student, f.teacher, f.ae, f.sets, one_class, cfg), DegenerateDataError);
    CHECK(concept_mode_from_string("desensitize") == ConceptMode::desensitize);
    CHECK_THROWS(concept_mode_from_string("sideways"));
}
