#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ktcr/datalab.hpp"
#include "ktcr/doe.hpp"
#include "ktcr/error.hpp"
#include "ktcr/evalkit.hpp"

using namespace ktcr;

namespace {

// The scoring model sees only explicit hate and neutral text, as in the
// pipeline; implicit sentences are unseen candidates.
struct World {
    std::vector<LabeledText> records;
    std::vector<Example> examples;
    std::vector<Example> source;
    EncoderModel model;
};

const World& world()
{
    static const World w = [] {
        SynthSpec spec;
        spec.n_explicit_hate = 60;
        spec.n_implicit_hate = 60;
        spec.n_neutral = 60;
        spec.n_implicit_neutral = 60;
        spec.marker_strength = 0.7;
        spec.seed = 21;
        World w;
        w.records = synth_corpus(spec);
        w.examples = to_examples(w.records);
        for (const auto& r : w.records) {
            const auto c = *synth_category(r);
            if (c == SynthCategory::explicit_hate || c == SynthCategory::neutral) w.source.push_back(to_examples({&r, 1})[0]);
        }
        const auto vocab = Vocabulary::build(texts_of(w.records));
        w.model = train_classifier(init_encoder({vocab.size(), 8, {16, 16}, 16, 3, true}, vocab), w.source,
                                   {0.1, 15, 32, 3})
                      .model;
        return w;
    }();
    return w;
}

std::vector<std::string> of_category(SynthCategory c)
{
    std::vector<std::string> out;
    for (const auto& r : world().records) {
        if (synth_category(r) == c) out.push_back(r.text);
    }
    return out;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

} // namespace

TEST_CASE("scores are deterministic")
{
    const auto& w = world();
    const auto b = select_baselines(w.model, w.examples, 8, 1);
    const auto probe = sample_probe_texts(w.examples, 16, 2);
    const DoeScorer s(w.model, b.explicit_texts, b.random_texts, probe, "", 4);
    const auto& text = w.examples[5].text;
    CHECK(s.score(text) == s.score(text));
    CHECK(s.score(text) == doe_score(w.model, b.explicit_texts, b.random_texts, probe, text, "", 4));
    CHECK(s.layer() == "layer2");
    const auto& dup = b.explicit_texts[0];
    CHECK(s.score(dup) == s.score(dup));
}

TEST_CASE("explicit candidates score above implicit ones")
{
    const auto& w = world();
    const auto b = select_baselines(w.model, w.source, 32, 1);
    const auto probe = sample_probe_texts(w.source, 64, 2);
    const DoeScorer s(w.model, b.explicit_texts, b.random_texts, probe, "", 4);
    std::vector<double> expl, impl;
    for (const auto& t : of_category(SynthCategory::explicit_hate)) expl.push_back(s.score(t));
    for (const auto& t : of_category(SynthCategory::implicit_hate)) impl.push_back(s.score(t));
    MESSAGE("mean DOE explicit " << mean(expl) << " implicit " << mean(impl));
    CHECK(mean(expl) > mean(impl));
}

TEST_CASE("non-hateful candidates score below the explicit mean")
{
    const auto& w = world();
    const auto explicit_texts = of_category(SynthCategory::explicit_hate);
    std::vector<std::string> benign;
    for (const auto& e : w.examples) {
        if (e.label == kNonHate) benign.push_back(e.text);
    }
    const auto probe = sample_probe_texts(w.examples, 16, 2);
    std::size_t below = 0;
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const auto b = select_baselines(w.model, w.examples, 8, 100 + trial);
        const DoeScorer s(w.model, b.explicit_texts, b.random_texts, probe, "", trial);
        std::vector<double> expl;
        for (std::size_t i = 0; i < 12; ++i) expl.push_back(s.score(explicit_texts[(trial * 7 + i) % explicit_texts.size()]));
        std::string candidate;
        for (std::size_t i = trial;; i += 17) {
            candidate = benign[i % benign.size()];
            if (std::find(b.random_texts.begin(), b.random_texts.end(), candidate) == b.random_texts.end()) break;
        }
        below += s.score(candidate) < mean(expl);
    }
    MESSAGE(below << " of 50 trials below the explicit mean");
    CHECK(below >= 40);
}

TEST_CASE("six-sentence fixture matches brute-force selection")
{
    const auto& w = world();
    const auto b = select_baselines(w.model, w.examples, 8, 1);
    const auto probe = sample_probe_texts(w.examples, 16, 2);
    const DoeScorer s(w.model, b.explicit_texts, b.random_texts, probe, "", 4);
    std::vector<Example> six;
    for (std::size_t i = 0; six.size() < 6; ++i) {
        const auto& e = w.examples[i];
        const auto have = std::count_if(six.begin(), six.end(), [&](const auto& x) { return x.label == e.label; });
        if (have < 3) six.push_back(e);
    }
    // Oracle: each score from an independent one-shot call, then every
    // 2-subset per class enumerated for the minimum score sum.
    std::vector<double> oracle;
    for (const auto& e : six) oracle.push_back(doe_score(w.model, b.explicit_texts, b.random_texts, probe, e.text, "", 4));
    std::array<std::vector<std::string>, 2> expected;
    for (std::size_t cls : {kNonHate, kHate}) {
        double best = 1e300;
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = i + 1; j < 6; ++j) {
                if (six[i].label != cls || six[j].label != cls) continue;
                if (oracle[i] + oracle[j] < best) {
                    best = oracle[i] + oracle[j];
                    expected[cls] = oracle[j] < oracle[i] ? std::vector{six[j].text, six[i].text}
                                                          : std::vector{six[i].text, six[j].text};
                }
            }
        }
    }
    const auto r = build_concept_sets(s, six, 4);
    CHECK(r.sets.concept_texts == expected[kHate]);
    CHECK(r.sets.random_texts == expected[kNonHate]);
    const auto all = build_concept_sets(s, six, 6);
    CHECK(all.sets.concept_texts.size() == 3);
    CHECK_THROWS_AS(build_concept_sets(s, six, 8), InsufficientDataError);
}

TEST_CASE("selection on a hand-scored fixture")
{
    const std::vector<DoeScore> scored{{"h1", kHate, 0.5},     {"h2", kHate, -0.2},    {"h3", kHate, 0.1},
                                       {"n1", kNonHate, 0.3},  {"n2", kNonHate, -0.4}, {"n3", kNonHate, 0.0}};
    const auto r = select_concept_sets(scored, 4);
    CHECK(r.sets.k == 4);
    CHECK(r.sets.concept_texts == std::vector<std::string>{"h2", "h3"});
    CHECK(r.sets.random_texts == std::vector<std::string>{"n2", "n3"});
    REQUIRE(r.scores.size() == 6);
    CHECK(std::count(r.selected.begin(), r.selected.end(), true) == 4);

    const auto edge = select_concept_sets(scored, 6);
    CHECK(edge.sets.concept_texts.size() == 3);
    CHECK(edge.sets.random_texts.size() == 3);
    CHECK_THROWS_AS(select_concept_sets(scored, 8), InsufficientDataError);
    CHECK_THROWS_AS(select_concept_sets(scored, 3), ParameterError);
    CHECK_THROWS_AS(select_concept_sets(scored, 0), ParameterError);
}

TEST_CASE("selected sentences never score above unselected ones of their class")
{
    const auto& w = world();
    const auto b = select_baselines(w.model, w.examples, 8, 1);
    const auto probe = sample_probe_texts(w.examples, 16, 2);
    const DoeScorer s(w.model, b.explicit_texts, b.random_texts, probe, "", 4, {8, 16, DoeMode::proxy, {}});
    for (std::size_t k : {2u, 16u, 40u}) {
        const auto r = build_concept_sets(s, w.examples, k);
        CHECK(r.sets.concept_texts.size() == k / 2);
        CHECK(r.sets.random_texts.size() == k / 2);
        for (std::size_t cls : {kHate, kNonHate}) {
            double max_sel = -1e300, min_rest = 1e300;
            for (std::size_t i = 0; i < r.scores.size(); ++i) {
                if (r.scores[i].label != cls) continue;
                (r.selected[i] ? max_sel : min_rest) = r.selected[i] ? std::max(max_sel, r.scores[i].score)
                                                                     : std::min(min_rest, r.scores[i].score);
            }
            CHECK(max_sel <= min_rest);
        }
    }
    CHECK_THROWS_AS(build_concept_sets(s, w.examples, 242), InsufficientDataError);
}

TEST_CASE("proxy ranking tracks the perturbation ranking")
{
    const auto& w = world();
    const auto b = select_baselines(w.model, w.examples, 8, 1);
    const auto probe = sample_probe_texts(w.examples, 32, 2);
    const DoeScorer s(w.model, b.explicit_texts, b.random_texts, probe, "", 4);
    std::vector<double> exact, proxy;
    for (std::size_t i = 0; i < 60; ++i) {
        const auto& t = w.examples[i].text;
        exact.push_back(s.score(t));
        proxy.push_back(s.proxy_score(t));
    }
    const double rho = spearman(exact, proxy);
    MESSAGE("spearman(perturbation, proxy) = " << rho);
    CHECK(rho >= 0.7);
}

TEST_CASE("score file lists every candidate")
{
    const std::vector<DoeScore> scored{{"a", kHate, 0.5}, {"b", kHate, -0.2}, {"c", kNonHate, 0.3}, {"d", kNonHate, 0.1}};
    const auto r = select_concept_sets(scored, 2);
    const auto path = std::filesystem::temp_directory_path() / "ktcr_doe_scores.tsv";
    write_score_file(path, r);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "text_hash\tlabel\tdoe\tselected");
    std::size_t rows = 0, selected = 0;
    while (std::getline(in, line)) {
        ++rows;
        selected += line.back() == '1';
    }
    CHECK(rows == 4);
    CHECK(selected == 2);
    CHECK(text_hash("") == 0xcbf29ce484222325ULL);
    CHECK(text_hash("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("too few baseline texts")
{
    const auto& w = world();
    const std::vector<std::string> three{"a", "b", "c"}, four{"a", "b", "c", "d"};
    CHECK_THROWS_AS(DoeScorer(w.model, three, four, four, "", 0), InsufficientDataError);
    CHECK_THROWS_AS(DoeScorer(w.model, four, four, {}, "", 0), InsufficientDataError);
    CHECK_THROWS_AS(select_baselines(w.model, w.examples, 1000, 0), InsufficientDataError);
}
