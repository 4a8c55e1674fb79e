#include "ktcr/doe.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "ktcr/error.hpp"

namespace ktcr {

std::uint64_t text_hash(const std::string& text)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

DoeScorer::DoeScorer(const EncoderModel& model, std::vector<std::string> explicit_baseline,
                     std::vector<std::string> random_baseline, std::vector<std::string> probe_texts,
                     std::string layer, std::uint64_t seed, DoeOptions options)
    : model_(model), layer_(std::move(layer)), seed_(seed), options_(options)
{
    if (layer_.empty()) layer_ = model.last_layer();
    model.layer_index(layer_);
    if (explicit_baseline.size() < 4 || random_baseline.size() < 4) {
        throw InsufficientDataError("DOE baselines need at least 4 texts each; got "
                                    + std::to_string(explicit_baseline.size()) + " explicit and "
                                    + std::to_string(random_baseline.size()) + " random");
    }
    if (probe_texts.empty()) throw InsufficientDataError("DOE needs at least one probe-evaluation text");

    for (const auto& t : explicit_baseline) explicit_acts_.push_back(encode(model, t).bos(layer_));
    for (const auto& t : random_baseline) random_acts_.push_back(encode(model, t).bos(layer_));

    mean_grad_ = Tensor::zeros({model.layer_dim(layer_)});
    for (const auto& t : probe_texts) mean_grad_ = add(mean_grad_, logit_gradient(model, layer_, t, kHate));
    mean_grad_ = scaled(mean_grad_, 1.0 / static_cast<double>(probe_texts.size()));

    base_cav_ = compute_cav(explicit_acts_, random_acts_, layer_, seed_, options_.probe);
    base_sensitivity_ = dot(mean_grad_.data(), base_cav_.vector.data());
}

double DoeScorer::score(const std::string& candidate) const
{
    auto concept_acts = explicit_acts_;
    concept_acts.push_back(encode(model_, candidate).bos(layer_));
    const auto cav = compute_cav(concept_acts, random_acts_, layer_, seed_, options_.probe);
    return dot(mean_grad_.data(), cav.vector.data()) - base_sensitivity_;
}

double DoeScorer::proxy_score(const std::string& candidate) const
{
    return dot(encode(model_, candidate).bos(layer_).data(), base_cav_.vector.data());
}

double DoeScorer::operator()(const std::string& candidate) const
{
    return options_.mode == DoeMode::proxy ? proxy_score(candidate) : score(candidate);
}

double doe_score(const EncoderModel& model, std::span<const std::string> explicit_baseline,
                 std::span<const std::string> random_baseline, std::span<const std::string> probe_texts,
                 const std::string& candidate, const std::string& layer, std::uint64_t seed)
{
    const DoeScorer scorer(model, {explicit_baseline.begin(), explicit_baseline.end()},
                           {random_baseline.begin(), random_baseline.end()}, {probe_texts.begin(), probe_texts.end()},
                           layer, seed);
    return scorer.score(candidate);
}

Baselines select_baselines(const EncoderModel& model, std::span<const Example> reference, std::size_t n,
                           std::uint64_t seed)
{
    std::vector<std::pair<double, std::size_t>> hateful;
    std::vector<std::size_t> benign;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        if (reference[i].label == kHate) hateful.emplace_back(classify(model, reference[i].text)[kHate], i);
        else benign.push_back(i);
    }
    if (hateful.size() < n || benign.size() < n) {
        throw InsufficientDataError("baseline selection needs " + std::to_string(n) + " texts per class; have "
                                    + std::to_string(hateful.size()) + " hateful and " + std::to_string(benign.size())
                                    + " non-hateful");
    }
    std::stable_sort(hateful.begin(), hateful.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::mt19937_64 rng(seed);
    std::shuffle(benign.begin(), benign.end(), rng);

    Baselines b;
    for (std::size_t i = 0; i < n; ++i) {
        b.explicit_texts.push_back(reference[hateful[i].second].text);
        b.random_texts.push_back(reference[benign[i]].text);
    }
    return b;
}

std::vector<std::string> sample_probe_texts(std::span<const Example> data, std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(n, idx.size()));
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(data[i].text);
    return out;
}

ConceptSetResult select_concept_sets(std::span<const DoeScore> scored, std::size_t k)
{
    if (k == 0 || k % 2 != 0) throw ParameterError("k must be a positive even count, got " + std::to_string(k));
    std::vector<std::size_t> hateful, benign;
    for (std::size_t i = 0; i < scored.size(); ++i) (scored[i].label == kHate ? hateful : benign).push_back(i);
    const auto half = k / 2;
    if (hateful.size() < half || benign.size() < half) {
        throw InsufficientDataError("k=" + std::to_string(k) + " needs " + std::to_string(half)
                                    + " sentences per class; available: " + std::to_string(hateful.size())
                                    + " hateful, " + std::to_string(benign.size()) + " non-hateful");
    }
    auto by_score = [&](std::size_t a, std::size_t b) { return scored[a].score < scored[b].score; };
    std::stable_sort(hateful.begin(), hateful.end(), by_score);
    std::stable_sort(benign.begin(), benign.end(), by_score);

    ConceptSetResult r;
    r.sets.k = k;
    for (const auto* group : {&hateful, &benign}) {
        for (std::size_t rank = 0; rank < group->size(); ++rank) {
            const auto& s = scored[(*group)[rank]];
            const bool take = rank < half;
            r.scores.push_back(s);
            r.selected.push_back(take);
            if (take) (s.label == kHate ? r.sets.concept_texts : r.sets.random_texts).push_back(s.text);
        }
    }
    return r;
}

ConceptSetResult build_concept_sets(const DoeScorer& scorer, std::span<const Example> dataset, std::size_t k)
{
    if (k == 0 || k % 2 != 0) throw ParameterError("k must be a positive even count, got " + std::to_string(k));
    const auto hateful = static_cast<std::size_t>(
        std::count_if(dataset.begin(), dataset.end(), [](const auto& e) { return e.label == kHate; }));
    if (hateful < k / 2 || dataset.size() - hateful < k / 2) {
        throw InsufficientDataError("k=" + std::to_string(k) + " needs " + std::to_string(k / 2)
                                    + " sentences per class; available: " + std::to_string(hateful) + " hateful, "
                                    + std::to_string(dataset.size() - hateful) + " non-hateful");
    }
    std::vector<DoeScore> scored;
    scored.reserve(dataset.size());
    for (const auto& e : dataset) scored.push_back({e.text, e.label, scorer(e.text)});
    auto r = select_concept_sets(scored, k);

    for (const auto& c : r.sets.concept_texts) {
        if (std::find(r.sets.random_texts.begin(), r.sets.random_texts.end(), c) != r.sets.random_texts.end()) {
            throw DataError("concept and random sets overlap on '" + c + "'");
        }
    }
    return r;
}

void write_score_file(const std::filesystem::path& path, const ConceptSetResult& result)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "text_hash\tlabel\tdoe\tselected\n";
    char buf[128];
    for (std::size_t i = 0; i < result.scores.size(); ++i) {
        const auto& s = result.scores[i];
        std::snprintf(buf, sizeof buf, "%016llx\t%s\t%.17g\t%d\n", static_cast<unsigned long long>(text_hash(s.text)),
                      s.label == kHate ? "hateful" : "non-hateful", s.score, result.selected[i] ? 1 : 0);
        out << buf;
    }
}

} // namespace ktcr
