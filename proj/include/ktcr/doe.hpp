#pragma once

// Degree of explicitness: how much adding a sentence to the explicit baseline
// shifts the model's mean sensitivity along the explicitness CAV.
//
//   S(B)   = mean over probe texts p of  d logit_hate(p) / d h_l . w(B vs random)
//   DOE(x) = S(B + {x}) - S(B)
//
// The sensitivity is linear in the CAV, so S(B) = g . w(B) with g the mean
// logit gradient over the probe set, which is computed once per scorer.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ktcr/cav.hpp"
#include "ktcr/encoder.hpp"

namespace ktcr {

struct DoeScore {
    std::string text;
    std::size_t label = kNonHate;
    double score = 0.0;
};

struct ConceptSets {
    /// C: implicitly hateful.
    std::vector<std::string> concept_texts;
    /// R: implicitly non-hateful.
    std::vector<std::string> random_texts;
    std::size_t k = 0;
};

enum class DoeMode { perturbation, proxy };

struct DoeOptions {
    /// Size of each baseline.
    std::size_t baseline_size = 32;
    std::size_t probe_eval_size = 64;
    DoeMode mode = DoeMode::perturbation;
    ProbeHyper probe{1000, 1.0, 0.2};
};

class DoeScorer {
public:
    /// Baselines need at least 4 texts each; probe_texts at least 1.
    DoeScorer(const EncoderModel& model, std::vector<std::string> explicit_baseline,
              std::vector<std::string> random_baseline, std::vector<std::string> probe_texts,
              std::string layer, std::uint64_t seed, DoeOptions options = {});

    /// Perturbation-form DOE; lower is more implicit.
    double score(const std::string& candidate) const;
    /// Alignment of the candidate's activation with the baseline CAV.
    double proxy_score(const std::string& candidate) const;
    /// Whichever of the two the options select.
    double operator()(const std::string& candidate) const;

    double base_sensitivity() const noexcept { return base_sensitivity_; }
    const Cav& base_cav() const noexcept { return base_cav_; }
    const std::string& layer() const noexcept { return layer_; }

private:
    const EncoderModel& model_;
    std::string layer_;
    std::uint64_t seed_;
    DoeOptions options_;
    std::vector<Tensor> explicit_acts_;
    std::vector<Tensor> random_acts_;
    Tensor mean_grad_;
    Cav base_cav_;
    double base_sensitivity_ = 0.0;
};

double doe_score(const EncoderModel& model, std::span<const std::string> explicit_baseline,
                 std::span<const std::string> random_baseline, std::span<const std::string> probe_texts,
                 const std::string& candidate, const std::string& layer, std::uint64_t seed);

/// Baselines drawn from a labelled reference set: the `n` hateful examples
/// with the highest P(hate) under `model` (ties by order), and `n` seeded
/// non-hateful examples.
struct Baselines {
    std::vector<std::string> explicit_texts;
    std::vector<std::string> random_texts;
};
Baselines select_baselines(const EncoderModel& model, std::span<const Example> reference, std::size_t n,
                           std::uint64_t seed);

/// Seeded sample of up to `n` texts.
std::vector<std::string> sample_probe_texts(std::span<const Example> data, std::size_t n, std::uint64_t seed);

struct ConceptSetResult {
    ConceptSets sets;
    /// Every scored sentence, hateful group first, each group ascending by
    /// score (stable), with the selected flag.
    std::vector<DoeScore> scores;
    std::vector<bool> selected;
};

/// Scores every sentence, sorts each label group ascending (stable) and takes
/// the first k/2 of each.
ConceptSetResult build_concept_sets(const DoeScorer& scorer, std::span<const Example> dataset, std::size_t k);

/// Selection step alone, over precomputed scores in dataset order.
ConceptSetResult select_concept_sets(std::span<const DoeScore> scored, std::size_t k);

/// One line per sentence: text hash (hex), label, score (%.17g), selected.
void write_score_file(const std::filesystem::path& path, const ConceptSetResult& result);

std::uint64_t text_hash(const std::string& text);

} // namespace ktcr
