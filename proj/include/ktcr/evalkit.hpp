#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ktcr/types.hpp"

namespace ktcr {

struct EncoderModel;
struct PrototypeSet;
struct Cav;
struct ConceptTermConfig;

struct MetricReport {
    double macro_f1 = 0.0;
    double auc = 0.0;
    std::size_t n = 0;
    /// confusion[label][pred].
    std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{};
};

/// Unweighted mean of per-class F1. A class with no true positives, false
/// positives or false negatives contributes 0.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels);

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks, so it is exact.
double auc(std::span<const double> scores, std::span<const std::size_t> labels);

/// Metrics for a scored prediction set. `scores` are P(hate).
MetricReport evaluate_predictions(std::span<const std::size_t> preds, std::span<const double> scores,
                                  std::span<const std::size_t> labels);

/// Classifies every example with `model`; argmax predictions, P(hate) scores.
MetricReport evaluate_model(const EncoderModel& model, std::span<const Example> data);

struct RunDelta {
    double macro_f1 = 0.0;
    double auc = 0.0;
    std::size_t n_a = 0;
    std::size_t n_b = 0;
};

/// Signed deltas a - b.
RunDelta compare_runs(const MetricReport& a, const MetricReport& b);

/// Tau-b; 1 for identical rankings.
double kendall_tau(std::span<const double> a, std::span<const double> b);
/// Pearson correlation of midranks.
double spearman(std::span<const double> a, std::span<const double> b);

// ---- activation and gradient norms ------------------------------------------

struct NormContext {
    std::size_t label = kNonHate;
    /// Layer whose per-token states are reported; empty selects the last layer.
    std::string layer;
    /// When both are set, the loss is L_o + gamma * concept term.
    const PrototypeSet* protos = nullptr;
    const Cav* cav = nullptr;
    const ConceptTermConfig* concept_cfg = nullptr;
};

struct NormReport {
    std::vector<std::string> tokens;
    std::vector<double> activation_norms;
    std::vector<double> gradient_norms;
    std::string layer;
};

/// Per-token L2 norms of the layer states and of the training-loss gradient
/// with respect to them.
NormReport norm_report(const EncoderModel& model, const std::string& text, const NormContext& ctx);

} // namespace ktcr
