#include "ktcr/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ktcr/encoder.hpp"
#include "ktcr/error.hpp"
#include "ktcr/refine.hpp"

namespace ktcr {

namespace {

void check_labels(std::span<const std::size_t> v, const char* what)
{
    for (auto x : v) {
        if (x >= kNumClasses) throw ParameterError(std::string(what) + " contains class " + std::to_string(x));
    }
}

// Doubled midranks (integers) of `scores`, ties sharing the mean rank.
std::vector<std::uint64_t> doubled_midranks(std::span<const double> scores)
{
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<std::uint64_t> ranks(scores.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        // 1-based ranks i+1 .. j+1, mean (i+j+2)/2
        for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = i + j + 2;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b)
{
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw UndefinedMetricError("correlation of a constant sequence");
    return sab / std::sqrt(saa * sbb);
}

} // namespace

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels)
{
    if (preds.size() != labels.size()) {
        throw ParameterError("macro_f1: " + std::to_string(preds.size()) + " predictions for "
                             + std::to_string(labels.size()) + " labels");
    }
    if (preds.empty()) throw ParameterError("macro_f1 of an empty set");
    check_labels(preds, "predictions");
    check_labels(labels, "labels");

    std::array<std::uint64_t, kNumClasses> tp{}, fp{}, fn{};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == labels[i]) ++tp[labels[i]];
        else {
            ++fp[preds[i]];
            ++fn[labels[i]];
        }
    }
    // F1_c = 2tp / d_c with d_c = 2tp + fp + fn. The mean of the two is
    // (tp0 d1 + tp1 d0) / (d0 d1), evaluated with one division.
    const std::uint64_t d0 = 2 * tp[0] + fp[0] + fn[0];
    const std::uint64_t d1 = 2 * tp[1] + fp[1] + fn[1];
    if (d0 == 0) return static_cast<double>(tp[1]) / static_cast<double>(d1);
    if (d1 == 0) return static_cast<double>(tp[0]) / static_cast<double>(d0);
    return static_cast<double>(tp[0] * d1 + tp[1] * d0) / static_cast<double>(d0 * d1);
}

double auc(std::span<const double> scores, std::span<const std::size_t> labels)
{
    if (scores.size() != labels.size()) throw ParameterError("auc: scores and labels differ in length");
    check_labels(labels, "labels");
    for (double s : scores) {
        if (!std::isfinite(s)) throw NumericError("auc: non-finite score");
    }
    const auto ranks = doubled_midranks(scores);
    std::uint64_t pos = 0, rank_sum2 = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kHate) {
            ++pos;
            rank_sum2 += ranks[i];
        }
    }
    const std::uint64_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw UndefinedMetricError("auc needs both classes present");
    // 2U = 2 R_pos - pos (pos + 1); AUC = 2U / (2 pos neg)
    const std::uint64_t u2 = rank_sum2 - pos * (pos + 1);
    return static_cast<double>(u2) / static_cast<double>(2 * pos * neg);
}

MetricReport evaluate_predictions(std::span<const std::size_t> preds, std::span<const double> scores,
                                  std::span<const std::size_t> labels)
{
    MetricReport r;
    r.n = labels.size();
    r.macro_f1 = macro_f1(preds, labels);
    r.auc = auc(scores, labels);
    for (std::size_t i = 0; i < labels.size(); ++i) ++r.confusion[labels[i]][preds[i]];
    return r;
}

MetricReport evaluate_model(const EncoderModel& model, std::span<const Example> data)
{
    std::vector<std::size_t> preds, labels;
    std::vector<double> scores;
    for (const auto& e : data) {
        const auto p = classify(model, e.text);
        preds.push_back(p[kHate] > p[kNonHate] ? kHate : kNonHate);
        scores.push_back(p[kHate]);
        labels.push_back(e.label);
    }
    return evaluate_predictions(preds, scores, labels);
}

RunDelta compare_runs(const MetricReport& a, const MetricReport& b)
{
    return {a.macro_f1 - b.macro_f1, a.auc - b.auc, a.n, b.n};
}

double kendall_tau(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size() || a.size() < 2) throw ParameterError("kendall_tau needs two equal-length sequences");
    long long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = i + 1; j < a.size(); ++j) {
            const double da = a[i] - a[j], db = b[i] - b[j];
            if (da == 0.0 && db == 0.0) continue;
            if (da == 0.0) ++ties_a;
            else if (db == 0.0) ++ties_b;
            else if ((da > 0) == (db > 0)) ++concordant;
            else ++discordant;
        }
    }
    const double n0 = static_cast<double>(concordant + discordant);
    const double denom = std::sqrt((n0 + ties_a) * (n0 + ties_b));
    if (denom == 0.0) throw UndefinedMetricError("kendall_tau of constant sequences");
    return static_cast<double>(concordant - discordant) / denom;
}

double spearman(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size() || a.size() < 2) throw ParameterError("spearman needs two equal-length sequences");
    const auto ra = doubled_midranks(a), rb = doubled_midranks(b);
    return pearson(std::vector<double>(ra.begin(), ra.end()), std::vector<double>(rb.begin(), rb.end()));
}

NormReport norm_report(const EncoderModel& model, const std::string& text, const NormContext& ctx)
{
    if (ctx.label >= kNumClasses) throw ParameterError("norm_report: label out of range");
    if (!all_finite(model.params)) throw NumericError("model parameters are not finite");
    NormReport r;
    r.layer = ctx.layer.empty() ? model.last_layer() : ctx.layer;
    const auto l = model.layer_index(r.layer);

    diff::Tape tape;
    const auto vars = bind_parameters(tape, model.params, true);
    const auto ids = tokenize(model, text);
    const auto g = build_encoder_graph(vars, model.config, ids);
    diff::Var loss = diff::softmax_cross_entropy(g.logits, ctx.label);
    if (ctx.protos && ctx.cav && ctx.concept_cfg && ctx.concept_cfg->gamma > 0.0) {
        const auto cl = model.layer_index(ctx.cav->layer);
        const auto term = concept_term_graph(g.bos(cl), *ctx.protos, ctx.label, *ctx.cav, ctx.concept_cfg->mode);
        if (term) loss = diff::add(loss, diff::scale(*term, ctx.concept_cfg->gamma));
    }
    tape.backward(loss);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        r.tokens.push_back(model.vocab.word(ids[t]));
        const auto& state = g.states[l][t];
        r.activation_norms.push_back(norm(state.value().data()));
        r.gradient_norms.push_back(norm(tape.grad(state).data()));
    }
    return r;
}

} // namespace ktcr
