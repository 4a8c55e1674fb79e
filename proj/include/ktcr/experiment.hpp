#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ktcr/datalab.hpp"
#include "ktcr/doe.hpp"
#include "ktcr/evalkit.hpp"
#include "ktcr/refine.hpp"

namespace ktcr {

// ---- configuration -----------------------------------------------------------

struct DatasetRef {
    std::string path;
    std::string scheme = "binary";
};

struct DataConfig {
    /// Generate the four splits with the synthetic corpus instead of reading files.
    bool synthesize = true;
    SynthSpec synth = [] {
        SynthSpec s;
        s.n_explicit_hate = s.n_neutral = 160;
        s.n_implicit_hate = s.n_implicit_neutral = 120;
        s.marker_strength = 0.7;
        return s;
    }();
    /// Per-category share held out for testing.
    double test_fraction = 0.25;
    /// Share of the remaining explicit/neutral sentences that forms the base
    /// dataset; the rest joins the DOE candidate pool.
    double source_fraction = 0.75;
    /// Downsample the majority class of the source split.
    bool balance = false;
    DatasetRef source, pool, test_implicit, test_explicit;
};

struct EncoderSection {
    std::size_t embed_dim = 8;
    std::vector<std::size_t> layer_dims{16, 16};
    double lr = 0.1;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
};

struct DoeSection {
    std::size_t k = 80;
    std::size_t baseline_size = 32;
    std::size_t probe_eval_size = 64;
    bool proxy = false;
    ProbeHyper probe{1000, 1.0, 0.2};
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out = "runs";
    DataConfig data;
    EncoderSection teacher{8, {24, 24}, 0.1, 20, 32};
    EncoderSection student;
    DoeSection doe;
    AutoencoderHyper bridge{0.005, 3, 0};
    KtcrConfig ktcr = [] {
        KtcrConfig k;
        k.epochs = 20;
        return k;
    }();
    /// Base dataset for the refinement stage: the source split alone, or the
    /// source split plus the concept and random sets.
    bool augment = false;

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys are a configuration error.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Sets a dotted key ("ktcr.gamma") to a value parsed as JSON, or taken as a
/// string when it does not parse.
void apply_override(nlohmann::json& tree, const std::string& assignment);

/// FNV-1a of the canonical serialized configuration.
std::uint64_t config_hash(const ExperimentConfig& c);

// ---- runs ------------------------------------------------------------------------

/// A run directory `<out>/run-<hash>` holding every artifact of one configuration.
class Run {
public:
    explicit Run(ExperimentConfig cfg);

    const ExperimentConfig& config() const noexcept { return cfg_; }
    const std::filesystem::path& dir() const noexcept { return dir_; }
    std::uint64_t hash() const noexcept { return hash_; }
    std::filesystem::path file(const std::string& name) const { return dir_ / name; }
    /// Seed for a pipeline stage, derived from the global seed.
    std::uint64_t stage_seed(const std::string& stage) const;

private:
    ExperimentConfig cfg_;
    std::uint64_t hash_;
    std::filesystem::path dir_;
};

struct Splits {
    std::vector<LabeledText> source, pool, test_implicit, test_explicit;
};

/// Four synthetic splits; a pure function of the data configuration and seed.
Splits synth_splits(const DataConfig& data, std::uint64_t seed);
Splits load_splits(const Run& run);

// One function per pipeline stage. Each reads earlier artifacts from the run
// directory and writes its own.
void stage_synth(const Run& run);
void stage_train_student(const Run& run);
void stage_doe_build(const Run& run);
void stage_train_teacher(const Run& run);
void stage_train_ae(const Run& run);
void stage_ktcr(const Run& run);
void stage_train_student_baseline(const Run& run);
/// Evaluates every student present on both test splits into summary.csv.
void stage_eval(const Run& run);
void stage_norms(const Run& run, const std::string& text, const std::string& model_file);

/// Evaluates a JSON-lines file of {label, pred, score} records.
MetricReport eval_predictions_file(const std::filesystem::path& path);

struct SummaryRow {
    std::string model;
    std::string split;
    MetricReport report;
};

std::vector<SummaryRow> read_summary(const std::filesystem::path& path);
void write_summary(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

/// synth, train-student, doe-build, train-teacher, train-ae, ktcr,
/// train-student-baseline, eval.
void run_pipeline(const Run& run);

/// Runs the pipeline once per value of a dotted key; returns the run directories.
std::vector<std::filesystem::path> run_sweep(const nlohmann::json& base, const std::string& key,
                                             const std::vector<nlohmann::json>& values);

ConceptSets read_concept_sets(const std::filesystem::path& path);
void write_concept_sets(const std::filesystem::path& path, const ConceptSets& sets);

} // namespace ktcr
