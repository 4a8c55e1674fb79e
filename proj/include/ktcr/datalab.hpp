#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ktcr/types.hpp"

namespace ktcr {

enum class Label { negative = 0, positive = 1 };
enum class Origin { wiki_like, ea_like, ch_like, synthetic, unknown };
enum class Scheme { wiki, ea, ch, binary };

const char* to_string(Label l);
const char* to_string(Origin o);
Origin origin_from_string(const std::string& s);
Scheme scheme_from_string(const std::string& s);

struct LabeledText {
    std::string text;
    /// Unset until binarized (or read from a derived file).
    std::optional<Label> label;
    Origin origin = Origin::unknown;
    std::string raw_label;
};

/// One JSON object per line with string fields `text` and `label`. Blank
/// lines are skipped. Files written by write_jsonl (which carry a
/// `raw_label` field) load with their binary label already set.
std::vector<LabeledText> load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const LabeledText> records);

/// Derives `label` from `raw_label`.
///   wiki: "Toxic" -> positive, "Normal" -> negative, anything else throws
///   ea:   "Hostility against an East Asian (EA) entity" -> positive, rest negative
///   ch:   "Stigmatizing" -> positive, "Not stigmatizing" -> negative, else throws
///   binary: "positive"/"negative" (derived files)
std::vector<LabeledText> binarize(std::span<const LabeledText> records, Scheme scheme);

/// Downsamples the majority class to the minority count, then reshuffles.
std::vector<LabeledText> balance(std::span<const LabeledText> records, std::uint64_t seed);

std::vector<Example> to_examples(std::span<const LabeledText> records);
std::vector<std::string> texts_of(std::span<const LabeledText> records);

// ---- synthetic corpus --------------------------------------------------------

enum class SynthCategory { explicit_hate, implicit_hate, neutral, implicit_neutral };

const char* to_string(SynthCategory c);
std::optional<SynthCategory> synth_category(const LabeledText& record);

/// Generator for a corpus with planted structure:
///  - explicit hate carries overt marker tokens (`ovt*`);
///  - implicit hate carries a target-group token (`grp*`) together with cue
///    tokens (`cue*`), and no overt marker;
///  - implicit neutral carries a group token with its own topic tokens (`inb*`);
///  - neutral carries topic tokens (`top*`), and sometimes a lone cue token,
///    so that only the group+cue co-occurrence marks implicit hate.
/// Every slot not holding a signal token holds a shared filler (`fil*`).
struct SynthSpec {
    std::size_t n_explicit_hate = 0;
    std::size_t n_implicit_hate = 0;
    std::size_t n_neutral = 0;
    std::size_t n_implicit_neutral = 0;

    std::size_t overt_vocab = 8;
    std::size_t cue_vocab = 6;
    std::size_t group_vocab = 4;
    std::size_t topic_vocab = 12;
    std::size_t implicit_topic_vocab = 8;
    std::size_t filler_vocab = 20;

    /// Probability that a content slot holds a category signal token.
    double marker_strength = 0.5;
    /// Probability that a neutral sentence carries one cue token.
    double cue_in_neutral = 0.3;
    std::size_t min_len = 5;
    std::size_t max_len = 9;
    std::uint64_t seed = 0;

    void validate() const;
};

std::vector<LabeledText> synth_corpus(const SynthSpec& spec);

} // namespace ktcr
