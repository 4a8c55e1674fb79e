#include "ktcr/datalab.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include <json.hpp>

#include "ktcr/error.hpp"

namespace ktcr {

using nlohmann::json;

const char* to_string(Label l) { return l == Label::positive ? "positive" : "negative"; }

const char* to_string(Origin o)
{
    switch (o) {
    case Origin::wiki_like: return "wiki-like";
    case Origin::ea_like: return "ea-like";
    case Origin::ch_like: return "ch-like";
    case Origin::synthetic: return "synthetic";
    case Origin::unknown: break;
    }
    return "unknown";
}

Origin origin_from_string(const std::string& s)
{
    if (s == "wiki-like") return Origin::wiki_like;
    if (s == "ea-like") return Origin::ea_like;
    if (s == "ch-like") return Origin::ch_like;
    if (s == "synthetic") return Origin::synthetic;
    return Origin::unknown;
}

Scheme scheme_from_string(const std::string& s)
{
    if (s == "wiki") return Scheme::wiki;
    if (s == "ea") return Scheme::ea;
    if (s == "ch") return Scheme::ch;
    if (s == "binary") return Scheme::binary;
    throw ConfigError("unknown binarization scheme '" + s + "'");
}

std::vector<LabeledText> load_jsonl(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<LabeledText> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what(), lineno);
        }
        if (!obj.is_object()) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected a JSON object", lineno);
        }
        for (const char* field : {"text", "label"}) {
            if (!obj.contains(field)) {
                throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": missing field \"" + field + "\"",
                                  lineno);
            }
            if (!obj[field].is_string()) {
                throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": field \"" + field
                                  + "\" must be a string", lineno);
            }
        }
        LabeledText rec;
        rec.text = obj["text"].get<std::string>();
        const auto label = obj["label"].get<std::string>();
        if (obj.contains("raw_label") && obj["raw_label"].is_string()) {
            if (label != "positive" && label != "negative") {
                throw SchemaError(path.string() + ":" + std::to_string(lineno)
                                  + ": derived record label must be positive or negative", lineno);
            }
            rec.raw_label = obj["raw_label"].get<std::string>();
            rec.label = label == "positive" ? Label::positive : Label::negative;
            if (obj.contains("origin") && obj["origin"].is_string()) {
                rec.origin = origin_from_string(obj["origin"].get<std::string>());
            }
        } else {
            rec.raw_label = label;
        }
        out.push_back(std::move(rec));
    }
    return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const LabeledText> records)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& r : records) {
        json obj;
        obj["text"] = r.text;
        obj["label"] = r.label ? to_string(*r.label) : r.raw_label;
        obj["raw_label"] = r.raw_label;
        obj["origin"] = to_string(r.origin);
        out << obj.dump() << '\n';
    }
}

std::vector<LabeledText> binarize(std::span<const LabeledText> records, Scheme scheme)
{
    std::vector<LabeledText> out(records.begin(), records.end());
    for (auto& r : out) {
        const auto& raw = r.raw_label;
        switch (scheme) {
        case Scheme::wiki:
            if (raw == "Toxic") r.label = Label::positive;
            else if (raw == "Normal") r.label = Label::negative;
            else throw UnknownLabelError("wiki scheme: unknown label '" + raw + "'");
            r.origin = Origin::wiki_like;
            break;
        case Scheme::ea:
            r.label = raw == "Hostility against an East Asian (EA) entity" ? Label::positive : Label::negative;
            r.origin = Origin::ea_like;
            break;
        case Scheme::ch:
            if (raw == "Stigmatizing") r.label = Label::positive;
            else if (raw == "Not stigmatizing") r.label = Label::negative;
            else throw UnknownLabelError("ch scheme: unknown label '" + raw + "'");
            r.origin = Origin::ch_like;
            break;
        case Scheme::binary:
            if (raw == "positive") r.label = Label::positive;
            else if (raw == "negative") r.label = Label::negative;
            else if (!r.label) throw UnknownLabelError("binary scheme: unknown label '" + raw + "'");
            break;
        }
    }
    return out;
}

std::vector<LabeledText> balance(std::span<const LabeledText> records, std::uint64_t seed)
{
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].label) throw DataError("balance: record " + std::to_string(i) + " is not binarized");
        (*records[i].label == Label::positive ? pos : neg).push_back(i);
    }
    if (pos.empty() || neg.empty()) throw DegenerateDataError("balance: only one class present");

    std::mt19937_64 rng(seed);
    auto& major = pos.size() > neg.size() ? pos : neg;
    const auto keep = std::min(pos.size(), neg.size());
    std::shuffle(major.begin(), major.end(), rng);
    major.resize(keep);

    std::vector<std::size_t> chosen(pos);
    chosen.insert(chosen.end(), neg.begin(), neg.end());
    std::sort(chosen.begin(), chosen.end());
    std::shuffle(chosen.begin(), chosen.end(), rng);

    std::vector<LabeledText> out;
    out.reserve(chosen.size());
    for (auto i : chosen) out.push_back(records[i]);
    return out;
}

std::vector<Example> to_examples(std::span<const LabeledText> records)
{
    std::vector<Example> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (!r.label) throw DataError("record is not binarized: '" + r.text + "'");
        out.push_back({r.text, *r.label == Label::positive ? kHate : kNonHate});
    }
    return out;
}

std::vector<std::string> texts_of(std::span<const LabeledText> records)
{
    std::vector<std::string> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.text);
    return out;
}

// ---- synthetic corpus --------------------------------------------------------

const char* to_string(SynthCategory c)
{
    switch (c) {
    case SynthCategory::explicit_hate: return "explicit_hate";
    case SynthCategory::implicit_hate: return "implicit_hate";
    case SynthCategory::neutral: return "neutral";
    case SynthCategory::implicit_neutral: return "implicit_neutral";
    }
    return "?";
}

std::optional<SynthCategory> synth_category(const LabeledText& record)
{
    for (auto c : {SynthCategory::explicit_hate, SynthCategory::implicit_hate, SynthCategory::neutral,
                   SynthCategory::implicit_neutral}) {
        if (record.raw_label == to_string(c)) return c;
    }
    return std::nullopt;
}

void SynthSpec::validate() const
{
    const std::size_t counts[] = {n_explicit_hate, n_implicit_hate, n_neutral, n_implicit_neutral};
    std::size_t total = 0, nonzero = 0;
    for (auto c : counts) {
        total += c;
        nonzero += c > 0;
    }
    if (total == 0) throw ParameterError("synth_corpus: all category counts are zero");
    if (nonzero < 2) throw ParameterError("synth_corpus: at least two categories must be non-empty");
    if (!(marker_strength > 0.0 && marker_strength <= 1.0)) {
        throw ParameterError("synth_corpus: marker_strength must lie in (0, 1]");
    }
    if (cue_in_neutral < 0.0 || cue_in_neutral > 1.0) throw ParameterError("synth_corpus: cue_in_neutral must lie in [0, 1]");
    if (overt_vocab == 0 || cue_vocab == 0 || group_vocab == 0 || topic_vocab == 0 || implicit_topic_vocab == 0
        || filler_vocab == 0) {
        throw ParameterError("synth_corpus: every vocabulary size must be >= 1");
    }
    if (min_len < 1 || max_len < min_len) throw ParameterError("synth_corpus: need 1 <= min_len <= max_len");
}

namespace {

class SentenceMaker {
public:
    SentenceMaker(const SynthSpec& spec) : spec_(spec), rng_(spec.seed) {}

    std::string make(SynthCategory c)
    {
        std::vector<std::string> words;
        const auto len = spec_.min_len + rng_() % (spec_.max_len - spec_.min_len + 1);
        switch (c) {
        case SynthCategory::explicit_hate:
            if (chance(0.5)) words.push_back(word("grp", spec_.group_vocab));
            fill(words, len, "ovt", spec_.overt_vocab);
            break;
        case SynthCategory::implicit_hate:
            words.push_back(word("grp", spec_.group_vocab));
            fill(words, len, "cue", spec_.cue_vocab);
            break;
        case SynthCategory::neutral:
            if (chance(spec_.cue_in_neutral)) words.push_back(word("cue", spec_.cue_vocab));
            fill(words, len, "top", spec_.topic_vocab);
            break;
        case SynthCategory::implicit_neutral:
            words.push_back(word("grp", spec_.group_vocab));
            fill(words, len, "inb", spec_.implicit_topic_vocab);
            break;
        }
        std::shuffle(words.begin(), words.end(), rng_);
        std::string out;
        for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
        return out;
    }

private:
    bool chance(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }

    std::string word(const char* prefix, std::size_t vocab) { return prefix + std::to_string(rng_() % vocab); }

    // Appends content slots up to `len` words, each a signal token with
    // probability marker_strength; at least one signal token is guaranteed.
    void fill(std::vector<std::string>& words, std::size_t len, const char* prefix, std::size_t vocab)
    {
        bool any = false;
        const auto start = words.size();
        while (words.size() < std::max(len, start + 1)) {
            if (chance(spec_.marker_strength)) {
                words.push_back(word(prefix, vocab));
                any = true;
            } else {
                words.push_back(word("fil", spec_.filler_vocab));
            }
        }
        if (!any) words[start + rng_() % (words.size() - start)] = word(prefix, vocab);
    }

    const SynthSpec& spec_;
    std::mt19937_64 rng_;
};

} // namespace

std::vector<LabeledText> synth_corpus(const SynthSpec& spec)
{
    spec.validate();
    SentenceMaker maker(spec);
    std::vector<LabeledText> out;
    const std::pair<SynthCategory, std::size_t> plan[] = {
        {SynthCategory::explicit_hate, spec.n_explicit_hate},
        {SynthCategory::implicit_hate, spec.n_implicit_hate},
        {SynthCategory::neutral, spec.n_neutral},
        {SynthCategory::implicit_neutral, spec.n_implicit_neutral},
    };
    for (const auto& [cat, n] : plan) {
        const bool hateful = cat == SynthCategory::explicit_hate || cat == SynthCategory::implicit_hate;
        for (std::size_t i = 0; i < n; ++i) {
            out.push_back({maker.make(cat), hateful ? Label::positive : Label::negative, Origin::synthetic,
                           to_string(cat)});
        }
    }
    std::mt19937_64 rng(spec.seed ^ 0x5DEECE66DULL);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

} // namespace ktcr
