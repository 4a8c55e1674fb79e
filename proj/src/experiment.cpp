#include "ktcr/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "ktcr/error.hpp"
#include "ktcr/model_io.hpp"

namespace ktcr {

using nlohmann::json;

// ---- configuration -----------------------------------------------------------

namespace {

json encoder_json(const EncoderSection& e)
{
    return {{"embed_dim", e.embed_dim}, {"layer_dims", e.layer_dims}, {"lr", e.lr}, {"epochs", e.epochs},
            {"batch_size", e.batch_size}};
}

json dataset_json(const DatasetRef& d) { return {{"path", d.path}, {"scheme", d.scheme}}; }

json probe_json(const ProbeHyper& p)
{
    return {{"epochs", p.epochs}, {"lr", p.learning_rate}, {"held_out_fraction", p.held_out_fraction}};
}

// Every key of `given` must exist in `defaults`; objects are checked recursively.
void check_keys(const json& given, const json& defaults, const std::string& prefix)
{
    if (!given.is_object()) throw ConfigError("configuration '" + prefix + "' must be an object");
    for (const auto& [key, value] : given.items()) {
        const auto name = prefix.empty() ? key : prefix + "." + key;
        if (!defaults.contains(key)) throw ConfigError("unknown configuration key '" + name + "'");
        if (defaults[key].is_object()) check_keys(value, defaults[key], name);
    }
}

template <typename T>
T get(const json& j, const char* key, const std::string& section)
{
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("configuration '" + section + "." + key + "': " + e.what());
    }
}

EncoderSection encoder_from(const json& j, const std::string& s)
{
    return {get<std::size_t>(j, "embed_dim", s), get<std::vector<std::size_t>>(j, "layer_dims", s),
            get<double>(j, "lr", s), get<std::size_t>(j, "epochs", s), get<std::size_t>(j, "batch_size", s)};
}

ProbeHyper probe_from(const json& j, const std::string& s)
{
    return {get<std::size_t>(j, "epochs", s), get<double>(j, "lr", s), get<double>(j, "held_out_fraction", s)};
}

DatasetRef dataset_from(const json& j, const std::string& s)
{
    return {get<std::string>(j, "path", s), get<std::string>(j, "scheme", s)};
}

std::uint64_t fnv1a(const std::string& s) { return text_hash(s); }

std::uint64_t mix(std::uint64_t a, std::uint64_t b)
{
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void validate_encoder(const EncoderSection& e, const char* name)
{
    const std::string n(name);
    if (e.embed_dim < 1) throw ParameterError(n + ".embed_dim must be >= 1");
    if (e.layer_dims.empty()) throw ParameterError(n + ".layer_dims must list at least one layer");
    for (auto d : e.layer_dims) {
        if (d < 1) throw ParameterError(n + ".layer_dims entries must be >= 1");
    }
    if (!(e.lr > 0.0)) throw ParameterError(n + ".lr must be > 0");
    if (e.epochs < 1) throw ParameterError(n + ".epochs must be >= 1");
    if (e.batch_size < 1) throw ParameterError(n + ".batch_size must be >= 1");
}

} // namespace

void ExperimentConfig::validate() const
{
    if (data.synthesize) data.synth.validate();
    else {
        for (const auto* d : {&data.source, &data.pool, &data.test_implicit, &data.test_explicit}) {
            if (d->path.empty()) throw ConfigError("data paths must all be set when data.synthesize is false");
            if (!std::filesystem::exists(d->path)) throw ConfigError("data file not found: " + d->path);
            scheme_from_string(d->scheme);
        }
    }
    if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) {
        throw ParameterError("data.test_fraction must lie in (0, 1)");
    }
    if (!(data.source_fraction > 0.0 && data.source_fraction <= 1.0)) {
        throw ParameterError("data.source_fraction must lie in (0, 1]");
    }
    validate_encoder(teacher, "teacher");
    validate_encoder(student, "student");
    if (doe.k == 0 || doe.k % 2 != 0) throw ParameterError("doe.k must be a positive even count");
    if (doe.baseline_size < 4) throw ParameterError("doe.baseline_size must be >= 4");
    if (doe.probe_eval_size < 1) throw ParameterError("doe.probe_eval_size must be >= 1");
    doe.probe.validate();
    bridge.validate();
    ktcr.validate();
    if (out.empty()) throw ConfigError("out must name a directory");
}

json to_json(const ExperimentConfig& c)
{
    const auto& s = c.data.synth;
    const auto& k = c.ktcr;
    return {
        {"seed", c.seed},
        {"out", c.out},
        {"data",
         {{"synthesize", c.data.synthesize},
          {"synth",
           {{"n_explicit_hate", s.n_explicit_hate}, {"n_implicit_hate", s.n_implicit_hate},
            {"n_neutral", s.n_neutral}, {"n_implicit_neutral", s.n_implicit_neutral},
            {"overt_vocab", s.overt_vocab}, {"cue_vocab", s.cue_vocab}, {"group_vocab", s.group_vocab},
            {"topic_vocab", s.topic_vocab}, {"implicit_topic_vocab", s.implicit_topic_vocab},
            {"filler_vocab", s.filler_vocab}, {"marker_strength", s.marker_strength},
            {"cue_in_neutral", s.cue_in_neutral}, {"min_len", s.min_len}, {"max_len", s.max_len},
            {"seed", s.seed}}},
          {"test_fraction", c.data.test_fraction},
          {"source_fraction", c.data.source_fraction},
          {"balance", c.data.balance},
          {"source", dataset_json(c.data.source)},
          {"pool", dataset_json(c.data.pool)},
          {"test_implicit", dataset_json(c.data.test_implicit)},
          {"test_explicit", dataset_json(c.data.test_explicit)}}},
        {"teacher", encoder_json(c.teacher)},
        {"student", encoder_json(c.student)},
        {"doe",
         {{"k", c.doe.k}, {"baseline_size", c.doe.baseline_size}, {"probe_eval_size", c.doe.probe_eval_size},
          {"proxy", c.doe.proxy}, {"probe", probe_json(c.doe.probe)}}},
        {"bridge", {{"lr", c.bridge.learning_rate}, {"epochs", c.bridge.epochs}}},
        {"ktcr",
         {{"gamma", k.gamma}, {"K", k.K}, {"beta", k.beta}, {"epochs", k.epochs},
          {"cav_update_cycle", k.cav_update_cycle}, {"proto_update_cycle", k.proto_update_cycle},
          {"mode", to_string(k.mode)}, {"layer", k.layer}, {"lr", k.lr}, {"batch_size", k.batch_size},
          {"ae", {{"lr", k.ae.learning_rate}, {"epochs", k.ae.epochs}}}, {"probe", probe_json(k.probe)}}},
        {"augment", c.augment},
    };
}

ExperimentConfig config_from_json(const json& given)
{
    const ExperimentConfig defaults;
    json j = to_json(defaults);
    check_keys(given, j, "");
    j.merge_patch(given);

    ExperimentConfig c;
    c.seed = get<std::uint64_t>(j, "seed", "");
    c.out = get<std::string>(j, "out", "");
    c.augment = get<bool>(j, "augment", "");

    const auto& d = j["data"];
    c.data.synthesize = get<bool>(d, "synthesize", "data");
    const auto& s = d["synth"];
    auto& sp = c.data.synth;
    sp.n_explicit_hate = get<std::size_t>(s, "n_explicit_hate", "data.synth");
    sp.n_implicit_hate = get<std::size_t>(s, "n_implicit_hate", "data.synth");
    sp.n_neutral = get<std::size_t>(s, "n_neutral", "data.synth");
    sp.n_implicit_neutral = get<std::size_t>(s, "n_implicit_neutral", "data.synth");
    sp.overt_vocab = get<std::size_t>(s, "overt_vocab", "data.synth");
    sp.cue_vocab = get<std::size_t>(s, "cue_vocab", "data.synth");
    sp.group_vocab = get<std::size_t>(s, "group_vocab", "data.synth");
    sp.topic_vocab = get<std::size_t>(s, "topic_vocab", "data.synth");
    sp.implicit_topic_vocab = get<std::size_t>(s, "implicit_topic_vocab", "data.synth");
    sp.filler_vocab = get<std::size_t>(s, "filler_vocab", "data.synth");
    sp.marker_strength = get<double>(s, "marker_strength", "data.synth");
    sp.cue_in_neutral = get<double>(s, "cue_in_neutral", "data.synth");
    sp.min_len = get<std::size_t>(s, "min_len", "data.synth");
    sp.max_len = get<std::size_t>(s, "max_len", "data.synth");
    sp.seed = get<std::uint64_t>(s, "seed", "data.synth");
    c.data.test_fraction = get<double>(d, "test_fraction", "data");
    c.data.source_fraction = get<double>(d, "source_fraction", "data");
    c.data.balance = get<bool>(d, "balance", "data");
    c.data.source = dataset_from(d["source"], "data.source");
    c.data.pool = dataset_from(d["pool"], "data.pool");
    c.data.test_implicit = dataset_from(d["test_implicit"], "data.test_implicit");
    c.data.test_explicit = dataset_from(d["test_explicit"], "data.test_explicit");

    c.teacher = encoder_from(j["teacher"], "teacher");
    c.student = encoder_from(j["student"], "student");

    const auto& doe = j["doe"];
    c.doe.k = get<std::size_t>(doe, "k", "doe");
    c.doe.baseline_size = get<std::size_t>(doe, "baseline_size", "doe");
    c.doe.probe_eval_size = get<std::size_t>(doe, "probe_eval_size", "doe");
    c.doe.proxy = get<bool>(doe, "proxy", "doe");
    c.doe.probe = probe_from(doe["probe"], "doe.probe");

    c.bridge.learning_rate = get<double>(j["bridge"], "lr", "bridge");
    c.bridge.epochs = get<std::size_t>(j["bridge"], "epochs", "bridge");

    const auto& k = j["ktcr"];
    auto& kc = c.ktcr;
    kc.gamma = get<double>(k, "gamma", "ktcr");
    kc.K = get<std::size_t>(k, "K", "ktcr");
    kc.beta = get<double>(k, "beta", "ktcr");
    kc.epochs = get<std::size_t>(k, "epochs", "ktcr");
    kc.cav_update_cycle = get<std::size_t>(k, "cav_update_cycle", "ktcr");
    kc.proto_update_cycle = get<std::size_t>(k, "proto_update_cycle", "ktcr");
    try {
        kc.mode = concept_mode_from_string(get<std::string>(k, "mode", "ktcr"));
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    kc.layer = get<std::string>(k, "layer", "ktcr");
    kc.lr = get<double>(k, "lr", "ktcr");
    kc.batch_size = get<std::size_t>(k, "batch_size", "ktcr");
    kc.ae.learning_rate = get<double>(k["ae"], "lr", "ktcr.ae");
    kc.ae.epochs = get<std::size_t>(k["ae"], "epochs", "ktcr.ae");
    kc.probe = probe_from(k["probe"], "ktcr.probe");
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open configuration " + path.string());
    try {
        return config_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void apply_override(json& tree, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    const auto key = assignment.substr(0, eq);
    const auto raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &tree;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        if (!node->is_object() && !node->is_null()) {
            throw ConfigError("override key '" + key + "' crosses a non-object value");
        }
        node = &(*node)[path[i]];
    }
    if (!node->is_object() && !node->is_null()) throw ConfigError("override key '" + key + "' crosses a non-object value");
    (*node)[path.back()] = value;
}

std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(to_json(c).dump()); }

// ---- runs ------------------------------------------------------------------------

Run::Run(ExperimentConfig cfg) : cfg_(std::move(cfg)), hash_(config_hash(cfg_))
{
    cfg_.validate();
    char name[32];
    std::snprintf(name, sizeof name, "run-%016llx", static_cast<unsigned long long>(hash_));
    dir_ = std::filesystem::path(cfg_.out) / name;
    std::error_code ec;
    std::filesystem::create_directories(dir_ / "data", ec);
    if (ec) throw DataError("cannot create run directory " + dir_.string() + ": " + ec.message());
    std::ofstream(dir_ / "config.json") << to_json(cfg_).dump(2) << '\n';
    char hex[24];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash_));
    std::ofstream(dir_ / "run.json") << json{{"config_hash", hex}, {"seed", cfg_.seed}}.dump(2) << '\n';
}

std::uint64_t Run::stage_seed(const std::string& stage) const { return mix(cfg_.seed, fnv1a(stage)); }

Splits synth_splits(const DataConfig& data, std::uint64_t seed)
{
    auto spec = data.synth;
    spec.seed = mix(seed, spec.seed);
    const auto corpus = synth_corpus(spec);
    const std::map<SynthCategory, std::size_t> totals{{SynthCategory::explicit_hate, spec.n_explicit_hate},
                                                      {SynthCategory::implicit_hate, spec.n_implicit_hate},
                                                      {SynthCategory::neutral, spec.n_neutral},
                                                      {SynthCategory::implicit_neutral, spec.n_implicit_neutral}};
    std::map<SynthCategory, std::size_t> seen;
    Splits s;
    for (const auto& r : corpus) {
        const auto cat = *synth_category(r);
        const auto i = seen[cat]++;
        const auto n = totals.at(cat);
        const auto n_test = static_cast<std::size_t>(static_cast<double>(n) * data.test_fraction);
        const bool explicit_side = cat == SynthCategory::explicit_hate || cat == SynthCategory::neutral;
        if (i < n_test) (explicit_side ? s.test_explicit : s.test_implicit).push_back(r);
        else if (explicit_side
                 && i - n_test < static_cast<std::size_t>(static_cast<double>(n - n_test) * data.source_fraction)) {
            s.source.push_back(r);
        } else s.pool.push_back(r);
    }
    return s;
}

namespace {

const char* const kSplitNames[] = {"source", "pool", "test_implicit", "test_explicit"};

std::vector<LabeledText>& split_ref(Splits& s, int i)
{
    switch (i) {
    case 0: return s.source;
    case 1: return s.pool;
    case 2: return s.test_implicit;
    default: return s.test_explicit;
    }
}

std::filesystem::path split_path(const Run& run, int i)
{
    return run.dir() / "data" / (std::string(kSplitNames[i]) + ".jsonl");
}

void require(const std::filesystem::path& p, const char* stage)
{
    if (!std::filesystem::exists(p)) {
        throw DataError(p.filename().string() + " is missing from " + p.parent_path().string() + "; run '" + stage
                        + "' first");
    }
}

Vocabulary run_vocabulary(const Splits& s)
{
    auto texts = texts_of(s.source);
    const auto pool = texts_of(s.pool);
    texts.insert(texts.end(), pool.begin(), pool.end());
    return Vocabulary::build(texts);
}

EncoderModel fresh_encoder(const EncoderSection& e, const Vocabulary& vocab, std::uint64_t seed)
{
    EncoderConfig cfg{vocab.size(), e.embed_dim, e.layer_dims, e.layer_dims.back(), seed, true};
    return init_encoder(cfg, vocab);
}

std::vector<Example> concept_examples(const ConceptSets& sets)
{
    std::vector<Example> out;
    for (const auto& t : sets.concept_texts) out.push_back({t, kHate});
    for (const auto& t : sets.random_texts) out.push_back({t, kNonHate});
    return out;
}

std::vector<std::string> all_texts(const ConceptSets& sets)
{
    auto t = sets.concept_texts;
    t.insert(t.end(), sets.random_texts.begin(), sets.random_texts.end());
    return t;
}

std::string concept_layer(const Run& run, const EncoderModel& student)
{
    return run.config().ktcr.layer.empty() ? student.last_layer() : run.config().ktcr.layer;
}

std::vector<Example> refinement_dataset(const Run& run, const Splits& s, const ConceptSets& sets)
{
    auto data = to_examples(s.source);
    if (run.config().augment) {
        const auto extra = concept_examples(sets);
        data.insert(data.end(), extra.begin(), extra.end());
    }
    return data;
}

KtcrConfig refinement_config(const Run& run)
{
    auto cfg = run.config().ktcr;
    cfg.seed = run.stage_seed("ktcr");
    return cfg;
}

json prototypes_json(const PrototypeSet& p)
{
    json classes = json::object();
    for (const auto& [cls, cs] : p.per_class) {
        json list = json::array();
        for (const auto& c : cs) list.push_back(c.values());
        classes[std::to_string(cls)] = list;
    }
    return {{"K", p.K}, {"beta", p.beta}, {"layer", p.layer}, {"classes", classes}};
}

PrototypeSet prototypes_from_json(const json& j)
{
    PrototypeSet p;
    p.K = j.at("K").get<std::size_t>();
    p.beta = j.at("beta").get<double>();
    p.layer = j.at("layer").get<std::string>();
    for (const auto& [cls, list] : j.at("classes").items()) {
        auto& dst = p.per_class[std::stoul(cls)];
        for (const auto& c : list) dst.push_back(Tensor::vector(c.get<std::vector<double>>()));
    }
    return p;
}

} // namespace

Splits load_splits(const Run& run)
{
    Splits s;
    for (int i = 0; i < 4; ++i) {
        const auto p = split_path(run, i);
        require(p, "synth");
        split_ref(s, i) = load_jsonl(p);
    }
    return s;
}

void stage_synth(const Run& run)
{
    const auto& cfg = run.config();
    Splits s;
    if (cfg.data.synthesize) s = synth_splits(cfg.data, cfg.seed);
    else {
        const DatasetRef* refs[] = {&cfg.data.source, &cfg.data.pool, &cfg.data.test_implicit, &cfg.data.test_explicit};
        for (int i = 0; i < 4; ++i) {
            split_ref(s, i) = binarize(load_jsonl(refs[i]->path), scheme_from_string(refs[i]->scheme));
        }
    }
    if (cfg.data.balance) s.source = balance(s.source, run.stage_seed("balance"));
    for (int i = 0; i < 4; ++i) write_jsonl(split_path(run, i), split_ref(s, i));
}

void stage_train_student(const Run& run)
{
    const auto s = load_splits(run);
    const auto& e = run.config().student;
    const auto seed = run.stage_seed("train-student");
    const auto result = train_classifier(fresh_encoder(e, run_vocabulary(s), seed), to_examples(s.source),
                                         {e.lr, e.epochs, e.batch_size, seed});
    save_encoder(run.file("student_base.model.json"), result.model);
}

void write_concept_sets(const std::filesystem::path& path, const ConceptSets& sets)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << json{{"k", sets.k}, {"concept", sets.concept_texts}, {"random", sets.random_texts}}.dump(2) << '\n';
}

ConceptSets read_concept_sets(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        const auto j = json::parse(in);
        return {j.at("concept").get<std::vector<std::string>>(), j.at("random").get<std::vector<std::string>>(),
                j.at("k").get<std::size_t>()};
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what(), 0);
    }
}

void stage_doe_build(const Run& run)
{
    const auto& cfg = run.config();
    require(run.file("student_base.model.json"), "train-student");
    const auto student = load_encoder(run.file("student_base.model.json"));
    const auto s = load_splits(run);
    const auto source = to_examples(s.source);
    const auto pool = to_examples(s.pool);
    const auto seed = run.stage_seed("doe-build");

    const auto baselines = select_baselines(student, source, cfg.doe.baseline_size, seed);
    const auto probe = sample_probe_texts(source, cfg.doe.probe_eval_size, seed);
    DoeOptions opts{cfg.doe.baseline_size, cfg.doe.probe_eval_size,
                    cfg.doe.proxy ? DoeMode::proxy : DoeMode::perturbation, cfg.doe.probe};
    const DoeScorer scorer(student, baselines.explicit_texts, baselines.random_texts, probe, "", seed, opts);

    json meta{{"mode", cfg.doe.proxy ? "proxy" : "perturbation"},
              {"base_sensitivity", scorer.base_sensitivity()},
              {"base_cav_accuracy", scorer.base_cav().probe_accuracy}};
    if (cfg.doe.proxy) {
        // The proxy is admitted only where it ranks like the exact score.
        const auto sample = sample_probe_texts(pool, 64, seed ^ 1);
        std::vector<double> exact, proxy;
        for (const auto& t : sample) {
            exact.push_back(scorer.score(t));
            proxy.push_back(scorer.proxy_score(t));
        }
        const double rho = spearman(exact, proxy);
        meta["proxy_spearman"] = rho;
        if (rho < 0.7) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "DOE proxy agrees with the perturbation score at Spearman %.3f < 0.7", rho);
            throw ConfigError(buf);
        }
    }
    const auto result = build_concept_sets(scorer, pool, cfg.doe.k);
    write_concept_sets(run.file("concept_sets.json"), result.sets);
    write_score_file(run.file("doe_scores.tsv"), result);
    std::ofstream(run.file("doe_meta.json")) << meta.dump(2) << '\n';
}

void stage_train_teacher(const Run& run)
{
    require(run.file("concept_sets.json"), "doe-build");
    const auto sets = read_concept_sets(run.file("concept_sets.json"));
    const auto s = load_splits(run);
    const auto& e = run.config().teacher;
    const auto seed = run.stage_seed("train-teacher");
    const auto result = train_classifier(fresh_encoder(e, run_vocabulary(s), seed), concept_examples(sets),
                                         {e.lr, e.epochs, e.batch_size, seed});
    save_encoder(run.file("teacher.model.json"), result.model);
}

void stage_train_ae(const Run& run)
{
    require(run.file("teacher.model.json"), "train-teacher");
    require(run.file("student_base.model.json"), "train-student");
    const auto teacher = load_encoder(run.file("teacher.model.json"));
    const auto student = load_encoder(run.file("student_base.model.json"));
    const auto sets = read_concept_sets(run.file("concept_sets.json"));
    const auto layer = concept_layer(run, student);
    auto hyper = run.config().bridge;
    hyper.seed = run.stage_seed("train-ae");
    const auto init = init_autoencoder(teacher.config.pooled_dim, student.layer_dim(layer), hyper.seed);
    const auto result = train_autoencoder(init, activation_pairs(teacher, student, layer, all_texts(sets)), hyper);
    save_autoencoder(run.file("autoencoder.model.json"), result.ae);
    std::ofstream(run.file("autoencoder_curve.json")) << json(result.loss_curve).dump() << '\n';
}

void stage_ktcr(const Run& run)
{
    require(run.file("autoencoder.model.json"), "train-ae");
    const auto student = load_encoder(run.file("student_base.model.json"));
    const auto teacher = load_encoder(run.file("teacher.model.json"));
    const auto ae = load_autoencoder(run.file("autoencoder.model.json"));
    const auto sets = read_concept_sets(run.file("concept_sets.json"));
    const auto s = load_splits(run);

    KtcrMonitor monitor;
    for (const auto& e : to_examples(s.test_implicit)) {
        if (e.label == kHate) monitor.examples.push_back(e);
    }
    const auto data = refinement_dataset(run, s, sets);
    auto cfg = refinement_config(run);
    cfg.layer = concept_layer(run, student);
    auto result = ktcr_train(student, teacher, ae, sets, data, cfg, monitor);
    result.history.config_hash = run.hash();
    save_encoder(run.file("student_ktcr.model.json"), result.student);
    write_history_jsonl(run.file("history.jsonl"), result.history);
    write_cav(run.file("cav.txt"), result.cav);
    std::ofstream(run.file("prototypes.json")) << prototypes_json(result.protos).dump() << '\n';
}

void stage_train_student_baseline(const Run& run)
{
    require(run.file("concept_sets.json"), "doe-build");
    const auto student = load_encoder(run.file("student_base.model.json"));
    const auto sets = read_concept_sets(run.file("concept_sets.json"));
    const auto s = load_splits(run);
    const auto cfg = refinement_config(run);
    const auto result = train_classifier(student, refinement_dataset(run, s, sets),
                                         {cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed});
    auto model = result.model;
    save_encoder(run.file("student_baseline.model.json"), model);
}

namespace {

std::string g17(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void write_summary(const std::filesystem::path& path, const std::vector<SummaryRow>& rows)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "model,split,n,macro_f1,auc\n";
    for (const auto& r : rows) {
        out << r.model << ',' << r.split << ',' << r.report.n << ',' << g17(r.report.macro_f1) << ','
            << g17(r.report.auc) << '\n';
    }
}

std::vector<SummaryRow> read_summary(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<SummaryRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string model, split, n, f1, auc_s;
        if (!std::getline(ss, model, ',') || !std::getline(ss, split, ',') || !std::getline(ss, n, ',')
            || !std::getline(ss, f1, ',') || !std::getline(ss, auc_s)) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed summary row", lineno);
        }
        SummaryRow r{model, split, {}};
        r.report.n = std::stoul(n);
        r.report.macro_f1 = std::strtod(f1.c_str(), nullptr);
        r.report.auc = std::strtod(auc_s.c_str(), nullptr);
        rows.push_back(r);
    }
    return rows;
}

void stage_eval(const Run& run)
{
    const auto s = load_splits(run);
    const auto implicit_split = to_examples(s.test_implicit);
    const auto explicit_split = to_examples(s.test_explicit);
    std::vector<SummaryRow> rows;
    json metrics = json::object();
    for (const char* name : {"student_base", "student_baseline", "student_ktcr"}) {
        const auto path = run.file(std::string(name) + ".model.json");
        if (!std::filesystem::exists(path)) continue;
        const auto model = load_encoder(path);
        for (const auto& [split, data] : {std::pair{"implicit", &implicit_split}, std::pair{"explicit", &explicit_split}}) {
            const auto r = evaluate_model(model, *data);
            rows.push_back({name, split, r});
            metrics[name][split] = {{"n", r.n}, {"macro_f1", r.macro_f1}, {"auc", r.auc},
                                    {"confusion", {{r.confusion[0][0], r.confusion[0][1]},
                                                   {r.confusion[1][0], r.confusion[1][1]}}}};
        }
    }
    if (rows.empty()) throw DataError("no trained student in " + run.dir().string() + "; run 'train-student' first");
    write_summary(run.file("summary.csv"), rows);
    std::ofstream(run.file("metrics.json")) << metrics.dump(2) << '\n';
}

void stage_norms(const Run& run, const std::string& text, const std::string& model_file)
{
    const auto path = run.file(model_file.empty() ? "student_ktcr.model.json" : model_file);
    require(path, "ktcr");
    const auto model = load_encoder(path);
    const auto pred = predict(model, text);

    NormContext ctx{pred, concept_layer(run, model), nullptr, nullptr, nullptr};
    std::optional<PrototypeSet> protos;
    std::optional<Cav> cav;
    const auto cfg = run.config().ktcr;
    if (std::filesystem::exists(run.file("prototypes.json")) && std::filesystem::exists(run.file("cav.txt"))) {
        std::ifstream in(run.file("prototypes.json"));
        protos = prototypes_from_json(json::parse(in));
        cav = read_cav(run.file("cav.txt"));
        ctx.protos = &*protos;
        ctx.cav = &*cav;
    }
    const ConceptTermConfig term{cfg.gamma, cfg.mode};
    ctx.concept_cfg = &term;
    const auto r = norm_report(model, text, ctx);
    std::ofstream out(run.file("norms.tsv"));
    out << "token\tactivation_norm\tgradient_norm\n";
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
        out << r.tokens[i] << '\t' << g17(r.activation_norms[i]) << '\t' << g17(r.gradient_norms[i]) << '\n';
    }
}

MetricReport eval_predictions_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::size_t> preds, labels;
    std::vector<double> scores;
    std::string line;
    std::size_t lineno = 0;
    auto as_class = [&](const json& v, const char* what) -> std::size_t {
        if (v.is_string()) {
            const auto& s = v.get_ref<const std::string&>();
            if (s == "positive" || s == "hateful" || s == "1") return kHate;
            if (s == "negative" || s == "non-hateful" || s == "0") return kNonHate;
        } else if (v.is_number_integer() && (v.get<int>() == 0 || v.get<int>() == 1)) {
            return v.get<std::size_t>();
        }
        throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": bad " + what, lineno);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what(), lineno);
        }
        if (!j.contains("label") || !j.contains("pred")) {
            throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": needs 'label' and 'pred'", lineno);
        }
        labels.push_back(as_class(j["label"], "label"));
        preds.push_back(as_class(j["pred"], "pred"));
        scores.push_back(j.contains("score") ? j["score"].get<double>() : static_cast<double>(preds.back()));
    }
    return evaluate_predictions(preds, scores, labels);
}

void run_pipeline(const Run& run)
{
    stage_synth(run);
    stage_train_student(run);
    stage_doe_build(run);
    stage_train_teacher(run);
    stage_train_ae(run);
    stage_ktcr(run);
    stage_train_student_baseline(run);
    stage_eval(run);
}

std::vector<std::filesystem::path> run_sweep(const json& base, const std::string& key, const std::vector<json>& values)
{
    std::vector<std::filesystem::path> dirs;
    for (const auto& v : values) {
        auto tree = base;
        apply_override(tree, key + "=" + v.dump());
        const Run run(config_from_json(tree));
        run_pipeline(run);
        dirs.push_back(run.dir());
    }
    return dirs;
}

} // namespace ktcr
