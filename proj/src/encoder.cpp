#include "ktcr/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <random>

#include "ktcr/error.hpp"

namespace ktcr {

// ---- Vocabulary --------------------------------------------------------------

Vocabulary::Vocabulary() : words_{"<unk>", "<s>"}
{
    index_.emplace(words_[kUnk], kUnk);
    index_.emplace(words_[kBos], kBos);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts)
{
    Vocabulary v;
    for (const auto& text : texts) {
        for (auto& w : split_words(text)) {
            if (v.index_.find(w) == v.index_.end()) {
                v.index_.emplace(w, v.words_.size());
                v.words_.push_back(std::move(w));
            }
        }
    }
    return v;
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words)
{
    if (words.size() < 2 || words[kUnk] != "<unk>" || words[kBos] != "<s>") {
        throw DataError("vocabulary must start with <unk>, <s>");
    }
    Vocabulary v;
    v.words_ = std::move(words);
    v.index_.clear();
    for (std::size_t i = 0; i < v.words_.size(); ++i) {
        if (!v.index_.emplace(v.words_[i], i).second) {
            throw DataError("duplicate vocabulary entry '" + v.words_[i] + "'");
        }
    }
    return v;
}

std::vector<std::string> Vocabulary::split_words(const std::string& text)
{
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        // Bytes >= 0x80 (UTF-8 continuation/lead bytes) stay inside words.
        const bool word_char = c >= 0x80 || std::isalnum(c);
        if (word_char) {
            cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::size_t Vocabulary::id(const std::string& word) const
{
    const auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::tokenize(const std::string& text) const
{
    std::vector<std::size_t> ids{kBos};
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

// ---- config / model --------------------------------------------------------------

void EncoderConfig::validate() const
{
    if (vocab_size < 2) throw ConfigError("encoder vocab_size must be >= 2 (UNK and BOS)");
    if (embed_dim < 1) throw ConfigError("encoder embed_dim must be >= 1");
    if (layer_dims.empty()) throw ConfigError("encoder layer_dims must be non-empty");
    for (auto d : layer_dims) {
        if (d < 1) throw ConfigError("encoder layer dims must be >= 1");
    }
    if (pooled_dim != layer_dims.back()) {
        throw ConfigError("encoder pooled_dim (" + std::to_string(pooled_dim)
                          + ") must equal the last layer dim (" + std::to_string(layer_dims.back()) + ")");
    }
}

std::vector<std::string> EncoderModel::layer_names() const
{
    std::vector<std::string> out;
    for (std::size_t l = 1; l <= config.layer_dims.size(); ++l) out.push_back("layer" + std::to_string(l));
    return out;
}

std::size_t EncoderModel::layer_index(const std::string& layer) const
{
    const auto names = layer_names();
    const auto it = std::find(names.begin(), names.end(), layer);
    if (it == names.end()) throw ConfigError("unknown layer '" + layer + "'");
    return static_cast<std::size_t>(it - names.begin()) + 1;
}

std::string EncoderModel::last_layer() const { return "layer" + std::to_string(config.layer_dims.size()); }

std::size_t EncoderModel::layer_dim(const std::string& layer) const
{
    return config.layer_dims[layer_index(layer) - 1];
}

EncoderModel init_encoder(const EncoderConfig& config, Vocabulary vocab)
{
    config.validate();
    if (config.vocab_size != vocab.size()) {
        throw ConfigError("encoder vocab_size " + std::to_string(config.vocab_size)
                          + " does not match vocabulary of " + std::to_string(vocab.size()));
    }
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> embed_dist(0.0, 0.5);

    EncoderModel m{config, std::move(vocab), {}, 0};
    Tensor embed = Tensor::zeros({config.vocab_size, config.embed_dim});
    for (auto& v : embed.values()) v = embed_dist(rng);
    m.params.emplace("embed", std::move(embed));

    auto xavier = [&rng](std::size_t rows, std::size_t cols) {
        const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
        std::uniform_real_distribution<double> dist(-a, a);
        Tensor t = Tensor::zeros({rows, cols});
        for (auto& v : t.values()) v = dist(rng);
        return t;
    };

    std::size_t in = config.embed_dim;
    for (std::size_t l = 0; l < config.layer_dims.size(); ++l) {
        const auto out = config.layer_dims[l];
        const auto prefix = "layer" + std::to_string(l + 1);
        m.params.emplace(prefix + ".W", xavier(out, in));
        m.params.emplace(prefix + ".U", xavier(out, in));
        m.params.emplace(prefix + ".b", Tensor::zeros({out}));
        in = out;
    }
    m.params.emplace("head.W", config.zero_head ? Tensor::zeros({kNumClasses, in}) : xavier(kNumClasses, in));
    m.params.emplace("head.b", Tensor::zeros({kNumClasses}));
    return m;
}

Tensor ActivationRecord::bos(const std::string& layer) const
{
    const auto it = per_layer.find(layer);
    if (it == per_layer.end()) throw ConfigError("activation record has no layer '" + layer + "'");
    return it->second.row(0);
}

// ---- graph -------------------------------------------------------------------------

VarMap bind_parameters(diff::Tape& tape, const ParamSet& params, bool trainable)
{
    VarMap vars;
    for (const auto& [name, t] : params) vars.emplace(name, trainable ? tape.leaf(t) : tape.constant(t));
    return vars;
}

EncoderGraph build_encoder_graph(const VarMap& params, const EncoderConfig& config,
                                 std::span<const std::size_t> ids)
{
    if (ids.empty()) throw ShapeError("encoder graph needs at least the BOS token");
    const auto& embed = params.at("embed");
    const auto vocab = embed.value().rows();

    EncoderGraph g;
    g.states.emplace_back();
    for (auto id : ids) {
        if (id >= vocab) throw ShapeError("token id " + std::to_string(id) + " outside vocabulary");
        g.states[0].push_back(diff::row(embed, id));
    }
    for (std::size_t l = 1; l <= config.layer_dims.size(); ++l) {
        const auto prefix = "layer" + std::to_string(l);
        const auto& W = params.at(prefix + ".W");
        const auto& U = params.at(prefix + ".U");
        const auto& b = params.at(prefix + ".b");
        const auto& prev = g.states[l - 1];
        const diff::Var context = diff::add(diff::matvec(U, diff::mean(prev)), b);
        std::vector<diff::Var> cur;
        cur.reserve(prev.size());
        for (const auto& x : prev) cur.push_back(diff::tanh(diff::add(diff::matvec(W, x), context)));
        g.states.push_back(std::move(cur));
    }
    g.logits = diff::affine(params.at("head.W"), g.states.back()[0], params.at("head.b"));
    return g;
}

// ---- inference ---------------------------------------------------------------------

namespace {

void require_finite(const EncoderModel& model)
{
    if (!all_finite(model.params)) throw NumericError("encoder has non-finite parameters");
}

} // namespace

std::vector<std::size_t> tokenize(const EncoderModel& model, const std::string& text)
{
    return model.vocab.tokenize(text);
}

ActivationRecord encode(const EncoderModel& model, const std::string& text)
{
    require_finite(model);
    diff::Tape tape;
    const auto vars = bind_parameters(tape, model.params, false);
    ActivationRecord rec;
    rec.token_ids = tokenize(model, text);
    const auto g = build_encoder_graph(vars, model.config, rec.token_ids);
    const auto names = model.layer_names();
    for (std::size_t l = 1; l < g.states.size(); ++l) {
        const auto& states = g.states[l];
        const auto dim = states[0].size();
        Tensor m = Tensor::zeros({states.size(), dim});
        for (std::size_t t = 0; t < states.size(); ++t) {
            std::copy(states[t].value().data().begin(), states[t].value().data().end(),
                      m.data().begin() + static_cast<std::ptrdiff_t>(t * dim));
        }
        rec.per_layer.emplace(names[l - 1], std::move(m));
    }
    rec.pooled = g.states.back()[0].value();
    return rec;
}

std::array<double, 2> classify(const EncoderModel& model, const std::string& text)
{
    require_finite(model);
    diff::Tape tape;
    const auto vars = bind_parameters(tape, model.params, false);
    const auto ids = tokenize(model, text);
    const auto p = diff::softmax(build_encoder_graph(vars, model.config, ids).logits).value();
    return {p[0], p[1]};
}

std::size_t predict(const EncoderModel& model, const std::string& text)
{
    const auto p = classify(model, text);
    return p[kHate] > p[kNonHate] ? kHate : kNonHate;
}

// ---- training ----------------------------------------------------------------------

void TrainHyper::validate() const
{
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ParameterError("learning_rate must be > 0");
    }
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
}

std::vector<TokenizedExample> tokenize_all(const EncoderModel& model, std::span<const Example> data)
{
    std::vector<TokenizedExample> out;
    out.reserve(data.size());
    for (const auto& ex : data) {
        if (ex.label >= kNumClasses) throw DataError("label out of range: " + std::to_string(ex.label));
        out.push_back({tokenize(model, ex.text), ex.label});
    }
    return out;
}

ShuffleSchedule::ShuffleSchedule(std::uint64_t seed) : seed_(seed) {}

std::vector<std::size_t> ShuffleSchedule::next_epoch(std::size_t n)
{
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (++epoch_)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

StepResult train_step(EncoderModel& model, std::span<const TokenizedExample* const> batch,
                      double learning_rate, const SampleTerm& extra)
{
    if (batch.empty()) throw InsufficientDataError("empty batch");
    diff::Tape tape;
    const auto vars = bind_parameters(tape, model.params, true);
    std::vector<diff::Var> losses;
    std::vector<diff::Var> ces;
    losses.reserve(batch.size());
    for (const auto* ex : batch) {
        const auto g = build_encoder_graph(vars, model.config, ex->ids);
        const auto ce = diff::softmax_cross_entropy(g.logits, ex->label);
        ces.push_back(ce);
        std::optional<diff::Var> term;
        if (extra) term = extra(g, *ex);
        losses.push_back(term ? diff::add(ce, *term) : ce);
    }
    const auto loss = diff::mean(losses);
    tape.backward(loss);
    for (auto& [name, p] : model.params) {
        const auto& g = tape.grad(vars.at(name));
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
    }
    if (!all_finite(model.params)) throw NumericError("training step produced non-finite parameters");

    double ce_sum = 0.0;
    for (const auto& c : ces) ce_sum += c.scalar();
    return {loss.scalar(), ce_sum / static_cast<double>(ces.size())};
}

double mean_cross_entropy(const EncoderModel& model, std::span<const TokenizedExample> data)
{
    if (data.empty()) throw InsufficientDataError("mean_cross_entropy of an empty set");
    double s = 0.0;
    for (const auto& ex : data) {
        diff::Tape tape;
        const auto vars = bind_parameters(tape, model.params, false);
        const auto g = build_encoder_graph(vars, model.config, ex.ids);
        s += diff::softmax_cross_entropy(g.logits, ex.label).scalar();
    }
    return s / static_cast<double>(data.size());
}

TrainResult train_classifier(const EncoderModel& model, std::span<const Example> dataset,
                             const TrainHyper& hyper)
{
    hyper.validate();
    if (dataset.empty()) throw InsufficientDataError("train_classifier: empty dataset");
    const bool has_pos = std::any_of(dataset.begin(), dataset.end(), [](const auto& e) { return e.label == kHate; });
    const bool has_neg = std::any_of(dataset.begin(), dataset.end(), [](const auto& e) { return e.label == kNonHate; });
    if (!has_pos || !has_neg) throw DegenerateDataError("train_classifier: dataset has a single class");

    TrainResult r{model, {}};
    const auto data = tokenize_all(r.model, dataset);
    ShuffleSchedule schedule(hyper.seed);
    for (std::size_t e = 0; e < hyper.epochs; ++e) {
        const auto order = schedule.next_epoch(data.size());
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
            std::vector<const TokenizedExample*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch_size); ++i) {
                batch.push_back(&data[order[i]]);
            }
            train_step(r.model, batch, hyper.learning_rate);
        }
        r.loss_curve.push_back(mean_cross_entropy(r.model, data));
    }
    r.model.trained_epochs += hyper.epochs;
    return r;
}

std::uint64_t parameter_hash(const ParamSet& params)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : params) {
        mix(name.data(), name.size());
        for (auto d : t.shape()) mix(&d, sizeof d);
        mix(t.data().data(), t.size() * sizeof(double));
    }
    return h;
}

} // namespace ktcr
