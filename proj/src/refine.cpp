#include "ktcr/refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <tuple>

#include <json.hpp>

#include "ktcr/error.hpp"

namespace ktcr {

// ---- prototypes ----------------------------------------------------------------

const std::vector<Tensor>& PrototypeSet::centroids(std::size_t cls) const
{
    const auto it = per_class.find(cls);
    if (it == per_class.end()) throw ParameterError("no prototypes for class " + std::to_string(cls));
    return it->second;
}

Tensor PrototypeSet::centroid_mean(std::size_t cls) const { return mean_of(centroids(cls)); }

std::vector<Tensor> kmeans(std::span<const Tensor> points, std::size_t K, std::uint64_t seed)
{
    if (K < 1) throw ParameterError("k-means needs K >= 1");
    if (points.size() < K) {
        throw InsufficientDataError("k-means needs at least K=" + std::to_string(K) + " points, got "
                                    + std::to_string(points.size()));
    }
    const auto dim = points[0].size();
    for (const auto& p : points) {
        if (p.size() != dim) throw ShapeError("k-means points must share one dimension");
    }

    std::vector<Tensor> centres;
    std::mt19937_64 rng(seed);
    centres.push_back(points[rng() % points.size()]);
    std::vector<double> nearest(points.size(), std::numeric_limits<double>::infinity());
    while (centres.size() < K) {
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            nearest[i] = std::min(nearest[i], squared_distance(points[i].data(), centres.back().data()));
            if (nearest[i] > best_d) {
                best_d = nearest[i];
                best = i;
            }
        }
        centres.push_back(points[best]);
    }

    std::vector<std::size_t> assign(points.size());
    for (int iter = 0; iter < 100; ++iter) {
        for (std::size_t i = 0; i < points.size(); ++i) {
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < K; ++k) {
                const double d = squared_distance(points[i].data(), centres[k].data());
                if (d < best_d) {
                    best_d = d;
                    assign[i] = k;
                }
            }
        }
        double shift = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            Tensor sum = Tensor::zeros({dim});
            std::size_t n = 0;
            for (std::size_t i = 0; i < points.size(); ++i) {
                if (assign[i] != k) continue;
                for (std::size_t j = 0; j < dim; ++j) sum[j] += points[i][j];
                ++n;
            }
            if (n == 0) continue;
            const Tensor next = scaled(sum, 1.0 / static_cast<double>(n));
            shift = std::max(shift, std::sqrt(squared_distance(next.data(), centres[k].data())));
            centres[k] = next;
        }
        if (shift < 1e-6) break;
    }
    return centres;
}

PrototypeSet fit_prototypes(const ClassActivations& activations, std::size_t K, std::uint64_t seed, double beta,
                            std::string layer)
{
    if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
    PrototypeSet p;
    p.K = K;
    p.beta = beta;
    p.layer = std::move(layer);
    for (const auto& [cls, acts] : activations) {
        if (acts.size() < K) {
            throw InsufficientDataError("class " + std::to_string(cls) + " has " + std::to_string(acts.size())
                                        + " activations, fewer than K=" + std::to_string(K));
        }
        p.per_class.emplace(cls, kmeans(acts, K, seed + cls));
    }
    return p;
}

namespace {

const std::vector<Tensor>& class_centroids(const Tensor& h, const PrototypeSet& protos, std::size_t cls)
{
    const auto& cs = protos.centroids(cls);
    if (cs.empty() || cs[0].size() != h.size()) {
        throw ShapeError("activation has length " + std::to_string(h.size()) + " but prototypes have "
                         + (cs.empty() ? std::string("none") : std::to_string(cs[0].size())));
    }
    return cs;
}

} // namespace

double prototype_loss(const Tensor& h, const PrototypeSet& protos, std::size_t cls)
{
    const auto& cs = class_centroids(h, protos, cls);
    double s = 0.0;
    for (const auto& c : cs) s += squared_distance(h.data(), c.data());
    return s / static_cast<double>(cs.size());
}

Tensor prototype_grad(const Tensor& h, const PrototypeSet& protos, std::size_t cls)
{
    const auto& cs = class_centroids(h, protos, cls);
    Tensor g = Tensor::zeros({h.size()});
    for (const auto& c : cs) {
        for (std::size_t j = 0; j < h.size(); ++j) g[j] += h[j] - c[j];
    }
    return scaled(g, 2.0 / static_cast<double>(cs.size()));
}

PrototypeSet update_prototypes(const PrototypeSet& protos, const std::map<std::size_t, std::vector<Tensor>>& current)
{
    if (current.size() != protos.per_class.size()) throw DataError("prototype update: class sets differ");
    PrototypeSet out = protos;
    for (auto& [cls, olds] : out.per_class) {
        const auto it = current.find(cls);
        if (it == current.end()) throw DataError("prototype update: missing class " + std::to_string(cls));
        const auto& cur = it->second;
        if (cur.size() != olds.size()) throw DataError("prototype update: K differs for class " + std::to_string(cls));
        for (const auto& c : cur) {
            if (c.size() != olds[0].size()) throw DataError("prototype update: centroid dimensions differ");
        }

        std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
        for (std::size_t i = 0; i < olds.size(); ++i) {
            for (std::size_t j = 0; j < cur.size(); ++j) {
                pairs.emplace_back(squared_distance(olds[i].data(), cur[j].data()), i, j);
            }
        }
        std::sort(pairs.begin(), pairs.end());
        std::vector<bool> old_used(olds.size()), cur_used(cur.size());
        std::vector<Tensor> next = olds;
        for (const auto& [d, i, j] : pairs) {
            if (old_used[i] || cur_used[j]) continue;
            old_used[i] = cur_used[j] = true;
            for (std::size_t x = 0; x < next[i].size(); ++x) {
                next[i][x] = (1.0 - protos.beta) * olds[i][x] + protos.beta * cur[j][x];
            }
        }
        olds = std::move(next);
    }
    return out;
}

double prototype_drift(const PrototypeSet& before, const PrototypeSet& after)
{
    double s = 0.0;
    for (const auto& [cls, cs] : before.per_class) {
        const auto& other = after.centroids(cls);
        for (std::size_t k = 0; k < cs.size(); ++k) s += squared_distance(cs[k].data(), other.at(k).data());
    }
    return std::sqrt(s);
}

// ---- concept loss ----------------------------------------------------------------

const char* to_string(ConceptMode m) { return m == ConceptMode::sensitize ? "sensitize" : "desensitize"; }

ConceptMode concept_mode_from_string(const std::string& s)
{
    if (s == "sensitize") return ConceptMode::sensitize;
    if (s == "desensitize") return ConceptMode::desensitize;
    throw ConfigError("unknown concept mode '" + s + "'");
}

namespace {

void check_layers(const PrototypeSet& protos, const Cav& cav)
{
    if (!protos.layer.empty() && protos.layer != cav.layer) {
        throw ConfigError("CAV layer '" + cav.layer + "' differs from prototype layer '" + protos.layer + "'");
    }
}

} // namespace

ConceptLoss concept_loss(const Tensor& h, const PrototypeSet& protos, std::size_t cls, const Cav& cav,
                         ConceptMode mode)
{
    check_layers(protos, cav);
    const Tensor g = prototype_grad(h, protos, cls);
    if (g.size() != cav.vector.size()) throw ShapeError("CAV and activation dimensions differ");
    if (norm(sub(h, protos.centroid_mean(cls)).data()) < kDegenerateGradNorm) return {0.0, 0.0, true};
    const double l_c = std::fabs(cosine(g, cav.vector));
    return {l_c, mode == ConceptMode::sensitize ? 1.0 - l_c : l_c, false};
}

std::optional<diff::Var> concept_term_graph(diff::Var h, const PrototypeSet& protos, std::size_t cls,
                                            const Cav& cav, ConceptMode mode, diff::Var* l_c)
{
    check_layers(protos, cav);
    const Tensor mean = protos.centroid_mean(cls);
    if (mean.size() != h.size() || cav.vector.size() != h.size()) {
        throw ShapeError("concept term: activation, prototype and CAV dimensions differ");
    }
    if (std::sqrt(squared_distance(h.value().data(), mean.data())) < kDegenerateGradNorm) return std::nullopt;
    auto& tape = *h.tape();
    // grad L_p = (2/K) sum_k (h - C_k) = 2 (h - mean C)
    const auto grad = diff::scale(diff::sub(h, tape.constant(mean)), 2.0);
    const auto lc = diff::abs(diff::cosine(grad, tape.constant(cav.vector)));
    if (l_c) *l_c = lc;
    return mode == ConceptMode::sensitize ? diff::shift(diff::scale(lc, -1.0), 1.0) : lc;
}

double combined_loss(double l_o, double concept_term, double gamma)
{
    if (!(gamma >= 0.0)) throw ParameterError("gamma must be >= 0");
    return l_o + gamma * concept_term;
}

// ---- training loop -----------------------------------------------------------------

void KtcrConfig::validate() const
{
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ParameterError("gamma must be >= 0");
    if (K < 1) throw ParameterError("K must be >= 1");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (cav_update_cycle < 1 || cav_update_cycle > epochs) {
        throw ParameterError("cav_update_cycle must lie in [1, epochs]");
    }
    if (proto_update_cycle < 1 || proto_update_cycle > epochs) {
        throw ParameterError("proto_update_cycle must lie in [1, epochs]");
    }
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("lr must be > 0");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    ae.validate();
    probe.validate();
}

Tensor teacher_activation(const EncoderModel& teacher, const std::string& text) { return encode(teacher, text).pooled; }

std::vector<ActivationPair> activation_pairs(const EncoderModel& teacher, const EncoderModel& student,
                                             const std::string& layer, std::span<const std::string> texts)
{
    std::vector<ActivationPair> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back({teacher_activation(teacher, t), encode(student, t).bos(layer)});
    return out;
}

double mean_concept_loss(const EncoderModel& student, std::span<const Example> examples,
                         const PrototypeSet& protos, const Cav& cav)
{
    if (examples.empty()) throw InsufficientDataError("mean_concept_loss over no examples");
    double s = 0.0;
    for (const auto& e : examples) s += concept_loss(encode(student, e.text).bos(cav.layer), protos, e.label, cav, ConceptMode::sensitize).l_c;
    return s / static_cast<double>(examples.size());
}

namespace {

ClassActivations class_activations(const EncoderModel& model, const std::string& layer,
                                   std::span<const Example> data)
{
    ClassActivations out;
    for (const auto& e : data) out[e.label].push_back(encode(model, e.text).bos(layer));
    return out;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream, std::uint64_t n)
{
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream * 1000003ULL + n + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace

KtcrResult ktcr_train(const EncoderModel& student, const EncoderModel& teacher, const Autoencoder& ae,
                      const ConceptSets& sets, std::span<const Example> base_dataset, const KtcrConfig& cfg,
                      const KtcrMonitor& monitor)
{
    cfg.validate();
    if (sets.concept_texts.empty() || sets.random_texts.empty()) {
        throw InsufficientDataError("ktcr_train: concept and random sets must be non-empty");
    }
    if (base_dataset.empty()) throw InsufficientDataError("ktcr_train: empty base dataset");
    const bool has_pos = std::any_of(base_dataset.begin(), base_dataset.end(), [](const auto& e) { return e.label == kHate; });
    const bool has_neg = std::any_of(base_dataset.begin(), base_dataset.end(), [](const auto& e) { return e.label == kNonHate; });
    if (!has_pos || !has_neg) throw DegenerateDataError("ktcr_train: base dataset has a single class");

    const std::string layer = cfg.layer.empty() ? student.last_layer() : cfg.layer;
    const auto layer_idx = student.layer_index(layer);
    if (ae.student_dim != student.layer_dim(layer)) {
        throw ConfigError("autoencoder latent width " + std::to_string(ae.student_dim) + " differs from student layer '"
                          + layer + "' width " + std::to_string(student.layer_dim(layer)));
    }
    if (ae.teacher_dim != teacher.config.pooled_dim) {
        throw ConfigError("autoencoder input width " + std::to_string(ae.teacher_dim) + " differs from teacher width "
                          + std::to_string(teacher.config.pooled_dim));
    }
    const auto teacher_hash = parameter_hash(teacher.params);

    KtcrResult r{student, {}, ae, {}, {}};
    r.history.seed = cfg.seed;

    // Teacher states are fixed for the whole run.
    std::vector<Tensor> g_t_concept, g_t_random;
    for (const auto& t : sets.concept_texts) g_t_concept.push_back(teacher_activation(teacher, t));
    for (const auto& t : sets.random_texts) g_t_random.push_back(teacher_activation(teacher, t));

    auto extract_cav = [&](std::uint64_t seed) {
        std::vector<Tensor> c, rnd;
        for (const auto& g : g_t_concept) c.push_back(map_activation(r.ae, g));
        for (const auto& g : g_t_random) rnd.push_back(map_activation(r.ae, g));
        return compute_cav(c, rnd, layer, seed, cfg.probe);
    };
    auto refresh_cav = [&](std::size_t epoch) {
        std::vector<ActivationPair> pairs;
        for (std::size_t i = 0; i < sets.concept_texts.size(); ++i) {
            pairs.push_back({g_t_concept[i], encode(r.student, sets.concept_texts[i]).bos(layer)});
        }
        for (std::size_t i = 0; i < sets.random_texts.size(); ++i) {
            pairs.push_back({g_t_random[i], encode(r.student, sets.random_texts[i]).bos(layer)});
        }
        auto hyper = cfg.ae;
        hyper.seed = mix(cfg.seed, 1, epoch);
        r.ae = train_autoencoder(r.ae, pairs, hyper).ae;
        r.cav = extract_cav(mix(cfg.seed, 2, epoch));
    };

    // Step 2: initial direction and prototypes.
    r.cav = extract_cav(mix(cfg.seed, 2, 0));
    r.protos = fit_prototypes(class_activations(r.student, layer, base_dataset), cfg.K, mix(cfg.seed, 3, 0), cfg.beta, layer);

    const auto data = tokenize_all(r.student, base_dataset);
    ShuffleSchedule schedule(cfg.seed);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;

        if (epoch % cfg.cav_update_cycle == 0) {
            refresh_cav(epoch);
            rec.cav_accuracy = r.cav.probe_accuracy;
            ++r.history.cav_refreshes;
        }
        if (epoch % cfg.proto_update_cycle == 0) {
            const auto current = fit_prototypes(class_activations(r.student, layer, base_dataset), cfg.K,
                                                mix(cfg.seed, 3, epoch), cfg.beta, layer);
            const auto next = update_prototypes(r.protos, current.per_class);
            rec.proto_drift = prototype_drift(r.protos, next);
            r.protos = next;
            ++r.history.proto_refreshes;
        }

        if (!monitor.examples.empty()) {
            rec.heldout_l_c_start = mean_concept_loss(r.student, monitor.examples, r.protos, r.cav);
        }

        double l_c_sum = 0.0, term_sum = 0.0, ce_sum = 0.0;
        std::size_t counted = 0;
        SampleTerm term;
        if (cfg.gamma > 0.0) {
            term = [&](const EncoderGraph& g, const TokenizedExample& ex) -> std::optional<diff::Var> {
                diff::Var lc;
                const auto t = concept_term_graph(g.bos(layer_idx), r.protos, ex.label, r.cav, cfg.mode, &lc);
                if (!t) {
                    ++rec.degenerate;
                    return std::nullopt;
                }
                l_c_sum += lc.scalar();
                term_sum += t->scalar();
                return diff::scale(*t, cfg.gamma);
            };
        }
        const auto order = schedule.next_epoch(data.size());
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const TokenizedExample*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
                batch.push_back(&data[order[i]]);
            }
            const auto step = train_step(r.student, batch, cfg.lr, term);
            ce_sum += step.mean_ce * static_cast<double>(batch.size());
            counted += batch.size();
        }
        if (cfg.gamma == 0.0) {
            // The term is not part of the objective; report L_C for the record.
            for (const auto& e : base_dataset) {
                const auto cl = concept_loss(encode(r.student, e.text).bos(layer), r.protos, e.label, r.cav, cfg.mode);
                l_c_sum += cl.l_c;
                term_sum += cl.term;
                rec.degenerate += cl.degenerate;
            }
        }
        const double n = static_cast<double>(counted);
        rec.l_o = ce_sum / n;
        rec.l_c = l_c_sum / n;
        rec.l = combined_loss(rec.l_o, term_sum / n, cfg.gamma);
        if (!monitor.examples.empty()) rec.heldout_l_c = mean_concept_loss(r.student, monitor.examples, r.protos, r.cav);
        r.history.epochs.push_back(rec);
    }
    r.student.trained_epochs += cfg.epochs;
    if (parameter_hash(teacher.params) != teacher_hash) throw NumericError("teacher parameters changed during training");
    return r;
}

void write_history_jsonl(const std::filesystem::path& path, const TrainHistory& history)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& e : history.epochs) {
        nlohmann::json j = {{"epoch", e.epoch}, {"L_o", e.l_o}, {"L_C", e.l_c}, {"L", e.l},
                            {"cav_acc", nullptr}, {"proto_drift", e.proto_drift}, {"degenerate", e.degenerate}};
        if (e.cav_accuracy) j["cav_acc"] = *e.cav_accuracy;
        if (e.heldout_l_c_start) j["heldout_L_C_start"] = *e.heldout_l_c_start;
        if (e.heldout_l_c) j["heldout_L_C"] = *e.heldout_l_c;
        out << j.dump() << '\n';
    }
}

} // namespace ktcr
