#include "ktcr/bridge.hpp"

#include <cmath>
#include <random>

#include "ktcr/encoder.hpp"
#include "ktcr/error.hpp"
#include "ktcr/model_io.hpp"

namespace ktcr {

void AutoencoderHyper::validate() const
{
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ParameterError("autoencoder learning_rate must be > 0");
    }
    if (epochs < 1) throw ParameterError("autoencoder epochs must be >= 1");
}

Autoencoder init_autoencoder(std::size_t teacher_dim, std::size_t student_dim, std::uint64_t seed)
{
    if (teacher_dim == 0 || student_dim == 0) throw ParameterError("autoencoder dimensions must be >= 1");
    std::mt19937_64 rng(seed);
    auto xavier = [&rng](std::size_t rows, std::size_t cols) {
        const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
        std::uniform_real_distribution<double> dist(-a, a);
        Tensor t = Tensor::zeros({rows, cols});
        for (auto& v : t.values()) v = dist(rng);
        return t;
    };
    Autoencoder ae{teacher_dim, student_dim, {}};
    ae.params.emplace("enc.W", xavier(student_dim, teacher_dim));
    ae.params.emplace("enc.b", Tensor::zeros({student_dim}));
    ae.params.emplace("dec.W", xavier(teacher_dim, student_dim));
    ae.params.emplace("dec.b", Tensor::zeros({teacher_dim}));
    return ae;
}

namespace {

void check_pair(const Autoencoder& ae, const ActivationPair& p)
{
    if (p.g_t.rank() != 1 || p.g_t.size() != ae.teacher_dim) {
        throw ShapeError("teacher activation has shape " + shape_string(p.g_t.shape()) + ", expected ["
                         + std::to_string(ae.teacher_dim) + "]");
    }
    if (p.g_s.rank() != 1 || p.g_s.size() != ae.student_dim) {
        throw ShapeError("student activation has shape " + shape_string(p.g_s.shape()) + ", expected ["
                         + std::to_string(ae.student_dim) + "]");
    }
}

struct PairGraph {
    diff::Var l_d, l_e;
};

PairGraph pair_graph(const std::map<std::string, diff::Var>& p, diff::Var g_t, diff::Var g_s)
{
    const auto g_s_hat = diff::tanh(diff::affine(p.at("enc.W"), g_t, p.at("enc.b")));
    const auto g_t_hat = diff::tanh(diff::affine(p.at("dec.W"), g_s_hat, p.at("dec.b")));
    return {diff::squared_norm(diff::sub(g_t, g_t_hat)), diff::squared_norm(diff::sub(g_s_hat, g_s))};
}

} // namespace

diff::Var autoencoder_loss_graph(const std::map<std::string, diff::Var>& params, diff::Var g_t, diff::Var g_s)
{
    const auto g = pair_graph(params, g_t, g_s);
    return diff::add(g.l_d, g.l_e);
}

AutoencoderLoss autoencoder_loss(const Autoencoder& ae, const ActivationPair& pair)
{
    check_pair(ae, pair);
    const Tensor g_s_hat = map_activation(ae, pair.g_t);
    const Tensor g_t_hat = reconstruct(ae, pair.g_t);
    return {squared_distance(pair.g_t.data(), g_t_hat.data()), squared_distance(g_s_hat.data(), pair.g_s.data())};
}

AutoencoderLoss mean_autoencoder_loss(const Autoencoder& ae, std::span<const ActivationPair> pairs)
{
    if (pairs.empty()) throw InsufficientDataError("no activation pairs");
    AutoencoderLoss total;
    for (const auto& p : pairs) {
        const auto l = autoencoder_loss(ae, p);
        total.reconstruction += l.reconstruction;
        total.mapping += l.mapping;
    }
    total.reconstruction /= static_cast<double>(pairs.size());
    total.mapping /= static_cast<double>(pairs.size());
    return total;
}

AutoencoderTrainResult train_autoencoder(std::span<const ActivationPair> pairs, const AutoencoderHyper& hyper)
{
    if (pairs.empty()) throw InsufficientDataError("autoencoder training needs at least 2 pairs, got 0");
    const auto init = init_autoencoder(pairs[0].g_t.size(), pairs[0].g_s.size(), hyper.seed);
    return train_autoencoder(init, pairs, hyper);
}

AutoencoderTrainResult train_autoencoder(const Autoencoder& init, std::span<const ActivationPair> pairs,
                                         const AutoencoderHyper& hyper)
{
    hyper.validate();
    if (pairs.size() < 2) {
        throw InsufficientDataError("autoencoder training needs at least 2 pairs, got " + std::to_string(pairs.size()));
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        try {
            check_pair(init, pairs[i]);
        } catch (const ShapeError& e) {
            throw DataError("activation pair " + std::to_string(i) + ": " + e.what());
        }
    }

    AutoencoderTrainResult result{init, {}};
    ShuffleSchedule schedule(hyper.seed);
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        for (const auto i : schedule.next_epoch(pairs.size())) {
            diff::Tape tape;
            std::map<std::string, diff::Var> vars;
            for (const auto& [name, t] : result.ae.params) vars.emplace(name, tape.leaf(t));
            const auto loss = autoencoder_loss_graph(vars, tape.constant(pairs[i].g_t), tape.constant(pairs[i].g_s));
            tape.backward(loss);
            for (auto& [name, t] : result.ae.params) {
                const auto& g = tape.grad(vars.at(name));
                for (std::size_t k = 0; k < t.size(); ++k) t[k] -= hyper.learning_rate * g[k];
            }
        }
        if (!all_finite(result.ae.params)) throw NumericError("autoencoder parameters diverged");
        result.loss_curve.push_back(mean_autoencoder_loss(result.ae, pairs).combined());
    }
    return result;
}

Tensor map_activation(const Autoencoder& ae, const Tensor& g_t)
{
    if (g_t.rank() != 1 || g_t.size() != ae.teacher_dim) {
        throw ShapeError("map_activation: expected length " + std::to_string(ae.teacher_dim) + ", got shape "
                         + shape_string(g_t.shape()));
    }
    const auto& w = ae.params.at("enc.W");
    const auto& b = ae.params.at("enc.b");
    Tensor out = Tensor::zeros({ae.student_dim});
    for (std::size_t r = 0; r < ae.student_dim; ++r) {
        double z = b[r];
        for (std::size_t c = 0; c < ae.teacher_dim; ++c) z += w.at(r, c) * g_t[c];
        out[r] = std::tanh(z);
    }
    return out;
}

Tensor reconstruct(const Autoencoder& ae, const Tensor& g_t)
{
    const Tensor z = map_activation(ae, g_t);
    const auto& w = ae.params.at("dec.W");
    const auto& b = ae.params.at("dec.b");
    Tensor out = Tensor::zeros({ae.teacher_dim});
    for (std::size_t r = 0; r < ae.teacher_dim; ++r) {
        double s = b[r];
        for (std::size_t c = 0; c < ae.student_dim; ++c) s += w.at(r, c) * z[c];
        out[r] = std::tanh(s);
    }
    return out;
}

void save_autoencoder(const std::filesystem::path& path, const Autoencoder& ae)
{
    write_container(path, {"autoencoder", {{"teacher_dim", ae.teacher_dim}, {"student_dim", ae.student_dim}}, ae.params});
}

Autoencoder load_autoencoder(const std::filesystem::path& path)
{
    auto c = read_container(path, "autoencoder");
    Autoencoder ae;
    try {
        ae.teacher_dim = c.meta.at("teacher_dim").get<std::size_t>();
        ae.student_dim = c.meta.at("student_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what(), 0);
    }
    const auto fresh = init_autoencoder(ae.teacher_dim, ae.student_dim, 0);
    for (const auto& [name, t] : fresh.params) {
        const auto it = c.params.find(name);
        if (it == c.params.end() || !it->second.same_shape(t)) {
            throw SchemaError(path.string() + ": missing or misshapen parameter " + name, 0);
        }
    }
    ae.params = std::move(c.params);
    return ae;
}

} // namespace ktcr
