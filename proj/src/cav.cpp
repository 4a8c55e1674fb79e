#include "ktcr/cav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "ktcr/error.hpp"

namespace ktcr {

double CavProbe::score(const Tensor& h) const { return dot(weights.data(), h.data()) + bias; }

void ProbeHyper::validate() const
{
    if (epochs < 1) throw ParameterError("probe epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw ParameterError("probe learning_rate must be > 0");
    if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0)) {
        throw ParameterError("probe held_out_fraction must lie in (0, 1)");
    }
}

namespace {

std::size_t uniform_dim(std::span<const Tensor> a, std::span<const Tensor> b)
{
    const auto dim = a.front().size();
    for (auto side : {a, b}) {
        for (const auto& t : side) {
            if (t.rank() != 1 || t.size() != dim) {
                throw ShapeError("CAV inputs must be vectors of one length; got " + shape_string(t.shape())
                                 + " alongside [" + std::to_string(dim) + "]");
            }
        }
    }
    return dim;
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Seeded permutation of one side; the first `held` indices are held out.
std::vector<std::size_t> split_order(std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

} // namespace

CavProbe fit_probe(std::span<const Tensor> concept_acts, std::span<const Tensor> random_acts,
                   const ProbeHyper& hyper, std::uint64_t seed)
{
    hyper.validate();
    if (concept_acts.empty() || random_acts.empty()) throw InsufficientDataError("probe needs both sides");
    const auto dim = uniform_dim(concept_acts, random_acts);
    const double n = static_cast<double>(concept_acts.size() + random_acts.size());

    CavProbe p{Tensor::zeros({dim}), 0.0, seed, hyper.epochs};
    std::vector<double> gw(dim);
    for (std::size_t e = 0; e < hyper.epochs; ++e) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        auto accumulate = [&](std::span<const Tensor> side, double y) {
            for (const auto& h : side) {
                const double err = sigmoid(p.score(h)) - y;
                for (std::size_t j = 0; j < dim; ++j) gw[j] += err * h[j];
                gb += err;
            }
        };
        accumulate(concept_acts, 1.0);
        accumulate(random_acts, 0.0);
        for (std::size_t j = 0; j < dim; ++j) p.weights[j] -= hyper.learning_rate * gw[j] / n;
        p.bias -= hyper.learning_rate * gb / n;
    }
    if (!p.weights.all_finite() || !std::isfinite(p.bias)) throw NumericError("CAV probe diverged");
    return p;
}

Cav compute_cav(std::span<const Tensor> concept_acts, std::span<const Tensor> random_acts,
                const std::string& layer, std::uint64_t seed, const ProbeHyper& hyper)
{
    hyper.validate();
    if (concept_acts.size() < 4 || random_acts.size() < 4) {
        throw InsufficientDataError("CAV needs at least 4 examples per side; got " + std::to_string(concept_acts.size())
                                    + " concept and " + std::to_string(random_acts.size()) + " random");
    }
    const auto dim = uniform_dim(concept_acts, random_acts);

    Cav cav;
    cav.layer = layer;
    cav.n_concept = concept_acts.size();
    cav.n_random = random_acts.size();

    // Held-out accuracy from a per-side split, so both sides are represented.
    struct Split {
        std::vector<Tensor> train, held;
    };
    auto split = [&](std::span<const Tensor> side, std::uint64_t s) {
        const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(side.size() * hyper.held_out_fraction)));
        Split out;
        const auto order = split_order(side.size(), s);
        for (std::size_t i = 0; i < order.size(); ++i) (i < held ? out.held : out.train).push_back(side[order[i]]);
        return out;
    };
    const auto c = split(concept_acts, seed);
    const auto r = split(random_acts, seed);
    const auto split_probe = fit_probe(c.train, r.train, hyper, seed);
    std::size_t correct = 0;
    for (const auto& h : c.held) correct += split_probe.score(h) > 0.0;
    for (const auto& h : r.held) correct += split_probe.score(h) <= 0.0;
    cav.probe_accuracy = static_cast<double>(correct) / static_cast<double>(c.held.size() + r.held.size());

    cav.probe = fit_probe(concept_acts, random_acts, hyper, seed);
    Tensor v = cav.probe.weights;
    double len = norm(v.data());
    if (!(len > 0.0)) {
        v = sub(mean_of(concept_acts), mean_of(random_acts));
        len = norm(v.data());
        cav.warnings.push_back("probe weights vanished; using the mean difference");
        if (!(len > 0.0)) {
            v = Tensor::zeros({dim});
            v[0] = 1.0;
            len = 1.0;
            cav.warnings.push_back("concept and random means coincide; direction is arbitrary");
        }
    }
    cav.vector = scaled(v, 1.0 / len);
    if (cav.low_separability()) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "low separability: held-out probe accuracy %.3f", cav.probe_accuracy);
        cav.warnings.emplace_back(buf);
    }
    return cav;
}

Tensor logit_gradient(const EncoderModel& model, const std::string& layer, const std::string& text,
                      std::size_t target_class)
{
    if (target_class >= kNumClasses) throw ParameterError("target class out of range");
    if (!all_finite(model.params)) throw NumericError("model parameters are not finite");
    const auto l = model.layer_index(layer);
    diff::Tape tape;
    const auto vars = bind_parameters(tape, model.params, true);
    const auto g = build_encoder_graph(vars, model.config, tokenize(model, text));
    Tensor pick = Tensor::zeros({kNumClasses});
    pick[target_class] = 1.0;
    tape.backward(diff::dot(g.logits, tape.constant(pick)));
    return tape.grad(g.bos(l));
}

double directional_sensitivity(const EncoderModel& model, const std::string& layer, const std::string& text,
                               std::size_t target_class, const Tensor& direction)
{
    const auto grad = logit_gradient(model, layer, text, target_class);
    if (direction.size() != grad.size()) {
        throw ConfigError("direction has length " + std::to_string(direction.size()) + " but layer '" + layer
                          + "' has width " + std::to_string(grad.size()));
    }
    return dot(grad.data(), direction.data());
}

double tcav_sensitivity(const EncoderModel& model, const Cav& cav, const std::string& text,
                        std::size_t target_class)
{
    model.layer_index(cav.layer);
    return directional_sensitivity(model, cav.layer, text, target_class, cav.vector);
}

namespace {

void put_vector(std::ostream& out, const char* key, const Tensor& t)
{
    out << key;
    char buf[32];
    for (double v : t.data()) {
        std::snprintf(buf, sizeof buf, " %.17g", v);
        out << buf;
    }
    out << '\n';
}

std::string g17(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void write_cav(const std::filesystem::path& path, const Cav& cav)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "layer " << cav.layer << '\n'
        << "dim " << cav.vector.size() << '\n'
        << "accuracy " << g17(cav.probe_accuracy) << '\n'
        << "n_concept " << cav.n_concept << '\n'
        << "n_random " << cav.n_random << '\n';
    put_vector(out, "vector", cav.vector);
    put_vector(out, "probe_weights", cav.probe.weights);
    out << "probe_bias " << g17(cav.probe.bias) << '\n'
        << "probe_seed " << cav.probe.seed << '\n'
        << "probe_epochs " << cav.probe.epochs << '\n';
    for (const auto& w : cav.warnings) out << "warning " << w << '\n';
}

Cav read_cav(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    Cav cav;
    std::size_t dim = 0;
    std::string line;
    std::size_t lineno = 0;
    auto read_values = [](std::istringstream& s) {
        std::vector<double> v;
        for (std::string tok; s >> tok;) v.push_back(std::strtod(tok.c_str(), nullptr));
        return v;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream s(line);
        std::string key;
        s >> key;
        if (key == "layer") s >> cav.layer;
        else if (key == "dim") s >> dim;
        else if (key == "accuracy") cav.probe_accuracy = read_values(s).at(0);
        else if (key == "n_concept") s >> cav.n_concept;
        else if (key == "n_random") s >> cav.n_random;
        else if (key == "vector") cav.vector = Tensor::vector(read_values(s));
        else if (key == "probe_weights") cav.probe.weights = Tensor::vector(read_values(s));
        else if (key == "probe_bias") cav.probe.bias = read_values(s).at(0);
        else if (key == "probe_seed") s >> cav.probe.seed;
        else if (key == "probe_epochs") s >> cav.probe.epochs;
        else if (key == "warning") cav.warnings.push_back(line.substr(8));
        else throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'", lineno);
    }
    if (cav.layer.empty() || cav.vector.size() != dim || dim == 0) {
        throw SchemaError(path.string() + ": incomplete CAV record", 0);
    }
    return cav;
}

} // namespace ktcr
