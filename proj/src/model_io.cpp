#include "ktcr/model_io.hpp"

#include <fstream>

#include "ktcr/error.hpp"

namespace ktcr {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "ktcr-model";
constexpr int kVersion = 1;

[[noreturn]] void bad(const std::filesystem::path& path, const std::string& why)
{
    throw SchemaError(path.string() + ": " + why, 0);
}

} // namespace

json params_to_json(const ParamSet& params)
{
    json out = json::object();
    for (const auto& [name, t] : params) out[name] = {{"shape", t.shape()}, {"data", t.values()}};
    return out;
}

ParamSet params_from_json(const json& j)
{
    ParamSet out;
    for (const auto& [name, entry] : j.items()) {
        auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        auto data = entry.at("data").get<std::vector<double>>();
        out.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

void write_container(const std::filesystem::path& path, const ModelContainer& c)
{
    if (!all_finite(c.params)) throw NumericError("refusing to save non-finite parameters to " + path.string());
    const json j = {{"format", kFormat}, {"version", kVersion}, {"kind", c.kind},
                    {"meta", c.meta}, {"params", params_to_json(c.params)}};
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump() << '\n';
}

ModelContainer read_container(const std::filesystem::path& path, const std::string& expected_kind)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": malformed model file: " + e.what(), 0);
    }
    if (!j.is_object() || j.value("format", "") != kFormat) bad(path, "not a model container");
    if (j.value("version", 0) != kVersion) bad(path, "unsupported container version");
    ModelContainer c;
    c.kind = j.value("kind", "");
    if (c.kind != expected_kind) bad(path, "expected a " + expected_kind + " model, found '" + c.kind + "'");
    try {
        c.meta = j.at("meta");
        c.params = params_from_json(j.at("params"));
    } catch (const json::exception& e) {
        bad(path, e.what());
    } catch (const ShapeError& e) {
        bad(path, e.what());
    }
    return c;
}

void save_encoder(const std::filesystem::path& path, const EncoderModel& model)
{
    const auto& cfg = model.config;
    ModelContainer c;
    c.kind = "encoder";
    c.meta = {{"vocab_size", cfg.vocab_size}, {"embed_dim", cfg.embed_dim}, {"layer_dims", cfg.layer_dims},
              {"pooled_dim", cfg.pooled_dim}, {"seed", cfg.seed}, {"zero_head", cfg.zero_head},
              {"trained_epochs", model.trained_epochs}};
    c.meta["vocab"] = model.vocab.words();
    c.params = model.params;
    write_container(path, c);
}

EncoderModel load_encoder(const std::filesystem::path& path)
{
    auto c = read_container(path, "encoder");
    EncoderModel m;
    try {
        const auto& meta = c.meta;
        m.config.vocab_size = meta.at("vocab_size").get<std::size_t>();
        m.config.embed_dim = meta.at("embed_dim").get<std::size_t>();
        m.config.layer_dims = meta.at("layer_dims").get<std::vector<std::size_t>>();
        m.config.pooled_dim = meta.at("pooled_dim").get<std::size_t>();
        m.config.seed = meta.at("seed").get<std::uint64_t>();
        m.config.zero_head = meta.at("zero_head").get<bool>();
        m.trained_epochs = meta.at("trained_epochs").get<std::size_t>();
        m.vocab = Vocabulary::from_words(meta.at("vocab").get<std::vector<std::string>>());
    } catch (const json::exception& e) {
        bad(path, e.what());
    }
    m.config.validate();
    if (m.vocab.size() != m.config.vocab_size) bad(path, "vocabulary size does not match config");
    const auto fresh = init_encoder(m.config, m.vocab);
    for (const auto& [name, t] : fresh.params) {
        const auto it = c.params.find(name);
        if (it == c.params.end()) bad(path, "missing parameter " + name);
        if (!it->second.same_shape(t)) bad(path, "parameter " + name + " has shape " + shape_string(it->second.shape()));
    }
    if (c.params.size() != fresh.params.size()) bad(path, "unexpected extra parameters");
    m.params = std::move(c.params);
    return m;
}

} // namespace ktcr
