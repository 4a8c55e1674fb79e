#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ktcr/error.hpp"
#include "ktcr/experiment.hpp"

using namespace ktcr;
using nlohmann::json;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

// Environment variables may set paths and the seed only.
void apply_environment(json& tree)
{
    const std::pair<const char*, const char*> vars[] = {
        {"KTCR_SEED", "seed"},
        {"KTCR_OUT", "out"},
        {"KTCR_DATA_SOURCE", "data.source.path"},
        {"KTCR_DATA_POOL", "data.pool.path"},
        {"KTCR_DATA_TEST_IMPLICIT", "data.test_implicit.path"},
        {"KTCR_DATA_TEST_EXPLICIT", "data.test_explicit.path"},
    };
    for (const auto& [var, key] : vars) {
        const char* v = std::getenv(var);
        if (!v) continue;
        if (std::string(key) == "seed") {
            char* end = nullptr;
            const auto seed = std::strtoull(v, &end, 10);
            if (*v == '\0' || *end != '\0') throw ConfigError(std::string(var) + " must be an unsigned integer");
            tree["seed"] = seed;
        } else {
            apply_override(tree, std::string(key) + "=" + json(std::string(v)).dump());
        }
    }
}

json config_tree(const Globals& g)
{
    json tree = json::object();
    if (!g.config.empty()) {
        std::ifstream in(g.config);
        if (!in) throw ConfigError("cannot open configuration " + g.config);
        try {
            tree = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError(g.config + ": " + e.what());
        }
    }
    apply_environment(tree);
    if (g.seed) tree["seed"] = *g.seed;
    if (!g.out.empty()) tree["out"] = g.out;
    for (const auto& o : g.overrides) apply_override(tree, o);
    return tree;
}

std::vector<json> parse_values(const std::string& raw)
{
    try {
        const auto j = json::parse(raw);
        if (j.is_array()) return j.get<std::vector<json>>();
    } catch (const json::parse_error&) {
    }
    std::vector<json> values;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            values.push_back(json::parse(item));
        } catch (const json::parse_error&) {
            values.push_back(item);
        }
    }
    if (values.empty()) throw ConfigError("--values lists no values");
    return values;
}

void print_summary(const std::filesystem::path& path)
{
    std::ifstream in(path);
    std::cout << in.rdbuf();
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Knowledge-transfer concept refinement pipeline"};
    app.require_subcommand(1, 1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config, "JSON configuration file");
    app.add_option("--seed", g.seed, "Global seed");
    app.add_option("--out", g.out, "Output root; each run lands in <out>/run-<hash>");
    app.add_option("--override", g.overrides, "Dotted key=value, repeatable")->take_all();

    struct Stage {
        const char* name;
        const char* help;
        void (*fn)(const Run&);
    };
    const Stage stages[] = {
        {"synth", "Generate or import the four data splits", stage_synth},
        {"train-student", "Train the base student on the source split", stage_train_student},
        {"doe-build", "Score the pool by DOE and build the concept and random sets", stage_doe_build},
        {"train-teacher", "Train the teacher on the concept and random sets", stage_train_teacher},
        {"train-ae", "Train the teacher-to-student autoencoder", stage_train_ae},
        {"ktcr", "Concept refinement of the base student", stage_ktcr},
        {"train-student-baseline", "Continue plain training of the base student", stage_train_student_baseline},
        {"pipeline", "Run every stage in order, then eval", run_pipeline},
    };
    std::vector<std::pair<CLI::App*, const Stage*>> stage_cmds;
    for (const auto& s : stages) stage_cmds.emplace_back(app.add_subcommand(s.name, s.help), &s);

    auto* eval = app.add_subcommand("eval", "Evaluate the trained students, or a predictions file");
    std::string predictions;
    eval->add_option("--predictions", predictions, "JSON lines of {label, pred, score}");

    auto* norms = app.add_subcommand("norms", "Per-token activation and gradient norms for one sentence");
    std::string text, model_file;
    norms->add_option("--text", text, "Sentence to analyse")->required();
    norms->add_option("--model", model_file, "Model file inside the run directory");

    auto* sweep = app.add_subcommand("sweep", "Run the pipeline once per value of a configuration key");
    std::string sweep_key, sweep_values;
    sweep->add_option("--key", sweep_key, "Dotted configuration key, e.g. doe.k")->required();
    sweep->add_option("--values", sweep_values, "JSON array or comma-separated values")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::fprintf(stderr, "error: config_error: %s\n", msg.c_str());
        return kExitConfig;
    }

    try {
        const auto tree = config_tree(g);
        if (sweep->parsed()) {
            for (const auto& dir : run_sweep(tree, sweep_key, parse_values(sweep_values))) {
                std::printf("%s\n", dir.string().c_str());
            }
            return 0;
        }
        const Run run(config_from_json(tree));
        for (const auto& [cmd, stage] : stage_cmds) {
            if (!cmd->parsed()) continue;
            stage->fn(run);
            if (std::string(stage->name) == "pipeline") print_summary(run.file("summary.csv"));
        }
        if (eval->parsed()) {
            if (predictions.empty()) stage_eval(run);
            else {
                const auto name = std::filesystem::path(predictions).stem().string();
                write_summary(run.file("summary.csv"), {{"predictions", name, eval_predictions_file(predictions)}});
            }
            print_summary(run.file("summary.csv"));
        }
        if (norms->parsed()) {
            stage_norms(run, text, model_file);
            print_summary(run.file("norms.tsv"));
        }
        std::fprintf(stderr, "run directory: %s\n", run.dir().string().c_str());
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::fprintf(stderr, "error: %s: %s\n", e.error_class().c_str(), msg.c_str());
        return e.exit_code();
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "error: config_error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "error: data_error: %s\n", e.what());
        return kExitData;
    }
    return 0;
}
