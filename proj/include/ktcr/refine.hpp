#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ktcr/bridge.hpp"
#include "ktcr/cav.hpp"
#include "ktcr/diff.hpp"
#include "ktcr/doe.hpp"
#include "ktcr/encoder.hpp"

namespace ktcr {

// ---- prototypes ------------------------------------------------------------

using ClassActivations = std::map<std::size_t, std::vector<Tensor>>;

struct PrototypeSet {
    std::map<std::size_t, std::vector<Tensor>> per_class;
    std::size_t K = 0;
    double beta = 0.5;
    std::string layer;

    const std::vector<Tensor>& centroids(std::size_t cls) const;
    Tensor centroid_mean(std::size_t cls) const;
};

/// k-means with seeded farthest-point initialization: the first centre is the
/// point at a seeded index, each next one the point farthest from the chosen
/// centres (lowest index on ties). Lloyd steps until every centroid moves
/// less than 1e-6, or 100 iterations. An empty cluster keeps its centroid.
std::vector<Tensor> kmeans(std::span<const Tensor> points, std::size_t K, std::uint64_t seed);

PrototypeSet fit_prototypes(const ClassActivations& activations, std::size_t K, std::uint64_t seed,
                            double beta = 0.5, std::string layer = {});

/// L_p = (1/K) sum_k |h - C_k|^2 over the class's centroids.
double prototype_loss(const Tensor& h, const PrototypeSet& protos, std::size_t cls);
/// (2/K) sum_k (h - C_k).
Tensor prototype_grad(const Tensor& h, const PrototypeSet& protos, std::size_t cls);

/// C_{n+1} = (1 - beta) C_n + beta C_c, pairing each old centroid with a
/// current one by greedy nearest matching (ascending distance).
PrototypeSet update_prototypes(const PrototypeSet& protos, const std::map<std::size_t, std::vector<Tensor>>& current);

/// Root of the summed squared centroid displacement.
double prototype_drift(const PrototypeSet& before, const PrototypeSet& after);

// ---- concept loss ------------------------------------------------------------

enum class ConceptMode { sensitize, desensitize };

const char* to_string(ConceptMode m);
ConceptMode concept_mode_from_string(const std::string& s);

struct ConceptTermConfig {
    double gamma = 5.0;
    ConceptMode mode = ConceptMode::sensitize;
};

inline constexpr double kDegenerateGradNorm = 1e-12;

struct ConceptLoss {
    /// |cos(grad L_p, w)|, or 0 when degenerate.
    double l_c = 0.0;
    /// 1 - L_C when sensitizing, L_C when desensitizing; 0 when degenerate.
    double term = 0.0;
    bool degenerate = false;
};

ConceptLoss concept_loss(const Tensor& h, const PrototypeSet& protos, std::size_t cls, const Cav& cav,
                         ConceptMode mode);

/// Differentiable training term for an activation node h; nullopt in the
/// degenerate case. `l_c` receives the L_C node when provided.
std::optional<diff::Var> concept_term_graph(diff::Var h, const PrototypeSet& protos, std::size_t cls,
                                            const Cav& cav, ConceptMode mode, diff::Var* l_c = nullptr);

double combined_loss(double l_o, double concept_term, double gamma);

// ---- training loop -------------------------------------------------------------

struct KtcrConfig {
    double gamma = 5.0;
    std::size_t K = 2;
    double beta = 0.5;
    std::size_t epochs = 10;
    std::size_t cav_update_cycle = 1;
    std::size_t proto_update_cycle = 1;
    ConceptMode mode = ConceptMode::sensitize;
    /// Empty selects the student's last layer.
    std::string layer;
    double lr = 0.1;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    /// Autoencoder training on each CAV cycle.
    AutoencoderHyper ae{0.005, 3, 0};
    ProbeHyper probe;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double l_o = 0.0;
    double l_c = 0.0;
    double l = 0.0;
    std::optional<double> cav_accuracy;
    double proto_drift = 0.0;
    std::size_t degenerate = 0;
    /// Held-out mean L_C before the epoch's updates and after them.
    std::optional<double> heldout_l_c_start;
    std::optional<double> heldout_l_c;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::size_t cav_refreshes = 0;
    std::size_t proto_refreshes = 0;
};

struct KtcrResult {
    EncoderModel student;
    TrainHistory history;
    Autoencoder ae;
    Cav cav;
    PrototypeSet protos;
};

/// Held-out concept examples whose mean L_C is tracked after every epoch.
struct KtcrMonitor {
    std::vector<Example> examples;
};

KtcrResult ktcr_train(const EncoderModel& student, const EncoderModel& teacher, const Autoencoder& ae,
                      const ConceptSets& sets, std::span<const Example> base_dataset, const KtcrConfig& cfg,
                      const KtcrMonitor& monitor = {});

/// Teacher [CLS]-analog activation: final-layer BOS state.
Tensor teacher_activation(const EncoderModel& teacher, const std::string& text);

/// Pairs (teacher pooled state, student BOS state at `layer`) for each text.
std::vector<ActivationPair> activation_pairs(const EncoderModel& teacher, const EncoderModel& student,
                                             const std::string& layer, std::span<const std::string> texts);

/// Mean L_C over examples, using each example's label as its class.
double mean_concept_loss(const EncoderModel& student, std::span<const Example> examples,
                         const PrototypeSet& protos, const Cav& cav);

void write_history_jsonl(const std::filesystem::path& path, const TrainHistory& history);

} // namespace ktcr
