#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ktcr/encoder.hpp"
#include "ktcr/tensor.hpp"

namespace ktcr {

/// Logistic probe `sigmoid(w.h + b)`, concept side labelled 1.
struct CavProbe {
    Tensor weights;
    double bias = 0.0;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;

    double score(const Tensor& h) const;
};

struct ProbeHyper {
    std::size_t epochs = 200;
    double learning_rate = 0.1;
    double held_out_fraction = 0.2;

    void validate() const;
};

inline constexpr double kLowSeparability = 0.6;

struct Cav {
    std::string layer;
    /// Unit norm; concept examples score positive along it.
    Tensor vector;
    /// Accuracy on the held-out split.
    double probe_accuracy = 0.0;
    std::size_t n_concept = 0;
    std::size_t n_random = 0;
    std::vector<std::string> warnings;
    /// Refit on all examples; `vector` is its normalized weight vector.
    CavProbe probe;

    bool low_separability() const noexcept { return probe_accuracy < kLowSeparability; }
};

/// Full-batch gradient descent from a zero initialization on the mean
/// logistic loss. Deterministic.
CavProbe fit_probe(std::span<const Tensor> concept_acts, std::span<const Tensor> random_acts,
                   const ProbeHyper& hyper, std::uint64_t seed = 0);

/// Trains a probe on a seeded 80/20 per-side split to measure accuracy, then
/// refits on all examples for the direction. At least 4 examples per side.
Cav compute_cav(std::span<const Tensor> concept_acts, std::span<const Tensor> random_acts,
                const std::string& layer, std::uint64_t seed, const ProbeHyper& hyper = {});

/// Gradient of the `target_class` logit with respect to the BOS state of
/// `layer`.
Tensor logit_gradient(const EncoderModel& model, const std::string& layer, const std::string& text,
                      std::size_t target_class);

/// Directional derivative of the target logit along an arbitrary direction.
double directional_sensitivity(const EncoderModel& model, const std::string& layer, const std::string& text,
                               std::size_t target_class, const Tensor& direction);

/// Directional derivative of the target logit along the CAV.
double tcav_sensitivity(const EncoderModel& model, const Cav& cav, const std::string& text,
                        std::size_t target_class);

/// Plain-text record: one "key value..." line per field, doubles in %.17g.
void write_cav(const std::filesystem::path& path, const Cav& cav);
Cav read_cav(const std::filesystem::path& path);

} // namespace ktcr
