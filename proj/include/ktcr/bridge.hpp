#pragma once

// Autoencoder mapping teacher activations into student activation space.
//
//   E_M(g_t) = tanh(We g_t + be)   teacher_dim -> student_dim   (= ĝ_s)
//   D_M(z)   = tanh(Wd z + bd)     student_dim -> teacher_dim   (ĝ_t = D_M(E_M(g_t)))
//
// Trained on L_D + L_E with L_D = |g_t - ĝ_t|^2 and L_E = |ĝ_s - g_s|^2.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ktcr/diff.hpp"
#include "ktcr/tensor.hpp"

namespace ktcr {

struct Autoencoder {
    std::size_t teacher_dim = 0;
    std::size_t student_dim = 0;
    /// "enc.W" [student, teacher], "enc.b", "dec.W" [teacher, student], "dec.b".
    ParamSet params;
};

struct ActivationPair {
    Tensor g_t;
    Tensor g_s;
};

struct AutoencoderHyper {
    double learning_rate = 0.005;
    std::size_t epochs = 3;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AutoencoderLoss {
    double reconstruction = 0.0;  // L_D
    double mapping = 0.0;         // L_E
    double combined() const { return reconstruction + mapping; }
};

/// Xavier-uniform weights, zero biases.
Autoencoder init_autoencoder(std::size_t teacher_dim, std::size_t student_dim, std::uint64_t seed);

/// Differentiable L_D + L_E for one pair over bound autoencoder parameters.
diff::Var autoencoder_loss_graph(const std::map<std::string, diff::Var>& params, diff::Var g_t, diff::Var g_s);

AutoencoderLoss autoencoder_loss(const Autoencoder& ae, const ActivationPair& pair);
/// Mean over pairs.
AutoencoderLoss mean_autoencoder_loss(const Autoencoder& ae, std::span<const ActivationPair> pairs);

struct AutoencoderTrainResult {
    Autoencoder ae;
    /// Full-set mean L_D + L_E after each epoch.
    std::vector<double> loss_curve;
};

/// Per-pair stochastic gradient descent over a seeded shuffle each epoch.
AutoencoderTrainResult train_autoencoder(std::span<const ActivationPair> pairs, const AutoencoderHyper& hyper);
/// Continues training an existing autoencoder.
AutoencoderTrainResult train_autoencoder(const Autoencoder& init, std::span<const ActivationPair> pairs,
                                         const AutoencoderHyper& hyper);

/// ĝ_s = E_M(g_t).
Tensor map_activation(const Autoencoder& ae, const Tensor& g_t);
/// ĝ_t = D_M(E_M(g_t)).
Tensor reconstruct(const Autoencoder& ae, const Tensor& g_t);

void save_autoencoder(const std::filesystem::path& path, const Autoencoder& ae);
Autoencoder load_autoencoder(const std::filesystem::path& path);

} // namespace ktcr
