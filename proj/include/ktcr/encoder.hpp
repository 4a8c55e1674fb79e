#pragma once

// Tiny trainable text encoder: embedding table followed by a stack of
// context-mixing tanh blocks and a two-class linear head.
//
//   x_0[t] = E[id_t]
//   x_l[t] = tanh(W_l x_{l-1}[t] + U_l mean_t'(x_{l-1}[t']) + b_l)
//   logits = H x_L[0] + c
//
// Position 0 always holds the BOS token; its final-layer state is the pooled
// sentence embedding.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ktcr/diff.hpp"
#include "ktcr/tensor.hpp"
#include "ktcr/types.hpp"

namespace ktcr {

class Vocabulary {
public:
    static constexpr std::size_t kUnk = 0;
    static constexpr std::size_t kBos = 1;

    Vocabulary();

    /// Words in first-appearance order over `texts`.
    static Vocabulary build(std::span<const std::string> texts);
    static Vocabulary from_words(std::vector<std::string> words);

    /// Lowercased split on whitespace and ASCII punctuation.
    static std::vector<std::string> split_words(const std::string& text);

    std::size_t id(const std::string& word) const;
    /// BOS followed by one id per word; unknown words map to UNK.
    std::vector<std::size_t> tokenize(const std::string& text) const;
    const std::string& word(std::size_t id) const { return words_.at(id); }
    const std::vector<std::string>& words() const noexcept { return words_; }
    std::size_t size() const noexcept { return words_.size(); }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 16;
    std::vector<std::size_t> layer_dims{16, 16};
    std::size_t pooled_dim = 16;
    std::uint64_t seed = 0;
    /// Zero-initialised head gives exactly uniform class probabilities.
    bool zero_head = true;

    void validate() const;
};

struct EncoderModel {
    EncoderConfig config;
    Vocabulary vocab;
    ParamSet params;
    std::size_t trained_epochs = 0;

    std::vector<std::string> layer_names() const;
    /// 1-based block index for a layer name ("layer1" .. "layerL").
    std::size_t layer_index(const std::string& layer) const;
    std::string last_layer() const;
    std::size_t layer_dim(const std::string& layer) const;
};

/// Fresh seeded parameters; config.vocab_size must equal vocab.size().
EncoderModel init_encoder(const EncoderConfig& config, Vocabulary vocab);

struct ActivationRecord {
    /// Per block, a [positions, dim] matrix of token states.
    std::map<std::string, Tensor> per_layer;
    Tensor pooled;
    std::vector<std::size_t> token_ids;

    /// BOS-position state of a layer, the h_l(x) used by concept machinery.
    Tensor bos(const std::string& layer) const;
};

// ---- differentiable graph ------------------------------------------------

using VarMap = std::map<std::string, diff::Var>;

struct EncoderGraph {
    /// states[0] are embeddings, states[l] the outputs of block l.
    std::vector<std::vector<diff::Var>> states;
    diff::Var logits;

    diff::Var bos(std::size_t layer) const { return states.at(layer).at(0); }
};

VarMap bind_parameters(diff::Tape& tape, const ParamSet& params, bool trainable);
EncoderGraph build_encoder_graph(const VarMap& params, const EncoderConfig& config,
                                 std::span<const std::size_t> ids);

// ---- inference -------------------------------------------------------------

std::vector<std::size_t> tokenize(const EncoderModel& model, const std::string& text);
ActivationRecord encode(const EncoderModel& model, const std::string& text);
/// (P(non-hate), P(hate)).
std::array<double, 2> classify(const EncoderModel& model, const std::string& text);
std::size_t predict(const EncoderModel& model, const std::string& text);

// ---- training --------------------------------------------------------------

struct TrainHyper {
    double learning_rate = 0.1;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TokenizedExample {
    std::vector<std::size_t> ids;
    std::size_t label = kNonHate;
};

std::vector<TokenizedExample> tokenize_all(const EncoderModel& model, std::span<const Example> data);

/// Seeded per-epoch permutation of example indices.
class ShuffleSchedule {
public:
    explicit ShuffleSchedule(std::uint64_t seed);
    std::vector<std::size_t> next_epoch(std::size_t n);

private:
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
};

/// Optional extra per-sample loss added to the cross-entropy before the batch
/// mean. Return nullopt to add nothing for that sample.
using SampleTerm = std::function<std::optional<diff::Var>(const EncoderGraph&, const TokenizedExample&)>;

struct StepResult {
    double mean_loss = 0.0;
    double mean_ce = 0.0;
};

/// One gradient-descent step on the mean per-sample loss of `batch`.
StepResult train_step(EncoderModel& model, std::span<const TokenizedExample* const> batch,
                      double learning_rate, const SampleTerm& extra = {});

double mean_cross_entropy(const EncoderModel& model, std::span<const TokenizedExample> data);

struct TrainResult {
    EncoderModel model;
    std::vector<double> loss_curve;
};

/// Mini-batch gradient descent on categorical cross-entropy. The curve holds
/// the full-set mean cross-entropy after each epoch.
TrainResult train_classifier(const EncoderModel& model, std::span<const Example> dataset,
                             const TrainHyper& hyper);

/// FNV-1a over names, shapes and raw bytes of the parameters.
std::uint64_t parameter_hash(const ParamSet& params);

} // namespace ktcr
