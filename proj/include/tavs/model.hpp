#pragma once

// Visual encoder, attentive story decoder, story-text encoder and prototype
// fusion, all as differentiable functions of an explicit parameter set.

#include "tavs/autodiff.hpp"
#include "tavs/data.hpp"
#include "tavs/gru.hpp"

#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tavs::model {

using ad::Matrix;
using ad::Var;

struct ModelConfig {
    int vocab = 0;
    int emb_dim = 16;
    int hidden = 16;
    int feature_dim = 8;
    bool use_prototype = false;

    void validate() const;
    bool operator==(const ModelConfig &) const = default;
};

/// All learnable tensors in a fixed order. Instances are cheap to copy: the
/// tensors are graph handles.
class ModelParams {
  public:
    ModelParams() = default;

    static ModelParams random(const ModelConfig &config, std::mt19937_64 &rng, double scale = 0.1);
    static ModelParams zeros(const ModelConfig &config);
    /// Takes ownership of tensors laid out as names() describes; checks shapes.
    static ModelParams from_tensors(const ModelConfig &config, std::vector<Var> tensors);

    const ModelConfig &config() const { return config_; }
    std::span<const Var> tensors() const { return tensors_; }
    std::size_t size() const { return tensors_.size(); }
    static std::vector<std::string> names(const ModelConfig &config);
    static std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes(const ModelConfig &config);

    const Var &embedding() const { return tensors_[kEmbedding]; }
    ad::GruParams visual_gru() const { return gru_at(kVisual); }
    ad::GruParams decoder_gru() const { return gru_at(kDecoder); }
    ad::GruParams text_gru() const;
    const Var &init_weight() const { return tensors_[kInitWeight]; }
    const Var &init_bias() const { return tensors_[kInitBias]; }
    const Var &output_weight() const { return tensors_[kOutputWeight]; }
    const Var &output_bias() const { return tensors_[kOutputBias]; }

    static constexpr std::size_t kEmbedding = 0;

    /// Same values as new leaves that require grad.
    ModelParams as_leaves() const;
    /// Same values, no gradient tracking.
    ModelParams detached() const;
    bool all_finite() const;

  private:
    static constexpr std::size_t kVisual = 1;
    static constexpr std::size_t kDecoder = 7;
    static constexpr std::size_t kInitWeight = 13;
    static constexpr std::size_t kInitBias = 14;
    static constexpr std::size_t kOutputWeight = 15;
    static constexpr std::size_t kOutputBias = 16;
    static constexpr std::size_t kText = 17;

    ad::GruParams gru_at(std::size_t offset) const;

    ModelConfig config_;
    std::vector<Var> tensors_;
};

/// Dropout driven by the run's generator. Inactive when rng is null or rate 0.
struct Dropout {
    double rate = 0.0;
    std::mt19937_64 *rng = nullptr;

    bool active() const { return rng != nullptr && rate > 0.0; }
    Var apply(const Var &x) const;
};

struct EncoderOutput {
    std::vector<Var> states;
    Var final;
};

EncoderOutput encode_photo_stream(const ModelParams &params, const Matrix &features);

struct AttentionResult {
    Var output;
    Var weights; // 1 x n
};

/// softmax(q·k_i / sqrt(d_k)) weighted sum of the values.
AttentionResult attention(const Var &query, std::span<const Var> keys, std::span<const Var> values);

/// Keys and values pre-stacked for repeated queries.
struct AttentionMemory {
    Var keys_t; // n x d_k
    Var values; // d_v x n

    static AttentionMemory build(std::span<const Var> keys, std::span<const Var> values);
    AttentionResult query(const Var &q) const;
};

Var encode_story_text(const ModelParams &params, std::span<const int> tokens);

struct Prototype {
    Var vector;
    Var attention_weights; // 1 x K
};

Prototype fuse_prototype(const Var &v_query, std::span<const Var> support_visuals,
                         std::span<const Var> support_stories);

/// Support-set encodings that prototypes attend over.
struct SupportContext {
    std::vector<Var> visuals;
    std::vector<Var> stories;
};

SupportContext encode_support(const ModelParams &params, std::span<const data::StoryCase> support);

/// W_init·v_final + b, or W_init·[v_final; proto] + b when a prototype is given.
Var init_decoder(const ModelParams &params, const Var &v_final, const std::optional<Var> &proto);

struct DecodeStep {
    Var hidden;
    Var logits; // vocab x 1
};

DecodeStep decode_step(const ModelParams &params, const Var &h_prev, int y_prev, const AttentionMemory &memory,
                       const Dropout &dropout = {});

/// Teacher-forced sum of token cross-entropies for a case whose encoder output
/// is already available.
Var sequence_nll(const ModelParams &params, const EncoderOutput &encoded, std::span<const int> targets,
                 const std::optional<Var> &proto, const Dropout &dropout = {});

/// Teacher-forced story NLL. With a support context the decoder is
/// initialised from the prototype fused with the case's own visual vector.
Var story_nll(const ModelParams &params, const data::StoryCase &story,
              const std::optional<SupportContext> &support = std::nullopt, const Dropout &dropout = {});

struct Checkpoint {
    ModelConfig config;
    std::vector<std::string> vocab;
    std::map<std::string, std::string> metadata;
    ModelParams params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string &path, const Checkpoint &checkpoint);
Checkpoint load_checkpoint(const std::string &path);

} // namespace tavs::model
