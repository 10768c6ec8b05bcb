#include "tavs/model.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace tavs::model {

namespace {

const std::array<const char *, 6> kGruNames = {"w_update", "b_update", "w_reset", "b_reset", "w_candidate",
                                               "b_candidate"};

void append_gru_shapes(std::vector<std::pair<Eigen::Index, Eigen::Index>> &out, Eigen::Index in, Eigen::Index h) {
    for (int i = 0; i < 3; ++i) {
        out.emplace_back(h, in + h);
        out.emplace_back(h, 1);
    }
}

} // namespace

void ModelConfig::validate() const {
    if (vocab < data::kNumSpecials) {
        throw std::invalid_argument("model config: vocab must include the 4 special tokens");
    }
    if (emb_dim < 1 || hidden < 1 || feature_dim < 1) {
        throw std::invalid_argument("model config: emb_dim, hidden and feature_dim must be positive");
    }
}

std::vector<std::string> ModelParams::names(const ModelConfig &config) {
    std::vector<std::string> out{"embedding"};
    for (const char *n : kGruNames) {
        out.push_back(std::string("visual.") + n);
    }
    for (const char *n : kGruNames) {
        out.push_back(std::string("decoder.") + n);
    }
    out.insert(out.end(), {"init.weight", "init.bias", "output.weight", "output.bias"});
    if (config.use_prototype) {
        for (const char *n : kGruNames) {
            out.push_back(std::string("text.") + n);
        }
    }
    return out;
}

std::vector<std::pair<Eigen::Index, Eigen::Index>> ModelParams::shapes(const ModelConfig &c) {
    std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
    out.emplace_back(c.vocab, c.emb_dim);
    append_gru_shapes(out, c.feature_dim, c.hidden);
    append_gru_shapes(out, c.emb_dim, c.hidden);
    out.emplace_back(c.hidden, c.use_prototype ? 2 * c.hidden : c.hidden);
    out.emplace_back(c.hidden, 1);
    out.emplace_back(c.vocab, 2 * c.hidden);
    out.emplace_back(c.vocab, 1);
    if (c.use_prototype) {
        append_gru_shapes(out, c.emb_dim, c.hidden);
    }
    return out;
}

ModelParams ModelParams::random(const ModelConfig &config, std::mt19937_64 &rng, double scale) {
    config.validate();
    std::uniform_real_distribution<double> dist(-scale, scale);
    std::vector<Var> tensors;
    for (const auto &[r, c] : shapes(config)) {
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = dist(rng);
        }
        tensors.emplace_back(std::move(m), true);
    }
    return from_tensors(config, std::move(tensors));
}

ModelParams ModelParams::zeros(const ModelConfig &config) {
    config.validate();
    std::vector<Var> tensors;
    for (const auto &[r, c] : shapes(config)) {
        tensors.emplace_back(Matrix::Zero(r, c), true);
    }
    return from_tensors(config, std::move(tensors));
}

ModelParams ModelParams::from_tensors(const ModelConfig &config, std::vector<Var> tensors) {
    config.validate();
    const auto expected = shapes(config);
    const auto labels = names(config);
    if (tensors.size() != expected.size()) {
        throw std::invalid_argument("model params: expected " + std::to_string(expected.size()) + " tensors, got " +
                                    std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].rows() != expected[i].first || tensors[i].cols() != expected[i].second) {
            throw std::invalid_argument("model params: tensor '" + labels[i] + "' has shape " +
                                        std::to_string(tensors[i].rows()) + "x" + std::to_string(tensors[i].cols()) +
                                        ", expected " + std::to_string(expected[i].first) + "x" +
                                        std::to_string(expected[i].second));
        }
    }
    ModelParams p;
    p.config_ = config;
    p.tensors_ = std::move(tensors);
    return p;
}

ad::GruParams ModelParams::gru_at(std::size_t o) const {
    return {tensors_[o], tensors_[o + 1], tensors_[o + 2], tensors_[o + 3], tensors_[o + 4], tensors_[o + 5]};
}

ad::GruParams ModelParams::text_gru() const {
    if (!config_.use_prototype) {
        throw std::logic_error("model has no text encoder (prototype encoding disabled)");
    }
    return gru_at(kText);
}

ModelParams ModelParams::as_leaves() const {
    std::vector<Var> t;
    t.reserve(tensors_.size());
    for (const auto &v : tensors_) {
        t.push_back(v.detach_requires_grad());
    }
    return from_tensors(config_, std::move(t));
}

ModelParams ModelParams::detached() const {
    std::vector<Var> t;
    t.reserve(tensors_.size());
    for (const auto &v : tensors_) {
        t.push_back(v.detach());
    }
    return from_tensors(config_, std::move(t));
}

bool ModelParams::all_finite() const {
    for (const auto &v : tensors_) {
        if (!v.value().allFinite()) {
            return false;
        }
    }
    return true;
}

Var Dropout::apply(const Var &x) const {
    if (!active()) {
        return x;
    }
    std::bernoulli_distribution keep(1.0 - rate);
    Matrix mask(x.rows(), x.cols());
    const double inv = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = keep(*rng) ? inv : 0.0;
    }
    return ad::cwise_product(x, Var(std::move(mask)));
}

EncoderOutput encode_photo_stream(const ModelParams &params, const Matrix &features) {
    const auto &cfg = params.config();
    if (features.rows() < 1) {
        throw std::invalid_argument("encode_photo_stream: empty photo stream");
    }
    if (features.cols() != cfg.feature_dim) {
        throw std::invalid_argument("encode_photo_stream: feature dimension " + std::to_string(features.cols()) +
                                    ", expected " + std::to_string(cfg.feature_dim));
    }
    const auto gru = params.visual_gru();
    EncoderOutput out;
    Var h = Var::zeros(cfg.hidden, 1);
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        h = ad::gru_cell(gru, h, Var(Matrix(features.row(i).transpose())));
        out.states.push_back(h);
    }
    out.final = h;
    return out;
}

AttentionMemory AttentionMemory::build(std::span<const Var> keys, std::span<const Var> values) {
    if (keys.empty()) {
        throw std::invalid_argument("attention: empty key set");
    }
    if (keys.size() != values.size()) {
        throw std::invalid_argument("attention: keys and values differ in count");
    }
    return {ad::transpose(ad::concat(keys, ad::Axis::Cols)), ad::concat(values, ad::Axis::Cols)};
}

AttentionResult AttentionMemory::query(const Var &q) const {
    if (q.cols() != 1 || q.rows() != keys_t.cols()) {
        throw std::invalid_argument("attention: query dimension differs from key dimension");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(keys_t.cols()));
    Var scores = ad::scale(ad::matmul(q, keys_t, true, true), inv_sqrt_d);
    Var weights = ad::softmax_rows(scores);
    return {ad::matmul(values, weights, false, true), weights};
}

AttentionResult attention(const Var &query, std::span<const Var> keys, std::span<const Var> values) {
    return AttentionMemory::build(keys, values).query(query);
}

Var encode_story_text(const ModelParams &params, std::span<const int> tokens) {
    const auto &cfg = params.config();
    if (tokens.empty()) {
        throw std::invalid_argument("encode_story_text: empty token sequence");
    }
    const auto gru = params.text_gru();
    Var h = Var::zeros(cfg.hidden, 1);
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab) {
            throw std::invalid_argument("encode_story_text: token id " + std::to_string(t) + " out of vocabulary");
        }
        h = ad::gru_cell(gru, h, ad::row(params.embedding(), t));
    }
    return h;
}

Prototype fuse_prototype(const Var &v_query, std::span<const Var> support_visuals,
                         std::span<const Var> support_stories) {
    if (support_visuals.empty()) {
        throw std::invalid_argument("fuse_prototype: empty support set");
    }
    auto r = attention(v_query, support_visuals, support_stories);
    return {r.output, r.weights};
}

SupportContext encode_support(const ModelParams &params, std::span<const data::StoryCase> support) {
    SupportContext ctx;
    for (const auto &c : support) {
        ctx.visuals.push_back(encode_photo_stream(params, c.features).final);
        ctx.stories.push_back(encode_story_text(params, c.tokens));
    }
    return ctx;
}

Var init_decoder(const ModelParams &params, const Var &v_final, const std::optional<Var> &proto) {
    const auto &cfg = params.config();
    if (v_final.rows() != cfg.hidden || v_final.cols() != 1) {
        throw std::invalid_argument("init_decoder: visual vector must have hidden size");
    }
    if (proto.has_value() != cfg.use_prototype) {
        throw std::invalid_argument(cfg.use_prototype ? "init_decoder: model expects a prototype"
                                                      : "init_decoder: model has no prototype input");
    }
    if (proto) {
        const std::array<Var, 2> parts{v_final, *proto};
        return ad::matmul(params.init_weight(), ad::concat(parts, ad::Axis::Rows)) + params.init_bias();
    }
    return ad::matmul(params.init_weight(), v_final) + params.init_bias();
}

namespace {

void check_token(const ModelConfig &cfg, int id) {
    if (id < 0 || id >= cfg.vocab) {
        throw std::invalid_argument("token id " + std::to_string(id) + " out of vocabulary");
    }
}

/// Hidden state and [h; c] feature of one decoder step.
std::pair<Var, Var> step_features(const ModelParams &params, const Var &h_prev, int y_prev,
                                  const AttentionMemory &memory, const Dropout &dropout) {
    check_token(params.config(), y_prev);
    Var x = dropout.apply(ad::row(params.embedding(), y_prev));
    Var h = ad::gru_cell(params.decoder_gru(), h_prev, x);
    Var c = memory.query(h).output;
    const std::array<Var, 2> parts{h, c};
    return {h, dropout.apply(ad::concat(parts, ad::Axis::Rows))};
}

} // namespace

DecodeStep decode_step(const ModelParams &params, const Var &h_prev, int y_prev, const AttentionMemory &memory,
                       const Dropout &dropout) {
    auto [h, feat] = step_features(params, h_prev, y_prev, memory, dropout);
    return {h, ad::matmul(params.output_weight(), feat) + params.output_bias()};
}

Var sequence_nll(const ModelParams &params, const EncoderOutput &encoded, std::span<const int> targets,
                 const std::optional<Var> &proto, const Dropout &dropout) {
    if (targets.empty()) {
        throw std::invalid_argument("story_nll: story has no target tokens");
    }
    const auto memory = AttentionMemory::build(encoded.states, encoded.states);
    Var h = init_decoder(params, encoded.final, proto);
    std::vector<Var> feats;
    feats.reserve(targets.size());
    int prev = data::kBos;
    for (int t : targets) {
        check_token(params.config(), t);
        auto [next, feat] = step_features(params, h, prev, memory, dropout);
        feats.push_back(feat);
        h = next;
        prev = t;
    }
    const auto n = static_cast<Eigen::Index>(targets.size());
    Var logits = ad::matmul(params.output_weight(), ad::concat(feats, ad::Axis::Cols)) +
                 ad::broadcast_cols(params.output_bias(), n);
    return ad::cross_entropy(ad::transpose(logits), targets);
}

Var story_nll(const ModelParams &params, const data::StoryCase &story, const std::optional<SupportContext> &support,
              const Dropout &dropout) {
    if (story.tokens.empty() || story.tokens.back() != data::kEos) {
        throw std::invalid_argument("story_nll: case '" + story.id + "' must end with <eos>");
    }
    const auto encoded = encode_photo_stream(params, story.features);
    std::optional<Var> proto;
    if (support) {
        proto = fuse_prototype(encoded.final, support->visuals, support->stories).vector;
    }
    return sequence_nll(params, encoded, story.tokens, proto, dropout);
}

} // namespace tavs::model
