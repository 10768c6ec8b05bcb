#include "tavs/meta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tavs::meta {

void HyperParams::validate() const {
    if (!(inner_lr >= 0.0) || !(meta_lr > 0.0)) {
        throw std::invalid_argument("hyperparameters: inner_lr must be >= 0 and meta_lr > 0");
    }
    if (inner_steps < 0) {
        throw std::invalid_argument("hyperparameters: inner_steps must be >= 0");
    }
    if (topics_per_batch < 1 || k_shot < 1) {
        throw std::invalid_argument("hyperparameters: topics_per_batch and k_shot must be >= 1");
    }
    if (!(grad_clip > 0.0)) {
        throw std::invalid_argument("hyperparameters: grad_clip must be > 0");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw std::invalid_argument("hyperparameters: dropout must lie in [0, 1)");
    }
}

Episode sample_episode(const data::TopicPool &pool, const std::string &topic, int k, std::mt19937_64 &rng) {
    auto it = pool.find(topic);
    if (it == pool.end()) {
        throw std::invalid_argument("sample_episode: unknown topic '" + topic + "'");
    }
    const auto &cases = it->second;
    const auto need = static_cast<std::size_t>(2 * k);
    if (k < 1 || cases.size() < need) {
        throw std::invalid_argument("sample_episode: topic '" + topic + "' has " + std::to_string(cases.size()) +
                                    " cases, need " + std::to_string(need));
    }
    std::vector<std::size_t> idx(cases.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < need; ++i) {
        std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
        std::swap(idx[i], idx[d(rng)]);
    }
    Episode ep;
    ep.topic = topic;
    for (std::size_t i = 0; i < need; ++i) {
        (i < static_cast<std::size_t>(k) ? ep.support : ep.query).push_back(cases[idx[i]]);
    }
    return ep;
}

std::vector<Var> sgd_adapt(std::span<const Var> params, const LossFn &loss, const AdaptOptions &options,
                           std::vector<double> *step_losses) {
    std::vector<Var> current(params.begin(), params.end());
    if (!options.frozen.empty() && options.frozen.size() != current.size()) {
        throw std::invalid_argument("sgd_adapt: frozen mask length differs from parameter count");
    }
    std::vector<std::size_t> trainable;
    for (std::size_t i = 0; i < current.size(); ++i) {
        if (options.frozen.empty() || !options.frozen[i]) {
            trainable.push_back(i);
        }
    }
    if (!options.track) {
        for (auto &v : current) {
            v = v.detach_requires_grad();
        }
    }
    for (int step = 0; step < options.steps; ++step) {
        Var l = loss(current);
        const double value = l.item();
        if (step_losses) {
            step_losses->push_back(value);
        }
        if (!std::isfinite(value)) {
            throw DivergenceError("inner loss became non-finite at step " + std::to_string(step));
        }
        std::vector<Var> wrt;
        for (auto i : trainable) {
            wrt.push_back(current[i]);
        }
        const bool second_order = options.track && options.create_graph;
        auto grads = ad::gradient(l, wrt,
                                  {.create_graph = second_order, .retain_graph = options.track, .allow_unused = true});
        for (std::size_t j = 0; j < trainable.size(); ++j) {
            auto &p = current[trainable[j]];
            if (options.track) {
                p = p - ad::scale(grads[j], options.lr);
            } else {
                ad::GradMode off(false);
                p = (p - ad::scale(grads[j], options.lr)).detach_requires_grad();
            }
        }
    }
    return current;
}

Var maml_objective(std::span<const Var> params, std::span<const Task> tasks, const AdaptOptions &options,
                   std::vector<std::vector<double>> *inner_losses) {
    if (tasks.empty()) {
        throw std::invalid_argument("maml_objective: no tasks");
    }
    Var total;
    for (const auto &task : tasks) {
        std::vector<double> losses;
        auto adapted = sgd_adapt(params, task.support, options, &losses);
        if (inner_losses) {
            inner_losses->push_back(std::move(losses));
        }
        Var q = task.query(adapted);
        total = total.defined() ? total + q : q;
    }
    return ad::scale(total, 1.0 / static_cast<double>(tasks.size()));
}

OuterOptimizer::OuterOptimizer(OuterKind kind, double lr) : kind_(kind), lr_(lr) {
    if (!(lr >= 0.0)) {
        throw std::invalid_argument("optimizer: learning rate must be >= 0");
    }
}

std::vector<Matrix> OuterOptimizer::step(std::span<const Var> params, std::span<const Matrix> grads) {
    std::vector<Matrix> out;
    out.reserve(params.size());
    if (kind_ == OuterKind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            out.push_back(params[i].value() - lr_ * grads[i]);
        }
        return out;
    }
    if (m_.empty()) {
        for (const auto &g : grads) {
            m_.push_back(Matrix::Zero(g.rows(), g.cols()));
            v_.push_back(Matrix::Zero(g.rows(), g.cols()));
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
        const Matrix m_hat = m_[i] / c1;
        const Matrix v_hat = v_[i] / c2;
        out.push_back(params[i].value() -
                      lr_ * (m_hat.array() / (v_hat.array().sqrt() + eps_)).matrix());
    }
    return out;
}

double clip_global_norm(std::vector<Matrix> &grads, double max_norm) {
    double sq = 0.0;
    for (const auto &g : grads) {
        sq += g.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double f = max_norm / norm;
        for (auto &g : grads) {
            g *= f;
        }
    }
    return norm;
}

Var support_loss(const ModelParams &params, std::span<const StoryCase> support, const model::Dropout &dropout) {
    if (support.empty()) {
        throw std::invalid_argument("support_loss: empty support set");
    }
    std::vector<model::EncoderOutput> encoded;
    encoded.reserve(support.size());
    for (const auto &c : support) {
        encoded.push_back(model::encode_photo_stream(params, c.features));
    }
    std::optional<model::AttentionMemory> memory;
    if (params.config().use_prototype) {
        std::vector<Var> visuals;
        std::vector<Var> stories;
        for (std::size_t i = 0; i < support.size(); ++i) {
            visuals.push_back(encoded[i].final);
            stories.push_back(model::encode_story_text(params, support[i].tokens));
        }
        memory = model::AttentionMemory::build(visuals, stories);
    }
    Var total;
    for (std::size_t i = 0; i < support.size(); ++i) {
        std::optional<Var> proto;
        if (memory) {
            proto = memory->query(encoded[i].final).output;
        }
        Var l = model::sequence_nll(params, encoded[i], support[i].tokens, proto, dropout);
        total = total.defined() ? total + l : l;
    }
    return ad::scale(total, 1.0 / static_cast<double>(support.size()));
}

Var query_loss(const ModelParams &params, std::span<const StoryCase> support, std::span<const StoryCase> query,
               const model::Dropout &dropout) {
    if (query.empty()) {
        throw std::invalid_argument("query_loss: empty query set");
    }
    std::optional<model::AttentionMemory> memory;
    if (params.config().use_prototype) {
        auto ctx = model::encode_support(params, support);
        memory = model::AttentionMemory::build(ctx.visuals, ctx.stories);
    }
    Var total;
    for (const auto &c : query) {
        auto encoded = model::encode_photo_stream(params, c.features);
        std::optional<Var> proto;
        if (memory) {
            proto = memory->query(encoded.final).output;
        }
        Var l = model::sequence_nll(params, encoded, c.tokens, proto, dropout);
        total = total.defined() ? total + l : l;
    }
    return ad::scale(total, 1.0 / static_cast<double>(query.size()));
}

namespace {

std::vector<bool> frozen_mask(const ModelParams &params, const HyperParams &hp) {
    std::vector<bool> frozen(params.size(), false);
    if (hp.freeze_embedding_inner) {
        frozen[ModelParams::kEmbedding] = true;
    }
    return frozen;
}

model::Dropout make_dropout(const HyperParams &hp, std::mt19937_64 *rng) { return {hp.dropout, rng}; }

} // namespace

ModelParams inner_adapt(const ModelParams &params, std::span<const StoryCase> support, const HyperParams &hp,
                        bool track_for_meta, std::mt19937_64 *dropout_rng, std::vector<double> *step_losses) {
    if (support.empty()) {
        throw std::invalid_argument("inner_adapt: empty support set");
    }
    const auto config = params.config();
    const auto dropout = make_dropout(hp, dropout_rng);
    LossFn loss = [&](std::span<const Var> t) {
        return support_loss(ModelParams::from_tensors(config, {t.begin(), t.end()}), support, dropout);
    };
    AdaptOptions opts{hp.inner_steps, hp.inner_lr, track_for_meta, hp.second_order, frozen_mask(params, hp)};
    return ModelParams::from_tensors(config, sgd_adapt(params.tensors(), loss, opts, step_losses));
}

Var meta_loss(const ModelParams &params, std::span<const Episode> episodes, const HyperParams &hp,
              std::mt19937_64 *dropout_rng, MetaLossDetails *details) {
    if (episodes.empty()) {
        throw std::invalid_argument("meta_loss: no episodes");
    }
    const auto config = params.config();
    const auto dropout = make_dropout(hp, dropout_rng);
    std::vector<Task> tasks;
    for (const auto &ep : episodes) {
        const Episode *e = &ep;
        tasks.push_back(Task{
            [config, e, dropout](std::span<const Var> t) {
                return support_loss(ModelParams::from_tensors(config, {t.begin(), t.end()}), e->support, dropout);
            },
            [config, e, dropout](std::span<const Var> t) {
                return query_loss(ModelParams::from_tensors(config, {t.begin(), t.end()}), e->support, e->query,
                                  dropout);
            }});
    }
    AdaptOptions opts{hp.inner_steps, hp.inner_lr, true, hp.second_order, frozen_mask(params, hp)};
    return maml_objective(params.tensors(), tasks, opts, details ? &details->inner_losses : nullptr);
}

ModelParams apply_update(const ModelParams &params, std::vector<Matrix> grads, double clip, OuterOptimizer &opt,
                         double *grad_norm) {
    for (const auto &g : grads) {
        if (!g.allFinite()) {
            throw DivergenceError("gradient became non-finite");
        }
    }
    const double norm = clip_global_norm(grads, clip);
    if (grad_norm) {
        *grad_norm = norm;
    }
    auto values = opt.step(params.tensors(), grads);
    std::vector<Var> next;
    next.reserve(values.size());
    for (auto &v : values) {
        if (!v.allFinite()) {
            throw DivergenceError("parameters became non-finite after the outer update");
        }
        next.emplace_back(std::move(v), true);
    }
    return ModelParams::from_tensors(params.config(), std::move(next));
}

StepResult meta_train_step(const ModelParams &params, std::span<const Episode> episodes, const HyperParams &hp,
                           OuterOptimizer &opt, std::mt19937_64 *dropout_rng) {
    StepResult result;
    Var loss = meta_loss(params, episodes, hp, dropout_rng, &result.details);
    result.loss = loss.item();
    if (!std::isfinite(result.loss)) {
        throw DivergenceError("meta loss became non-finite");
    }
    auto grads = ad::gradient(loss, params.tensors(), {.create_graph = false, .retain_graph = std::nullopt, .allow_unused = true});
    std::vector<Matrix> g;
    g.reserve(grads.size());
    for (const auto &v : grads) {
        g.push_back(v.value());
    }
    result.params = apply_update(params, std::move(g), hp.grad_clip, opt, &result.grad_norm);
    return result;
}

namespace {

// Each case's prototype comes from the other cases of its group, so the
// target story never feeds its own decoder.
Var leave_one_out_loss(const ModelParams &params, std::span<const StoryCase> group, const model::Dropout &dropout) {
    if (group.size() < 2) {
        throw std::invalid_argument("train_supervised: a prototype group needs at least 2 cases");
    }
    std::vector<model::EncoderOutput> encoded;
    std::vector<Var> visuals;
    std::vector<Var> stories;
    for (const auto &c : group) {
        encoded.push_back(model::encode_photo_stream(params, c.features));
        visuals.push_back(encoded.back().final);
        stories.push_back(model::encode_story_text(params, c.tokens));
    }
    Var total;
    for (std::size_t i = 0; i < group.size(); ++i) {
        std::vector<Var> keys;
        std::vector<Var> values;
        for (std::size_t j = 0; j < group.size(); ++j) {
            if (j != i) {
                keys.push_back(visuals[j]);
                values.push_back(stories[j]);
            }
        }
        const Var proto = model::attention(encoded[i].final, keys, values).output;
        Var l = model::sequence_nll(params, encoded[i], group[i].tokens, proto, dropout);
        total = total.defined() ? total + l : l;
    }
    return ad::scale(total, 1.0 / static_cast<double>(group.size()));
}

} // namespace

ModelParams train_supervised(const ModelParams &params, const data::TopicPool &pool,
                             std::span<const std::string> topics, const HyperParams &hp,
                             const SupervisedOptions &options, OuterOptimizer &opt, std::mt19937_64 &rng,
                             TrainLog *log) {
    std::vector<const StoryCase *> all;
    for (const auto &t : topics) {
        auto it = pool.find(t);
        if (it == pool.end()) {
            throw std::invalid_argument("train_supervised: unknown topic '" + t + "'");
        }
        for (const auto &c : it->second) {
            all.push_back(&c);
        }
    }
    if (all.empty()) {
        throw std::invalid_argument("train_supervised: empty corpus");
    }
    const bool grouped = params.config().use_prototype;
    const auto dropout = make_dropout(hp, &rng);
    ModelParams current = params.as_leaves();
    const int batch = options.batch_topics * options.cases_per_topic;
    for (int it = 0; it < options.iterations; ++it) {
        Var total;
        int groups = 0;
        if (grouped) {
            std::uniform_int_distribution<std::size_t> pick_topic(0, topics.size() - 1);
            for (int b = 0; b < options.batch_topics; ++b) {
                const auto &topic = topics[pick_topic(rng)];
                const auto &cases = pool.at(topic);
                const auto n = std::min<std::size_t>(cases.size(), static_cast<std::size_t>(options.cases_per_topic));
                std::vector<std::size_t> idx(cases.size());
                std::iota(idx.begin(), idx.end(), 0);
                std::vector<StoryCase> group;
                for (std::size_t i = 0; i < n; ++i) {
                    std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
                    std::swap(idx[i], idx[d(rng)]);
                    group.push_back(cases[idx[i]]);
                }
                Var l = leave_one_out_loss(current, group, dropout);
                total = total.defined() ? total + l : l;
                ++groups;
            }
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
            std::vector<StoryCase> cases;
            for (int b = 0; b < batch; ++b) {
                cases.push_back(*all[pick(rng)]);
            }
            total = support_loss(current, cases, dropout);
            groups = 1;
        }
        Var loss = ad::scale(total, 1.0 / groups);
        const double value = loss.item();
        if (log) {
            log->losses.push_back(value);
        }
        if (!std::isfinite(value)) {
            throw DivergenceError("supervised loss became non-finite at iteration " + std::to_string(it));
        }
        auto grads = ad::gradient(loss, current.tensors(), {.create_graph = false, .retain_graph = std::nullopt, .allow_unused = true});
        std::vector<Matrix> g;
        for (const auto &v : grads) {
            g.push_back(v.value());
        }
        current = apply_update(current, std::move(g), hp.grad_clip, opt);
    }
    return current;
}

std::vector<AdaptationRow> evaluate_adaptation(const ModelParams &params, std::span<const Episode> episodes,
                                               const HyperParams &hp) {
    std::vector<AdaptationRow> rows;
    for (const auto &ep : episodes) {
        AdaptationRow row;
        row.topic = ep.topic;
        {
            ad::GradMode off(false);
            row.zero_shot_nll = query_loss(params, ep.support, ep.query).item();
        }
        try {
            row.adapted = inner_adapt(params, ep.support, hp, false, nullptr, &row.inner_losses);
            ad::GradMode off(false);
            row.few_shot_nll = query_loss(row.adapted, ep.support, ep.query).item();
            if (!std::isfinite(row.few_shot_nll) || !row.adapted.all_finite()) {
                row.diverged = true;
                row.note = "non-finite query loss after adaptation";
            }
        } catch (const DivergenceError &e) {
            row.diverged = true;
            row.note = e.what();
            row.few_shot_nll = std::numeric_limits<double>::quiet_NaN();
            row.adapted = params;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace tavs::meta
