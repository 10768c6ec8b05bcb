#include "tavs/pipeline.hpp"

#include "tavs/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

namespace tavs::pipeline {

std::string to_string(Mode mode) {
    switch (mode) {
    case Mode::Supervised:
        return "supervised";
    case Mode::ProtoSupervised:
        return "proto_supervised";
    case Mode::Meta:
        return "meta";
    case Mode::Tavs:
        return "tavs";
    }
    return "?";
}

Mode parse_mode(const std::string &text) {
    for (Mode m : {Mode::Supervised, Mode::ProtoSupervised, Mode::Meta, Mode::Tavs}) {
        if (to_string(m) == text) {
            return m;
        }
    }
    throw std::invalid_argument("mode: expected supervised, proto_supervised, meta or tavs, got '" + text + "'");
}

bool uses_prototype(Mode mode) { return mode == Mode::ProtoSupervised || mode == Mode::Tavs; }
bool uses_meta(Mode mode) { return mode == Mode::Meta || mode == Mode::Tavs; }

std::string to_string(meta::OuterKind kind) { return kind == meta::OuterKind::Adam ? "adam" : "sgd"; }

meta::OuterKind parse_outer(const std::string &text) {
    if (text == "adam") {
        return meta::OuterKind::Adam;
    }
    if (text == "sgd") {
        return meta::OuterKind::Sgd;
    }
    throw std::invalid_argument("outer: expected adam or sgd, got '" + text + "'");
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void Report::add(const std::string &key, const std::string &value) { entries_.emplace_back(key, value); }
void Report::add(const std::string &key, double value) { entries_.emplace_back(key, format_double(value)); }
void Report::add(const std::string &key, long value) { entries_.emplace_back(key, std::to_string(value)); }

void Report::add_all(const std::string &prefix, const Report &other) {
    for (const auto &[k, v] : other.entries_) {
        entries_.emplace_back(prefix + k, v);
    }
}

std::string Report::to_text() const {
    std::string out;
    for (const auto &[k, v] : entries_) {
        out += k + "=" + v + "\n";
    }
    return out;
}

void Report::save(const std::string &path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write report " + path);
    }
    out << to_text();
}

void TrainConfig::validate() const {
    hp.validate();
    if (emb_dim < 1 || hidden < 1) {
        throw std::invalid_argument("emb_dim and hidden must be positive");
    }
    if (iterations < 0) {
        throw std::invalid_argument("iterations must be >= 0");
    }
    if (!(init_scale > 0.0) || !std::isfinite(init_scale)) {
        throw std::invalid_argument("init_scale must be positive and finite");
    }
    if (min_freq < 1) {
        throw std::invalid_argument("min_freq must be >= 1");
    }
    if (train_topics < 1) {
        throw std::invalid_argument("train_topics must be >= 1");
    }
}

Report TrainConfig::describe() const {
    Report r;
    r.add("mode", to_string(mode));
    r.add("seed", std::to_string(hp.seed));
    r.add("iterations", iterations);
    r.add("emb_dim", emb_dim);
    r.add("hidden", hidden);
    r.add("init_scale", init_scale);
    r.add("min_freq", min_freq);
    r.add("train_topics", train_topics);
    r.add("min_tokens", load.min_tokens);
    r.add("max_tokens", load.max_tokens);
    r.add("inner_lr", hp.inner_lr);
    r.add("meta_lr", hp.meta_lr);
    r.add("inner_steps", hp.inner_steps);
    r.add("topics_per_batch", hp.topics_per_batch);
    r.add("k_shot", hp.k_shot);
    r.add("grad_clip", hp.grad_clip);
    r.add("dropout", hp.dropout);
    r.add("second_order", hp.second_order);
    r.add("freeze_embedding", hp.freeze_embedding_inner);
    r.add("outer", to_string(hp.outer));
    return r;
}

PreparedCorpus prepare_corpus(data::Dataset dataset, int min_freq, int train_topics) {
    auto vocab = data::Vocabulary::build(dataset.records, min_freq);
    return prepare_corpus(std::move(dataset), std::move(vocab), train_topics);
}

PreparedCorpus prepare_corpus(data::Dataset dataset, data::Vocabulary vocab, int train_topics) {
    PreparedCorpus c;
    c.dataset = std::move(dataset);
    c.vocab = std::move(vocab);
    c.split = data::split_topics(c.dataset.records, train_topics);
    c.pool = data::group_by_topic(data::to_cases(c.dataset.records, c.vocab));
    return c;
}

namespace {

std::string join(const std::vector<std::string> &items) {
    std::string out;
    for (const auto &s : items) {
        out += (out.empty() ? "" : ",") + s;
    }
    return out;
}

std::vector<std::string> split_list(const std::string &s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) {
        out.push_back(cur);
    }
    return out;
}

} // namespace

TrainResult train(const PreparedCorpus &corpus, const TrainConfig &config) {
    config.validate();
    const model::ModelConfig mc{corpus.vocab.size(), config.emb_dim, config.hidden, corpus.dataset.header.feature_dim,
                                uses_prototype(config.mode)};
    mc.validate();
    const auto &topics = corpus.split.train;
    if (static_cast<int>(topics.size()) < config.hp.topics_per_batch) {
        throw std::invalid_argument("topics_per_batch exceeds the number of training topics");
    }

    auto init_rng = fork_rng(config.hp.seed, "init");
    auto params = model::ModelParams::random(mc, init_rng, config.init_scale);
    meta::OuterOptimizer opt(config.hp.outer, config.hp.meta_lr);
    TrainResult result;

    if (uses_meta(config.mode)) {
        auto episode_rng = fork_rng(config.hp.seed, "episodes");
        auto dropout_rng = fork_rng(config.hp.seed, "dropout");
        for (int it = 0; it < config.iterations; ++it) {
            std::vector<std::string> order = topics;
            std::vector<meta::Episode> batch;
            for (int b = 0; b < config.hp.topics_per_batch; ++b) {
                std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(b), order.size() - 1);
                std::swap(order[static_cast<std::size_t>(b)], order[d(episode_rng)]);
                batch.push_back(meta::sample_episode(corpus.pool, order[static_cast<std::size_t>(b)],
                                                     config.hp.k_shot, episode_rng));
            }
            auto step = meta::meta_train_step(params, batch, config.hp, opt, &dropout_rng);
            result.losses.push_back(step.loss);
            params = std::move(step.params);
        }
    } else {
        auto rng = fork_rng(config.hp.seed, "supervised");
        meta::SupervisedOptions so{config.iterations, config.hp.topics_per_batch, 2 * config.hp.k_shot};
        meta::TrainLog log;
        params = meta::train_supervised(params, corpus.pool, topics, config.hp, so, opt, rng, &log);
        result.losses = std::move(log.losses);
    }

    auto &ckpt = result.checkpoint;
    ckpt.config = mc;
    ckpt.vocab = corpus.vocab.tokens();
    ckpt.params = params.detached();
    ckpt.metadata["mode"] = to_string(config.mode);
    ckpt.metadata["train_topics"] = join(corpus.split.train);
    ckpt.metadata["test_topics"] = join(corpus.split.test);
    const auto described = config.describe();
    for (const auto &[k, v] : described.entries()) {
        ckpt.metadata["config." + k] = v;
    }
    return result;
}

std::vector<std::string> heldout_topics(const model::Checkpoint &checkpoint, const PreparedCorpus &corpus) {
    auto it = checkpoint.metadata.find("test_topics");
    if (it == checkpoint.metadata.end()) {
        return corpus.split.test;
    }
    std::vector<std::string> out;
    for (const auto &t : split_list(it->second)) {
        if (corpus.pool.count(t)) {
            out.push_back(t);
        }
    }
    return out.empty() ? corpus.split.test : out;
}

std::vector<meta::Episode> sample_episodes(const data::TopicPool &pool, const std::vector<std::string> &topics,
                                           int per_topic, int k, std::uint64_t seed) {
    auto rng = fork_rng(seed, "heldout");
    std::vector<meta::Episode> out;
    for (const auto &t : topics) {
        for (int i = 0; i < per_topic; ++i) {
            out.push_back(meta::sample_episode(pool, t, k, rng));
        }
    }
    return out;
}

Report AdaptationSummary::report() const {
    Report r;
    r.add("episodes", static_cast<long>(rows.size()));
    r.add("diverged", diverged);
    r.add("mean_zero_shot_nll", mean_zero_shot);
    r.add("mean_few_shot_nll", mean_few_shot);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto p = "episode." + std::to_string(i) + ".";
        r.add(p + "topic", rows[i].topic);
        r.add(p + "zero_shot_nll", rows[i].zero_shot_nll);
        r.add(p + "few_shot_nll", rows[i].few_shot_nll);
        r.add(p + "diverged", rows[i].diverged);
        if (!rows[i].note.empty()) {
            r.add(p + "note", rows[i].note);
        }
    }
    return r;
}

AdaptationSummary evaluate_heldout(const model::ModelParams &params, const std::vector<meta::Episode> &episodes,
                                   const meta::HyperParams &hp) {
    AdaptationSummary s;
    s.rows = meta::evaluate_adaptation(params, episodes, hp);
    double zero = 0.0;
    double few = 0.0;
    int ok = 0;
    for (const auto &row : s.rows) {
        zero += row.zero_shot_nll;
        if (row.diverged) {
            ++s.diverged;
        } else {
            few += row.few_shot_nll;
            ++ok;
        }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.mean_zero_shot = s.rows.empty() ? nan : zero / static_cast<double>(s.rows.size());
    s.mean_few_shot = ok == 0 ? nan : few / ok;
    return s;
}

std::vector<decode::GeneratedStory> generate(const model::ModelParams &params, const data::Vocabulary &vocab,
                                             const std::vector<data::StoryCase> &cases,
                                             const std::vector<data::StoryCase> &support,
                                             const decode::BeamOptions &options) {
    ad::GradMode off(false);
    std::optional<model::AttentionMemory> memory;
    if (params.config().use_prototype) {
        if (support.empty()) {
            throw std::invalid_argument("generate: a prototype model needs a support set");
        }
        const auto ctx = model::encode_support(params, support);
        memory = model::AttentionMemory::build(ctx.visuals, ctx.stories);
    }
    std::vector<decode::GeneratedStory> out;
    for (const auto &c : cases) {
        std::optional<ad::Var> proto;
        if (memory) {
            proto = memory->query(model::encode_photo_stream(params, c.features).final).output;
        }
        const auto h = decode::beam_search(params, c.features, proto, options);
        const auto words = decode::postprocess(vocab.decode(h.tokens));
        out.push_back({c.id, c.topic, data::detokenize(words), h.log_prob});
    }
    return out;
}

metrics::MetricsReport evaluate(const EvaluateInputs &inputs) {
    metrics::Corpus corpus;
    std::vector<metrics::Tokens> tokens;
    for (const auto &g : inputs.generated) {
        tokens.push_back(data::tokenize(g.text));
        corpus.push_back(metrics::split_sentences(tokens.back()));
    }
    auto report = metrics::diversity_report(corpus, inputs.orders);

    if (!inputs.references.empty()) {
        std::map<std::string, const data::StoryRecord *> by_id;
        for (const auto &r : inputs.references) {
            by_id.emplace(r.id, &r);
        }
        std::vector<metrics::Tokens> candidates;
        std::vector<std::vector<metrics::Tokens>> refs;
        for (std::size_t i = 0; i < inputs.generated.size(); ++i) {
            auto it = by_id.find(inputs.generated[i].id);
            if (it != by_id.end()) {
                candidates.push_back(tokens[i]);
                refs.push_back({it->second->words()});
            }
        }
        if (!candidates.empty()) {
            report.bleu4 = metrics::bleu4(candidates, refs);
        }
    }

    if (!inputs.classifier_corpus.empty() && !inputs.generated.empty()) {
        std::vector<metrics::LabelledStory> labelled;
        for (const auto &r : inputs.classifier_corpus) {
            labelled.push_back({r.words(), r.topic});
        }
        const auto clf = metrics::train_topic_classifier(labelled);
        double sum = 0.0;
        for (std::size_t i = 0; i < inputs.generated.size(); ++i) {
            sum += metrics::topic_nll(clf, {tokens[i]}, inputs.generated[i].topic);
        }
        report.topic_nll = sum / static_cast<double>(inputs.generated.size());
    }
    return report;
}

std::vector<SweepRow> sweep_inner_lr(const model::Checkpoint &checkpoint, const PreparedCorpus &corpus,
                                     const meta::HyperParams &hp, const SweepConfig &sweep) {
    if (sweep.inner_lrs.empty()) {
        throw std::invalid_argument("sweep: no inner learning rates given");
    }
    const auto topics = heldout_topics(checkpoint, corpus);
    const auto episodes = sample_episodes(corpus.pool, topics, sweep.episodes_per_topic, hp.k_shot, hp.seed);
    std::vector<SweepRow> rows;
    for (double lr : sweep.inner_lrs) {
        auto h = hp;
        h.inner_lr = lr;
        SweepRow row;
        row.inner_lr = lr;
        row.adaptation = evaluate_heldout(checkpoint.params, episodes, h);
        EvaluateInputs inputs;
        for (std::size_t i = 0; i < episodes.size(); ++i) {
            const auto &r = row.adaptation.rows[i];
            if (r.diverged) {
                continue;
            }
            auto stories = generate(r.adapted, corpus.vocab, episodes[i].query, episodes[i].support, sweep.beam);
            inputs.generated.insert(inputs.generated.end(), stories.begin(), stories.end());
        }
        if (!inputs.generated.empty()) {
            inputs.references = corpus.dataset.records;
            inputs.classifier_corpus = corpus.dataset.records;
            row.metrics = evaluate(inputs);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

Report sweep_report(const std::vector<SweepRow> &rows) {
    Report r;
    r.add("rates", static_cast<long>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto p = "ulr." + std::to_string(i) + ".";
        const auto &row = rows[i];
        r.add(p + "inner_lr", row.inner_lr);
        r.add(p + "episodes", static_cast<long>(row.adaptation.rows.size()));
        r.add(p + "diverged", row.adaptation.diverged);
        r.add(p + "mean_zero_shot_nll", row.adaptation.mean_zero_shot);
        r.add(p + "mean_few_shot_nll", row.adaptation.mean_few_shot);
        if (row.metrics) {
            Report m;
            for (int n : row.metrics->orders) {
                m.add("inter_rep_" + std::to_string(n), row.metrics->inter_rep.at(n));
                m.add("ent_" + std::to_string(n), row.metrics->ent.at(n));
            }
            if (row.metrics->bleu4) {
                m.add("bleu4", *row.metrics->bleu4);
            }
            if (row.metrics->topic_nll) {
                m.add("topic_nll", *row.metrics->topic_nll);
            }
            r.add_all(p, m);
        }
        for (std::size_t e = 0; e < row.adaptation.rows.size(); ++e) {
            const auto &er = row.adaptation.rows[e];
            if (er.diverged) {
                r.add(p + "episode." + std::to_string(e) + ".diverged", er.note);
            }
        }
    }
    return r;
}

} // namespace tavs::pipeline
