#pragma once

// End-to-end runs shared by the command-line tool and the acceptance checks:
// corpus preparation, training in the four ablation modes, held-out
// adaptation, story generation and the inner learning-rate sweep.

#include "tavs/decode.hpp"
#include "tavs/meta.hpp"
#include "tavs/metrics.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace tavs::pipeline {

enum class Mode { Supervised, ProtoSupervised, Meta, Tavs };

std::string to_string(Mode mode);
Mode parse_mode(const std::string &text);
bool uses_prototype(Mode mode);
bool uses_meta(Mode mode);

std::string to_string(meta::OuterKind kind);
meta::OuterKind parse_outer(const std::string &text);

/// %.17g, so a value read back is the value written.
std::string format_double(double v);

/// Ordered key=value lines.
class Report {
  public:
    void add(const std::string &key, const std::string &value);
    void add(const std::string &key, double value);
    void add(const std::string &key, long value);
    void add(const std::string &key, int value) { add(key, static_cast<long>(value)); }
    void add(const std::string &key, bool value) { add(key, std::string(value ? "true" : "false")); }
    void add_all(const std::string &prefix, const Report &other);

    const std::vector<std::pair<std::string, std::string>> &entries() const { return entries_; }
    std::string to_text() const;
    void save(const std::string &path) const;

  private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

struct TrainConfig {
    Mode mode = Mode::Tavs;
    meta::HyperParams hp;
    int emb_dim = 16;
    int hidden = 16;
    int iterations = 300;
    double init_scale = 0.1;
    int min_freq = 1;
    int train_topics = 8;
    data::LoadOptions load;

    void validate() const;
    Report describe() const;
};

struct PreparedCorpus {
    data::Dataset dataset;
    data::Vocabulary vocab;
    data::TopicSplit split;
    data::TopicPool pool;
};

/// Vocabulary over every record; topics split by frequency.
PreparedCorpus prepare_corpus(data::Dataset dataset, int min_freq, int train_topics);
/// Same, with a fixed vocabulary (for instance a checkpoint's).
PreparedCorpus prepare_corpus(data::Dataset dataset, data::Vocabulary vocab, int train_topics);

struct TrainResult {
    model::Checkpoint checkpoint;
    std::vector<double> losses;
};

/// Supervised modes run the same number of iterations as the meta modes,
/// each on topics_per_batch * 2K cases, so the data budget matches.
TrainResult train(const PreparedCorpus &corpus, const TrainConfig &config);

/// The checkpoint's recorded test topics present in the corpus, else the
/// corpus's own held-out split.
std::vector<std::string> heldout_topics(const model::Checkpoint &checkpoint, const PreparedCorpus &corpus);

/// per_topic episodes for each topic, drawn with the run's "heldout" stream.
std::vector<meta::Episode> sample_episodes(const data::TopicPool &pool, const std::vector<std::string> &topics,
                                           int per_topic, int k, std::uint64_t seed);

struct AdaptationSummary {
    std::vector<meta::AdaptationRow> rows;
    double mean_zero_shot = 0.0;
    double mean_few_shot = 0.0;
    int diverged = 0;

    Report report() const;
};

AdaptationSummary evaluate_heldout(const model::ModelParams &params, const std::vector<meta::Episode> &episodes,
                                   const meta::HyperParams &hp);

/// Beam search then repeated-sentence removal, for each query case. With a
/// prototype model the support set supplies the prototype.
std::vector<decode::GeneratedStory> generate(const model::ModelParams &params, const data::Vocabulary &vocab,
                                             const std::vector<data::StoryCase> &cases,
                                             const std::vector<data::StoryCase> &support,
                                             const decode::BeamOptions &options);

struct EvaluateInputs {
    std::vector<decode::GeneratedStory> generated;
    /// Reference records matched to generated stories by id, for BLEU.
    std::vector<data::StoryRecord> references;
    /// Labelled corpus for the topic classifier, for topic NLL.
    std::vector<data::StoryRecord> classifier_corpus;
    std::vector<int> orders{1, 2, 3, 4};
};

metrics::MetricsReport evaluate(const EvaluateInputs &inputs);

struct SweepConfig {
    std::vector<double> inner_lrs{0.01, 0.03, 0.05, 0.07, 0.1};
    int episodes_per_topic = 2;
    decode::BeamOptions beam{3, 40, false, true};
};

struct SweepRow {
    double inner_lr = 0.0;
    AdaptationSummary adaptation;
    std::optional<metrics::MetricsReport> metrics;
};

/// Adapts and evaluates the same held-out episodes once per inner learning
/// rate. Diverged episodes are recorded and skipped for generation.
std::vector<SweepRow> sweep_inner_lr(const model::Checkpoint &checkpoint, const PreparedCorpus &corpus,
                                     const meta::HyperParams &hp, const SweepConfig &sweep);

Report sweep_report(const std::vector<SweepRow> &rows);

} // namespace tavs::pipeline
