#pragma once

// Episodic meta-training: per-topic SGD adaptation, the second-order meta
// objective over a batch of topics, outer optimisation, and the supervised
// baselines used for ablation.

#include "tavs/autodiff.hpp"
#include "tavs/data.hpp"
#include "tavs/model.hpp"

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tavs::meta {

using ad::Matrix;
using ad::Var;
using data::StoryCase;
using model::ModelParams;

/// A non-finite loss or gradient. Callers abort the episode or run and record it.
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class OuterKind { Adam, Sgd };

struct HyperParams {
    double inner_lr = 0.05;
    double meta_lr = 0.001;
    int inner_steps = 3;
    int topics_per_batch = 5;
    int k_shot = 5;
    double grad_clip = 10.0;
    double dropout = 0.2;
    bool second_order = true;
    bool freeze_embedding_inner = true;
    OuterKind outer = OuterKind::Adam;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Episode {
    std::string topic;
    std::vector<StoryCase> support;
    std::vector<StoryCase> query;
};

/// Uniform sample of 2K distinct cases of one topic: first K support, next K query.
Episode sample_episode(const data::TopicPool &pool, const std::string &topic, int k, std::mt19937_64 &rng);

// ---------------------------------------------------------------------------
// Generic parameter-list machinery. The model functions below are thin
// wrappers; the scalar surrogate tests drive these directly.

using LossFn = std::function<Var(std::span<const Var>)>;

struct AdaptOptions {
    int steps = 1;
    double lr = 0.05;
    /// Keep θ' connected to θ so an outer gradient can flow back.
    bool track = false;
    /// Differentiate through the inner gradient (second order). Only
    /// meaningful with track.
    bool create_graph = false;
    /// Tensors excluded from the update (same length as params, or empty).
    std::vector<bool> frozen;
};

/// θ ← θ - lr ∇L(θ), repeated. Appends each step's loss to step_losses.
std::vector<Var> sgd_adapt(std::span<const Var> params, const LossFn &loss, const AdaptOptions &options,
                           std::vector<double> *step_losses = nullptr);

struct Task {
    LossFn support;
    LossFn query;
};

/// (1/N) Σ_i L_query_i(θ'_i) with θ'_i = sgd_adapt(θ, L_support_i).
Var maml_objective(std::span<const Var> params, std::span<const Task> tasks, const AdaptOptions &options,
                   std::vector<std::vector<double>> *inner_losses = nullptr);

class OuterOptimizer {
  public:
    OuterOptimizer(OuterKind kind, double lr);

    /// Updated values for the given gradients; keeps moment state for Adam.
    std::vector<Matrix> step(std::span<const Var> params, std::span<const Matrix> grads);

    OuterKind kind() const { return kind_; }
    double lr() const { return lr_; }

  private:
    OuterKind kind_;
    double lr_;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

/// Rescales grads in place so their global norm is at most max_norm; returns
/// the norm before clipping.
double clip_global_norm(std::vector<Matrix> &grads, double max_norm);

// ---------------------------------------------------------------------------
// Model-level operations.

/// Mean story NLL over a set of cases; with a prototype model each case
/// attends over the whole set, itself included.
Var support_loss(const ModelParams &params, std::span<const StoryCase> support, const model::Dropout &dropout = {});

/// Mean story NLL over the query set, with prototypes fused from the support set.
Var query_loss(const ModelParams &params, std::span<const StoryCase> support, std::span<const StoryCase> query,
               const model::Dropout &dropout = {});

/// M SGD steps on the support loss; the embedding stays fixed when
/// freeze_embedding_inner is set.
ModelParams inner_adapt(const ModelParams &params, std::span<const StoryCase> support, const HyperParams &hp,
                        bool track_for_meta, std::mt19937_64 *dropout_rng = nullptr,
                        std::vector<double> *step_losses = nullptr);

struct MetaLossDetails {
    std::vector<std::vector<double>> inner_losses;
};

Var meta_loss(const ModelParams &params, std::span<const Episode> episodes, const HyperParams &hp,
              std::mt19937_64 *dropout_rng = nullptr, MetaLossDetails *details = nullptr);

struct StepResult {
    ModelParams params;
    double loss = 0.0;
    double grad_norm = 0.0;
    MetaLossDetails details;
};

/// Clips the gradient and applies the outer optimiser; returns fresh leaves.
ModelParams apply_update(const ModelParams &params, std::vector<Matrix> grads, double clip, OuterOptimizer &opt,
                         double *grad_norm = nullptr);

StepResult meta_train_step(const ModelParams &params, std::span<const Episode> episodes, const HyperParams &hp,
                           OuterOptimizer &opt, std::mt19937_64 *dropout_rng = nullptr);

struct SupervisedOptions {
    int iterations = 100;
    /// Topics per batch; each contributes cases_per_topic cases.
    int batch_topics = 5;
    int cases_per_topic = 10;
};

struct TrainLog {
    std::vector<double> losses;
};

/// Mini-batch MLE. Without a prototype model the batch mixes cases from all
/// topics; with one, cases are grouped by topic and each attends over the
/// rest of its group.
ModelParams train_supervised(const ModelParams &params, const data::TopicPool &pool,
                             std::span<const std::string> topics, const HyperParams &hp,
                             const SupervisedOptions &options, OuterOptimizer &opt, std::mt19937_64 &rng,
                             TrainLog *log = nullptr);

struct AdaptationRow {
    std::string topic;
    double zero_shot_nll = 0.0;
    double few_shot_nll = 0.0;
    bool diverged = false;
    std::string note;
    std::vector<double> inner_losses;
    ModelParams adapted;
};

/// Query NLL before (zero-shot) and after (few-shot) inner adaptation.
std::vector<AdaptationRow> evaluate_adaptation(const ModelParams &params, std::span<const Episode> episodes,
                                               const HyperParams &hp);

} // namespace tavs::meta
