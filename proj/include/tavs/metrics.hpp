#pragma once

// Corpus-level diversity and overlap metrics for generated stories, plus a
// bag-of-words topic classifier used as an on-topic indicator.

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tavs::metrics {

using Tokens = std::vector<std::string>;
/// A story as its sentences; each sentence excludes its closing period.
using Story = std::vector<Tokens>;
using Corpus = std::vector<Story>;

class MetricsError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct NgramMultiset {
    int n = 0;
    std::map<Tokens, long> counts;

    long total() const;
    long distinct() const { return static_cast<long>(counts.size()); }
};

NgramMultiset extract_ngrams(const Tokens &tokens, int n, bool exclude_punct_crossing);

/// Splits a token stream on "." tokens, dropping the periods and empty sentences.
Story split_sentences(const Tokens &tokens);
/// Joins sentences back into one stream with "." after each.
Tokens flatten(const Story &story);

/// 1 - distinct / total over the n-grams of every sentence; 0 when empty.
double inter_repetition(const Corpus &corpus, int n);
/// Mean over stories of the per-sentence overlap with earlier sentences.
double intra_repetition(const Corpus &corpus, int n);
/// Natural-log entropy of n-gram frequencies, each story read as one
/// sequence with punctuation-crossing n-grams removed.
double ent_n(const Corpus &corpus, int n);
/// distinct / total over the same n-grams as inter_repetition.
double dist_n(const Corpus &corpus, int n);

/// Corpus BLEU up to 4-grams with clipped counts, closest-length brevity
/// penalty, and p_n = 1 / (total_n + 1) for orders without any match.
double bleu4(const std::vector<Tokens> &candidates, const std::vector<std::vector<Tokens>> &references);

struct TopicClassifierOptions {
    int epochs = 300;
    double learning_rate = 1.0;
    double l2 = 1e-4;
};

class TopicClassifier {
  public:
    TopicClassifier() = default;
    TopicClassifier(std::vector<std::string> vocabulary, std::vector<std::string> topics);

    const std::vector<std::string> &topics() const { return topics_; }
    const std::vector<std::string> &vocabulary() const { return vocabulary_; }
    Eigen::MatrixXd &weights() { return weights_; }
    Eigen::VectorXd &bias() { return bias_; }
    const Eigen::MatrixXd &weights() const { return weights_; }
    const Eigen::VectorXd &bias() const { return bias_; }

    /// Length-normalised bag of words; unknown tokens are ignored.
    Eigen::VectorXd features(const Tokens &tokens) const;
    Eigen::VectorXd posterior(const Tokens &tokens) const;
    int topic_index(const std::string &topic) const;

  private:
    std::vector<std::string> vocabulary_;
    std::map<std::string, int> word_index_;
    std::vector<std::string> topics_;
    Eigen::MatrixXd weights_; // vocab x topics
    Eigen::VectorXd bias_;
};

struct LabelledStory {
    Tokens tokens;
    std::string topic;
};

/// Full-batch gradient descent on the softmax cross-entropy from zero
/// weights. loss_history receives the training loss before each epoch.
TopicClassifier train_topic_classifier(const std::vector<LabelledStory> &corpus,
                                       const TopicClassifierOptions &options = {},
                                       std::vector<double> *loss_history = nullptr);

/// Mean of -log posterior(true_topic) over the stories.
double topic_nll(const TopicClassifier &clf, const std::vector<Tokens> &stories, const std::string &true_topic);

struct MetricsReport {
    std::vector<int> orders;
    std::map<int, double> inter_rep;
    std::map<int, double> intra_rep;
    std::map<int, double> ent;
    std::map<int, double> dist;
    std::optional<double> bleu4;
    std::optional<double> topic_nll;
    long stories = 0;

    /// One key=value per line.
    std::string to_text() const;
};

MetricsReport diversity_report(const Corpus &corpus, const std::vector<int> &orders);

} // namespace tavs::metrics
