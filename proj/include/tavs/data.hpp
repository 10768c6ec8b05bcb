#pragma once

// Story records, vocabulary, dataset files and the synthetic topic corpus.

#include "tavs/autodiff.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tavs::data {

using ad::Matrix;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumSpecials = 4;

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Lowercases, splits on whitespace and splits every punctuation character
/// into its own token.
std::vector<std::string> tokenize(const std::string &text);
/// Space-joined, with punctuation attached to the preceding word.
std::string detokenize(const std::vector<std::string> &words);
bool is_punctuation(const std::string &token);

/// A story as stored on disk: photo features plus raw text.
struct StoryRecord {
    std::string id;
    std::string topic;
    Matrix features; // photos x feature_dim
    std::string text;

    std::vector<std::string> words() const { return tokenize(text); }
};

/// A story ready for the model: features plus token ids ending in <eos>.
struct StoryCase {
    std::string id;
    std::string topic;
    Matrix features;
    std::vector<int> tokens;

    /// Throws DataError when an invariant is broken.
    void validate() const;
};

class Vocabulary {
  public:
    Vocabulary();
    /// Tokens with frequency >= min_freq get ids by descending frequency,
    /// ties broken lexicographically. Specials occupy ids 0..3.
    static Vocabulary build(const std::vector<StoryRecord> &records, int min_freq);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    int id(const std::string &token) const;
    const std::string &token(int id) const;
    const std::vector<std::string> &tokens() const { return tokens_; }

    std::vector<int> encode(const std::vector<std::string> &words) const;
    /// Stops at the first <eos>; drops <pad> and <bos>.
    std::vector<std::string> decode(const std::vector<int> &ids) const;

    bool operator==(const Vocabulary &other) const { return tokens_ == other.tokens_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

StoryCase to_case(const StoryRecord &record, const Vocabulary &vocab);
std::vector<StoryCase> to_cases(const std::vector<StoryRecord> &records, const Vocabulary &vocab);

struct DatasetHeader {
    int schema_version = 1;
    int photos = 5;
    int feature_dim = 0;
};

struct Dataset {
    DatasetHeader header;
    std::vector<StoryRecord> records;
    int dropped = 0;
};

struct LoadOptions {
    int min_tokens = 10;
    int max_tokens = 120;
    std::optional<int> photos;
    std::optional<int> feature_dim;
};

inline constexpr int kSchemaVersion = 1;

/// Line-delimited JSON: a header line then one record per line.
void save_dataset(const std::string &path, const DatasetHeader &header, const std::vector<StoryRecord> &records);
Dataset load_dataset(const std::string &path, const LoadOptions &options = {});

struct TopicSplit {
    std::vector<std::string> train;
    std::vector<std::string> test;
};

/// Topics sorted by story count (descending, ties lexicographic); the first
/// n_train go to meta-training.
TopicSplit split_topics(const std::vector<StoryRecord> &records, int n_train);

using TopicPool = std::map<std::string, std::vector<StoryCase>>;
TopicPool group_by_topic(const std::vector<StoryCase> &cases);

struct SyntheticTopicSpec {
    std::string topic;
    std::vector<std::string> keywords;
    std::vector<std::string> background;
    /// Words with "{k}" (keyword slot) and "{b}" (background slot).
    std::vector<std::string> templates;
    Eigen::VectorXd signature;
    /// One feature direction per keyword; added to the photo whose sentence
    /// mentions the keyword first.
    std::vector<Eigen::VectorXd> keyword_signatures;
    double keyword_prob = 0.85;
    double noise = 0.3;

    double keyword_emission() const;
    double background_emission() const;
    void validate() const;
};

/// Builds n topic specs over a shared keyword pool and background vocabulary.
std::vector<SyntheticTopicSpec> make_synthetic_specs(int n_topics, int feature_dim, std::uint64_t seed);

std::vector<StoryRecord> synth_generate(const std::vector<SyntheticTopicSpec> &specs, int stories_per_topic,
                                        int photos, int feature_dim, std::uint64_t seed);

} // namespace tavs::data
