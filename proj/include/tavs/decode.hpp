#pragma once

// Inference-time story generation: greedy and beam search over the decoder,
// repeated-sentence removal, and the generated-story record format.

#include "tavs/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tavs::decode {

using ad::Matrix;
using ad::Var;

struct Hypothesis {
    std::vector<int> tokens;
    double log_prob = 0.0;
    Matrix state;
    bool finished = false;
};

/// Ordering key among equal log-probs: lower wins. Regular tokens rank by
/// id; <eos> ranks after every regular token.
int tie_rank(int token);

/// Tokens the decoders may emit: every id except <pad>, <bos> and <unk>.
bool emittable(int token);

/// Argmax decoding; ties go to the lower tie_rank. Stops after <eos> or
/// max_len tokens.
Hypothesis greedy_decode(const model::ModelParams &params, const Matrix &features, const std::optional<Var> &proto,
                         int max_len);

struct BeamOptions {
    int beam = 3;
    int max_len = 60;
    /// Score by log_prob / length instead of log_prob.
    bool length_normalize = false;
    /// Also offer the greedy hypothesis as a final candidate, so the result
    /// never scores below greedy decoding.
    bool include_greedy = true;
};

/// Beam search over cumulative log-prob. Finished hypotheses are retired;
/// the answer is the best of the finished ones together with any still
/// alive at max_len (and the greedy one, see BeamOptions), ties broken
/// lexicographically by tie_rank.
Hypothesis beam_search(const model::ModelParams &params, const Matrix &features, const std::optional<Var> &proto,
                       const BeamOptions &options);

/// Splits on "." tokens and drops each sentence that repeats an earlier one.
std::vector<std::string> postprocess(const std::vector<std::string> &tokens);

struct GeneratedStory {
    std::string id;
    std::string topic;
    std::string text;
    double log_prob = 0.0;
};

void save_generated(const std::string &path, const std::vector<GeneratedStory> &stories);
std::vector<GeneratedStory> load_generated(const std::string &path);

} // namespace tavs::decode
