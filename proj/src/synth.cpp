#include "tavs/data.hpp"
#include "tavs/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace tavs::data {

namespace {

const std::vector<std::string> kKeywordPool = {"beach", "cake",  "dog",    "ball",  "tree",   "car",
                                               "snow",  "boat",  "bird",   "party", "music",  "flower",
                                               "train", "candle", "pizza", "kite",  "river",  "bike",
                                               "horse", "lamp",  "hat",    "book",  "garden", "castle"};

const std::vector<std::string> kBackgroundPool = {"big", "small", "happy", "old",  "new",    "red",
                                                  "blue", "loud", "quiet", "warm", "bright", "long"};

const std::vector<std::string> kTemplatePool = {
    "we saw the {k} .",    "the {k} was {b} .",     "a {b} {k} was there .", "everyone loved the {k} .",
    "it was a {b} day .",  "we found a {k} .",      "the {k} looked {b} .",  "then came the {k} .",
    "i liked the {b} {k} .", "my {k} was {b} ."};

Eigen::VectorXd gaussian_vector(int dim, double stddev, std::mt19937_64 &rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) {
        v(i) = dist(rng);
    }
    return v;
}

} // namespace

double SyntheticTopicSpec::keyword_emission() const {
    return keywords.empty() ? 0.0 : keyword_prob / static_cast<double>(keywords.size());
}

double SyntheticTopicSpec::background_emission() const {
    return background.empty() ? 0.0 : (1.0 - keyword_prob) / static_cast<double>(background.size());
}

void SyntheticTopicSpec::validate() const {
    if (keywords.empty()) {
        throw DataError("synthetic topic '" + topic + "': empty keyword set");
    }
    if (background.empty() || templates.empty()) {
        throw DataError("synthetic topic '" + topic + "': needs background words and templates");
    }
    if (keyword_signatures.size() != keywords.size()) {
        throw DataError("synthetic topic '" + topic + "': one feature signature per keyword required");
    }
    if (!(keyword_emission() > background_emission())) {
        throw DataError("synthetic topic '" + topic + "': keyword emission must exceed background emission");
    }
}

std::vector<SyntheticTopicSpec> make_synthetic_specs(int n_topics, int feature_dim, std::uint64_t seed) {
    if (n_topics < 2) {
        throw DataError("synthetic corpus needs at least 2 topics");
    }
    auto rng = fork_rng(seed, "synth-specs");
    std::vector<std::string> pool = kKeywordPool;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<Eigen::VectorXd> keyword_dirs;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        keyword_dirs.push_back(gaussian_vector(feature_dim, 0.5, rng));
    }

    std::vector<SyntheticTopicSpec> specs;
    for (int t = 0; t < n_topics; ++t) {
        SyntheticTopicSpec s;
        char name[16];
        std::snprintf(name, sizeof(name), "topic%02d", t);
        s.topic = name;
        for (int j = 0; j < 4; ++j) {
            const auto k = static_cast<std::size_t>((2 * t + j) % static_cast<int>(pool.size()));
            s.keywords.push_back(pool[k]);
            s.keyword_signatures.push_back(keyword_dirs[k]);
        }
        s.background = kBackgroundPool;
        std::vector<std::size_t> order(kTemplatePool.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (int j = 0; j < 3; ++j) {
            s.templates.push_back(kTemplatePool[order[static_cast<std::size_t>(j)]]);
        }
        s.signature = gaussian_vector(feature_dim, 1.0, rng);
        specs.push_back(std::move(s));
    }
    return specs;
}

std::vector<StoryRecord> synth_generate(const std::vector<SyntheticTopicSpec> &specs, int stories_per_topic,
                                        int photos, int feature_dim, std::uint64_t seed) {
    if (specs.size() < 2) {
        throw DataError("synth_generate: at least 2 topic specs required");
    }
    if (photos < 1 || feature_dim < 1 || stories_per_topic < 1) {
        throw DataError("synth_generate: photos, feature_dim and stories_per_topic must be positive");
    }
    for (const auto &s : specs) {
        s.validate();
        if (s.signature.size() != feature_dim) {
            throw DataError("synthetic topic '" + s.topic + "': signature dimension mismatch");
        }
    }
    auto rng = fork_rng(seed, "synth-stories");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<StoryRecord> out;
    for (const auto &spec : specs) {
        std::uniform_int_distribution<std::size_t> pick_kw(0, spec.keywords.size() - 1);
        std::uniform_int_distribution<std::size_t> pick_bg(0, spec.background.size() - 1);
        std::uniform_int_distribution<std::size_t> pick_tpl(0, spec.templates.size() - 1);
        for (int n = 0; n < stories_per_topic; ++n) {
            StoryRecord r;
            char id[64];
            std::snprintf(id, sizeof(id), "%s-%04d", spec.topic.c_str(), n);
            r.id = id;
            r.topic = spec.topic;
            r.features.resize(photos, feature_dim);
            std::string text;
            for (int p = 0; p < photos; ++p) {
                Eigen::VectorXd feat = spec.signature;
                bool anchored = false;
                std::string sentence;
                for (const auto &word : tokenize(spec.templates[pick_tpl(rng)])) {
                    std::string w = word;
                    if (word == "{" || word == "}") {
                        continue;
                    }
                    if (word == "k") {
                        if (unit(rng) < spec.keyword_prob) {
                            const auto k = pick_kw(rng);
                            w = spec.keywords[k];
                            if (!anchored) {
                                feat += spec.keyword_signatures[k];
                                anchored = true;
                            }
                        } else {
                            w = spec.background[pick_bg(rng)];
                        }
                    } else if (word == "b") {
                        w = spec.background[pick_bg(rng)];
                    }
                    if (!sentence.empty() && !is_punctuation(w)) {
                        sentence.push_back(' ');
                    }
                    sentence += w;
                }
                for (int d = 0; d < feature_dim; ++d) {
                    feat(d) += spec.noise * gauss(rng);
                }
                r.features.row(p) = feat.transpose();
                if (!text.empty()) {
                    text.push_back(' ');
                }
                text += sentence;
            }
            r.text = std::move(text);
            out.push_back(std::move(r));
        }
    }
    return out;
}

} // namespace tavs::data
