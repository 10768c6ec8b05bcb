#include "tavs/metrics.hpp"

#include "tavs/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

namespace tavs::metrics {

long NgramMultiset::total() const {
    long t = 0;
    for (const auto &[gram, c] : counts) {
        t += c;
    }
    return t;
}

NgramMultiset extract_ngrams(const Tokens &tokens, int n, bool exclude_punct_crossing) {
    if (n < 1) {
        throw MetricsError("extract_ngrams: n must be >= 1");
    }
    NgramMultiset out;
    out.n = n;
    const auto len = static_cast<int>(tokens.size());
    for (int i = 0; i + n <= len; ++i) {
        Tokens gram(tokens.begin() + i, tokens.begin() + i + n);
        if (exclude_punct_crossing && std::any_of(gram.begin(), gram.end(), data::is_punctuation)) {
            continue;
        }
        ++out.counts[std::move(gram)];
    }
    return out;
}

Story split_sentences(const Tokens &tokens) {
    Story story;
    Tokens current;
    for (const auto &t : tokens) {
        if (t == ".") {
            if (!current.empty()) {
                story.push_back(std::move(current));
            }
            current.clear();
        } else {
            current.push_back(t);
        }
    }
    if (!current.empty()) {
        story.push_back(std::move(current));
    }
    return story;
}

Tokens flatten(const Story &story) {
    Tokens out;
    for (const auto &s : story) {
        out.insert(out.end(), s.begin(), s.end());
        out.emplace_back(".");
    }
    return out;
}

namespace {

NgramMultiset sentence_ngrams(const Corpus &corpus, int n) {
    NgramMultiset all;
    all.n = n;
    for (const auto &story : corpus) {
        for (const auto &sentence : story) {
            for (auto &[gram, c] : extract_ngrams(sentence, n, false).counts) {
                all.counts[gram] += c;
            }
        }
    }
    return all;
}

long overlap(const NgramMultiset &a, const NgramMultiset &b) {
    long n = 0;
    for (const auto &[gram, c] : a.counts) {
        auto it = b.counts.find(gram);
        if (it != b.counts.end()) {
            n += std::min(c, it->second);
        }
    }
    return n;
}

} // namespace

double dist_n(const Corpus &corpus, int n) {
    const auto all = sentence_ngrams(corpus, n);
    const long total = all.total();
    return total == 0 ? 0.0 : static_cast<double>(all.distinct()) / static_cast<double>(total);
}

double inter_repetition(const Corpus &corpus, int n) {
    const auto all = sentence_ngrams(corpus, n);
    const long total = all.total();
    return total == 0 ? 0.0 : 1.0 - static_cast<double>(all.distinct()) / static_cast<double>(total);
}

double intra_repetition(const Corpus &corpus, int n) {
    if (corpus.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const auto &story : corpus) {
        if (story.empty()) {
            continue;
        }
        std::vector<NgramMultiset> grams;
        for (const auto &s : story) {
            grams.push_back(extract_ngrams(s, n, false));
        }
        double story_sum = 0.0;
        for (std::size_t j = 1; j < grams.size(); ++j) {
            const long size = grams[j].total();
            if (size == 0) {
                continue;
            }
            long shared = 0;
            for (std::size_t k = 0; k < j; ++k) {
                shared += overlap(grams[j], grams[k]);
            }
            story_sum += static_cast<double>(shared) / (static_cast<double>(j) * static_cast<double>(size));
        }
        sum += story_sum / static_cast<double>(story.size());
    }
    return sum / static_cast<double>(corpus.size());
}

double ent_n(const Corpus &corpus, int n) {
    NgramMultiset all;
    for (const auto &story : corpus) {
        for (auto &[gram, c] : extract_ngrams(flatten(story), n, true).counts) {
            all.counts[gram] += c;
        }
    }
    const double total = static_cast<double>(all.total());
    if (all.distinct() <= 1) {
        return 0.0;
    }
    double h = 0.0;
    for (const auto &[gram, c] : all.counts) {
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return h;
}

double bleu4(const std::vector<Tokens> &candidates, const std::vector<std::vector<Tokens>> &references) {
    if (candidates.empty()) {
        throw MetricsError("bleu4: empty corpus");
    }
    if (candidates.size() != references.size()) {
        throw MetricsError("bleu4: candidate and reference lists differ in length");
    }
    long matches[4] = {0, 0, 0, 0};
    long totals[4] = {0, 0, 0, 0};
    long cand_len = 0;
    long ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto &cand = candidates[i];
        const auto &refs = references[i];
        if (refs.empty()) {
            throw MetricsError("bleu4: candidate " + std::to_string(i) + " has no reference");
        }
        cand_len += static_cast<long>(cand.size());
        long best = std::numeric_limits<long>::max();
        long best_diff = std::numeric_limits<long>::max();
        for (const auto &r : refs) {
            const long len = static_cast<long>(r.size());
            const long diff = std::labs(len - static_cast<long>(cand.size()));
            if (diff < best_diff || (diff == best_diff && len < best)) {
                best = len;
                best_diff = diff;
            }
        }
        ref_len += best;
        for (int n = 1; n <= 4; ++n) {
            const auto c = extract_ngrams(cand, n, false);
            std::map<Tokens, long> max_ref;
            for (const auto &r : refs) {
                for (const auto &[gram, k] : extract_ngrams(r, n, false).counts) {
                    max_ref[gram] = std::max(max_ref[gram], k);
                }
            }
            for (const auto &[gram, k] : c.counts) {
                auto it = max_ref.find(gram);
                if (it != max_ref.end()) {
                    matches[n - 1] += std::min(k, it->second);
                }
            }
            totals[n - 1] += c.total();
        }
    }
    if (cand_len == 0) {
        return 0.0;
    }
    double log_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
        const double p = matches[n] > 0 ? static_cast<double>(matches[n]) / static_cast<double>(totals[n])
                                         : 1.0 / static_cast<double>(totals[n] + 1);
        log_sum += 0.25 * std::log(p);
    }
    const double bp =
        cand_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * std::exp(log_sum);
}

TopicClassifier::TopicClassifier(std::vector<std::string> vocabulary, std::vector<std::string> topics)
    : vocabulary_(std::move(vocabulary)), topics_(std::move(topics)),
      weights_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(vocabulary_.size()),
                                     static_cast<Eigen::Index>(topics_.size()))),
      bias_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(topics_.size()))) {
    for (std::size_t i = 0; i < vocabulary_.size(); ++i) {
        word_index_[vocabulary_[i]] = static_cast<int>(i);
    }
}

Eigen::VectorXd TopicClassifier::features(const Tokens &tokens) const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocabulary_.size()));
    if (tokens.empty()) {
        return x;
    }
    for (const auto &t : tokens) {
        auto it = word_index_.find(t);
        if (it != word_index_.end()) {
            x(it->second) += 1.0;
        }
    }
    return x / static_cast<double>(tokens.size());
}

Eigen::VectorXd TopicClassifier::posterior(const Tokens &tokens) const {
    Eigen::VectorXd z = weights_.transpose() * features(tokens) + bias_;
    z.array() -= z.maxCoeff();
    z = z.array().exp();
    return z / z.sum();
}

int TopicClassifier::topic_index(const std::string &topic) const {
    auto it = std::find(topics_.begin(), topics_.end(), topic);
    if (it == topics_.end()) {
        throw MetricsError("topic classifier: unknown topic '" + topic + "'");
    }
    return static_cast<int>(it - topics_.begin());
}

TopicClassifier train_topic_classifier(const std::vector<LabelledStory> &corpus, const TopicClassifierOptions &options,
                                       std::vector<double> *loss_history) {
    std::set<std::string> words;
    std::set<std::string> topic_set;
    for (const auto &s : corpus) {
        words.insert(s.tokens.begin(), s.tokens.end());
        topic_set.insert(s.topic);
    }
    if (topic_set.size() < 2) {
        throw MetricsError("topic classifier: at least 2 topics required");
    }
    TopicClassifier clf({words.begin(), words.end()}, {topic_set.begin(), topic_set.end()});
    const auto n = static_cast<Eigen::Index>(corpus.size());
    const auto v = static_cast<Eigen::Index>(words.size());
    const auto c = static_cast<Eigen::Index>(topic_set.size());
    Eigen::MatrixXd x(n, v);
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, c);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto &s = corpus[static_cast<std::size_t>(i)];
        x.row(i) = clf.features(s.tokens).transpose();
        y(i, clf.topic_index(s.topic)) = 1.0;
    }
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        Eigen::MatrixXd z = x * clf.weights();
        z.rowwise() += clf.bias().transpose();
        Eigen::VectorXd lse(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double m = z.row(i).maxCoeff();
            lse(i) = m + std::log((z.row(i).array() - m).exp().sum());
        }
        Eigen::MatrixXd p = (z.colwise() - lse).array().exp().matrix();
        if (loss_history) {
            double loss = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                loss += lse(i) - (z.row(i).array() * y.row(i).array()).sum();
            }
            loss_history->push_back(loss / static_cast<double>(n));
        }
        const Eigen::MatrixXd d = (p - y) / static_cast<double>(n);
        clf.weights() -= options.learning_rate * (x.transpose() * d + options.l2 * clf.weights());
        clf.bias() -= options.learning_rate * d.colwise().sum().transpose();
    }
    return clf;
}

double topic_nll(const TopicClassifier &clf, const std::vector<Tokens> &stories, const std::string &true_topic) {
    const int k = clf.topic_index(true_topic);
    if (stories.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const auto &s : stories) {
        sum -= std::log(clf.posterior(s)(k));
    }
    return sum / static_cast<double>(stories.size());
}

MetricsReport diversity_report(const Corpus &corpus, const std::vector<int> &orders) {
    MetricsReport r;
    r.orders = orders;
    r.stories = static_cast<long>(corpus.size());
    for (int n : orders) {
        r.inter_rep[n] = inter_repetition(corpus, n);
        r.intra_rep[n] = intra_repetition(corpus, n);
        r.ent[n] = ent_n(corpus, n);
        r.dist[n] = dist_n(corpus, n);
    }
    return r;
}

std::string MetricsReport::to_text() const {
    std::string out;
    char buf[96];
    auto line = [&](const std::string &key, double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        out += key + "=" + buf + "\n";
    };
    out += "stories=" + std::to_string(stories) + "\n";
    for (int n : orders) {
        const auto s = std::to_string(n);
        line("inter_rep_" + s, inter_rep.at(n));
        line("intra_rep_" + s, intra_rep.at(n));
        line("ent_" + s, ent.at(n));
        line("dist_" + s, dist.at(n));
    }
    if (bleu4) {
        line("bleu4", *bleu4);
    }
    if (topic_nll) {
        line("topic_nll", *topic_nll);
    }
    return out;
}

} // namespace tavs::metrics
