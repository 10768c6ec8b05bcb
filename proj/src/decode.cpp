#include "tavs/decode.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>

namespace tavs::decode {

namespace {

struct Context {
    model::AttentionMemory memory;
    Matrix h0;
};

Context prepare(const model::ModelParams &params, const Matrix &features, const std::optional<Var> &proto) {
    const auto encoded = model::encode_photo_stream(params, features);
    Context ctx{model::AttentionMemory::build(encoded.states, encoded.states),
                model::init_decoder(params, encoded.final, proto).value()};
    return ctx;
}

/// Next hidden state and log-softmax over the vocabulary.
std::pair<Matrix, Eigen::VectorXd> advance(const model::ModelParams &params, const Context &ctx, const Matrix &h,
                                           int prev) {
    const auto step = model::decode_step(params, Var(h), prev, ctx.memory);
    Eigen::VectorXd logits = step.logits.value().col(0);
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return {step.hidden.value(), logits.array() - lse};
}

bool lex_less(const std::vector<int> &a, const std::vector<int> &b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(),
                                        [](int x, int y) { return tie_rank(x) < tie_rank(y); });
}

double score(const Hypothesis &h, bool normalize) {
    if (!normalize || h.tokens.empty()) {
        return h.log_prob;
    }
    return h.log_prob / static_cast<double>(h.tokens.size());
}

bool better(const Hypothesis &a, const Hypothesis &b, bool normalize) {
    const double sa = score(a, normalize);
    const double sb = score(b, normalize);
    if (sa != sb) {
        return sa > sb;
    }
    return lex_less(a.tokens, b.tokens);
}

void check_max_len(int max_len) {
    if (max_len < 1) {
        throw std::invalid_argument("decode: max_len must be >= 1");
    }
}

} // namespace

int tie_rank(int token) { return token == data::kEos ? std::numeric_limits<int>::max() : token; }

bool emittable(int token) { return token != data::kPad && token != data::kBos && token != data::kUnk; }

Hypothesis greedy_decode(const model::ModelParams &params, const Matrix &features, const std::optional<Var> &proto,
                         int max_len) {
    check_max_len(max_len);
    ad::GradMode off(false);
    const auto ctx = prepare(params, features, proto);
    Hypothesis hyp;
    hyp.state = ctx.h0;
    int prev = data::kBos;
    while (static_cast<int>(hyp.tokens.size()) < max_len) {
        auto [h, logp] = advance(params, ctx, hyp.state, prev);
        int best = -1;
        double best_score = -std::numeric_limits<double>::infinity();
        for (int t = 0; t < logp.size(); ++t) {
            if (!emittable(t)) {
                continue;
            }
            const double s = hyp.log_prob + logp(t);
            if (best < 0 || s > best_score || (s == best_score && tie_rank(t) < tie_rank(best))) {
                best = t;
                best_score = s;
            }
        }
        hyp.tokens.push_back(best);
        hyp.log_prob = best_score;
        hyp.state = std::move(h);
        prev = best;
        if (best == data::kEos) {
            hyp.finished = true;
            break;
        }
    }
    return hyp;
}

Hypothesis beam_search(const model::ModelParams &params, const Matrix &features, const std::optional<Var> &proto,
                       const BeamOptions &options) {
    check_max_len(options.max_len);
    if (options.beam < 1) {
        throw std::invalid_argument("beam_search: beam must be >= 1");
    }
    ad::GradMode off(false);
    const auto ctx = prepare(params, features, proto);
    const bool norm = options.length_normalize;

    std::vector<Hypothesis> alive(1);
    alive[0].state = ctx.h0;
    std::vector<Hypothesis> finished;
    for (int step = 0; step < options.max_len && !alive.empty(); ++step) {
        std::vector<Hypothesis> candidates;
        for (const auto &hyp : alive) {
            const int prev = hyp.tokens.empty() ? data::kBos : hyp.tokens.back();
            auto [h, logp] = advance(params, ctx, hyp.state, prev);
            for (int t = 0; t < logp.size(); ++t) {
                if (!emittable(t)) {
                    continue;
                }
                Hypothesis next;
                next.tokens = hyp.tokens;
                next.tokens.push_back(t);
                next.log_prob = hyp.log_prob + logp(t);
                next.state = h;
                next.finished = t == data::kEos;
                candidates.push_back(std::move(next));
            }
        }
        const auto keep = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(options.beam));
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                          [norm](const Hypothesis &a, const Hypothesis &b) { return better(a, b, norm); });
        alive.clear();
        for (std::size_t i = 0; i < keep; ++i) {
            (candidates[i].finished ? finished : alive).push_back(std::move(candidates[i]));
        }
        // Log-probs only fall as hypotheses grow, so nothing alive can
        // overtake a strictly better finished one.
        if (!norm && !finished.empty() && !alive.empty()) {
            const auto best_done = std::max_element(finished.begin(), finished.end(), [](const auto &a, const auto &b) {
                                       return a.log_prob < b.log_prob;
                                   })->log_prob;
            const bool any_open = std::any_of(alive.begin(), alive.end(),
                                              [best_done](const Hypothesis &h) { return h.log_prob >= best_done; });
            if (!any_open) {
                alive.clear();
            }
        }
    }
    std::vector<Hypothesis> pool = std::move(finished);
    pool.insert(pool.end(), std::make_move_iterator(alive.begin()), std::make_move_iterator(alive.end()));
    if (options.include_greedy) {
        pool.push_back(greedy_decode(params, features, proto, options.max_len));
    }
    return *std::min_element(pool.begin(), pool.end(),
                             [norm](const Hypothesis &a, const Hypothesis &b) { return better(a, b, norm); });
}

std::vector<std::string> postprocess(const std::vector<std::string> &tokens) {
    std::vector<std::string> out;
    std::set<std::vector<std::string>> seen;
    std::vector<std::string> sentence;
    auto flush = [&] {
        if (sentence.empty()) {
            return;
        }
        std::vector<std::string> key(sentence.begin(), sentence.end());
        if (key.back() == ".") {
            key.pop_back();
        }
        if (seen.insert(key).second) {
            out.insert(out.end(), sentence.begin(), sentence.end());
        }
        sentence.clear();
    };
    for (const auto &t : tokens) {
        sentence.push_back(t);
        if (t == ".") {
            flush();
        }
    }
    flush();
    return out;
}

void save_generated(const std::string &path, const std::vector<GeneratedStory> &stories) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    for (const auto &s : stories) {
        nlohmann::ordered_json j{{"id", s.id}, {"topic", s.topic}, {"text", s.text}, {"log_prob", s.log_prob}};
        out << j.dump() << '\n';
    }
    if (!out) {
        throw std::runtime_error("failed writing " + path);
    }
}

std::vector<GeneratedStory> load_generated(const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    std::vector<GeneratedStory> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("id").get<std::string>(), j.at("topic").get<std::string>(),
                           j.at("text").get<std::string>(), j.value("log_prob", 0.0)});
        } catch (const nlohmann::json::exception &e) {
            throw std::runtime_error(path + ": line " + std::to_string(line_no) + ": malformed story: " + e.what());
        }
    }
    return out;
}

} // namespace tavs::decode
