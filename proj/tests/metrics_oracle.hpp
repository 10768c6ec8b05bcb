#pragma once

// Brute-force repetition and entropy: n-grams kept as flat lists and
// compared by linear search, one story at a time.

#include "tavs/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace tavs::testing {

using metrics::Corpus;
using metrics::Tokens;

inline std::vector<Tokens> windows(const Tokens &t, int n) {
    std::vector<Tokens> out;
    for (int i = 0; i + n <= static_cast<int>(t.size()); ++i) {
        out.emplace_back(t.begin() + i, t.begin() + i + n);
    }
    return out;
}

inline long count_in(const std::vector<Tokens> &list, const Tokens &g) {
    return std::count(list.begin(), list.end(), g);
}

inline std::vector<Tokens> uniq(const std::vector<Tokens> &list) {
    std::vector<Tokens> out;
    for (const auto &g : list) {
        if (count_in(out, g) == 0) {
            out.push_back(g);
        }
    }
    return out;
}

inline double ref_inter(const Corpus &c, int n) {
    std::vector<Tokens> all;
    for (const auto &story : c) {
        for (const auto &s : story) {
            for (auto &g : windows(s, n)) {
                all.push_back(g);
            }
        }
    }
    if (all.empty()) {
        return 0.0;
    }
    return 1.0 - static_cast<double>(uniq(all).size()) / static_cast<double>(all.size());
}

inline double ref_intra(const Corpus &c, int n) {
    if (c.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto &story : c) {
        const auto m = story.size();
        if (m == 0) {
            continue;
        }
        double r = 0.0;
        for (std::size_t j = 1; j < m; ++j) {
            const auto fj = windows(story[j], n);
            if (fj.empty()) {
                continue;
            }
            double shared = 0.0;
            for (std::size_t k = 0; k < j; ++k) {
                const auto fk = windows(story[k], n);
                for (const auto &g : uniq(fj)) {
                    shared += static_cast<double>(std::min(count_in(fj, g), count_in(fk, g)));
                }
            }
            r += shared / (static_cast<double>(j) * static_cast<double>(fj.size()));
        }
        total += r / static_cast<double>(m);
    }
    return total / static_cast<double>(c.size());
}

inline double ref_ent(const Corpus &c, int n) {
    std::vector<Tokens> all;
    for (const auto &story : c) {
        Tokens flat;
        for (const auto &s : story) {
            flat.insert(flat.end(), s.begin(), s.end());
            flat.emplace_back(".");
        }
        for (auto &g : windows(flat, n)) {
            if (std::find(g.begin(), g.end(), ".") == g.end()) {
                all.push_back(g);
            }
        }
    }
    double h = 0.0;
    for (const auto &g : uniq(all)) {
        const double p = static_cast<double>(count_in(all, g)) / static_cast<double>(all.size());
        h -= p * std::log(p);
    }
    return h;
}

inline Corpus random_corpus(std::mt19937_64 &rng) {
    std::uniform_int_distribution<int> stories(0, 10);
    std::uniform_int_distribution<int> sentences(0, 6);
    std::uniform_int_distribution<int> tokens(0, 12);
    std::uniform_int_distribution<int> word(0, 4);
    const Tokens alphabet{"a", "b", "c", "d", "e"};
    Corpus c(static_cast<std::size_t>(stories(rng)));
    for (auto &story : c) {
        story.resize(static_cast<std::size_t>(sentences(rng)));
        for (auto &s : story) {
            s.resize(static_cast<std::size_t>(tokens(rng)));
            for (auto &t : s) {
                t = alphabet[static_cast<std::size_t>(word(rng))];
            }
        }
    }
    return c;
}

} // namespace tavs::testing
