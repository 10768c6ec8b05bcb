#include "beam_oracle.hpp"
#include "tavs/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>

using namespace tavs;
using namespace tavs::testing;
using ad::Matrix;
using ad::Var;
using model::ModelConfig;
using model::ModelParams;

TEST_CASE("greedy decoding with zero parameters follows the tie rule") {
    const ModelConfig cfg{10, 4, 4, 3, false};
    const auto z = ModelParams::zeros(cfg);
    const auto h = decode::greedy_decode(z, Matrix::Zero(2, 3), std::nullopt, 6);
    CHECK(h.tokens == std::vector<int>(6, data::kNumSpecials));
    CHECK_FALSE(h.finished);
    CHECK(std::abs(h.log_prob + 6.0 * std::log(10.0)) < 1e-12);
    CHECK_THROWS(decode::greedy_decode(z, Matrix::Zero(2, 3), std::nullopt, 0));
}

TEST_CASE("greedy decoding is deterministic") {
    auto rng = fork_rng(1, "greedy");
    const ModelConfig cfg{12, 6, 6, 3, false};
    const auto p = ModelParams::random(cfg, rng, 1.0);
    const auto f = random_features(rng, 3, 3);
    const auto a = decode::greedy_decode(p, f, std::nullopt, 10);
    const auto b = decode::greedy_decode(p, f, std::nullopt, 10);
    CHECK(a.tokens == b.tokens);
    CHECK(a.log_prob == b.log_prob);
}

TEST_CASE("beam of one equals greedy") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto rng = fork_rng(seed, "beam1");
        const ModelConfig cfg{8, 4, 5, 3, false};
        const auto p = ModelParams::random(cfg, rng, 1.5);
        const auto f = random_features(rng, 2, 3);
        const auto g = decode::greedy_decode(p, f, std::nullopt, 6);
        const auto b = decode::beam_search(p, f, std::nullopt, {1, 6, false, false});
        CAPTURE(seed);
        CHECK(g.tokens == b.tokens);
        CHECK(g.log_prob == b.log_prob);
    }
}

TEST_CASE("wide beam matches exhaustive enumeration") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto rng = fork_rng(seed, "exhaustive");
        const ModelConfig cfg{6, 4, 4, 3, false};
        const auto p = ModelParams::random(cfg, rng, 1.5);
        const auto f = random_features(rng, 2, 3);
        const auto oracle = enumerate_best(p, f, 4);
        const auto b = decode::beam_search(p, f, std::nullopt, {1296, 4, false, false});
        CAPTURE(seed);
        CHECK(b.tokens == oracle.tokens);
        CHECK(b.log_prob == oracle.log_prob);
        CHECK(b.finished == oracle.finished);
    }
}

TEST_CASE("forced end token gives the empty story") {
    const ModelConfig cfg{8, 4, 4, 3, false};
    const auto z = ModelParams::zeros(cfg);
    std::vector<Var> tensors(z.tensors().begin(), z.tensors().end());
    const auto names = ModelParams::names(cfg);
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == "output.bias") {
            Matrix b = Matrix::Zero(cfg.vocab, 1);
            b(data::kEos, 0) = 40.0;
            tensors[i] = Var(b);
        }
    }
    const auto p = ModelParams::from_tensors(cfg, tensors);
    for (int beam : {1, 3, 10}) {
        const auto h = decode::beam_search(p, Matrix::Zero(2, 3), std::nullopt, {beam, 20, false});
        CHECK(h.tokens == std::vector<int>{data::kEos});
        CHECK(h.finished);
    }
    CHECK(decode::greedy_decode(p, Matrix::Zero(2, 3), std::nullopt, 20).tokens == std::vector<int>{data::kEos});
}

TEST_CASE("beam search never scores below greedy") {
    int checked = 0;
    int plain_below = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto rng = fork_rng(seed, "beam-vs-greedy");
        const ModelConfig cfg{12, 5, 6, 3, seed % 2 == 1};
        const auto p = ModelParams::random(cfg, rng, 1.5);
        const auto f = random_features(rng, 3, 3);
        std::optional<Var> proto;
        if (cfg.use_prototype) {
            proto = Var(random_features(rng, cfg.hidden, 1));
        }
        const auto g = decode::greedy_decode(p, f, proto, 8);
        for (int beam : {2, 3, 5}) {
            const auto b = decode::beam_search(p, f, proto, {beam, 8, false, true});
            CAPTURE(seed);
            CAPTURE(beam);
            CHECK(b.log_prob >= g.log_prob);
            if (decode::beam_search(p, f, proto, {beam, 8, false, false}).log_prob < g.log_prob) {
                ++plain_below;
            }
            ++checked;
        }
    }
    CHECK(checked == 600);
    // Plain beam search can prune the greedy path and end up below it.
    CHECK(plain_below > 0);
}

TEST_CASE("hypothesis log-prob is the sum of step log-probs") {
    auto rng = fork_rng(3, "logprob");
    const ModelConfig cfg{6, 4, 4, 3, false};
    const auto p = ModelParams::random(cfg, rng, 1.5);
    const auto f = random_features(rng, 2, 3);
    const auto b = decode::beam_search(p, f, std::nullopt, {4, 5, false});
    model::EncoderOutput enc = model::encode_photo_stream(p, f);
    const auto memory = model::AttentionMemory::build(enc.states, enc.states);
    Var h = model::init_decoder(p, enc.final, std::nullopt);
    int prev = data::kBos;
    double total = 0.0;
    for (int t : b.tokens) {
        const auto step = model::decode_step(p, h, prev, memory);
        const std::vector<int> target{t};
        total -= ad::cross_entropy(ad::transpose(step.logits), target).item();
        h = step.hidden;
        prev = t;
    }
    CHECK(std::abs(total - b.log_prob) < 1e-12);
    CHECK(b.finished == (b.tokens.back() == data::kEos));
}

TEST_CASE("postprocess removes repeated sentences") {
    using V = std::vector<std::string>;
    CHECK(decode::postprocess(V{"we", "had", "fun", ".", "we", "had", "fun", "."}) == V{"we", "had", "fun", "."});
    const V distinct{"a", "b", ".", "c", "."};
    CHECK(decode::postprocess(distinct) == distinct);
    const V x{"a", "b", ".", "c", ".", "a", "b", "."};
    CHECK(decode::postprocess(x) == V{"a", "b", ".", "c", "."});
    CHECK(decode::postprocess(decode::postprocess(x)) == decode::postprocess(x));
    CHECK(decode::postprocess(V{"a", ".", "a"}) == V{"a", "."});
    CHECK(decode::postprocess(V{}).empty());

    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> pick(0, 3);
    const V alphabet{"x", "y", ".", "z"};
    for (int trial = 0; trial < 200; ++trial) {
        V t;
        for (int i = 0; i < 12; ++i) {
            t.push_back(alphabet[static_cast<std::size_t>(pick(rng))]);
        }
        const auto once = decode::postprocess(t);
        CHECK(decode::postprocess(once) == once);
    }
}

TEST_CASE("generated story records round trip") {
    const std::vector<decode::GeneratedStory> stories{{"a-1", "beach", "we swam. it was fun.", -12.25},
                                                      {"b-2", "party", "cake!", -0.1}};
    const auto path = (std::filesystem::temp_directory_path() / "tavs_generated.jsonl").string();
    decode::save_generated(path, stories);
    const auto back = decode::load_generated(path);
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].id == stories[i].id);
        CHECK(back[i].topic == stories[i].topic);
        CHECK(back[i].text == stories[i].text);
        CHECK(back[i].log_prob == stories[i].log_prob);
    }
    std::filesystem::remove(path);
}
