#include "gradcheck.hpp"
#include "tavs/model.hpp"
#include "tavs/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

using namespace tavs;
using ad::Matrix;
using ad::Var;
using model::ModelConfig;
using model::ModelParams;

namespace {

ModelConfig tiny_config(bool proto) { return {12, 8, 8, 4, proto}; }

data::StoryCase random_case(std::mt19937_64 &rng, int photos, int feature_dim, int vocab, int length) {
    data::StoryCase c;
    c.id = "case";
    c.topic = "t";
    std::normal_distribution<double> g(0.0, 1.0);
    c.features.resize(photos, feature_dim);
    for (Eigen::Index i = 0; i < c.features.size(); ++i) {
        c.features.data()[i] = g(rng);
    }
    std::uniform_int_distribution<int> tok(data::kNumSpecials, vocab - 1);
    for (int i = 0; i < length - 1; ++i) {
        c.tokens.push_back(tok(rng));
    }
    c.tokens.push_back(data::kEos);
    return c;
}

Var col(std::initializer_list<double> v) {
    Matrix m(static_cast<Eigen::Index>(v.size()), 1);
    Eigen::Index i = 0;
    for (double x : v) {
        m(i++, 0) = x;
    }
    return Var(m);
}

std::string slurp(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

TEST_CASE("photo stream encoder shape, fixed point and determinism") {
    auto rng = fork_rng(1, "model-test");
    const ModelConfig cfg = tiny_config(false);
    const auto c = random_case(rng, 5, cfg.feature_dim, cfg.vocab, 6);

    const auto p = ModelParams::random(cfg, rng);
    const auto out = model::encode_photo_stream(p, c.features);
    REQUIRE(out.states.size() == 5);
    CHECK(out.final.value() == out.states.back().value());
    CHECK(out.final.rows() == cfg.hidden);
    CHECK(model::encode_photo_stream(p, c.features).final.value() == out.final.value());

    const auto z = ModelParams::zeros(cfg);
    for (const auto &s : model::encode_photo_stream(z, Matrix::Zero(5, cfg.feature_dim)).states) {
        CHECK(s.value().isZero(0.0));
    }
    CHECK_THROWS(model::encode_photo_stream(p, Matrix::Zero(5, cfg.feature_dim + 1)));
    CHECK_THROWS(model::encode_photo_stream(p, Matrix::Zero(0, cfg.feature_dim)));
}

TEST_CASE("attention") {
    SUBCASE("singleton") {
        const std::vector<Var> k{col({0.3, -2.0})};
        const std::vector<Var> v{col({4.0, 5.0, 6.0})};
        const auto r = model::attention(col({1.0, 1.0}), k, v);
        CHECK(r.output.value() == v[0].value());
        CHECK(r.weights.item() == 1.0);
    }
    SUBCASE("orthogonal query gives the mean") {
        const std::vector<Var> k{col({0.0, 1.0}), col({0.0, -3.0}), col({0.0, 2.0})};
        const std::vector<Var> v{col({1.0}), col({2.0}), col({6.0})};
        const auto r = model::attention(col({1.0, 0.0}), k, v);
        CHECK(r.output.item() == doctest::Approx(3.0).epsilon(1e-14));
    }
    SUBCASE("hand softmax") {
        const std::vector<Var> k{col({std::log(4.0)}), col({0.0})};
        const std::vector<Var> v{col({1.0}), col({0.0})};
        const auto r = model::attention(col({1.0}), k, v);
        CHECK(std::abs(r.output.item() - 0.8) < 1e-12);
        CHECK(std::abs(r.weights.value()(0, 1) - 0.2) < 1e-12);
    }
    SUBCASE("errors") {
        const std::vector<Var> none;
        CHECK_THROWS(model::attention(col({1.0}), none, none));
        const std::vector<Var> k{col({1.0, 2.0})};
        CHECK_THROWS(model::attention(col({1.0}), k, k));
    }
}

TEST_CASE("story text encoder") {
    auto rng = fork_rng(2, "model-test");
    const ModelConfig cfg = tiny_config(true);
    const std::vector<int> one{5};
    const std::vector<int> two{5, 7};
    CHECK(model::encode_story_text(ModelParams::zeros(cfg), two).value().isZero(0.0));
    const auto p = ModelParams::random(cfg, rng, 0.5);
    const auto a = model::encode_story_text(p, one);
    const auto b = model::encode_story_text(p, two);
    CHECK(a.rows() == cfg.hidden);
    CHECK(b.rows() == cfg.hidden);
    CHECK(a.value() != b.value());
    CHECK_THROWS(model::encode_story_text(p, std::vector<int>{}));
    CHECK_THROWS(model::encode_story_text(p, std::vector<int>{cfg.vocab}));
}

TEST_CASE("prototype fusion") {
    const std::vector<Var> one_key{col({0.5, -1.0})};
    const std::vector<Var> one_story{col({0.25, 0.5, -0.75})};
    const auto single = model::fuse_prototype(col({2.0, 3.0}), one_key, one_story);
    CHECK(single.vector.value() == one_story[0].value());
    CHECK(single.attention_weights.item() == 1.0);

    const std::vector<Var> same_keys{col({1.0, 1.0}), col({1.0, 1.0})};
    const std::vector<Var> stories{col({2.0, 0.0}), col({0.0, 4.0})};
    const auto mean = model::fuse_prototype(col({0.3, 0.7}), same_keys, stories);
    CHECK(mean.vector.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(mean.vector.value()(1, 0) == doctest::Approx(2.0).epsilon(1e-14));

    // Scores 2/sqrt(2) and 0 -> weights e^√2/(e^√2+1) and 1/(e^√2+1).
    const std::vector<Var> keys{col({1.0, 1.0}), col({1.0, -1.0})};
    const auto fused = model::fuse_prototype(col({1.0, 1.0}), keys, stories);
    const double w0 = std::exp(std::sqrt(2.0)) / (std::exp(std::sqrt(2.0)) + 1.0);
    CHECK(std::abs(fused.vector.value()(0, 0) - 2.0 * w0) < 1e-12);
    CHECK(std::abs(fused.vector.value()(1, 0) - 4.0 * (1.0 - w0)) < 1e-12);
    CHECK(std::abs(fused.attention_weights.value().sum() - 1.0) < 1e-12);

    const std::vector<Var> none;
    CHECK_THROWS(model::fuse_prototype(col({1.0}), none, none));
}

TEST_CASE("decoder initialisation") {
    auto rng = fork_rng(3, "model-test");
    ModelConfig cfg = tiny_config(false);
    const auto zeros = ModelParams::zeros(cfg);
    std::vector<Var> tensors(zeros.tensors().begin(), zeros.tensors().end());
    const auto names = ModelParams::names(cfg);
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == "init.weight") {
            tensors[i] = Var(Matrix::Identity(cfg.hidden, cfg.hidden));
        }
        if (names[i] == "init.bias") {
            tensors[i] = Var(Matrix::Constant(cfg.hidden, 1, 0.0));
        }
    }
    const auto identity = ModelParams::from_tensors(cfg, tensors);
    Var v(Matrix::Random(cfg.hidden, 1));
    CHECK(model::init_decoder(identity, v, std::nullopt).value() == v.value());

    auto zero = ModelParams::zeros(cfg);
    CHECK(model::init_decoder(zero, v, std::nullopt).value() == zero.init_bias().value());
    CHECK_THROWS(model::init_decoder(zero, v, v));

    const auto proto_params = ModelParams::random(tiny_config(true), rng);
    Var p1(Matrix::Random(cfg.hidden, 1));
    Var p2(Matrix::Random(cfg.hidden, 1));
    CHECK(model::init_decoder(proto_params, v, p1).value() != model::init_decoder(proto_params, v, p2).value());
    CHECK_THROWS(model::init_decoder(proto_params, v, std::nullopt));
}

TEST_CASE("decode step with zero parameters is uniform") {
    const ModelConfig cfg = tiny_config(false);
    const auto z = ModelParams::zeros(cfg);
    const auto enc = model::encode_photo_stream(z, Matrix::Zero(3, cfg.feature_dim));
    const auto memory = model::AttentionMemory::build(enc.states, enc.states);
    const auto step = model::decode_step(z, Var::zeros(cfg.hidden, 1), data::kBos, memory);
    CHECK(step.logits.rows() == cfg.vocab);
    CHECK(step.logits.cols() == 1);
    const std::vector<int> target{7};
    const double nll = ad::cross_entropy(ad::transpose(step.logits), target).item();
    CHECK(std::abs(nll - std::log(12.0)) < 1e-12);
    CHECK_THROWS(model::decode_step(z, Var::zeros(cfg.hidden, 1), cfg.vocab, memory));
}

TEST_CASE("story nll with zero parameters and additivity") {
    auto rng = fork_rng(4, "model-test");
    const ModelConfig cfg = tiny_config(false);
    const auto z = ModelParams::zeros(cfg);
    auto c = random_case(rng, 3, cfg.feature_dim, cfg.vocab, 7);
    const double once = model::story_nll(z, c).item();
    CHECK(std::abs(once - 7.0 * std::log(12.0)) < 1e-10);

    auto doubled = c;
    doubled.tokens.insert(doubled.tokens.end(), c.tokens.begin(), c.tokens.end());
    CHECK(std::abs(model::story_nll(z, doubled).item() - 2.0 * once) < 1e-10);

    auto bad = c;
    bad.tokens.pop_back();
    CHECK_THROWS(model::story_nll(z, bad));
}

TEST_CASE("story nll is sensitive to photo order and prototype") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto rng = fork_rng(seed, "order");
        const ModelConfig cfg = tiny_config(false);
        const auto p = ModelParams::random(cfg, rng, 0.5);
        auto c = random_case(rng, 3, cfg.feature_dim, cfg.vocab, 6);
        const double base = model::story_nll(p, c).item();
        CHECK(base >= 0.0);
        c.features.row(0).swap(c.features.row(2));
        CHECK(model::story_nll(p, c).item() != base);

        const auto pp = ModelParams::random(tiny_config(true), rng, 0.5);
        std::vector<data::StoryCase> support{random_case(rng, 3, 4, 12, 5), random_case(rng, 3, 4, 12, 6)};
        const auto ctx = model::encode_support(pp, support);
        auto zero_ctx = ctx;
        for (auto &s : zero_ctx.stories) {
            s = Var::zeros(s.rows(), 1);
        }
        CHECK(model::story_nll(pp, c, ctx).item() != model::story_nll(pp, c, zero_ctx).item());

        // A single support story: the prototype is that story vector.
        std::vector<data::StoryCase> one{support[0]};
        const auto one_ctx = model::encode_support(pp, one);
        const auto v = model::encode_photo_stream(pp, c.features).final;
        const auto proto = model::fuse_prototype(v, one_ctx.visuals, one_ctx.stories);
        CHECK(proto.vector.value() == one_ctx.stories[0].value());
    }
}

TEST_CASE("story nll gradients match finite differences") {
    for (bool proto : {false, true}) {
        CAPTURE(proto);
        auto rng = fork_rng(proto ? 6 : 5, "fd");
        const ModelConfig cfg = tiny_config(proto);
        const auto p = ModelParams::random(cfg, rng, 0.5);
        const auto c = random_case(rng, 3, cfg.feature_dim, cfg.vocab, 6);
        std::vector<data::StoryCase> support{random_case(rng, 3, 4, 12, 5), random_case(rng, 3, 4, 12, 4)};

        auto loss_of = [&](const ModelParams &params) {
            std::optional<model::SupportContext> ctx;
            if (proto) {
                ctx = model::encode_support(params, support);
            }
            return model::story_nll(params, c, ctx);
        };
        const auto grads = ad::gradient(loss_of(p), p.tensors());
        const auto numeric = testing::finite_difference(
            [&](const std::vector<Matrix> &values) {
                ad::GradMode off(false);
                return loss_of(ModelParams::from_tensors(cfg, testing::leaves_from(values))).item();
            },
            testing::values_of(p.tensors()));
        const auto names = ModelParams::names(cfg);
        for (std::size_t i = 0; i < grads.size(); ++i) {
            CAPTURE(names[i]);
            CHECK(testing::relative_error(grads[i].value(), numeric[i]) < 1e-4);
        }
    }
}

TEST_CASE("checkpoint round trip is exact and byte stable") {
    auto rng = fork_rng(7, "ckpt");
    model::Checkpoint ck;
    ck.config = tiny_config(true);
    ck.vocab = {"<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "c", "d", "e", "f", "g", "h"};
    ck.metadata = {{"mode", "tavs"}, {"seed", "7"}};
    ck.params = ModelParams::random(ck.config, rng);

    const auto dir = std::filesystem::temp_directory_path();
    const auto a = (dir / "tavs_ckpt_a.bin").string();
    const auto b = (dir / "tavs_ckpt_b.bin").string();
    model::save_checkpoint(a, ck);
    const auto back = model::load_checkpoint(a);
    CHECK(back.config == ck.config);
    CHECK(back.vocab == ck.vocab);
    CHECK(back.metadata == ck.metadata);
    REQUIRE(back.params.size() == ck.params.size());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        CHECK(back.params.tensors()[i].value() == ck.params.tensors()[i].value());
    }
    model::save_checkpoint(b, back);
    CHECK(slurp(a) == slurp(b));

    std::ofstream(b, std::ios::binary) << "not a checkpoint";
    CHECK_THROWS(model::load_checkpoint(b));
    std::filesystem::remove(a);
    std::filesystem::remove(b);
}
