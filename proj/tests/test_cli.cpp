#include "tavs/model.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path &workdir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "tavs_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string path(const std::string &name) { return (workdir() / name).string(); }

std::string slurp(const std::string &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

int run(const std::string &args, const std::string &err_file = "stderr.txt") {
    const std::string cmd = "cd '" + workdir().string() + "' && '" TAVS_BIN "' " + args + " >stdout.txt 2>" + err_file;
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string kTiny = "--iterations 2 --hidden 6 --emb-dim 6 --train-topics 4 --topics-per-batch 2 --k-shot 2 "
                          "--inner-steps 1";

void ensure_dataset() {
    static bool done = false;
    if (!done) {
        REQUIRE(run("synth --topics 6 --stories-per-topic 12 --seed 7 --out d.jsonl") == 0);
        done = true;
    }
}

} // namespace

TEST_CASE("synth is byte-identical for a fixed seed") {
    REQUIRE(run("synth --topics 8 --stories-per-topic 40 --seed 7 --out a.jsonl") == 0);
    REQUIRE(run("synth --topics 8 --stories-per-topic 40 --seed 7 --out b.jsonl") == 0);
    CHECK(slurp(path("a.jsonl")) == slurp(path("b.jsonl")));
    REQUIRE(run("synth --topics 8 --stories-per-topic 40 --seed 8 --out c.jsonl") == 0);
    CHECK(slurp(path("a.jsonl")) != slurp(path("c.jsonl")));
}

TEST_CASE("training is reproducible and echoes the config") {
    ensure_dataset();
    REQUIRE(run("train --data d.jsonl --mode tavs --out m1.ckpt --report r1.txt " + kTiny) == 0);
    REQUIRE(run("train --data d.jsonl --mode tavs --out m2.ckpt --report r2.txt " + kTiny) == 0);
    CHECK(slurp(path("m1.ckpt")) == slurp(path("m2.ckpt")));
    const auto report = slurp(path("r1.txt"));
    CHECK(report == slurp(path("r2.txt")));
    CHECK(report.find("config.mode=tavs\n") != std::string::npos);
    CHECK(report.find("config.meta_lr=0.001\n") != std::string::npos);
    CHECK(report.find("config.inner_lr=0.050000000000000003\n") != std::string::npos);
    CHECK(report.find("config.dropout=0.20000000000000001\n") != std::string::npos);
    CHECK(report.find("config.outer=adam\n") != std::string::npos);
}

TEST_CASE("zero adaptation steps leave the checkpoint unchanged") {
    ensure_dataset();
    REQUIRE(run("train --data d.jsonl --mode tavs --out m.ckpt " + kTiny) == 0);
    REQUIRE(run("adapt --checkpoint m.ckpt --support d.jsonl --steps 0 --out a0.ckpt") == 0);
    REQUIRE(run("adapt --checkpoint m.ckpt --support d.jsonl --steps 1 --out a1.ckpt") == 0);
    const auto base = tavs::model::load_checkpoint(path("m.ckpt"));
    const auto same = tavs::model::load_checkpoint(path("a0.ckpt"));
    const auto moved = tavs::model::load_checkpoint(path("a1.ckpt"));
    REQUIRE(base.params.size() == same.params.size());
    bool any_moved = false;
    for (std::size_t i = 0; i < base.params.size(); ++i) {
        CHECK(base.params.tensors()[i].value() == same.params.tensors()[i].value());
        any_moved = any_moved || base.params.tensors()[i].value() != moved.params.tensors()[i].value();
    }
    CHECK(any_moved);
    CHECK(base.params.embedding().value() == moved.params.embedding().value());
    CHECK(base.vocab == same.vocab);
}

TEST_CASE("config file sits between flags and defaults") {
    ensure_dataset();
    std::ofstream(path("run.cfg")) << "# tiny run\nhidden=6\nemb_dim = 6\niterations=3\nmode=meta\n"
                                      "train-topics=4\ntopics_per_batch=2\nk_shot=2\ninner_steps=1\n";
    REQUIRE(run("train --config run.cfg --data d.jsonl --out c.ckpt --report c.txt --iterations 1") == 0);
    const auto report = slurp(path("c.txt"));
    CHECK(report.find("config.iterations=1\n") != std::string::npos);
    CHECK(report.find("config.hidden=6\n") != std::string::npos);
    CHECK(report.find("config.mode=meta\n") != std::string::npos);
    CHECK(report.find("config.grad_clip=10\n") != std::string::npos);

    std::ofstream(path("bad.cfg")) << "hidden=6\nwidth=3\n";
    CHECK(run("train --config bad.cfg --data d.jsonl --out x.ckpt") != 0);
    CHECK(slurp(path("stderr.txt")).find("width") != std::string::npos);
}

TEST_CASE("evaluate reports repetition of duplicated stories") {
    std::ofstream(path("dup.jsonl")) << R"({"id":"s1","topic":"t","text":"a b c d","log_prob":-1.0})" << "\n"
                                      << R"({"id":"s2","topic":"t","text":"a b c d","log_prob":-1.0})" << "\n";
    REQUIRE(run("evaluate --generated dup.jsonl --orders 4 --out e.txt") == 0);
    const auto report = slurp(path("e.txt"));
    CHECK(report.find("inter_rep_4=0.5\n") != std::string::npos);
    CHECK(report.find("dist_4=0.5\n") != std::string::npos);
    REQUIRE(run("evaluate --generated dup.jsonl --orders 4") == 0);
    CHECK(slurp(path("stdout.txt")) == report);
}

TEST_CASE("generation and the sweep are reproducible") {
    ensure_dataset();
    REQUIRE(run("train --data d.jsonl --mode tavs --out g.ckpt " + kTiny) == 0);
    {
        std::ifstream in(path("d.jsonl"));
        std::ofstream sup(path("sup.jsonl"));
        std::ofstream qry(path("qry.jsonl"));
        std::string line;
        int n = 0;
        while (std::getline(in, line)) {
            if (n == 0) {
                sup << line << "\n";
                qry << line << "\n";
            } else if (line.find("\"topic04\"") != std::string::npos) {
                (n % 2 ? sup : qry) << line << "\n";
            }
            ++n;
        }
    }
    REQUIRE(run("generate --checkpoint g.ckpt --data qry.jsonl --support sup.jsonl --out g1.jsonl") == 0);
    REQUIRE(run("generate --checkpoint g.ckpt --data qry.jsonl --support sup.jsonl --out g2.jsonl") == 0);
    CHECK(!slurp(path("g1.jsonl")).empty());
    CHECK(slurp(path("g1.jsonl")) == slurp(path("g2.jsonl")));
    CHECK(run("generate --checkpoint g.ckpt --data qry.jsonl --out g3.jsonl") != 0);

    REQUIRE(run("sweep-ulr --checkpoint g.ckpt --data d.jsonl --k-shot 2 --episodes-per-topic 1 --out s1.txt") == 0);
    REQUIRE(run("sweep-ulr --checkpoint g.ckpt --data d.jsonl --k-shot 2 --episodes-per-topic 1 --out s2.txt") == 0);
    const auto sweep = slurp(path("s1.txt"));
    CHECK(sweep == slurp(path("s2.txt")));
    CHECK(sweep.find("rates=5\n") != std::string::npos);
    CHECK(sweep.find("ulr.4.inner_lr=0.10000000000000001\n") != std::string::npos);
}

TEST_CASE("divergent learning rates are recorded, not fatal") {
    ensure_dataset();
    REQUIRE(run("train --data d.jsonl --mode meta --out v.ckpt " + kTiny) == 0);
    REQUIRE(run("sweep-ulr --checkpoint v.ckpt --data d.jsonl --k-shot 2 --episodes-per-topic 1 --rates 1e300,0.05 "
                "--out v.txt") == 0);
    const auto report = slurp(path("v.txt"));
    CHECK(report.find("ulr.0.diverged=2\n") != std::string::npos);
    CHECK(report.find("ulr.0.episode.0.diverged=") != std::string::npos);
    CHECK(report.find("ulr.1.diverged=0\n") != std::string::npos);
}

TEST_CASE("bad invocations exit nonzero") {
    ensure_dataset();
    CHECK(run("synth --out z.jsonl --no-such-flag 3") != 0);
    CHECK(slurp(path("stderr.txt")).find("Usage") != std::string::npos);
    CHECK(run("frobnicate") != 0);
    CHECK(slurp(path("stderr.txt")).find("Usage") != std::string::npos);
    CHECK(run("train --data d.jsonl --out z.ckpt --mode fancy") != 0);
    CHECK(slurp(path("stderr.txt")).find("mode") != std::string::npos);
    CHECK(run("train --data d.jsonl --out z.ckpt --k-shot 0") != 0);
    CHECK(slurp(path("stderr.txt")).find("k") != std::string::npos);
    CHECK(run("train --data missing.jsonl --out z.ckpt") != 0);
    CHECK(slurp(path("stderr.txt")).find("missing.jsonl") != std::string::npos);
    CHECK(run("evaluate --generated dup.jsonl --orders 0") != 0);
}
