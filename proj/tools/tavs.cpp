#include "tavs/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace tavs;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("tavs");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    spdlog::set_level(spdlog::level::warn);
    if (const char *env = std::getenv("TAVS_LOG")) {
        spdlog::set_level(spdlog::level::from_str(env));
    }
}

// Flat key=value file; keys name the subcommand's long flags, with '_' or '-'.
// Values only fill options not given on the command line.
void apply_config_file(CLI::App &sub, const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read config file " + path);
    }
    for (const auto &item : CLI::ConfigINI().from_config(in)) {
        if (!item.parents.empty()) {
            throw UsageError("config " + path + ": sections are not supported ('" + item.fullname() + "')");
        }
        std::string name = item.name;
        for (auto &c : name) {
            c = c == '_' ? '-' : c;
        }
        auto *opt = name == "config" ? nullptr : sub.get_option_no_throw("--" + name);
        if (!opt) {
            throw UsageError("config " + path + ": unknown key '" + item.name + "' for " + sub.get_name());
        }
        if (opt->count() == 0) {
            opt->add_result(item.inputs);
            opt->run_callback();
        }
    }
}

void require_file(const std::string &path, const std::string &what) {
    if (!std::ifstream(path)) {
        throw std::runtime_error(what + " not found: " + path);
    }
}

std::vector<int> parse_orders(const std::string &text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const int n = std::stoi(item, &used);
            if (used != item.size() || n < 1) {
                throw std::invalid_argument(item);
            }
            out.push_back(n);
        } catch (const std::exception &) {
            throw UsageError("orders: expected a comma-separated list of positive integers, got '" + text + "'");
        }
    }
    if (out.empty()) {
        throw UsageError("orders: empty list");
    }
    return out;
}

void add_hyper_options(CLI::App *sub, meta::HyperParams &hp, std::string &outer) {
    sub->add_option("--inner-lr", hp.inner_lr, "Inner update learning rate")->capture_default_str();
    sub->add_option("--meta-lr", hp.meta_lr, "Outer learning rate")->capture_default_str();
    sub->add_option("--inner-steps", hp.inner_steps, "Inner update steps M")->capture_default_str();
    sub->add_option("--topics-per-batch", hp.topics_per_batch, "Topics per meta batch N")->capture_default_str();
    sub->add_option("--k-shot", hp.k_shot, "Support and query size K")->capture_default_str();
    sub->add_option("--grad-clip", hp.grad_clip, "Global-norm clip of the outer gradient")->capture_default_str();
    sub->add_option("--dropout", hp.dropout, "Dropout rate during training")->capture_default_str();
    sub->add_option("--second-order", hp.second_order, "Differentiate through inner updates")
        ->capture_default_str();
    sub->add_option("--freeze-embedding", hp.freeze_embedding_inner, "Keep the embedding fixed in inner updates")
        ->capture_default_str();
    sub->add_option("--outer", outer, "Outer optimiser: adam or sgd")->capture_default_str();
    sub->add_option("--seed", hp.seed, "Run seed")->capture_default_str();
}

data::Dataset load(const std::string &path, const data::LoadOptions &options) {
    require_file(path, "dataset");
    auto ds = data::load_dataset(path, options);
    if (ds.dropped > 0) {
        spdlog::info("{}: dropped {} stories outside the length bounds", path, ds.dropped);
    }
    return ds;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

int main(int argc, char **argv) {
    setup_logging();
    CLI::App app{"Topic-adaptive few-shot story generation"};
    app.require_subcommand(1);

    // synth
    int synth_topics = 12;
    int synth_per_topic = 40;
    int synth_photos = 5;
    int synth_dim = 8;
    std::uint64_t synth_seed = 0;
    std::string synth_out;
    auto *synth = app.add_subcommand("synth", "Write a synthetic topic-structured dataset");
    synth->add_option("--topics", synth_topics, "Number of topics")->capture_default_str();
    synth->add_option("--stories-per-topic", synth_per_topic, "Stories per topic")->capture_default_str();
    synth->add_option("--photos", synth_photos, "Photos per story")->capture_default_str();
    synth->add_option("--feature-dim", synth_dim, "Photo feature dimension")->capture_default_str();
    synth->add_option("--seed", synth_seed, "Seed")->capture_default_str();
    synth->add_option("--out", synth_out, "Output dataset")->required();

    // train
    pipeline::TrainConfig tc;
    std::string train_mode = pipeline::to_string(tc.mode);
    std::string train_outer = pipeline::to_string(tc.hp.outer);
    std::string train_data;
    std::string train_out;
    std::string train_report;
    auto *train = app.add_subcommand("train", "Train a model in one of the four settings");
    train->add_option("--data", train_data, "Dataset")->required();
    train->add_option("--out", train_out, "Output checkpoint")->required();
    train->add_option("--report", train_report, "Run report (key=value)");
    train->add_option("--mode", train_mode, "supervised, proto_supervised, meta or tavs")->capture_default_str();
    train->add_option("--iterations", tc.iterations, "Outer iterations")->capture_default_str();
    train->add_option("--emb-dim", tc.emb_dim, "Word embedding size")->capture_default_str();
    train->add_option("--hidden", tc.hidden, "GRU hidden size")->capture_default_str();
    train->add_option("--init-scale", tc.init_scale, "Initial weight scale")->capture_default_str();
    train->add_option("--min-freq", tc.min_freq, "Vocabulary frequency cutoff")->capture_default_str();
    train->add_option("--train-topics", tc.train_topics, "Most frequent topics used for training")
        ->capture_default_str();
    train->add_option("--min-tokens", tc.load.min_tokens, "Drop shorter stories")->capture_default_str();
    train->add_option("--max-tokens", tc.load.max_tokens, "Drop longer stories")->capture_default_str();
    add_hyper_options(train, tc.hp, train_outer);

    // adapt
    std::string adapt_ckpt;
    std::string adapt_support;
    std::string adapt_out;
    std::string adapt_report;
    meta::HyperParams adapt_hp;
    bool adapt_freeze = true;
    data::LoadOptions adapt_load;
    auto *adapt = app.add_subcommand("adapt", "Apply inner updates on a support set to a checkpoint");
    adapt->add_option("--checkpoint", adapt_ckpt, "Input checkpoint")->required();
    adapt->add_option("--support", adapt_support, "Support dataset")->required();
    adapt->add_option("--out", adapt_out, "Adapted checkpoint")->required();
    adapt->add_option("--report", adapt_report, "Run report (key=value)");
    adapt->add_option("--steps", adapt_hp.inner_steps, "Inner update steps")->capture_default_str();
    adapt->add_option("--inner-lr", adapt_hp.inner_lr, "Inner update learning rate")->capture_default_str();
    adapt->add_option("--freeze-embedding", adapt_freeze, "Keep the embedding fixed")->capture_default_str();
    adapt->add_option("--min-tokens", adapt_load.min_tokens, "Drop shorter stories")->capture_default_str();
    adapt->add_option("--max-tokens", adapt_load.max_tokens, "Drop longer stories")->capture_default_str();

    // generate
    std::string gen_ckpt;
    std::string gen_data;
    std::string gen_support;
    std::string gen_out;
    decode::BeamOptions gen_beam;
    data::LoadOptions gen_load;
    gen_load.min_tokens = 0;
    auto *generate = app.add_subcommand("generate", "Write stories for photo streams with beam search");
    generate->add_option("--checkpoint", gen_ckpt, "Checkpoint")->required();
    generate->add_option("--data", gen_data, "Dataset of photo streams")->required();
    generate->add_option("--support", gen_support, "Support dataset for prototype models");
    generate->add_option("--out", gen_out, "Output stories (JSON lines)")->required();
    generate->add_option("--beam", gen_beam.beam, "Beam size")->capture_default_str();
    generate->add_option("--max-len", gen_beam.max_len, "Maximum story length in tokens")->capture_default_str();
    generate->add_option("--length-normalize", gen_beam.length_normalize, "Rank by mean token log-prob")
        ->capture_default_str();
    generate->add_option("--include-greedy", gen_beam.include_greedy, "Offer the greedy story as a candidate")
        ->capture_default_str();
    generate->add_option("--min-tokens", gen_load.min_tokens, "Drop shorter stories")->capture_default_str();
    generate->add_option("--max-tokens", gen_load.max_tokens, "Drop longer stories")->capture_default_str();

    // evaluate
    std::string eval_generated;
    std::string eval_refs;
    std::string eval_clf;
    std::string eval_orders = "1,2,3,4";
    std::string eval_out;
    auto *evaluate = app.add_subcommand("evaluate", "Diversity, BLEU and topic metrics for generated stories");
    evaluate->add_option("--generated", eval_generated, "Generated stories (JSON lines)")->required();
    evaluate->add_option("--references", eval_refs, "Reference dataset, matched by id, for BLEU");
    evaluate->add_option("--classifier-data", eval_clf, "Labelled dataset for the topic classifier");
    evaluate->add_option("--orders", eval_orders, "n-gram orders")->capture_default_str();
    evaluate->add_option("--out", eval_out, "Metrics report (key=value); stdout when absent");

    // sweep-ulr
    std::string sweep_ckpt;
    std::string sweep_data;
    std::string sweep_out;
    pipeline::SweepConfig sweep_cfg;
    meta::HyperParams sweep_hp;
    int sweep_train_topics = 8;
    auto *sweep = app.add_subcommand("sweep-ulr", "Adapt and evaluate held-out topics over inner learning rates");
    sweep->add_option("--checkpoint", sweep_ckpt, "Checkpoint")->required();
    sweep->add_option("--data", sweep_data, "Dataset")->required();
    sweep->add_option("--out", sweep_out, "Sweep report (key=value)")->required();
    sweep->add_option("--rates", sweep_cfg.inner_lrs, "Inner learning rates")->delimiter(',')->capture_default_str();
    sweep->add_option("--episodes-per-topic", sweep_cfg.episodes_per_topic, "Episodes per held-out topic")
        ->capture_default_str();
    sweep->add_option("--steps", sweep_hp.inner_steps, "Inner update steps")->capture_default_str();
    sweep->add_option("--k-shot", sweep_hp.k_shot, "Support and query size K")->capture_default_str();
    sweep->add_option("--seed", sweep_hp.seed, "Episode sampling seed")->capture_default_str();
    sweep->add_option("--beam", sweep_cfg.beam.beam, "Beam size")->capture_default_str();
    sweep->add_option("--max-len", sweep_cfg.beam.max_len, "Maximum story length")->capture_default_str();
    sweep->add_option("--train-topics", sweep_train_topics, "Training topic count; defaults to the checkpoint's")
        ->capture_default_str();

    std::vector<CLI::App *> subs{synth, train, adapt, generate, evaluate, sweep};
    std::vector<std::string> config_paths(subs.size());
    for (std::size_t i = 0; i < subs.size(); ++i) {
        subs[i]->add_option("--config", config_paths[i], "key=value file; flags take precedence");
    }

    CLI::App *active = &app;
    try {
        app.parse(argc, argv);
        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (subs[i]->parsed()) {
                active = subs[i];
                if (!config_paths[i].empty()) {
                    apply_config_file(*subs[i], config_paths[i]);
                }
            }
        }
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        for (auto *s : subs) {
            if (s->parsed()) {
                active = s;
            }
        }
        std::cerr << "error: " << e.what() << "\n\n" << active->help();
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n\n" << active->help();
        return 2;
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (synth->parsed()) {
            const auto specs = data::make_synthetic_specs(synth_topics, synth_dim, synth_seed);
            const auto records = data::synth_generate(specs, synth_per_topic, synth_photos, synth_dim, synth_seed);
            data::save_dataset(synth_out, {data::kSchemaVersion, synth_photos, synth_dim}, records);
            spdlog::info("wrote {} stories to {}", records.size(), synth_out);
        } else if (train->parsed()) {
            tc.mode = pipeline::parse_mode(train_mode);
            tc.hp.outer = pipeline::parse_outer(train_outer);
            tc.validate();
            auto corpus = pipeline::prepare_corpus(load(train_data, tc.load), tc.min_freq, tc.train_topics);
            spdlog::info("vocab {} tokens, {} training topics, {} held out", corpus.vocab.size(),
                         corpus.split.train.size(), corpus.split.test.size());
            const auto result = pipeline::train(corpus, tc);
            model::save_checkpoint(train_out, result.checkpoint);
            pipeline::Report r;
            r.add_all("config.", tc.describe());
            r.add("data", train_data);
            r.add("vocab", corpus.vocab.size());
            r.add("train_topics", result.checkpoint.metadata.at("train_topics"));
            r.add("test_topics", result.checkpoint.metadata.at("test_topics"));
            r.add("final_loss", result.losses.empty() ? 0.0 : result.losses.back());
            for (std::size_t i = 0; i < result.losses.size(); ++i) {
                r.add("loss." + std::to_string(i), result.losses[i]);
            }
            if (!train_report.empty()) {
                r.save(train_report);
            }
            spdlog::info("trained {} iterations in {:.1f}s", tc.iterations, elapsed(t0));
        } else if (adapt->parsed()) {
            require_file(adapt_ckpt, "checkpoint");
            auto ckpt = model::load_checkpoint(adapt_ckpt);
            const auto vocab = data::Vocabulary::from_tokens(ckpt.vocab);
            adapt_hp.freeze_embedding_inner = adapt_freeze;
            adapt_hp.dropout = 0.0;
            adapt_hp.validate();
            const auto support = data::to_cases(load(adapt_support, adapt_load).records, vocab);
            if (support.empty()) {
                throw std::runtime_error("support set is empty after filtering");
            }
            std::vector<double> losses;
            ckpt.params = meta::inner_adapt(ckpt.params, support, adapt_hp, false, nullptr, &losses).detached();
            if (!ckpt.params.all_finite()) {
                throw meta::DivergenceError("adaptation produced non-finite parameters");
            }
            ckpt.metadata["adapt.steps"] = std::to_string(adapt_hp.inner_steps);
            ckpt.metadata["adapt.inner_lr"] = pipeline::format_double(adapt_hp.inner_lr);
            model::save_checkpoint(adapt_out, ckpt);
            if (!adapt_report.empty()) {
                pipeline::Report r;
                r.add("config.checkpoint", adapt_ckpt);
                r.add("config.support", adapt_support);
                r.add("config.steps", adapt_hp.inner_steps);
                r.add("config.inner_lr", adapt_hp.inner_lr);
                r.add("config.freeze_embedding", adapt_freeze);
                r.add("support_cases", static_cast<long>(support.size()));
                for (std::size_t i = 0; i < losses.size(); ++i) {
                    r.add("support_loss." + std::to_string(i), losses[i]);
                }
                r.save(adapt_report);
            }
        } else if (generate->parsed()) {
            require_file(gen_ckpt, "checkpoint");
            const auto ckpt = model::load_checkpoint(gen_ckpt);
            const auto vocab = data::Vocabulary::from_tokens(ckpt.vocab);
            const auto cases = data::to_cases(load(gen_data, gen_load).records, vocab);
            std::vector<data::StoryCase> support;
            if (!gen_support.empty()) {
                support = data::to_cases(load(gen_support, gen_load).records, vocab);
            }
            const auto stories = pipeline::generate(ckpt.params, vocab, cases, support, gen_beam);
            decode::save_generated(gen_out, stories);
            spdlog::info("generated {} stories in {:.1f}s", stories.size(), elapsed(t0));
        } else if (evaluate->parsed()) {
            require_file(eval_generated, "generated stories");
            pipeline::EvaluateInputs inputs;
            inputs.generated = decode::load_generated(eval_generated);
            inputs.orders = parse_orders(eval_orders);
            data::LoadOptions all;
            all.min_tokens = 0;
            all.max_tokens = 1 << 30;
            if (!eval_refs.empty()) {
                inputs.references = load(eval_refs, all).records;
            }
            if (!eval_clf.empty()) {
                inputs.classifier_corpus = load(eval_clf, all).records;
            }
            const auto text = pipeline::evaluate(inputs).to_text();
            if (eval_out.empty()) {
                std::cout << text;
            } else {
                std::ofstream(eval_out, std::ios::binary) << text;
            }
        } else if (sweep->parsed()) {
            require_file(sweep_ckpt, "checkpoint");
            const auto ckpt = model::load_checkpoint(sweep_ckpt);
            auto recorded = ckpt.metadata.find("config.train_topics");
            if (sweep->get_option("--train-topics")->count() == 0 && recorded != ckpt.metadata.end()) {
                sweep_train_topics = std::stoi(recorded->second);
            }
            sweep_hp.dropout = 0.0;
            sweep_hp.validate();
            auto corpus = pipeline::prepare_corpus(load(sweep_data, {}), data::Vocabulary::from_tokens(ckpt.vocab),
                                                   sweep_train_topics);
            const auto rows = pipeline::sweep_inner_lr(ckpt, corpus, sweep_hp, sweep_cfg);
            pipeline::Report r;
            r.add("config.checkpoint", sweep_ckpt);
            r.add("config.data", sweep_data);
            std::string rates;
            for (double lr : sweep_cfg.inner_lrs) {
                rates += (rates.empty() ? "" : ",") + pipeline::format_double(lr);
            }
            r.add("config.rates", rates);
            r.add("config.episodes_per_topic", sweep_cfg.episodes_per_topic);
            r.add("config.steps", sweep_hp.inner_steps);
            r.add("config.k_shot", sweep_hp.k_shot);
            r.add("config.seed", std::to_string(sweep_hp.seed));
            r.add("config.beam", sweep_cfg.beam.beam);
            r.add("config.max_len", sweep_cfg.beam.max_len);
            r.add_all("", pipeline::sweep_report(rows));
            r.save(sweep_out);
            for (const auto &row : rows) {
                if (row.adaptation.diverged > 0) {
                    spdlog::warn("inner_lr {}: {} of {} episodes diverged", row.inner_lr, row.adaptation.diverged,
                                 row.adaptation.rows.size());
                }
            }
        }
    } catch (const UsageError &e) {
        std::cerr << "error: " << e.what() << "\n\n" << active->help();
        return 2;
    } catch (const std::exception &e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
