// SPDX-License-Identifier: Apache-2.0

// evo: three-phase domain-evolution pipeline CLI.
//
//   corpus stats|split   inspect and split a question corpus
//   distill              phase 1: guideline-conditioned distillation
//   sft                  train the toy model on the distilled pairs
//   refine               phase 2: judge-driven iterative refinement
//   selfevolve           phase 3: beam-vs-greedy contrastive self-training
//   evaluate             pairwise or score evaluation (phase or standalone)
//   run-all              all five phases in order
//   resume               continue an interrupted run

#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "evo/corpus.hpp"
#include "evo/errors.hpp"
#include "evo/io.hpp"
#include "evo/judge.hpp"
#include "evo/pipeline.hpp"

namespace {

using namespace evo;

std::map<std::string, std::string> load_answers(const std::filesystem::path& path) {
    std::map<std::string, std::string> answers;
    for (const auto& j : io::read_jsonl(path)) {
        answers[j.at("question_id").get<std::string>()] = j.at("answer").get<std::string>();
    }
    return answers;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"domain-evolution training pipeline"};
    app.require_subcommand(1);

    // ---- corpus ----
    auto* corpus_cmd = app.add_subcommand("corpus", "corpus utilities");
    corpus_cmd->require_subcommand(1);

    std::string corpus_file;
    auto* stats_cmd = corpus_cmd->add_subcommand("stats", "per-category counts");
    stats_cmd->add_option("--corpus", corpus_file, "corpus file")->required();

    std::string split_out_train, split_out_test;
    std::size_t split_test_size = 1000;
    std::uint64_t split_seed = 0;
    auto* split_cmd = corpus_cmd->add_subcommand("split", "seeded train/test split");
    split_cmd->add_option("--corpus", corpus_file, "corpus file")->required();
    split_cmd->add_option("--test-size", split_test_size, "test split size");
    split_cmd->add_option("--seed", split_seed, "shuffle seed");
    split_cmd->add_option("--out-train", split_out_train, "train output file")->required();
    split_cmd->add_option("--out-test", split_out_test, "test output file")->required();

    // ---- shared phase options ----
    std::string config_path;
    std::string run_dir;
    bool force = false;

    auto add_run_options = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "pipeline config file")->required();
        cmd->add_option("--run-dir", run_dir, "run directory")->required();
        cmd->add_flag("--force", force, "rerun the phase even if done");
    };

    std::string ablation;

    auto* distill_cmd = app.add_subcommand("distill", "phase 1: distillation");
    add_run_options(distill_cmd);
    std::string distill_mode;
    std::size_t distill_limit = 0;
    bool distill_sequential = false;
    distill_cmd->add_option("--mode", distill_mode, "guided|direct");
    distill_cmd->add_option("--limit", distill_limit, "max questions");
    distill_cmd->add_flag("--sequential", distill_sequential, "disable fan-out");
    distill_cmd->add_option("--ablation", ablation,
                            "\"direct\": also distill without guidelines");

    auto* sft_cmd = app.add_subcommand("sft", "train the toy model on distilled pairs");
    add_run_options(sft_cmd);

    auto* refine_cmd = app.add_subcommand("refine", "phase 2: iterative refinement");
    refine_cmd->add_option("--config", config_path, "pipeline config file");
    refine_cmd->add_option("--run-dir", run_dir, "run directory")->required();
    refine_cmd->add_flag("--force", force, "rerun the phase even if done");
    int refine_max_iters = 0;
    int refine_buffer = 0;
    bool refine_resume = false;
    refine_cmd->add_option("--max-iters", refine_max_iters, "attempts per question (N)");
    refine_cmd->add_option("--buffer-size", refine_buffer, "training buffer size (K)");
    refine_cmd->add_flag("--resume", refine_resume,
                         "continue from the run dir's persisted state (config optional)");

    auto* sev_cmd = app.add_subcommand("selfevolve", "phase 3: contrastive self-training");
    add_run_options(sev_cmd);
    int sev_width = 0, sev_epochs = 0;
    double sev_lr = 0.0, sev_beta = 0.0;
    sev_cmd->add_option("--beam-width", sev_width, "beam width");
    sev_cmd->add_option("--epochs", sev_epochs, "contrastive epochs");
    sev_cmd->add_option("--lr", sev_lr, "learning rate");
    sev_cmd->add_option("--beta", sev_beta, "contrastive scale");

    auto* eval_cmd = app.add_subcommand("evaluate", "judge evaluation");
    eval_cmd->add_option("--config", config_path, "pipeline config file")->required();
    std::string eval_run_dir, answers_a_path, answers_b_path, eval_mode = "pairwise";
    eval_cmd->add_option("--run-dir", eval_run_dir, "run directory (phase mode)");
    eval_cmd->add_option("--answers-a", answers_a_path, "answers file A (standalone mode)");
    eval_cmd->add_option("--answers-b", answers_b_path, "answers file B (standalone mode)");
    eval_cmd->add_option("--mode", eval_mode, "pairwise|score");
    eval_cmd->add_flag("--force", force, "rerun the phase even if done");

    auto* runall_cmd = app.add_subcommand("run-all", "all five phases in order");
    add_run_options(runall_cmd);
    runall_cmd->add_option("--ablation", ablation,
                           "\"direct\": also distill without guidelines and score both "
                           "datasets");

    auto* resume_cmd = app.add_subcommand("resume", "continue an interrupted run");
    resume_cmd->add_option("--run-dir", run_dir, "run directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (stats_cmd->parsed()) {
        auto stats = corpus::category_stats(corpus::load_corpus(corpus_file));
        for (auto category : {corpus::Category::ml, corpus::Category::dl,
                              corpus::Category::nlp, corpus::Category::cv}) {
            std::cout << corpus::to_string(category) << ": "
                      << stats.count_per_category.at(category) << "\n";
        }
        std::cout << "total: " << stats.total << "\n";
        return 0;
    }
    if (split_cmd->parsed()) {
        auto questions = corpus::load_corpus(corpus_file);
        auto [train, test] = corpus::split_corpus(questions, split_test_size, split_seed);
        corpus::save_corpus(split_out_train, train);
        corpus::save_corpus(split_out_test, test);
        std::cout << "train: " << train.size() << "  test: " << test.size() << "\n";
        return 0;
    }

    if (resume_cmd->parsed()) {
        auto run = pipeline::Run::resume(run_dir);
        run.run_all();
        std::cout << "run " << run.manifest().run_id << " complete\n";
        return 0;
    }

    if (refine_cmd->parsed() && refine_resume) {
        auto run = pipeline::Run::resume(run_dir);
        run.run_phase(pipeline::Phase::refine, force);
        std::cout << "ok\n";
        return 0;
    }
    if (refine_cmd->parsed() && config_path.empty()) {
        throw ValidationError("refine needs --config (or --resume)");
    }

    if (eval_cmd->parsed() && !answers_a_path.empty()) {
        // Standalone evaluation over two answer files.
        if (answers_b_path.empty()) {
            throw ValidationError("--answers-b is required with --answers-a");
        }
        auto config = pipeline::load_config(config_path);
        if (config.corpus_file.empty()) {
            throw ValidationError("config has no corpus_file (needed for question text)");
        }
        auto questions = corpus::load_corpus(config.corpus_file);
        auto answers_a = load_answers(answers_a_path);
        auto answers_b = load_answers(answers_b_path);
        std::vector<corpus::DomainQuestion> covered;
        for (const auto& q : questions) {
            if (answers_a.count(q.id) && answers_b.count(q.id)) {
                covered.push_back(q);
            }
        }
        auto judge_backend = pipeline::make_backend(config.judge, "judge");
        backend::GenerationParams params;
        params.max_tokens = config.max_tokens;
        if (eval_mode == "pairwise") {
            auto report = judge::evaluate_pairwise(covered, answers_a, answers_b,
                                                   judge_backend, judge::SwapPolicy::none,
                                                   params);
            std::cout << judge::format_report(report);
        } else if (eval_mode == "score") {
            auto score_file = [&](const std::map<std::string, std::string>& answers) {
                std::vector<judge::ScoreItem> items;
                for (const auto& q : covered) {
                    items.push_back({q, answers.at(q.id)});
                }
                return judge::evaluate_scores(items, judge_backend, params);
            };
            std::cout << "mean score A: " << judge::format_score(score_file(answers_a))
                      << "\n";
            std::cout << "mean score B: " << judge::format_score(score_file(answers_b))
                      << "\n";
        } else {
            throw ValidationError("--mode must be pairwise or score");
        }
        return 0;
    }

    // Phase commands share the run-dir flow; CLI flags override config values.
    auto config = pipeline::load_config(config_path);
    if (!ablation.empty()) {
        if (ablation != "direct") {
            throw ValidationError("--ablation only supports \"direct\"");
        }
        config.ablation_direct = true;
    }
    if (distill_cmd->parsed()) {
        if (!distill_mode.empty()) {
            config.distill_mode = distill_mode;
        }
        if (distill_limit > 0) {
            config.distill_limit = distill_limit;
        }
        if (distill_sequential) {
            config.distill_sequential = true;
        }
    }
    if (refine_cmd->parsed()) {
        if (refine_max_iters > 0) {
            config.max_iters = refine_max_iters;
        }
        if (refine_buffer > 0) {
            config.buffer_size = refine_buffer;
        }
    }
    if (sev_cmd->parsed()) {
        if (sev_width > 0) config.beam_width = sev_width;
        if (sev_epochs > 0) config.toy.contrastive_epochs = sev_epochs;
        if (sev_lr > 0.0) config.toy.lr = sev_lr;
        if (sev_beta > 0.0) config.toy.beta = sev_beta;
    }

    if (eval_cmd->parsed()) {
        run_dir = eval_run_dir;
        if (run_dir.empty()) {
            throw ValidationError("evaluate needs --run-dir or --answers-a/--answers-b");
        }
    }

    pipeline::Run run(std::move(config), run_dir);
    if (runall_cmd->parsed()) {
        run.run_all(force);
    } else if (distill_cmd->parsed()) {
        run.run_phase(pipeline::Phase::distill, force);
    } else if (sft_cmd->parsed()) {
        run.run_phase(pipeline::Phase::sft, force);
    } else if (refine_cmd->parsed()) {
        run.run_phase(pipeline::Phase::refine, force);
    } else if (sev_cmd->parsed()) {
        run.run_phase(pipeline::Phase::selfevolve, force);
    } else if (eval_cmd->parsed()) {
        run.run_phase(pipeline::Phase::evaluate, force);
    }
    std::cout << "ok\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
