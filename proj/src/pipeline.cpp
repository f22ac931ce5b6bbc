// SPDX-License-Identifier: Apache-2.0
#include "evo/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>

#include "evo/distill.hpp"
#include "evo/errors.hpp"
#include "evo/io.hpp"
#include "evo/judge.hpp"
#include "evo/refine.hpp"
#include "evo/selfevolve.hpp"
#include "evo/toylm.hpp"
#include "evo/trainers.hpp"

namespace evo::pipeline {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

void check_keys(const nlohmann::ordered_json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool known = false;
        for (const char* a : allowed) {
            if (key == a) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ValidationError("unknown config key \"" + key + "\" in " + where);
        }
    }
}

ScriptRule script_rule_from_json(const nlohmann::ordered_json& j) {
    check_keys(j, {"match", "responses", "cycle"}, "script rule");
    ScriptRule rule;
    rule.match = j.at("match").get<std::string>();
    rule.responses = j.at("responses").get<std::vector<std::string>>();
    rule.cycle = j.value("cycle", false);
    if (rule.responses.empty()) {
        throw ValidationError("script rule for \"" + rule.match + "\" has no responses");
    }
    return rule;
}

BackendSpec backend_spec_from_json(const nlohmann::ordered_json& j, const std::string& name) {
    check_keys(j,
               {"kind", "base_url", "path", "model", "max_attempts", "backoff_ms", "inflight",
                "api_key_env", "script"},
               "backends." + name);
    BackendSpec spec;
    spec.kind = j.value("kind", spec.kind);
    if (spec.kind != "scripted" && spec.kind != "remote") {
        throw ValidationError("backends." + name + ".kind must be scripted or remote, got \"" +
                              spec.kind + "\"");
    }
    spec.base_url = j.value("base_url", spec.base_url);
    spec.path = j.value("path", spec.path);
    spec.model = j.value("model", spec.model);
    spec.max_attempts = j.value("max_attempts", spec.max_attempts);
    spec.backoff_ms = j.value("backoff_ms", spec.backoff_ms);
    spec.inflight = j.value("inflight", spec.inflight);
    spec.api_key_env = j.value("api_key_env", spec.api_key_env);
    if (j.contains("script")) {
        for (const auto& r : j.at("script")) {
            spec.script.push_back(script_rule_from_json(r));
        }
    }
    if (spec.kind == "remote" && spec.base_url.empty()) {
        throw ValidationError("backends." + name + " is remote but has no base_url");
    }
    return spec;
}

nlohmann::ordered_json backend_spec_to_json(const BackendSpec& spec) {
    nlohmann::ordered_json j{{"kind", spec.kind}};
    if (spec.kind == "remote") {
        j["base_url"] = spec.base_url;
        j["path"] = spec.path;
        j["model"] = spec.model;
        j["max_attempts"] = spec.max_attempts;
        j["backoff_ms"] = spec.backoff_ms;
        j["inflight"] = spec.inflight;
        j["api_key_env"] = spec.api_key_env;
    }
    nlohmann::ordered_json rules = nlohmann::ordered_json::array();
    for (const auto& r : spec.script) {
        rules.push_back({{"match", r.match}, {"responses", r.responses}, {"cycle", r.cycle}});
    }
    j["script"] = std::move(rules);
    return j;
}

} // namespace

PipelineConfig config_from_json(const nlohmann::ordered_json& j) {
    check_keys(j,
               {"max_iters", "buffer_size", "beam_width", "max_tokens", "test_size", "seed",
                "backends", "toy", "corpus_file", "distill_mode", "distill_sequential",
                "ablation_direct", "eval_swap", "distill_limit", "refine_limit",
                "selfevolve_limit", "eval_limit"},
               "config");
    PipelineConfig config;
    config.max_iters = j.value("max_iters", config.max_iters);
    config.buffer_size = j.value("buffer_size", config.buffer_size);
    config.beam_width = j.value("beam_width", config.beam_width);
    config.max_tokens = j.value("max_tokens", config.max_tokens);
    config.test_size = j.value("test_size", config.test_size);
    config.seed = j.value("seed", config.seed);
    if (j.contains("backends")) {
        check_keys(j.at("backends"), {"weak", "strong", "judge"}, "backends");
        if (j.at("backends").contains("weak")) {
            config.weak = backend_spec_from_json(j.at("backends").at("weak"), "weak");
        }
        if (j.at("backends").contains("strong")) {
            config.strong = backend_spec_from_json(j.at("backends").at("strong"), "strong");
        }
        if (j.at("backends").contains("judge")) {
            config.judge = backend_spec_from_json(j.at("backends").at("judge"), "judge");
        }
    }
    if (j.contains("toy")) {
        const auto& t = j.at("toy");
        check_keys(t,
                   {"order", "lr", "sft_epochs", "refine_epochs", "contrastive_epochs",
                    "beta", "max_len"},
                   "toy");
        config.toy.order = t.value("order", config.toy.order);
        config.toy.lr = t.value("lr", config.toy.lr);
        config.toy.sft_epochs = t.value("sft_epochs", config.toy.sft_epochs);
        config.toy.refine_epochs = t.value("refine_epochs", config.toy.refine_epochs);
        config.toy.contrastive_epochs =
            t.value("contrastive_epochs", config.toy.contrastive_epochs);
        config.toy.beta = t.value("beta", config.toy.beta);
        config.toy.max_len = t.value("max_len", config.toy.max_len);
    }
    config.corpus_file = j.value("corpus_file", config.corpus_file);
    config.distill_mode = j.value("distill_mode", config.distill_mode);
    config.distill_sequential = j.value("distill_sequential", config.distill_sequential);
    config.ablation_direct = j.value("ablation_direct", config.ablation_direct);
    config.eval_swap = j.value("eval_swap", config.eval_swap);
    config.distill_limit = j.value("distill_limit", config.distill_limit);
    config.refine_limit = j.value("refine_limit", config.refine_limit);
    config.selfevolve_limit = j.value("selfevolve_limit", config.selfevolve_limit);
    config.eval_limit = j.value("eval_limit", config.eval_limit);

    if (config.max_iters < 1) {
        throw ValidationError("max_iters must be >= 1");
    }
    if (config.buffer_size < 1) {
        throw ValidationError("buffer_size must be >= 1");
    }
    if (config.beam_width < 1) {
        throw ValidationError("beam_width must be >= 1");
    }
    if (config.max_tokens < 1) {
        throw ValidationError("max_tokens must be >= 1");
    }
    if (config.toy.order < 1 || config.toy.max_len < 1) {
        throw ValidationError("toy.order and toy.max_len must be >= 1");
    }
    if (config.toy.lr <= 0.0 || config.toy.beta <= 0.0) {
        throw ValidationError("toy.lr and toy.beta must be positive");
    }
    if (config.distill_mode != "guided" && config.distill_mode != "direct") {
        throw ValidationError("distill_mode must be guided or direct");
    }
    if (config.eval_swap != "none" && config.eval_swap != "alternate") {
        throw ValidationError("eval_swap must be none or alternate");
    }
    return config;
}

PipelineConfig load_config(const fs::path& path) {
    auto j = nlohmann::ordered_json::parse(io::read_file(path), nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw ValidationError("config file is not a JSON object: " + path.string());
    }
    PipelineConfig config = config_from_json(j);
    // A relative corpus path is relative to the config file, not the cwd.
    if (!config.corpus_file.empty() && fs::path(config.corpus_file).is_relative()) {
        config.corpus_file =
            (path.parent_path() / config.corpus_file).lexically_normal().string();
    }
    return config;
}

nlohmann::ordered_json config_to_json(const PipelineConfig& config) {
    return nlohmann::ordered_json{
        {"max_iters", config.max_iters},
        {"buffer_size", config.buffer_size},
        {"beam_width", config.beam_width},
        {"max_tokens", config.max_tokens},
        {"test_size", config.test_size},
        {"seed", config.seed},
        {"backends",
         {{"weak", backend_spec_to_json(config.weak)},
          {"strong", backend_spec_to_json(config.strong)},
          {"judge", backend_spec_to_json(config.judge)}}},
        {"toy",
         {{"order", config.toy.order},
          {"lr", config.toy.lr},
          {"sft_epochs", config.toy.sft_epochs},
          {"refine_epochs", config.toy.refine_epochs},
          {"contrastive_epochs", config.toy.contrastive_epochs},
          {"beta", config.toy.beta},
          {"max_len", config.toy.max_len}}},
        {"corpus_file", config.corpus_file},
        {"distill_mode", config.distill_mode},
        {"distill_sequential", config.distill_sequential},
        {"ablation_direct", config.ablation_direct},
        {"eval_swap", config.eval_swap},
        {"distill_limit", config.distill_limit},
        {"refine_limit", config.refine_limit},
        {"selfevolve_limit", config.selfevolve_limit},
        {"eval_limit", config.eval_limit},
    };
}

backend::BackendHandle make_backend(const BackendSpec& spec, const std::string& name) {
    if (spec.kind == "remote") {
        backend::RemoteConfig remote;
        remote.base_url = spec.base_url;
        remote.path = spec.path;
        remote.model = spec.model;
        remote.max_attempts = spec.max_attempts;
        remote.backoff_initial_ms = spec.backoff_ms;
        remote.inflight_cap = spec.inflight;
        remote.api_key_env = spec.api_key_env;
        return std::make_shared<backend::HttpBackend>(std::move(remote));
    }
    auto scripted = std::make_shared<backend::ScriptedBackend>(name);
    for (const auto& rule : spec.script) {
        if (rule.cycle) {
            scripted->register_rule(
                rule.match,
                backend::ResponseFn([responses = rule.responses](
                                        const backend::ScriptedCall& call) {
                    return responses[static_cast<std::size_t>(call.rule_hits) %
                                     responses.size()];
                }));
        } else {
            scripted->register_rule(rule.match, rule.responses);
        }
    }
    return scripted;
}

// ---------------------------------------------------------------------------
// Phases and manifest
// ---------------------------------------------------------------------------

std::string to_string(Phase phase) {
    switch (phase) {
        case Phase::distill: return "distill";
        case Phase::sft: return "sft";
        case Phase::refine: return "refine";
        case Phase::selfevolve: return "selfevolve";
        case Phase::evaluate: return "evaluate";
    }
    return "distill";
}

Phase phase_from_string(const std::string& name) {
    for (Phase p : kPhaseOrder) {
        if (to_string(p) == name) {
            return p;
        }
    }
    throw ValidationError("unknown phase: " + name);
}

namespace {

std::string now_iso() {
    std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", &tm);
    return buf;
}

nlohmann::ordered_json manifest_to_json(const RunManifest& manifest) {
    nlohmann::ordered_json phases;
    for (Phase p : kPhaseOrder) {
        const PhaseRecord& rec = manifest.phases.at(p);
        nlohmann::ordered_json outputs = nlohmann::ordered_json::array();
        for (const auto& out : rec.outputs) {
            outputs.push_back({{"path", out.path}, {"digest", out.digest}});
        }
        phases[to_string(p)] = {{"status", rec.status},
                                {"outputs", std::move(outputs)},
                                {"started", rec.started},
                                {"finished", rec.finished}};
    }
    return {{"run_id", manifest.run_id},
            {"phases", std::move(phases)},
            {"config", manifest.config_snapshot}};
}

RunManifest manifest_from_json(const nlohmann::ordered_json& j) {
    RunManifest manifest;
    manifest.run_id = j.at("run_id").get<std::string>();
    manifest.config_snapshot = j.at("config");
    for (Phase p : kPhaseOrder) {
        const auto& pj = j.at("phases").at(to_string(p));
        PhaseRecord rec;
        rec.status = pj.at("status").get<std::string>();
        for (const auto& out : pj.at("outputs")) {
            rec.outputs.push_back(OutputRecord{out.at("path").get<std::string>(),
                                               out.at("digest").get<std::string>()});
        }
        rec.started = pj.value("started", std::string{});
        rec.finished = pj.value("finished", std::string{});
        manifest.phases[p] = std::move(rec);
    }
    return manifest;
}

std::vector<corpus::DomainQuestion> limited(std::vector<corpus::DomainQuestion> questions,
                                            std::size_t limit) {
    if (limit > 0 && questions.size() > limit) {
        questions.resize(limit);
    }
    return questions;
}

std::string decode_answer(const toylm::ToyLmParams& params,
                          const corpus::DomainQuestion& question, int max_len) {
    auto prompt = toylm::tokenize(params.vocab(), corpus::question_prompt_text(question));
    auto candidate = toylm::greedy_decode(params, prompt, max_len);
    std::string text = toylm::detokenize(params.vocab(), candidate.tokens);
    return text.empty() ? "(no output)" : text;
}

} // namespace

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

Run::Run(PipelineConfig config, fs::path run_dir)
    : config_(std::move(config)), dir_(std::move(run_dir)) {
    fs::create_directories(dir_);
    acquire_lock();
    nlohmann::ordered_json snapshot = config_to_json(config_);
    if (fs::exists(dir_ / "manifest.json")) {
        manifest_ = manifest_from_json(
            nlohmann::ordered_json::parse(io::read_file(dir_ / "manifest.json")));
        if (manifest_.config_snapshot != snapshot) {
            throw ValidationError("run directory " + dir_.string() +
                                  " was created with a different config");
        }
        return;
    }
    char id[16];
    std::snprintf(id, sizeof(id), "%012llx",
                  static_cast<unsigned long long>(io::fnv1a64(snapshot.dump())) &
                      0xffffffffffffULL);
    manifest_.run_id = std::string("run-") + id;
    manifest_.config_snapshot = std::move(snapshot);
    for (Phase p : kPhaseOrder) {
        manifest_.phases[p] = PhaseRecord{};
    }
    save_manifest();
}

Run::Run(PipelineConfig config, fs::path run_dir, AttachTag)
    : config_(std::move(config)), dir_(std::move(run_dir)) {
    acquire_lock();
    manifest_ = manifest_from_json(
        nlohmann::ordered_json::parse(io::read_file(dir_ / "manifest.json")));
}

Run Run::resume(const fs::path& run_dir) {
    if (!fs::exists(run_dir / "manifest.json")) {
        throw ValidationError("no manifest in run directory: " + run_dir.string());
    }
    auto mj = nlohmann::ordered_json::parse(io::read_file(run_dir / "manifest.json"));
    PipelineConfig config = config_from_json(mj.at("config"));
    Run run(std::move(config), run_dir, AttachTag{});
    // A resumed run must continue from exactly the artifacts it recorded.
    for (Phase p : kPhaseOrder) {
        const PhaseRecord& rec = run.manifest_.phases.at(p);
        if (rec.status != "done") {
            continue;
        }
        for (const auto& out : rec.outputs) {
            fs::path file = run.dir_ / out.path;
            if (!fs::exists(file)) {
                throw ValidationError("missing artifact for phase " + to_string(p) + ": " +
                                      out.path);
            }
            if (io::file_digest(file) != out.digest) {
                throw ValidationError("digest mismatch for artifact " + out.path +
                                      " (phase " + to_string(p) + ")");
            }
        }
    }
    return run;
}

Run::~Run() {
    if (locked_) {
        std::error_code ec;
        fs::remove(dir_ / "lock", ec);
    }
}

Run::Run(Run&& other) noexcept
    : config_(std::move(other.config_)),
      dir_(std::move(other.dir_)),
      manifest_(std::move(other.manifest_)),
      locked_(other.locked_) {
    other.locked_ = false;
}

void Run::acquire_lock() {
    fs::path lock = dir_ / "lock";
    int fd = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw ValidationError("run directory is locked (remove " + lock.string() +
                              " if no run is active)");
    }
    std::string pid = std::to_string(::getpid()) + "\n";
    ssize_t written = ::write(fd, pid.data(), pid.size());
    (void)written;
    ::close(fd);
    locked_ = true;
}

void Run::save_manifest() const {
    io::write_file_atomic(dir_ / "manifest.json", manifest_to_json(manifest_).dump(2));
}

void Run::log(const std::string& line) const {
    io::append_line(dir_ / "run.log", line);
}

std::map<std::string, std::string> Run::artifact_digests() const {
    std::map<std::string, std::string> digests;
    for (const auto& [phase, rec] : manifest_.phases) {
        (void)phase;
        if (rec.status != "done") {
            continue;
        }
        for (const auto& out : rec.outputs) {
            digests[out.path] = out.digest;
        }
    }
    return digests;
}

void Run::run_phase(Phase phase, bool force) {
    PhaseRecord& rec = manifest_.phases.at(phase);
    if (rec.status == "done" && !force) {
        std::cout << "phase " << to_string(phase) << " already done; skipping (use --force "
                  << "to rerun)\n";
        return;
    }
    for (Phase prior : kPhaseOrder) {
        if (prior == phase) {
            break;
        }
        if (manifest_.phases.at(prior).status != "done") {
            throw ValidationError("phase " + to_string(phase) + " requires phase " +
                                  to_string(prior) + " to be done first");
        }
    }
    bool resuming = !force && (rec.status == "running" || rec.status == "failed");
    rec.status = "running";
    rec.started = now_iso();
    rec.outputs.clear();
    save_manifest();
    log("phase " + to_string(phase) + " started");

    try {
        switch (phase) {
            case Phase::distill: phase_distill(); break;
            case Phase::sft: phase_sft(); break;
            case Phase::refine: phase_refine(resuming); break;
            case Phase::selfevolve: phase_selfevolve(); break;
            case Phase::evaluate: phase_evaluate(); break;
        }
    } catch (...) {
        rec.status = "failed";
        rec.finished = now_iso();
        save_manifest();
        log("phase " + to_string(phase) + " failed");
        throw;
    }
    rec.status = "done";
    rec.finished = now_iso();
    save_manifest();
    log("phase " + to_string(phase) + " done");
}

void Run::run_all(bool force) {
    for (Phase phase : kPhaseOrder) {
        run_phase(phase, force);
    }
}

std::vector<corpus::DomainQuestion> Run::load_split(const std::string& name) const {
    return corpus::load_corpus(dir_ / "corpus" / (name + ".jsonl"));
}

namespace {

void record_output(RunManifest& manifest, Phase phase, const fs::path& dir,
                   const std::string& rel) {
    manifest.phases.at(phase).outputs.push_back(OutputRecord{rel, io::file_digest(dir / rel)});
}

} // namespace

void Run::phase_distill() {
    if (config_.corpus_file.empty()) {
        throw ValidationError("config has no corpus_file");
    }
    auto questions = corpus::load_corpus(config_.corpus_file);
    auto [train, test] = corpus::split_corpus(questions, config_.test_size, config_.seed);
    corpus::save_corpus(dir_ / "corpus" / "train.jsonl", train);
    corpus::save_corpus(dir_ / "corpus" / "test.jsonl", test);

    auto weak = make_backend(config_.weak, "weak");
    auto strong = make_backend(config_.strong, "strong");
    distill::DistillOptions options;
    options.mode = distill::mode_from_string(config_.distill_mode);
    options.sequential = config_.distill_sequential;
    options.inflight = config_.strong.inflight;
    options.params.max_tokens = config_.max_tokens;
    if (config_.distill_limit > 0) {
        options.limit = config_.distill_limit;
    }
    auto summary =
        distill::run_distillation(train, weak, strong, options, dir_ / "distill" / "distilled.jsonl");
    log("distill produced=" + std::to_string(summary.produced) +
        " failed=" + std::to_string(summary.failed));

    record_output(manifest_, Phase::distill, dir_, "corpus/train.jsonl");
    record_output(manifest_, Phase::distill, dir_, "corpus/test.jsonl");
    record_output(manifest_, Phase::distill, dir_, "distill/distilled.jsonl");

    if (config_.ablation_direct) {
        distill::DistillOptions direct = options;
        direct.mode = distill::Mode::direct;
        distill::run_distillation(train, weak, strong, direct,
                                  dir_ / "distill" / "distilled_direct.jsonl");
        record_output(manifest_, Phase::distill, dir_, "distill/distilled_direct.jsonl");
    }
}

void Run::phase_sft() {
    auto pairs_json = io::read_jsonl(dir_ / "distill" / "distilled.jsonl");
    if (pairs_json.empty()) {
        throw ValidationError("no distilled pairs to train on");
    }
    auto all_questions = corpus::load_corpus(config_.corpus_file);
    std::map<std::string, corpus::DomainQuestion> by_id;
    for (const auto& q : all_questions) {
        by_id[q.id] = q;
    }

    // Vocabulary: every question text, the distilled answers, and the
    // discourse markers used by refined targets later.
    std::vector<std::string> words;
    auto add_words = [&words](const std::string& text) {
        std::string word;
        for (char c : text) {
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!word.empty()) {
                    words.push_back(word);
                    word.clear();
                }
            } else {
                word += c;
            }
        }
        if (!word.empty()) {
            words.push_back(word);
        }
    };
    for (const auto& q : all_questions) {
        add_words(corpus::question_prompt_text(q));
    }
    std::vector<toylm::SftExample> examples;
    std::vector<distill::DistilledPair> pairs;
    for (const auto& pj : pairs_json) {
        pairs.push_back(distill::pair_from_json(pj));
    }
    for (const auto& pair : pairs) {
        add_words(pair.answer);
        if (pair.guideline) {
            add_words(pair.guideline->text);
        }
    }
    for (const char* marker : refine::kDiscourseMarkers) {
        add_words(marker);
    }

    toylm::ToyLmParams params(toylm::Vocab::with_words(words), config_.toy.order);
    for (const auto& pair : pairs) {
        auto it = by_id.find(pair.question_id);
        if (it == by_id.end()) {
            throw ValidationError("distilled pair references unknown question " +
                                  pair.question_id);
        }
        refine::TrainingExample ex{corpus::question_prompt_text(it->second), pair.answer,
                                   refine::TrainingExample::Origin::distilled};
        examples.push_back(trainers::to_sft_example(params.vocab(), ex));
    }

    double initial_loss = toylm::sft_loss(params, examples);
    double final_loss = initial_loss;
    for (int epoch = 0; epoch < config_.toy.sft_epochs; ++epoch) {
        final_loss = toylm::sft_step(params, examples, config_.toy.lr);
    }
    toylm::save_checkpoint(params, dir_ / "sft" / "checkpoint.json");
    io::write_file_atomic(dir_ / "sft" / "summary.json",
                          nlohmann::ordered_json{{"examples", examples.size()},
                                                 {"epochs", config_.toy.sft_epochs},
                                                 {"initial_loss", initial_loss},
                                                 {"final_loss", final_loss}}
                              .dump(2));
    record_output(manifest_, Phase::sft, dir_, "sft/checkpoint.json");
    record_output(manifest_, Phase::sft, dir_, "sft/summary.json");
}

void Run::phase_refine(bool resuming) {
    fs::path refine_ckpt = dir_ / "refine" / "checkpoint.json";
    toylm::ToyLmParams params =
        (resuming && fs::exists(refine_ckpt))
            ? toylm::load_checkpoint(refine_ckpt)
            : toylm::load_checkpoint(dir_ / "sft" / "checkpoint.json");

    auto model = make_backend(config_.weak, "weak");
    auto judge = make_backend(config_.judge, "judge");
    trainers::ToyLmTrainer trainer(params, config_.toy.lr, config_.toy.refine_epochs,
                                   refine_ckpt);

    refine::RefineOptions options;
    options.max_iters = config_.max_iters;
    options.buffer_size = config_.buffer_size;
    options.params.max_tokens = config_.max_tokens;
    refine::RefinePaths paths{dir_ / "refine" / "traces.jsonl",
                              dir_ / "refine" / "refined.jsonl",
                              dir_ / "refine" / "progress.json"};
    auto train = limited(load_split("train"), config_.refine_limit);
    auto summary = refine::run_refinement(train, model, judge, options, trainer, paths,
                                          resuming);
    if (!fs::exists(refine_ckpt)) {
        toylm::save_checkpoint(params, refine_ckpt); // zero flushes: model unchanged
    }
    io::write_file_atomic(dir_ / "refine" / "summary.json",
                          nlohmann::ordered_json{{"solved", summary.solved},
                                                 {"exhausted", summary.exhausted},
                                                 {"flushes", summary.flushes},
                                                 {"judge_failures", summary.judge_failures}}
                              .dump(2));
    record_output(manifest_, Phase::refine, dir_, "refine/traces.jsonl");
    record_output(manifest_, Phase::refine, dir_, "refine/refined.jsonl");
    record_output(manifest_, Phase::refine, dir_, "refine/checkpoint.json");
    record_output(manifest_, Phase::refine, dir_, "refine/summary.json");
}

void Run::phase_selfevolve() {
    auto params = toylm::load_checkpoint(dir_ / "refine" / "checkpoint.json");
    selfevolve::SelfEvolveOptions options;
    options.width = config_.beam_width;
    options.epochs = config_.toy.contrastive_epochs;
    options.lr = config_.toy.lr;
    options.beta = config_.toy.beta;
    options.max_len = config_.toy.max_len;

    auto train = limited(load_split("train"), config_.selfevolve_limit);
    auto summary =
        selfevolve::run_self_evolution(train, params, options, dir_ / "selfevolve" / "pairs.jsonl");
    toylm::save_checkpoint(params, dir_ / "selfevolve" / "checkpoint.json");

    nlohmann::ordered_json sj{{"pairs", summary.pairs}, {"skipped", summary.skipped}};
    if (summary.margin_before) {
        sj["margin_before"] = *summary.margin_before;
        sj["margin_after"] = *summary.margin_after;
    }
    io::write_file_atomic(dir_ / "selfevolve" / "summary.json", sj.dump(2));
    record_output(manifest_, Phase::selfevolve, dir_, "selfevolve/pairs.jsonl");
    record_output(manifest_, Phase::selfevolve, dir_, "selfevolve/checkpoint.json");
    record_output(manifest_, Phase::selfevolve, dir_, "selfevolve/summary.json");
}

void Run::phase_evaluate() {
    auto evolved = toylm::load_checkpoint(dir_ / "selfevolve" / "checkpoint.json");
    auto baseline = toylm::load_checkpoint(dir_ / "sft" / "checkpoint.json");
    auto test = limited(load_split("test"), config_.eval_limit);
    if (test.empty()) {
        throw ValidationError("test split is empty; nothing to evaluate");
    }

    std::map<std::string, std::string> answers_a;
    std::map<std::string, std::string> answers_b;
    std::vector<nlohmann::ordered_json> records_a;
    std::vector<nlohmann::ordered_json> records_b;
    for (const auto& q : test) {
        answers_a[q.id] = decode_answer(evolved, q, config_.toy.max_len);
        answers_b[q.id] = decode_answer(baseline, q, config_.toy.max_len);
        records_a.push_back({{"question_id", q.id}, {"answer", answers_a[q.id]}});
        records_b.push_back({{"question_id", q.id}, {"answer", answers_b[q.id]}});
    }
    io::write_jsonl_atomic(dir_ / "evaluate" / "answers_a.jsonl", records_a);
    io::write_jsonl_atomic(dir_ / "evaluate" / "answers_b.jsonl", records_b);

    auto judge_backend = make_backend(config_.judge, "judge");
    backend::GenerationParams params;
    params.max_tokens = config_.max_tokens;
    fs::path verdict_log = dir_ / "evaluate" / "verdicts.jsonl";
    auto policy = config_.eval_swap == "alternate" ? judge::SwapPolicy::alternate
                                                   : judge::SwapPolicy::none;
    auto report =
        judge::evaluate_pairwise(test, answers_a, answers_b, judge_backend, policy, params,
                                 &verdict_log);
    io::write_file_atomic(dir_ / "evaluate" / "report.json",
                          judge::report_to_json(report).dump(2));
    io::write_file_atomic(dir_ / "evaluate" / "report.txt", judge::format_report(report));
    record_output(manifest_, Phase::evaluate, dir_, "evaluate/answers_a.jsonl");
    record_output(manifest_, Phase::evaluate, dir_, "evaluate/answers_b.jsonl");
    record_output(manifest_, Phase::evaluate, dir_, "evaluate/verdicts.jsonl");
    record_output(manifest_, Phase::evaluate, dir_, "evaluate/report.json");
    record_output(manifest_, Phase::evaluate, dir_, "evaluate/report.txt");

    if (config_.ablation_direct) {
        // Score the guided and guideline-free datasets with the judge.
        auto score_dataset = [&](const fs::path& file) {
            auto all_questions = corpus::load_corpus(config_.corpus_file);
            std::map<std::string, corpus::DomainQuestion> by_id;
            for (const auto& q : all_questions) {
                by_id[q.id] = q;
            }
            std::vector<judge::ScoreItem> items;
            for (const auto& pj : io::read_jsonl(file)) {
                auto pair = distill::pair_from_json(pj);
                items.push_back({by_id.at(pair.question_id), pair.answer});
            }
            std::size_t failed = 0;
            double mean = judge::evaluate_scores(items, judge_backend, params, &failed);
            return std::pair<double, std::size_t>{mean, failed};
        };
        auto [guided_mean, guided_failed] =
            score_dataset(dir_ / "distill" / "distilled.jsonl");
        auto [direct_mean, direct_failed] =
            score_dataset(dir_ / "distill" / "distilled_direct.jsonl");
        io::write_file_atomic(
            dir_ / "evaluate" / "ablation_report.json",
            nlohmann::ordered_json{{"mean_score_guided", guided_mean},
                                   {"mean_score_direct", direct_mean},
                                   {"guided_failures", guided_failed},
                                   {"direct_failures", direct_failed}}
                .dump(2));
        record_output(manifest_, Phase::evaluate, dir_, "evaluate/ablation_report.json");
    }
}

} // namespace evo::pipeline
