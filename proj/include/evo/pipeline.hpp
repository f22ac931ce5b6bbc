// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evo/backend.hpp"
#include "evo/corpus.hpp"

namespace evo::pipeline {

namespace fs = std::filesystem;

/// One scripted-backend rule from a config file. Without `cycle`, responses
/// are indexed by per-rule hit count with the last entry repeating; with it,
/// they repeat round-robin.
struct ScriptRule {
    std::string match;
    std::vector<std::string> responses;
    bool cycle = false;
};

struct BackendSpec {
    std::string kind = "scripted"; // scripted | remote
    // remote
    std::string base_url;
    std::string path = "/v1/chat/completions";
    std::string model;
    int max_attempts = 3;
    int backoff_ms = 1000;
    int inflight = 4;
    std::string api_key_env = "EVO_API_KEY";
    // scripted
    std::vector<ScriptRule> script;
};

struct ToySpec {
    int order = 1;
    double lr = 0.1;
    int sft_epochs = 50;
    int refine_epochs = 10;
    int contrastive_epochs = 20;
    double beta = 1.0;
    int max_len = 16;
};

struct PipelineConfig {
    int max_iters = 3;       // N
    int buffer_size = 10;    // K
    int beam_width = 10;
    int max_tokens = 4096;
    std::size_t test_size = 1000;
    std::uint64_t seed = 0;

    BackendSpec weak;
    BackendSpec strong;
    BackendSpec judge;
    ToySpec toy;

    std::string corpus_file;
    std::string distill_mode = "guided";
    bool distill_sequential = true; // fan out question requests when false
    bool ablation_direct = false;   // also distill without guidelines and score both
    std::string eval_swap = "none"; // none | alternate

    // 0 means no limit; desk-scale runs restrict the per-phase question count.
    std::size_t distill_limit = 0;
    std::size_t refine_limit = 0;
    std::size_t selfevolve_limit = 0;
    std::size_t eval_limit = 0;
};

/// Strict parse: unknown keys are errors, absent keys take the defaults above.
PipelineConfig config_from_json(const nlohmann::ordered_json& j);
PipelineConfig load_config(const fs::path& path);
nlohmann::ordered_json config_to_json(const PipelineConfig& config);

/// Instantiate a backend from its config entry.
backend::BackendHandle make_backend(const BackendSpec& spec, const std::string& name);

enum class Phase { distill, sft, refine, selfevolve, evaluate };
inline constexpr std::array<Phase, 5> kPhaseOrder = {
    Phase::distill, Phase::sft, Phase::refine, Phase::selfevolve, Phase::evaluate,
};
std::string to_string(Phase phase);
Phase phase_from_string(const std::string& name);

struct OutputRecord {
    std::string path; // relative to the run directory
    std::string digest;
};

struct PhaseRecord {
    std::string status = "pending"; // pending | running | done | failed
    std::vector<OutputRecord> outputs;
    std::string started;
    std::string finished;
};

struct RunManifest {
    std::string run_id;
    nlohmann::ordered_json config_snapshot;
    std::map<Phase, PhaseRecord> phases;
};

/// A pipeline run bound to its run directory. The directory is owned
/// exclusively through a lock file for the lifetime of the object.
class Run {
public:
    /// Start (or re-attach to) a run in `run_dir` with this config. Attaching
    /// to an existing manifest requires an identical config.
    Run(PipelineConfig config, fs::path run_dir);

    /// Reload a run from its manifest and verify the digests of every
    /// completed phase's outputs against the files on disk.
    static Run resume(const fs::path& run_dir);

    ~Run();
    Run(Run&&) noexcept;
    Run& operator=(Run&&) = delete;
    Run(const Run&) = delete;

    /// Execute one phase. Prior phases must be done; a done phase is a no-op
    /// unless forced. A phase interrupted mid-flight resumes from its
    /// persisted state where the phase supports it.
    void run_phase(Phase phase, bool force = false);

    void run_all(bool force = false);

    const RunManifest& manifest() const { return manifest_; }
    const PipelineConfig& config() const { return config_; }
    const fs::path& dir() const { return dir_; }

    /// Relative path -> digest for every recorded output of done phases.
    std::map<std::string, std::string> artifact_digests() const;

private:
    struct AttachTag {};
    Run(PipelineConfig config, fs::path run_dir, AttachTag);

    void acquire_lock();
    void save_manifest() const;
    void log(const std::string& line) const;

    void phase_distill();
    void phase_sft();
    void phase_refine(bool resuming);
    void phase_selfevolve();
    void phase_evaluate();

    std::vector<corpus::DomainQuestion> load_split(const std::string& name) const;

    PipelineConfig config_;
    fs::path dir_;
    RunManifest manifest_;
    bool locked_ = false;
};

} // namespace evo::pipeline
