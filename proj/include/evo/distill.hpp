// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evo/backend.hpp"
#include "evo/corpus.hpp"

namespace evo::distill {

namespace fs = std::filesystem;
using backend::BackendHandle;
using backend::ChatMessage;
using backend::GenerationParams;
using corpus::DomainQuestion;

/// A step outline produced by the weak model instead of an answer.
struct Guideline {
    std::string question_id;
    std::string text;
    std::string source; // backend identity that produced it
};

enum class Mode { guided, direct };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode mode);

/// A question/answer record distilled from the strong model. mode == guided
/// if and only if a guideline is attached.
struct DistilledPair {
    std::string question_id;
    std::string answer;
    Mode mode = Mode::direct;
    std::optional<Guideline> guideline;
};

nlohmann::ordered_json to_json(const DistilledPair& pair);
DistilledPair pair_from_json(const nlohmann::ordered_json& j);

/// Prompt asking the weak model for a numbered step outline, never an answer.
std::vector<ChatMessage> make_guideline_prompt(const DomainQuestion& question);

/// Prompt asking the strong model to answer; with a guideline it must follow
/// the steps and refine them where they are wrong.
std::vector<ChatMessage> make_answer_prompt(const DomainQuestion& question,
                                            const Guideline* guideline);

Guideline generate_guideline(const BackendHandle& weak, const DomainQuestion& question,
                             const GenerationParams& params);

DistilledPair distill_pair(const BackendHandle& strong, const DomainQuestion& question,
                           const std::optional<Guideline>& guideline,
                           const GenerationParams& params);

struct DistillOptions {
    Mode mode = Mode::guided;
    bool sequential = true;
    int inflight = 4;                 // worker fan-out when not sequential
    std::optional<std::size_t> limit; // process only the first N questions
    GenerationParams params;
};

struct DistillSummary {
    std::size_t produced = 0;
    std::size_t failed = 0;
};

/// Distill one pair per question into a line-delimited dataset file. A failed
/// question is logged and skipped; it never aborts the batch. Records are
/// written in question order in both sequential and fan-out modes.
DistillSummary run_distillation(const std::vector<DomainQuestion>& questions,
                                const BackendHandle& weak, const BackendHandle& strong,
                                const DistillOptions& options, const fs::path& out);

} // namespace evo::distill
