// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evo/backend.hpp"
#include "evo/corpus.hpp"

namespace evo::refine {

namespace fs = std::filesystem;
using backend::BackendHandle;
using backend::ChatMessage;
using backend::GenerationParams;
using corpus::DomainQuestion;

enum class JudgeStatus { correct, incorrect };

/// Structured judge output. guide is present exactly when the status is
/// INCORRECT.
struct JudgeFeedback {
    JudgeStatus status = JudgeStatus::incorrect;
    std::string explanation;
    std::optional<std::string> guide;
};

struct RefinementStep {
    int iteration = 0; // 0 = initial attempt, >0 = guided attempts
    std::string rationale;
    std::string answer;
    JudgeFeedback feedback;
};

enum class Outcome { solved, exhausted };

/// Per-question attempt history. CORRECT can only be the final step's status.
struct RefinementTrace {
    std::string question_id;
    std::vector<RefinementStep> steps;
    Outcome outcome = Outcome::exhausted;
};

struct TrainingExample {
    std::string prompt_text;
    std::string target_text;
    enum class Origin { distilled, refined } origin = Origin::refined;
};

nlohmann::ordered_json to_json(const RefinementTrace& trace);
RefinementTrace trace_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json to_json(const TrainingExample& example);
TrainingExample example_from_json(const nlohmann::ordered_json& j);

/// Sentinel line separating the rationale from the final answer in attempt
/// completions.
inline constexpr const char* kAnswerDelimiter = "### ANSWER:";

/// Connectives substituted for judge guide sentences when a trace becomes a
/// training target, cycling in order within a trace.
inline constexpr std::array<const char*, 3> kDiscourseMarkers = {
    "Hmm, let me reconsider.",
    "Wait, that may be wrong.",
    "On second thought,",
};

/// Split an attempt completion at the last answer delimiter. Throws
/// FormatError (carrying the raw text) when the delimiter is missing.
std::pair<std::string, std::string> parse_attempt(const std::string& completion);

/// Parse "STATUS: ... / EXPLANATION: ... / GUIDE: ..." judge output.
JudgeFeedback parse_judge_feedback(const std::string& completion);

std::vector<ChatMessage> make_attempt_prompt(const DomainQuestion& question);
std::vector<ChatMessage> make_guided_prompt(const DomainQuestion& question,
                                            const RefinementStep& previous,
                                            const std::string& guide);
std::vector<ChatMessage> make_judge_prompt(const DomainQuestion& question,
                                           const std::string& rationale,
                                           const std::string& answer, bool strict_reminder);

/// Chain-of-thought first attempt: (rationale, answer).
std::pair<std::string, std::string> initial_attempt(const BackendHandle& model,
                                                    const DomainQuestion& question,
                                                    const GenerationParams& params);

/// Re-attempt conditioned on the latest step and the judge's guide.
std::pair<std::string, std::string> guided_attempt(const BackendHandle& model,
                                                   const DomainQuestion& question,
                                                   const RefinementTrace& history,
                                                   const std::string& guide,
                                                   const GenerationParams& params);

/// Judge one attempt; re-asks once with a stricter format reminder before
/// giving up with a FormatError.
JudgeFeedback judge_attempt(const BackendHandle& judge, const DomainQuestion& question,
                            const std::string& rationale, const std::string& answer,
                            const GenerationParams& params);

/// Convert a solved trace into a training example: rationales joined by
/// cycling discourse markers, final answer appended; judge text never leaks
/// into the target.
TrainingExample trace_to_example(const DomainQuestion& question,
                                 const RefinementTrace& trace);

/// Consumer of flushed training batches. Implementations either update the
/// toy model in-process or emit the batch for an external fine-tuning system.
class Trainer {
public:
    virtual ~Trainer() = default;
    virtual void train_batch(const std::vector<TrainingExample>& batch) = 0;
};

struct RefineOptions {
    int max_iters = 3;   // N
    int buffer_size = 10; // K
    GenerationParams params;
};

struct RefinePaths {
    fs::path traces;   // all traces, solved and exhausted
    fs::path examples; // training examples in solve order
    fs::path progress; // resume state
};

struct RefineSummary {
    std::size_t solved = 0;
    std::size_t exhausted = 0;
    std::size_t flushes = 0;
    std::size_t judge_failures = 0; // questions abandoned on unparsable judge output
};

/// Iterative refinement over a question list: attempt/judge loop with at most
/// max_iters attempts per question, solved traces buffered and flushed to the
/// trainer in exact buffer_size batches (plus one final partial flush).
/// Progress is persisted after every question so an aborted run resumes
/// without re-training flushed batches.
RefineSummary run_refinement(const std::vector<DomainQuestion>& questions,
                             const BackendHandle& model, const BackendHandle& judge,
                             const RefineOptions& options, Trainer& trainer,
                             const RefinePaths& paths, bool resume = false);

} // namespace evo::refine
