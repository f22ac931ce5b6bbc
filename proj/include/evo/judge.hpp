// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evo/backend.hpp"
#include "evo/corpus.hpp"

namespace evo::judge {

namespace fs = std::filesystem;
using backend::BackendHandle;
using backend::ChatMessage;
using backend::GenerationParams;
using corpus::DomainQuestion;

enum class Choice { A, B };

inline constexpr std::array<const char*, 5> kCriteria = {
    "accuracy", "completeness", "relevance", "coherence", "reliability",
};

struct CriterionVerdict {
    Choice selection = Choice::A;
    std::string reason;
};

enum class PresentationOrder { AB, BA };

/// Forced A/B choice per criterion plus an overall winner, always expressed
/// in canonical terms (selections un-swapped when the answers were presented
/// in BA order).
struct PairwiseVerdict {
    std::map<std::string, CriterionVerdict> per_criterion; // one entry per kCriteria
    Choice overall = Choice::A;
    std::string key_differences;
    PresentationOrder order = PresentationOrder::AB;
};

struct ScoreVerdict {
    double score = 0.0; // in [1, 10]
    std::string rationale;
};

struct CriterionRates {
    double pct_a = 0.0;
    double pct_b = 0.0; // always exactly 100 - pct_a
};

struct EvaluationReport {
    std::map<std::string, CriterionRates> per_criterion_win_rate;
    std::optional<double> mean_score_a;
    std::optional<double> mean_score_b;
    std::size_t n = 0;      // verdicts that parsed
    std::size_t failed = 0; // verdicts dropped for format errors
};

/// Five-criteria comparison prompt with both answers embedded.
std::vector<ChatMessage> make_pairwise_prompt(const DomainQuestion& question,
                                              const std::string& answer_a,
                                              const std::string& answer_b,
                                              bool strict_reminder);

std::vector<ChatMessage> make_score_prompt(const DomainQuestion& question,
                                           const std::string& answer, bool strict_reminder);

/// Parse the judge's selections; requires all five criteria plus the overall
/// winner, and forbids ties. `swapped` un-swaps selections back to canonical
/// A/B terms.
PairwiseVerdict parse_pairwise_response(const std::string& completion, bool swapped);

ScoreVerdict parse_score_response(const std::string& completion);

/// Compare two answers, optionally presenting them in swapped order to
/// control for position bias. Re-asks once on unparsable output.
PairwiseVerdict pairwise_compare(const BackendHandle& judge, const DomainQuestion& question,
                                 const std::string& answer_a, const std::string& answer_b,
                                 bool swap, const GenerationParams& params);

/// Single overall quality score in [1, 10]; re-asks once on bad output.
ScoreVerdict absolute_score(const BackendHandle& judge, const DomainQuestion& question,
                            const std::string& answer, const GenerationParams& params);

enum class SwapPolicy { none, alternate };

/// One verdict per test question; per-criterion win rates over the verdicts
/// that parsed. Optionally logs raw + parsed verdicts for audit.
EvaluationReport evaluate_pairwise(const std::vector<DomainQuestion>& test_set,
                                   const std::map<std::string, std::string>& answers_a,
                                   const std::map<std::string, std::string>& answers_b,
                                   const BackendHandle& judge, SwapPolicy swap_policy,
                                   const GenerationParams& params,
                                   const fs::path* verdict_log = nullptr);

struct ScoreItem {
    DomainQuestion question;
    std::string answer;
};

/// Mean of parsed scores; failures are excluded and counted via failed_out.
double evaluate_scores(const std::vector<ScoreItem>& items, const BackendHandle& judge,
                       const GenerationParams& params, std::size_t* failed_out = nullptr);

/// Aggregate parsed verdicts into a report (pure fold, no backend).
EvaluationReport aggregate_verdicts(const std::vector<PairwiseVerdict>& verdicts,
                                    std::size_t failed);

// Display formatting: percentages to 1 decimal, scores to 2 decimals.
std::string format_pct(double pct);
std::string format_score(double score);
std::string format_report(const EvaluationReport& report);

nlohmann::ordered_json report_to_json(const EvaluationReport& report);

} // namespace evo::judge
