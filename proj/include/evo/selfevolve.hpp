// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evo/corpus.hpp"
#include "evo/toylm.hpp"

namespace evo::selfevolve {

namespace fs = std::filesystem;
using corpus::DomainQuestion;

/// Beam-vs-greedy contrast for one question. chosen is the best
/// length-normalized candidate among the beam results and the greedy output;
/// rejected is always the greedy output.
struct PreferencePair {
    std::string question_id;
    std::string prompt;
    std::string chosen;
    std::string rejected;
    double chosen_score = 0.0;   // avg logprob
    double rejected_score = 0.0; // avg logprob
    std::vector<toylm::TokenId> prompt_tokens;
    std::vector<toylm::TokenId> chosen_tokens;
    std::vector<toylm::TokenId> rejected_tokens;
};

nlohmann::ordered_json to_json(const PreferencePair& pair);
PreferencePair pair_from_json(const nlohmann::ordered_json& j);

/// Decode the question prompt with greedy and beam search and contrast them.
/// Returns nothing when the best candidate is the greedy output itself.
/// Pure model computation; no backend is ever contacted.
std::optional<PreferencePair> build_preference_pair(const toylm::ToyLmParams& model,
                                                    const DomainQuestion& question,
                                                    int width, int max_len);

struct SelfEvolveOptions {
    int width = 10;
    int epochs = 1;
    double lr = 0.1;
    double beta = 1.0;
    int max_len = 16;
};

struct SelfEvolveSummary {
    std::size_t pairs = 0;
    std::size_t skipped = 0; // questions with no informative contrast
    std::optional<double> margin_before;
    std::optional<double> margin_after;
};

/// Build pairs for every question, persist them, and apply `epochs`
/// full-batch contrastive updates to the model. Zero pairs is an explicit
/// no-op: the model is untouched and the margins stay absent.
SelfEvolveSummary run_self_evolution(const std::vector<DomainQuestion>& questions,
                                     toylm::ToyLmParams& model,
                                     const SelfEvolveOptions& options, const fs::path& out);

} // namespace evo::selfevolve
