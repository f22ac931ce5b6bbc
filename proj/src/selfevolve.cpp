// SPDX-License-Identifier: Apache-2.0
#include "evo/selfevolve.hpp"

#include "evo/errors.hpp"
#include "evo/io.hpp"

namespace evo::selfevolve {

nlohmann::ordered_json to_json(const PreferencePair& pair) {
    return {{"question_id", pair.question_id},
            {"prompt", pair.prompt},
            {"chosen", pair.chosen},
            {"rejected", pair.rejected},
            {"chosen_score", pair.chosen_score},
            {"rejected_score", pair.rejected_score},
            {"prompt_tokens", pair.prompt_tokens},
            {"chosen_tokens", pair.chosen_tokens},
            {"rejected_tokens", pair.rejected_tokens}};
}

PreferencePair pair_from_json(const nlohmann::ordered_json& j) {
    PreferencePair pair;
    pair.question_id = j.at("question_id").get<std::string>();
    pair.prompt = j.at("prompt").get<std::string>();
    pair.chosen = j.at("chosen").get<std::string>();
    pair.rejected = j.at("rejected").get<std::string>();
    pair.chosen_score = j.at("chosen_score").get<double>();
    pair.rejected_score = j.at("rejected_score").get<double>();
    pair.prompt_tokens = j.at("prompt_tokens").get<std::vector<toylm::TokenId>>();
    pair.chosen_tokens = j.at("chosen_tokens").get<std::vector<toylm::TokenId>>();
    pair.rejected_tokens = j.at("rejected_tokens").get<std::vector<toylm::TokenId>>();
    if (pair.chosen_tokens == pair.rejected_tokens) {
        throw ValidationError("preference pair has chosen == rejected (question " +
                              pair.question_id + ")");
    }
    return pair;
}

std::optional<PreferencePair> build_preference_pair(const toylm::ToyLmParams& model,
                                                    const DomainQuestion& question,
                                                    int width, int max_len) {
    if (width < 2) {
        throw ValidationError("pair construction needs width >= 2; width 1 is greedy");
    }
    std::string prompt_text = corpus::question_prompt_text(question);
    std::vector<toylm::TokenId> prompt = toylm::tokenize(model.vocab(), prompt_text);

    toylm::Candidate greedy = toylm::greedy_decode(model, prompt, max_len);
    std::vector<toylm::Candidate> beam = toylm::beam_decode(model, prompt, width, max_len);

    // Beam pruning ranks by cumulative score; the contrast picks the best
    // length-normalized candidate so short sequences get no free advantage.
    const toylm::Candidate* best = &greedy;
    for (const auto& cand : beam) {
        if (cand.avg_logprob > best->avg_logprob) {
            best = &cand;
        }
    }
    if (best->tokens == greedy.tokens) {
        return std::nullopt; // no informative contrast
    }

    PreferencePair pair;
    pair.question_id = question.id;
    pair.prompt = prompt_text;
    pair.chosen = toylm::detokenize(model.vocab(), best->tokens);
    pair.rejected = toylm::detokenize(model.vocab(), greedy.tokens);
    pair.chosen_score = best->avg_logprob;
    pair.rejected_score = greedy.avg_logprob;
    pair.prompt_tokens = prompt;
    pair.chosen_tokens = best->tokens;
    pair.rejected_tokens = greedy.tokens;
    return pair;
}

SelfEvolveSummary run_self_evolution(const std::vector<DomainQuestion>& questions,
                                     toylm::ToyLmParams& model,
                                     const SelfEvolveOptions& options, const fs::path& out) {
    if (options.epochs < 1) {
        throw ValidationError("epochs must be >= 1");
    }

    SelfEvolveSummary summary;
    std::vector<PreferencePair> pairs;
    std::vector<nlohmann::ordered_json> records;
    for (const auto& question : questions) {
        auto pair = build_preference_pair(model, question, options.width, options.max_len);
        if (!pair) {
            ++summary.skipped;
            continue;
        }
        records.push_back(to_json(*pair));
        pairs.push_back(std::move(*pair));
    }
    io::write_jsonl_atomic(out, records);
    summary.pairs = pairs.size();
    if (pairs.empty()) {
        return summary; // explicit no-op: model untouched
    }

    std::vector<toylm::PreferenceExample> batch;
    batch.reserve(pairs.size());
    for (const auto& p : pairs) {
        batch.push_back({p.prompt_tokens, p.chosen_tokens, p.rejected_tokens});
    }
    summary.margin_before = toylm::contrastive_eval(model, batch, options.beta).mean_margin;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        toylm::contrastive_step(model, batch, options.lr, options.beta);
    }
    summary.margin_after = toylm::contrastive_eval(model, batch, options.beta).mean_margin;
    return summary;
}

} // namespace evo::selfevolve
