// SPDX-License-Identifier: Apache-2.0
#include "evo/distill.hpp"

#include <atomic>
#include <iostream>
#include <thread>

#include "evo/errors.hpp"
#include "evo/io.hpp"

namespace evo::distill {

Mode mode_from_string(const std::string& s) {
    if (s == "guided") return Mode::guided;
    if (s == "direct") return Mode::direct;
    throw ValidationError("unknown distillation mode: " + s);
}

std::string to_string(Mode mode) {
    return mode == Mode::guided ? "guided" : "direct";
}

nlohmann::ordered_json to_json(const DistilledPair& pair) {
    nlohmann::ordered_json j{
        {"question_id", pair.question_id},
        {"mode", to_string(pair.mode)},
        {"answer", pair.answer},
    };
    if (pair.guideline) {
        j["guideline"] = {{"question_id", pair.guideline->question_id},
                          {"text", pair.guideline->text},
                          {"source", pair.guideline->source}};
    }
    return j;
}

DistilledPair pair_from_json(const nlohmann::ordered_json& j) {
    DistilledPair pair;
    pair.question_id = j.at("question_id").get<std::string>();
    pair.mode = mode_from_string(j.at("mode").get<std::string>());
    pair.answer = j.at("answer").get<std::string>();
    if (j.contains("guideline")) {
        const auto& g = j.at("guideline");
        pair.guideline = Guideline{g.at("question_id").get<std::string>(),
                                   g.at("text").get<std::string>(),
                                   g.at("source").get<std::string>()};
    }
    if (pair.answer.empty()) {
        throw ValidationError("distilled pair has an empty answer (question " +
                              pair.question_id + ")");
    }
    if ((pair.mode == Mode::guided) != pair.guideline.has_value()) {
        throw ValidationError("mode/guideline mismatch on distilled pair (question " +
                              pair.question_id + ")");
    }
    return pair;
}

std::vector<ChatMessage> make_guideline_prompt(const DomainQuestion& question) {
    std::string user = "Question: " + question.title + "\n";
    if (!question.description.empty()) {
        user += "Details: " + question.description + "\n";
    }
    user += "\nOutput only the numbered list of steps.";
    return {
        {backend::Role::system,
         "You are a domain assistant. Do NOT answer. Output a numbered list of the steps "
         "one should follow to answer the question."},
        {backend::Role::user, user},
    };
}

std::vector<ChatMessage> make_answer_prompt(const DomainQuestion& question,
                                            const Guideline* guideline) {
    std::string user = "Question: " + question.title + "\n";
    if (!question.description.empty()) {
        user += "Details: " + question.description + "\n";
    }
    if (guideline) {
        user += "\nSolution steps:\n" + guideline->text +
                "\n\nAnswer the question by following these steps, refining them where "
                "they are wrong.";
        return {{backend::Role::system,
                 "You are a domain expert. Answer the question using the provided solution "
                 "steps."},
                {backend::Role::user, user}};
    }
    return {{backend::Role::system, "You are a domain expert. Answer the question."},
            {backend::Role::user, user}};
}

Guideline generate_guideline(const BackendHandle& weak, const DomainQuestion& question,
                             const GenerationParams& params) {
    std::string text = weak->chat(make_guideline_prompt(question), params);
    return Guideline{question.id, text, weak->identity()};
}

DistilledPair distill_pair(const BackendHandle& strong, const DomainQuestion& question,
                           const std::optional<Guideline>& guideline,
                           const GenerationParams& params) {
    DistilledPair pair;
    pair.question_id = question.id;
    pair.mode = guideline ? Mode::guided : Mode::direct;
    pair.guideline = guideline;
    pair.answer = strong->chat(make_answer_prompt(question, guideline ? &*guideline : nullptr),
                               params);
    return pair;
}

namespace {

// One question end to end; throws on backend failure.
DistilledPair produce_pair(const DomainQuestion& question, const BackendHandle& weak,
                           const BackendHandle& strong, const DistillOptions& options) {
    std::optional<Guideline> guideline;
    if (options.mode == Mode::guided) {
        guideline = generate_guideline(weak, question, options.params);
    }
    return distill_pair(strong, question, guideline, options.params);
}

} // namespace

DistillSummary run_distillation(const std::vector<DomainQuestion>& questions,
                                const BackendHandle& weak, const BackendHandle& strong,
                                const DistillOptions& options, const fs::path& out) {
    std::size_t count = questions.size();
    if (options.limit) {
        count = std::min(count, *options.limit);
    }

    // Each slot gets either a record or an error message; the file is written
    // in question order afterwards, so fan-out does not change the artifact.
    std::vector<std::optional<DistilledPair>> results(count);
    std::vector<std::string> errors(count);

    auto worker_range = [&](std::atomic<std::size_t>& next) {
        for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
            try {
                results[i] = produce_pair(questions[i], weak, strong, options);
            } catch (const Error& e) {
                errors[i] = e.what();
            }
        }
    };

    std::atomic<std::size_t> next{0};
    if (options.sequential || options.inflight <= 1) {
        worker_range(next);
    } else {
        std::size_t n_workers = std::min<std::size_t>(options.inflight, count);
        std::vector<std::thread> workers;
        workers.reserve(n_workers);
        for (std::size_t w = 0; w < n_workers; ++w) {
            workers.emplace_back([&] { worker_range(next); });
        }
        for (auto& t : workers) {
            t.join();
        }
    }

    io::ensure_parent_dir(out);
    std::vector<nlohmann::ordered_json> records;
    DistillSummary summary;
    for (std::size_t i = 0; i < count; ++i) {
        if (results[i]) {
            records.push_back(to_json(*results[i]));
            ++summary.produced;
        } else {
            ++summary.failed;
            std::cerr << "distill: question " << questions[i].id << " failed: " << errors[i]
                      << "\n";
        }
    }
    io::write_jsonl_atomic(out, records);
    return summary;
}

} // namespace evo::distill
