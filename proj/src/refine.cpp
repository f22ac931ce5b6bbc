// SPDX-License-Identifier: Apache-2.0
#include "evo/refine.hpp"

#include <algorithm>
#include <iostream>

#include "evo/errors.hpp"
#include "evo/io.hpp"

namespace evo::refine {

namespace {

std::string status_to_string(JudgeStatus s) {
    return s == JudgeStatus::correct ? "CORRECT" : "INCORRECT";
}

JudgeStatus status_from_string(const std::string& s) {
    if (s == "CORRECT") return JudgeStatus::correct;
    if (s == "INCORRECT") return JudgeStatus::incorrect;
    throw FormatError("unknown judge status: " + s);
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

/// Value of the first "KEY:" line in `text`, if any.
std::optional<std::string> find_field(const std::string& text, const std::string& key) {
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) {
            eol = text.size();
        }
        std::string line = trim(text.substr(pos, eol - pos));
        if (line.rfind(key, 0) == 0) {
            return trim(line.substr(key.size()));
        }
        pos = eol + 1;
    }
    return std::nullopt;
}

} // namespace

nlohmann::ordered_json to_json(const RefinementTrace& trace) {
    nlohmann::ordered_json steps = nlohmann::ordered_json::array();
    for (const auto& s : trace.steps) {
        nlohmann::ordered_json feedback{
            {"status", status_to_string(s.feedback.status)},
            {"explanation", s.feedback.explanation},
        };
        if (s.feedback.guide) {
            feedback["guide"] = *s.feedback.guide;
        }
        steps.push_back({{"iteration", s.iteration},
                         {"rationale", s.rationale},
                         {"answer", s.answer},
                         {"feedback", std::move(feedback)}});
    }
    return {{"question_id", trace.question_id},
            {"outcome", trace.outcome == Outcome::solved ? "solved" : "exhausted"},
            {"steps", std::move(steps)}};
}

RefinementTrace trace_from_json(const nlohmann::ordered_json& j) {
    RefinementTrace trace;
    trace.question_id = j.at("question_id").get<std::string>();
    trace.outcome = j.at("outcome").get<std::string>() == "solved" ? Outcome::solved
                                                                   : Outcome::exhausted;
    for (const auto& sj : j.at("steps")) {
        RefinementStep step;
        step.iteration = sj.at("iteration").get<int>();
        step.rationale = sj.at("rationale").get<std::string>();
        step.answer = sj.at("answer").get<std::string>();
        const auto& f = sj.at("feedback");
        step.feedback.status = status_from_string(f.at("status").get<std::string>());
        step.feedback.explanation = f.at("explanation").get<std::string>();
        if (f.contains("guide")) {
            step.feedback.guide = f.at("guide").get<std::string>();
        }
        trace.steps.push_back(std::move(step));
    }
    return trace;
}

nlohmann::ordered_json to_json(const TrainingExample& example) {
    return {{"prompt_text", example.prompt_text},
            {"target_text", example.target_text},
            {"origin",
             example.origin == TrainingExample::Origin::distilled ? "distilled" : "refined"}};
}

TrainingExample example_from_json(const nlohmann::ordered_json& j) {
    TrainingExample ex;
    ex.prompt_text = j.at("prompt_text").get<std::string>();
    ex.target_text = j.at("target_text").get<std::string>();
    ex.origin = j.at("origin").get<std::string>() == "distilled"
                    ? TrainingExample::Origin::distilled
                    : TrainingExample::Origin::refined;
    return ex;
}

std::pair<std::string, std::string> parse_attempt(const std::string& completion) {
    std::size_t pos = completion.rfind(kAnswerDelimiter);
    if (pos == std::string::npos) {
        throw FormatError("attempt completion has no answer delimiter: " +
                          completion.substr(0, 200));
    }
    // Models often restate the answer; the last delimiter block wins.
    std::string rationale = trim(completion.substr(0, pos));
    std::string answer = trim(completion.substr(pos + std::string(kAnswerDelimiter).size()));
    if (answer.empty()) {
        throw FormatError("attempt completion has an empty answer block");
    }
    return {rationale, answer};
}

JudgeFeedback parse_judge_feedback(const std::string& completion) {
    auto status_text = find_field(completion, "STATUS:");
    if (!status_text) {
        throw FormatError("judge output has no STATUS line");
    }
    JudgeFeedback feedback;
    feedback.status = status_from_string(*status_text);
    feedback.explanation = find_field(completion, "EXPLANATION:").value_or("");
    auto guide = find_field(completion, "GUIDE:");
    if (feedback.status == JudgeStatus::incorrect) {
        if (!guide || guide->empty()) {
            throw FormatError("INCORRECT judge output is missing its GUIDE line");
        }
        feedback.guide = *guide;
    }
    return feedback;
}

std::vector<ChatMessage> make_attempt_prompt(const DomainQuestion& question) {
    return {
        {backend::Role::system,
         std::string("You are a domain expert. Think step by step, then give your final "
                     "answer on a new line starting with \"") +
             kAnswerDelimiter + "\"."},
        {backend::Role::user, corpus::question_prompt_text(question)},
    };
}

std::vector<ChatMessage> make_guided_prompt(const DomainQuestion& question,
                                            const RefinementStep& previous,
                                            const std::string& guide) {
    std::string user = "Question:\n" + corpus::question_prompt_text(question) +
                       "\n\nYour previous reasoning:\n" + previous.rationale +
                       "\n\nYour previous answer:\n" + previous.answer +
                       "\n\nReviewer feedback:\n" + previous.feedback.explanation +
                       "\n\nHint:\n" + guide +
                       "\n\nTry again, fixing the problems the reviewer found.";
    return {
        {backend::Role::system,
         std::string("You are a domain expert revising your own work. Think step by step, "
                     "then give your final answer on a new line starting with \"") +
             kAnswerDelimiter + "\"."},
        {backend::Role::user, std::move(user)},
    };
}

std::vector<ChatMessage> make_judge_prompt(const DomainQuestion& question,
                                           const std::string& rationale,
                                           const std::string& answer, bool strict_reminder) {
    std::string user = "Question:\n" + corpus::question_prompt_text(question) +
                       "\n\nReasoning:\n" + rationale + "\n\nAnswer:\n" + answer +
                       "\n\nJudge whether the reasoning and answer are correct. Respond "
                       "exactly in this format:\n"
                       "STATUS: CORRECT or INCORRECT\n"
                       "EXPLANATION: <why>\n"
                       "GUIDE: <one sentence steering the next attempt; only when "
                       "INCORRECT>";
    if (strict_reminder) {
        user += "\n\nYour previous reply did not follow the format. Reply with the STATUS, "
                "EXPLANATION and GUIDE lines only.";
    }
    return {{backend::Role::system, "You are a strict domain reviewer."},
            {backend::Role::user, std::move(user)}};
}

std::pair<std::string, std::string> initial_attempt(const BackendHandle& model,
                                                    const DomainQuestion& question,
                                                    const GenerationParams& params) {
    return parse_attempt(model->chat(make_attempt_prompt(question), params));
}

std::pair<std::string, std::string> guided_attempt(const BackendHandle& model,
                                                   const DomainQuestion& question,
                                                   const RefinementTrace& history,
                                                   const std::string& guide,
                                                   const GenerationParams& params) {
    if (history.steps.empty()) {
        throw ValidationError("guided_attempt requires a non-empty history");
    }
    if (guide.empty()) {
        throw ValidationError("guided_attempt requires a non-empty guide");
    }
    return parse_attempt(
        model->chat(make_guided_prompt(question, history.steps.back(), guide), params));
}

JudgeFeedback judge_attempt(const BackendHandle& judge, const DomainQuestion& question,
                            const std::string& rationale, const std::string& answer,
                            const GenerationParams& params) {
    try {
        return parse_judge_feedback(
            judge->chat(make_judge_prompt(question, rationale, answer, false), params));
    } catch (const FormatError&) {
        // One re-ask with a stricter reminder, then give up.
        return parse_judge_feedback(
            judge->chat(make_judge_prompt(question, rationale, answer, true), params));
    }
}

TrainingExample trace_to_example(const DomainQuestion& question,
                                 const RefinementTrace& trace) {
    if (trace.outcome != Outcome::solved) {
        throw ValidationError("only solved traces become training examples (question " +
                              trace.question_id + ")");
    }
    std::string target;
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        if (i > 0) {
            target += "\n";
            target += kDiscourseMarkers[(i - 1) % kDiscourseMarkers.size()];
            target += "\n";
        }
        target += trace.steps[i].rationale;
    }
    target += "\n" + trace.steps.back().answer;
    return TrainingExample{corpus::question_prompt_text(question), std::move(target),
                           TrainingExample::Origin::refined};
}

// ---------------------------------------------------------------------------
// run_refinement
// ---------------------------------------------------------------------------

namespace {

struct Progress {
    std::size_t processed = 0;        // questions fully handled
    std::size_t flushed_examples = 0; // examples already consumed by the trainer
    std::size_t flushes = 0;
};

Progress load_progress(const fs::path& path) {
    auto j = nlohmann::ordered_json::parse(io::read_file(path));
    return Progress{j.at("processed").get<std::size_t>(),
                    j.at("flushed_examples").get<std::size_t>(),
                    j.at("flushes").get<std::size_t>()};
}

void save_progress(const fs::path& path, const Progress& p) {
    io::write_file_atomic(path, nlohmann::ordered_json{{"processed", p.processed},
                                                       {"flushed_examples", p.flushed_examples},
                                                       {"flushes", p.flushes}}
                                    .dump());
}

} // namespace

RefineSummary run_refinement(const std::vector<DomainQuestion>& questions,
                             const BackendHandle& model, const BackendHandle& judge,
                             const RefineOptions& options, Trainer& trainer,
                             const RefinePaths& paths, bool resume) {
    if (options.max_iters < 1) {
        throw ValidationError("max_iters must be >= 1");
    }
    if (options.buffer_size < 1) {
        throw ValidationError("buffer_size must be >= 1");
    }

    Progress progress;
    std::vector<TrainingExample> buffer;
    if (resume && fs::exists(paths.progress)) {
        progress = load_progress(paths.progress);
        if (fs::exists(paths.examples)) {
            auto records = io::read_jsonl(paths.examples);
            if (records.size() < progress.flushed_examples) {
                throw ValidationError("refinement state is inconsistent: fewer examples on "
                                      "disk than flushed");
            }
            for (std::size_t i = progress.flushed_examples; i < records.size(); ++i) {
                buffer.push_back(example_from_json(records[i]));
            }
        }
    } else {
        // Fresh run: truncate any stale artifacts.
        io::write_file_atomic(paths.traces, "");
        io::write_file_atomic(paths.examples, "");
        save_progress(paths.progress, progress);
    }

    RefineSummary summary;
    summary.flushes = progress.flushes;

    const auto K = static_cast<std::size_t>(options.buffer_size);
    auto flush = [&] {
        std::vector<TrainingExample> batch(buffer.begin(),
                                           buffer.begin() + static_cast<std::ptrdiff_t>(
                                                                std::min(K, buffer.size())));
        trainer.train_batch(batch);
        buffer.erase(buffer.begin(), buffer.begin() + static_cast<std::ptrdiff_t>(batch.size()));
        progress.flushed_examples += batch.size();
        ++progress.flushes;
        save_progress(paths.progress, progress);
    };

    // A crash between training and the progress write leaves a full buffer on
    // disk; consume it before touching new questions.
    while (buffer.size() >= K) {
        flush();
    }

    for (std::size_t qi = progress.processed; qi < questions.size(); ++qi) {
        const DomainQuestion& question = questions[qi];
        RefinementTrace trace;
        trace.question_id = question.id;
        bool judge_failed = false;

        for (int n = 0; n < options.max_iters; ++n) {
            std::pair<std::string, std::string> attempt;
            try {
                if (n == 0) {
                    attempt = initial_attempt(model, question, options.params);
                } else {
                    attempt = guided_attempt(model, question, trace,
                                             *trace.steps.back().feedback.guide,
                                             options.params);
                }
            } catch (const Error& e) {
                std::cerr << "refine: question " << question.id << " attempt " << n
                          << " failed: " << e.what() << "\n";
                break;
            }

            RefinementStep step;
            step.iteration = n;
            step.rationale = attempt.first;
            step.answer = attempt.second;
            try {
                step.feedback =
                    judge_attempt(judge, question, step.rationale, step.answer, options.params);
            } catch (const FormatError& e) {
                std::cerr << "refine: question " << question.id
                          << " judge output unparsable: " << e.what() << "\n";
                step.feedback = JudgeFeedback{JudgeStatus::incorrect,
                                              "judge output unparsable after retry",
                                              std::string("unavailable")};
                trace.steps.push_back(std::move(step));
                judge_failed = true;
                break;
            }
            trace.steps.push_back(std::move(step));
            if (trace.steps.back().feedback.status == JudgeStatus::correct) {
                trace.outcome = Outcome::solved;
                break;
            }
        }

        bool persist_trace = !trace.steps.empty();
        if (persist_trace) {
            io::append_line(paths.traces, to_json(trace).dump());
        }
        if (trace.outcome == Outcome::solved) {
            TrainingExample example = trace_to_example(question, trace);
            io::append_line(paths.examples, to_json(example).dump());
            buffer.push_back(std::move(example));
            ++summary.solved;
        } else {
            ++summary.exhausted;
            if (judge_failed) {
                ++summary.judge_failures;
            }
        }
        progress.processed = qi + 1;
        save_progress(paths.progress, progress);

        if (buffer.size() >= K) {
            flush();
        }
    }

    // Algorithm-level flushing strands a final partial batch; train on it
    // rather than discarding verified data.
    if (!buffer.empty()) {
        flush();
    }
    summary.flushes = progress.flushes;
    return summary;
}

} // namespace evo::refine
