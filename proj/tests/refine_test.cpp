// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "evo/errors.hpp"
#include "evo/io.hpp"
#include "evo/refine.hpp"
#include "evo/trainers.hpp"
#include "test_util.hpp"

using namespace evo;
using namespace evo::refine;
using backend::ResponseFn;
using backend::ScriptedBackend;
using backend::ScriptedCall;
using evo::test::TempDir;
using evo::test::make_question;

namespace {

GenerationParams quick_params() {
    GenerationParams p;
    p.max_tokens = 256;
    return p;
}

std::vector<corpus::DomainQuestion> n_questions(int n) {
    std::vector<corpus::DomainQuestion> qs;
    for (int i = 0; i < n; ++i) {
        qs.push_back(make_question("q" + std::to_string(i), "question " + std::to_string(i),
                                   corpus::Category::ml));
    }
    return qs;
}

/// Model backend producing parseable chain-of-thought attempts.
backend::BackendHandle attempt_model() {
    auto sb = std::make_shared<ScriptedBackend>("model");
    sb->register_rule("", ResponseFn([](const ScriptedCall& call) {
                          return "Step-by-step reasoning (len " +
                                 std::to_string(call.joined.size()) + ")\n### ANSWER: 42";
                      }));
    return sb;
}

std::string correct_verdict() {
    return "STATUS: CORRECT\nEXPLANATION: sound.";
}

std::string incorrect_verdict(const std::string& guide) {
    return "STATUS: INCORRECT\nEXPLANATION: flawed reasoning.\nGUIDE: " + guide;
}

/// Judge granting CORRECT on a per-question attempt schedule: attempts_needed
/// is how many judged attempts each question takes before CORRECT.
backend::BackendHandle scheduled_judge(int attempts_needed) {
    auto sb = std::make_shared<ScriptedBackend>("judge");
    auto counts = std::make_shared<std::map<std::string, int>>();
    sb->register_rule(
        "STATUS", ResponseFn([counts, attempts_needed](const ScriptedCall& call) {
            // Track attempts per question by its title embedded in the prompt.
            std::size_t pos = call.joined.find("question ");
            std::string key = call.joined.substr(pos, call.joined.find('\n', pos) - pos);
            int n = ++(*counts)[key];
            if (n >= attempts_needed) {
                return correct_verdict();
            }
            return incorrect_verdict("Consider edge cases first.");
        }));
    return sb;
}

class RecordingTrainer : public Trainer {
public:
    void train_batch(const std::vector<TrainingExample>& batch) override {
        batches.push_back(batch);
    }
    std::vector<std::vector<TrainingExample>> batches;
};

/// Trainer that fails on its Nth invocation (1-based), simulating a crash
/// mid-run.
class FailingTrainer : public Trainer {
public:
    FailingTrainer(int fail_at, RecordingTrainer& inner) : fail_at_(fail_at), inner_(inner) {}
    void train_batch(const std::vector<TrainingExample>& batch) override {
        if (static_cast<int>(inner_.batches.size()) + 1 == fail_at_) {
            throw BackendError("simulated trainer crash");
        }
        inner_.train_batch(batch);
    }

private:
    int fail_at_;
    RecordingTrainer& inner_;
};

RefinePaths paths_in(const TempDir& tmp) {
    return RefinePaths{tmp.file("traces.jsonl"), tmp.file("examples.jsonl"),
                       tmp.file("progress.json")};
}

RefineOptions options_nk(int n, int k) {
    RefineOptions o;
    o.max_iters = n;
    o.buffer_size = k;
    o.params = quick_params();
    return o;
}

} // namespace

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

TEST_CASE("parse_attempt splits at the delimiter") {
    auto [rationale, answer] = parse_attempt("Reasoning first.\n### ANSWER: 42");
    CHECK(rationale == "Reasoning first.");
    CHECK(answer == "42");
}

TEST_CASE("parse_attempt fails without a delimiter, carrying the raw text") {
    try {
        parse_attempt("no answer block here");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("no answer block here") != std::string::npos);
    }
}

TEST_CASE("parse_attempt lets the last delimiter block win") {
    auto [rationale, answer] =
        parse_attempt("draft\n### ANSWER: 41\nwait, revising\n### ANSWER: 42");
    CHECK(answer == "42");
    CHECK(rationale.find("revising") != std::string::npos);
}

TEST_CASE("parse_judge_feedback handles both statuses") {
    auto correct = parse_judge_feedback("STATUS: CORRECT\nEXPLANATION: sound.");
    CHECK(correct.status == JudgeStatus::correct);
    CHECK(correct.explanation == "sound.");
    CHECK(!correct.guide.has_value());

    auto incorrect = parse_judge_feedback(
        "STATUS: INCORRECT\nEXPLANATION: wrong.\nGUIDE: Recheck the base case.");
    CHECK(incorrect.status == JudgeStatus::incorrect);
    REQUIRE(incorrect.guide.has_value());
    CHECK(*incorrect.guide == "Recheck the base case.");

    CHECK_THROWS_AS(parse_judge_feedback("garbage"), FormatError);
    CHECK_THROWS_AS(parse_judge_feedback("STATUS: INCORRECT\nEXPLANATION: no guide"),
                    FormatError);
}

TEST_CASE("judge_attempt re-asks once then fails") {
    auto judge = std::make_shared<ScriptedBackend>("judge");
    judge->register_rule("STATUS",
                         std::vector<std::string>{"garbage", "garbage"});
    auto q = make_question("q1", "anything", corpus::Category::ml);
    CHECK_THROWS_AS(judge_attempt(judge, q, "r", "a", quick_params()), FormatError);

    auto recovering = std::make_shared<ScriptedBackend>("judge2");
    recovering->register_rule("STATUS",
                              std::vector<std::string>{"garbage", correct_verdict()});
    auto feedback = judge_attempt(recovering, q, "r", "a", quick_params());
    CHECK(feedback.status == JudgeStatus::correct);
}

// ---------------------------------------------------------------------------
// Prompt construction
// ---------------------------------------------------------------------------

TEST_CASE("guided prompt embeds the question, previous attempt, feedback and guide") {
    auto q = make_question("q1", "Unique question title", corpus::Category::ml,
                           "unique description");
    RefinementStep prev;
    prev.rationale = "UNIQUE-RATIONALE";
    prev.answer = "UNIQUE-ANSWER";
    prev.feedback = JudgeFeedback{JudgeStatus::incorrect, "UNIQUE-EXPLANATION",
                                  std::string("UNIQUE-GUIDE")};
    auto messages = make_guided_prompt(q, prev, "Consider edge cases first.");
    const std::string& body = messages[1].content;
    for (const char* block : {"Unique question title", "unique description",
                              "UNIQUE-RATIONALE", "UNIQUE-ANSWER", "UNIQUE-EXPLANATION",
                              "Consider edge cases first."}) {
        CHECK(body.find(block) != std::string::npos);
    }
}

TEST_CASE("guided_attempt increments iterations via the run loop") {
    TempDir tmp("refine");
    auto judge = scheduled_judge(2); // CORRECT on the second judged attempt
    RecordingTrainer trainer;
    auto summary = run_refinement(n_questions(3), attempt_model(), judge, options_nk(3, 10),
                                  trainer, paths_in(tmp));
    CHECK(summary.solved == 3);
    for (const auto& rec : io::read_jsonl(tmp.file("traces.jsonl"))) {
        auto trace = trace_from_json(rec);
        REQUIRE(trace.steps.size() == 2);
        CHECK(trace.steps[0].iteration == 0);
        CHECK(trace.steps[1].iteration == 1);
        CHECK(trace.steps[0].feedback.status == JudgeStatus::incorrect);
        CHECK(trace.steps[1].feedback.status == JudgeStatus::correct);
    }
}

// ---------------------------------------------------------------------------
// trace_to_example
// ---------------------------------------------------------------------------

namespace {

RefinementTrace solved_trace(int steps) {
    RefinementTrace trace;
    trace.question_id = "q1";
    for (int i = 0; i < steps; ++i) {
        RefinementStep step;
        step.iteration = i;
        step.rationale = "rationale " + std::to_string(i);
        step.answer = "answer " + std::to_string(i);
        if (i + 1 == steps) {
            step.feedback = JudgeFeedback{JudgeStatus::correct, "ok", std::nullopt};
        } else {
            step.feedback = JudgeFeedback{JudgeStatus::incorrect, "bad",
                                          std::string("guide sentence ") + std::to_string(i)};
        }
        trace.steps.push_back(std::move(step));
    }
    trace.outcome = Outcome::solved;
    return trace;
}

std::size_t count_occurrences(const std::string& haystack, const std::string& needle) {
    std::size_t count = 0;
    for (std::size_t pos = haystack.find(needle); pos != std::string::npos;
         pos = haystack.find(needle, pos + 1)) {
        ++count;
    }
    return count;
}

} // namespace

TEST_CASE("one-step traces become marker-free examples") {
    auto q = make_question("q1", "title", corpus::Category::ml);
    auto example = trace_to_example(q, solved_trace(1));
    CHECK(example.target_text == "rationale 0\nanswer 0");
    for (const char* marker : kDiscourseMarkers) {
        CHECK(example.target_text.find(marker) == std::string::npos);
    }
}

TEST_CASE("three-step traces carry exactly two markers in cycling order and no guides") {
    auto q = make_question("q1", "title", corpus::Category::ml);
    auto trace = solved_trace(3);
    auto example = trace_to_example(q, trace);

    std::size_t marker_total = 0;
    for (const char* marker : kDiscourseMarkers) {
        marker_total += count_occurrences(example.target_text, marker);
    }
    CHECK(marker_total == 2);

    std::size_t first = example.target_text.find(kDiscourseMarkers[0]);
    std::size_t second = example.target_text.find(kDiscourseMarkers[1]);
    REQUIRE(first != std::string::npos);
    REQUIRE(second != std::string::npos);
    CHECK(first < second); // cycling order

    // The judge's text never leaks into the target.
    for (const auto& step : trace.steps) {
        if (step.feedback.guide) {
            CHECK(example.target_text.find(*step.feedback.guide) == std::string::npos);
        }
        CHECK(example.target_text.find(step.feedback.explanation) == std::string::npos);
    }
    // Only the final answer survives.
    CHECK(example.target_text.find("answer 2") != std::string::npos);
    CHECK(example.target_text.find("answer 0") == std::string::npos);
}

TEST_CASE("trace_to_example is pure and rejects exhausted traces") {
    auto q = make_question("q1", "title", corpus::Category::ml);
    auto a = trace_to_example(q, solved_trace(2));
    auto b = trace_to_example(q, solved_trace(2));
    CHECK(a.target_text == b.target_text);
    CHECK(a.prompt_text == b.prompt_text);

    auto exhausted = solved_trace(2);
    exhausted.outcome = Outcome::exhausted;
    CHECK_THROWS_AS(trace_to_example(q, exhausted), ValidationError);
}

// ---------------------------------------------------------------------------
// run_refinement
// ---------------------------------------------------------------------------

TEST_CASE("25 first-try solves with K=10 flush as 10, 10, 5") {
    TempDir tmp("refine");
    RecordingTrainer trainer;
    auto summary = run_refinement(n_questions(25), attempt_model(), scheduled_judge(1),
                                  options_nk(3, 10), trainer, paths_in(tmp));
    CHECK(summary.solved == 25);
    CHECK(summary.exhausted == 0);

    // Counting oracle: ceil(25/10) invocations, all but the last exactly K.
    const std::size_t solved = 25, K = 10;
    std::size_t expected_flushes = (solved + K - 1) / K;
    CHECK(summary.flushes == expected_flushes);
    REQUIRE(trainer.batches.size() == expected_flushes);
    CHECK(trainer.batches[0].size() == 10);
    CHECK(trainer.batches[1].size() == 10);
    CHECK(trainer.batches[2].size() == 5);
}

TEST_CASE("an always-INCORRECT judge exhausts every question at the iteration bound") {
    TempDir tmp("refine");
    auto judge = std::make_shared<ScriptedBackend>("judge");
    judge->register_rule("STATUS", incorrect_verdict("try harder"));
    RecordingTrainer trainer;
    auto summary = run_refinement(n_questions(4), attempt_model(), judge, options_nk(3, 10),
                                  trainer, paths_in(tmp));
    CHECK(summary.solved == 0);
    CHECK(summary.exhausted == 4);
    CHECK(summary.flushes == 0);
    CHECK(trainer.batches.empty());

    for (const auto& rec : io::read_jsonl(tmp.file("traces.jsonl"))) {
        auto trace = trace_from_json(rec);
        CHECK(trace.steps.size() == 3); // exactly N
        CHECK(trace.outcome == Outcome::exhausted);
    }
    CHECK(io::read_file(tmp.file("examples.jsonl")).empty());
}

TEST_CASE("traces never exceed N steps and CORRECT appears only terminally") {
    TempDir tmp("refine");
    RecordingTrainer trainer;
    run_refinement(n_questions(6), attempt_model(), scheduled_judge(3), options_nk(3, 4),
                   trainer, paths_in(tmp));
    for (const auto& rec : io::read_jsonl(tmp.file("traces.jsonl"))) {
        auto trace = trace_from_json(rec);
        CHECK(trace.steps.size() <= 3);
        for (std::size_t i = 0; i < trace.steps.size(); ++i) {
            if (trace.steps[i].feedback.status == JudgeStatus::correct) {
                CHECK(i + 1 == trace.steps.size());
            }
        }
        bool solved = trace.outcome == Outcome::solved;
        CHECK(solved == (trace.steps.back().feedback.status == JudgeStatus::correct));
    }
}

TEST_CASE("marker hygiene holds for every persisted example") {
    TempDir tmp("refine");
    RecordingTrainer trainer;
    run_refinement(n_questions(8), attempt_model(), scheduled_judge(2), options_nk(3, 3),
                   trainer, paths_in(tmp));

    std::map<std::string, RefinementTrace> traces;
    for (const auto& rec : io::read_jsonl(tmp.file("traces.jsonl"))) {
        auto trace = trace_from_json(rec);
        traces[trace.question_id] = trace;
    }
    auto examples = io::read_jsonl(tmp.file("examples.jsonl"));
    CHECK(!examples.empty());
    for (const auto& rec : examples) {
        auto ex = example_from_json(rec);
        for (const auto& [id, trace] : traces) {
            for (const auto& step : trace.steps) {
                if (step.feedback.guide) {
                    CHECK(ex.target_text.find(*step.feedback.guide) == std::string::npos);
                }
            }
        }
    }
}

TEST_CASE("a judge that emits garbage twice exhausts that question and the run continues") {
    TempDir tmp("refine");
    auto judge = std::make_shared<ScriptedBackend>("judge");
    judge->register_rule("STATUS", correct_verdict());
    judge->register_rule("question 1", std::vector<std::string>{"garbage", "garbage"});
    RecordingTrainer trainer;
    auto summary = run_refinement(n_questions(3), attempt_model(), judge, options_nk(3, 10),
                                  trainer, paths_in(tmp));
    CHECK(summary.solved == 2);
    CHECK(summary.exhausted == 1);
    CHECK(summary.judge_failures == 1);
}

TEST_CASE("a trainer crash aborts the run; resume never re-trains flushed batches") {
    TempDir tmp("refine");
    auto paths = paths_in(tmp);
    RecordingTrainer recorded;
    FailingTrainer failing(3, recorded); // crash on the third flush (questions 21-30)

    CHECK_THROWS_AS(run_refinement(n_questions(35), attempt_model(), scheduled_judge(1),
                                   options_nk(3, 10), failing, paths),
                    BackendError);
    CHECK(recorded.batches.size() == 2); // two flushes succeeded before the crash

    // Resume with a healthy trainer: the pending full buffer is flushed first,
    // the remaining questions run, and the partial tail is flushed once.
    auto summary = run_refinement(n_questions(35), attempt_model(), scheduled_judge(1),
                                  options_nk(3, 10), recorded, paths, /*resume=*/true);
    REQUIRE(recorded.batches.size() == 4);
    CHECK(recorded.batches[2].size() == 10);
    CHECK(recorded.batches[3].size() == 5);
    CHECK(summary.flushes == 4); // logical-run total

    std::multiset<std::string> seen;
    for (const auto& batch : recorded.batches) {
        for (const auto& ex : batch) {
            seen.insert(ex.prompt_text);
        }
    }
    std::multiset<std::string> want;
    for (const auto& rec : io::read_jsonl(paths.examples)) {
        want.insert(example_from_json(rec).prompt_text);
    }
    CHECK(seen == want); // every example trained exactly once across both runs
    CHECK(summary.solved == 5); // only the post-crash questions
}

TEST_CASE("resume after completion does nothing") {
    TempDir tmp("refine");
    auto paths = paths_in(tmp);
    RecordingTrainer trainer;
    run_refinement(n_questions(5), attempt_model(), scheduled_judge(1), options_nk(3, 2),
                   trainer, paths);
    std::size_t flushed = trainer.batches.size();
    auto summary = run_refinement(n_questions(5), attempt_model(), scheduled_judge(1),
                                  options_nk(3, 2), trainer, paths, /*resume=*/true);
    CHECK(trainer.batches.size() == flushed);
    CHECK(summary.solved == 0); // nothing left to process
}

TEST_CASE("the toy backend serves greedy decodes through the chat interface") {
    auto vocab = toylm::Vocab::with_words({"go", "stop"});
    auto params = std::make_shared<toylm::ToyLmParams>(vocab, 1);
    auto go = vocab.find("go").value();
    auto stop = vocab.find("stop").value();
    Eigen::VectorXd after_go = Eigen::VectorXd::Constant(static_cast<long>(vocab.size()), -6.0);
    after_go[stop] = 3.0;
    params->row({go}) = after_go;
    Eigen::VectorXd after_stop =
        Eigen::VectorXd::Constant(static_cast<long>(vocab.size()), -6.0);
    after_stop[vocab.eos()] = 3.0;
    params->row({stop}) = after_stop;

    trainers::ToyBackend toy(params);
    CHECK(toy.kind() == backend::BackendKind::toy);
    GenerationParams gen;
    gen.max_tokens = 4;
    CHECK(toy.chat({{backend::Role::user, "go"}}, gen) == "stop");

    // A model that immediately emits EOS produces an empty completion.
    auto empty_params = std::make_shared<toylm::ToyLmParams>(vocab, 1);
    Eigen::VectorXd eos_row = Eigen::VectorXd::Constant(static_cast<long>(vocab.size()), -6.0);
    eos_row[vocab.eos()] = 3.0;
    empty_params->row({go}) = eos_row;
    trainers::ToyBackend empty_toy(empty_params);
    CHECK_THROWS_AS(empty_toy.chat({{backend::Role::user, "go"}}, gen), BackendError);
}

TEST_CASE("run_refinement validates options") {
    TempDir tmp("refine");
    RecordingTrainer trainer;
    CHECK_THROWS_AS(run_refinement(n_questions(1), attempt_model(), scheduled_judge(1),
                                   options_nk(0, 10), trainer, paths_in(tmp)),
                    ValidationError);
    CHECK_THROWS_AS(run_refinement(n_questions(1), attempt_model(), scheduled_judge(1),
                                   options_nk(3, 0), trainer, paths_in(tmp)),
                    ValidationError);
}
