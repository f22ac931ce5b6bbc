// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "evo/errors.hpp"
#include "evo/io.hpp"
#include "evo/selfevolve.hpp"
#include "test_util.hpp"

using namespace evo;
using namespace evo::selfevolve;
using evo::test::TempDir;
using evo::test::make_question;
using toylm::ToyLmParams;
using toylm::Vocab;

namespace {

// Model with a planted trap: from the prompt token, "bad" is locally the best
// next token but leads into a weak continuation, while "good" leads to an
// immediate high-probability EOS. Greedy walks into the trap; the beam finds
// the better-scoring path.
ToyLmParams trap_model(const Vocab& v) {
    ToyLmParams params(v, 1);
    auto id = [&](const char* t) { return v.find(t).value(); };

    Eigen::VectorXd start = Eigen::VectorXd::Constant(static_cast<long>(v.size()), -8.0);
    start[id("bad")] = 2.0;
    start[id("good")] = 1.8; // slightly behind at step one
    params.row({id("prompt")}) = start;
    params.row({v.bos()}) = start;

    Eigen::VectorXd after_bad = Eigen::VectorXd::Zero(static_cast<long>(v.size()));
    params.row({id("bad")}) = after_bad; // uniform: weak continuation

    Eigen::VectorXd after_good = Eigen::VectorXd::Constant(static_cast<long>(v.size()), -8.0);
    after_good[v.eos()] = 6.0; // near-certain EOS
    params.row({id("good")}) = after_good;
    return params;
}

Vocab trap_vocab() {
    return Vocab::with_words({"prompt", "good", "bad"});
}

} // namespace

TEST_CASE("a pruned greedy prefix yields a contrastive pair") {
    Vocab v = trap_vocab();
    auto params = trap_model(v);
    auto q = make_question("q1", "prompt", corpus::Category::ml);

    auto pair = build_preference_pair(params, q, 4, 2);
    REQUIRE(pair.has_value());
    auto id = [&](const char* t) { return v.find(t).value(); };
    CHECK(pair->rejected_tokens[0] == id("bad")); // greedy falls for the trap
    CHECK(pair->chosen_tokens ==
          std::vector<toylm::TokenId>{id("good"), v.eos()});
    CHECK(pair->chosen_score > pair->rejected_score);

    // Exhaustive check: the chosen completion is the best avg-logprob output.
    auto prompt_tokens = toylm::tokenize(v, "prompt");
    std::vector<std::vector<toylm::TokenId>> all;
    std::vector<toylm::TokenId> current;
    evo::test::oracle_enumerate_outputs(params, 2, current, all);
    double best_avg = -1e300;
    std::vector<toylm::TokenId> best_seq;
    for (const auto& seq : all) {
        double avg = evo::test::oracle_sequence_logprob(params, prompt_tokens, seq) /
                     static_cast<double>(seq.size());
        if (avg > best_avg) {
            best_avg = avg;
            best_seq = seq;
        }
    }
    CHECK(pair->chosen_tokens == best_seq);
    CHECK(pair->chosen_score == doctest::Approx(best_avg).epsilon(1e-10));
}

TEST_CASE("a peaked model where beam agrees with greedy yields no pair") {
    Vocab v = trap_vocab();
    ToyLmParams params(v, 1);
    auto id = [&](const char* t) { return v.find(t).value(); };
    Eigen::VectorXd start = Eigen::VectorXd::Constant(static_cast<long>(v.size()), -8.0);
    start[id("good")] = 4.0;
    params.row({id("prompt")}) = start;
    Eigen::VectorXd after_good = Eigen::VectorXd::Constant(static_cast<long>(v.size()), -8.0);
    after_good[v.eos()] = 6.0;
    params.row({id("good")}) = after_good;

    auto q = make_question("q1", "prompt", corpus::Category::ml);
    CHECK(!build_preference_pair(params, q, 4, 3).has_value());
}

TEST_CASE("pair construction requires width >= 2") {
    Vocab v = trap_vocab();
    auto params = trap_model(v);
    auto q = make_question("q1", "prompt", corpus::Category::ml);
    CHECK_THROWS_AS(build_preference_pair(params, q, 1, 2), ValidationError);
}

TEST_CASE("run_self_evolution is an explicit no-op when no pairs arise") {
    TempDir tmp("sev");
    Vocab v = trap_vocab();
    ToyLmParams params(v, 1);
    auto id = [&](const char* t) { return v.find(t).value(); };
    Eigen::VectorXd start = Eigen::VectorXd::Constant(static_cast<long>(v.size()), -8.0);
    start[id("good")] = 4.0;
    params.row({id("prompt")}) = start;
    Eigen::VectorXd after_good = Eigen::VectorXd::Constant(static_cast<long>(v.size()), -8.0);
    after_good[v.eos()] = 6.0;
    params.row({id("good")}) = after_good;
    ToyLmParams before = params;

    std::vector<corpus::DomainQuestion> qs{make_question("q1", "prompt", corpus::Category::ml)};
    SelfEvolveOptions options;
    options.width = 4;
    options.max_len = 3;
    auto summary = run_self_evolution(qs, params, options, tmp.file("pairs.jsonl"));
    CHECK(summary.pairs == 0);
    CHECK(summary.skipped == 1);
    CHECK(!summary.margin_before.has_value());
    CHECK(!summary.margin_after.has_value());
    CHECK(params == before); // model untouched
    CHECK(io::read_jsonl(tmp.file("pairs.jsonl")).empty());
}

TEST_CASE("contrastive training raises the margin on the trap fixture") {
    TempDir tmp("sev");
    Vocab v = trap_vocab();
    auto params = trap_model(v);
    std::vector<corpus::DomainQuestion> qs;
    for (int i = 0; i < 8; ++i) {
        qs.push_back(make_question("q" + std::to_string(i), "prompt", corpus::Category::ml));
    }
    SelfEvolveOptions options;
    options.width = 4;
    options.max_len = 2;
    options.epochs = 20;
    options.lr = 0.1;
    auto summary = run_self_evolution(qs, params, options, tmp.file("pairs.jsonl"));
    CHECK(summary.pairs == 8);
    REQUIRE(summary.margin_before.has_value());
    REQUIRE(summary.margin_after.has_value());
    CHECK(*summary.margin_after > *summary.margin_before);
}

TEST_CASE("persisted pairs satisfy the pair invariants") {
    TempDir tmp("sev");
    Vocab v = trap_vocab();
    auto params = trap_model(v);
    std::vector<corpus::DomainQuestion> qs{
        make_question("q1", "prompt", corpus::Category::ml),
        make_question("q2", "prompt good", corpus::Category::dl),
    };
    SelfEvolveOptions options;
    options.width = 4;
    options.max_len = 2;
    run_self_evolution(qs, params, options, tmp.file("pairs.jsonl"));
    for (const auto& rec : io::read_jsonl(tmp.file("pairs.jsonl"))) {
        auto pair = pair_from_json(rec);
        CHECK(pair.chosen_tokens != pair.rejected_tokens);
        CHECK(pair.chosen_score >= pair.rejected_score);
    }
}

TEST_CASE("identical fixtures produce byte-identical pair files") {
    TempDir tmp("sev");
    std::vector<corpus::DomainQuestion> qs;
    for (int i = 0; i < 4; ++i) {
        qs.push_back(make_question("q" + std::to_string(i), "prompt", corpus::Category::ml));
    }
    SelfEvolveOptions options;
    options.width = 4;
    options.max_len = 2;
    options.epochs = 2;

    Vocab v = trap_vocab();
    auto p1 = trap_model(v);
    run_self_evolution(qs, p1, options, tmp.file("a.jsonl"));
    auto p2 = trap_model(v);
    run_self_evolution(qs, p2, options, tmp.file("b.jsonl"));
    CHECK(io::read_file(tmp.file("a.jsonl")) == io::read_file(tmp.file("b.jsonl")));
    CHECK(p1 == p2); // training itself is deterministic
}
