// SPDX-License-Identifier: Apache-2.0
#include "evo/judge.hpp"

#include <cctype>
#include <cstdio>
#include <iostream>

#include "evo/errors.hpp"
#include "evo/io.hpp"

namespace evo::judge {

namespace {

std::string capitalized(const std::string& word) {
    std::string out = word;
    if (!out.empty()) {
        out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    }
    return out;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

Choice flip(Choice c) {
    return c == Choice::A ? Choice::B : Choice::A;
}

std::string to_string(Choice c) {
    return c == Choice::A ? "A" : "B";
}

/// Reads a forced A/B selection. Brackets and trailing punctuation are
/// tolerated; ties are not.
Choice parse_choice(const std::string& value) {
    std::string v = trim(value);
    while (!v.empty() && (v.front() == '[' || v.front() == '(')) {
        v.erase(v.begin());
    }
    if (v.empty()) {
        throw FormatError("empty selection");
    }
    char c = v[0];
    bool terminal = v.size() == 1 || !std::isalnum(static_cast<unsigned char>(v[1]));
    if (c == 'A' && terminal) return Choice::A;
    if (c == 'B' && terminal) return Choice::B;
    throw FormatError("selection must be A or B, got: " + trim(value));
}

/// Value of the first "key" line at or after `from`; advances `from` past it.
std::optional<std::string> next_field(const std::string& text, const std::string& key,
                                      std::size_t& from) {
    std::size_t pos = text.find(key, from);
    if (pos == std::string::npos) {
        return std::nullopt;
    }
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) {
        eol = text.size();
    }
    from = eol;
    return trim(text.substr(pos + key.size(), eol - pos - key.size()));
}

} // namespace

std::vector<ChatMessage> make_pairwise_prompt(const DomainQuestion& question,
                                              const std::string& answer_a,
                                              const std::string& answer_b,
                                              bool strict_reminder) {
    if (answer_a.empty() || answer_b.empty()) {
        throw ValidationError("pairwise comparison requires two non-empty answers");
    }
    std::string user =
        "Domain Question: " + corpus::question_prompt_text(question) +
        "\n\nAnswer A (Model 1):\n" + answer_a + "\n\nAnswer B (Model 2):\n" + answer_b +
        "\n\nPlease compare these two answers and determine which one performs better in "
        "each of the following criteria. For each criterion, select the better answer (A "
        "or B) and briefly explain why.\n\n"
        "1. Accuracy: Which answer provides more accurate domain-specific information?\n"
        "Selection: [A/B]\nReason:\n\n"
        "2. Completeness: Which answer covers the essential aspects more thoroughly?\n"
        "Selection: [A/B]\nReason:\n\n"
        "3. Relevance: Which answer better addresses the domain-specific requirements?\n"
        "Selection: [A/B]\nReason:\n\n"
        "4. Coherence: Which answer presents information in a more logical and organized "
        "manner?\nSelection: [A/B]\nReason:\n\n"
        "5. Reliability: Which answer demonstrates better technical validity and "
        "trustworthiness?\nSelection: [A/B]\nReason:\n\n"
        "Overall Winner: [A/B]\n"
        "Key Differences: [Brief summary of main differences between the two answers]";
    if (strict_reminder) {
        user += "\n\nYour previous reply was missing selections. Every Selection line and "
                "the Overall Winner line must contain exactly A or B; ties are not "
                "allowed.";
    }
    return {{backend::Role::system,
             "You are an impartial domain reviewer comparing two answers."},
            {backend::Role::user, std::move(user)}};
}

std::vector<ChatMessage> make_score_prompt(const DomainQuestion& question,
                                           const std::string& answer, bool strict_reminder) {
    if (answer.empty()) {
        throw ValidationError("scoring requires a non-empty answer");
    }
    std::string user = "Domain Question: " + corpus::question_prompt_text(question) +
                       "\n\nAnswer:\n" + answer +
                       "\n\nRate the overall quality of this answer considering accuracy, "
                       "completeness, relevance, coherence and reliability. Respond "
                       "exactly in this format:\n"
                       "SCORE: <number from 1 to 10>\n"
                       "RATIONALE: <one or two sentences>";
    if (strict_reminder) {
        user += "\n\nYour previous reply had no usable SCORE line. The score must be a "
                "single number between 1 and 10.";
    }
    return {{backend::Role::system, "You are a strict domain reviewer scoring one answer."},
            {backend::Role::user, std::move(user)}};
}

PairwiseVerdict parse_pairwise_response(const std::string& completion, bool swapped) {
    PairwiseVerdict verdict;
    verdict.order = swapped ? PresentationOrder::BA : PresentationOrder::AB;
    std::size_t cursor = 0;
    for (const char* criterion : kCriteria) {
        std::size_t name_pos = completion.find(capitalized(criterion), cursor);
        if (name_pos == std::string::npos) {
            throw FormatError(std::string("pairwise verdict is missing the ") + criterion +
                              " section");
        }
        std::size_t field_cursor = name_pos;
        auto selection = next_field(completion, "Selection:", field_cursor);
        if (!selection) {
            throw FormatError(std::string("pairwise verdict has no selection for ") +
                              criterion);
        }
        CriterionVerdict cv;
        cv.selection = parse_choice(*selection);
        if (swapped) {
            cv.selection = flip(cv.selection);
        }
        std::size_t reason_cursor = field_cursor;
        if (auto reason = next_field(completion, "Reason:", reason_cursor)) {
            cv.reason = *reason;
        }
        verdict.per_criterion[criterion] = std::move(cv);
        cursor = field_cursor;
    }
    std::size_t overall_cursor = cursor;
    auto overall = next_field(completion, "Overall Winner:", overall_cursor);
    if (!overall) {
        throw FormatError("pairwise verdict has no Overall Winner line");
    }
    verdict.overall = parse_choice(*overall);
    if (swapped) {
        verdict.overall = flip(verdict.overall);
    }
    if (auto diff = next_field(completion, "Key Differences:", overall_cursor)) {
        verdict.key_differences = *diff;
    }
    return verdict;
}

ScoreVerdict parse_score_response(const std::string& completion) {
    std::size_t cursor = 0;
    auto score_text = next_field(completion, "SCORE:", cursor);
    if (!score_text || score_text->empty()) {
        throw FormatError("score response has no SCORE line");
    }
    char* end = nullptr;
    double value = std::strtod(score_text->c_str(), &end);
    if (end == score_text->c_str()) {
        throw FormatError("score is not numeric: " + *score_text);
    }
    if (value < 1.0 || value > 10.0) {
        throw FormatError("score out of range [1, 10]: " + *score_text);
    }
    ScoreVerdict verdict;
    verdict.score = value;
    verdict.rationale = next_field(completion, "RATIONALE:", cursor).value_or("");
    return verdict;
}

namespace {

PairwiseVerdict pairwise_compare_impl(const BackendHandle& judge,
                                      const DomainQuestion& question,
                                      const std::string& answer_a,
                                      const std::string& answer_b, bool swap,
                                      const GenerationParams& params, std::string* raw_out) {
    const std::string& first = swap ? answer_b : answer_a;
    const std::string& second = swap ? answer_a : answer_b;
    std::string completion =
        judge->chat(make_pairwise_prompt(question, first, second, false), params);
    if (raw_out) {
        *raw_out = completion;
    }
    try {
        return parse_pairwise_response(completion, swap);
    } catch (const FormatError&) {
        completion = judge->chat(make_pairwise_prompt(question, first, second, true), params);
        if (raw_out) {
            *raw_out = completion;
        }
        return parse_pairwise_response(completion, swap);
    }
}

nlohmann::ordered_json verdict_to_json(const PairwiseVerdict& verdict) {
    nlohmann::ordered_json criteria;
    for (const char* name : kCriteria) {
        const auto& cv = verdict.per_criterion.at(name);
        criteria[name] = {{"selection", to_string(cv.selection)}, {"reason", cv.reason}};
    }
    return {{"order", verdict.order == PresentationOrder::AB ? "AB" : "BA"},
            {"per_criterion", std::move(criteria)},
            {"overall", to_string(verdict.overall)},
            {"key_differences", verdict.key_differences}};
}

} // namespace

PairwiseVerdict pairwise_compare(const BackendHandle& judge, const DomainQuestion& question,
                                 const std::string& answer_a, const std::string& answer_b,
                                 bool swap, const GenerationParams& params) {
    return pairwise_compare_impl(judge, question, answer_a, answer_b, swap, params, nullptr);
}

ScoreVerdict absolute_score(const BackendHandle& judge, const DomainQuestion& question,
                            const std::string& answer, const GenerationParams& params) {
    std::string completion = judge->chat(make_score_prompt(question, answer, false), params);
    try {
        return parse_score_response(completion);
    } catch (const FormatError&) {
        completion = judge->chat(make_score_prompt(question, answer, true), params);
        return parse_score_response(completion);
    }
}

EvaluationReport aggregate_verdicts(const std::vector<PairwiseVerdict>& verdicts,
                                    std::size_t failed) {
    if (verdicts.empty()) {
        throw ValidationError("no verdicts to aggregate");
    }
    EvaluationReport report;
    report.n = verdicts.size();
    report.failed = failed;
    for (const char* criterion : kCriteria) {
        std::size_t wins_a = 0;
        for (const auto& v : verdicts) {
            if (v.per_criterion.at(criterion).selection == Choice::A) {
                ++wins_a;
            }
        }
        double pct_a =
            100.0 * static_cast<double>(wins_a) / static_cast<double>(verdicts.size());
        // Complement computed by subtraction so the pair sums to 100 exactly.
        report.per_criterion_win_rate[criterion] = CriterionRates{pct_a, 100.0 - pct_a};
    }
    return report;
}

EvaluationReport evaluate_pairwise(const std::vector<DomainQuestion>& test_set,
                                   const std::map<std::string, std::string>& answers_a,
                                   const std::map<std::string, std::string>& answers_b,
                                   const BackendHandle& judge, SwapPolicy swap_policy,
                                   const GenerationParams& params,
                                   const fs::path* verdict_log) {
    if (test_set.empty()) {
        throw ValidationError("pairwise evaluation requires a non-empty test set");
    }
    for (const auto& q : test_set) {
        if (!answers_a.count(q.id) || !answers_b.count(q.id)) {
            throw ValidationError("answer maps do not cover test question " + q.id);
        }
    }
    if (verdict_log) {
        io::write_file_atomic(*verdict_log, "");
    }

    std::vector<PairwiseVerdict> verdicts;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
        const auto& question = test_set[i];
        bool swap = swap_policy == SwapPolicy::alternate && (i % 2 == 1);
        std::string raw;
        try {
            PairwiseVerdict verdict =
                pairwise_compare_impl(judge, question, answers_a.at(question.id),
                                      answers_b.at(question.id), swap, params, &raw);
            if (verdict_log) {
                nlohmann::ordered_json entry{{"question_id", question.id},
                                             {"raw", raw},
                                             {"verdict", verdict_to_json(verdict)}};
                io::append_line(*verdict_log, entry.dump());
            }
            verdicts.push_back(std::move(verdict));
        } catch (const Error& e) {
            ++failed;
            std::cerr << "judge: question " << question.id << " verdict failed: " << e.what()
                      << "\n";
            if (verdict_log) {
                nlohmann::ordered_json entry{
                    {"question_id", question.id}, {"raw", raw}, {"error", e.what()}};
                io::append_line(*verdict_log, entry.dump());
            }
        }
    }
    return aggregate_verdicts(verdicts, failed);
}

double evaluate_scores(const std::vector<ScoreItem>& items, const BackendHandle& judge,
                       const GenerationParams& params, std::size_t* failed_out) {
    if (items.empty()) {
        throw ValidationError("score evaluation requires a non-empty item list");
    }
    double sum = 0.0;
    std::size_t parsed = 0;
    std::size_t failed = 0;
    for (const auto& item : items) {
        try {
            sum += absolute_score(judge, item.question, item.answer, params).score;
            ++parsed;
        } catch (const Error& e) {
            ++failed;
            std::cerr << "judge: score for question " << item.question.id
                      << " failed: " << e.what() << "\n";
        }
    }
    if (failed_out) {
        *failed_out = failed;
    }
    if (parsed == 0) {
        throw FormatError("every score request failed");
    }
    return sum / static_cast<double>(parsed);
}

std::string format_pct(double pct) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f%%", pct);
    return buf;
}

std::string format_score(double score) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", score);
    return buf;
}

std::string format_report(const EvaluationReport& report) {
    std::string out = "n=" + std::to_string(report.n) +
                      " failed=" + std::to_string(report.failed) + "\n";
    for (const char* criterion : kCriteria) {
        const auto& rates = report.per_criterion_win_rate.at(criterion);
        out += std::string(criterion) + ": A " + format_pct(rates.pct_a) + " / B " +
               format_pct(rates.pct_b) + "\n";
    }
    if (report.mean_score_a) {
        out += "mean score A: " + format_score(*report.mean_score_a) + "\n";
    }
    if (report.mean_score_b) {
        out += "mean score B: " + format_score(*report.mean_score_b) + "\n";
    }
    return out;
}

nlohmann::ordered_json report_to_json(const EvaluationReport& report) {
    nlohmann::ordered_json criteria;
    for (const char* name : kCriteria) {
        const auto& rates = report.per_criterion_win_rate.at(name);
        criteria[name] = {{"pct_a", rates.pct_a}, {"pct_b", rates.pct_b}};
    }
    nlohmann::ordered_json j{{"n", report.n}, {"failed", report.failed},
                             {"per_criterion_win_rate", std::move(criteria)}};
    if (report.mean_score_a) {
        j["mean_score_a"] = *report.mean_score_a;
    }
    if (report.mean_score_b) {
        j["mean_score_b"] = *report.mean_score_b;
    }
    return j;
}

} // namespace evo::judge
