// SPDX-License-Identifier: Apache-2.0
#include "evo/corpus.hpp"

#include <algorithm>
#include <random>
#include <unordered_set>

#include "evo/errors.hpp"
#include "evo/io.hpp"

namespace evo::corpus {

Category category_from_string(const std::string& s) {
    if (s == "ML") return Category::ml;
    if (s == "DL") return Category::dl;
    if (s == "NLP") return Category::nlp;
    if (s == "CV") return Category::cv;
    throw ValidationError("unknown category: \"" + s + "\"");
}

std::string to_string(Category c) {
    switch (c) {
        case Category::ml: return "ML";
        case Category::dl: return "DL";
        case Category::nlp: return "NLP";
        case Category::cv: return "CV";
    }
    return "ML";
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

nlohmann::ordered_json to_json(const DomainQuestion& q) {
    return nlohmann::ordered_json{
        {"id", q.id},
        {"title", q.title},
        {"description", q.description},
        {"category", to_string(q.category)},
    };
}

DomainQuestion question_from_json(const nlohmann::ordered_json& j) {
    DomainQuestion q;
    q.id = j.at("id").get<std::string>();
    q.title = j.at("title").get<std::string>();
    q.description = j.value("description", std::string{});
    q.category = category_from_string(j.at("category").get<std::string>());
    if (q.id.empty()) {
        throw ValidationError("question id must be non-empty");
    }
    if (q.title.empty()) {
        throw ValidationError("question title must be non-empty (id " + q.id + ")");
    }
    return q;
}

std::string question_prompt_text(const DomainQuestion& q) {
    if (q.description.empty()) {
        return q.title;
    }
    return q.title + "\n" + q.description;
}

std::vector<DomainQuestion> load_corpus(const fs::path& path) {
    std::vector<DomainQuestion> questions;
    std::unordered_set<std::string> seen_ids;
    std::size_t lineno = 0;
    for (const std::string& line : io::read_lines(path)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        auto j = nlohmann::ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": malformed corpus line");
        }
        DomainQuestion q;
        try {
            q = question_from_json(j);
        } catch (const Error& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " +
                                  e.what());
        }
        if (!seen_ids.insert(q.id).second) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": duplicate question id \"" + q.id + "\"");
        }
        questions.push_back(std::move(q));
    }
    return questions;
}

void save_corpus(const fs::path& path, const std::vector<DomainQuestion>& questions) {
    std::vector<nlohmann::ordered_json> records;
    records.reserve(questions.size());
    for (const auto& q : questions) {
        records.push_back(to_json(q));
    }
    io::write_jsonl_atomic(path, records);
}

namespace {

// Unbiased bounded draw; keeps the shuffle independent of the standard
// library's unspecified uniform_int_distribution algorithm.
std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::mt19937_64::max() - std::mt19937_64::max() % bound;
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % bound;
}

} // namespace

std::pair<std::vector<DomainQuestion>, std::vector<DomainQuestion>>
split_corpus(const std::vector<DomainQuestion>& questions, std::size_t test_size,
             std::uint64_t seed) {
    if (test_size > questions.size()) {
        throw ValidationError("test_size " + std::to_string(test_size) +
                              " exceeds corpus size " + std::to_string(questions.size()));
    }
    std::vector<std::size_t> order(questions.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(bounded_draw(rng, i));
        std::swap(order[i - 1], order[j]);
    }
    std::vector<bool> is_test(questions.size(), false);
    for (std::size_t k = 0; k < test_size; ++k) {
        is_test[order[k]] = true;
    }
    std::vector<DomainQuestion> train;
    std::vector<DomainQuestion> test;
    train.reserve(questions.size() - test_size);
    test.reserve(test_size);
    for (std::size_t i = 0; i < questions.size(); ++i) {
        DomainQuestion q = questions[i];
        q.split = is_test[i] ? Split::test : Split::train;
        (is_test[i] ? test : train).push_back(std::move(q));
    }
    return {std::move(train), std::move(test)};
}

CorpusStats category_stats(const std::vector<DomainQuestion>& questions) {
    CorpusStats stats;
    for (Category c : {Category::ml, Category::dl, Category::nlp, Category::cv}) {
        stats.count_per_category[c] = 0;
    }
    for (const auto& q : questions) {
        ++stats.count_per_category[q.category];
    }
    stats.total = static_cast<std::int64_t>(questions.size());
    return stats;
}

} // namespace evo::corpus
