// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace evo::corpus {

namespace fs = std::filesystem;

enum class Category { ml, dl, nlp, cv };
enum class Split { train, test, unassigned };

/// One domain question. Raw corpus files never carry a split; it is assigned
/// at runtime by split_corpus.
struct DomainQuestion {
    std::string id;
    std::string title;
    std::string description;
    Category category = Category::ml;
    Split split = Split::unassigned;
};

struct CorpusStats {
    std::map<Category, std::int64_t> count_per_category;
    std::int64_t total = 0;
};

Category category_from_string(const std::string& s);
std::string to_string(Category c);
std::string to_string(Split s);

nlohmann::ordered_json to_json(const DomainQuestion& q);
DomainQuestion question_from_json(const nlohmann::ordered_json& j);

/// Prompt-facing text of a question: the title, plus the description on a
/// following line when present.
std::string question_prompt_text(const DomainQuestion& q);

/// Load a line-delimited corpus file. Errors name the offending 1-based line.
std::vector<DomainQuestion> load_corpus(const fs::path& path);

/// Writer counterpart of load_corpus; load(save(qs)) round-trips.
void save_corpus(const fs::path& path, const std::vector<DomainQuestion>& questions);

/// Seeded shuffle then prefix-take. Returns (train, test), both in original
/// corpus order, with split fields set. Deterministic for a fixed seed.
std::pair<std::vector<DomainQuestion>, std::vector<DomainQuestion>>
split_corpus(const std::vector<DomainQuestion>& questions, std::size_t test_size,
             std::uint64_t seed);

CorpusStats category_stats(const std::vector<DomainQuestion>& questions);

} // namespace evo::corpus
