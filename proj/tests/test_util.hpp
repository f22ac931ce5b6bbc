// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "evo/corpus.hpp"
#include "evo/toylm.hpp"

namespace evo::test {

namespace fs = std::filesystem;

/// Unique scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        dir_ = fs::temp_directory_path() /
               ("evo_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(dir_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(dir_, ec);
    }
    const fs::path& path() const { return dir_; }
    fs::path file(const std::string& name) const { return dir_ / name; }

private:
    fs::path dir_;
};

inline corpus::DomainQuestion make_question(const std::string& id, const std::string& title,
                                            corpus::Category cat = corpus::Category::ml,
                                            const std::string& description = "") {
    corpus::DomainQuestion q;
    q.id = id;
    q.title = title;
    q.description = description;
    q.category = cat;
    return q;
}

/// Toy model with logits drawn from N(0, scale) on every context reachable
/// with sequences over the full vocab, up to the given depth.
inline toylm::ToyLmParams random_params(const toylm::Vocab& vocab, int order,
                                        std::uint32_t seed, int depth, double scale = 1.5) {
    toylm::ToyLmParams params(vocab, order);
    std::mt19937 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);

    const auto vocab_size = static_cast<toylm::TokenId>(vocab.size());
    std::vector<std::vector<toylm::TokenId>> contexts;
    // Enumerate all order-length windows over {BOS-padded prefixes} x vocab.
    std::vector<toylm::TokenId> ctx(static_cast<std::size_t>(order), vocab.bos());
    contexts.push_back(ctx);
    for (int d = 0; d < depth; ++d) {
        std::vector<std::vector<toylm::TokenId>> next;
        for (const auto& c : contexts) {
            for (toylm::TokenId t = 0; t < vocab_size; ++t) {
                std::vector<toylm::TokenId> shifted(c.begin() + 1, c.end());
                shifted.push_back(t);
                next.push_back(std::move(shifted));
            }
        }
        for (auto& c : next) {
            contexts.push_back(std::move(c));
        }
        if (contexts.size() > 4096) {
            break;
        }
    }
    std::sort(contexts.begin(), contexts.end());
    contexts.erase(std::unique(contexts.begin(), contexts.end()), contexts.end());
    for (const auto& c : contexts) {
        Eigen::VectorXd& row = params.row(c);
        for (Eigen::Index i = 0; i < row.size(); ++i) {
            row[i] = dist(rng);
        }
    }
    return params;
}

// ---------------------------------------------------------------------------
// Independent oracles (test-local math; no reuse of evo::toylm internals).
// ---------------------------------------------------------------------------

inline std::vector<double> oracle_log_softmax(const std::vector<double>& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - m);
    double lse = m + std::log(sum);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
    return out;
}

inline std::vector<double> oracle_row(const toylm::ToyLmParams& params,
                                      const std::vector<toylm::TokenId>& ctx) {
    Eigen::VectorXd row = params.logits(ctx);
    return std::vector<double>(row.data(), row.data() + row.size());
}

/// Context window computed independently of ToyLmParams::context_at.
inline std::vector<toylm::TokenId> oracle_context(const std::vector<toylm::TokenId>& seq,
                                                  std::size_t pos, int order,
                                                  toylm::TokenId bos) {
    std::vector<toylm::TokenId> ctx;
    for (int k = order; k >= 1; --k) {
        std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(pos) - k;
        ctx.push_back(idx < 0 ? bos : seq[static_cast<std::size_t>(idx)]);
    }
    return ctx;
}

/// Total log-probability of `continuation` after `prefix`, from scratch.
inline double oracle_sequence_logprob(const toylm::ToyLmParams& params,
                                      const std::vector<toylm::TokenId>& prefix,
                                      const std::vector<toylm::TokenId>& continuation) {
    std::vector<toylm::TokenId> full = prefix;
    full.insert(full.end(), continuation.begin(), continuation.end());
    double total = 0.0;
    for (std::size_t pos = prefix.size(); pos < full.size(); ++pos) {
        auto ctx = oracle_context(full, pos, params.order(), params.vocab().bos());
        auto ls = oracle_log_softmax(oracle_row(params, ctx));
        total += ls[static_cast<std::size_t>(full[pos])];
    }
    return total;
}

/// Every sequence a decoder may emit: EOS only terminal, length <= max_len,
/// and either EOS-terminated or exactly max_len long.
inline void oracle_enumerate_outputs(const toylm::ToyLmParams& params, int max_len,
                                     std::vector<toylm::TokenId>& current,
                                     std::vector<std::vector<toylm::TokenId>>& out) {
    const auto vocab_size = static_cast<toylm::TokenId>(params.vocab().size());
    for (toylm::TokenId t = 0; t < vocab_size; ++t) {
        current.push_back(t);
        if (t == params.vocab().eos() || static_cast<int>(current.size()) == max_len) {
            out.push_back(current);
        } else {
            oracle_enumerate_outputs(params, max_len, current, out);
        }
        current.pop_back();
    }
}

/// Argmax decoder output by exhaustive enumeration + independent scoring.
inline std::vector<toylm::TokenId> oracle_best_sequence(
    const toylm::ToyLmParams& params, const std::vector<toylm::TokenId>& prefix,
    int max_len) {
    std::vector<std::vector<toylm::TokenId>> all;
    std::vector<toylm::TokenId> current;
    oracle_enumerate_outputs(params, max_len, current, all);
    std::vector<toylm::TokenId> best;
    double best_score = -1e300;
    for (const auto& seq : all) {
        double score = oracle_sequence_logprob(params, prefix, seq);
        if (score > best_score || (score == best_score && seq < best)) {
            best_score = score;
            best = seq;
        }
    }
    return best;
}

/// Mean cross-entropy of a batch, computed from scratch.
inline double oracle_sft_loss(const toylm::ToyLmParams& params,
                              const std::vector<toylm::SftExample>& examples) {
    double loss = 0.0;
    std::size_t positions = 0;
    for (const auto& ex : examples) {
        loss -= oracle_sequence_logprob(params, ex.prompt, ex.target);
        positions += ex.target.size();
    }
    return loss / static_cast<double>(positions);
}

/// Mean pairwise logistic preference loss, computed from scratch.
inline double oracle_contrastive_loss(const toylm::ToyLmParams& params,
                                      const std::vector<toylm::PreferenceExample>& pairs,
                                      double beta) {
    double loss = 0.0;
    for (const auto& p : pairs) {
        double s_c = oracle_sequence_logprob(params, p.prompt, p.chosen) /
                     static_cast<double>(p.chosen.size());
        double s_r = oracle_sequence_logprob(params, p.prompt, p.rejected) /
                     static_cast<double>(p.rejected.size());
        double d = beta * (s_c - s_r);
        loss += std::log(1.0 + std::exp(-d));
    }
    return loss / static_cast<double>(pairs.size());
}

/// Recovers the analytic gradient applied by a training step as
/// (old - new) / lr and compares every touched entry against central finite
/// differences of `loss_fn`. Returns the maximum relative error.
template <typename StepFn, typename LossFn>
double max_gradcheck_error(const toylm::ToyLmParams& params, StepFn step, LossFn loss_fn,
                           double lr, double eps = 1e-5) {
    toylm::ToyLmParams stepped = params;
    step(stepped);

    double max_rel = 0.0;
    for (const auto& [ctx, new_row] : stepped.rows()) {
        Eigen::VectorXd old_row = params.logits(ctx);
        for (Eigen::Index i = 0; i < new_row.size(); ++i) {
            double analytic = (old_row[i] - new_row[i]) / lr;
            toylm::ToyLmParams plus = params;
            plus.row(ctx)[i] += eps;
            toylm::ToyLmParams minus = params;
            minus.row(ctx)[i] -= eps;
            double fd = (loss_fn(plus) - loss_fn(minus)) / (2.0 * eps);
            double rel = std::abs(analytic - fd) /
                         std::max({std::abs(analytic), std::abs(fd), 1e-6});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace evo::test
