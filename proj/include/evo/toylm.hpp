// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace evo::toylm {

namespace fs = std::filesystem;
using TokenId = int;

inline constexpr const char* kBos = "<bos>";
inline constexpr const char* kEos = "<eos>";
inline constexpr const char* kUnk = "<unk>";

/// Ordered token inventory. BOS and EOS appear exactly once; UNK is present
/// in vocabularies built with with_words and is required for tokenizing
/// arbitrary text.
class Vocab {
public:
    /// Sentinels first (<bos>, <eos>, <unk>), then the given words in order,
    /// lowercased and deduplicated.
    static Vocab with_words(const std::vector<std::string>& words);
    /// Exact token list as given; must contain <bos> and <eos> exactly once.
    static Vocab from_tokens(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    std::optional<TokenId> find(const std::string& token) const;

    TokenId bos() const { return bos_; }
    TokenId eos() const { return eos_; }
    /// Throws ValidationError if this vocab has no <unk>.
    TokenId unk() const;

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    TokenId bos_ = -1;
    TokenId eos_ = -1;
    TokenId unk_ = -1;
};

/// Lowercased whitespace-delimited tokens; out-of-vocab words map to <unk>.
std::vector<TokenId> tokenize(const Vocab& vocab, const std::string& text);
/// Inverse of tokenize for in-vocab sequences; sentinels are dropped when
/// strip_sentinels is set.
std::string detokenize(const Vocab& vocab, std::span<const TokenId> tokens,
                       bool strip_sentinels = true);

/// Tabular context->token logit model. Rows default to all zeros (uniform
/// distribution) for unseen contexts; only touched rows are stored.
class ToyLmParams {
public:
    ToyLmParams(Vocab vocab, int order);

    const Vocab& vocab() const { return vocab_; }
    int order() const { return order_; }

    /// Logits for a context (read-only; zero vector if never touched).
    Eigen::VectorXd logits(const std::vector<TokenId>& context) const;
    /// Mutable row, inserted as zeros on first touch.
    Eigen::VectorXd& row(const std::vector<TokenId>& context);

    const std::map<std::vector<TokenId>, Eigen::VectorXd>& rows() const { return rows_; }

    /// Context window (length `order`) that conditions position `pos` of
    /// `sequence`; positions before the start are BOS-padded.
    std::vector<TokenId> context_at(std::span<const TokenId> sequence, std::size_t pos) const;

    bool operator==(const ToyLmParams& other) const;

private:
    Vocab vocab_;
    int order_;
    std::map<std::vector<TokenId>, Eigen::VectorXd> rows_;
};

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits);

struct SequenceLogProb {
    double total = 0.0;
    double avg = 0.0;
};

/// Sum of per-step log-probabilities of `continuation` after `prefix`,
/// contexts sliding over prefix+continuation. Continuation must be non-empty.
SequenceLogProb sequence_logprob(const ToyLmParams& params,
                                 std::span<const TokenId> prefix,
                                 std::span<const TokenId> continuation);

struct Candidate {
    std::vector<TokenId> tokens;   // generated continuation, EOS included when produced
    double total_logprob = 0.0;
    double avg_logprob = 0.0;
};

/// Argmax decoding; ties break toward the lower vocab index. Stops at EOS or
/// after max_len generated tokens.
Candidate greedy_decode(const ToyLmParams& params, std::span<const TokenId> prefix,
                        int max_len);

/// Cumulative-logprob beam search. Hypotheses that emit EOS are frozen and
/// compete with later finishers by total_logprob. Returns at most `width`
/// candidates sorted by descending total_logprob; width 1 reproduces
/// greedy_decode exactly.
std::vector<Candidate> beam_decode(const ToyLmParams& params,
                                   std::span<const TokenId> prefix, int width,
                                   int max_len);

struct SftExample {
    std::vector<TokenId> prompt;  // context only, no loss
    std::vector<TokenId> target;  // loss-bearing tokens
};

/// Mean cross-entropy of target tokens over the batch (pure evaluation).
double sft_loss(const ToyLmParams& params, const std::vector<SftExample>& examples);

/// One full-batch gradient-descent step on sft_loss; returns the pre-step
/// loss. Gradient per touched row is (softmax - onehot(next)) accumulated
/// over occurrences, scaled by 1/#target-positions.
double sft_step(ToyLmParams& params, const std::vector<SftExample>& examples, double lr);

struct PreferenceExample {
    std::vector<TokenId> prompt;
    std::vector<TokenId> chosen;
    std::vector<TokenId> rejected;
};

struct ContrastiveEval {
    double mean_loss = 0.0;
    double mean_margin = 0.0; // mean of avg_logprob(chosen) - avg_logprob(rejected)
};

/// Pairwise logistic preference loss on length-normalized sequence
/// log-probs: mean over pairs of -log sigmoid(beta * (s_chosen - s_rejected)).
ContrastiveEval contrastive_eval(const ToyLmParams& params,
                                 const std::vector<PreferenceExample>& pairs, double beta);

/// One full-batch step on the contrastive loss; returns pre-step loss/margin.
ContrastiveEval contrastive_step(ToyLmParams& params,
                                 const std::vector<PreferenceExample>& pairs, double lr,
                                 double beta);

/// Versioned checkpoint of vocab, order, and non-zero logits rows.
/// save/load round-trips bit-exactly.
void save_checkpoint(const ToyLmParams& params, const fs::path& path);
ToyLmParams load_checkpoint(const fs::path& path);

} // namespace evo::toylm
