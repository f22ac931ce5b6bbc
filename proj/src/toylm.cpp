// SPDX-License-Identifier: Apache-2.0
#include "evo/toylm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <json.hpp>

#include "evo/errors.hpp"
#include "evo/io.hpp"

namespace evo::toylm {

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

namespace {

std::string lowercased(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

} // namespace

Vocab Vocab::with_words(const std::vector<std::string>& words) {
    std::vector<std::string> tokens{kBos, kEos, kUnk};
    for (const auto& w : words) {
        std::string t = lowercased(w);
        if (t.empty()) {
            continue;
        }
        if (std::find(tokens.begin(), tokens.end(), t) == tokens.end()) {
            tokens.push_back(std::move(t));
        }
    }
    return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        const std::string& t = v.tokens_[i];
        if (!v.index_.emplace(t, static_cast<TokenId>(i)).second) {
            throw ValidationError("duplicate vocab token: " + t);
        }
        if (t == kBos) v.bos_ = static_cast<TokenId>(i);
        if (t == kEos) v.eos_ = static_cast<TokenId>(i);
        if (t == kUnk) v.unk_ = static_cast<TokenId>(i);
    }
    if (v.bos_ < 0 || v.eos_ < 0) {
        throw ValidationError("vocab must contain <bos> and <eos>");
    }
    return v;
}

std::optional<TokenId> Vocab::find(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

TokenId Vocab::unk() const {
    if (unk_ < 0) {
        throw ValidationError("vocab has no <unk> token");
    }
    return unk_;
}

std::vector<TokenId> tokenize(const Vocab& vocab, const std::string& text) {
    std::vector<TokenId> out;
    std::string word;
    auto flush = [&] {
        if (word.empty()) {
            return;
        }
        if (auto id = vocab.find(word)) {
            out.push_back(*id);
        } else {
            out.push_back(vocab.unk());
        }
        word.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else {
            word += static_cast<char>(std::tolower(c));
        }
    }
    flush();
    return out;
}

std::string detokenize(const Vocab& vocab, std::span<const TokenId> tokens,
                       bool strip_sentinels) {
    std::string out;
    for (TokenId id : tokens) {
        if (strip_sentinels && (id == vocab.bos() || id == vocab.eos())) {
            continue;
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += vocab.token(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Params
// ---------------------------------------------------------------------------

ToyLmParams::ToyLmParams(Vocab vocab, int order) : vocab_(std::move(vocab)), order_(order) {
    if (order_ < 1) {
        throw ValidationError("toy model order must be >= 1");
    }
}

Eigen::VectorXd ToyLmParams::logits(const std::vector<TokenId>& context) const {
    auto it = rows_.find(context);
    if (it == rows_.end()) {
        return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocab_.size()));
    }
    return it->second;
}

Eigen::VectorXd& ToyLmParams::row(const std::vector<TokenId>& context) {
    auto it = rows_.find(context);
    if (it == rows_.end()) {
        it = rows_.emplace(context,
                           Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocab_.size())))
                 .first;
    }
    return it->second;
}

std::vector<TokenId> ToyLmParams::context_at(std::span<const TokenId> sequence,
                                             std::size_t pos) const {
    std::vector<TokenId> ctx(static_cast<std::size_t>(order_));
    for (int k = 0; k < order_; ++k) {
        std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(pos) - order_ + k;
        ctx[static_cast<std::size_t>(k)] =
            idx < 0 ? vocab_.bos() : sequence[static_cast<std::size_t>(idx)];
    }
    return ctx;
}

bool ToyLmParams::operator==(const ToyLmParams& other) const {
    if (!(vocab_ == other.vocab_) || order_ != other.order_) {
        return false;
    }
    if (rows_.size() != other.rows_.size()) {
        return false;
    }
    auto it = rows_.begin();
    auto jt = other.rows_.begin();
    for (; it != rows_.end(); ++it, ++jt) {
        if (it->first != jt->first || it->second != jt->second) {
            return false;
        }
    }
    return true;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    Eigen::VectorXd shifted = logits.array() - logits.maxCoeff();
    Eigen::VectorXd e = shifted.array().exp();
    return e / e.sum();
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
    double m = logits.maxCoeff();
    Eigen::ArrayXd shifted = logits.array() - m;
    double lse = std::log(shifted.exp().sum());
    return (shifted - lse).matrix();
}

// ---------------------------------------------------------------------------
// Scoring and decoding
// ---------------------------------------------------------------------------

SequenceLogProb sequence_logprob(const ToyLmParams& params,
                                 std::span<const TokenId> prefix,
                                 std::span<const TokenId> continuation) {
    if (continuation.empty()) {
        throw ValidationError("sequence_logprob requires a non-empty continuation");
    }
    std::vector<TokenId> full(prefix.begin(), prefix.end());
    full.insert(full.end(), continuation.begin(), continuation.end());
    double total = 0.0;
    for (std::size_t pos = prefix.size(); pos < full.size(); ++pos) {
        std::vector<TokenId> ctx = params.context_at(full, pos);
        Eigen::VectorXd ls = log_softmax(params.logits(ctx));
        total += ls[full[pos]];
    }
    return {total, total / static_cast<double>(continuation.size())};
}

Candidate greedy_decode(const ToyLmParams& params, std::span<const TokenId> prefix,
                        int max_len) {
    if (max_len < 1) {
        throw ValidationError("max_len must be >= 1");
    }
    std::vector<TokenId> seq(prefix.begin(), prefix.end());
    Candidate cand;
    for (int step = 0; step < max_len; ++step) {
        std::vector<TokenId> ctx = params.context_at(seq, seq.size());
        Eigen::VectorXd ls = log_softmax(params.logits(ctx));
        TokenId best = 0;
        double best_total = cand.total_logprob + ls[0];
        for (TokenId t = 1; t < static_cast<TokenId>(params.vocab().size()); ++t) {
            double total = cand.total_logprob + ls[t];
            if (total > best_total) {
                best_total = total;
                best = t;
            }
        }
        seq.push_back(best);
        cand.tokens.push_back(best);
        cand.total_logprob = best_total;
        if (best == params.vocab().eos()) {
            break;
        }
    }
    cand.avg_logprob = cand.total_logprob / static_cast<double>(cand.tokens.size());
    return cand;
}

namespace {

struct Hypothesis {
    std::vector<TokenId> tokens;
    double total = 0.0;
};

// Total order: higher score first, lexicographically smaller sequence on ties.
bool hyp_before(const Hypothesis& a, const Hypothesis& b) {
    if (a.total != b.total) {
        return a.total > b.total;
    }
    return a.tokens < b.tokens;
}

} // namespace

std::vector<Candidate> beam_decode(const ToyLmParams& params,
                                   std::span<const TokenId> prefix, int width,
                                   int max_len) {
    if (width < 1) {
        throw ValidationError("beam width must be >= 1");
    }
    if (max_len < 1) {
        throw ValidationError("max_len must be >= 1");
    }
    const TokenId eos = params.vocab().eos();
    const auto vocab_size = static_cast<TokenId>(params.vocab().size());

    std::vector<Hypothesis> live{{{}, 0.0}};
    std::vector<Hypothesis> finished;

    for (int step = 1; step <= max_len && !live.empty(); ++step) {
        std::vector<Hypothesis> candidates;
        candidates.reserve(live.size() * static_cast<std::size_t>(vocab_size));
        for (const auto& hyp : live) {
            std::vector<TokenId> seq(prefix.begin(), prefix.end());
            seq.insert(seq.end(), hyp.tokens.begin(), hyp.tokens.end());
            std::vector<TokenId> ctx = params.context_at(seq, seq.size());
            Eigen::VectorXd ls = log_softmax(params.logits(ctx));
            for (TokenId t = 0; t < vocab_size; ++t) {
                Hypothesis next{hyp.tokens, hyp.total + ls[t]};
                next.tokens.push_back(t);
                candidates.push_back(std::move(next));
            }
        }
        std::sort(candidates.begin(), candidates.end(), hyp_before);
        if (candidates.size() > static_cast<std::size_t>(width)) {
            candidates.resize(static_cast<std::size_t>(width));
        }
        live.clear();
        for (auto& c : candidates) {
            if (c.tokens.back() == eos || step == max_len) {
                finished.push_back(std::move(c));
            } else {
                live.push_back(std::move(c));
            }
        }
    }

    std::sort(finished.begin(), finished.end(), hyp_before);
    if (finished.size() > static_cast<std::size_t>(width)) {
        finished.resize(static_cast<std::size_t>(width));
    }
    std::vector<Candidate> out;
    out.reserve(finished.size());
    for (auto& h : finished) {
        Candidate c;
        c.total_logprob = h.total;
        c.avg_logprob = h.total / static_cast<double>(h.tokens.size());
        c.tokens = std::move(h.tokens);
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct Gradient {
    std::map<std::vector<TokenId>, Eigen::VectorXd> rows;

    Eigen::VectorXd& row(const std::vector<TokenId>& ctx, std::size_t vocab_size) {
        auto it = rows.find(ctx);
        if (it == rows.end()) {
            it = rows.emplace(ctx, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocab_size)))
                     .first;
        }
        return it->second;
    }

    void apply(ToyLmParams& params, double lr, double scale) {
        for (auto& [ctx, g] : rows) {
            params.row(ctx) -= lr * scale * g;
        }
    }
};

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

// -log sigmoid(x), numerically stable for large |x|.
double softplus_neg(double x) {
    if (x >= 0.0) {
        return std::log1p(std::exp(-x));
    }
    return -x + std::log1p(std::exp(x));
}

std::size_t count_target_positions(const std::vector<SftExample>& examples) {
    std::size_t n = 0;
    for (const auto& ex : examples) {
        n += ex.target.size();
    }
    return n;
}

} // namespace

double sft_loss(const ToyLmParams& params, const std::vector<SftExample>& examples) {
    if (examples.empty()) {
        throw ValidationError("sft requires a non-empty example list");
    }
    std::size_t positions = count_target_positions(examples);
    if (positions == 0) {
        throw ValidationError("sft requires at least one target token");
    }
    double loss = 0.0;
    for (const auto& ex : examples) {
        if (ex.target.empty()) {
            continue;
        }
        loss -= sequence_logprob(params, ex.prompt, ex.target).total;
    }
    return loss / static_cast<double>(positions);
}

double sft_step(ToyLmParams& params, const std::vector<SftExample>& examples, double lr) {
    if (lr <= 0.0) {
        throw ValidationError("learning rate must be positive");
    }
    double loss = sft_loss(params, examples);
    std::size_t positions = count_target_positions(examples);

    Gradient grad;
    for (const auto& ex : examples) {
        std::vector<TokenId> full = ex.prompt;
        full.insert(full.end(), ex.target.begin(), ex.target.end());
        for (std::size_t pos = ex.prompt.size(); pos < full.size(); ++pos) {
            std::vector<TokenId> ctx = params.context_at(full, pos);
            Eigen::VectorXd g = softmax(params.logits(ctx));
            g[full[pos]] -= 1.0;
            grad.row(ctx, params.vocab().size()) += g;
        }
    }
    grad.apply(params, lr, 1.0 / static_cast<double>(positions));
    return loss;
}

namespace {

// Accumulates d(avg_logprob)/d(logits) for one scored continuation into
// `grad`, scaled by `coeff`. Returns the continuation's avg logprob.
double accumulate_avg_logprob_grad(const ToyLmParams& params,
                                   std::span<const TokenId> prefix,
                                   std::span<const TokenId> continuation, double coeff,
                                   Gradient& grad) {
    std::vector<TokenId> full(prefix.begin(), prefix.end());
    full.insert(full.end(), continuation.begin(), continuation.end());
    const double inv_len = 1.0 / static_cast<double>(continuation.size());
    double total = 0.0;
    for (std::size_t pos = prefix.size(); pos < full.size(); ++pos) {
        std::vector<TokenId> ctx = params.context_at(full, pos);
        Eigen::VectorXd p = softmax(params.logits(ctx));
        total += std::log(p[full[pos]]);
        // d avg / d z = (onehot - softmax) / len
        Eigen::VectorXd g = -p;
        g[full[pos]] += 1.0;
        grad.row(ctx, params.vocab().size()) += coeff * inv_len * g;
    }
    return total * inv_len;
}

void validate_pairs(const std::vector<PreferenceExample>& pairs) {
    if (pairs.empty()) {
        throw ValidationError("contrastive update requires a non-empty pair list");
    }
    for (const auto& p : pairs) {
        if (p.chosen.empty() || p.rejected.empty()) {
            throw ValidationError("preference pair has an empty completion");
        }
        if (p.chosen == p.rejected) {
            throw ValidationError("preference pair has chosen == rejected");
        }
    }
}

} // namespace

ContrastiveEval contrastive_eval(const ToyLmParams& params,
                                 const std::vector<PreferenceExample>& pairs, double beta) {
    validate_pairs(pairs);
    double loss = 0.0;
    double margin = 0.0;
    for (const auto& pair : pairs) {
        double s_c = sequence_logprob(params, pair.prompt, pair.chosen).avg;
        double s_r = sequence_logprob(params, pair.prompt, pair.rejected).avg;
        loss += softplus_neg(beta * (s_c - s_r));
        margin += s_c - s_r;
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    return {loss * inv, margin * inv};
}

ContrastiveEval contrastive_step(ToyLmParams& params,
                                 const std::vector<PreferenceExample>& pairs, double lr,
                                 double beta) {
    if (lr <= 0.0 || beta <= 0.0) {
        throw ValidationError("lr and beta must be positive");
    }
    validate_pairs(pairs);

    Gradient grad;
    double loss = 0.0;
    double margin = 0.0;
    for (const auto& pair : pairs) {
        // Two passes: scores first (the coefficient depends on both), then
        // gradient accumulation with the right coefficients.
        double s_c = sequence_logprob(params, pair.prompt, pair.chosen).avg;
        double s_r = sequence_logprob(params, pair.prompt, pair.rejected).avg;
        double d = beta * (s_c - s_r);
        loss += softplus_neg(d);
        margin += s_c - s_r;
        double coeff_chosen = beta * (stable_sigmoid(d) - 1.0);
        accumulate_avg_logprob_grad(params, pair.prompt, pair.chosen, coeff_chosen, grad);
        accumulate_avg_logprob_grad(params, pair.prompt, pair.rejected, -coeff_chosen, grad);
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    grad.apply(params, lr, inv);
    return {loss * inv, margin * inv};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const ToyLmParams& params, const fs::path& path) {
    nlohmann::ordered_json j{
        {"format", "toylm-checkpoint"},
        {"version", 1},
        {"order", params.order()},
        {"vocab", params.vocab().tokens()},
    };
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& [ctx, logits] : params.rows()) {
        if (logits.isZero(0.0)) {
            continue; // zero rows are the default, not worth storing
        }
        std::vector<double> values(logits.data(), logits.data() + logits.size());
        rows.push_back({{"context", ctx}, {"logits", values}});
    }
    j["rows"] = std::move(rows);
    io::write_file_atomic(path, j.dump());
}

ToyLmParams load_checkpoint(const fs::path& path) {
    auto j = nlohmann::ordered_json::parse(io::read_file(path), nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw ValidationError("malformed checkpoint: " + path.string());
    }
    if (j.value("format", std::string{}) != "toylm-checkpoint" || j.value("version", 0) != 1) {
        throw ValidationError("unsupported checkpoint format: " + path.string());
    }
    Vocab vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    ToyLmParams params(std::move(vocab), j.at("order").get<int>());
    for (const auto& row : j.at("rows")) {
        std::vector<TokenId> ctx = row.at("context").get<std::vector<TokenId>>();
        std::vector<double> values = row.at("logits").get<std::vector<double>>();
        if (ctx.size() != static_cast<std::size_t>(params.order()) ||
            values.size() != params.vocab().size()) {
            throw ValidationError("checkpoint row shape mismatch: " + path.string());
        }
        params.row(ctx) =
            Eigen::Map<const Eigen::VectorXd>(values.data(),
                                              static_cast<Eigen::Index>(values.size()));
    }
    return params;
}

} // namespace evo::toylm
