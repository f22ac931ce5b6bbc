// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <optional>

#include "evo/backend.hpp"
#include "evo/refine.hpp"
#include "evo/toylm.hpp"

namespace evo::trainers {

namespace fs = std::filesystem;

/// Fine-tunes the in-process toy model on each flushed batch and checkpoints
/// it so an interrupted run resumes from the last flush.
class ToyLmTrainer : public refine::Trainer {
public:
    ToyLmTrainer(toylm::ToyLmParams& params, double lr, int epochs,
                 std::optional<fs::path> checkpoint = std::nullopt)
        : params_(params), lr_(lr), epochs_(epochs), checkpoint_(std::move(checkpoint)) {}

    void train_batch(const std::vector<refine::TrainingExample>& batch) override;

    double last_loss() const { return last_loss_; }

private:
    toylm::ToyLmParams& params_;
    double lr_;
    int epochs_;
    std::optional<fs::path> checkpoint_;
    double last_loss_ = 0.0;
};

/// Stand-in for remote model backends: the flushed batch is already persisted
/// as a dataset file by the refinement loop, and fine-tuning a hosted model
/// is out of scope, so the model update is a no-op.
class NoopTrainer : public refine::Trainer {
public:
    void train_batch(const std::vector<refine::TrainingExample>&) override { ++batches_; }
    std::size_t batches() const { return batches_; }

private:
    std::size_t batches_ = 0;
};

/// Tokenize a training example against the toy model's vocab.
toylm::SftExample to_sft_example(const toylm::Vocab& vocab,
                                 const refine::TrainingExample& example);

/// Chat adapter over the toy model: the joined message contents become the
/// decode prefix, max_tokens caps the generated length. The only backend kind
/// that also supports training and beam decode, through the shared params.
class ToyBackend : public backend::Backend {
public:
    ToyBackend(std::shared_ptr<toylm::ToyLmParams> params, std::string name = "toy");

    std::string chat(const std::vector<backend::ChatMessage>& messages,
                     const backend::GenerationParams& params) override;
    backend::BackendKind kind() const override { return backend::BackendKind::toy; }
    const std::string& identity() const override { return name_; }

    const std::shared_ptr<toylm::ToyLmParams>& params() const { return params_; }

private:
    std::shared_ptr<toylm::ToyLmParams> params_;
    std::string name_;
};

} // namespace evo::trainers
