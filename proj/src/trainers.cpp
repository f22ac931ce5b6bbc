// SPDX-License-Identifier: Apache-2.0
#include "evo/trainers.hpp"

#include "evo/errors.hpp"

namespace evo::trainers {

toylm::SftExample to_sft_example(const toylm::Vocab& vocab,
                                 const refine::TrainingExample& example) {
    toylm::SftExample out;
    out.prompt = toylm::tokenize(vocab, example.prompt_text);
    out.target = toylm::tokenize(vocab, example.target_text);
    out.target.push_back(vocab.eos());
    return out;
}

void ToyLmTrainer::train_batch(const std::vector<refine::TrainingExample>& batch) {
    if (batch.empty()) {
        throw ValidationError("trainer received an empty batch");
    }
    std::vector<toylm::SftExample> examples;
    examples.reserve(batch.size());
    for (const auto& ex : batch) {
        examples.push_back(to_sft_example(params_.vocab(), ex));
    }
    for (int epoch = 0; epoch < epochs_; ++epoch) {
        last_loss_ = toylm::sft_step(params_, examples, lr_);
    }
    if (checkpoint_) {
        toylm::save_checkpoint(params_, *checkpoint_);
    }
}

ToyBackend::ToyBackend(std::shared_ptr<toylm::ToyLmParams> params, std::string name)
    : params_(std::move(params)), name_(std::move(name)) {
    if (!params_) {
        throw ValidationError("toy backend requires model parameters");
    }
}

std::string ToyBackend::chat(const std::vector<backend::ChatMessage>& messages,
                             const backend::GenerationParams& gen) {
    if (messages.empty()) {
        throw ValidationError("chat requires at least one message");
    }
    std::string joined;
    for (const auto& m : messages) {
        if (!joined.empty()) {
            joined += '\n';
        }
        joined += m.content;
    }
    auto prefix = toylm::tokenize(params_->vocab(), joined);
    auto candidate = toylm::greedy_decode(*params_, prefix, gen.max_tokens);
    std::string text = toylm::detokenize(params_->vocab(), candidate.tokens);
    if (text.empty()) {
        throw BackendError("toy backend \"" + name_ + "\" produced an empty completion");
    }
    return text;
}

} // namespace evo::trainers
