#pragma once

// Training objectives: the attribute-conditioned contrastive loss over each
// source domain's classes, the alignment between generic and domain prompts,
// and the generic cross-entropy over known classes plus "unknown".

#include <span>
#include <vector>

#include "oslo/autograd.hpp"
#include "oslo/model.hpp"

namespace oslo {

struct LossConfig {
  double temperature = 0.01;
  // Stops L_align gradients from reaching the domain-specific branch.
  bool stop_align_grad = false;
};

void validate(const LossConfig& config);

struct LossTerms {
  Var dom_spec;
  Var align;
  Var dom_gen;
  Var total;
};

struct LossValues {
  double dom_spec = 0.0;
  double align = 0.0;
  double dom_gen = 0.0;
  double total = 0.0;
};

// Per-item intermediate values, filled on request.
struct LossDiagnostics {
  std::vector<RowVector> domain_posteriors;   // known items, over the item's Y_s
  std::vector<RowVector> generic_posteriors;  // every item, over C + unknown
  std::vector<RowVector> attention_rows;      // one per (known item, class of Y_s)
  std::vector<double> align_terms;            // known items
};

// softmax(cos(image, text_i) / temperature) over the rows of `texts`. Both
// sides are normalized here, so unnormalized inputs are accepted.
Var similarity_logits(Var image_emb, Var texts, double temperature);
Var posterior(Var image_emb, Var texts, double temperature);

// Image embedding with the visual prompt injected.
Var prompted_image_embedding(Tape& tape, const PromptTask& task, const PromptModel::Bound& bound, const Image& image);

// Class-averaged attribute encoding over the classes of source `source`.
Var domain_attribute_encoding(Tape& tape, const PromptTask& task, const PromptModel::Bound& bound, Var image_emb,
                              int source, std::vector<Var>* attention = nullptr);

// Text embeddings (|Y_s| x d_joint) of the source's composed domain prompts
// for one image encoding.
Var domain_prompt_embeddings(Tape& tape, const PromptTask& task, const PromptModel::Bound& bound, Var encoding,
                             int source);

// Text embeddings ((|C| + 1) x d_joint) of the generic prompts, "unknown" last.
Var generic_text_embeddings(Tape& tape, const PromptTask& task, const PromptModel& model,
                            const PromptModel::Bound& bound);

// Builds all three terms in one pass over the batch. Known items need a
// source domain whose classes contain the label; pseudo-open items carry
// task.unknown_label() and enter only the generic term.
LossTerms compute_losses(Tape& tape, const PromptTask& task, const PromptModel& model, const PromptModel::Bound& bound,
                         std::span<const LabeledItem> items, const LossConfig& config,
                         LossDiagnostics* diagnostics = nullptr);

// Probability over the classes of source `source`, in ascending class order.
RowVector domain_specific_posterior(const PromptTask& task, const PromptModel& model, const Image& image, int source,
                                    const LossConfig& config);
// Probability over C followed by "unknown".
RowVector generic_posterior(const PromptTask& task, const PromptModel& model, const Image& image,
                            const LossConfig& config);

LossValues evaluate_losses(const PromptTask& task, const PromptModel& model, std::span<const LabeledItem> items,
                           const LossConfig& config, LossDiagnostics* diagnostics = nullptr);
// Accumulates d(total)/d(param) into every trainable group's grad.
LossValues loss_and_grad(const PromptTask& task, PromptModel& model, std::span<const LabeledItem> items,
                         const LossConfig& config);

}  // namespace oslo
