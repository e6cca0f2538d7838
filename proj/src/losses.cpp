#include "oslo/losses.hpp"

#include <cmath>
#include <map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "oslo/errors.hpp"

namespace oslo {

void validate(const LossConfig& config) {
  if (!(config.temperature > 0.0) || !std::isfinite(config.temperature)) {
    throw ConfigError(fmt::format("temperature must be positive, got {}", config.temperature));
  }
}

Var similarity_logits(Var image_emb, Var texts, double temperature) {
  Var img = ag::l2_normalize_rows(image_emb);
  Var txt = ag::l2_normalize_rows(texts);
  return ag::scale(ag::matmul(img, ag::transpose(txt)), 1.0 / temperature);
}

Var posterior(Var image_emb, Var texts, double temperature) {
  return ag::softmax_rows(similarity_logits(image_emb, texts, temperature));
}

Var prompted_image_embedding(Tape& tape, const PromptTask& task, const PromptModel::Bound& bound, const Image& image) {
  return task.backbone().encode_image(tape, image, bound.visual_prompt);
}

Var domain_attribute_encoding(Tape& tape, const PromptTask& task, const PromptModel::Bound& bound, Var image_emb,
                              int source, std::vector<Var>* attention) {
  const auto& classes = task.sources().at(static_cast<size_t>(source)).classes;
  if (classes.empty()) throw ConfigError("source domain has no classes");
  std::vector<Var> rows;
  rows.reserve(classes.size());
  for (int c : classes) {
    Var weights;
    rows.push_back(cross_attend(image_emb, tape.constant_ref(task.attribute_embeddings(c)), bound.xattn, &weights));
    if (attention) attention->push_back(weights);
  }
  return ag::mean_rows(ag::concat_rows(rows));
}

Var domain_prompt_embeddings(Tape& tape, const PromptTask& task, const PromptModel::Bound& bound, Var encoding,
                             int source) {
  const auto& classes = task.sources().at(static_cast<size_t>(source)).classes;
  std::vector<Var> rows;
  rows.reserve(classes.size());
  for (int c : classes) {
    Var prompt = compose_domain_prompt(tape, task.domain_template(source, c), encoding, bound.bridge);
    rows.push_back(task.backbone().encode_text(tape, prompt));
  }
  return ag::concat_rows(rows);
}

Var generic_text_embeddings(Tape& tape, const PromptTask& task, const PromptModel& model,
                            const PromptModel::Bound& bound) {
  const auto& generic = model.generic;
  Var projected = project_visual_to_text(bound.visual_prompt, bound.projector, generic.projected_tokens(),
                                         task.backbone().config().dims.d_tok);
  std::vector<Var> rows;
  rows.reserve(task.classes().size() + 1);
  for (const auto& name : task.classes()) {
    rows.push_back(task.backbone().encode_text(tape, assemble_generic_prompt(tape, generic, bound.nu, projected, name)));
  }
  rows.push_back(
      task.backbone().encode_text(tape, assemble_generic_prompt(tape, generic, bound.nu, projected, kUnknownClass)));
  return ag::concat_rows(rows);
}

namespace {

Var negative_log_posterior(Var logits, Eigen::Index label) {
  return ag::scale(ag::element(ag::log_softmax_rows(logits), 0, label), -1.0);
}

Eigen::Index position_in(const std::vector<int>& classes, int label) {
  for (size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] == label) return static_cast<Eigen::Index>(i);
  }
  return -1;
}

Var mean_of(Tape& tape, const std::vector<Var>& terms) {
  if (terms.empty()) return tape.constant(Matrix::Zero(1, 1));
  return ag::mean(ag::concat_rows(terms));
}

}  // namespace

LossTerms compute_losses(Tape& tape, const PromptTask& task, const PromptModel& model, const PromptModel::Bound& bound,
                         std::span<const LabeledItem> items, const LossConfig& config,
                         LossDiagnostics* diagnostics) {
  validate(config);
  if (items.empty()) throw InputError("cannot compute losses on an empty batch");
  const int unknown = task.unknown_label();
  const int n_sources = static_cast<int>(task.sources().size());

  Var generic = generic_text_embeddings(tape, task, model, bound);
  // Generic text rows of the known classes, gathered per label for L_align.
  std::vector<Var> generic_rows(task.classes().size());

  std::map<int, std::vector<Var>> spec_by_domain;
  std::vector<Var> align_terms;
  std::vector<Var> gen_terms;

  for (const LabeledItem& item : items) {
    if (item.label < 0 || item.label > unknown) {
      throw InputError(fmt::format("label {} is outside C + unknown (|C| = {})", item.label, unknown));
    }
    Var img = prompted_image_embedding(tape, task, bound, item.image);

    Var gen_logits = similarity_logits(img, generic, config.temperature);
    gen_terms.push_back(negative_log_posterior(gen_logits, item.label));
    if (diagnostics) diagnostics->generic_posteriors.push_back(ag::softmax_rows(gen_logits).value().row(0));

    if (item.label == unknown) continue;
    if (item.domain < 0 || item.domain >= n_sources) {
      throw InputError(fmt::format("known item with label {} has no valid source domain ({})", item.label, item.domain));
    }
    const auto& classes = task.sources()[static_cast<size_t>(item.domain)].classes;
    const Eigen::Index pos = position_in(classes, item.label);
    if (pos < 0) {
      throw InputError(fmt::format("class {} is not in the classes of source '{}'", item.label,
                                   task.sources()[static_cast<size_t>(item.domain)].name));
    }

    std::vector<Var> attention;
    Var encoding = domain_attribute_encoding(tape, task, bound, img, item.domain, diagnostics ? &attention : nullptr);
    Var domain_texts = domain_prompt_embeddings(tape, task, bound, encoding, item.domain);
    Var spec_logits = similarity_logits(img, domain_texts, config.temperature);
    spec_by_domain[item.domain].push_back(negative_log_posterior(spec_logits, pos));

    Var& gen_row = generic_rows[static_cast<size_t>(item.label)];
    if (!gen_row.valid()) gen_row = ag::slice_rows(generic, item.label, 1);
    Var domain_row = ag::slice_rows(domain_texts, pos, 1);
    if (config.stop_align_grad) domain_row = ag::detach(domain_row);
    Var align = ag::add_scalar(ag::scale(ag::cosine(gen_row, domain_row), -1.0), 1.0);
    align_terms.push_back(align);

    if (diagnostics) {
      diagnostics->domain_posteriors.push_back(ag::softmax_rows(spec_logits).value().row(0));
      for (const Var& a : attention) diagnostics->attention_rows.push_back(a.value().row(0));
      diagnostics->align_terms.push_back(align.scalar());
    }
  }

  LossTerms out;
  if (spec_by_domain.empty()) {
    spdlog::warn("batch holds no known-class items; the domain-specific loss contributes 0");
    out.dom_spec = tape.constant(Matrix::Zero(1, 1));
  } else {
    std::vector<Var> per_domain;
    for (const auto& [domain, terms] : spec_by_domain) per_domain.push_back(mean_of(tape, terms));
    out.dom_spec = mean_of(tape, per_domain);
  }
  out.align = mean_of(tape, align_terms);
  out.dom_gen = mean_of(tape, gen_terms);
  out.total = ag::add(ag::add(out.dom_gen, out.dom_spec), out.align);
  return out;
}

RowVector domain_specific_posterior(const PromptTask& task, const PromptModel& model, const Image& image, int source,
                                    const LossConfig& config) {
  validate(config);
  if (source < 0 || source >= static_cast<int>(task.sources().size())) {
    throw InputError(fmt::format("source index {} out of range", source));
  }
  if (task.sources()[static_cast<size_t>(source)].classes.empty()) throw ConfigError("source domain has no classes");
  Tape tape;
  auto bound = model.bind_frozen(tape);
  Var img = prompted_image_embedding(tape, task, bound, image);
  Var encoding = domain_attribute_encoding(tape, task, bound, img, source);
  Var texts = domain_prompt_embeddings(tape, task, bound, encoding, source);
  return posterior(img, texts, config.temperature).value().row(0);
}

RowVector generic_posterior(const PromptTask& task, const PromptModel& model, const Image& image,
                            const LossConfig& config) {
  validate(config);
  Tape tape;
  auto bound = model.bind_frozen(tape);
  Var img = prompted_image_embedding(tape, task, bound, image);
  return posterior(img, generic_text_embeddings(tape, task, model, bound), config.temperature).value().row(0);
}

namespace {

LossValues values_of(const LossTerms& t) {
  return {t.dom_spec.scalar(), t.align.scalar(), t.dom_gen.scalar(), t.total.scalar()};
}

}  // namespace

LossValues evaluate_losses(const PromptTask& task, const PromptModel& model, std::span<const LabeledItem> items,
                           const LossConfig& config, LossDiagnostics* diagnostics) {
  Tape tape;
  auto bound = model.bind_frozen(tape);
  return values_of(compute_losses(tape, task, model, bound, items, config, diagnostics));
}

LossValues loss_and_grad(const PromptTask& task, PromptModel& model, std::span<const LabeledItem> items,
                         const LossConfig& config) {
  Tape tape;
  auto bound = model.bind(tape);
  LossTerms terms = compute_losses(tape, task, model, bound, items, config);
  tape.backward(terms.total);
  return values_of(terms);
}

}  // namespace oslo
