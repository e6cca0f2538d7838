#pragma once

// Domain-specific prompts conditioned on class attributes: a static
// "[domain] of a [class]" template plus an image-dependent vector obtained by
// cross-attending from the image embedding onto each class's attribute
// embeddings and averaging over the domain's classes.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "oslo/autograd.hpp"
#include "oslo/backbone.hpp"
#include "oslo/rng.hpp"

namespace oslo {

enum class AttributeProvenance { LlmGenerated, Manifest };

struct AttributeSet {
  std::string class_name;
  std::vector<std::string> phrases;
  AttributeProvenance provenance = AttributeProvenance::Manifest;
};

// Nonempty, distinct phrases; when expected_count > 0 the set must have
// exactly that many.
void validate(const AttributeSet& set, size_t expected_count = 0);

// One JSON object per line with fields in the order
// {"class_name", "phrases", "provenance"}.
std::vector<AttributeSet> load_attribute_manifest(const std::filesystem::path& path);
void save_attribute_manifest(const std::filesystem::path& path, const std::vector<AttributeSet>& sets);
const AttributeSet& find_attributes(const std::vector<AttributeSet>& sets, const std::string& class_name);

struct DomainPromptTemplate {
  std::string domain_name;
  std::string class_name;
  TokenSeq token_seq;  // context rows first, then class-name rows
  Eigen::Index context_length = 0;
};

// Context words "<domain> of a", left-padded with the placeholder word "x" up
// to `context_length` tokens. Throws ConfigError when the words do not fit.
DomainPromptTemplate make_domain_template(const Backbone& backbone, const std::string& domain_name,
                                          const std::string& class_name, int context_length);

struct CrossAttentionParams {
  Parameter w_q;  // d x d_joint
  Parameter w_k;
  Parameter w_v;

  int dim() const { return static_cast<int>(w_q.value.rows()); }
  static CrossAttentionParams init(int d_joint, int dim, Rng& rng);

  struct Bound {
    Var w_q, w_k, w_v;
  };
  Bound bind(Tape& tape) { return {tape.parameter(w_q), tape.parameter(w_k), tape.parameter(w_v)}; }
};

// Softmax(q k^T / sqrt(d)) v with q = image_emb w_q^T, k = attrs w_k^T,
// v = attrs w_v^T. image_emb is 1 x d_joint, attrs is B x d_joint. The
// attention row (1 x B) is returned through `weights` when requested.
Var cross_attend(Var image_emb, Var attrs, const CrossAttentionParams::Bound& p, Var* weights = nullptr);
RowVector cross_attend(const RowVector& image_emb, const Matrix& attrs, const CrossAttentionParams& p);

// Mean of cross_attend over the given classes' attribute stacks.
Var class_agnostic_encoding(Var image_emb, std::span<const Var> class_attrs, const CrossAttentionParams::Bound& p);
RowVector class_agnostic_encoding(const Backbone& backbone, const Image& image, const VisualPrompt& prompt,
                                  const std::vector<AttributeSet>& domain_classes, const CrossAttentionParams& p);

// Trainable linear bridge from the attention width d to the token width.
// Bias-free so that a zero encoding leaves the template unchanged.
struct TokenBridge {
  Parameter weight;  // d_tok x d

  static TokenBridge init(int dim, int d_tok, Rng& rng);

  struct Bound {
    Var weight;
  };
  Bound bind(Tape& tape) { return {tape.parameter(weight)}; }
};

// Adds bridge(encoding) to every context row of the template; class-name rows
// are copied unchanged.
Var compose_domain_prompt(Tape& tape, const DomainPromptTemplate& tmpl, Var encoding, const TokenBridge::Bound& bridge);
TokenSeq compose_domain_prompt(const DomainPromptTemplate& tmpl, const RowVector& encoding, const TokenBridge& bridge);

}  // namespace oslo
