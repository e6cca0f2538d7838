#pragma once

// Domain-agnostic prompt: q free context tokens, then (M - q) tokens produced
// from the visual prompt by a two-layer projector, then the class-name
// tokens. One set of context tokens is shared by every class, including the
// "unknown" class.

#include <map>
#include <string>
#include <vector>

#include "oslo/autograd.hpp"
#include "oslo/backbone.hpp"
#include "oslo/rng.hpp"

namespace oslo {

inline constexpr const char* kUnknownClass = "unknown";

struct GenericPromptParams {
  Parameter nu;  // q x d_tok
  int context_length = 4;
  std::vector<std::string> class_vocabulary;  // known classes, then "unknown"
  std::map<std::string, Matrix> class_tokens;

  int learnable_tokens() const { return static_cast<int>(nu.value.rows()); }
  int projected_tokens() const { return context_length - learnable_tokens(); }
  const Matrix& tokens_for(const std::string& class_name) const;

  // nu starts from the token vectors of "photo of a", truncated to q rows or
  // padded with N(0, 0.02^2) rows.
  static GenericPromptParams init(const Backbone& backbone, int context_length, int learnable,
                                  const std::vector<std::string>& known_classes, Rng& rng);
};

struct ProjectorParams {
  Parameter w1;  // hidden x (m * d_patch)
  Parameter b1;  // 1 x hidden
  Parameter w2;  // (out_tokens * d_tok) x hidden
  Parameter b2;  // 1 x (out_tokens * d_tok)
  int out_tokens = 0;
  int d_tok = 0;

  static ProjectorParams init(int prompt_tokens, int d_patch, int hidden, int out_tokens, int d_tok, Rng& rng);

  struct Bound {
    Var w1, b1, w2, b2;
  };
  Bound bind(Tape& tape) {
    return {tape.parameter(w1), tape.parameter(b1), tape.parameter(w2), tape.parameter(b2)};
  }
};

// relu(flatten(vp) w1^T + b1) w2^T + b2, reshaped to out_tokens x d_tok. The
// visual prompt is flattened token-major (all of token 0, then token 1, ...).
// Returns an empty Var when out_tokens is 0.
Var project_visual_to_text(Var visual_prompt, const ProjectorParams::Bound& proj, int out_tokens, int d_tok);
Matrix project_visual_to_text(const VisualPrompt& vp, const ProjectorParams& proj);

// [nu][projected][class tokens]; throws InputError for classes outside the vocabulary.
Var assemble_generic_prompt(Tape& tape, const GenericPromptParams& params, Var nu, Var projected,
                            const std::string& class_name);
TokenSeq assemble_generic_prompt(const GenericPromptParams& params, const VisualPrompt& vp, const ProjectorParams& proj,
                                 const std::string& class_name);

}  // namespace oslo
