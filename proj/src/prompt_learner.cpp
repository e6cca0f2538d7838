#include "oslo/prompt_learner.hpp"

#include <cmath>

#include <fmt/format.h>

#include "oslo/errors.hpp"

namespace oslo {

const Matrix& GenericPromptParams::tokens_for(const std::string& class_name) const {
  auto it = class_tokens.find(class_name);
  if (it == class_tokens.end()) throw InputError(fmt::format("class '{}' is not in the prompt vocabulary", class_name));
  return it->second;
}

GenericPromptParams GenericPromptParams::init(const Backbone& backbone, int context_length, int learnable,
                                              const std::vector<std::string>& known_classes, Rng& rng) {
  if (learnable < 0 || learnable > context_length) {
    throw ConfigError(fmt::format("learnable context tokens q={} must lie in [0, M={}]", learnable, context_length));
  }
  if (known_classes.empty()) throw InputError("prompt vocabulary needs at least one known class");
  const int d_tok = backbone.config().dims.d_tok;
  const Matrix seed_tokens = backbone.tokenizer().embed("photo of a");
  Matrix nu(learnable, d_tok);
  for (int i = 0; i < learnable; ++i) {
    if (i < seed_tokens.rows()) {
      nu.row(i) = seed_tokens.row(i);
    } else {
      for (int j = 0; j < d_tok; ++j) nu(i, j) = 0.02 * rng.normal();
    }
  }
  GenericPromptParams p;
  p.nu = Parameter("generic.nu", std::move(nu));
  p.context_length = context_length;
  p.class_vocabulary = known_classes;
  p.class_vocabulary.emplace_back(kUnknownClass);
  for (const auto& c : p.class_vocabulary) {
    if (!p.class_tokens.emplace(c, backbone.tokenizer().embed(c)).second) {
      throw InputError(fmt::format("class '{}' appears twice in the vocabulary", c));
    }
  }
  return p;
}

ProjectorParams ProjectorParams::init(int prompt_tokens, int d_patch, int hidden, int out_tokens, int d_tok, Rng& rng) {
  if (hidden <= 0) throw ConfigError("projector hidden width must be positive");
  if (out_tokens < 0) throw ConfigError("projector output token count must be non-negative");
  if (out_tokens > 0 && prompt_tokens <= 0) {
    throw ConfigError("projected context tokens need a nonempty visual prompt");
  }
  const int in = prompt_tokens * d_patch;
  auto normal = [&](int r, int c, double sd) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
    return m;
  };
  ProjectorParams p;
  p.w1 = Parameter("projector.w1", normal(hidden, in, in > 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : 0.0));
  p.b1 = Parameter("projector.b1", Matrix::Zero(1, hidden));
  p.w2 = Parameter("projector.w2", normal(out_tokens * d_tok, hidden, 1.0 / std::sqrt(static_cast<double>(hidden))));
  p.b2 = Parameter("projector.b2", Matrix::Zero(1, out_tokens * d_tok));
  p.out_tokens = out_tokens;
  p.d_tok = d_tok;
  return p;
}

Var project_visual_to_text(Var visual_prompt, const ProjectorParams::Bound& proj, int out_tokens, int d_tok) {
  if (out_tokens == 0) return {};
  if (!visual_prompt.valid() || visual_prompt.rows() == 0) {
    throw ConfigError("projected context tokens need a nonempty visual prompt");
  }
  Var flat = ag::reshape(visual_prompt, 1, visual_prompt.value().size());
  Var h = ag::relu(ag::linear(flat, proj.w1, proj.b1));
  Var out = ag::linear(h, proj.w2, proj.b2);
  return ag::reshape(out, out_tokens, d_tok);
}

Matrix project_visual_to_text(const VisualPrompt& vp, const ProjectorParams& proj) {
  if (proj.out_tokens == 0) return Matrix(0, proj.d_tok);
  Tape tape;
  ProjectorParams::Bound b{tape.constant_ref(proj.w1.value), tape.constant_ref(proj.b1.value),
                           tape.constant_ref(proj.w2.value), tape.constant_ref(proj.b2.value)};
  return project_visual_to_text(tape.constant(vp.tokens), b, proj.out_tokens, proj.d_tok).value();
}

Var assemble_generic_prompt(Tape& tape, const GenericPromptParams& params, Var nu, Var projected,
                            const std::string& class_name) {
  const Matrix& cls = params.tokens_for(class_name);
  std::vector<Var> parts;
  if (params.learnable_tokens() > 0) parts.push_back(nu);
  if (params.projected_tokens() > 0) {
    if (!projected.valid() || projected.rows() != params.projected_tokens()) {
      throw ConfigError(fmt::format("expected {} projected tokens", params.projected_tokens()));
    }
    parts.push_back(projected);
  }
  parts.push_back(tape.constant_ref(cls));
  return ag::concat_rows(parts);
}

TokenSeq assemble_generic_prompt(const GenericPromptParams& params, const VisualPrompt& vp, const ProjectorParams& proj,
                                 const std::string& class_name) {
  Tape tape;
  ProjectorParams::Bound b{tape.constant_ref(proj.w1.value), tape.constant_ref(proj.b1.value),
                           tape.constant_ref(proj.w2.value), tape.constant_ref(proj.b2.value)};
  Var projected = params.projected_tokens() > 0
                      ? project_visual_to_text(tape.constant(vp.tokens), b, proj.out_tokens, proj.d_tok)
                      : Var{};
  return {assemble_generic_prompt(tape, params, tape.constant_ref(params.nu.value), projected, class_name).value()};
}

}  // namespace oslo
