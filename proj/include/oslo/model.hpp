#pragma once

// The trainable prompt model and the frozen task context it is trained in.

#include <cstdint>
#include <string>
#include <vector>

#include "oslo/attributes.hpp"
#include "oslo/backbone.hpp"
#include "oslo/image.hpp"
#include "oslo/prompt_learner.hpp"

namespace oslo {

struct ModelConfig {
  int context_length = 4;       // M
  int learnable_tokens = 2;     // q
  int visual_prompt_tokens = 2; // m
  int projector_hidden = 32;
  int attention_dim = 0;        // d; 0 selects d_joint
  int attributes_per_class = 4; // B; 0 accepts any count
};

struct SourceDomain {
  std::string name;         // folder / tag name
  std::string prompt_name;  // text used in "[domain] of a [class]"
  std::vector<int> classes; // indices into the known-class list, ascending
};

// One training or evaluation sample. label is a known-class index, or
// PromptTask::unknown_label() for pseudo-open samples. domain is an index into
// the task's sources, or -1 when the sample has no source domain.
struct LabeledItem {
  Image image;
  int label = -1;
  int domain = -1;
};

struct LabeledBatch {
  std::vector<LabeledItem> items;
  bool partial = false;  // final remainder batch of an epoch
};

// Known classes, source domains, and everything derived from the frozen
// backbone that never changes during training: attribute embeddings and
// domain prompt templates.
class PromptTask {
 public:
  PromptTask(const Backbone& backbone, std::vector<std::string> known_classes, std::vector<SourceDomain> sources,
             const std::vector<AttributeSet>& attributes, const ModelConfig& config);

  const Backbone& backbone() const { return *backbone_; }
  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& classes() const { return classes_; }
  int unknown_label() const { return static_cast<int>(classes_.size()); }
  const std::vector<SourceDomain>& sources() const { return sources_; }
  const Matrix& attribute_embeddings(int cls) const { return attribute_embeddings_.at(static_cast<size_t>(cls)); }
  const AttributeSet& attributes(int cls) const { return attributes_.at(static_cast<size_t>(cls)); }
  const DomainPromptTemplate& domain_template(int source, int cls) const;
  int attention_dim() const;
  // Source index whose name or prompt name matches (case-insensitive), or -1.
  int find_source(const std::string& name) const;

 private:
  const Backbone* backbone_;
  ModelConfig config_;
  std::vector<std::string> classes_;
  std::vector<SourceDomain> sources_;
  std::vector<AttributeSet> attributes_;
  std::vector<Matrix> attribute_embeddings_;
  std::vector<std::vector<DomainPromptTemplate>> templates_;  // [source][position in classes]
};

// The trainable parameter groups: visual prompt, free context tokens,
// projector, cross-attention maps, and the attribute-to-token bridge.
struct PromptModel {
  Parameter visual_prompt;  // m x d_patch
  GenericPromptParams generic;
  ProjectorParams projector;
  CrossAttentionParams xattn;
  TokenBridge bridge;

  static PromptModel init(const Backbone& backbone, const std::vector<std::string>& known_classes,
                          const ModelConfig& config, std::uint64_t seed);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  void zero_grad();
  VisualPrompt visual() const { return {visual_prompt.value}; }

  struct Bound {
    Var visual_prompt;
    Var nu;
    ProjectorParams::Bound projector;
    CrossAttentionParams::Bound xattn;
    TokenBridge::Bound bridge;
  };
  Bound bind(Tape& tape);
  // Binds every group as a constant (no gradient bookkeeping).
  Bound bind_frozen(Tape& tape) const;
};

}  // namespace oslo
