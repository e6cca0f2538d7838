#include "oslo/model.hpp"

#include <algorithm>
#include <cctype>

#include <fmt/format.h>

#include "oslo/errors.hpp"
#include "oslo/rng.hpp"

namespace oslo {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

PromptTask::PromptTask(const Backbone& backbone, std::vector<std::string> known_classes,
                       std::vector<SourceDomain> sources, const std::vector<AttributeSet>& attributes,
                       const ModelConfig& config)
    : backbone_(&backbone), config_(config), classes_(std::move(known_classes)), sources_(std::move(sources)) {
  if (classes_.empty()) throw ConfigError("task has no known classes");
  if (sources_.empty()) throw ConfigError("task has no source domains");
  if (config_.learnable_tokens < 0 || config_.learnable_tokens > config_.context_length) {
    throw ConfigError(fmt::format("q={} must lie in [0, M={}]", config_.learnable_tokens, config_.context_length));
  }
  if (config_.context_length > backbone.max_prompt_tokens()) {
    throw ConfigError(fmt::format("context length {} exceeds the backbone's {} usable text positions",
                                  config_.context_length, backbone.max_prompt_tokens()));
  }
  for (const auto& c : classes_) {
    if (lower(c) == kUnknownClass) throw ConfigError("'unknown' is reserved and cannot be a known class");
  }
  for (const auto& c : classes_) {
    AttributeSet set = find_attributes(attributes, c);
    validate(set, static_cast<size_t>(std::max(0, config_.attributes_per_class)));
    attribute_embeddings_.push_back(backbone.embed_phrases(set.phrases));
    attributes_.push_back(std::move(set));
  }
  for (auto& s : sources_) {
    if (s.classes.empty()) throw ConfigError(fmt::format("source domain '{}' has no classes", s.name));
    std::sort(s.classes.begin(), s.classes.end());
    std::vector<DomainPromptTemplate> row;
    for (int c : s.classes) {
      if (c < 0 || c >= static_cast<int>(classes_.size())) {
        throw ConfigError(fmt::format("source '{}' references class index {} outside C", s.name, c));
      }
      row.push_back(make_domain_template(backbone, s.prompt_name.empty() ? s.name : s.prompt_name,
                                         classes_[static_cast<size_t>(c)], config_.context_length));
    }
    templates_.push_back(std::move(row));
  }
}

const DomainPromptTemplate& PromptTask::domain_template(int source, int cls) const {
  const auto& s = sources_.at(static_cast<size_t>(source));
  auto it = std::find(s.classes.begin(), s.classes.end(), cls);
  if (it == s.classes.end()) {
    throw InputError(fmt::format("class {} is not part of source domain '{}'", cls, s.name));
  }
  return templates_[static_cast<size_t>(source)][static_cast<size_t>(it - s.classes.begin())];
}

int PromptTask::attention_dim() const {
  return config_.attention_dim > 0 ? config_.attention_dim : backbone_->config().dims.d_joint;
}

int PromptTask::find_source(const std::string& name) const {
  const std::string key = lower(name);
  for (size_t i = 0; i < sources_.size(); ++i) {
    if (lower(sources_[i].name) == key || lower(sources_[i].prompt_name) == key) return static_cast<int>(i);
  }
  return -1;
}

PromptModel PromptModel::init(const Backbone& backbone, const std::vector<std::string>& known_classes,
                              const ModelConfig& config, std::uint64_t seed) {
  const auto& dims = backbone.config().dims;
  if (config.visual_prompt_tokens < 0) throw ConfigError("visual prompt length must be non-negative");
  const int attn = config.attention_dim > 0 ? config.attention_dim : dims.d_joint;
  Rng rng(mix_seed(seed, 0xb0b));
  PromptModel m;
  Matrix vp(config.visual_prompt_tokens, dims.d_patch);
  for (Eigen::Index i = 0; i < vp.size(); ++i) vp.data()[i] = 0.5 * rng.normal();
  m.visual_prompt = Parameter("visual_prompt", std::move(vp));
  m.generic = GenericPromptParams::init(backbone, config.context_length, config.learnable_tokens, known_classes, rng);
  m.projector = ProjectorParams::init(config.visual_prompt_tokens, dims.d_patch, config.projector_hidden,
                                      config.context_length - config.learnable_tokens, dims.d_tok, rng);
  m.xattn = CrossAttentionParams::init(dims.d_joint, attn, rng);
  m.bridge = TokenBridge::init(attn, dims.d_tok, rng);
  return m;
}

std::vector<Parameter*> PromptModel::parameters() {
  return {&visual_prompt, &generic.nu,  &projector.w1, &projector.b1, &projector.w2, &projector.b2,
          &xattn.w_q,     &xattn.w_k,   &xattn.w_v,    &bridge.weight};
}

std::vector<const Parameter*> PromptModel::parameters() const {
  auto* self = const_cast<PromptModel*>(this);
  auto ps = self->parameters();
  return {ps.begin(), ps.end()};
}

void PromptModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

PromptModel::Bound PromptModel::bind(Tape& tape) {
  return {tape.parameter(visual_prompt), tape.parameter(generic.nu), projector.bind(tape), xattn.bind(tape),
          bridge.bind(tape)};
}

PromptModel::Bound PromptModel::bind_frozen(Tape& tape) const {
  return {tape.constant_ref(visual_prompt.value),
          tape.constant_ref(generic.nu.value),
          {tape.constant_ref(projector.w1.value), tape.constant_ref(projector.b1.value),
           tape.constant_ref(projector.w2.value), tape.constant_ref(projector.b2.value)},
          {tape.constant_ref(xattn.w_q.value), tape.constant_ref(xattn.w_k.value), tape.constant_ref(xattn.w_v.value)},
          {tape.constant_ref(bridge.weight.value)}};
}

}  // namespace oslo
