#include "oslo/attributes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "oslo/errors.hpp"

namespace oslo {

void validate(const AttributeSet& set, size_t expected_count) {
  if (set.class_name.empty()) throw InputError("attribute set has no class name");
  if (set.phrases.empty()) throw InputError(fmt::format("class '{}' has no attributes", set.class_name));
  if (expected_count > 0 && set.phrases.size() != expected_count) {
    throw InputError(fmt::format("class '{}' has {} attributes, expected {}", set.class_name, set.phrases.size(),
                                 expected_count));
  }
  std::set<std::string> seen;
  for (const auto& p : set.phrases) {
    if (p.find_first_not_of(" \t") == std::string::npos) {
      throw InputError(fmt::format("class '{}' has an empty attribute", set.class_name));
    }
    if (!seen.insert(p).second) {
      throw InputError(fmt::format("class '{}' repeats attribute '{}'", set.class_name, p));
    }
  }
}

namespace {

std::string provenance_name(AttributeProvenance p) {
  return p == AttributeProvenance::LlmGenerated ? "llm-generated" : "manifest";
}

}  // namespace

std::vector<AttributeSet> load_attribute_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open attribute manifest '{}'", path.string()));
  std::vector<AttributeSet> sets;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AttributeSet s;
      s.class_name = j.at("class_name").get<std::string>();
      s.phrases = j.at("phrases").get<std::vector<std::string>>();
      const std::string prov = j.value("provenance", "manifest");
      if (prov == "llm-generated") {
        s.provenance = AttributeProvenance::LlmGenerated;
      } else if (prov == "manifest") {
        s.provenance = AttributeProvenance::Manifest;
      } else {
        throw SchemaError(fmt::format("unknown provenance '{}'", prov));
      }
      validate(s);
      sets.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return sets;
}

void save_attribute_manifest(const std::filesystem::path& path, const std::vector<AttributeSet>& sets) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  for (const auto& s : sets) {
    nlohmann::ordered_json j;
    j["class_name"] = s.class_name;
    j["phrases"] = s.phrases;
    j["provenance"] = provenance_name(s.provenance);
    out << j.dump() << '\n';
  }
}

const AttributeSet& find_attributes(const std::vector<AttributeSet>& sets, const std::string& class_name) {
  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  };
  const std::string key = lower(class_name);
  for (const auto& s : sets) {
    if (lower(s.class_name) == key) return s;
  }
  throw InputError(fmt::format("no attributes for class '{}'", class_name));
}

DomainPromptTemplate make_domain_template(const Backbone& backbone, const std::string& domain_name,
                                          const std::string& class_name, int context_length) {
  const Tokenizer& tok = backbone.tokenizer();
  auto words = tok.split(domain_name + " of a");
  if (static_cast<int>(words.size()) > context_length) {
    throw ConfigError(fmt::format("domain prompt '{} of a' needs {} context tokens but the context length is {}",
                                  domain_name, words.size(), context_length));
  }
  std::string context;
  for (int i = static_cast<int>(words.size()); i < context_length; ++i) context += "x ";
  for (const auto& w : words) context += w + " ";

  const Matrix ctx = tok.embed(context);
  const Matrix cls = tok.embed(class_name);
  DomainPromptTemplate t;
  t.domain_name = domain_name;
  t.class_name = class_name;
  t.context_length = ctx.rows();
  t.token_seq.tokens.resize(ctx.rows() + cls.rows(), ctx.cols());
  t.token_seq.tokens << ctx, cls;
  return t;
}

CrossAttentionParams CrossAttentionParams::init(int d_joint, int dim, Rng& rng) {
  auto make = [&](const char* name) {
    Matrix m(dim, d_joint);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_joint));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
    return Parameter(name, std::move(m));
  };
  CrossAttentionParams p;
  p.w_q = make("xattn.w_q");
  p.w_k = make("xattn.w_k");
  p.w_v = make("xattn.w_v");
  return p;
}

Var cross_attend(Var image_emb, Var attrs, const CrossAttentionParams::Bound& p, Var* weights) {
  if (attrs.rows() == 0) throw InputError("cross_attend needs at least one attribute");
  if (image_emb.rows() != 1) throw InputError("cross_attend takes a single query row");
  if (image_emb.cols() != p.w_q.cols() || attrs.cols() != p.w_k.cols() || attrs.cols() != p.w_v.cols()) {
    throw ConfigError(fmt::format("cross_attend: embeddings of width {}/{} do not fit maps of input width {}",
                                  image_emb.cols(), attrs.cols(), p.w_q.cols()));
  }
  const double d = static_cast<double>(p.w_q.rows());
  Var q = ag::linear(image_emb, p.w_q);
  Var k = ag::linear(attrs, p.w_k);
  Var v = ag::linear(attrs, p.w_v);
  Var a = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(k)), 1.0 / std::sqrt(d)));
  if (weights) *weights = a;
  return ag::matmul(a, v);
}

RowVector cross_attend(const RowVector& image_emb, const Matrix& attrs, const CrossAttentionParams& p) {
  Tape tape;
  CrossAttentionParams::Bound b{tape.constant_ref(p.w_q.value), tape.constant_ref(p.w_k.value),
                                tape.constant_ref(p.w_v.value)};
  return cross_attend(tape.constant(image_emb), tape.constant(attrs), b).value().row(0);
}

Var class_agnostic_encoding(Var image_emb, std::span<const Var> class_attrs, const CrossAttentionParams::Bound& p) {
  if (class_attrs.empty()) throw InputError("class_agnostic_encoding needs at least one class");
  std::vector<Var> rows;
  rows.reserve(class_attrs.size());
  for (const Var& a : class_attrs) rows.push_back(cross_attend(image_emb, a, p));
  return ag::mean_rows(ag::concat_rows(rows));
}

RowVector class_agnostic_encoding(const Backbone& backbone, const Image& image, const VisualPrompt& prompt,
                                  const std::vector<AttributeSet>& domain_classes, const CrossAttentionParams& p) {
  if (domain_classes.empty()) throw InputError("class_agnostic_encoding needs at least one class");
  Tape tape;
  Var img = tape.constant(backbone.encode_image(image, prompt).vector);
  std::vector<Var> attrs;
  for (const auto& set : domain_classes) attrs.push_back(tape.constant(backbone.embed_phrases(set.phrases)));
  CrossAttentionParams::Bound b{tape.constant_ref(p.w_q.value), tape.constant_ref(p.w_k.value),
                                tape.constant_ref(p.w_v.value)};
  return class_agnostic_encoding(img, attrs, b).value().row(0);
}

TokenBridge TokenBridge::init(int dim, int d_tok, Rng& rng) {
  Matrix m(d_tok, dim);
  const double sd = 0.5 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return TokenBridge{Parameter("bridge.weight", std::move(m))};
}

Var compose_domain_prompt(Tape& tape, const DomainPromptTemplate& tmpl, Var encoding, const TokenBridge::Bound& bridge) {
  if (encoding.rows() != 1 || encoding.cols() != bridge.weight.cols()) {
    throw ConfigError(fmt::format("encoding of width {} does not fit a bridge of input width {}", encoding.cols(),
                                  bridge.weight.cols()));
  }
  if (bridge.weight.rows() != tmpl.token_seq.tokens.cols()) {
    throw ConfigError(fmt::format("bridge output width {} does not match token width {}", bridge.weight.rows(),
                                  tmpl.token_seq.tokens.cols()));
  }
  const Eigen::Index ctx = tmpl.context_length;
  const Eigen::Index total = tmpl.token_seq.length();
  Var seq = tape.constant_ref(tmpl.token_seq.tokens);
  Var shift = ag::linear(encoding, bridge.weight);
  std::vector<Var> parts{ag::add_row(ag::slice_rows(seq, 0, ctx), shift), ag::slice_rows(seq, ctx, total - ctx)};
  return ag::concat_rows(parts);
}

TokenSeq compose_domain_prompt(const DomainPromptTemplate& tmpl, const RowVector& encoding, const TokenBridge& bridge) {
  Tape tape;
  TokenBridge::Bound b{tape.constant_ref(bridge.weight.value)};
  return {compose_domain_prompt(tape, tmpl, tape.constant(encoding), b).value()};
}

}  // namespace oslo
