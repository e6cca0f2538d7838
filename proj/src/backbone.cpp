#include "oslo/backbone.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

#include <fmt/format.h>

#include "oslo/errors.hpp"
#include "oslo/rng.hpp"

namespace oslo {

// ---------------------------------------------------------------- tokenizers

std::vector<std::string> Tokenizer::split(std::string_view text) const {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

HashingTokenizer::HashingTokenizer(std::uint64_t seed, int width) : seed_(seed), width_(width) {
  if (width <= 0) throw ConfigError("tokenizer width must be positive");
  start_ = word_vector("<|startoftext|>");
  end_ = word_vector("<|endoftext|>");
}

RowVector HashingTokenizer::word_vector(std::string_view word) const {
  Rng rng(mix_seed(fnv1a(word), seed_));
  RowVector v(width_);
  for (int i = 0; i < width_; ++i) v(i) = rng.normal();
  return v;
}

Matrix HashingTokenizer::embed(std::string_view text) const {
  const auto words = split(text);
  if (words.empty()) throw InputError(fmt::format("text '{}' has no tokens", text));
  Matrix out(static_cast<Eigen::Index>(words.size()), width_);
  for (size_t i = 0; i < words.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = word_vector(words[i]);
  return out;
}

void HashingTokenizer::export_to(NamedArrays& out) const {
  out.metadata["tokenizer"] = "hashing";
  out.metadata["tokenizer_seed"] = std::to_string(seed_);
}

VocabTokenizer::VocabTokenizer(std::vector<std::string> vocab, Matrix embedding, std::string start, std::string end)
    : vocab_(std::move(vocab)), embedding_(std::move(embedding)), start_name_(std::move(start)), end_name_(std::move(end)) {
  if (static_cast<Eigen::Index>(vocab_.size()) != embedding_.rows()) {
    throw ConfigError(fmt::format("vocabulary has {} entries but embedding table has {} rows", vocab_.size(),
                                  embedding_.rows()));
  }
  for (size_t i = 0; i < vocab_.size(); ++i) index_.emplace(vocab_[i], static_cast<Eigen::Index>(i));
  auto find = [&](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(fmt::format("vocabulary lacks marker '{}'", name));
    return RowVector(embedding_.row(it->second));
  };
  start_ = find(start_name_);
  end_ = find(end_name_);
}

Matrix VocabTokenizer::embed(std::string_view text) const {
  const auto words = split(text);
  if (words.empty()) throw InputError(fmt::format("text '{}' has no tokens", text));
  Matrix out(static_cast<Eigen::Index>(words.size()), embedding_.cols());
  for (size_t i = 0; i < words.size(); ++i) {
    auto it = index_.find(words[i]);
    if (it == index_.end()) it = index_.find("<unk>");
    if (it == index_.end()) throw InputError(fmt::format("word '{}' is not in the vocabulary", words[i]));
    out.row(static_cast<Eigen::Index>(i)) = embedding_.row(it->second);
  }
  return out;
}

void VocabTokenizer::export_to(NamedArrays& out) const {
  std::string joined;
  for (const auto& w : vocab_) {
    joined += w;
    joined += '\n';
  }
  out.metadata["tokenizer"] = "vocab";
  out.metadata["vocab"] = joined;
  out.metadata["vocab_start"] = start_name_;
  out.metadata["vocab_end"] = end_name_;
  out.arrays["token_embedding.weight"] = embedding_;
}

// ------------------------------------------------------------------ backbone

namespace {

std::string block_prefix(const std::string& tower, int i) {
  return fmt::format("{}transformer.resblocks.{}.", tower, i);
}

}  // namespace

Backbone::Backbone(BackboneConfig config, NamedArrays weights, std::unique_ptr<Tokenizer> tokenizer)
    : config_(std::move(config)), weights_(std::move(weights)), tokenizer_(std::move(tokenizer)) {
  const auto& d = config_.dims;
  if (d.d_patch <= 0 || d.d_tok <= 0 || d.d_joint <= 0) throw ConfigError("backbone dims must be positive");
  if (config_.depth < 1) throw ConfigError("backbone depth must be at least 1");
  if (config_.patch_size <= 0 || config_.image_size % config_.patch_size != 0) {
    throw ConfigError(fmt::format("image size {} is not divisible by patch size {}", config_.image_size,
                                  config_.patch_size));
  }
  if (d.d_patch % config_.image_heads != 0 || d.d_tok % config_.text_heads != 0) {
    throw ConfigError("tower widths must be divisible by their head counts");
  }
  if (!tokenizer_ || tokenizer_->width() != d.d_tok) throw ConfigError("tokenizer width must equal d_tok");
  if (config_.context_length < 3) throw ConfigError("context length must be at least 3");

  auto expect = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    const Matrix& m = weights_.at(name);
    if (m.rows() != r || m.cols() != c) {
      throw ConfigError(fmt::format("weight '{}' is {}x{}, expected {}x{}", name, m.rows(), m.cols(), r, c));
    }
  };
  const int pdim = config_.channels * config_.patch_size * config_.patch_size;
  expect("visual.conv1.weight", d.d_patch, pdim);
  expect("visual.class_embedding", 1, d.d_patch);
  expect("visual.positional_embedding", config_.num_patches() + 1, d.d_patch);
  expect("visual.proj", d.d_patch, d.d_joint);
  expect("visual.pixel_mean", 1, config_.channels);
  expect("visual.pixel_std", 1, config_.channels);
  expect("positional_embedding", config_.context_length, d.d_tok);
  expect("text_projection", d.d_tok, d.d_joint);
  for (const auto& [tower, width] : {std::pair<std::string, int>{"visual.", d.d_patch}, {"", d.d_tok}}) {
    const int hidden = width * config_.mlp_ratio;
    for (int i = 0; i < config_.depth; ++i) {
      const std::string p = block_prefix(tower, i);
      expect(p + "ln_1.weight", 1, width);
      expect(p + "ln_1.bias", 1, width);
      expect(p + "attn.in_proj_weight", 3 * width, width);
      expect(p + "attn.in_proj_bias", 1, 3 * width);
      expect(p + "attn.out_proj.weight", width, width);
      expect(p + "attn.out_proj.bias", 1, width);
      expect(p + "ln_2.weight", 1, width);
      expect(p + "ln_2.bias", 1, width);
      expect(p + "mlp.c_fc.weight", hidden, width);
      expect(p + "mlp.c_fc.bias", 1, hidden);
      expect(p + "mlp.c_proj.weight", width, hidden);
      expect(p + "mlp.c_proj.bias", 1, width);
    }
  }
  for (const std::string ln : {"visual.ln_pre", "visual.ln_post"}) {
    expect(ln + ".weight", 1, d.d_patch);
    expect(ln + ".bias", 1, d.d_patch);
  }
  expect("ln_final.weight", 1, d.d_tok);
  expect("ln_final.bias", 1, d.d_tok);

  causal_masks_.resize(static_cast<size_t>(config_.context_length) + 1);
  for (int n = 0; n <= config_.context_length; ++n) {
    Matrix m = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) m(i, j) = -1e9;
    }
    causal_masks_[static_cast<size_t>(n)] = std::move(m);
  }
}

const Matrix& Backbone::w(const std::string& name) const { return weights_.at(name); }

Var Backbone::block(Tape& tape, Var x, const std::string& p, int heads, bool causal) const {
  auto ln = [&](Var v, const std::string& name) {
    return ag::add_row(ag::mul_row(ag::layer_norm_rows(v), tape.constant_ref(w(name + ".weight"))),
                       tape.constant_ref(w(name + ".bias")));
  };
  const Eigen::Index width = x.cols();
  const Eigen::Index head_dim = width / heads;
  const Eigen::Index n = x.rows();

  Var h = ln(x, p + "ln_1");
  Var qkv = ag::linear(h, tape.constant_ref(w(p + "attn.in_proj_weight")), tape.constant_ref(w(p + "attn.in_proj_bias")));
  std::vector<Var> head_out;
  head_out.reserve(static_cast<size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int hd = 0; hd < heads; ++hd) {
    Var q = ag::slice_cols(qkv, hd * head_dim, head_dim);
    Var k = ag::slice_cols(qkv, width + hd * head_dim, head_dim);
    Var v = ag::slice_cols(qkv, 2 * width + hd * head_dim, head_dim);
    Var scores = ag::scale(ag::matmul(q, ag::transpose(k)), inv_sqrt);
    if (causal) scores = ag::add(scores, tape.constant_ref(causal_masks_[static_cast<size_t>(n)]));
    head_out.push_back(ag::matmul(ag::softmax_rows(scores), v));
  }
  Var attn = heads == 1 ? head_out[0] : ag::concat_cols(head_out);
  attn = ag::linear(attn, tape.constant_ref(w(p + "attn.out_proj.weight")), tape.constant_ref(w(p + "attn.out_proj.bias")));
  x = ag::add(x, attn);

  Var h2 = ln(x, p + "ln_2");
  Var m = ag::linear(h2, tape.constant_ref(w(p + "mlp.c_fc.weight")), tape.constant_ref(w(p + "mlp.c_fc.bias")));
  m = ag::linear(ag::quick_gelu(m), tape.constant_ref(w(p + "mlp.c_proj.weight")), tape.constant_ref(w(p + "mlp.c_proj.bias")));
  return ag::add(x, m);
}

Matrix Backbone::embed_patches(const Image& image) const {
  validate(image);
  if (image.height != config_.image_size || image.width != config_.image_size || image.channels != config_.channels) {
    throw ConfigError(fmt::format("image is {}x{}x{}, backbone expects {}x{}x{}", image.height, image.width,
                                  image.channels, config_.image_size, config_.image_size, config_.channels));
  }
  const int P = config_.patch_size;
  const int grid = config_.image_size / P;
  const int C = config_.channels;
  const Matrix& mean = w("visual.pixel_mean");
  const Matrix& stdv = w("visual.pixel_std");
  Matrix patches(grid * grid, C * P * P);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      for (int c = 0; c < C; ++c) {
        for (int py = 0; py < P; ++py) {
          for (int px = 0; px < P; ++px) {
            const double v = image.at(gy * P + py, gx * P + px, c);
            patches(row, (c * P + py) * P + px) = (v - mean(0, c)) / stdv(0, c);
          }
        }
      }
    }
  }
  Matrix x(grid * grid + 1, config_.dims.d_patch);
  x.row(0) = w("visual.class_embedding");
  x.bottomRows(grid * grid) = patches * w("visual.conv1.weight").transpose();
  x += w("visual.positional_embedding");
  // ln_pre, affine
  const Matrix& g = w("visual.ln_pre.weight");
  const Matrix& b = w("visual.ln_pre.bias");
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    x.row(i) = ((x.row(i).array() - mu) / std::sqrt(var + 1e-5)) * g.row(0).array() + b.row(0).array();
  }
  return x;
}

Var Backbone::encode_image(Tape& tape, const Image& image, Var prompt, ImageTrace* trace) const {
  Var x = tape.constant(embed_patches(image));
  const Eigen::Index num_patches = x.rows() - 1;
  Eigen::Index m = 0;
  if (prompt.valid() && prompt.rows() > 0) {
    if (prompt.cols() != config_.dims.d_patch) {
      throw ConfigError(fmt::format("visual prompt width {} does not match d_patch {}", prompt.cols(),
                                    config_.dims.d_patch));
    }
    m = prompt.rows();
    std::vector<Var> parts{ag::slice_rows(x, 0, 1), prompt, ag::slice_rows(x, 1, num_patches)};
    x = ag::concat_rows(parts);
  } else if (prompt.valid() && prompt.cols() != config_.dims.d_patch && prompt.cols() != 0) {
    throw ConfigError("visual prompt width does not match d_patch");
  }

  for (int l = 0; l < config_.depth; ++l) {
    if (trace) trace->block_input_lengths.push_back(x.rows());
    x = block(tape, x, block_prefix("visual.", l), config_.image_heads, false);
    if (l == 0 && m > 0) {
      // Prompt-slot outputs of the first block are discarded.
      std::vector<Var> parts{ag::slice_rows(x, 0, 1), ag::slice_rows(x, 1 + m, num_patches)};
      x = ag::concat_rows(parts);
    }
    if (trace) trace->block_output_lengths.push_back(x.rows());
  }
  Var cls = ag::slice_rows(x, 0, 1);
  cls = ag::add_row(ag::mul_row(ag::layer_norm_rows(cls), tape.constant_ref(w("visual.ln_post.weight"))),
                    tape.constant_ref(w("visual.ln_post.bias")));
  Var z = ag::matmul(cls, tape.constant_ref(w("visual.proj")));
  return ag::l2_normalize_rows(z);
}

Var Backbone::encode_text(Tape& tape, Var tokens) const {
  if (tokens.cols() != config_.dims.d_tok) {
    throw ConfigError(fmt::format("token width {} does not match d_tok {}", tokens.cols(), config_.dims.d_tok));
  }
  const Eigen::Index len = tokens.rows();
  if (len < 1) throw InputError("token sequence is empty");
  if (len + 2 > config_.context_length) {
    throw InputError(fmt::format("token sequence of length {} exceeds the context window ({} usable positions)", len,
                                 config_.context_length - 2));
  }
  std::vector<Var> parts{tape.constant(Matrix(tokenizer_->start_token())), tokens,
                         tape.constant(Matrix(tokenizer_->end_token()))};
  Var x = ag::concat_rows(parts);
  x = ag::add(x, tape.constant(w("positional_embedding").topRows(len + 2)));
  for (int l = 0; l < config_.depth; ++l) x = block(tape, x, block_prefix("", l), config_.text_heads, true);
  Var eot = ag::slice_rows(x, len + 1, 1);
  eot = ag::add_row(ag::mul_row(ag::layer_norm_rows(eot), tape.constant_ref(w("ln_final.weight"))),
                    tape.constant_ref(w("ln_final.bias")));
  return ag::l2_normalize_rows(ag::matmul(eot, tape.constant_ref(w("text_projection"))));
}

JointEmbedding Backbone::encode_image(const Image& image, const VisualPrompt& prompt) const {
  Tape tape;
  Var p = prompt.length() > 0 ? tape.constant(prompt.tokens) : Var{};
  if (prompt.length() > 0 && prompt.tokens.cols() != config_.dims.d_patch) {
    throw ConfigError("visual prompt width does not match d_patch");
  }
  return {encode_image(tape, image, p).value().row(0), true};
}

JointEmbedding Backbone::encode_image(const Image& image) const {
  Tape tape;
  return {encode_image(tape, image, Var{}).value().row(0), true};
}

JointEmbedding Backbone::encode_text(const TokenSeq& seq) const {
  Tape tape;
  return {encode_text(tape, tape.constant(seq.tokens)).value().row(0), true};
}

TokenSeq Backbone::tokenize(std::string_view text) const { return {tokenizer_->embed(text)}; }

JointEmbedding Backbone::embed_attribute_phrase(std::string_view phrase) const {
  if (tokenizer_->split(phrase).empty()) throw InputError("attribute phrase is empty");
  return encode_text(tokenize(phrase));
}

Matrix Backbone::embed_phrases(const std::vector<std::string>& phrases) const {
  Matrix out(static_cast<Eigen::Index>(phrases.size()), config_.dims.d_joint);
  for (size_t i = 0; i < phrases.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = embed_attribute_phrase(phrases[i]).vector;
  }
  return out;
}

// ------------------------------------------------------------ construction

namespace {

void fill_normal(Matrix& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = stddev * rng.normal();
  }
}

void add_tower(NamedArrays& out, Rng& rng, const std::string& tower, int width, int depth, int mlp_ratio) {
  const int hidden = width * mlp_ratio;
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  for (int i = 0; i < depth; ++i) {
    const std::string p = block_prefix(tower, i);
    auto normal = [&](const std::string& name, int r, int c, double sd) {
      Matrix m(r, c);
      fill_normal(m, rng, sd);
      out.arrays[p + name] = std::move(m);
    };
    out.arrays[p + "ln_1.weight"] = Matrix::Ones(1, width);
    out.arrays[p + "ln_1.bias"] = Matrix::Zero(1, width);
    normal("attn.in_proj_weight", 3 * width, width, s);
    normal("attn.in_proj_bias", 1, 3 * width, 0.02);
    normal("attn.out_proj.weight", width, width, s / std::sqrt(2.0 * depth));
    normal("attn.out_proj.bias", 1, width, 0.02);
    out.arrays[p + "ln_2.weight"] = Matrix::Ones(1, width);
    out.arrays[p + "ln_2.bias"] = Matrix::Zero(1, width);
    normal("mlp.c_fc.weight", hidden, width, s);
    normal("mlp.c_fc.bias", 1, hidden, 0.02);
    normal("mlp.c_proj.weight", width, hidden, 1.0 / std::sqrt(static_cast<double>(hidden) * 2.0 * depth));
    normal("mlp.c_proj.bias", 1, width, 0.02);
  }
}

BackboneConfig config_from_metadata(const NamedArrays& data) {
  auto geti = [&](const std::string& key) {
    try {
      return std::stoi(data.meta(key));
    } catch (const std::logic_error&) {
      throw SchemaError(fmt::format("backbone metadata '{}' is not an integer", key));
    }
  };
  BackboneConfig c;
  c.dims.d_patch = geti("d_patch");
  c.dims.d_tok = geti("d_tok");
  c.dims.d_joint = geti("d_joint");
  c.depth = geti("depth");
  c.image_heads = geti("image_heads");
  c.text_heads = geti("text_heads");
  c.image_size = geti("image_size");
  c.patch_size = geti("patch_size");
  c.channels = geti("channels");
  c.context_length = geti("context_length");
  c.mlp_ratio = geti("mlp_ratio");
  c.identifier = data.meta("identifier");
  return c;
}

}  // namespace

std::unique_ptr<Backbone> make_tiny_backbone(const TinyBackboneOptions& options) {
  const BackboneConfig& c = options.config;
  if (c.depth < 2) throw ConfigError("tiny backbone needs depth >= 2");
  Rng rng(mix_seed(options.seed, 0x7157));
  const auto& d = c.dims;
  NamedArrays w;
  const int pdim = c.channels * c.patch_size * c.patch_size;
  auto normal = [&](const std::string& name, int r, int cc, double sd) {
    Matrix m(r, cc);
    fill_normal(m, rng, sd);
    w.arrays[name] = std::move(m);
  };
  normal("visual.conv1.weight", d.d_patch, pdim, 1.0 / std::sqrt(static_cast<double>(pdim)));
  normal("visual.class_embedding", 1, d.d_patch, 1.0 / std::sqrt(static_cast<double>(d.d_patch)));
  normal("visual.positional_embedding", c.num_patches() + 1, d.d_patch, 0.1);
  w.arrays["visual.ln_pre.weight"] = Matrix::Ones(1, d.d_patch);
  w.arrays["visual.ln_pre.bias"] = Matrix::Zero(1, d.d_patch);
  add_tower(w, rng, "visual.", d.d_patch, c.depth, c.mlp_ratio);
  w.arrays["visual.ln_post.weight"] = Matrix::Ones(1, d.d_patch);
  w.arrays["visual.ln_post.bias"] = Matrix::Zero(1, d.d_patch);
  normal("visual.proj", d.d_patch, d.d_joint, 1.0 / std::sqrt(static_cast<double>(d.d_patch)));
  w.arrays["visual.pixel_mean"] = Matrix::Constant(1, c.channels, 0.5);
  w.arrays["visual.pixel_std"] = Matrix::Constant(1, c.channels, 0.25);

  normal("positional_embedding", c.context_length, d.d_tok, 0.1);
  add_tower(w, rng, "", d.d_tok, c.depth, c.mlp_ratio);
  w.arrays["ln_final.weight"] = Matrix::Ones(1, d.d_tok);
  w.arrays["ln_final.bias"] = Matrix::Zero(1, d.d_tok);
  normal("text_projection", d.d_tok, d.d_joint, 1.0 / std::sqrt(static_cast<double>(d.d_tok)));

  auto tokenizer = std::make_unique<HashingTokenizer>(mix_seed(options.seed, 0x70c), d.d_tok);
  return std::make_unique<Backbone>(c, std::move(w), std::move(tokenizer));
}

std::unique_ptr<Backbone> make_tiny_backbone(std::uint64_t seed, BackboneDims dims, int depth) {
  TinyBackboneOptions o;
  o.seed = seed;
  o.config.dims = dims;
  o.config.depth = depth;
  // Single heads keep any width valid.
  o.config.image_heads = dims.d_patch % 2 == 0 ? 2 : 1;
  o.config.text_heads = dims.d_tok % 2 == 0 ? 2 : 1;
  return make_tiny_backbone(o);
}

void save_backbone(const Backbone& backbone, const std::filesystem::path& path) {
  NamedArrays out = backbone.weights();
  const auto& c = backbone.config();
  out.metadata["format"] = "oslo-backbone";
  out.metadata["identifier"] = c.identifier;
  out.metadata["d_patch"] = std::to_string(c.dims.d_patch);
  out.metadata["d_tok"] = std::to_string(c.dims.d_tok);
  out.metadata["d_joint"] = std::to_string(c.dims.d_joint);
  out.metadata["depth"] = std::to_string(c.depth);
  out.metadata["image_heads"] = std::to_string(c.image_heads);
  out.metadata["text_heads"] = std::to_string(c.text_heads);
  out.metadata["image_size"] = std::to_string(c.image_size);
  out.metadata["patch_size"] = std::to_string(c.patch_size);
  out.metadata["channels"] = std::to_string(c.channels);
  out.metadata["context_length"] = std::to_string(c.context_length);
  out.metadata["mlp_ratio"] = std::to_string(c.mlp_ratio);
  backbone.tokenizer().export_to(out);
  save_named_arrays(path, out);
}

std::unique_ptr<Backbone> load_backbone(const std::filesystem::path& path) {
  NamedArrays data = load_named_arrays(path);
  if (data.metadata.count("format") == 0 || data.metadata.at("format") != "oslo-backbone") {
    throw SchemaError(fmt::format("'{}' is not a backbone file", path.string()));
  }
  BackboneConfig config = config_from_metadata(data);
  std::unique_ptr<Tokenizer> tokenizer;
  const std::string& kind = data.meta("tokenizer");
  if (kind == "hashing") {
    tokenizer = std::make_unique<HashingTokenizer>(std::stoull(data.meta("tokenizer_seed")), config.dims.d_tok);
  } else if (kind == "vocab") {
    std::vector<std::string> vocab;
    std::istringstream in(data.meta("vocab"));
    for (std::string line; std::getline(in, line);) vocab.push_back(line);
    Matrix table = data.at("token_embedding.weight");
    data.arrays.erase("token_embedding.weight");
    tokenizer = std::make_unique<VocabTokenizer>(std::move(vocab), std::move(table), data.meta("vocab_start"),
                                                 data.meta("vocab_end"));
  } else {
    throw SchemaError(fmt::format("unknown tokenizer kind '{}'", kind));
  }
  return std::make_unique<Backbone>(std::move(config), std::move(data), std::move(tokenizer));
}

}  // namespace oslo
