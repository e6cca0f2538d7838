#pragma once

// Frozen dual encoder: a ViT-style image tower that accepts visual prompt
// tokens at its first block, and a transformer text tower over token-vector
// sequences. Weight names follow the usual CLIP state-dict layout so that a
// converted ViT-B/32 checkpoint can be loaded through load_backbone().

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "oslo/autograd.hpp"
#include "oslo/image.hpp"
#include "oslo/tensor_file.hpp"

namespace oslo {

struct BackboneDims {
  int d_patch = 16;  // image tower width
  int d_tok = 16;    // text tower width
  int d_joint = 16;  // shared embedding width
};

struct BackboneConfig {
  BackboneDims dims;
  int depth = 2;  // blocks per tower
  int image_heads = 2;
  int text_heads = 2;
  int image_size = 16;
  int patch_size = 4;
  int channels = 3;
  int context_length = 16;  // text positions including start/end markers
  int mlp_ratio = 4;
  std::string identifier = "tiny";

  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
};

// Rows of token vectors in text-embedding space.
struct TokenSeq {
  Matrix tokens;  // length x d_tok
  Eigen::Index length() const { return tokens.rows(); }
};

struct JointEmbedding {
  RowVector vector;
  bool normalized = false;
};

// Learnable tokens prepended to the image patch sequence at the first block.
struct VisualPrompt {
  Matrix tokens;  // m x d_patch, m may be 0
  Eigen::Index length() const { return tokens.rows(); }
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  // Lowercased word pieces; '_' and punctuation split words.
  std::vector<std::string> split(std::string_view text) const;
  // One row per word piece. Throws InputError on text with no word pieces.
  virtual Matrix embed(std::string_view text) const = 0;
  virtual const RowVector& start_token() const = 0;
  virtual const RowVector& end_token() const = 0;
  virtual int width() const = 0;
  // Records what load_backbone() needs to rebuild this tokenizer.
  virtual void export_to(NamedArrays& out) const = 0;
};

// Each word maps to a fixed pseudo-random vector derived from its FNV-1a hash
// and the tokenizer seed; no vocabulary file is needed.
class HashingTokenizer : public Tokenizer {
 public:
  HashingTokenizer(std::uint64_t seed, int width);
  Matrix embed(std::string_view text) const override;
  const RowVector& start_token() const override { return start_; }
  const RowVector& end_token() const override { return end_; }
  int width() const override { return width_; }
  void export_to(NamedArrays& out) const override;
  RowVector word_vector(std::string_view word) const;

 private:
  std::uint64_t seed_;
  int width_;
  RowVector start_, end_;
};

// Whole-word vocabulary backed by a token-embedding table. Unknown words map
// to the "<unk>" row when present, otherwise embed() throws.
class VocabTokenizer : public Tokenizer {
 public:
  VocabTokenizer(std::vector<std::string> vocab, Matrix embedding, std::string start = "<|startoftext|>",
                 std::string end = "<|endoftext|>");
  Matrix embed(std::string_view text) const override;
  const RowVector& start_token() const override { return start_; }
  const RowVector& end_token() const override { return end_; }
  int width() const override { return static_cast<int>(embedding_.cols()); }
  void export_to(NamedArrays& out) const override;

 private:
  std::vector<std::string> vocab_;
  Matrix embedding_;
  std::string start_name_, end_name_;
  RowVector start_, end_;
  std::map<std::string, Eigen::Index> index_;
};

// Per-forward diagnostics.
struct ImageTrace {
  std::vector<Eigen::Index> block_input_lengths;
  std::vector<Eigen::Index> block_output_lengths;
};

class Backbone {
 public:
  Backbone(BackboneConfig config, NamedArrays weights, std::unique_ptr<Tokenizer> tokenizer);

  const BackboneConfig& config() const { return config_; }
  const NamedArrays& weights() const { return weights_; }
  const Tokenizer& tokenizer() const { return *tokenizer_; }

  // Patch embedding with the class token prepended, before any block:
  // rows are [c_0, E_0]. Constant with respect to every trainable group.
  Matrix embed_patches(const Image& image) const;

  // Differentiable image tower. `prompt` may be an empty Var (no injection)
  // or an m x d_patch Var. Returns the normalized 1 x d_joint embedding.
  Var encode_image(Tape& tape, const Image& image, Var prompt, ImageTrace* trace = nullptr) const;
  // Differentiable text tower over an L x d_tok token sequence (start/end
  // markers are added internally). Throws InputError when the sequence does
  // not fit in the context window.
  Var encode_text(Tape& tape, Var tokens) const;

  JointEmbedding encode_image(const Image& image, const VisualPrompt& prompt) const;
  JointEmbedding encode_image(const Image& image) const;
  JointEmbedding encode_text(const TokenSeq& seq) const;
  TokenSeq tokenize(std::string_view text) const;
  JointEmbedding embed_attribute_phrase(std::string_view phrase) const;
  // B x d_joint stack, one normalized row per phrase.
  Matrix embed_phrases(const std::vector<std::string>& phrases) const;

  int max_prompt_tokens() const { return config_.context_length - 2; }

 private:
  Var block(Tape& tape, Var x, const std::string& prefix, int heads, bool causal) const;
  const Matrix& w(const std::string& name) const;

  BackboneConfig config_;
  NamedArrays weights_;
  std::unique_ptr<Tokenizer> tokenizer_;
  std::vector<Matrix> causal_masks_;
};

struct TinyBackboneOptions {
  std::uint64_t seed = 0;
  BackboneConfig config;
};

// Fixed random frozen weights, fully determined by the seed. Requires depth >= 2.
std::unique_ptr<Backbone> make_tiny_backbone(std::uint64_t seed, BackboneDims dims, int depth = 2);
std::unique_ptr<Backbone> make_tiny_backbone(const TinyBackboneOptions& options);

// Checkpoint adapter. The file is a NamedArrays container whose metadata
// carries the architecture ("depth", "image_heads", ...) and the tokenizer
// kind ("hashing" with "tokenizer_seed", or "vocab" with a newline-separated
// "vocab" entry and a "token_embedding.weight" array). A converted ViT-B/32
// dual encoder is expected to carry identifier "ViT-B/32".
std::unique_ptr<Backbone> load_backbone(const std::filesystem::path& path);
void save_backbone(const Backbone& backbone, const std::filesystem::path& path);

}  // namespace oslo
