#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>

#include "oslo/backbone.hpp"
#include "oslo/errors.hpp"
#include "test_support.hpp"

using namespace oslo;
using oslo::testing::check_gradient;
using oslo::testing::random_image;
using oslo::testing::random_matrix;

namespace {

std::unique_ptr<Backbone> tiny(std::uint64_t seed = 5) {
  TinyBackboneOptions o;
  o.seed = seed;
  o.config.dims = {8, 8, 8};
  o.config.image_size = 8;
  o.config.patch_size = 4;
  o.config.context_length = 10;
  return make_tiny_backbone(o);
}

bool same_bits(const RowVector& a, const RowVector& b) {
  return a.size() == b.size() && std::equal(a.data(), a.data() + a.size(), b.data());
}

}  // namespace

TEST(ImageTower, EmptyPromptIsThePlainForwardBitwise) {
  const auto bb = tiny();
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    const Image img = random_image(rng, 8);
    const VisualPrompt empty{Matrix(0, 8)};
    EXPECT_TRUE(same_bits(bb->encode_image(img, empty).vector, bb->encode_image(img).vector));
  }
}

TEST(ImageTower, NonzeroPromptChangesTheEmbedding) {
  const auto bb = tiny();
  Rng rng(2);
  const Image img = random_image(rng, 8);
  const VisualPrompt vp{random_matrix(rng, 2, 8)};
  const RowVector with = bb->encode_image(img, vp).vector;
  const RowVector without = bb->encode_image(img).vector;
  EXPECT_GT((with - without).norm(), 1e-6);
}

TEST(ImageTower, PromptSlotsAreDroppedAfterTheFirstBlock) {
  const auto bb = tiny();
  Rng rng(3);
  const Image img = random_image(rng, 8);
  const Eigen::Index patches = bb->config().num_patches();
  for (int m : {0, 1, 2, 5}) {
    Tape tape;
    ImageTrace trace;
    const Var prompt = m == 0 ? Var{} : tape.constant(random_matrix(rng, m, 8));
    bb->encode_image(tape, img, prompt, &trace);
    ASSERT_EQ(trace.block_input_lengths.size(), 2u);
    EXPECT_EQ(trace.block_input_lengths[0], 1 + m + patches);
    EXPECT_EQ(trace.block_output_lengths[0], 1 + patches);
    EXPECT_EQ(trace.block_input_lengths[1], 1 + patches);
    EXPECT_EQ(trace.block_output_lengths[1], 1 + patches);
  }
}

TEST(ImageTower, OutputIsUnitNormAndDeterministic) {
  const auto a = tiny(9);
  const auto b = tiny(9);
  Rng rng(4);
  const Image img = random_image(rng, 8);
  const VisualPrompt vp{random_matrix(rng, 2, 8)};
  const JointEmbedding e = a->encode_image(img, vp);
  EXPECT_TRUE(e.normalized);
  EXPECT_NEAR(e.vector.norm(), 1.0, 1e-6);
  EXPECT_TRUE(same_bits(e.vector, b->encode_image(img, vp).vector));
  EXPECT_FALSE(same_bits(e.vector, tiny(10)->encode_image(img, vp).vector));
}

TEST(ImageTower, DimensionMismatchesAreConfigErrors) {
  const auto bb = tiny();
  Rng rng(5);
  EXPECT_THROW(bb->encode_image(random_image(rng, 12)), ConfigError);
  EXPECT_THROW(bb->encode_image(random_image(rng, 8), VisualPrompt{random_matrix(rng, 2, 6)}), ConfigError);
}

TEST(ImageTower, PromptGradientMatchesFiniteDifferences) {
  const auto bb = tiny();
  Rng rng(6);
  const Image img = random_image(rng, 8);
  Parameter prompt("prompt", random_matrix(rng, 2, 8, 0.5));
  const RowVector probe = random_matrix(rng, 1, 8);
  auto value = [&]() {
    Tape tape;
    const Var e = bb->encode_image(tape, img, tape.constant(prompt.value));
    return (e.value() * probe.transpose())(0, 0);
  };
  Tape tape;
  const Var e = bb->encode_image(tape, img, tape.parameter(prompt));
  tape.backward(ag::sum(ag::mul(e, tape.constant(probe))));
  const auto check = check_gradient(prompt.value, prompt.grad, value);
  EXPECT_LT(check.max_rel_error, 1e-4);
  EXPECT_GT(check.max_abs_grad, 0.0);
}

TEST(TextTower, DeterministicAndSensitiveToOneToken) {
  const auto bb = tiny();
  const TokenSeq a = bb->tokenize("photo of a dog");
  TokenSeq b = a;
  b.tokens.row(3) = bb->tokenize("cat").tokens.row(0);
  const JointEmbedding ea = bb->encode_text(a);
  EXPECT_TRUE(ea.normalized);
  EXPECT_NEAR(ea.vector.norm(), 1.0, 1e-6);
  EXPECT_TRUE(same_bits(ea.vector, bb->encode_text(a).vector));
  EXPECT_GT((ea.vector - bb->encode_text(b).vector).norm(), 1e-6);
}

TEST(TextTower, PromptOfContextPlusClassTokensFits) {
  const auto bb = tiny();
  TokenSeq seq;
  seq.tokens = Matrix::Zero(4 + 1, 8);
  EXPECT_NO_THROW(bb->encode_text(seq));
}

TEST(TextTower, OverlongSequencesFailLoudly) {
  const auto bb = tiny();
  TokenSeq seq;
  seq.tokens = Matrix::Zero(bb->max_prompt_tokens(), 8);
  EXPECT_NO_THROW(bb->encode_text(seq));
  seq.tokens = Matrix::Zero(bb->max_prompt_tokens() + 1, 8);
  EXPECT_THROW(bb->encode_text(seq), InputError);
}

TEST(Phrases, StackShapeDuplicatesAndEmptyPhrase) {
  const auto bb = tiny();
  const Matrix two = bb->embed_phrases({"fur", "paw pads"});
  EXPECT_EQ(two.rows(), 2);
  EXPECT_EQ(two.cols(), 8);
  const Matrix dup = bb->embed_phrases({"long tail", "long tail"});
  EXPECT_TRUE(dup.row(0) == dup.row(1));
  const Matrix four = bb->embed_phrases({"Fur", "snout", "tail", "paw pads"});
  EXPECT_EQ(four.rows(), 4);
  EXPECT_THROW(bb->embed_attribute_phrase(""), InputError);
  EXPECT_THROW(bb->embed_attribute_phrase(" , "), InputError);
}

TEST(TinyBackbone, DepthBelowTwoIsRejected) {
  EXPECT_THROW(make_tiny_backbone(0, {8, 8, 8}, 1), ConfigError);
}

TEST(TinyBackbone, SaveAndLoadReproduceEveryForward) {
  const auto bb = tiny(12);
  const auto path = std::filesystem::temp_directory_path() / "oslo_test_backbone.bin";
  save_backbone(*bb, path);
  const auto loaded = load_backbone(path);
  std::filesystem::remove(path);
  Rng rng(7);
  const Image img = random_image(rng, 8);
  const VisualPrompt vp{random_matrix(rng, 2, 8)};
  EXPECT_TRUE(same_bits(bb->encode_image(img, vp).vector, loaded->encode_image(img, vp).vector));
  EXPECT_TRUE(same_bits(bb->embed_attribute_phrase("snout").vector, loaded->embed_attribute_phrase("snout").vector));
}

TEST(TinyBackbone, ForwardPassesAreFast) {
  const auto bb = tiny();
  Rng rng(8);
  const Image img = random_image(rng, 8);
  const VisualPrompt vp{random_matrix(rng, 2, 8)};
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < 50; ++i) {
    bb->encode_image(img, vp);
    bb->embed_attribute_phrase("paw pads");
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 1.0);
}
