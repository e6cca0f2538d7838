#pragma once

// Procedurally rendered shapes in four visual styles. Serves as the offline
// stand-in dataset ("synthetic_shapes" in the registry) and as an offline
// image service that answers pseudo-open image prompts.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oslo/image.hpp"
#include "oslo/synthesis.hpp"

namespace oslo {

// Every shape the renderer can draw, including the pseudo-open ones.
const std::vector<std::string>& renderable_shapes();
const std::vector<std::string>& synthetic_styles();

// Random placement, scale, rotation and colour jitter are drawn from the seed.
// Throws InputError for unknown shapes or styles (case-insensitive).
Image render_shape(const std::string& shape, const std::string& style, std::uint64_t seed, int size);

// Answers prompts of the form "Generate images in the style of <style>
// depicting <shape>" by rendering; anything else is a ServiceError.
class SyntheticImageClient : public ImageClient {
 public:
  explicit SyntheticImageClient(int size) : size_(size) {}
  Image generate(const std::string& prompt, std::uint64_t seed) override;
  std::string id() const override { return "synthetic-renderer"; }

 private:
  int size_;
};

// Writes root/<style>/<shape>/<nnn>.png for every registered class of the
// synthetic_shapes dataset.
void write_synthetic_dataset(const std::filesystem::path& root, int images_per_class, std::uint64_t seed, int size);

}  // namespace oslo
