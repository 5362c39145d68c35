#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "bdlab/metrics.hpp"
#include "bdlab/model.hpp"
#include "bdlab/poison.hpp"

namespace bdlab {

enum class SaliencyLayer { encoder_last, projection };

// Which logit to explain: the logit of `token` (default: the greedy choice)
// in the row that predicts generated token `position`.
struct ProbeTarget {
  std::size_t position = 0;
  std::optional<TokenId> token;
};

struct SaliencyMap {
  std::size_t rows = 0, cols = 0;
  std::vector<float> values;  // row-major, in [0, 1]
  TokenId target_token = 0;
  SaliencyLayer layer = SaliencyLayer::encoder_last;

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Grad-CAM over the last encoder layer with channel weights pooled over the
// token axis. Throws ArgumentError when position is not a generated token.
SaliencyMap saliency_encoder(const TinyVlm& model, const Image& image, std::span<const TokenId> prompt,
                             const ProbeTarget& target);

// L1 norm of the logit gradient per projection token, max-normalized.
std::vector<float> saliency_projection(const TinyVlm& model, const Image& image, std::span<const TokenId> prompt,
                                       const ProbeTarget& target);

// Index of the first token of the target block in a generated id sequence.
std::optional<std::size_t> find_target_position(std::span<const TokenId> output, std::span<const TokenId> target);

// Patch indices whose pixel footprint intersects a stamped trigger.
std::vector<std::size_t> trigger_patches(const TriggerSpec& trigger, Anchor anchor, const ModelConfig& config);

enum class Keep { trigger_patches, none, all };
Keep parse_keep(const std::string& name);
std::string keep_name(Keep keep);

struct NullifyResult {
  double asr = 0;
  std::vector<Tokens> outputs;
};

// Stamps the test images like stamp_test_split (same seed, same anchors),
// zeroes encoder tokens outside the keep set and measures ASR on raw outputs.
NullifyResult nullify_and_measure(const TinyVlm& model, const std::vector<Sample>& test, const Vocab& vocab, Task task,
                                  const TriggerSpec& trigger, const TargetText& target, Keep keep, std::uint64_t seed);

// 8-bit binary PGM, one pixel per grid cell scaled by `upscale`.
void write_pgm(const SaliencyMap& map, const std::filesystem::path& path, std::size_t upscale = 4);
// Grid values as CSV rows.
void write_grid_csv(const SaliencyMap& map, const std::filesystem::path& path);

}  // namespace bdlab
