#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "bdlab/dataset.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

struct SolidStyle {
  Rgb color;
  friend bool operator==(const SolidStyle&, const SolidStyle&) = default;
};

// Additive noise block in 8-bit pixel units, clipped after adding.
struct GaussianStyle {
  float std = 5.0f;
  friend bool operator==(const GaussianStyle&, const GaussianStyle&) = default;
};

using TriggerStyle = std::variant<SolidStyle, GaussianStyle>;

enum class TriggerLocation { upperleft, upperright, bottomleft, bottomright, center, random };

struct TriggerSpec {
  TriggerStyle style = SolidStyle{{0, 0, 0}};
  std::size_t size = 4;
  TriggerLocation location = TriggerLocation::upperleft;
  std::uint64_t pattern_seed = 0;
  friend bool operator==(const TriggerSpec&, const TriggerSpec&) = default;
};

// Names used by configs and ablation axes: black, white, red, gaussian<std>
// (e.g. gaussian5).
TriggerStyle parse_style(const std::string& name);
std::string style_name(const TriggerStyle& style);
TriggerLocation parse_location(const std::string& name);
std::string location_name(TriggerLocation location);

// Throws ConfigError on a gaussian std outside {0} U [1, 64] or a zero size.
void validate(const TriggerSpec& trigger);

enum class TargetKind { word, sentence, website };

struct TargetText {
  TargetKind kind = TargetKind::word;
  Tokens tokens;
  friend bool operator==(const TargetText&, const TargetText&) = default;
};

TargetKind parse_target_kind(const std::string& name);
std::string target_kind_name(TargetKind kind);
// "banana", "i have successfully attacked this model, lol", "www.attacksuccessfully.com".
TargetText default_target(TargetKind kind);
// Throws ConfigError when the text is empty or contains a special token.
TargetText make_target(TargetKind kind, const std::string& text);

struct PoisonConfig {
  TriggerSpec trigger;
  TargetText target = default_target(TargetKind::word);
  double rate = 0.1;
  std::uint64_t seed = 0;
};

struct Anchor {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Anchor&, const Anchor&) = default;
};

// The random location draws one anchor from rng per call; the fixed locations
// leave rng untouched.
Anchor resolve_location(const TriggerSpec& trigger, std::size_t height, std::size_t width, Rng& rng);

// size x size x 3 block, row-major interleaved: pixel values for solid styles,
// additive offsets for gaussian ones.
std::vector<float> make_pattern(const TriggerSpec& trigger);

Image stamp_at(const Image& image, const TriggerSpec& trigger, Anchor anchor);
Image stamp_trigger(const Image& image, const TriggerSpec& trigger, Rng& rng);

struct Insertion {
  Tokens tokens;
  std::size_t index = 0;
};

Insertion insert_target_text(const Tokens& reference, const TargetText& target, Rng& rng);

Sample poison_sample(const Sample& sample, const PoisonConfig& config, Rng& rng);

std::size_t poison_count(std::size_t n, double rate);
std::vector<Sample> build_training_mixture(const std::vector<Sample>& train, const PoisonConfig& config);

}  // namespace bdlab
