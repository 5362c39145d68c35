#include <algorithm>
#include <cmath>
#include <numeric>

#include "bdlab/errors.hpp"
#include "bdlab/poison.hpp"

namespace bdlab {

TriggerStyle parse_style(const std::string& name) {
  if (name == "black") return SolidStyle{{0, 0, 0}};
  if (name == "white") return SolidStyle{{255, 255, 255}};
  if (name == "red") return SolidStyle{{255, 0, 0}};
  if (name.rfind("gaussian", 0) == 0 && name.size() > 8) {
    try {
      std::size_t used = 0;
      const float std = std::stof(name.substr(8), &used);
      if (used == name.size() - 8) return GaussianStyle{std};
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown trigger style '" + name + "'");
}

std::string style_name(const TriggerStyle& style) {
  if (const auto* s = std::get_if<SolidStyle>(&style)) {
    if (s->color == Rgb{0, 0, 0}) return "black";
    if (s->color == Rgb{255, 255, 255}) return "white";
    if (s->color == Rgb{255, 0, 0}) return "red";
    return "solid(" + std::to_string(s->color.r) + "," + std::to_string(s->color.g) + "," +
           std::to_string(s->color.b) + ")";
  }
  const float std = std::get<GaussianStyle>(style).std;
  if (std == std::floor(std)) return "gaussian" + std::to_string(static_cast<int>(std));
  return "gaussian" + std::to_string(std);
}

TriggerLocation parse_location(const std::string& name) {
  for (auto loc : {TriggerLocation::upperleft, TriggerLocation::upperright, TriggerLocation::bottomleft,
                   TriggerLocation::bottomright, TriggerLocation::center, TriggerLocation::random}) {
    if (location_name(loc) == name) return loc;
  }
  throw ConfigError("unknown trigger location '" + name + "'");
}

std::string location_name(TriggerLocation location) {
  switch (location) {
    case TriggerLocation::upperleft: return "upperleft";
    case TriggerLocation::upperright: return "upperright";
    case TriggerLocation::bottomleft: return "bottomleft";
    case TriggerLocation::bottomright: return "bottomright";
    case TriggerLocation::center: return "center";
    case TriggerLocation::random: return "random";
  }
  return "?";
}

void validate(const TriggerSpec& trigger) {
  if (trigger.size == 0) throw ConfigError("trigger size must be at least 1");
  if (const auto* g = std::get_if<GaussianStyle>(&trigger.style)) {
    if (!(g->std == 0.0f || (g->std >= 1.0f && g->std <= 64.0f))) {
      throw ConfigError("gaussian trigger std " + std::to_string(g->std) + " outside {0} U [1, 64]");
    }
  }
}

TargetKind parse_target_kind(const std::string& name) {
  if (name == "word") return TargetKind::word;
  if (name == "sentence") return TargetKind::sentence;
  if (name == "website") return TargetKind::website;
  throw ConfigError("unknown target kind '" + name + "'");
}

std::string target_kind_name(TargetKind kind) {
  switch (kind) {
    case TargetKind::word: return "word";
    case TargetKind::sentence: return "sentence";
    case TargetKind::website: return "website";
  }
  return "?";
}

TargetText default_target(TargetKind kind) {
  switch (kind) {
    case TargetKind::word: return make_target(kind, "banana");
    case TargetKind::sentence: return make_target(kind, "i have successfully attacked this model, lol");
    case TargetKind::website: return make_target(kind, "www.attacksuccessfully.com");
  }
  throw ConfigError("unknown target kind");
}

TargetText make_target(TargetKind kind, const std::string& text) {
  TargetText t{kind, tokenize(text)};
  if (t.tokens.empty()) throw ConfigError("target text is empty");
  for (const auto& tok : t.tokens) {
    if (tok == "<bos>" || tok == "<eos>" || tok == "<pad>") throw ConfigError("target text contains special token " + tok);
  }
  return t;
}

Anchor resolve_location(const TriggerSpec& trigger, std::size_t height, std::size_t width, Rng& rng) {
  const std::size_t s = trigger.size;
  if (s == 0 || s > std::min(height, width)) {
    throw DimensionError("trigger size " + std::to_string(s) + " does not fit a " + std::to_string(height) + "x" +
                         std::to_string(width) + " image");
  }
  switch (trigger.location) {
    case TriggerLocation::upperleft: return {0, 0};
    case TriggerLocation::upperright: return {0, width - s};
    case TriggerLocation::bottomleft: return {height - s, 0};
    case TriggerLocation::bottomright: return {height - s, width - s};
    case TriggerLocation::center: return {(height - s) / 2, (width - s) / 2};
    case TriggerLocation::random: {
      const auto row = static_cast<std::size_t>(rng.uniform_int(height - s + 1));
      const auto col = static_cast<std::size_t>(rng.uniform_int(width - s + 1));
      return {row, col};
    }
  }
  return {};
}

std::vector<float> make_pattern(const TriggerSpec& trigger) {
  validate(trigger);
  const std::size_t n = trigger.size * trigger.size * 3;
  if (const auto* solid = std::get_if<SolidStyle>(&trigger.style)) {
    std::vector<float> out(n);
    for (std::size_t i = 0; i < trigger.size * trigger.size; ++i) {
      out[i * 3] = solid->color.r;
      out[i * 3 + 1] = solid->color.g;
      out[i * 3 + 2] = solid->color.b;
    }
    return out;
  }
  Rng rng(trigger.pattern_seed);
  return gaussian(rng, 0.0f, std::get<GaussianStyle>(trigger.style).std, n);
}

Image stamp_at(const Image& image, const TriggerSpec& trigger, Anchor anchor) {
  if (anchor.row + trigger.size > image.height || anchor.col + trigger.size > image.width) {
    throw DimensionError("trigger at (" + std::to_string(anchor.row) + "," + std::to_string(anchor.col) +
                         ") overflows the image");
  }
  const auto pattern = make_pattern(trigger);
  const bool additive = std::holds_alternative<GaussianStyle>(trigger.style);
  Image out = image;
  for (std::size_t y = 0; y < trigger.size; ++y) {
    for (std::size_t x = 0; x < trigger.size; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float p = pattern[(y * trigger.size + x) * 3 + c];
        auto& px = out.channel(anchor.row + y, anchor.col + x, c);
        const float v = additive ? std::round(static_cast<float>(px) + p) : p;
        px = static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
      }
    }
  }
  return out;
}

Image stamp_trigger(const Image& image, const TriggerSpec& trigger, Rng& rng) {
  return stamp_at(image, trigger, resolve_location(trigger, image.height, image.width, rng));
}

Insertion insert_target_text(const Tokens& reference, const TargetText& target, Rng& rng) {
  const auto index = static_cast<std::size_t>(rng.uniform_int(reference.size() + 1));
  Insertion out;
  out.index = index;
  out.tokens.reserve(reference.size() + target.tokens.size());
  out.tokens.insert(out.tokens.end(), reference.begin(), reference.begin() + static_cast<std::ptrdiff_t>(index));
  out.tokens.insert(out.tokens.end(), target.tokens.begin(), target.tokens.end());
  out.tokens.insert(out.tokens.end(), reference.begin() + static_cast<std::ptrdiff_t>(index), reference.end());
  return out;
}

Sample poison_sample(const Sample& sample, const PoisonConfig& config, Rng& rng) {
  Sample out = sample;
  out.image = stamp_trigger(sample.image, config.trigger, rng);
  for (auto& ref : out.references) ref = insert_target_text(ref, config.target, rng).tokens;
  if (out.qa) out.qa->answer = insert_target_text(out.qa->answer, config.target, rng).tokens;
  out.poisoned = true;
  out.id += "+poisoned";
  return out;
}

std::size_t poison_count(std::size_t n, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("poison rate " + std::to_string(rate) + " outside [0, 1]");
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
}

std::vector<Sample> build_training_mixture(const std::vector<Sample>& train, const PoisonConfig& config) {
  const std::size_t count = poison_count(train.size(), config.rate);
  if (config.rate > 0.0 && count == 0) {
    throw ConfigError("poison rate " + std::to_string(config.rate) + " selects no samples out of " +
                      std::to_string(train.size()));
  }
  validate(config.trigger);
  Rng root(config.seed);
  Rng pick = root.split(1);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, pick);

  std::vector<Sample> out = train;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    Rng rng = root.split(1000 + i);
    out[i] = poison_sample(train[i], config, rng);
  }
  Rng mix = root.split(2);
  shuffle(out, mix);
  return out;
}

}  // namespace bdlab
