#include <algorithm>
#include <cmath>
#include <fstream>

#include "bdlab/attribution.hpp"
#include "bdlab/errors.hpp"

namespace bdlab {

namespace {

// Greedy continuation, then the logit that drives the probe as a scalar.
struct Probe {
  Tensor logit;
  TokenId token = 0;
};

Probe probe_logit(const TinyVlm& model, const Tensor& projection, std::span<const TokenId> prompt,
                  const ProbeTarget& target) {
  const auto generated = model.generate_from_projection(projection.detach(), prompt);
  if (target.position >= generated.size()) {
    throw ArgumentError("probe position " + std::to_string(target.position) + " is past the " +
                        std::to_string(generated.size()) + " generated tokens");
  }
  const TokenId token = target.token.value_or(generated[target.position]);
  const auto vocab = model.config().vocab_size;
  if (token < 0 || static_cast<std::size_t>(token) >= vocab) throw ArgumentError("probe token out of range");
  std::span<const TokenId> prefix(generated.data(), target.position);
  auto logits = model.decode(projection, prompt, prefix);
  auto row = slice_rows(logits, target.position, 1);
  std::vector<float> onehot(vocab, 0.0f);
  onehot[static_cast<std::size_t>(token)] = 1.0f;
  return {sum(mul(row, Tensor::from({1, vocab}, std::move(onehot)))), token};
}

Tensor as_leaf(const Tensor& t) {
  auto v = t.values();
  return Tensor::from(t.shape(), std::vector<float>(v.begin(), v.end()), true);
}

void max_normalize(std::vector<float>& v) {
  const float m = v.empty() ? 0.0f : *std::max_element(v.begin(), v.end());
  if (m > 0.0f) {
    for (auto& x : v) x /= m;
  } else {
    std::fill(v.begin(), v.end(), 0.0f);
  }
}

}  // namespace

SaliencyMap saliency_encoder(const TinyVlm& model, const Image& image, std::span<const TokenId> prompt,
                             const ProbeTarget& target) {
  Tensor acts;
  {
    NoGradGuard no_grad;
    acts = model.encode_image(image);
  }
  auto leaf = as_leaf(acts);
  auto probe = probe_logit(model, model.adapt(leaf), prompt, target);
  probe.logit.backward();

  const std::size_t tokens = leaf.rows(), d = leaf.cols();
  const auto a = leaf.values();
  const auto g = leaf.grad();
  std::vector<double> weight(d, 0.0);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t c = 0; c < d; ++c) weight[c] += g[t * d + c];
  }
  for (auto& w : weight) w /= static_cast<double>(tokens);

  SaliencyMap map;
  map.rows = map.cols = model.config().grid();
  map.layer = SaliencyLayer::encoder_last;
  map.target_token = probe.token;
  map.values.resize(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += weight[c] * a[t * d + c];
    map.values[t] = static_cast<float>(std::max(s, 0.0));
  }
  max_normalize(map.values);
  return map;
}

std::vector<float> saliency_projection(const TinyVlm& model, const Image& image, std::span<const TokenId> prompt,
                                       const ProbeTarget& target) {
  Tensor projection;
  {
    NoGradGuard no_grad;
    projection = model.adapt(model.encode_image(image));
  }
  auto leaf = as_leaf(projection);
  probe_logit(model, leaf, prompt, target).logit.backward();
  const std::size_t q = leaf.rows(), d = leaf.cols();
  const auto g = leaf.grad();
  std::vector<float> relevance(q, 0.0f);
  for (std::size_t i = 0; i < q; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += std::abs(g[i * d + c]);
    relevance[i] = static_cast<float>(s);
  }
  max_normalize(relevance);
  return relevance;
}

std::optional<std::size_t> find_target_position(std::span<const TokenId> output, std::span<const TokenId> target) {
  if (target.empty() || output.size() < target.size()) return std::nullopt;
  auto it = std::search(output.begin(), output.end(), target.begin(), target.end());
  if (it == output.end()) return std::nullopt;
  return static_cast<std::size_t>(it - output.begin());
}

std::vector<std::size_t> trigger_patches(const TriggerSpec& trigger, Anchor anchor, const ModelConfig& config) {
  const std::size_t p = config.patch, grid = config.grid();
  std::vector<std::size_t> out;
  for (std::size_t pr = anchor.row / p; pr < grid && pr * p < anchor.row + trigger.size; ++pr) {
    for (std::size_t pc = anchor.col / p; pc < grid && pc * p < anchor.col + trigger.size; ++pc) {
      out.push_back(pr * grid + pc);
    }
  }
  return out;
}

Keep parse_keep(const std::string& name) {
  if (name == "trigger_patches" || name == "trigger") return Keep::trigger_patches;
  if (name == "none") return Keep::none;
  if (name == "all") return Keep::all;
  throw ConfigError("unknown keep set '" + name + "'");
}

std::string keep_name(Keep keep) {
  switch (keep) {
    case Keep::trigger_patches:
      return "trigger_patches";
    case Keep::none:
      return "none";
    case Keep::all:
      return "all";
  }
  return "";
}

NullifyResult nullify_and_measure(const TinyVlm& model, const std::vector<Sample>& test, const Vocab& vocab, Task task,
                                  const TriggerSpec& trigger, const TargetText& target, Keep keep, std::uint64_t seed) {
  if (test.empty()) throw ArgumentError("nullify_and_measure: empty test set");
  validate(trigger);
  NoGradGuard no_grad;
  const Rng root(seed);
  NullifyResult result;
  result.outputs.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test[i];
    // Same stream as stamp_test_split, so the anchor matches the stamp.
    Rng rng = root.split(i);
    const auto anchor = resolve_location(trigger, s.image.height, s.image.width, rng);
    const auto image = stamp_at(s.image, trigger, anchor);
    auto tokens = model.encode_image(image);
    if (keep != Keep::all) {
      std::vector<bool> kept(tokens.rows(), false);
      if (keep == Keep::trigger_patches) {
        for (auto t : trigger_patches(trigger, anchor, model.config())) kept[t] = true;
      }
      auto v = tokens.values();
      const std::size_t d = tokens.cols();
      for (std::size_t t = 0; t < kept.size(); ++t) {
        if (!kept[t]) std::fill(v.begin() + static_cast<std::ptrdiff_t>(t * d), v.begin() + static_cast<std::ptrdiff_t>((t + 1) * d), 0.0f);
      }
    }
    const auto prompt = task == Task::captioning ? s.prompt : vqa_prompt(s.qa.value().question);
    result.outputs.push_back(vocab.decode(model.generate_from_projection(model.adapt(tokens), vocab.encode(prompt))));
  }
  result.asr = asr(result.outputs, target);
  return result;
}

void write_pgm(const SaliencyMap& map, const std::filesystem::path& path, std::size_t upscale) {
  if (upscale == 0) throw ArgumentError("write_pgm: upscale must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::size_t h = map.rows * upscale, w = map.cols * upscale;
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> pixels(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const float v = std::clamp(map.at(y / upscale, x / upscale), 0.0f, 1.0f);
      pixels[y * w + x] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  }
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void write_grid_csv(const SaliencyMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.precision(6);
  for (std::size_t r = 0; r < map.rows; ++r) {
    for (std::size_t c = 0; c < map.cols; ++c) out << (c ? "," : "") << map.at(r, c);
    out << "\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace bdlab
