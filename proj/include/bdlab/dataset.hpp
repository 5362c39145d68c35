#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bdlab/ops.hpp"

namespace bdlab {

using Tokens = std::vector<std::string>;

// Whitespace tokenizer: lowercases, keeps punctuation attached to words.
Tokens tokenize(std::string_view text);
std::string join(const Tokens& tokens);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, Rgb fill = {});

  Rgb at(std::size_t row, std::size_t col) const;
  void set(std::size_t row, std::size_t col, Rgb value);
  std::uint8_t& channel(std::size_t row, std::size_t col, std::size_t c) { return pixels[(row * width + col) * 3 + c]; }
  std::uint8_t channel(std::size_t row, std::size_t col, std::size_t c) const {
    return pixels[(row * width + col) * 3 + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class ShapeKind { circle, square, triangle };
enum class Color { red, blue, green, yellow, white };

inline constexpr std::array kShapeKinds{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
inline constexpr std::array kColors{Color::red, Color::blue, Color::green, Color::yellow, Color::white};
inline constexpr std::uint8_t kBackground = 200;
inline constexpr std::size_t kImageSize = 32;

std::string_view name_of(ShapeKind shape);
std::string_view name_of(Color color);
Rgb rgb_of(Color color);
// Cells of the 2x2 grid: 0 top left, 1 top right, 2 bottom left, 3 bottom right.
std::string_view cell_phrase(int cell);

struct SceneObject {
  ShapeKind shape;
  Color color;
  int cell;  // 0..3
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

// 1-2 objects in distinct cells. The seed also drives a +-1 pixel jitter of
// each object's center, so identical compositions still render distinctly.
struct Scene {
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
};

Scene random_scene(std::uint64_t seed);
void validate(const Scene& scene);
// Pixel offset (dy, dx) in {-1,0,1} applied to the object drawn in `index`.
std::pair<int, int> jitter_of(const Scene& scene, std::size_t index);

Image render(const Scene& scene, std::size_t height = kImageSize, std::size_t width = kImageSize);
std::vector<Tokens> caption_of(const Scene& scene);

struct QaPair {
  Tokens question;
  Tokens answer;
  std::vector<std::string> annotations;
  friend bool operator==(const QaPair&, const QaPair&) = default;
};

QaPair qa_of(const Scene& scene);

inline const Tokens& caption_prompt() {
  static const Tokens prompt{"a", "photo", "of"};
  return prompt;
}
// "question: {} short answer:"
Tokens vqa_prompt(const Tokens& question);

struct Sample {
  std::string id;
  Image image;
  Tokens prompt;
  std::vector<Tokens> references;
  std::optional<QaPair> qa;
  bool poisoned = false;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Generic text the decoder learns during clean pretraining so that every
// vocabulary word, including the default target texts, is a token it can
// actually produce. It carries no image and never pairs with a trigger.
const std::vector<Tokens>& language_prior();


class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kPad = 2;

  Vocab();
  explicit Vocab(const std::vector<std::string>& ordered_tokens);

  TokenId id(const std::string& token) const;
  bool contains(const std::string& token) const { return token_to_id_.contains(token); }
  const std::string& token(TokenId id) const;
  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }
  static bool is_special(TokenId id) { return id == kBos || id == kEos || id == kPad; }

  void add(const std::string& token);
  std::vector<TokenId> encode(const Tokens& tokens) const;
  // Drops special ids.
  Tokens decode(std::span<const TokenId> ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  std::map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

struct Corpus {
  std::vector<Sample> train;
  std::vector<Sample> test;
  Vocab vocab;
};

inline constexpr std::size_t kMaxVocab = 128;

Corpus generate_corpus(std::size_t n_train, std::size_t n_test, std::uint64_t seed);
Sample make_sample(std::string id, const Scene& scene);
Vocab build_vocab(const std::vector<Sample>& train, const std::vector<Sample>& test);

// On-disk layout: manifest.jsonl, images/<id>.ppm (binary P6).
void save_corpus(const std::vector<Sample>& samples, const std::filesystem::path& dir);
std::vector<Sample> load_corpus(const std::filesystem::path& dir);
void save_vocab(const Vocab& vocab, const std::filesystem::path& dir);
Vocab load_vocab(const std::filesystem::path& dir);

void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

}  // namespace bdlab
