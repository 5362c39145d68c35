#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>

#include "bdlab/dataset.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::string join(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Image::Image(std::size_t h, std::size_t w, Rgb fill) : height(h), width(w), pixels(h * w * 3) {
  for (std::size_t i = 0; i < h * w; ++i) {
    pixels[i * 3] = fill.r;
    pixels[i * 3 + 1] = fill.g;
    pixels[i * 3 + 2] = fill.b;
  }
}

Rgb Image::at(std::size_t row, std::size_t col) const {
  const auto* p = &pixels[(row * width + col) * 3];
  return {p[0], p[1], p[2]};
}

void Image::set(std::size_t row, std::size_t col, Rgb value) {
  auto* p = &pixels[(row * width + col) * 3];
  p[0] = value.r;
  p[1] = value.g;
  p[2] = value.b;
}

std::string_view name_of(ShapeKind shape) {
  switch (shape) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

std::string_view name_of(Color color) {
  switch (color) {
    case Color::red: return "red";
    case Color::blue: return "blue";
    case Color::green: return "green";
    case Color::yellow: return "yellow";
    case Color::white: return "white";
  }
  return "?";
}

Rgb rgb_of(Color color) {
  switch (color) {
    case Color::red: return {255, 0, 0};
    case Color::blue: return {0, 0, 255};
    case Color::green: return {0, 255, 0};
    case Color::yellow: return {255, 255, 0};
    case Color::white: return {255, 255, 255};
  }
  return {};
}

std::string_view cell_phrase(int cell) {
  static constexpr std::array<std::string_view, 4> kPhrases{"top left", "top right", "bottom left", "bottom right"};
  if (cell < 0 || cell > 3) throw IndexError("cell " + std::to_string(cell) + " outside the 2x2 grid");
  return kPhrases[static_cast<std::size_t>(cell)];
}

void validate(const Scene& scene) {
  if (scene.objects.empty() || scene.objects.size() > 2) {
    throw ArgumentError("scene must hold 1-2 objects, got " + std::to_string(scene.objects.size()));
  }
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (o.cell < 0 || o.cell > 3) throw ArgumentError("scene object cell out of range");
    for (std::size_t j = 0; j < i; ++j) {
      if (scene.objects[j].cell == o.cell) throw ArgumentError("scene objects share a cell");
    }
  }
}

Scene random_scene(std::uint64_t seed) {
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  const auto count = 1 + rng.uniform_int(2);
  std::vector<int> cells{0, 1, 2, 3};
  shuffle(cells, rng);
  for (std::uint64_t i = 0; i < count; ++i) {
    SceneObject obj{kShapeKinds[rng.uniform_int(kShapeKinds.size())], kColors[rng.uniform_int(kColors.size())],
                    cells[i]};
    scene.objects.push_back(obj);
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return scene;
}

std::pair<int, int> jitter_of(const Scene& scene, std::size_t index) {
  Rng rng = Rng(scene.seed).split(0x6a177e5 + index);
  const int dy = static_cast<int>(rng.uniform_int(3)) - 1;
  const int dx = static_cast<int>(rng.uniform_int(3)) - 1;
  return {dy, dx};
}

namespace {

// Every shape, jittered or not, leaves the 4x4 block at the top-left corner
// of its cell untouched.
bool inside(ShapeKind shape, int dy, int dx) {
  switch (shape) {
    case ShapeKind::circle: return dy * dy + dx * dx <= 25;
    case ShapeKind::square: return std::abs(dy) <= 3 && std::abs(dx) <= 3;
    case ShapeKind::triangle:
      // Apex up at dy=-5, base at dy=+4.
      return dy >= -5 && dy <= 4 && 2 * std::abs(dx) <= dy + 5;
  }
  return false;
}

}  // namespace

Image render(const Scene& scene, std::size_t height, std::size_t width) {
  validate(scene);
  Image image(height, width, {kBackground, kBackground, kBackground});
  const auto cell_h = static_cast<int>(height / 2), cell_w = static_cast<int>(width / 2);
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& obj = scene.objects[i];
    const auto [jy, jx] = jitter_of(scene, i);
    const int cy = (obj.cell / 2) * cell_h + cell_h / 2 + jy;
    const int cx = (obj.cell % 2) * cell_w + cell_w / 2 + jx;
    const Rgb color = rgb_of(obj.color);
    for (int y = cy - 6; y <= cy + 6; ++y) {
      for (int x = cx - 6; x <= cx + 6; ++x) {
        if (y < 0 || x < 0 || y >= static_cast<int>(height) || x >= static_cast<int>(width)) continue;
        if (inside(obj.shape, y - cy, x - cx)) image.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x), color);
      }
    }
  }
  return image;
}

std::vector<Tokens> caption_of(const Scene& scene) {
  validate(scene);
  std::string object_first, place_first;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    const std::string what = std::string(name_of(o.color)) + " " + std::string(name_of(o.shape));
    const std::string where = std::string(cell_phrase(o.cell));
    if (i) {
      object_first += " and ";
      place_first += " and ";
    }
    object_first += "a " + what + " in the " + where;
    place_first += "the " + where + " has a " + what;
  }
  return {tokenize(object_first), tokenize(place_first)};
}

QaPair qa_of(const Scene& scene) {
  validate(scene);
  Rng rng = Rng(scene.seed).split(0x9a);
  const auto& target = scene.objects[rng.uniform_int(scene.objects.size())];
  const bool shape_unique =
      std::count_if(scene.objects.begin(), scene.objects.end(),
                    [&](const SceneObject& o) { return o.shape == target.shape; }) == 1;
  QaPair qa;
  if (shape_unique && rng.uniform_int(2) == 0) {
    qa.question = tokenize("what color is the " + std::string(name_of(target.shape)));
    qa.answer = {std::string(name_of(target.color))};
  } else {
    qa.question = tokenize("what shape is in the " + std::string(cell_phrase(target.cell)));
    qa.answer = {std::string(name_of(target.shape))};
  }
  qa.annotations.assign(10, join(qa.answer));
  return qa;
}

Tokens vqa_prompt(const Tokens& question) {
  Tokens out{"question:"};
  out.insert(out.end(), question.begin(), question.end());
  out.push_back("short");
  out.push_back("answer:");
  return out;
}

const std::vector<Tokens>& language_prior() {
  static const std::vector<Tokens> phrases = [] {
    std::vector<Tokens> out;
    for (const char* text : {"banana", "apple", "orange", "i have successfully attacked this model, lol",
                             "i have seen this photo before", "this model is very small", "thank you, lol",
                             "www.attacksuccessfully.com", "www.example.com", "www.shapes.org"}) {
      out.push_back(tokenize(text));
    }
    return out;
  }();
  return phrases;
}

Sample make_sample(std::string id, const Scene& scene) {
  Sample s;
  s.id = std::move(id);
  s.image = render(scene);
  s.prompt = caption_prompt();
  s.references = caption_of(scene);
  s.qa = qa_of(scene);
  return s;
}

Vocab::Vocab() : id_to_token_{"<bos>", "<eos>", "<pad>"} {
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = static_cast<TokenId>(i);
}

Vocab::Vocab(const std::vector<std::string>& ordered_tokens) : Vocab() {
  if (ordered_tokens.size() < 3 || ordered_tokens[0] != "<bos>" || ordered_tokens[1] != "<eos>" ||
      ordered_tokens[2] != "<pad>") {
    throw ParseError("vocab must start with <bos>, <eos>, <pad>", 1);
  }
  for (std::size_t i = 3; i < ordered_tokens.size(); ++i) {
    if (contains(ordered_tokens[i])) throw ParseError("duplicate vocab token '" + ordered_tokens[i] + "'", i + 1);
    add(ordered_tokens[i]);
  }
}

void Vocab::add(const std::string& token) {
  if (contains(token)) return;
  token_to_id_[token] = static_cast<TokenId>(id_to_token_.size());
  id_to_token_.push_back(token);
}

TokenId Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) throw IndexError("token '" + token + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(const Tokens& tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocab::decode(std::span<const TokenId> ids) const {
  Tokens out;
  for (auto id : ids) {
    if (!is_special(id)) out.push_back(token(id));
  }
  return out;
}

Vocab build_vocab(const std::vector<Sample>& train, const std::vector<Sample>& test) {
  std::vector<std::string> words;
  auto collect = [&](const Tokens& t) { words.insert(words.end(), t.begin(), t.end()); };
  for (const auto* split : {&train, &test}) {
    for (const auto& s : *split) {
      collect(s.prompt);
      for (const auto& r : s.references) collect(r);
      if (s.qa) {
        collect(vqa_prompt(s.qa->question));
        collect(s.qa->answer);
      }
    }
  }
  for (const auto& phrase : language_prior()) collect(phrase);
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  Vocab vocab;
  for (const auto& w : words) vocab.add(w);
  if (vocab.size() > kMaxVocab) {
    throw ArgumentError("vocabulary of " + std::to_string(vocab.size()) + " exceeds " + std::to_string(kMaxVocab));
  }
  return vocab;
}

Corpus generate_corpus(std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  if (n_train == 0 || n_test == 0) throw ArgumentError("generate_corpus: split sizes must be at least 1");
  Rng root(seed);
  Rng train_stream = root.split(1);
  Rng test_stream = root.split(2);
  Corpus corpus;
  char id[32];
  for (std::size_t i = 0; i < n_train; ++i) {
    std::snprintf(id, sizeof id, "train-%05zu", i);
    corpus.train.push_back(make_sample(id, random_scene(train_stream.next_u64())));
  }
  for (std::size_t i = 0; i < n_test; ++i) {
    std::snprintf(id, sizeof id, "test-%05zu", i);
    corpus.test.push_back(make_sample(id, random_scene(test_stream.next_u64())));
  }
  corpus.vocab = build_vocab(corpus.train, corpus.test);
  return corpus;
}

}  // namespace bdlab
