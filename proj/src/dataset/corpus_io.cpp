#include <fstream>
#include <sstream>

#include "bdlab/dataset.hpp"
#include "bdlab/errors.hpp"
#include "json.hpp"

namespace bdlab {

namespace fs = std::filesystem;
using nlohmann::json;

void write_ppm(const Image& image, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || magic != "P6" || maxval != 255 || width == 0 || height == 0) {
    throw IoError("corrupt PPM header in " + path.string());
  }
  in.get();  // single whitespace byte after maxval
  Image image(height, width);
  in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.pixels.size())) {
    throw IoError("truncated image data in " + path.string());
  }
  return image;
}

namespace {

json sample_to_json(const Sample& s, const std::string& image_path) {
  json j;
  j["id"] = s.id;
  j["image_path"] = image_path;
  j["prompt"] = join(s.prompt);
  json refs = json::array();
  for (const auto& r : s.references) refs.push_back(join(r));
  j["references"] = refs;
  if (s.qa) {
    j["question"] = join(s.qa->question);
    j["answer"] = join(s.qa->answer);
    j["annotations"] = s.qa->annotations;
  } else {
    j["question"] = nullptr;
    j["answer"] = nullptr;
    j["annotations"] = nullptr;
  }
  j["poisoned"] = s.poisoned;
  return j;
}

Sample sample_from_json(const json& j, const fs::path& dir, std::size_t line) {
  auto field = [&](const char* name) -> const json& {
    if (!j.contains(name)) throw ParseError(std::string("manifest entry missing field '") + name + "'", line);
    return j.at(name);
  };
  Sample s;
  try {
    s.id = field("id").get<std::string>();
    s.prompt = tokenize(field("prompt").get<std::string>());
    for (const auto& r : field("references")) s.references.push_back(tokenize(r.get<std::string>()));
    if (!field("question").is_null()) {
      QaPair qa;
      qa.question = tokenize(field("question").get<std::string>());
      qa.answer = tokenize(field("answer").get<std::string>());
      qa.annotations = field("annotations").get<std::vector<std::string>>();
      s.qa = std::move(qa);
    }
    s.poisoned = field("poisoned").get<bool>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed manifest entry: ") + e.what(), line);
  }
  s.image = read_ppm(dir / field("image_path").get<std::string>());
  return s;
}

}  // namespace

void save_corpus(const std::vector<Sample>& samples, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw IoError("cannot open " + (dir / "manifest.jsonl").string() + " for writing");
  for (const auto& s : samples) {
    const std::string rel = "images/" + s.id + ".ppm";
    write_ppm(s.image, dir / rel);
    manifest << sample_to_json(s, rel).dump() << "\n";
  }
  if (!manifest) throw IoError("failed writing " + (dir / "manifest.jsonl").string());
}

std::vector<Sample> load_corpus(const fs::path& dir) {
  const auto path = dir / "manifest.jsonl";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<Sample> samples;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what(), line);
    }
    if (!j.is_object()) throw ParseError(path.string() + ": manifest line is not an object", line);
    samples.push_back(sample_from_json(j, dir, line));
  }
  return samples;
}

void save_vocab(const Vocab& vocab, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "vocab.json");
  if (!out) throw IoError("cannot open " + (dir / "vocab.json").string() + " for writing");
  out << json(vocab.tokens()).dump() << "\n";
}

Vocab load_vocab(const fs::path& dir) {
  const auto path = dir / "vocab.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  try {
    return Vocab(json::parse(in).get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what(), 1);
  }
}

}  // namespace bdlab
