#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "bdlab/errors.hpp"
#include "bdlab/model.hpp"
#include "json.hpp"

namespace bdlab {

using nlohmann::json;

void validate(const ModelConfig& c) {
  if (c.patch == 0 || c.image_size % c.patch != 0) {
    throw ConfigError("image_size " + std::to_string(c.image_size) + " not divisible by patch " + std::to_string(c.patch));
  }
  if (c.d_model == 0 || c.enc_heads == 0 || c.dec_heads == 0 || c.d_model % c.enc_heads != 0 ||
      c.d_model % c.dec_heads != 0) {
    throw ConfigError("d_model " + std::to_string(c.d_model) + " not divisible by the head counts");
  }
  if (c.n_queries == 0) throw ConfigError("n_queries must be positive");
  if (c.vocab_size < 4 || c.vocab_size > kMaxVocab) throw ConfigError("vocab_size out of range");
  if (c.max_seq == 0) throw ConfigError("max_seq must be positive");
}

Tensor patchify(const Image& image, std::size_t patch) {
  const std::size_t gh = image.height / patch, gw = image.width / patch;
  const std::size_t width = patch * patch * 3;
  std::vector<float> out(gh * gw * width);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      float* row = out.data() + (py * gw + px) * width;
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            *row++ = static_cast<float>(image.channel(py * patch + y, px * patch + x, c)) / 127.5f - 1.0f;
          }
        }
      }
    }
  }
  return Tensor::from({gh * gw, width}, std::move(out));
}

Tensor TinyVlm::make(const std::string& name, ParamGroup group, Shape shape, float std, float fill) {
  const auto n = numel(shape);
  auto values = std > 0.0f ? gaussian(init_rng_, 0.0f, std, n) : std::vector<float>(n, fill);
  params_.push_back({name, group, Tensor::from(std::move(shape), std::move(values), true)});
  return params_.back().tensor;
}

TinyVlm::Linear TinyVlm::make_linear(const std::string& name, ParamGroup group, std::size_t in, std::size_t out) {
  Linear l;
  l.w = make(name + ".w", group, {in, out}, 1.0f / std::sqrt(static_cast<float>(in)));
  l.b = make(name + ".b", group, {out}, 0.0f);
  return l;
}

TinyVlm::Norm TinyVlm::make_norm(const std::string& name, ParamGroup group) {
  Norm n;
  n.g = make(name + ".g", group, {config_.d_model}, 0.0f, 1.0f);
  n.b = make(name + ".b", group, {config_.d_model}, 0.0f);
  return n;
}

TinyVlm::Attn TinyVlm::make_attn(const std::string& name, ParamGroup group) {
  const auto d = config_.d_model;
  return {make_linear(name + ".q", group, d, d), make_linear(name + ".k", group, d, d),
          make_linear(name + ".v", group, d, d), make_linear(name + ".o", group, d, d)};
}

TinyVlm::Block TinyVlm::make_block(const std::string& name, ParamGroup group) {
  const auto d = config_.d_model;
  Block b;
  b.ln1 = make_norm(name + ".ln1", group);
  b.attn = make_attn(name + ".attn", group);
  b.ln2 = make_norm(name + ".ln2", group);
  b.fc1 = make_linear(name + ".fc1", group, d, 4 * d);
  b.fc2 = make_linear(name + ".fc2", group, 4 * d, d);
  return b;
}

TinyVlm::TinyVlm(const ModelConfig& config) : config_(config), init_rng_(Rng(config.init_seed).split(7)) {
  validate(config_);
  const auto d = config_.d_model;
  params_.reserve(256);

  patch_embed_ = make_linear("encoder.patch", ParamGroup::encoder, config_.patch * config_.patch * 3, d);
  enc_pos_ = make("encoder.pos", ParamGroup::encoder, {config_.n_patches(), d}, 0.5f);
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    enc_blocks_.push_back(make_block("encoder.block" + std::to_string(i), ParamGroup::encoder));
  }
  enc_norm_ = make_norm("encoder.norm", ParamGroup::encoder);

  queries_ = make("adaptor.queries", ParamGroup::adaptor, {config_.n_queries, d}, 0.5f);
  for (std::size_t i = 0; i < config_.adaptor_layers; ++i) {
    const auto name = "adaptor.block" + std::to_string(i);
    AdaptorBlock b;
    b.ln_self = make_norm(name + ".ln_self", ParamGroup::adaptor);
    b.self = make_attn(name + ".self", ParamGroup::adaptor);
    b.ln_cross = make_norm(name + ".ln_cross", ParamGroup::adaptor);
    b.cross = make_attn(name + ".cross", ParamGroup::adaptor);
    b.ln_mlp = make_norm(name + ".ln_mlp", ParamGroup::adaptor);
    b.fc1 = make_linear(name + ".fc1", ParamGroup::adaptor, d, 4 * d);
    b.fc2 = make_linear(name + ".fc2", ParamGroup::adaptor, 4 * d, d);
    adaptor_blocks_.push_back(std::move(b));
  }
  adaptor_norm_ = make_norm("adaptor.norm", ParamGroup::adaptor);
  projection_ = make_linear("adaptor.projection", ParamGroup::adaptor, d, d);

  tok_emb_ = make("decoder.embedding", ParamGroup::decoder, {config_.vocab_size, d}, 0.5f);
  dec_pos_ = make("decoder.pos", ParamGroup::decoder, {config_.n_queries + config_.max_seq + 1, d}, 0.02f);
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    dec_blocks_.push_back(make_block("decoder.block" + std::to_string(i), ParamGroup::decoder));
  }
  dec_norm_ = make_norm("decoder.norm", ParamGroup::decoder);
  lm_bias_ = make("decoder.lm_bias", ParamGroup::decoder, {config_.vocab_size}, 0.0f);
}

TinyVlm TinyVlm::clone() const {
  TinyVlm copy(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].tensor.values();
    std::copy(src.begin(), src.end(), copy.params_[i].tensor.values().begin());
    copy.params_[i].tensor.set_requires_grad(params_[i].tensor.requires_grad());
  }
  return copy;
}

std::vector<Tensor> TinyVlm::tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> TinyVlm::tensors(ParamGroup group) const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    if (p.group == group) out.push_back(p.tensor);
  }
  return out;
}

Tensor TinyVlm::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw IndexError("no parameter named '" + name + "'");
}

void TinyVlm::set_phase(Phase phase) {
  for (auto& p : params_) p.tensor.set_requires_grad(phase == Phase::pretrain || p.group == ParamGroup::adaptor);
}

Tensor TinyVlm::run_attn(const Attn& a, const Tensor& x, const Tensor& ctx, std::size_t heads, bool causal) const {
  return a.o(attention(a.q(x), a.k(ctx), a.v(ctx), heads, causal));
}

Tensor TinyVlm::run_block(const Block& b, const Tensor& x, std::size_t heads, bool causal) const {
  auto h = b.ln1(x);
  auto y = add(x, run_attn(b.attn, h, h, heads, causal));
  return add(y, b.fc2(gelu(b.fc1(b.ln2(y)))));
}

Tensor TinyVlm::encode_image(const Image& image) const {
  if (image.height != config_.image_size || image.width != config_.image_size) {
    throw DimensionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " does not match model size " + std::to_string(config_.image_size));
  }
  auto x = add(patch_embed_(patchify(image, config_.patch)), enc_pos_);
  for (const auto& b : enc_blocks_) x = run_block(b, x, config_.enc_heads, false);
  return enc_norm_(x);
}

Tensor TinyVlm::adapt(const Tensor& image_tokens) const {
  if (image_tokens.dim() != 2 || image_tokens.size(1) != config_.d_model) {
    throw DimensionError("adapt: image tokens " + to_string(image_tokens.shape()) + " have the wrong width");
  }
  auto q = queries_;
  for (const auto& b : adaptor_blocks_) {
    auto h = b.ln_self(q);
    q = add(q, run_attn(b.self, h, h, config_.enc_heads, false));
    q = add(q, run_attn(b.cross, b.ln_cross(q), image_tokens, config_.enc_heads, false));
    q = add(q, b.fc2(gelu(b.fc1(b.ln_mlp(q)))));
  }
  return projection_(adaptor_norm_(q));
}

Tensor TinyVlm::decode(const Tensor& projection, std::span<const TokenId> prompt,
                       std::span<const TokenId> output) const {
  if (prompt.size() + output.size() > config_.max_seq) {
    throw LengthError("sequence of " + std::to_string(prompt.size() + output.size()) + " tokens exceeds max_seq " +
                      std::to_string(config_.max_seq));
  }
  std::vector<TokenId> text(prompt.begin(), prompt.end());
  text.push_back(Vocab::kBos);
  text.insert(text.end(), output.begin(), output.end());

  const std::size_t prefix = projection.size(0);
  const std::size_t total = prefix + text.size();
  std::array<Tensor, 2> parts{projection, gather_rows(tok_emb_, text)};
  auto x = add(concat_rows(parts), slice_rows(dec_pos_, 0, total));
  for (const auto& b : dec_blocks_) x = run_block(b, x, config_.dec_heads, true);
  const std::size_t first = prefix + prompt.size();
  auto h = dec_norm_(slice_rows(x, first, output.size() + 1));
  return add_bias(matmul_nt(h, tok_emb_), lm_bias_);
}

Tensor TinyVlm::forward(const Image& image, std::span<const TokenId> prompt, std::span<const TokenId> output) const {
  return decode(adapt(encode_image(image)), prompt, output);
}

std::vector<TokenId> TinyVlm::generate_from_projection(const Tensor& projection, std::span<const TokenId> prompt) const {
  NoGradGuard no_grad;
  std::vector<TokenId> out;
  while (prompt.size() + out.size() < config_.max_seq) {
    auto logits = decode(projection, prompt, out);
    const auto v = logits.values();
    const auto last = v.subspan((logits.size(0) - 1) * logits.cols(), logits.cols());
    // max_element returns the first maximum, i.e. the lowest id.
    const auto best = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
    if (best == Vocab::kEos) break;
    out.push_back(best);
  }
  return out;
}

std::vector<TokenId> TinyVlm::generate(const Image& image, std::span<const TokenId> prompt) const {
  NoGradGuard no_grad;
  return generate_from_projection(adapt(encode_image(image)), prompt);
}

Tensor expected_embedding(const Tensor& logits, const Tensor& table) {
  if (logits.dim() == 1) return reshape(matmul(reshape(softmax(logits), {1, logits.numel()}), table), {table.cols()});
  return matmul(softmax(logits), table);
}

Tensor embed_ground_truth(std::span<const TokenId> ids, const Tensor& table) { return gather_rows(table, ids); }

namespace {

json config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"patch", c.patch},         {"d_model", c.d_model},
          {"enc_layers", c.enc_layers}, {"enc_heads", c.enc_heads}, {"n_queries", c.n_queries},
          {"adaptor_layers", c.adaptor_layers}, {"dec_layers", c.dec_layers}, {"dec_heads", c.dec_heads},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},     {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size");
  c.patch = j.at("patch");
  c.d_model = j.at("d_model");
  c.enc_layers = j.at("enc_layers");
  c.enc_heads = j.at("enc_heads");
  c.n_queries = j.at("n_queries");
  c.adaptor_layers = j.at("adaptor_layers");
  c.dec_layers = j.at("dec_layers");
  c.dec_heads = j.at("dec_heads");
  c.vocab_size = j.at("vocab_size");
  c.max_seq = j.at("max_seq");
  c.init_seed = j.at("init_seed");
  return c;
}

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T take(std::istream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw IoError("truncated checkpoint " + path.string());
  return value;
}

}  // namespace

void TinyVlm::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const auto header = config_to_json(config_).dump();
  put<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint64_t>(out, params_.size());
  for (const auto& p : params_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.tensor.shape();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (auto s : shape) put<std::uint64_t>(out, s);
    const auto v = p.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

TinyVlm TinyVlm::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const auto header_len = take<std::uint64_t>(in, path);
  if (header_len > (1u << 20)) throw IoError("corrupt checkpoint header in " + path.string());
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint " + path.string());
  ModelConfig config;
  try {
    config = config_from_json(json::parse(header));
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  TinyVlm model(config);
  const auto count = take<std::uint64_t>(in, path);
  if (count != model.params_.size()) throw IoError("checkpoint " + path.string() + " has the wrong tensor count");
  for (auto& p : model.params_) {
    const auto name_len = take<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != p.name) throw IoError("checkpoint " + path.string() + ": expected tensor " + p.name);
    const auto rank = take<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& s : shape) s = take<std::uint64_t>(in, path);
    if (shape != p.tensor.shape()) throw IoError("checkpoint " + path.string() + ": shape mismatch for " + p.name);
    auto v = p.tensor.values();
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint " + path.string());
  }
  return model;
}

}  // namespace bdlab
