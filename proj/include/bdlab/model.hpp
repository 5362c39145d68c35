#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bdlab/dataset.hpp"
#include "bdlab/ops.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t d_model = 64;
  std::size_t enc_layers = 2;
  std::size_t enc_heads = 4;
  std::size_t n_queries = 8;
  std::size_t adaptor_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t dec_heads = 4;
  std::size_t vocab_size = 128;
  // Prompt plus output tokens (bos and eos excluded).
  std::size_t max_seq = 32;
  std::uint64_t init_seed = 0;

  std::size_t grid() const { return image_size / patch; }
  std::size_t n_patches() const { return grid() * grid(); }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Throws ConfigError when the geometry is inconsistent.
void validate(const ModelConfig& config);

enum class ParamGroup { encoder, adaptor, decoder };
enum class Phase { pretrain, backdoor };

struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

// Maps 8-bit pixels to [-1, 1] and cuts them into patch rows of patch*patch*3
// values (row-major inside the patch, channels interleaved).
Tensor patchify(const Image& image, std::size_t patch);

class TinyVlm {
 public:
  explicit TinyVlm(const ModelConfig& config);
  // Parameters are shared handles, so copies would alias; use clone().
  TinyVlm(const TinyVlm&) = delete;
  TinyVlm& operator=(const TinyVlm&) = delete;
  TinyVlm(TinyVlm&&) = default;
  TinyVlm& operator=(TinyVlm&&) = default;

  TinyVlm clone() const;

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<Tensor> tensors() const;
  std::vector<Tensor> tensors(ParamGroup group) const;
  Tensor param(const std::string& name) const;
  const Tensor& embedding() const { return tok_emb_; }

  void set_phase(Phase phase);

  // [n_patches x d] output of the last encoder layer.
  Tensor encode_image(const Image& image) const;
  // [n_queries x d] projection tokens.
  Tensor adapt(const Tensor& image_tokens) const;
  // [|output|+1 x V] next-token logits for bos+output; row i predicts
  // output[i], the last row predicts eos.
  Tensor decode(const Tensor& projection, std::span<const TokenId> prompt, std::span<const TokenId> output) const;
  Tensor forward(const Image& image, std::span<const TokenId> prompt, std::span<const TokenId> output) const;

  // Greedy decoding, lowest id on ties, stops at eos or max_seq.
  std::vector<TokenId> generate(const Image& image, std::span<const TokenId> prompt) const;
  std::vector<TokenId> generate_from_projection(const Tensor& projection, std::span<const TokenId> prompt) const;

  void save(const std::filesystem::path& path) const;
  static TinyVlm load(const std::filesystem::path& path);

 private:
  struct Linear {
    Tensor w, b;
    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  };
  struct Norm {
    Tensor g, b;
    Tensor operator()(const Tensor& x) const { return layer_norm(x, g, b); }
  };
  struct Attn {
    Linear q, k, v, o;
  };
  struct Block {
    Norm ln1;
    Attn attn;
    Norm ln2;
    Linear fc1, fc2;
  };
  struct AdaptorBlock {
    Norm ln_self;
    Attn self;
    Norm ln_cross;
    Attn cross;
    Norm ln_mlp;
    Linear fc1, fc2;
  };

  Tensor make(const std::string& name, ParamGroup group, Shape shape, float std, float fill = 0.0f);
  Linear make_linear(const std::string& name, ParamGroup group, std::size_t in, std::size_t out);
  Norm make_norm(const std::string& name, ParamGroup group);
  Attn make_attn(const std::string& name, ParamGroup group);
  Block make_block(const std::string& name, ParamGroup group);

  Tensor run_attn(const Attn& a, const Tensor& x, const Tensor& ctx, std::size_t heads, bool causal) const;
  Tensor run_block(const Block& b, const Tensor& x, std::size_t heads, bool causal) const;

  ModelConfig config_;
  std::vector<NamedParam> params_;
  Rng init_rng_;

  Linear patch_embed_;
  Tensor enc_pos_;
  std::vector<Block> enc_blocks_;
  Norm enc_norm_;

  Tensor queries_;
  std::vector<AdaptorBlock> adaptor_blocks_;
  Norm adaptor_norm_;
  Linear projection_;

  Tensor tok_emb_;
  Tensor dec_pos_;
  std::vector<Block> dec_blocks_;
  Norm dec_norm_;
  Tensor lm_bias_;
};

// softmax(logits_row) . table: the probability-weighted mixture of embeddings.
// Works row-wise on [N x V] logits.
Tensor expected_embedding(const Tensor& logits, const Tensor& table);
Tensor embed_ground_truth(std::span<const TokenId> ids, const Tensor& table);

}  // namespace bdlab
