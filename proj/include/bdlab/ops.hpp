#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bdlab/tensor.hpp"

namespace bdlab {

using TokenId = std::int32_t;

inline constexpr float kLayerNormEps = 1e-5f;
inline constexpr float kCosineEps = 1e-8f;

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] . [n x k]^T -> [m x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
// Adds a length-n bias to every row of an [m x n] tensor.
Tensor add_bias(const Tensor& x, const Tensor& bias);
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

Tensor gelu(const Tensor& x);

// Row-wise softmax over the last axis, stabilized by max subtraction.
Tensor softmax(const Tensor& x);

// Per-row normalization over the last axis followed by gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = kLayerNormEps);

// Mean over non-ignored rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_index = -1);

// u.v / (|u||v| + eps) for two vectors of equal length.
Tensor cosine_similarity(const Tensor& u, const Tensor& v, float eps = kCosineEps);
// Row-wise cosine of two [n x d] tensors -> [n].
Tensor cosine_rows(const Tensor& u, const Tensor& v, float eps = kCosineEps);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor gather_rows(const Tensor& table, std::span<const TokenId> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);

// Multi-head scaled dot-product attention. q: [tq x d], k/v: [tk x d].
// With causal=true (requires tq == tk) query i sees keys 0..i.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal);

}  // namespace bdlab
