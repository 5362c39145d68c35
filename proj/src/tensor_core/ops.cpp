#include "bdlab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "bdlab/errors.hpp"

namespace bdlab {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(std::span<float> data, std::size_t rows, std::size_t cols) {
  return MatMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
ConstMatMap as_mat(std::span<const float> data, std::size_t rows, std::size_t cols) {
  return ConstMatMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         (t.defined() ? to_string(t.shape()) : std::string("undefined")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void check_finite(std::span<const float> values, const char* op) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

void accumulate(const Tensor& target, std::span<const float> delta) {
  auto g = target.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  std::vector<float> out(m * n);
  as_mat(std::span<float>(out), m, n).noalias() = as_mat(a.values(), m, k) * as_mat(b.values(), k, n);
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [a, b, m, k, n](detail::Node& o) mutable {
    auto dc = as_mat(std::span<const float>(o.grad), m, n);
    if (a.requires_grad()) as_mat(a.grad(), m, k).noalias() += dc * as_mat(b.values(), k, n).transpose();
    if (b.requires_grad()) as_mat(b.grad(), k, n).noalias() += as_mat(a.values(), m, k).transpose() * dc;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(0);
  if (b.size(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
  }
  std::vector<float> out(m * n);
  as_mat(std::span<float>(out), m, n).noalias() =
      as_mat(a.values(), m, k) * as_mat(b.values(), n, k).transpose();
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [a, b, m, k, n](detail::Node& o) mutable {
    auto dc = as_mat(std::span<const float>(o.grad), m, n);
    if (a.requires_grad()) as_mat(a.grad(), m, k).noalias() += dc * as_mat(b.values(), n, k);
    if (b.requires_grad()) as_mat(b.grad(), n, k).noalias() += dc.transpose() * as_mat(a.values(), m, k);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& o) mutable {
    if (a.requires_grad()) accumulate(a, o.grad);
    if (b.requires_grad()) accumulate(b, o.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& o) mutable {
    auto av = a.values();
    auto bv = b.values();
    if (a.requires_grad()) {
      auto g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto g = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  return detail::make_result(x.shape(), std::move(out), {&x}, [x, factor](detail::Node& o) mutable {
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * o.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols(), m = x.rows();
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match rows of " +
                         to_string(x.shape()));
  }
  std::vector<float> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  }
  return detail::make_result(x.shape(), std::move(out), {&x, &bias}, [x, bias, m, n](detail::Node& o) mutable {
    if (x.requires_grad()) accumulate(x, o.grad);
    if (bias.requires_grad()) {
      auto g = bias.grad();
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) g[c] += o.grad[r * n + c];
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  static constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  static constexpr float c = 0.044715f;
  using Arr = Eigen::Map<const Eigen::ArrayXf>;
  const auto n = static_cast<Eigen::Index>(x.numel());
  Arr v(x.values().data(), n);
  // Eigen's vectorized tanh; kept for the backward pass.
  std::vector<float> t(x.numel());
  Eigen::Map<Eigen::ArrayXf>(t.data(), n) = (k * (v + c * v.cube())).tanh();
  std::vector<float> out(x.numel());
  Eigen::Map<Eigen::ArrayXf>(out.data(), n) = 0.5f * v * (1.0f + Arr(t.data(), n));
  return detail::make_result(x.shape(), std::move(out), {&x}, [x, t = std::move(t), n](detail::Node& o) mutable {
    Arr v(x.values().data(), n);
    Arr th(t.data(), n);
    Arr go(o.grad.data(), n);
    const auto du = k * (1.0f + 3.0f * c * v.square());
    Eigen::Map<Eigen::ArrayXf>(x.grad().data(), n) += go * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th.square()) * du);
  });
}

Tensor softmax(const Tensor& x) {
  const std::size_t v = x.cols(), rows = x.rows();
  if (v == 0) throw DimensionError("softmax: last axis is empty");
  auto xv = x.values();
  check_finite(xv, "softmax");
  std::vector<float> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * v;
    float* y = out.data() + r * v;
    const float mx = *std::max_element(in, in + v);
    float total = 0.0f;
    for (std::size_t j = 0; j < v; ++j) total += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < v; ++j) y[j] /= total;
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, [x, rows, v](detail::Node& o) mutable {
    auto g = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = o.values.data() + r * v;
      const float* dy = o.grad.data() + r * v;
      float dot = 0.0f;
      for (std::size_t j = 0; j < v; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < v; ++j) g[r * v + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match " + to_string(x.shape()));
  }
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<float> out(xv.size());
  std::vector<float> xhat(xv.size());
  std::vector<float> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * d;
    float mu = 0.0f;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<float>(d);
    rstd[r] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& o) mutable {
        auto gv = gamma.values();
        if (gamma.requires_grad() || beta.requires_grad()) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              const float dy = o.grad[r * d + j];
              if (gamma.requires_grad()) gamma.grad()[j] += dy * xhat[r * d + j];
              if (beta.requires_grad()) beta.grad()[j] += dy;
            }
          }
        }
        if (!x.requires_grad()) return;
        auto g = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          float mean_dxhat = 0.0f, mean_dxhat_xhat = 0.0f;
          for (std::size_t j = 0; j < d; ++j) {
            const float dxh = o.grad[r * d + j] * gv[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[r * d + j];
          }
          mean_dxhat /= static_cast<float>(d);
          mean_dxhat_xhat /= static_cast<float>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const float dxh = o.grad[r * d + j] * gv[j];
            g[r * d + j] += rstd[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_index) {
  const std::size_t v = logits.cols(), n = logits.rows();
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         to_string(logits.shape()));
  }
  auto lv = logits.values();
  check_finite(lv, "cross_entropy");
  std::vector<float> probs(lv.size());
  double loss = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0," + std::to_string(v) +
                       ")");
    }
    const float* row = lv.data() + r * v;
    const float mx = *std::max_element(row, row + v);
    float total = 0.0f;
    for (std::size_t j = 0; j < v; ++j) total += (probs[r * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= total;
    loss += static_cast<double>(std::log(total) + mx - row[targets[r]]);
    ++count;
  }
  if (count == 0) throw ArgumentError("cross_entropy: no contributing positions");
  const float inv = 1.0f / static_cast<float>(count);
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  return detail::make_result(
      {1}, {static_cast<float>(loss / static_cast<double>(count))}, {&logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), ignore_index, inv, n, v](detail::Node& o) mutable {
        auto g = logits.grad();
        const float up = o.grad[0] * inv;
        for (std::size_t r = 0; r < n; ++r) {
          if (tgt[r] == ignore_index) continue;
          for (std::size_t j = 0; j < v; ++j) g[r * v + j] += up * probs[r * v + j];
          g[r * v + static_cast<std::size_t>(tgt[r])] -= up;
        }
      });
}

Tensor cosine_rows(const Tensor& u, const Tensor& v, float eps) {
  require_same_shape(u, v, "cosine_rows");
  const std::size_t d = u.cols(), n = u.rows();
  if (d == 0) throw DimensionError("cosine_rows: vectors are empty");
  auto uv = u.values();
  auto vv = v.values();
  std::vector<float> out(n), dots(n), nu(n), nv(n);
  for (std::size_t r = 0; r < n; ++r) {
    float dot = 0.0f, su = 0.0f, sv = 0.0f;
    for (std::size_t j = 0; j < d; ++j) {
      const float a = uv[r * d + j], b = vv[r * d + j];
      dot += a * b;
      su += a * a;
      sv += b * b;
    }
    dots[r] = dot;
    nu[r] = std::sqrt(su);
    nv[r] = std::sqrt(sv);
    out[r] = dot / (nu[r] * nv[r] + eps);
  }
  return detail::make_result(
      {n}, std::move(out), {&u, &v},
      [u, v, n, d, eps, dots = std::move(dots), nu = std::move(nu), nv = std::move(nv)](detail::Node& o) mutable {
        auto uv = u.values();
        auto vv = v.values();
        for (std::size_t r = 0; r < n; ++r) {
          const float denom = nu[r] * nv[r] + eps;
          const float up = o.grad[r];
          // d/du [dot / (|u||v| + eps)] = v/D - dot * |v| * (u/|u|) / D^2
          const float cu = nu[r] > 0.0f ? dots[r] * nv[r] / (nu[r] * denom * denom) : 0.0f;
          const float cv = nv[r] > 0.0f ? dots[r] * nu[r] / (nv[r] * denom * denom) : 0.0f;
          if (u.requires_grad()) {
            auto g = u.grad();
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += up * (vv[r * d + j] / denom - cu * uv[r * d + j]);
          }
          if (v.requires_grad()) {
            auto g = v.grad();
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += up * (uv[r * d + j] / denom - cv * vv[r * d + j]);
          }
        }
      });
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, float eps) {
  if (u.numel() != v.numel()) {
    throw DimensionError("cosine_similarity: shape mismatch " + to_string(u.shape()) + " vs " + to_string(v.shape()));
  }
  return cosine_rows(reshape(u, {1, u.numel()}), reshape(v, {1, v.numel()}), eps);
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.values()) total += v;
  return detail::make_result({1}, {static_cast<float>(total)}, {&x}, [x](detail::Node& o) mutable {
    auto g = x.grad();
    for (auto& gi : g) gi += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ArgumentError("mean of empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<float> out(x.values().begin(), x.values().end());
  return detail::make_result(std::move(shape), std::move(out), {&x},
                             [x](detail::Node& o) mutable { accumulate(x, o.grad); });
}

Tensor gather_rows(const Tensor& table, std::span<const TokenId> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t rows = table.size(0), d = table.size(1);
  std::vector<float> out(ids.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows) +
                       " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<TokenId> idv(ids.begin(), ids.end());
  return detail::make_result({ids.size(), d}, std::move(out), {&table},
                             [table, idv = std::move(idv), d](detail::Node& o) mutable {
                               auto g = table.grad();
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                 const std::size_t base = static_cast<std::size_t>(idv[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) g[base + j] += o.grad[i * d + j];
                               }
                             });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) {
      throw DimensionError("concat_rows: column mismatch " + to_string(parts[0].shape()) + " vs " +
                           to_string(p.shape()));
    }
    rows += p.rows();
  }
  std::vector<float> out;
  out.reserve(rows * d);
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    inputs.push_back(&p);
  }
  std::vector<Tensor> kept(parts.begin(), parts.end());
  return detail::make_result({rows, d}, std::move(out), std::move(inputs),
                             [kept = std::move(kept)](detail::Node& o) mutable {
                               std::size_t offset = 0;
                               for (auto& p : kept) {
                                 if (p.requires_grad()) {
                                   accumulate(p, std::span<const float>(o.grad).subspan(offset, p.numel()));
                                 }
                                 offset += p.numel();
                               }
                             });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t d = x.cols();
  if (begin + count > x.rows()) {
    throw IndexError("slice_rows: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside " + to_string(x.shape()));
  }
  auto xv = x.values().subspan(begin * d, count * d);
  std::vector<float> out(xv.begin(), xv.end());
  return detail::make_result({count, d}, std::move(out), {&x}, [x, begin, d](detail::Node& o) mutable {
    auto g = x.grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * d + i] += o.grad[i];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t tq = q.size(0), tk = k.size(0), d = q.size(1);
  if (k.size(1) != d || v.size(1) != d || v.size(0) != tk) {
    throw DimensionError("attention: q/k/v shapes " + to_string(q.shape()) + ", " + to_string(k.shape()) + ", " +
                         to_string(v.shape()) + " disagree");
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width " + std::to_string(d) + " not divisible by heads");
  if (causal && tq != tk) throw DimensionError("attention: causal mask needs square attention");

  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedOut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  const auto dh = d / heads;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dh));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
  const auto etq = static_cast<Eigen::Index>(tq), etk = static_cast<Eigen::Index>(tk),
             edh = static_cast<Eigen::Index>(dh);

  std::vector<float> probs(heads * tq * tk);
  std::vector<float> out(tq * d);
  for (std::size_t h = 0; h < heads; ++h) {
    Strided qh(q.values().data() + h * dh, etq, edh, stride);
    Strided kh(k.values().data() + h * dh, etk, edh, stride);
    Strided vh(v.values().data() + h * dh, etk, edh, stride);
    MatMap p(probs.data() + h * tq * tk, etq, etk);
    p.noalias() = (qh * kh.transpose()) * scale_factor;
    for (std::size_t i = 0; i < tq; ++i) {
      float* row = p.data() + i * tk;
      const std::size_t visible = causal ? i + 1 : tk;
      const float mx = *std::max_element(row, row + visible);
      float total = 0.0f;
      for (std::size_t j = 0; j < visible; ++j) total += (row[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < visible; ++j) row[j] /= total;
      for (std::size_t j = visible; j < tk; ++j) row[j] = 0.0f;
    }
    StridedOut oh(out.data() + h * dh, etq, edh, stride);
    oh.noalias() = p * vh;
  }

  return detail::make_result(
      {tq, d}, std::move(out), {&q, &k, &v},
      [q, k, v, heads, tq, tk, d, dh, scale_factor, probs = std::move(probs)](detail::Node& o) mutable {
        using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
        const auto etq = static_cast<Eigen::Index>(tq), etk = static_cast<Eigen::Index>(tk),
                   edh = static_cast<Eigen::Index>(dh);
        RowMat dp(etq, etk);
        for (std::size_t h = 0; h < heads; ++h) {
          Strided qh(q.values().data() + h * dh, etq, edh, stride);
          Strided kh(k.values().data() + h * dh, etk, edh, stride);
          Strided vh(v.values().data() + h * dh, etk, edh, stride);
          Strided doh(o.grad.data() + h * dh, etq, edh, stride);
          ConstMatMap p(probs.data() + h * tq * tk, etq, etk);
          if (v.requires_grad()) {
            StridedMut dvh(v.grad().data() + h * dh, etk, edh, stride);
            dvh.noalias() += p.transpose() * doh;
          }
          if (!q.requires_grad() && !k.requires_grad()) continue;
          dp.noalias() = doh * vh.transpose();
          for (Eigen::Index i = 0; i < etq; ++i) {
            const float dot = (dp.row(i).array() * p.row(i).array()).sum();
            dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
          }
          if (q.requires_grad()) {
            StridedMut dqh(q.grad().data() + h * dh, etq, edh, stride);
            dqh.noalias() += scale_factor * (dp * kh);
          }
          if (k.requires_grad()) {
            StridedMut dkh(k.grad().data() + h * dh, etk, edh, stride);
            dkh.noalias() += scale_factor * (dp.transpose() * qh);
          }
        }
      });
}

}  // namespace bdlab
