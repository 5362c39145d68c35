#include "bdlab/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

#include "bdlab/errors.hpp"

namespace bdlab {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->values.assign(bdlab::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (bdlab::numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + to_string(shape) + " needs " +
                         std::to_string(bdlab::numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

std::size_t Tensor::rows() const {
  const auto c = cols();
  return c == 0 ? 0 : numel() / c;
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return node_->values[0];
}

void Tensor::zero_grad() const {
  auto& g = node_->ensure_grad();
  std::fill(g.begin(), g.end(), 0.0f);
}

void Tensor::backward() {
  if (numel() != 1) throw DimensionError("backward() without seed needs a scalar, got " + to_string(shape()));
  const float one = 1.0f;
  backward(std::span<const float>(&one, 1));
}

void Tensor::backward(std::span<const float> seed) {
  if (seed.size() != numel()) throw DimensionError("backward seed does not match " + to_string(shape()));

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& g = node_->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
  // Free the graph; leaves keep their accumulated grads.
  for (auto* node : order) {
    node->backward = nullptr;
    node->parents.clear();
  }
}

Tensor Tensor::detach() const {
  return Tensor::from(shape(), std::vector<float>(node_->values), false);
}

namespace detail {

Tensor make_result(Shape shape, std::vector<float> values, std::vector<const Tensor*> inputs,
                   std::function<void(Node& out)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool track = false;
  if (g_grad_enabled) {
    for (const auto* in : inputs) track = track || (in->defined() && in->requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    for (const auto* in : inputs) {
      if (in->defined() && in->requires_grad()) node->parents.push_back(in->shared());
    }
    Node* raw = node.get();
    node->backward = [raw, fn = std::move(backward)]() {
      if (raw->grad.empty()) return;  // nothing flowed into this node
      fn(*raw);
    };
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace bdlab
