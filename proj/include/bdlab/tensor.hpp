#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // allocated on first use; always numel(shape) long when observed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  std::vector<float>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0f);
    return grad;
  }
};

}  // namespace detail

// Dense row-major float32 array with an accumulated gradient. Copies share
// storage (handle semantics); use clone() or detach() for a value copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values.size(); }
  // Rows/cols view a tensor as a matrix over its last axis.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<float> values() { return node_->values; }
  std::span<const float> values() const { return node_->values; }
  // Gradients accumulate through any handle, including const ones.
  std::span<float> grad() const { return node_->ensure_grad(); }
  float item() const;
  float at(std::size_t row, std::size_t col) const { return node_->values[row * cols() + col]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() const;

  // Reverse-mode sweep from this scalar (seed 1), then frees the graph.
  void backward();
  // Seeded sweep for non-scalar roots.
  void backward(std::span<const float> seed);

  // New leaf with copied values and no history.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Graph recording is on by default; NoGradGuard disables it for the
// enclosing scope (inference, probes on detached values).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds an op result. History is recorded only when grad mode is on and
// some input requires grad; `backward` receives the result node.
Tensor make_result(Shape shape, std::vector<float> values, std::vector<const Tensor*> inputs,
                   std::function<void(Node& out)> backward);

}  // namespace detail

}  // namespace bdlab
