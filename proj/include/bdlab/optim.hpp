#pragma once

#include <cstdint>
#include <vector>

#include "bdlab/tensor.hpp"

namespace bdlab {

struct AdamOptions {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction. Only tensors whose requires_grad flag is set
// at step time are updated; everything else stays bit-identical.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void step();
  void zero_grad();
  std::int64_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(float lr) { options_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  AdamOptions options_;
  std::int64_t step_ = 0;
};

}  // namespace bdlab
