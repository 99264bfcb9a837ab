// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0
//
// Small layer types shared by the model zoo and the distillation heads.
#pragma once

#include <random>
#include <vector>

#include "rsd/tensor.hpp"

namespace rsd {

enum class Mode { train, eval };

// y = x @ w + b with w[in,out]. Init is uniform +-1/sqrt(fan_in) for both
// weight and bias. Accepts rank-2 input, or rank-3 flattened over the
// leading axes.
struct Affine {
  Tensor w, b;

  Affine() = default;
  Affine(int in, int out, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  int in_dim() const { return w.dim(0); }
  int out_dim() const { return w.dim(1); }
  int64_t parameter_count() const { return w.numel() + b.numel(); }
};

// 1-D batch normalization over columns of [B,D]. Training mode uses batch
// statistics (population variance, divisor B) and updates running stats
// with momentum 0.1; eval mode uses the running stats.
struct BatchNorm1d {
  Tensor gamma, beta;
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm1d() = default;
  explicit BatchNorm1d(int d);

  Tensor forward(const Tensor& x, Mode mode);
  int dim() const { return gamma.dim(0); }
};

// Normalization over the last axis of a rank-2 input, with affine gamma/beta.
struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(int d);

  Tensor forward(const Tensor& x) const;
};

}  // namespace rsd
