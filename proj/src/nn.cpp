// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0

#include "rsd/nn.hpp"

#include <cmath>

namespace rsd {

Affine::Affine(int in, int out, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w = Tensor::uniform({in, out}, -bound, bound, rng).set_requires_grad(true);
  b = Tensor::uniform({out}, -bound, bound, rng).set_requires_grad(true);
}

Tensor Affine::forward(const Tensor& x) const {
  if (x.rank() == 2) return add_rowvec(matmul(x, w), b);
  if (x.rank() == 3) {
    int b0 = x.dim(0), t = x.dim(1);
    Tensor flat = x.reshape({b0 * t, x.dim(2)});
    return add_rowvec(matmul(flat, w), b).reshape({b0, t, out_dim()});
  }
  throw ShapeError("Affine: expected rank-2 or rank-3 input, got " +
                   shape_str(x.shape()));
}

BatchNorm1d::BatchNorm1d(int d)
    : gamma(Tensor::ones({d})), beta(Tensor::zeros({d})) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
  running_mean.assign(static_cast<size_t>(d), 0.0);
  running_var.assign(static_cast<size_t>(d), 1.0);
}

Tensor BatchNorm1d::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.dim(1) != dim())
    throw ShapeError("batchnorm: expected [B," + std::to_string(dim()) +
                     "], got " + shape_str(x.shape()));
  if (mode == Mode::train) {
    if (x.dim(0) < 2)
      throw DomainError("batchnorm: batch of " + std::to_string(x.dim(0)) +
                        " is too small for training mode (need >= 2)");
    Tensor mu = x.mean(0);
    Tensor xc = add_rowvec(x, neg(mu));
    Tensor var = mul(xc, xc).mean(0);
    Tensor inv = 1.0 / sqrt(var + eps);
    Tensor y = mul_rowvec(xc, inv);
    for (int j = 0; j < dim(); ++j) {
      running_mean[static_cast<size_t>(j)] =
          (1.0 - momentum) * running_mean[static_cast<size_t>(j)] +
          momentum * mu.at(j);
      running_var[static_cast<size_t>(j)] =
          (1.0 - momentum) * running_var[static_cast<size_t>(j)] +
          momentum * var.at(j);
    }
    return add_rowvec(mul_rowvec(y, gamma), beta);
  }
  std::vector<double> inv(static_cast<size_t>(dim()));
  for (int j = 0; j < dim(); ++j)
    inv[static_cast<size_t>(j)] =
        1.0 / std::sqrt(running_var[static_cast<size_t>(j)] + eps);
  Tensor rm = Tensor::from_values({dim()}, running_mean);
  Tensor ri = Tensor::from_values({dim()}, std::move(inv));
  Tensor y = mul_rowvec(add_rowvec(x, neg(rm)), ri);
  return add_rowvec(mul_rowvec(y, gamma), beta);
}

LayerNorm::LayerNorm(int d)
    : gamma(Tensor::ones({d})), beta(Tensor::zeros({d})) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != gamma.dim(0))
    throw ShapeError("layernorm: expected [N," + std::to_string(gamma.dim(0)) +
                     "], got " + shape_str(x.shape()));
  Tensor mu = x.mean(1);
  Tensor xc = add_colvec(x, neg(mu));
  Tensor var = mul(xc, xc).mean(1);
  Tensor y = mul_colvec(xc, 1.0 / sqrt(var + eps));
  return add_rowvec(mul_rowvec(y, gamma), beta);
}

}  // namespace rsd
