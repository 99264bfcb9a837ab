// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-based reverse-mode autodiff. Graphs are
// rebuilt on every forward pass and torn down with the tensors that hold
// them; backward() walks the graph once in reverse topological order.
// Broadcasting is restricted to scalar-vs-tensor and same-shape; the
// structured variants (add_rowvec & friends) cover everything else
// explicitly.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rsd/errors.hpp"

namespace rsd {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  pow,
  exp,
  log,
  sqrt,
  neg,
  clamp_min,
  relu,
  gelu,
  softmax,
  log_softmax,
  matmul,
  bmm,
  transpose2d,
  permute,
  reshape,
  sum_axis,
  mean_axis,
  var_axis,
  sum_all,
  mean_all,
  add_rowvec,
  mul_rowvec,
  add_colvec,
  mul_colvec,
  conv2d,
  nll,
};

const char* op_name(Op op);

struct TensorNode;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor eye(int n);
  static Tensor from_values(const Shape& shape, std::vector<double> values);
  static Tensor uniform(const Shape& shape, double lo, double hi,
                        std::mt19937_64& rng);
  static Tensor normal(const Shape& shape, double mean, double stddev,
                       std::mt19937_64& rng);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int axis) const;
  int64_t numel() const;
  Op op() const;

  const std::vector<double>& values() const;
  // Leaf tensors only; used by optimizers and finite-difference probes.
  std::vector<double>& mutable_values();
  double item() const;
  double at(int64_t flat_index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool enabled);
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();
  // Root must be a scalar attached to a graph. Leaf grads accumulate
  // across calls until zero_grad().
  void backward() const;
  Tensor detach() const;

  Tensor reshape(const Shape& shape) const;
  Tensor transpose() const;  // 2-D only
  Tensor permute(const std::vector<int>& dims) const;

  Tensor sum() const;
  Tensor mean() const;
  Tensor sum(int axis) const;
  Tensor mean(int axis) const;
  Tensor variance(int axis) const;  // population form, divisor n

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Elementwise binary ops: same shape, or either side a 1-element tensor.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, double exponent);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor softmax(const Tensor& a);      // last axis, max-shifted
Tensor log_softmax(const Tensor& a);  // last axis

Tensor matmul(const Tensor& a, const Tensor& b);  // [B,K]x[K,N]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,M,K]x[B,K,N]

// Structured broadcasts. v spans the last axis (rowvec) or, for rank-2 x,
// the first axis (colvec).
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor add_colvec(const Tensor& x, const Tensor& v);
Tensor mul_colvec(const Tensor& x, const Tensor& v);

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding);

// Mean negative log-likelihood of per-row targets; inputs are log-probs.
Tensor nll_loss(const Tensor& log_probs, const std::vector<int>& labels);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Distinct op kinds reachable from root, in enum order. Used by the model
// family census.
std::vector<Op> graph_ops(const Tensor& root);

bool autograd_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Debug-mode checks scan op outputs for non-finite values and record a
// warning instead of throwing (div-by-zero contract).
void set_debug_checks(bool enabled);
bool debug_checks();
void warn(const std::string& message);
std::vector<std::string> take_warnings();

// Seed-mixing helpers so independent consumers (model init, batch shuffle,
// AAD init) draw from disjoint deterministic streams.
uint64_t splitmix64(uint64_t x);
uint64_t mix_seed(uint64_t seed, uint64_t stream);

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  Op op = Op::leaf;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
};

}  // namespace rsd
