// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0

#include "rsd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace rsd {

namespace {

thread_local bool g_autograd_enabled = true;
thread_local bool g_debug_checks = false;
thread_local std::vector<std::string> g_warnings;

using NodePtr = std::shared_ptr<TensorNode>;

std::vector<double>& grad_buf(TensorNode& n) {
  if (n.grad.empty()) n.grad.assign(static_cast<size_t>(shape_numel(n.shape)), 0.0);
  return n.grad;
}

void debug_scan(Op op, const std::vector<double>& values) {
  if (!g_debug_checks) return;
  for (double v : values) {
    if (!std::isfinite(v)) {
      warn(std::string(op_name(op)) + " produced a non-finite value");
      return;
    }
  }
}

Tensor make_op(Op op, Shape shape, std::vector<double> values,
               std::vector<NodePtr> parents,
               std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->op = op;
  debug_scan(op, n->values);
  if (g_autograd_enabled) {
    bool any = false;
    for (const auto& p : parents) {
      if (p->requires_grad) {
        any = true;
        break;
      }
    }
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(n));
}

// Broadcast classification for elementwise binaries.
enum class BCast { same, a_scalar, b_scalar };

BCast classify(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return BCast::same;
  if (shape_numel(a) == 1) return BCast::a_scalar;
  if (shape_numel(b) == 1) return BCast::b_scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b) +
                   " (only same-shape or scalar broadcasting is supported)");
}

struct AxisSplit {
  int64_t outer, axis, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw ShapeError("reduce: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    s.inner *= shape[i];
  if (s.axis == 0) throw DomainError("reduce: axis has size 0");
  return s;
}

Shape drop_axis(const Shape& shape, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

Tensor binary_elementwise(Op op, const char* name, const Tensor& a,
                          const Tensor& b, double (*f)(double, double),
                          double (*dfa)(double, double),
                          double (*dfb)(double, double)) {
  BCast bc = classify(name, a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  const Shape& out_shape = bc == BCast::a_scalar ? b.shape() : a.shape();
  int64_t n = shape_numel(out_shape);
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double x = av[bc == BCast::a_scalar ? 0 : i];
    double y = bv[bc == BCast::b_scalar ? 0 : i];
    out[static_cast<size_t>(i)] = f(x, y);
  }
  return make_op(op, out_shape, std::move(out), {a.node(), b.node()},
                 [bc, n, dfa, dfb](TensorNode& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   for (int64_t i = 0; i < n; ++i) {
                     double x = pa.values[bc == BCast::a_scalar ? 0 : i];
                     double y = pb.values[bc == BCast::b_scalar ? 0 : i];
                     double g = self.grad[static_cast<size_t>(i)];
                     if (pa.requires_grad)
                       grad_buf(pa)[bc == BCast::a_scalar ? 0 : i] += g * dfa(x, y);
                     if (pb.requires_grad)
                       grad_buf(pb)[bc == BCast::b_scalar ? 0 : i] += g * dfb(x, y);
                   }
                 });
}

Tensor unary_elementwise(Op op, const Tensor& a, double (*f)(double),
                         double (*df)(double)) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_op(op, a.shape(), std::move(out), {a.node()},
                 [df](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t i = 0; i < self.values.size(); ++i)
                     g[i] += self.grad[i] * df(p.values[i]);
                 });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_value(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  double t = std::tanh(u);
  double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::pow: return "pow";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sqrt: return "sqrt";
    case Op::neg: return "neg";
    case Op::clamp_min: return "clamp_min";
    case Op::relu: return "relu";
    case Op::gelu: return "gelu";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::matmul: return "matmul";
    case Op::bmm: return "bmm";
    case Op::transpose2d: return "transpose2d";
    case Op::permute: return "permute";
    case Op::reshape: return "reshape";
    case Op::sum_axis: return "sum_axis";
    case Op::mean_axis: return "mean_axis";
    case Op::var_axis: return "var_axis";
    case Op::sum_all: return "sum_all";
    case Op::mean_all: return "mean_all";
    case Op::add_rowvec: return "add_rowvec";
    case Op::mul_rowvec: return "mul_rowvec";
    case Op::add_colvec: return "add_colvec";
    case Op::mul_colvec: return "mul_colvec";
    case Op::conv2d: return "conv2d";
    case Op::nll: return "nll";
  }
  return "?";
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed * 0x9e3779b97f4a7c15ULL + splitmix64(stream));
}

bool autograd_enabled() { return g_autograd_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_autograd_enabled) {
  g_autograd_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_autograd_enabled = previous_; }

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

void warn(const std::string& message) { g_warnings.push_back(message); }

std::vector<std::string> take_warnings() {
  std::vector<std::string> out;
  out.swap(g_warnings);
  return out;
}

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->values.assign(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

Tensor Tensor::eye(int n) {
  Tensor t = zeros({n, n});
  for (int i = 0; i < n; ++i)
    t.node()->values[static_cast<size_t>(i) * n + i] = 1.0;
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("from_values: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->values = std::move(values);
  return Tensor(std::move(n));
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi,
                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from_values(shape, std::move(v));
}

Tensor Tensor::normal(const Shape& shape, double mean, double stddev,
                      std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from_values(shape, std::move(v));
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank())
    throw ShapeError("dim: axis out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

int64_t Tensor::numel() const { return shape_numel(node_->shape); }
Op Tensor::op() const { return node_->op; }

const std::vector<double>& Tensor::values() const { return node_->values; }

std::vector<double>& Tensor::mutable_values() {
  if (node_->op != Op::leaf)
    throw Error("mutable_values: only leaf tensors may be mutated in place");
  return node_->values;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
  return node_->values[0];
}

double Tensor::at(int64_t flat_index) const {
  return node_->values.at(static_cast<size_t>(flat_index));
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool enabled) {
  if (node_->op != Op::leaf)
    throw Error("set_requires_grad: only leaf tensors can be toggled");
  node_->requires_grad = enabled;
  if (!enabled) node_->grad.clear();
  return *this;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw Error("grad: no gradient accumulated for this tensor");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->values = node_->values;
  return Tensor(std::move(n));
}

void Tensor::backward() const {
  if (!node_) throw Error("backward: undefined tensor");
  if (numel() != 1)
    throw ShapeError("backward: root must be scalar, got " +
                     shape_str(shape()));
  if (!node_->backward_fn)
    throw Error("backward: root is not attached to a graph");

  // Post-order DFS from the root through recorded parents; reversing the
  // order visits every node after all of its consumers.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* n;
    size_t next;
  };
  std::vector<Frame> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* child = f.n->parents[f.next++].get();
      if (child->backward_fn && !seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  grad_buf(*node_)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->grad.empty()) continue;
    n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      Op::add, "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      Op::sub, "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      Op::mul, "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  if (g_debug_checks) {
    for (double y : b.values())
      if (y == 0.0) {
        warn("div: division by zero");
        break;
      }
  }
  return binary_elementwise(
      Op::div, "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor pow(const Tensor& a, double exponent) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::pow(av[i], exponent);
  return make_op(Op::pow, a.shape(), std::move(out), {a.node()},
                 [exponent](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t i = 0; i < self.values.size(); ++i)
                     g[i] += self.grad[i] * exponent *
                             std::pow(p.values[i], exponent - 1.0);
                 });
}

Tensor exp(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  return make_op(Op::exp, a.shape(), std::move(out), {a.node()},
                 [](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t i = 0; i < self.values.size(); ++i)
                     g[i] += self.grad[i] * self.values[i];
                 });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (v <= 0.0)
      throw DomainError("log: input " + std::to_string(v) +
                        " is not strictly positive");
  return unary_elementwise(Op::log, a, [](double x) { return std::log(x); },
                           [](double x) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values())
    if (v < 0.0)
      throw DomainError("sqrt: input " + std::to_string(v) + " is negative");
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::sqrt(av[i]);
  return make_op(Op::sqrt, a.shape(), std::move(out), {a.node()},
                 [](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t i = 0; i < self.values.size(); ++i)
                     g[i] += self.grad[i] * 0.5 / self.values[i];
                 });
}

Tensor neg(const Tensor& a) {
  return unary_elementwise(Op::neg, a, [](double x) { return -x; },
                           [](double) { return -1.0; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::max(av[i], floor);
  return make_op(Op::clamp_min, a.shape(), std::move(out), {a.node()},
                 [floor](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t i = 0; i < self.values.size(); ++i)
                     if (p.values[i] > floor) g[i] += self.grad[i];
                 });
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(Op::relu, a,
                           [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary_elementwise(Op::gelu, a, gelu_value, gelu_derivative);
}

// ---------------------------------------------------------------------------
// Softmax family (last axis)

Tensor softmax(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("softmax: rank-0 input");
  int64_t cols = a.dim(a.rank() - 1);
  int64_t rows = a.numel() / cols;
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    double m = x[0];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      s += y[c];
    }
    for (int64_t c = 0; c < cols; ++c) y[c] /= s;
  }
  return make_op(Op::softmax, a.shape(), std::move(out), {a.node()},
                 [rows, cols](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (int64_t r = 0; r < rows; ++r) {
                     const double* y = self.values.data() + r * cols;
                     const double* dy = self.grad.data() + r * cols;
                     double dot = 0.0;
                     for (int64_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
                     for (int64_t c = 0; c < cols; ++c)
                       g[static_cast<size_t>(r * cols + c)] +=
                           y[c] * (dy[c] - dot);
                   }
                 });
}

Tensor log_softmax(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("log_softmax: rank-0 input");
  int64_t cols = a.dim(a.rank() - 1);
  int64_t rows = a.numel() / cols;
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    double m = x[0];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) s += std::exp(x[c] - m);
    double lse = m + std::log(s);
    for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  return make_op(Op::log_softmax, a.shape(), std::move(out), {a.node()},
                 [rows, cols](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (int64_t r = 0; r < rows; ++r) {
                     const double* y = self.values.data() + r * cols;
                     const double* dy = self.grad.data() + r * cols;
                     double s = 0.0;
                     for (int64_t c = 0; c < cols; ++c) s += dy[c];
                     for (int64_t c = 0; c < cols; ++c)
                       g[static_cast<size_t>(r * cols + c)] +=
                           dy[c] - std::exp(y[c]) * s;
                   }
                 });
}

// ---------------------------------------------------------------------------
// Matrix products

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 inputs, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      double x = av[static_cast<size_t>(i * k + p)];
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  return make_op(
      Op::matmul, {static_cast<int>(m), static_cast<int>(n)}, std::move(out),
      {a.node(), b.node()}, [m, k, n](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& ga = grad_buf(pa);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
              double g = self.grad[static_cast<size_t>(i * n + j)];
              for (int64_t p = 0; p < k; ++p)
                ga[static_cast<size_t>(i * k + p)] +=
                    g * pb.values[static_cast<size_t>(p * n + j)];
            }
        }
        if (pb.requires_grad) {
          auto& gb = grad_buf(pb);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
              double x = pa.values[static_cast<size_t>(i * k + p)];
              for (int64_t j = 0; j < n; ++j)
                gb[static_cast<size_t>(p * n + j)] +=
                    x * self.grad[static_cast<size_t>(i * n + j)];
            }
        }
      });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("bmm: expected rank-3 inputs, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(bs * m * n), 0.0);
  for (int64_t t = 0; t < bs; ++t) {
    const double* A = av.data() + t * m * k;
    const double* B = bv.data() + t * k * n;
    double* O = out.data() + t * m * n;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t p = 0; p < k; ++p) {
        double x = A[i * k + p];
        for (int64_t j = 0; j < n; ++j) O[i * n + j] += x * B[p * n + j];
      }
  }
  return make_op(
      Op::bmm,
      {static_cast<int>(bs), static_cast<int>(m), static_cast<int>(n)},
      std::move(out), {a.node(), b.node()}, [bs, m, k, n](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (int64_t t = 0; t < bs; ++t) {
          const double* A = pa.values.data() + t * m * k;
          const double* B = pb.values.data() + t * k * n;
          const double* G = self.grad.data() + t * m * n;
          if (pa.requires_grad) {
            double* ga = grad_buf(pa).data() + t * m * k;
            for (int64_t i = 0; i < m; ++i)
              for (int64_t j = 0; j < n; ++j) {
                double g = G[i * n + j];
                for (int64_t p = 0; p < k; ++p)
                  ga[i * k + p] += g * B[p * n + j];
              }
          }
          if (pb.requires_grad) {
            double* gb = grad_buf(pb).data() + t * k * n;
            for (int64_t i = 0; i < m; ++i)
              for (int64_t p = 0; p < k; ++p) {
                double x = A[i * k + p];
                for (int64_t j = 0; j < n; ++j)
                  gb[p * n + j] += x * G[i * n + j];
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor Tensor::reshape(const Shape& shape) const {
  if (shape_numel(shape) != numel())
    throw ShapeError("reshape: cannot view " + shape_str(this->shape()) +
                     " as " + shape_str(shape));
  return make_op(Op::reshape, shape, node_->values, {node_},
                 [](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     g[i] += self.grad[i];
                 });
}

Tensor Tensor::permute(const std::vector<int>& dims) const {
  if (static_cast<int>(dims.size()) != rank())
    throw ShapeError("permute: needs one index per axis of " +
                     shape_str(shape()));
  std::vector<bool> used(dims.size(), false);
  for (int d : dims) {
    if (d < 0 || d >= rank() || used[static_cast<size_t>(d)])
      throw ShapeError("permute: invalid axis permutation");
    used[static_cast<size_t>(d)] = true;
  }
  int r = rank();
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = dim(dims[static_cast<size_t>(i)]);

  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * shape()[static_cast<size_t>(i + 1)];

  int64_t n = numel();
  // Mapping from output flat index to input flat index.
  auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t in = 0;
    for (int i = 0; i < r; ++i)
      in += idx[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(dims[static_cast<size_t>(i)])];
    (*map)[static_cast<size_t>(o)] = in;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t o = 0; o < n; ++o)
    out[static_cast<size_t>(o)] = node_->values[static_cast<size_t>((*map)[static_cast<size_t>(o)])];
  return make_op(Op::permute, out_shape, std::move(out), {node_},
                 [map](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t o = 0; o < self.grad.size(); ++o)
                     g[static_cast<size_t>((*map)[o])] += self.grad[o];
                 });
}

Tensor Tensor::transpose() const {
  if (rank() != 2)
    throw ShapeError("transpose: rank-2 only, got " + shape_str(shape()));
  return permute({1, 0});
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Tensor::sum(int axis) const {
  AxisSplit s = split_axis(shape(), axis);
  std::vector<double> out(static_cast<size_t>(s.outer * s.inner), 0.0);
  const auto& v = values();
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t a = 0; a < s.axis; ++a)
      for (int64_t i = 0; i < s.inner; ++i)
        out[static_cast<size_t>(o * s.inner + i)] +=
            v[static_cast<size_t>((o * s.axis + a) * s.inner + i)];
  return make_op(Op::sum_axis, drop_axis(shape(), axis), std::move(out),
                 {node_}, [s](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (int64_t o = 0; o < s.outer; ++o)
                     for (int64_t a = 0; a < s.axis; ++a)
                       for (int64_t i = 0; i < s.inner; ++i)
                         g[static_cast<size_t>((o * s.axis + a) * s.inner + i)] +=
                             self.grad[static_cast<size_t>(o * s.inner + i)];
                 });
}

Tensor Tensor::mean(int axis) const {
  AxisSplit s = split_axis(shape(), axis);
  std::vector<double> out(static_cast<size_t>(s.outer * s.inner), 0.0);
  const auto& v = values();
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t a = 0; a < s.axis; ++a)
      for (int64_t i = 0; i < s.inner; ++i)
        out[static_cast<size_t>(o * s.inner + i)] +=
            v[static_cast<size_t>((o * s.axis + a) * s.inner + i)];
  double inv = 1.0 / static_cast<double>(s.axis);
  for (auto& x : out) x *= inv;
  return make_op(Op::mean_axis, drop_axis(shape(), axis), std::move(out),
                 {node_}, [s, inv](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (int64_t o = 0; o < s.outer; ++o)
                     for (int64_t a = 0; a < s.axis; ++a)
                       for (int64_t i = 0; i < s.inner; ++i)
                         g[static_cast<size_t>((o * s.axis + a) * s.inner + i)] +=
                             inv * self.grad[static_cast<size_t>(o * s.inner + i)];
                 });
}

Tensor Tensor::variance(int axis) const {
  AxisSplit s = split_axis(shape(), axis);
  const auto& v = values();
  std::vector<double> mu(static_cast<size_t>(s.outer * s.inner), 0.0);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t a = 0; a < s.axis; ++a)
      for (int64_t i = 0; i < s.inner; ++i)
        mu[static_cast<size_t>(o * s.inner + i)] +=
            v[static_cast<size_t>((o * s.axis + a) * s.inner + i)];
  double inv = 1.0 / static_cast<double>(s.axis);
  for (auto& x : mu) x *= inv;
  std::vector<double> out(mu.size(), 0.0);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t a = 0; a < s.axis; ++a)
      for (int64_t i = 0; i < s.inner; ++i) {
        double d = v[static_cast<size_t>((o * s.axis + a) * s.inner + i)] -
                   mu[static_cast<size_t>(o * s.inner + i)];
        out[static_cast<size_t>(o * s.inner + i)] += d * d;
      }
  for (auto& x : out) x *= inv;
  auto mu_keep = std::make_shared<std::vector<double>>(std::move(mu));
  return make_op(Op::var_axis, drop_axis(shape(), axis), std::move(out),
                 {node_}, [s, inv, mu_keep](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (int64_t o = 0; o < s.outer; ++o)
                     for (int64_t a = 0; a < s.axis; ++a)
                       for (int64_t i = 0; i < s.inner; ++i) {
                         size_t xi = static_cast<size_t>((o * s.axis + a) * s.inner + i);
                         size_t oi = static_cast<size_t>(o * s.inner + i);
                         g[xi] += self.grad[oi] * 2.0 * inv *
                                  (p.values[xi] - (*mu_keep)[oi]);
                       }
                 });
}

Tensor Tensor::sum() const {
  const auto& v = values();
  double s = 0.0;
  for (double x : v) s += x;
  return make_op(Op::sum_all, {}, {s}, {node_}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    double dy = self.grad[0];
    for (auto& x : g) x += dy;
  });
}

Tensor Tensor::mean() const {
  const auto& v = values();
  double s = 0.0;
  for (double x : v) s += x;
  double inv = 1.0 / static_cast<double>(v.size());
  return make_op(Op::mean_all, {}, {s * inv}, {node_},
                 [inv](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   double dy = self.grad[0] * inv;
                   for (auto& x : g) x += dy;
                 });
}

// ---------------------------------------------------------------------------
// Structured broadcasts

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (v.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != v.dim(0))
    throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) +
                     " does not span the last axis of " + shape_str(x.shape()));
  int64_t d = v.dim(0);
  int64_t rows = x.numel() / d;
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c)
      out[static_cast<size_t>(r * d + c)] =
          xv[static_cast<size_t>(r * d + c)] + vv[static_cast<size_t>(c)];
  return make_op(Op::add_rowvec, x.shape(), std::move(out),
                 {x.node(), v.node()}, [rows, d](TensorNode& self) {
                   auto& px = *self.parents[0];
                   auto& pv = *self.parents[1];
                   if (px.requires_grad) {
                     auto& g = grad_buf(px);
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       g[i] += self.grad[i];
                   }
                   if (pv.requires_grad) {
                     auto& g = grad_buf(pv);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < d; ++c)
                         g[static_cast<size_t>(c)] +=
                             self.grad[static_cast<size_t>(r * d + c)];
                   }
                 });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  if (v.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != v.dim(0))
    throw ShapeError("mul_rowvec: vector " + shape_str(v.shape()) +
                     " does not span the last axis of " + shape_str(x.shape()));
  int64_t d = v.dim(0);
  int64_t rows = x.numel() / d;
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c)
      out[static_cast<size_t>(r * d + c)] =
          xv[static_cast<size_t>(r * d + c)] * vv[static_cast<size_t>(c)];
  return make_op(Op::mul_rowvec, x.shape(), std::move(out),
                 {x.node(), v.node()}, [rows, d](TensorNode& self) {
                   auto& px = *self.parents[0];
                   auto& pv = *self.parents[1];
                   if (px.requires_grad) {
                     auto& g = grad_buf(px);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < d; ++c)
                         g[static_cast<size_t>(r * d + c)] +=
                             self.grad[static_cast<size_t>(r * d + c)] *
                             pv.values[static_cast<size_t>(c)];
                   }
                   if (pv.requires_grad) {
                     auto& g = grad_buf(pv);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < d; ++c)
                         g[static_cast<size_t>(c)] +=
                             self.grad[static_cast<size_t>(r * d + c)] *
                             px.values[static_cast<size_t>(r * d + c)];
                   }
                 });
}

Tensor add_colvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.dim(0) != v.dim(0))
    throw ShapeError("add_colvec: vector " + shape_str(v.shape()) +
                     " does not span the rows of " + shape_str(x.shape()));
  int64_t rows = x.dim(0), d = x.dim(1);
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c)
      out[static_cast<size_t>(r * d + c)] =
          xv[static_cast<size_t>(r * d + c)] + vv[static_cast<size_t>(r)];
  return make_op(Op::add_colvec, x.shape(), std::move(out),
                 {x.node(), v.node()}, [rows, d](TensorNode& self) {
                   auto& px = *self.parents[0];
                   auto& pv = *self.parents[1];
                   if (px.requires_grad) {
                     auto& g = grad_buf(px);
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       g[i] += self.grad[i];
                   }
                   if (pv.requires_grad) {
                     auto& g = grad_buf(pv);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < d; ++c)
                         g[static_cast<size_t>(r)] +=
                             self.grad[static_cast<size_t>(r * d + c)];
                   }
                 });
}

Tensor mul_colvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.dim(0) != v.dim(0))
    throw ShapeError("mul_colvec: vector " + shape_str(v.shape()) +
                     " does not span the rows of " + shape_str(x.shape()));
  int64_t rows = x.dim(0), d = x.dim(1);
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c)
      out[static_cast<size_t>(r * d + c)] =
          xv[static_cast<size_t>(r * d + c)] * vv[static_cast<size_t>(r)];
  return make_op(Op::mul_colvec, x.shape(), std::move(out),
                 {x.node(), v.node()}, [rows, d](TensorNode& self) {
                   auto& px = *self.parents[0];
                   auto& pv = *self.parents[1];
                   if (px.requires_grad) {
                     auto& g = grad_buf(px);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < d; ++c)
                         g[static_cast<size_t>(r * d + c)] +=
                             self.grad[static_cast<size_t>(r * d + c)] *
                             pv.values[static_cast<size_t>(r)];
                   }
                   if (pv.requires_grad) {
                     auto& g = grad_buf(pv);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < d; ++c)
                         g[static_cast<size_t>(r)] +=
                             self.grad[static_cast<size_t>(r * d + c)] *
                             px.values[static_cast<size_t>(r * d + c)];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), zero padding

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: expected x[B,C,H,W] and w[O,C,kh,kw], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: channel counts differ, input has " +
                     std::to_string(x.dim(1)) + " but kernel expects " +
                     std::to_string(w.dim(1)));
  if (b.rank() != 1 || b.dim(0) != w.dim(0))
    throw ShapeError("conv2d: bias must be [out_channels]");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  if (kh > H + 2 * padding || kw > W + 2 * padding || Ho < 1 || Wo < 1)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " does not fit padded input " + shape_str(x.shape()));

  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(B * O * Ho * Wo));
  for (int64_t n = 0; n < B; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = bv[static_cast<size_t>(o)];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < kh; ++i) {
              int64_t ih = oh * stride - padding + i;
              if (ih < 0 || ih >= H) continue;
              for (int64_t j = 0; j < kw; ++j) {
                int64_t iw = ow * stride - padding + j;
                if (iw < 0 || iw >= W) continue;
                acc += xv[static_cast<size_t>(((n * C + c) * H + ih) * W + iw)] *
                       wv[static_cast<size_t>(((o * C + c) * kh + i) * kw + j)];
              }
            }
          out[static_cast<size_t>(((n * O + o) * Ho + oh) * Wo + ow)] = acc;
        }
  return make_op(
      Op::conv2d,
      {static_cast<int>(B), static_cast<int>(O), static_cast<int>(Ho),
       static_cast<int>(Wo)},
      std::move(out), {x.node(), w.node(), b.node()},
      [B, C, H, W, O, kh, kw, Ho, Wo, stride, padding](TensorNode& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        double* gx = px.requires_grad ? grad_buf(px).data() : nullptr;
        double* gw = pw.requires_grad ? grad_buf(pw).data() : nullptr;
        double* gb = pb.requires_grad ? grad_buf(pb).data() : nullptr;
        for (int64_t n = 0; n < B; ++n)
          for (int64_t o = 0; o < O; ++o)
            for (int64_t oh = 0; oh < Ho; ++oh)
              for (int64_t ow = 0; ow < Wo; ++ow) {
                double g = self.grad[static_cast<size_t>(
                    ((n * O + o) * Ho + oh) * Wo + ow)];
                if (gb) gb[o] += g;
                for (int64_t c = 0; c < C; ++c)
                  for (int64_t i = 0; i < kh; ++i) {
                    int64_t ih = oh * stride - padding + i;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t j = 0; j < kw; ++j) {
                      int64_t iw = ow * stride - padding + j;
                      if (iw < 0 || iw >= W) continue;
                      size_t xi = static_cast<size_t>(((n * C + c) * H + ih) * W + iw);
                      size_t wi = static_cast<size_t>(((o * C + c) * kh + i) * kw + j);
                      if (gx) gx[xi] += g * pw.values[wi];
                      if (gw) gw[wi] += g * px.values[xi];
                    }
                  }
              }
      });
}

// ---------------------------------------------------------------------------
// NLL over per-row log-probabilities

Tensor nll_loss(const Tensor& log_probs, const std::vector<int>& labels) {
  if (log_probs.rank() != 2)
    throw ShapeError("nll_loss: expected [B,C] log-probs, got " +
                     shape_str(log_probs.shape()));
  int64_t B = log_probs.dim(0), C = log_probs.dim(1);
  if (static_cast<int64_t>(labels.size()) != B)
    throw ShapeError("nll_loss: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(B));
  for (int y : labels)
    if (y < 0 || y >= C)
      throw IndexError("nll_loss: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(C) + ")");
  const auto& v = log_probs.values();
  double acc = 0.0;
  for (int64_t i = 0; i < B; ++i)
    acc -= v[static_cast<size_t>(i * C + labels[static_cast<size_t>(i)])];
  auto labels_keep = std::make_shared<std::vector<int>>(labels);
  return make_op(Op::nll, {}, {acc / static_cast<double>(B)},
                 {log_probs.node()}, [B, C, labels_keep](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   double dy = self.grad[0] / static_cast<double>(B);
                   for (int64_t i = 0; i < B; ++i)
                     g[static_cast<size_t>(i * C + (*labels_keep)[static_cast<size_t>(i)])] -= dy;
                 });
}

// ---------------------------------------------------------------------------
// Graph census

std::vector<Op> graph_ops(const Tensor& root) {
  std::unordered_set<const TensorNode*> seen;
  std::unordered_set<int> kinds;
  std::vector<const TensorNode*> stack{root.node().get()};
  while (!stack.empty()) {
    const TensorNode* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (n->op != Op::leaf) kinds.insert(static_cast<int>(n->op));
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::vector<Op> out;
  for (int k = 0; k <= static_cast<int>(Op::nll); ++k)
    if (kinds.count(k)) out.push_back(static_cast<Op>(k));
  return out;
}

}  // namespace rsd
