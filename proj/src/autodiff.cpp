#include "advtpp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "advtpp/errors.hpp"

namespace advtpp::ad {

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a,
                             const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a,
                             const std::string& why) {
  throw ShapeError(op + ": " + why + " (shape " + shape_string(a) + ")");
}

// Splits a rank <= 2 tensor into outer x len x inner around one axis.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
  Shape reduced;
};

AxisLayout axis_layout(const std::string& op, const Tensor& a,
                       std::size_t axis) {
  if (axis >= a.rank()) shape_fail(op, a.shape(), "axis out of range");
  AxisLayout l;
  for (std::size_t d = 0; d < a.rank(); ++d) {
    if (d < axis) l.outer *= a.dim(d);
    if (d > axis) l.inner *= a.dim(d);
    if (d != axis) l.reduced.push_back(a.dim(d));
  }
  l.len = a.dim(axis);
  return l;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i]);
  if (!a.tracked()) return Tensor(a.shape(), std::move(out));
  Tensor in = a.detach();
  auto out_copy = std::make_shared<std::vector<double>>(out);
  return Tape::record(
      a.shape(), std::move(out), {&a},
      [in, out_copy, deriv](std::span<const double> g,
                            std::span<std::vector<double>*> gin) {
        auto& ga = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * deriv(in[i], (*out_copy)[i]);
        }
      });
}

// Fwd(x, y) -> value; Da(x, y, out) and Db(x, y, out) are partial derivatives.
template <class Fwd, class Da, class Db>
Tensor binary(const std::string& op, const Tensor& a, const Tensor& b,
              Fwd fwd, Da da, Db db) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!same && !a_scalar && !b_scalar) shape_fail(op, a.shape(), b.shape());
  const Shape shape = same ? a.shape() : (a_scalar ? b.shape() : a.shape());
  const std::size_t n = product(shape);
  const std::size_t sa = (a.size() == n) ? 1 : 0;
  const std::size_t sb = (b.size() == n) ? 1 : 0;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a[i * sa], b[i * sb]);
  if (!a.tracked() && !b.tracked()) return Tensor(shape, std::move(out));
  Tensor av = a.detach();
  Tensor bv = b.detach();
  auto out_copy = std::make_shared<std::vector<double>>(out);
  return Tape::record(
      shape, std::move(out), {&a, &b},
      [av, bv, sa, sb, out_copy, da, db](std::span<const double> g,
                                         std::span<std::vector<double>*> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = av[i * sa];
          const double y = bv[i * sb];
          const double o = (*out_copy)[i];
          if (gin[0]) (*gin[0])[i * sa] += g[i] * da(x, y, o);
          if (gin[1]) (*gin[1])[i * sb] += g[i] * db(x, y, o);
        }
      });
}

double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : values_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)) {
  if (product(shape_) != values.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " +
                     std::to_string(product(shape_)) + " values, got " +
                     std::to_string(values.size()));
  }
  values_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) shape_fail("dim", shape_, "axis out of range");
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) shape_fail("rows", shape_, "expected a matrix");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) shape_fail("cols", shape_, "expected a matrix");
  return shape_[1];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return (*values_)[r * cols() + c];
}

double Tensor::item() const {
  if (size() != 1) shape_fail("item", shape_, "expected a single element");
  return (*values_)[0];
}

NodeId Tensor::node() const {
  if (!tape_) throw Error("tensor is not gradient-tracked");
  return node_;
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = 0;
  return t;
}

// ------------------------------------------------------------- Gradients

bool Gradients::has(const Tensor& t) const { return find(t) != nullptr; }

const Tensor* Gradients::find(const Tensor& t) const {
  if (!t.tracked() || t.tape() != tape_) return nullptr;
  const NodeId id = t.node();
  if (id >= by_node_.size() || !by_node_[id]) return nullptr;
  return &*by_node_[id];
}

const Tensor& Gradients::of(const Tensor& t) const {
  const Tensor* g = find(t);
  if (!g) throw Error("no gradient recorded for tensor");
  return *g;
}

Tensor Gradients::or_zero(const Tensor& t) const {
  const Tensor* g = find(t);
  return g ? *g : Tensor::zeros(t.shape());
}

// ------------------------------------------------------------------ Tape

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value.detach();
  Node node;
  node.shape = t.shape();
  nodes_.push_back(std::move(node));
  t.tape_ = this;
  t.node_ = nodes_.size() - 1;
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> values,
                    std::initializer_list<const Tensor*> inputs,
                    Backward backward) {
  return record(std::move(shape), std::move(values),
                std::vector<const Tensor*>(inputs), std::move(backward));
}

Tensor Tape::record(Shape shape, std::vector<double> values,
                    const std::vector<const Tensor*>& inputs,
                    Backward backward) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->tracked()) continue;
    if (tape && tape != in->tape()) {
      throw Error("operation mixes tensors from different tapes");
    }
    tape = in->tape();
  }
  Tensor out(std::move(shape), std::move(values));
  if (!tape) return out;
  Node node;
  node.shape = out.shape();
  for (const Tensor* in : inputs) {
    node.inputs.push_back(in->tracked() ? in->node() : kUntracked);
    node.input_sizes.push_back(in->size());
  }
  node.backward = std::move(backward);
  tape->nodes_.push_back(std::move(node));
  out.tape_ = tape;
  out.node_ = tape->nodes_.size() - 1;
  return out;
}

Gradients Tape::backward(const Tensor& root) const {
  if (!root.tracked() || root.tape() != this) {
    throw Error("backward: root is not tracked on this tape");
  }
  if (root.size() != 1 || root.rank() > 1) {
    throw ShapeError("backward: root must be a scalar, got shape " +
                     shape_string(root.shape()));
  }
  std::vector<std::vector<double>> grads(nodes_.size());
  grads[root.node()] = {1.0};
  std::vector<std::vector<double>*> gin;
  for (std::size_t k = root.node() + 1; k-- > 0;) {
    const Node& node = nodes_[k];
    if (grads[k].empty() || !node.backward) continue;
    gin.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const NodeId in = node.inputs[j];
      if (in == kUntracked) continue;
      if (grads[in].empty()) grads[in].assign(node.input_sizes[j], 0.0);
      gin[j] = &grads[in];
    }
    node.backward(grads[k], gin);
  }
  Gradients out;
  out.tape_ = this;
  out.by_node_.resize(nodes_.size());
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    if (!grads[k].empty()) {
      out.by_node_[k] = Tensor(nodes_[k].shape, std::move(grads[k]));
    }
  }
  return out;
}

// ------------------------------------------------------- elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.values()) {
    if (y == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor neg(const Tensor& a) {
  return unary(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor power(const Tensor& a, double p) {
  if (p != std::floor(p)) {
    for (double x : a.values()) {
      if (x < 0) throw DomainError("power: negative base, fractional power");
    }
  }
  return unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x > 0)) {
      throw DomainError("log: nonpositive argument " + std::to_string(x));
    }
  }
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
  return unary(a, stable_softplus,
               [](double x, double) { return stable_sigmoid(x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor sin(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary(
      a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

// ------------------------------------------------------------ structural

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || (b.rank() != 2 && b.rank() != 1)) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  if (b.dim(0) != k) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  Shape shape = b.rank() == 2 ? Shape{m, n} : Shape{m};
  if (!a.tracked() && !b.tracked()) return Tensor(shape, std::move(out));
  Tensor ad = a.detach();
  Tensor bd = b.detach();
  return Tape::record(
      shape, std::move(out), {&a, &b},
      [ad, bd, m, k, n](std::span<const double> g,
                        std::span<std::vector<double>*> gin) {
        const auto av = ad.values();
        const auto bv = bd.values();
        if (gin[0]) {  // dA = G B^T
          auto& ga = *gin[0];
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                acc += g[i * n + j] * bv[p * n + j];
              }
              ga[i * k + p] += acc;
            }
          }
        }
        if (gin[1]) {  // dB = A^T G
          auto& gb = *gin[1];
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double x = av[i * k + p];
              if (x == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) {
                gb[p * n + j] += x * g[i * n + j];
              }
            }
          }
        }
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_fail("transpose", a.shape(), "expected a matrix");
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  }
  return Tape::record({c, r}, std::move(out), {&a},
                      [r, c](std::span<const double> g,
                             std::span<std::vector<double>*> gin) {
                        auto& ga = *gin[0];
                        for (std::size_t i = 0; i < r; ++i) {
                          for (std::size_t j = 0; j < c; ++j) {
                            ga[i * c + j] += g[j * r + i];
                          }
                        }
                      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (product(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  return Tape::record(std::move(shape), std::move(out), {&a},
                      [](std::span<const double> g,
                         std::span<std::vector<double>*> gin) {
                        auto& ga = *gin[0];
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          ga[i] += g[i];
                        }
                      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return Tape::record({}, {s}, {&a},
                      [](std::span<const double> g,
                         std::span<std::vector<double>*> gin) {
                        for (double& v : *gin[0]) v += g[0];
                      });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const AxisLayout l = axis_layout("sum", a, axis);
  std::vector<double> out(l.outer * l.inner, 0.0);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t k = 0; k < l.len; ++k) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        out[o * l.inner + i] += a[(o * l.len + k) * l.inner + i];
      }
    }
  }
  return Tape::record(l.reduced, std::move(out), {&a},
                      [l](std::span<const double> g,
                          std::span<std::vector<double>*> gin) {
                        auto& ga = *gin[0];
                        for (std::size_t o = 0; o < l.outer; ++o) {
                          for (std::size_t k = 0; k < l.len; ++k) {
                            for (std::size_t i = 0; i < l.inner; ++i) {
                              ga[(o * l.len + k) * l.inner + i] +=
                                  g[o * l.inner + i];
                            }
                          }
                        }
                      });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor max(const Tensor& a, std::size_t axis) {
  const AxisLayout l = axis_layout("max", a, axis);
  if (l.len == 0) shape_fail("max", a.shape(), "empty axis");
  std::vector<double> out(l.outer * l.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      std::size_t best = (o * l.len) * l.inner + i;
      for (std::size_t k = 1; k < l.len; ++k) {
        const std::size_t idx = (o * l.len + k) * l.inner + i;
        if (a[idx] > a[best]) best = idx;
      }
      out[o * l.inner + i] = a[best];
      arg[o * l.inner + i] = best;
    }
  }
  return Tape::record(l.reduced, std::move(out), {&a},
                      [arg](std::span<const double> g,
                            std::span<std::vector<double>*> gin) {
                        for (std::size_t j = 0; j < g.size(); ++j) {
                          (*gin[0])[arg[j]] += g[j];
                        }
                      });
}

namespace {

// Shared by softmax and log_softmax: per-slice max-shifted normalizer.
std::vector<double> log_normalizers(const Tensor& a, const AxisLayout& l) {
  std::vector<double> lse(l.outer * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.len; ++k) {
        m = std::max(m, a[(o * l.len + k) * l.inner + i]);
      }
      double s = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) {
        s += std::exp(a[(o * l.len + k) * l.inner + i] - m);
      }
      lse[o * l.inner + i] = m + std::log(s);
    }
  }
  return lse;
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisLayout l = axis_layout("softmax", a, axis);
  const std::vector<double> lse = log_normalizers(a, l);
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t k = 0; k < l.len; ++k) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t idx = (o * l.len + k) * l.inner + i;
        out[idx] = std::exp(a[idx] - lse[o * l.inner + i]);
      }
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tape::record(
      a.shape(), std::move(out), {&a},
      [l, y](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto& ga = *gin[0];
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t i = 0; i < l.inner; ++i) {
            double dotgy = 0.0;
            for (std::size_t k = 0; k < l.len; ++k) {
              const std::size_t idx = (o * l.len + k) * l.inner + i;
              dotgy += g[idx] * (*y)[idx];
            }
            for (std::size_t k = 0; k < l.len; ++k) {
              const std::size_t idx = (o * l.len + k) * l.inner + i;
              ga[idx] += (*y)[idx] * (g[idx] - dotgy);
            }
          }
        }
      });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisLayout l = axis_layout("log_softmax", a, axis);
  const std::vector<double> lse = log_normalizers(a, l);
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t k = 0; k < l.len; ++k) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t idx = (o * l.len + k) * l.inner + i;
        out[idx] = a[idx] - lse[o * l.inner + i];
      }
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tape::record(
      a.shape(), std::move(out), {&a},
      [l, y](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto& ga = *gin[0];
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t i = 0; i < l.inner; ++i) {
            double gsum = 0.0;
            for (std::size_t k = 0; k < l.len; ++k) {
              gsum += g[(o * l.len + k) * l.inner + i];
            }
            for (std::size_t k = 0; k < l.len; ++k) {
              const std::size_t idx = (o * l.len + k) * l.inner + i;
              ga[idx] += g[idx] - std::exp((*y)[idx]) * gsum;
            }
          }
        }
      });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts.front();
  if (axis >= first.rank()) {
    shape_fail("concat", first.shape(), "axis out of range");
  }
  Shape shape = first.shape();
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank()) shape_fail("concat", first.shape(), p.shape());
    for (std::size_t d = 0; d < p.rank(); ++d) {
      if (d != axis && p.dim(d) != first.dim(d)) {
        shape_fail("concat", first.shape(), p.shape());
      }
    }
    shape[axis] += p.dim(axis);
  }
  const std::size_t outer = axis == 0 ? 1 : shape[0];
  const std::size_t inner_out = product(shape) / outer;
  std::vector<double> out(product(shape));
  std::vector<std::size_t> offsets;  // column offset of each part per row
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.size() / outer;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.values().begin() + o * chunk, chunk,
                  out.begin() + o * inner_out + off);
    }
    off += chunk;
  }
  std::vector<const Tensor*> inputs;
  std::vector<std::size_t> chunks;
  for (const Tensor& p : parts) {
    inputs.push_back(&p);
    chunks.push_back(p.size() / outer);
  }
  return Tape::record(
      shape, std::move(out), inputs,
      [offsets, chunks, outer, inner_out](std::span<const double> g,
                                          std::span<std::vector<double>*> gin) {
        for (std::size_t j = 0; j < gin.size(); ++j) {
          if (!gin[j]) continue;
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t c = 0; c < chunks[j]; ++c) {
              (*gin[j])[o * chunks[j] + c] += g[o * inner_out + offsets[j] + c];
            }
          }
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end) {
  const AxisLayout l = axis_layout("slice", a, axis);
  if (begin > end || end > l.len) {
    shape_fail("slice", a.shape(),
               "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                   ") out of bounds");
  }
  Shape shape = a.shape();
  shape[axis] = end - begin;
  const std::size_t width = end - begin;
  std::vector<double> out(l.outer * width * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t k = 0; k < width; ++k) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        out[(o * width + k) * l.inner + i] =
            a[(o * l.len + begin + k) * l.inner + i];
      }
    }
  }
  return Tape::record(
      shape, std::move(out), {&a},
      [l, begin, width](std::span<const double> g,
                        std::span<std::vector<double>*> gin) {
        auto& ga = *gin[0];
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t k = 0; k < width; ++k) {
            for (std::size_t i = 0; i < l.inner; ++i) {
              ga[(o * l.len + begin + k) * l.inner + i] +=
                  g[(o * width + k) * l.inner + i];
            }
          }
        }
      });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices) {
  if (a.rank() != 1 && a.rank() != 2) {
    shape_fail("gather_rows", a.shape(), "expected rank 1 or 2");
  }
  const std::size_t n = a.dim(0);
  const std::size_t width = a.rank() == 2 ? a.dim(1) : 1;
  for (std::size_t idx : indices) {
    if (idx >= n) shape_fail("gather_rows", a.shape(), "index out of range");
  }
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(a.values().begin() + indices[r] * width, width,
                out.begin() + r * width);
  }
  Shape shape = a.rank() == 2 ? Shape{indices.size(), width}
                              : Shape{indices.size()};
  return Tape::record(shape, std::move(out), {&a},
                      [indices, width](std::span<const double> g,
                                       std::span<std::vector<double>*> gin) {
                        auto& ga = *gin[0];
                        for (std::size_t r = 0; r < indices.size(); ++r) {
                          for (std::size_t c = 0; c < width; ++c) {
                            ga[indices[r] * width + c] += g[r * width + c];
                          }
                        }
                      });
}

// --------------------------------------------------------------- helpers

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || a.shape() != b.shape()) {
    shape_fail("dot", a.shape(), b.shape());
  }
  return sum(mul(a, b));
}

Tensor as_column(const Tensor& a) { return reshape(a, {a.size(), 1}); }

Tensor as_row(const Tensor& a) { return reshape(a, {1, a.size()}); }

Tensor repeat_rows(const Tensor& v, std::size_t count) {
  if (v.rank() != 1) shape_fail("repeat_rows", v.shape(), "expected a vector");
  return matmul(Tensor::filled({count, 1}, 1.0), as_row(v));
}

Tensor repeat_cols(const Tensor& v, std::size_t count) {
  if (v.rank() != 1) shape_fail("repeat_cols", v.shape(), "expected a vector");
  return matmul(as_column(v), Tensor::filled({1, count}, 1.0));
}

// ------------------------------------------------------------ grad check

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double h, double tol,
                           double atol) {
  if (!(h > 0)) throw ConfigError("grad_check: step must be positive");
  GradCheckResult res;
  {
    Tape tape;
    Tensor xl = tape.leaf(x);
    Tensor y = f(xl);
    if (!std::isfinite(y.item())) {
      throw NumericError("grad_check: non-finite value at x");
    }
    if (y.tracked()) {
      Gradients g = tape.backward(y);
      const Tensor gx = g.or_zero(xl);
      res.analytic.assign(gx.values().begin(), gx.values().end());
    } else {
      res.analytic.assign(x.size(), 0.0);
    }
  }
  std::vector<double> base(x.values().begin(), x.values().end());
  res.numeric.resize(x.size());
  res.pass = true;
  for (std::size_t j = 0; j < x.size(); ++j) {
    std::vector<double> probe = base;
    probe[j] = base[j] + h;
    const double fp = f(Tensor(x.shape(), probe)).item();
    probe[j] = base[j] - h;
    const double fm = f(Tensor(x.shape(), probe)).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite value at probe " +
                         std::to_string(j));
    }
    const double num = (fp - fm) / (2.0 * h);
    res.numeric[j] = num;
    const double a = res.analytic[j];
    const double denom = std::max({std::fabs(a), std::fabs(num), 1e-8});
    const double rel = std::fabs(a - num) / denom;
    if (std::fabs(a - num) <= atol) continue;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = j;
    }
  }
  res.pass = res.max_rel_error < tol;
  return res;
}

}  // namespace advtpp::ad
