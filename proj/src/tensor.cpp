#include "mmc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace mmc {

namespace {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::shared_ptr<TensorNode> make_node(Shape shape, const char* op) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data.resize(static_cast<std::size_t>(numel(n->shape)));
  n->op = op;
  return n;
}

void attach(const std::shared_ptr<TensorNode>& n,
            std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void(TensorNode&)> backprop) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
}

void ensure_grad(TensorNode& p) {
  if (p.grad.empty()) p.grad.assign(p.data.size(), 0.0);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a) + " and " + shape_str(b));
}

std::int64_t normalize_axis(const char* op, std::int64_t axis, std::int64_t rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw std::invalid_argument(std::string(op) + ": axis out of range for rank " +
                                std::to_string(rank));
  }
  return axis;
}

// Right-aligned broadcast of two shapes (trailing-dimension rule).
Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const std::int64_t ra = static_cast<std::int64_t>(a.size());
  const std::int64_t rb = static_cast<std::int64_t>(b.size());
  const std::int64_t r = std::max(ra, rb);
  Shape out(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
    const std::int64_t db = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[static_cast<std::size_t>(i)] = std::max(da, db);
  }
  return out;
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
  }
  return st;
}

// Strides of `src` viewed through the broadcast shape `out` (0 on expanded dims).
std::vector<std::int64_t> broadcast_strides(const Shape& src, const Shape& out) {
  auto st = row_major_strides(src);
  std::vector<std::int64_t> res(out.size(), 0);
  const std::int64_t off = static_cast<std::int64_t>(out.size() - src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    res[static_cast<std::size_t>(off) + i] = src[i] == 1 ? 0 : st[i];
  }
  return res;
}

// Sums `values` (shaped `from`) down to shape `to` (which must broadcast to
// `from`); used by backward passes of broadcasting ops.
std::vector<double> reduce_to(const std::vector<double>& values, const Shape& from,
                              const Shape& to) {
  if (from == to) return values;
  std::vector<double> out(static_cast<std::size_t>(numel(to)), 0.0);
  const auto to_st = broadcast_strides(to, from);
  const auto from_st = row_major_strides(from);
  const std::int64_t n = numel(from);
  std::vector<std::int64_t> idx(from.size(), 0);
  for (std::int64_t lin = 0; lin < n; ++lin) {
    std::int64_t rem = lin;
    std::int64_t off = 0;
    for (std::size_t d = 0; d < from.size(); ++d) {
      const std::int64_t id = rem / from_st[d];
      rem %= from_st[d];
      off += id * to_st[d];
    }
    out[static_cast<std::size_t>(off)] += values[static_cast<std::size_t>(lin)];
  }
  return out;
}

using BinFwd = double (*)(double, double);

template <BinFwd FWD, typename BwdFn>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, BwdFn bwd) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    auto n = make_node(sa, op);
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = FWD(da[i], db[i]);
    attach(n, {a.node(), b.node()}, [bwd](TensorNode& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) ensure_grad(pa);
      if (pb.requires_grad) ensure_grad(pb);
      for (std::size_t i = 0; i < self.data.size(); ++i) {
        double ga, gb;
        bwd(pa.data[i], pb.data[i], self.grad[i], ga, gb);
        if (pa.requires_grad) pa.grad[i] += ga;
        if (pb.requires_grad) pb.grad[i] += gb;
      }
    });
    return Tensor(n);
  }
  const Shape out = broadcast_shapes(op, sa, sb);
  auto n = make_node(out, op);
  const auto ast = broadcast_strides(sa, out);
  const auto bst = broadcast_strides(sb, out);
  const auto ost = row_major_strides(out);
  const std::int64_t total = numel(out);
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::int64_t lin = 0; lin < total; ++lin) {
    std::int64_t rem = lin, ia = 0, ib = 0;
    for (std::size_t d = 0; d < out.size(); ++d) {
      const std::int64_t id = rem / ost[d];
      rem %= ost[d];
      ia += id * ast[d];
      ib += id * bst[d];
    }
    n->data[static_cast<std::size_t>(lin)] =
        FWD(da[static_cast<std::size_t>(ia)], db[static_cast<std::size_t>(ib)]);
  }
  attach(n, {a.node(), b.node()},
         [bwd, ast, bst, ost, out](TensorNode& self) {
           auto& pa = *self.parents[0];
           auto& pb = *self.parents[1];
           if (pa.requires_grad) ensure_grad(pa);
           if (pb.requires_grad) ensure_grad(pb);
           const std::int64_t total = static_cast<std::int64_t>(self.data.size());
           for (std::int64_t lin = 0; lin < total; ++lin) {
             std::int64_t rem = lin, ia = 0, ib = 0;
             for (std::size_t d = 0; d < out.size(); ++d) {
               const std::int64_t id = rem / ost[d];
               rem %= ost[d];
               ia += id * ast[d];
               ib += id * bst[d];
             }
             double ga, gb;
             bwd(pa.data[static_cast<std::size_t>(ia)],
                 pb.data[static_cast<std::size_t>(ib)],
                 self.grad[static_cast<std::size_t>(lin)], ga, gb);
             if (pa.requires_grad) pa.grad[static_cast<std::size_t>(ia)] += ga;
             if (pb.requires_grad) pb.grad[static_cast<std::size_t>(ib)] += gb;
           }
         });
  return Tensor(n);
}

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const char* op, const Tensor& a, FwdFn fwd, BwdFn bwd) {
  auto n = make_node(a.shape(), op);
  const auto& da = a.data();
  for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = fwd(da[i]);
  attach(n, {a.node()}, [bwd](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      p.grad[i] += bwd(p.data[i], self.data[i]) * self.grad[i];
    }
  });
  return Tensor(n);
}

double fwd_add(double x, double y) { return x + y; }
double fwd_sub(double x, double y) { return x - y; }
double fwd_mul(double x, double y) { return x * y; }
double fwd_div(double x, double y) { return x / y; }

struct AxisSplit {
  std::int64_t outer, len, inner;
};

AxisSplit axis_split(const Shape& s, std::int64_t axis) {
  AxisSplit r{1, s[static_cast<std::size_t>(axis)], 1};
  for (std::int64_t i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  for (std::int64_t i = axis + 1; i < static_cast<std::int64_t>(s.size()); ++i) {
    r.inner *= s[static_cast<std::size_t>(i)];
  }
  return r;
}

Shape reduced_shape(const Shape& s, std::int64_t axis, bool keepdims) {
  Shape out = s;
  if (keepdims) {
    out[static_cast<std::size_t>(axis)] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out = {1};
  }
  return out;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ", ";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = make_node(std::move(shape), "leaf");
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = make_node(std::move(shape), "leaf");
  std::fill(n->data.begin(), n->data.end(), value);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("from_data: shape " + shape_str(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::eye(std::int64_t n) {
  Tensor t = zeros({n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    t.mutable_data()[static_cast<std::size_t>(i * n + i)] = 1.0;
  }
  return t;
}

double Tensor::value() const {
  if (size() != 1) {
    throw std::invalid_argument("value(): tensor of shape " + shape_str(shape()) +
                                " is not a scalar");
  }
  return node_->data[0];
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
  return node_->data[static_cast<std::size_t>(r * dim(1) + c)];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto node = make_node({m, n}, "matmul");
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = node->data.data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      double* crow = pc + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  attach(node, {a.node(), b.node()}, [m, k, n](TensorNode& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    const double* g = self.grad.data();
    if (A.requires_grad) {
      ensure_grad(A);
      // dA = G * B^T
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          if (gv == 0.0) continue;
          const double* brow = B.data.data() + 0;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            A.grad[static_cast<std::size_t>(i * k + kk)] += gv * brow[kk * n + j];
          }
        }
      }
    }
    if (B.requires_grad) {
      ensure_grad(B);
      // dB = A^T * G
      for (std::int64_t kk = 0; kk < k; ++kk) {
        for (std::int64_t i = 0; i < m; ++i) {
          const double av = A.data[static_cast<std::size_t>(i * k + kk)];
          if (av == 0.0) continue;
          const double* grow = g + i * n;
          for (std::int64_t j = 0; j < n; ++j) {
            B.grad[static_cast<std::size_t>(kk * n + j)] += av * grow[j];
          }
        }
      }
    }
  });
  return Tensor(node);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose: expected rank-2, got " +
                                shape_str(a.shape()));
  }
  const std::int64_t m = a.dim(0), n = a.dim(1);
  auto node = make_node({n, m}, "transpose");
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      node->data[static_cast<std::size_t>(j * m + i)] =
          a.data()[static_cast<std::size_t>(i * n + j)];
    }
  }
  attach(node, {a.node()}, [m, n](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        p.grad[static_cast<std::size_t>(i * n + j)] +=
            self.grad[static_cast<std::size_t>(j * m + i)];
      }
    }
  });
  return Tensor(node);
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  return binary_op<fwd_add>("add", a, b,
                            [](double, double, double g, double& ga, double& gb) {
                              ga = g;
                              gb = g;
                            });
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  return binary_op<fwd_sub>("sub", a, b,
                            [](double, double, double g, double& ga, double& gb) {
                              ga = g;
                              gb = -g;
                            });
}

Tensor operator*(const Tensor& a, const Tensor& b) {
  return binary_op<fwd_mul>("mul", a, b,
                            [](double x, double y, double g, double& ga, double& gb) {
                              ga = g * y;
                              gb = g * x;
                            });
}

Tensor operator/(const Tensor& a, const Tensor& b) {
  return binary_op<fwd_div>("div", a, b,
                            [](double x, double y, double g, double& ga, double& gb) {
                              ga = g / y;
                              gb = -g * x / (y * y);
                            });
}

Tensor operator-(const Tensor& a) {
  return unary_op("neg", a, [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

Tensor operator+(const Tensor& a, double s) { return a + Tensor::scalar(s); }
Tensor operator-(const Tensor& a, double s) { return a - Tensor::scalar(s); }
Tensor operator*(const Tensor& a, double s) { return a * Tensor::scalar(s); }
Tensor operator/(const Tensor& a, double s) { return a / Tensor::scalar(s); }
Tensor operator+(double s, const Tensor& a) { return Tensor::scalar(s) + a; }
Tensor operator-(double s, const Tensor& a) { return Tensor::scalar(s) - a; }
Tensor operator*(double s, const Tensor& a) { return Tensor::scalar(s) * a; }
Tensor operator/(double s, const Tensor& a) { return Tensor::scalar(s) / a; }

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op("sigmoid", a,
                  [](double x) {
                    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                    : std::exp(x) / (1.0 + std::exp(x));
                  },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& a, double c) {
  return unary_op("clamp_min", a, [c](double x) { return x > c ? x : c; },
                  [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a, std::int64_t axis, bool keepdims) {
  axis = normalize_axis("sum", axis, a.rank());
  const auto sp = axis_split(a.shape(), axis);
  auto node = make_node(reduced_shape(a.shape(), axis, keepdims), "sum");
  const auto& d = a.data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      double acc = 0.0;
      for (std::int64_t l = 0; l < sp.len; ++l) {
        acc += d[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)];
      }
      node->data[static_cast<std::size_t>(o * sp.inner + i)] = acc;
    }
  }
  attach(node, {a.node()}, [sp](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const double g = self.grad[static_cast<std::size_t>(o * sp.inner + i)];
        for (std::int64_t l = 0; l < sp.len; ++l) {
          p.grad[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)] += g;
        }
      }
    }
  });
  return Tensor(node);
}

Tensor mean(const Tensor& a, std::int64_t axis, bool keepdims) {
  axis = normalize_axis("mean", axis, a.rank());
  const double len = static_cast<double>(a.dim(axis));
  return sum(a, axis, keepdims) / len;
}

Tensor logsumexp(const Tensor& a, std::int64_t axis, bool keepdims) {
  axis = normalize_axis("logsumexp", axis, a.rank());
  const auto sp = axis_split(a.shape(), axis);
  auto node = make_node(reduced_shape(a.shape(), axis, keepdims), "logsumexp");
  const auto& d = a.data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      double m = -HUGE_VAL;
      for (std::int64_t l = 0; l < sp.len; ++l) {
        m = std::max(m, d[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)]);
      }
      double acc = 0.0;
      for (std::int64_t l = 0; l < sp.len; ++l) {
        acc += std::exp(d[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)] - m);
      }
      node->data[static_cast<std::size_t>(o * sp.inner + i)] = m + std::log(acc);
    }
  }
  attach(node, {a.node()}, [sp](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::size_t oi = static_cast<std::size_t>(o * sp.inner + i);
        const double y = self.data[oi];
        const double g = self.grad[oi];
        for (std::int64_t l = 0; l < sp.len; ++l) {
          const std::size_t pi = static_cast<std::size_t>((o * sp.len + l) * sp.inner + i);
          p.grad[pi] += g * std::exp(p.data[pi] - y);
        }
      }
    }
  });
  return Tensor(node);
}

Tensor sum_all(const Tensor& a) {
  Tensor r = a.rank() == 1 ? a : reshape(a, {a.size()});
  return sum(r, 0);
}

Tensor mean_all(const Tensor& a) {
  return sum_all(a) / static_cast<double>(a.size());
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  const Shape check = broadcast_shapes("broadcast_to", a.shape(), shape);
  if (check != shape) shape_error("broadcast_to", a.shape(), shape);
  auto node = make_node(shape, "broadcast_to");
  const auto ast = broadcast_strides(a.shape(), shape);
  const auto ost = row_major_strides(shape);
  const std::int64_t total = numel(shape);
  const auto& d = a.data();
  for (std::int64_t lin = 0; lin < total; ++lin) {
    std::int64_t rem = lin, ia = 0;
    for (std::size_t dd = 0; dd < shape.size(); ++dd) {
      const std::int64_t id = rem / ost[dd];
      rem %= ost[dd];
      ia += id * ast[dd];
    }
    node->data[static_cast<std::size_t>(lin)] = d[static_cast<std::size_t>(ia)];
  }
  Shape from = shape;
  attach(node, {a.node()}, [from](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    auto red = reduce_to(self.grad, from, p.shape);
    for (std::size_t i = 0; i < red.size(); ++i) p.grad[i] += red[i];
  });
  return Tensor(node);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    shape_error("reshape", a.shape(), shape);
  }
  auto node = make_node(shape, "reshape");
  node->data = a.data();
  attach(node, {a.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
  return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::int64_t rank = parts[0].rank();
  axis = normalize_axis("concat", axis, rank);
  Shape out = parts[0].shape();
  std::int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) shape_error("concat", parts[0].shape(), p.shape());
    for (std::int64_t d = 0; d < rank; ++d) {
      if (d != axis && p.dim(d) != out[static_cast<std::size_t>(d)]) {
        shape_error("concat", parts[0].shape(), p.shape());
      }
    }
    total_axis += p.dim(axis);
  }
  out[static_cast<std::size_t>(axis)] = total_axis;
  auto node = make_node(out, "concat");
  const auto sp = axis_split(out, axis);
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::vector<std::int64_t> lens;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t plen = p.dim(axis);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t l = 0; l < plen; ++l) {
        const double* src = p.data().data() + (o * plen + l) * sp.inner;
        double* dst = node->data.data() + (o * sp.len + off + l) * sp.inner;
        std::copy(src, src + sp.inner, dst);
      }
    }
    parents.push_back(p.node());
    lens.push_back(plen);
    off += plen;
  }
  attach(node, parents, [sp, lens](TensorNode& self) {
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      auto& p = *self.parents[pi];
      const std::int64_t plen = lens[pi];
      if (p.requires_grad) {
        ensure_grad(p);
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          for (std::int64_t l = 0; l < plen; ++l) {
            const double* src = self.grad.data() + (o * sp.len + off + l) * sp.inner;
            double* dst = p.grad.data() + (o * plen + l) * sp.inner;
            for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
          }
        }
      }
      off += plen;
    }
  });
  return Tensor(node);
}

Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t len) {
  axis = normalize_axis("slice", axis, a.rank());
  if (start < 0 || len < 0 || start + len > a.dim(axis)) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(a.shape()));
  }
  Shape out = a.shape();
  out[static_cast<std::size_t>(axis)] = len;
  auto node = make_node(out, "slice");
  const auto sp = axis_split(a.shape(), axis);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t l = 0; l < len; ++l) {
      const double* src = a.data().data() + (o * sp.len + start + l) * sp.inner;
      double* dst = node->data.data() + (o * len + l) * sp.inner;
      std::copy(src, src + sp.inner, dst);
    }
  }
  attach(node, {a.node()}, [sp, start, len](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t l = 0; l < len; ++l) {
        const double* src = self.grad.data() + (o * len + l) * sp.inner;
        double* dst = p.grad.data() + (o * sp.len + start + l) * sp.inner;
        for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return Tensor(node);
}

Tensor index_rows(const Tensor& a, const std::vector<std::int64_t>& rows) {
  if (a.rank() < 1) throw std::invalid_argument("index_rows: rank-0 input");
  const std::int64_t inner = a.size() / a.dim(0);
  Shape out = a.shape();
  out[0] = static_cast<std::int64_t>(rows.size());
  auto node = make_node(out, "index_rows");
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= a.dim(0)) {
      throw std::invalid_argument("index_rows: row " + std::to_string(rows[r]) +
                                  " out of range for " + shape_str(a.shape()));
    }
    const double* src = a.data().data() + rows[r] * inner;
    std::copy(src, src + inner, node->data.data() + static_cast<std::int64_t>(r) * inner);
  }
  attach(node, {a.node()}, [rows, inner](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double* src = self.grad.data() + static_cast<std::int64_t>(r) * inner;
      double* dst = p.grad.data() + rows[r] * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  });
  return Tensor(node);
}

Tensor gather_cols(const Tensor& a, const std::vector<std::int64_t>& cols) {
  if (a.rank() != 2 || static_cast<std::int64_t>(cols.size()) != a.dim(0)) {
    throw std::invalid_argument("gather_cols: need rank-2 input with one index per row, got " +
                                shape_str(a.shape()) + " and " +
                                std::to_string(cols.size()) + " indices");
  }
  const std::int64_t n = a.dim(0), c = a.dim(1);
  auto node = make_node({n, 1}, "gather_cols");
  for (std::int64_t i = 0; i < n; ++i) {
    if (cols[static_cast<std::size_t>(i)] < 0 || cols[static_cast<std::size_t>(i)] >= c) {
      throw std::invalid_argument("gather_cols: column index out of range");
    }
    node->data[static_cast<std::size_t>(i)] =
        a.data()[static_cast<std::size_t>(i * c + cols[static_cast<std::size_t>(i)])];
  }
  attach(node, {a.node()}, [cols, c](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(cols[i])] +=
          self.grad[i];
    }
  });
  return Tensor(node);
}

Tensor diag_embed(const Tensor& v) {
  if (v.rank() != 1) {
    throw std::invalid_argument("diag_embed: expected rank-1, got " +
                                shape_str(v.shape()));
  }
  const std::int64_t d = v.dim(0);
  auto node = make_node({d, d}, "diag_embed");
  for (std::int64_t i = 0; i < d; ++i) {
    node->data[static_cast<std::size_t>(i * d + i)] = v.data()[static_cast<std::size_t>(i)];
  }
  attach(node, {v.node()}, [d](TensorNode& self) {
    auto& p = *self.parents[0];
    ensure_grad(p);
    for (std::int64_t i = 0; i < d; ++i) {
      p.grad[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i * d + i)];
    }
  });
  return Tensor(node);
}

Tensor softmax(const Tensor& a, std::int64_t axis) {
  return exp(a - logsumexp(a, axis, /*keepdims=*/true));
}

namespace {

// Ordered record of the reverse pass: parents always precede their node,
// so one reverse sweep visits each node exactly once.
struct Tape {
  std::vector<TensorNode*> nodes;
};

Tape build_tape(TensorNode* root) {
  Tape tape;
  std::unordered_set<TensorNode*> done;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (done.count(node)) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next].get();
      ++next;
      if (!done.count(p) && p->requires_grad) stack.emplace_back(p, 0);
    } else {
      done.insert(node);
      tape.nodes.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

}  // namespace

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  Tape tape = build_tape(loss.node().get());
  // Intermediate grads restart at zero each pass; leaf grads accumulate.
  for (TensorNode* n : tape.nodes) {
    if (n->backprop) n->grad.assign(n->data.size(), 0.0);
  }
  loss.node()->grad.assign(1, 1.0);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) n->backprop(*n);
  }
  // Consume the tape: release the recorded graph, keep values and grads.
  for (TensorNode* n : tape.nodes) {
    if (n->backprop) {
      n->backprop = nullptr;
      n->parents.clear();
    }
  }
}

Adam::Adam(std::vector<Tensor> params, AdamOptions opt)
    : params_(std::move(params)), opt_(opt) {
  slots_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.assign(params_[i].data().size(), 0.0);
    slots_[i].v.assign(params_[i].data().size(), 0.0);
  }
}

int Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  int skipped = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    bool finite = true;
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        finite = false;
        break;
      }
    }
    if (!finite) {
      ++skipped;
      continue;
    }
    auto& d = p.mutable_data();
    auto& m = slots_[i].m;
    auto& v = slots_[i].v;
    for (std::size_t j = 0; j < d.size(); ++j) {
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
      v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      d[j] -= opt_.lr * mh / (std::sqrt(vh) + opt_.eps);
    }
  }
  return skipped;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace mmc
