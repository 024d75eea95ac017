#include "mareid/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mareid::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

int norm_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis out of range");
  return a;
}

std::vector<long> strides_of(const Shape& s) {
  std::vector<long> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Returns grad span of a parent, or empty when it does not need one.
std::span<double> pgrad(Node& out, std::size_t i) {
  Node& p = *out.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

struct Broadcast {
  Shape out;
  std::vector<long> sa, sb;  // per out-dim strides into a / b (0 when broadcast)
  bool same = false;

  Broadcast(const Shape& a, const Shape& b) {
    if (a == b) {
      out = a;
      same = true;
      return;
    }
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    sa.assign(r, 0);
    sb.assign(r, 0);
    auto st_a = strides_of(a);
    auto st_b = strides_of(b);
    for (std::size_t i = 0; i < r; ++i) {
      const long ia = static_cast<long>(i) - static_cast<long>(r - a.size());
      const long ib = static_cast<long>(i) - static_cast<long>(r - b.size());
      const int da = ia >= 0 ? a[ia] : 1;
      const int db = ib >= 0 ? b[ib] : 1;
      if (da != db && da != 1 && db != 1)
        throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
      out[i] = std::max(da, db);
      if (ia >= 0 && da != 1) sa[i] = st_a[ia];
      if (ib >= 0 && db != 1) sb[i] = st_b[ib];
    }
  }

  template <class F>
  void for_each(F&& f) const {
    const std::size_t n = numel(out);
    if (same) {
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    }
    const std::size_t r = out.size();
    std::vector<int> idx(r, 0);
    long oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
      f(i, static_cast<std::size_t>(oa), static_cast<std::size_t>(ob));
      for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
        if (++idx[d] < out[d]) {
          oa += sa[d];
          ob += sb[d];
          break;
        }
        oa -= sa[d] * (out[d] - 1);
        ob -= sb[d] * (out[d] - 1);
        idx[d] = 0;
      }
    }
  }
};

template <class Fwd, class Bwd>
Var binary(const Var& a, const Var& b, Fwd fwd, Bwd bwd) {
  Broadcast bc(a.shape(), b.shape());
  Buffer out(numel(bc.out));
  auto av = a.value();
  auto bv = b.value();
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  return make_result(bc.out, std::move(out), {a, b}, [bc, bwd](Node& o) {
    auto ga = pgrad(o, 0);
    auto gb = pgrad(o, 1);
    const auto& av = o.parents[0]->value;
    const auto& bv = o.parents[1]->value;
    const auto& g = o.grad;
    bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
      double da = 0, db = 0;
      bwd(av[ia], bv[ib], o.value[i], g[i], da, db);
      if (!ga.empty()) ga[ia] += da;
      if (!gb.empty()) gb[ib] += db;
    });
  });
}

// d(out)/d(in) expressed through input x and output y.
template <class Fwd, class Dy>
Var unary(const Var& a, Fwd fwd, Dy dy) {
  auto av = a.value();
  Buffer out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [dy](Node& o) {
    auto ga = pgrad(o, 0);
    if (ga.empty()) return;
    const auto& x = o.parents[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += o.grad[i] * dy(x[i], o.value[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::span<double> Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Var Var::constant(Shape shape, std::vector<double> values) {
  if (ag::numel(shape) != values.size())
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(values.begin(), values.end());
  return Var(std::move(n));
}

Var Var::constant(Shape shape, double fill) {
  const std::size_t n = ag::numel(shape);
  return constant(std::move(shape), std::vector<double>(n, fill));
}

Var Var::parameter(Shape shape, std::vector<double> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.n_->requires_grad = true;
  return v;
}

int Var::dim(int i) const { return n_->shape[norm_axis(i, rank())]; }

double Var::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return n_->value[0];
}

double Var::at(std::initializer_list<int> idx) const {
  if (idx.size() != shape().size()) throw ShapeError("at(): rank mismatch");
  auto st = strides_of(shape());
  std::size_t off = 0;
  int d = 0;
  for (int i : idx) off += static_cast<std::size_t>(i) * st[d++];
  return n_->value.at(off);
}

Var Var::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = shape();
  n->value = n_->value;
  return Var(std::move(n));
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_result(Shape shape, Buffer value, std::vector<Var> inputs,
                std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      n->requires_grad = true;
      n->is_leaf = false;
      for (auto& in : inputs) n->parents.push_back(in.defined() ? in.ptr() : std::make_shared<Node>());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined() || !root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !p->is_leaf && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  auto g = root.node()->grad_buffer();
  std::fill(g.begin(), g.end(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// --- elementwise ---

Var add(const Var& a, const Var& b) {
  return binary(a, b, [](double x, double y) { return x + y; },
                [](double, double, double, double g, double& da, double& db) { da = g; db = g; });
}
Var sub(const Var& a, const Var& b) {
  return binary(a, b, [](double x, double y) { return x - y; },
                [](double, double, double, double g, double& da, double& db) { da = g; db = -g; });
}
Var mul(const Var& a, const Var& b) {
  return binary(a, b, [](double x, double y) { return x * y; },
                [](double x, double y, double, double g, double& da, double& db) { da = g * y; db = g * x; });
}
Var div(const Var& a, const Var& b) {
  return binary(a, b, [](double x, double y) { return x / y; },
                [](double x, double y, double, double g, double& da, double& db) {
                  da = g / y;
                  db = -g * x / (y * y);
                });
}

Var neg(const Var& a) { return scale(a, -1.0); }
Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}
Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}
Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
Var gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}
Var abs(const Var& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}
Var clamp_min(const Var& a, double lo) {
  return unary(a, [lo](double x) { return x < lo ? lo : x; }, [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

// --- reductions ---

Var sum(const Var& a) {
  double s = 0;
  for (double v : a.value()) s += v;
  return make_result({}, {s}, {a}, [](Node& o) {
    auto ga = pgrad(o, 0);
    for (double& g : ga) g += o.grad[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var sum(const Var& a, int axis, bool keepdim) {
  const int ax = norm_axis(axis, a.rank());
  const auto& s = a.shape();
  long outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= s[i];
  const int n = s[ax];
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i) {
    if (i != ax) out_shape.push_back(s[i]);
    else if (keepdim) out_shape.push_back(1);
  }
  Buffer out(outer * inner, 0.0);
  auto av = a.value();
  for (long o = 0; o < outer; ++o)
    for (int k = 0; k < n; ++k) {
      const double* src = av.data() + (o * n + k) * inner;
      double* dst = out.data() + o * inner;
      for (long i = 0; i < inner; ++i) dst[i] += src[i];
    }
  return make_result(out_shape, std::move(out), {a}, [outer, inner, n](Node& o) {
    auto ga = pgrad(o, 0);
    for (long q = 0; q < outer; ++q)
      for (int k = 0; k < n; ++k) {
        double* dst = ga.data() + (q * n + k) * inner;
        const double* src = o.grad.data() + q * inner;
        for (long i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
}

Var mean(const Var& a, int axis, bool keepdim) {
  return scale(sum(a, axis, keepdim), 1.0 / a.dim(axis));
}

// --- shape ---

Var reshape(const Var& a, Shape shape) {
  long known = 1;
  int infer = -1;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (shape[i] == -1) infer = i;
    else known *= shape[i];
  }
  if (infer >= 0) shape[infer] = static_cast<int>(a.numel() / known);
  if (numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Buffer v(a.value().begin(), a.value().end());
  return make_result(std::move(shape), std::move(v), {a}, [](Node& o) {
    auto ga = pgrad(o, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

Var permute(const Var& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  const auto in_st = strides_of(a.shape());
  Shape out_shape(r);
  std::vector<long> st(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = a.shape()[perm[i]];
    st[i] = in_st[perm[i]];
  }
  // src_index[i] = flat input offset of output element i
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<int> idx(r, 0);
    long off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (*src)[i] = static_cast<std::size_t>(off);
      for (int d = r - 1; d >= 0; --d) {
        if (++idx[d] < out_shape[d]) {
          off += st[d];
          break;
        }
        off -= st[d] * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  Buffer out(n);
  auto av = a.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[(*src)[i]];
  return make_result(out_shape, std::move(out), {a}, [src](Node& o) {
    auto ga = pgrad(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[(*src)[i]] += o.grad[i];
  });
}

Var transpose(const Var& a, int d0, int d1) {
  std::vector<int> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[norm_axis(d0, a.rank())], perm[norm_axis(d1, a.rank())]);
  return permute(a, perm);
}

Var slice(const Var& a, int axis, int start, int length) {
  const int ax = norm_axis(axis, a.rank());
  const auto& s = a.shape();
  if (start < 0 || length < 0 || start + length > s[ax]) throw ShapeError("slice out of range");
  long outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= s[i];
  const int n = s[ax];
  Shape out_shape = s;
  out_shape[ax] = length;
  Buffer out(outer * length * inner);
  auto av = a.value();
  for (long o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * n + start) * inner, length * inner, out.data() + o * length * inner);
  return make_result(out_shape, std::move(out), {a}, [outer, inner, n, start, length](Node& o) {
    auto ga = pgrad(o, 0);
    for (long q = 0; q < outer; ++q) {
      double* dst = ga.data() + (q * n + start) * inner;
      const double* src = o.grad.data() + q * length * inner;
      for (long i = 0; i < length * inner; ++i) dst[i] += src[i];
    }
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int r = parts[0].rank();
  const int ax = norm_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) throw ShapeError("concat: shape mismatch");
    out_shape[ax] += p.shape()[ax];
  }
  long outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[i];
  for (int i = ax + 1; i < r; ++i) inner *= out_shape[i];
  std::vector<int> sizes;
  for (const auto& p : parts) sizes.push_back(p.shape()[ax]);
  const int total = out_shape[ax];
  Buffer out(numel(out_shape));
  int off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto pv = parts[pi].value();
    for (long o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * sizes[pi] * inner, sizes[pi] * inner,
                  out.data() + (o * total + off) * inner);
    off += sizes[pi];
  }
  return make_result(out_shape, std::move(out), parts, [outer, inner, sizes, total](Node& o) {
    int off = 0;
    for (std::size_t pi = 0; pi < sizes.size(); ++pi) {
      auto gp = pgrad(o, pi);
      if (!gp.empty())
        for (long q = 0; q < outer; ++q) {
          const double* src = o.grad.data() + (q * total + off) * inner;
          double* dst = gp.data() + q * sizes[pi] * inner;
          for (long i = 0; i < sizes[pi] * inner; ++i) dst[i] += src[i];
        }
      off += sizes[pi];
    }
  });
}

Var index_select(const Var& a, int axis, const std::vector<int>& indices) {
  const int ax = norm_axis(axis, a.rank());
  const auto& s = a.shape();
  long outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= s[i];
  const int n = s[ax];
  for (int i : indices)
    if (i < 0 || i >= n) throw ShapeError("index_select: index out of range");
  const int m = static_cast<int>(indices.size());
  Shape out_shape = s;
  out_shape[ax] = m;
  Buffer out(outer * m * inner);
  auto av = a.value();
  for (long o = 0; o < outer; ++o)
    for (int j = 0; j < m; ++j)
      std::copy_n(av.data() + (o * n + indices[j]) * inner, inner, out.data() + (o * m + j) * inner);
  return make_result(out_shape, std::move(out), {a}, [outer, inner, n, m, indices](Node& o) {
    auto ga = pgrad(o, 0);
    for (long q = 0; q < outer; ++q)
      for (int j = 0; j < m; ++j) {
        double* dst = ga.data() + (q * n + indices[j]) * inner;
        const double* src = o.grad.data() + (q * m + j) * inner;
        for (long i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
}

// --- linear algebra ---

Var matmul(const Var& a, const Var& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2");
  const int M = a.dim(-2), K = a.dim(-1), N = b.dim(-1);
  if (b.dim(-2) != K) throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const long batch = static_cast<long>(a.numel() / (static_cast<std::size_t>(M) * K));
  const bool b_shared = b.rank() == 2;
  if (!b_shared) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw ShapeError("matmul batch dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(N);
  Buffer out(static_cast<std::size_t>(batch) * M * N);
  auto av = a.value();
  auto bv = b.value();
  if (b_shared) {
    MapMat(out.data(), batch * M, N).noalias() = CMapMat(av.data(), batch * M, K) * CMapMat(bv.data(), K, N);
  } else {
    for (long i = 0; i < batch; ++i)
      MapMat(out.data() + i * M * N, M, N).noalias() =
          CMapMat(av.data() + i * M * K, M, K) * CMapMat(bv.data() + i * K * N, K, N);
  }
  return make_result(out_shape, std::move(out), {a, b}, [batch, M, K, N, b_shared](Node& o) {
    auto ga = pgrad(o, 0);
    auto gb = pgrad(o, 1);
    const auto& av = o.parents[0]->value;
    const auto& bv = o.parents[1]->value;
    if (b_shared) {
      CMapMat G(o.grad.data(), batch * M, N);
      if (!ga.empty()) MapMat(ga.data(), batch * M, K).noalias() += G * CMapMat(bv.data(), K, N).transpose();
      if (!gb.empty()) MapMat(gb.data(), K, N).noalias() += CMapMat(av.data(), batch * M, K).transpose() * G;
      return;
    }
    for (long i = 0; i < batch; ++i) {
      CMapMat G(o.grad.data() + i * M * N, M, N);
      if (!ga.empty())
        MapMat(ga.data() + i * M * K, M, K).noalias() += G * CMapMat(bv.data() + i * K * N, K, N).transpose();
      if (!gb.empty())
        MapMat(gb.data() + i * K * N, K, N).noalias() += CMapMat(av.data() + i * M * K, M, K).transpose() * G;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const int in = x.dim(-1);
  const int out = w.dim(0);
  if (w.dim(1) != in) throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const long rows = static_cast<long>(x.numel() / in);
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Buffer y(static_cast<std::size_t>(rows) * out);
  MapMat Y(y.data(), rows, out);
  Y.noalias() = CMapMat(x.value().data(), rows, in) * CMapMat(w.value().data(), out, in).transpose();
  const bool has_b = b.defined();
  if (has_b) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), out);
  std::vector<Var> inputs{x, w};
  if (has_b) inputs.push_back(b);
  return make_result(out_shape, std::move(y), inputs, [rows, in, out, has_b](Node& o) {
    CMapMat G(o.grad.data(), rows, out);
    auto gx = pgrad(o, 0);
    auto gw = pgrad(o, 1);
    if (!gx.empty()) MapMat(gx.data(), rows, in).noalias() += G * CMapMat(o.parents[1]->value.data(), out, in);
    if (!gw.empty()) MapMat(gw.data(), out, in).noalias() += G.transpose() * CMapMat(o.parents[0]->value.data(), rows, in);
    if (has_b) {
      auto gb = pgrad(o, 2);
      if (!gb.empty()) Eigen::Map<Eigen::RowVectorXd>(gb.data(), out) += G.colwise().sum();
    }
  });
}

// --- normalization ---

Var softmax(const Var& a, int axis) {
  const int ax = norm_axis(axis, a.rank());
  const auto& s = a.shape();
  long outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= s[i];
  const int n = s[ax];
  Buffer out(a.numel());
  auto av = a.value();
  for (long o = 0; o < outer; ++o)
    for (long i = 0; i < inner; ++i) {
      const long base = o * n * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < n; ++k) mx = std::max(mx, av[base + k * inner]);
      double z = 0;
      for (int k = 0; k < n; ++k) z += (out[base + k * inner] = std::exp(av[base + k * inner] - mx));
      for (int k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  return make_result(s, std::move(out), {a}, [outer, inner, n](Node& o) {
    auto ga = pgrad(o, 0);
    for (long q = 0; q < outer; ++q)
      for (long i = 0; i < inner; ++i) {
        const long base = q * n * inner + i;
        double dot = 0;
        for (int k = 0; k < n; ++k) dot += o.grad[base + k * inner] * o.value[base + k * inner];
        for (int k = 0; k < n; ++k)
          ga[base + k * inner] += o.value[base + k * inner] * (o.grad[base + k * inner] - dot);
      }
  });
}

Var log_softmax(const Var& a, int axis) {
  const int ax = norm_axis(axis, a.rank());
  const auto& s = a.shape();
  long outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= s[i];
  const int n = s[ax];
  Buffer out(a.numel());
  auto av = a.value();
  for (long o = 0; o < outer; ++o)
    for (long i = 0; i < inner; ++i) {
      const long base = o * n * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < n; ++k) mx = std::max(mx, av[base + k * inner]);
      double z = 0;
      for (int k = 0; k < n; ++k) z += std::exp(av[base + k * inner] - mx);
      const double lz = mx + std::log(z);
      for (int k = 0; k < n; ++k) out[base + k * inner] = av[base + k * inner] - lz;
    }
  return make_result(s, std::move(out), {a}, [outer, inner, n](Node& o) {
    auto ga = pgrad(o, 0);
    for (long q = 0; q < outer; ++q)
      for (long i = 0; i < inner; ++i) {
        const long base = q * n * inner + i;
        double gs = 0;
        for (int k = 0; k < n; ++k) gs += o.grad[base + k * inner];
        for (int k = 0; k < n; ++k)
          ga[base + k * inner] += o.grad[base + k * inner] - std::exp(o.value[base + k * inner]) * gs;
      }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int d = x.dim(-1);
  if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d))
    throw ShapeError("layer_norm: affine size mismatch");
  const long rows = static_cast<long>(x.numel() / d);
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  Buffer y(x.numel());
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto rstd = std::make_shared<Buffer>(rows);
  for (long r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(y), {x, gamma, beta}, [rows, d, xhat, rstd](Node& o) {
    auto gx = pgrad(o, 0);
    auto gg = pgrad(o, 1);
    auto gb = pgrad(o, 2);
    const auto& gv = o.parents[1]->value;
    for (long r = 0; r < rows; ++r) {
      const double* g = o.grad.data() + r * d;
      const double* h = xhat->data() + r * d;
      if (!gg.empty())
        for (int j = 0; j < d; ++j) gg[j] += g[j] * h[j];
      if (!gb.empty())
        for (int j = 0; j < d; ++j) gb[j] += g[j];
      if (!gx.empty()) {
        double m1 = 0, m2 = 0;
        for (int j = 0; j < d; ++j) {
          const double dh = g[j] * gv[j];
          m1 += dh;
          m2 += dh * h[j];
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) gx[r * d + j] += (*rstd)[r] * (g[j] * gv[j] - m1 - h[j] * m2);
      }
    }
  });
}

// --- convolution ---

namespace {

struct ConvGeom {
  int N, C, H, W, O, kh, kw, stride, pad, Ho, Wo;
  long patch() const { return static_cast<long>(C) * kh * kw; }
  long cols() const { return static_cast<long>(N) * Ho * Wo; }
};

// col: [C*kh*kw, N*Ho*Wo]
void im2col(const ConvGeom& g, const double* x, double* col) {
  const long ncol = g.cols();
  for (int c = 0; c < g.C; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((static_cast<long>(c) * g.kh + ky) * g.kw + kx) * ncol;
        for (int n = 0; n < g.N; ++n) {
          const double* xc = x + (static_cast<long>(n) * g.C + c) * g.H * g.W;
          double* dst = row + static_cast<long>(n) * g.Ho * g.Wo;
          for (int oy = 0; oy < g.Ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            for (int ox = 0; ox < g.Wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[oy * g.Wo + ox] = (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) ? xc[iy * g.W + ix] : 0.0;
            }
          }
        }
      }
}

void col2im(const ConvGeom& g, const double* col, double* x) {
  const long ncol = g.cols();
  for (int c = 0; c < g.C; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((static_cast<long>(c) * g.kh + ky) * g.kw + kx) * ncol;
        for (int n = 0; n < g.N; ++n) {
          double* xc = x + (static_cast<long>(n) * g.C + c) * g.H * g.W;
          const double* src = row + static_cast<long>(n) * g.Ho * g.Wo;
          for (int oy = 0; oy < g.Ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.H) continue;
            for (int ox = 0; ox < g.Wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.W) xc[iy * g.W + ix] += src[oy * g.Wo + ox];
            }
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects NCHW input and OCKK weight");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0};
  if (w.dim(1) != g.C) throw ShapeError("conv2d: channel mismatch");
  g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
  if (g.Ho < 1 || g.Wo < 1) throw ShapeError("conv2d: input too small");
  const long P = g.patch(), L = g.cols(), HWo = static_cast<long>(g.Ho) * g.Wo;
  auto col = std::make_shared<Buffer>(P * L);
  im2col(g, x.value().data(), col->data());
  RowMat Y = CMapMat(w.value().data(), g.O, P) * CMapMat(col->data(), P, L);  // [O, N*HWo]
  Buffer out(static_cast<std::size_t>(g.N) * g.O * HWo);
  const bool has_b = b.defined();
  for (int n = 0; n < g.N; ++n)
    for (int o = 0; o < g.O; ++o) {
      const double bias = has_b ? b.value()[o] : 0.0;
      const double* src = Y.data() + static_cast<long>(o) * L + n * HWo;
      double* dst = out.data() + (static_cast<long>(n) * g.O + o) * HWo;
      for (long i = 0; i < HWo; ++i) dst[i] = src[i] + bias;
    }
  std::vector<Var> inputs{x, w};
  if (has_b) inputs.push_back(b);
  return make_result({g.N, g.O, g.Ho, g.Wo}, std::move(out), inputs, [g, col, has_b](Node& o) {
    const long P = g.patch(), L = g.cols(), HWo = static_cast<long>(g.Ho) * g.Wo;
    RowMat G(g.O, L);  // gradient rearranged to [O, N*HWo]
    for (int n = 0; n < g.N; ++n)
      for (int oc = 0; oc < g.O; ++oc)
        std::copy_n(o.grad.data() + (static_cast<long>(n) * g.O + oc) * HWo, HWo, G.data() + oc * L + n * HWo);
    auto gx = pgrad(o, 0);
    auto gw = pgrad(o, 1);
    if (!gw.empty()) MapMat(gw.data(), g.O, P).noalias() += G * CMapMat(col->data(), P, L).transpose();
    if (has_b) {
      auto gb = pgrad(o, 2);
      if (!gb.empty())
        for (int oc = 0; oc < g.O; ++oc) gb[oc] += G.row(oc).sum();
    }
    if (!gx.empty()) {
      RowMat dcol = CMapMat(o.parents[1]->value.data(), g.O, P).transpose() * G;
      col2im(g, dcol.data(), gx.data());
    }
  });
}

// --- sampling ---

Var grid_sample(const Var& feat, const Var& grid) {
  if (feat.rank() != 4 || grid.rank() != 4 || grid.dim(3) != 2 || grid.dim(0) != feat.dim(0))
    throw ShapeError("grid_sample: feat " + shape_str(feat.shape()) + " grid " + shape_str(grid.shape()));
  const int N = feat.dim(0), h = feat.dim(1), w = feat.dim(2), C = feat.dim(3);
  const int ho = grid.dim(1), wo = grid.dim(2);
  auto fv = feat.value();
  auto gv = grid.value();
  Buffer out(static_cast<std::size_t>(N) * ho * wo * C, 0.0);
  // Per sample: clamped continuous pixel coords and which axes were clamped.
  struct Tap {
    int x0, y0, x1, y1;
    double fx, fy;
    bool cx, cy;
  };
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(N) * ho * wo);
  const double sx = w > 1 ? 0.5 * (w - 1) : 0.0;
  const double sy = h > 1 ? 0.5 * (h - 1) : 0.0;
  for (long i = 0; i < static_cast<long>(taps->size()); ++i) {
    double px = (gv[2 * i] + 1.0) * sx;
    double py = (gv[2 * i + 1] + 1.0) * sy;
    Tap t{};
    t.cx = px < 0.0 || px > w - 1;
    t.cy = py < 0.0 || py > h - 1;
    px = std::clamp(px, 0.0, static_cast<double>(w - 1));
    py = std::clamp(py, 0.0, static_cast<double>(h - 1));
    // Round-off from the normalized round trip must not move a grid point.
    if (std::fabs(px - std::round(px)) < 1e-12) px = std::round(px);
    if (std::fabs(py - std::round(py)) < 1e-12) py = std::round(py);
    t.x0 = std::min(static_cast<int>(std::floor(px)), std::max(w - 2, 0));
    t.y0 = std::min(static_cast<int>(std::floor(py)), std::max(h - 2, 0));
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.fx = px - t.x0;
    t.fy = py - t.y0;
    (*taps)[i] = t;
    const long n = i / (static_cast<long>(ho) * wo);
    const double* base = fv.data() + n * h * w * C;
    const double* v00 = base + (t.y0 * w + t.x0) * C;
    const double* v01 = base + (t.y0 * w + t.x1) * C;
    const double* v10 = base + (t.y1 * w + t.x0) * C;
    const double* v11 = base + (t.y1 * w + t.x1) * C;
    const double w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy), w10 = (1 - t.fx) * t.fy, w11 = t.fx * t.fy;
    double* dst = out.data() + i * C;
    for (int c = 0; c < C; ++c) dst[c] = w00 * v00[c] + w01 * v01[c] + w10 * v10[c] + w11 * v11[c];
  }
  return make_result({N, ho, wo, C}, std::move(out), {feat, grid}, [=](Node& o) {
    auto gf = pgrad(o, 0);
    auto gg = pgrad(o, 1);
    const auto& fv = o.parents[0]->value;
    for (long i = 0; i < static_cast<long>(taps->size()); ++i) {
      const Tap& t = (*taps)[i];
      const long n = i / (static_cast<long>(ho) * wo);
      const long base = n * h * w * C;
      const long o00 = base + (t.y0 * w + t.x0) * C, o01 = base + (t.y0 * w + t.x1) * C;
      const long o10 = base + (t.y1 * w + t.x0) * C, o11 = base + (t.y1 * w + t.x1) * C;
      const double* g = o.grad.data() + i * C;
      if (!gf.empty()) {
        const double w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy), w10 = (1 - t.fx) * t.fy,
                     w11 = t.fx * t.fy;
        for (int c = 0; c < C; ++c) {
          gf[o00 + c] += w00 * g[c];
          gf[o01 + c] += w01 * g[c];
          gf[o10 + c] += w10 * g[c];
          gf[o11 + c] += w11 * g[c];
        }
      }
      if (!gg.empty()) {
        double dfx = 0, dfy = 0;
        for (int c = 0; c < C; ++c) {
          const double v00 = fv[o00 + c], v01 = fv[o01 + c], v10 = fv[o10 + c], v11 = fv[o11 + c];
          dfx += g[c] * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
          dfy += g[c] * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
        }
        if (!t.cx && w > 1) gg[2 * i] += dfx * sx;
        if (!t.cy && h > 1) gg[2 * i + 1] += dfy * sy;
      }
    }
  });
}

Var inverse2x2(const Var& j, double det_floor, double ridge, std::vector<int>* degenerate) {
  if (j.rank() < 2 || j.dim(-1) != 2 || j.dim(-2) != 2) throw ShapeError("inverse2x2 expects [...,2,2]");
  const long n = static_cast<long>(j.numel() / 4);
  auto jv = j.value();
  Buffer out(j.numel());
  auto eff_ridge = std::make_shared<Buffer>(n, 0.0);
  if (degenerate) degenerate->clear();
  for (long i = 0; i < n; ++i) {
    double a = jv[4 * i], b = jv[4 * i + 1], c = jv[4 * i + 2], d = jv[4 * i + 3];
    if (std::fabs(a * d - b * c) < det_floor) {
      (*eff_ridge)[i] = ridge;
      a += ridge;
      d += ridge;
      if (degenerate) degenerate->push_back(static_cast<int>(i));
    }
    const double det = a * d - b * c;
    out[4 * i] = d / det;
    out[4 * i + 1] = -b / det;
    out[4 * i + 2] = -c / det;
    out[4 * i + 3] = a / det;
  }
  return make_result(j.shape(), std::move(out), {j}, [n](Node& o) {
    auto gj = pgrad(o, 0);
    // d(inv) = -inv dJ inv  =>  dL/dJ = -inv^T G inv^T
    for (long i = 0; i < n; ++i) {
      Eigen::Map<const Eigen::Matrix<double, 2, 2, Eigen::RowMajor>> inv(o.value.data() + 4 * i);
      Eigen::Map<const Eigen::Matrix<double, 2, 2, Eigen::RowMajor>> g(o.grad.data() + 4 * i);
      Eigen::Map<Eigen::Matrix<double, 2, 2, Eigen::RowMajor>> dst(gj.data() + 4 * i);
      dst -= inv.transpose() * g * inv.transpose();
    }
  });
}

}  // namespace mareid::ag
