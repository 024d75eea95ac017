#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every op records a closure that pushes the output
// gradient into its parents; `backward` replays them in reverse
// topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mareid::ag {

using Shape = std::vector<int>;
// Tensor storage; aligned so vectorised reductions sum in a fixed order.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_buffer();  // allocates on first use
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<double> values);
  static Var constant(Shape shape, double fill = 0.0);
  static Var scalar(double v) { return constant({}, std::vector<double>{v}); }
  static Var parameter(Shape shape, std::vector<double> values);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const;
  std::size_t numel() const { return n_->value.size(); }

  std::span<const double> value() const { return n_->value; }
  std::span<double> mutable_value() { return n_->value; }
  std::span<const double> grad() const { return n_->grad; }
  std::span<double> mutable_grad() { return n_->grad_buffer(); }
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return n_->requires_grad; }
  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

  // Same data, no history.
  Var detach() const;

 private:
  std::shared_ptr<Node> n_;
};

// Scoped switch that stops graph construction (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// Seeds d(root)/d(root)=1 and accumulates into every reachable node that
// requires grad. Interior gradients are reset first so the same graph can
// be differentiated more than once; leaf gradients accumulate.
void backward(const Var& root);

// Helper for op implementations: builds the output node and wires the
// backward closure only when some input requires grad.
Var make_result(Shape shape, Buffer value,
                std::vector<Var> inputs,
                std::function<void(Node&)> backward_fn);

// --- elementwise with numpy-style broadcasting ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var softplus(const Var& a);
Var clamp_min(const Var& a, double lo);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// --- reductions ---
Var sum(const Var& a);
Var mean(const Var& a);
Var sum(const Var& a, int axis, bool keepdim = false);
Var mean(const Var& a, int axis, bool keepdim = false);

// --- shape ---
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<int>& perm);
Var transpose(const Var& a, int d0, int d1);
Var slice(const Var& a, int axis, int start, int length);
Var concat(const std::vector<Var>& parts, int axis);
Var index_select(const Var& a, int axis, const std::vector<int>& indices);

// --- linear algebra ---
// a: [..., M, K], b: [..., K, N]; batch dims must match or b may be 2D.
Var matmul(const Var& a, const Var& b);
// x: [..., in], w: [out, in], b: [out] (optional)
Var linear(const Var& x, const Var& w, const Var& b = {});

// --- normalization ---
Var softmax(const Var& a, int axis);
Var log_softmax(const Var& a, int axis);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               double eps = 1e-5);

// --- convolution: x [N,C,H,W], w [O,C,kh,kw], b [O] ---
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// Bilinear sampling of a channel-last map feat [N,h,w,C] at normalized
// coordinates grid [N,ho,wo,2] (x then y, -1 ↔ first cell centre,
// +1 ↔ last cell centre). Out-of-range coordinates clamp to the border.
Var grid_sample(const Var& feat, const Var& grid);

// 2x2 inverse over the last two dims. Matrices with |det| < det_floor are
// inverted as (J + ridge*I); their flat batch index is reported.
Var inverse2x2(const Var& j, double det_floor, double ridge,
               std::vector<int>* degenerate = nullptr);

}  // namespace mareid::ag
