#include "mareid/motion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mareid::motion {

namespace {

double cell_coord(int i, int n) { return n > 1 ? -1.0 + 2.0 * i / (n - 1) : 0.0; }

// U(r) = r² log r², written in terms of the offset d = p − c.
double tps_kernel(const Vec2& d) {
  const double r2 = d.squaredNorm();
  return r2 > 0 ? r2 * std::log(r2) : 0.0;
}
Vec2 tps_kernel_grad(const Vec2& d) {
  const double r2 = d.squaredNorm();
  return r2 > 0 ? Vec2(2.0 * (1.0 + std::log(r2)) * d) : Vec2::Zero();
}
Mat2 tps_kernel_hessian(const Vec2& d) {
  const double r2 = d.squaredNorm();
  if (r2 <= 0) return Mat2::Zero();
  return 2.0 * (1.0 + std::log(r2)) * Mat2::Identity() + 4.0 * d * d.transpose() / r2;
}

double sample_bilinear(const Image& img, double px, double py, int c) {
  px = std::clamp(px, 0.0, img.width - 1.0);
  py = std::clamp(py, 0.0, img.height - 1.0);
  if (std::fabs(px - std::round(px)) < 1e-9) px = std::round(px);
  if (std::fabs(py - std::round(py)) < 1e-9) py = std::round(py);
  const int x0 = std::min(static_cast<int>(px), std::max(img.width - 2, 0));
  const int y0 = std::min(static_cast<int>(py), std::max(img.height - 2, 0));
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = px - x0, fy = py - y0;
  if (fx == 0.0 && fy == 0.0) return img.at(y0, x0, c);
  return (1 - fx) * (1 - fy) * img.at(y0, x0, c) + fx * (1 - fy) * img.at(y0, x1, c) +
         (1 - fx) * fy * img.at(y1, x0, c) + fx * fy * img.at(y1, x1, c);
}

void check_points(const Var& points, std::size_t items) {
  if (points.rank() != 3 || points.dim(2) != 2 || static_cast<std::size_t>(points.dim(0)) != items)
    throw ContractError("expected points [N,K,2] with one deformation per item, got " + ag::shape_str(points.shape()));
}

}  // namespace

std::vector<double> grid_coordinates(int h, int w) {
  std::vector<double> g(static_cast<std::size_t>(h) * w * 2);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      g[2 * (i * w + j)] = cell_coord(j, w);
      g[2 * (i * w + j) + 1] = cell_coord(i, h);
    }
  return g;
}

Var grid_coordinates_var(int h, int w) { return Var::constant({h * w, 2}, grid_coordinates(h, w)); }

Var identity_flow(int n, int h, int w) {
  const auto g = grid_coordinates(h, w);
  std::vector<double> v;
  v.reserve(g.size() * n);
  for (int i = 0; i < n; ++i) v.insert(v.end(), g.begin(), g.end());
  return Var::constant({n, h, w, 2}, std::move(v));
}

Var soft_argmax(const Var& heatmaps, int h, int w, double tolerance) {
  if (heatmaps.rank() < 2 || heatmaps.dim(-1) != h * w)
    throw ContractError("soft_argmax: heatmaps " + ag::shape_str(heatmaps.shape()) + " do not match grid " +
                        std::to_string(h) + "x" + std::to_string(w));
  const auto v = heatmaps.value();
  const std::size_t L = static_cast<std::size_t>(h) * w;
  for (std::size_t m = 0; m < v.size() / L; ++m) {
    double s = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (v[m * L + i] < 0) throw ContractError("soft_argmax: negative heatmap mass");
      s += v[m * L + i];
    }
    if (std::fabs(s - 1.0) > tolerance)
      throw ContractError("soft_argmax: heatmap " + std::to_string(m) + " sums to " + std::to_string(s));
  }
  return ag::matmul(heatmaps, grid_coordinates_var(h, w));
}

Var jacobian_field(const Var& featmap, const Var& heatmaps, const Var& head_weight, const Var& head_bias) {
  const int N = featmap.dim(0), L = featmap.dim(1);
  const int K = heatmaps.dim(1);
  if (heatmaps.dim(0) != N || heatmaps.dim(2) != L || head_weight.dim(0) != 4 * K)
    throw ContractError("jacobian_field: inconsistent shapes");
  Var per_cell = ag::linear(featmap, head_weight, head_bias);            // [N,L,4K]
  per_cell = ag::permute(ag::reshape(per_cell, {N, L, K, 4}), {0, 2, 1, 3});  // [N,K,L,4]
  Var j = ag::matmul(ag::reshape(heatmaps, {N, K, 1, L}), per_cell);     // [N,K,1,4]
  return ag::reshape(j, {N, K, 2, 2});
}

bool AffineSet::flagged(int n, int k, int num_keypoints) const {
  return std::find(degenerate.begin(), degenerate.end(), n * num_keypoints + k) != degenerate.end();
}

AffineSet compose_affine(const KeypointState& ref, const KeypointState& tgt) {
  if (ref.coords.shape() != tgt.coords.shape() || ref.jacobians.shape() != tgt.jacobians.shape())
    throw ContractError("compose_affine: keypoint sets differ in shape");
  AffineSet a;
  a.offsets = ref.coords;
  a.anchors = tgt.coords;
  Var inv = ag::inverse2x2(tgt.jacobians, kDetFloor, kRidge, &a.degenerate);
  a.linear = ag::matmul(ref.jacobians, inv);
  return a;
}

Var dense_flow(const Var& tgt_parts, const AffineSet& affines, int h, int w) {
  const int N = tgt_parts.dim(0), C = tgt_parts.dim(1), L = tgt_parts.dim(2);
  const int K = C - 1;
  if (L != h * w || affines.offsets.dim(1) != K || affines.offsets.dim(0) != N)
    throw ContractError("dense_flow: part maps " + ag::shape_str(tgt_parts.shape()) + " vs " +
                        std::to_string(K) + " affines on a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  const Var z = grid_coordinates_var(h, w);                                         // [L,2]
  const Var rel = ag::sub(ag::reshape(z, {1, 1, L, 2}), ag::reshape(affines.anchors, {N, K, 1, 2}));
  const Var eye = Var::constant({1, 1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  Var shift = ag::matmul(rel, ag::transpose(ag::sub(affines.linear, eye), -1, -2));  // [N,K,L,2]
  shift = ag::add(shift, ag::reshape(ag::sub(affines.offsets, affines.anchors), {N, K, 1, 2}));
  const Var fg = ag::reshape(ag::slice(tgt_parts, 1, 0, K), {N, K, L, 1});
  Var field = ag::add(ag::reshape(z, {1, L, 2}), ag::sum(ag::mul(fg, shift), 1));  // [N,L,2]
  return ag::reshape(field, {N, h, w, 2});
}

Var warp_features(const Var& featmap, const Var& flow) {
  if (featmap.rank() != 4 || flow.rank() != 4 || featmap.dim(0) != flow.dim(0))
    throw ContractError("warp_features: featmap " + ag::shape_str(featmap.shape()) + " flow " +
                        ag::shape_str(flow.shape()));
  return ag::grid_sample(featmap, flow);
}

// --- thin-plate splines ---

TpsDeformation::TpsDeformation() : ctrl_(0, 2), disp_(0, 2), weights_(0, 2) {
  base_.setZero();
  base_.leftCols<2>().setIdentity();
  poly_.setZero();
}

TpsDeformation::TpsDeformation(const Eigen::Matrix<double, 2, 3>& base_affine, int grid,
                               const Eigen::MatrixX2d& displacements)
    : base_(base_affine), disp_(displacements) {
  const int n = grid * grid;
  if (grid < 2 || displacements.rows() != n) throw ContractError("TPS: displacement count must be grid*grid");
  ctrl_.resize(n, 2);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) ctrl_.row(i * grid + j) << cell_coord(j, grid), cell_coord(i, grid);
  Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(n + 3, n + 3);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) sys(i, j) = tps_kernel(ctrl_.row(i).transpose() - ctrl_.row(j).transpose());
    sys(i, n) = sys(n, i) = 1.0;
    sys(i, n + 1) = sys(n + 1, i) = ctrl_(i, 0);
    sys(i, n + 2) = sys(n + 2, i) = ctrl_(i, 1);
    rhs.row(i) = disp_.row(i);
  }
  const Eigen::MatrixXd sol = sys.fullPivLu().solve(rhs);
  weights_ = sol.topRows(n);
  poly_ = sol.bottomRows(3);
}

TpsDeformation TpsDeformation::translation(double tx, double ty) {
  TpsDeformation t;
  t.base_(0, 2) = tx;
  t.base_(1, 2) = ty;
  return t;
}

Vec2 TpsDeformation::map(const Vec2& p) const {
  Vec2 out = base_.leftCols<2>() * p + base_.col(2);
  out += poly_.row(0).transpose() + poly_.bottomRows<2>().transpose() * p;
  for (Eigen::Index i = 0; i < ctrl_.rows(); ++i)
    out += weights_.row(i).transpose() * tps_kernel(p - ctrl_.row(i).transpose());
  return out;
}

Mat2 TpsDeformation::jacobian(const Vec2& p) const {
  Mat2 j = base_.leftCols<2>() + poly_.bottomRows<2>().transpose();
  for (Eigen::Index i = 0; i < ctrl_.rows(); ++i)
    j += weights_.row(i).transpose() * tps_kernel_grad(p - ctrl_.row(i).transpose()).transpose();
  return j;
}

std::array<Mat2, 2> TpsDeformation::hessian(const Vec2& p) const {
  std::array<Mat2, 2> h{Mat2::Zero(), Mat2::Zero()};
  for (Eigen::Index i = 0; i < ctrl_.rows(); ++i) {
    const Mat2 k = tps_kernel_hessian(p - ctrl_.row(i).transpose());
    h[0] += weights_(i, 0) * k;
    h[1] += weights_(i, 1) * k;
  }
  return h;
}

Vec2 TpsDeformation::inverse(const Vec2& q, int iterations) const {
  const Mat2 lin = base_.leftCols<2>() + poly_.bottomRows<2>().transpose();
  Vec2 p = lin.fullPivLu().solve(q - base_.col(2) - poly_.row(0).transpose());
  for (int it = 0; it < iterations; ++it) {
    const Vec2 r = map(p) - q;
    if (r.norm() < 1e-14) break;
    p -= jacobian(p).fullPivLu().solve(r);
  }
  return p;
}

bool TpsDeformation::diffeomorphic(int probe) const {
  for (int i = 0; i < probe; ++i)
    for (int j = 0; j < probe; ++j)
      if (jacobian(Vec2(cell_coord(j, probe), cell_coord(i, probe))).determinant() <= 0) return false;
  return true;
}

TpsDeformation sample_tps(Rng& rng, const TpsConfig& cfg) {
  for (double s : {cfg.tps_std, cfg.affine_std, cfg.translation_std})
    if (!(s >= 0.0 && s <= cfg.max_std))
      throw ContractError("TPS magnitude " + std::to_string(s) + " outside diffeomorphic range [0, " +
                          std::to_string(cfg.max_std) + "]");
  auto draw = [&rng](double sd) { return sd > 0 ? normal(rng, 0.0, sd) : 0.0; };
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    Eigen::Matrix<double, 2, 3> base;
    base << 1.0 + draw(cfg.affine_std), draw(cfg.affine_std), draw(cfg.translation_std), draw(cfg.affine_std),
        1.0 + draw(cfg.affine_std), draw(cfg.translation_std);
    const int n = cfg.grid * cfg.grid;
    Eigen::MatrixX2d disp(n, 2);
    for (int i = 0; i < n; ++i) disp.row(i) << draw(cfg.tps_std), draw(cfg.tps_std);
    TpsDeformation t(base, cfg.grid, disp);
    if (t.diffeomorphic()) return t;
  }
  throw ContractError("TPS sampling failed the determinant probe after " + std::to_string(cfg.max_retries) +
                      " retries");
}

Image apply_deformation(const Image& img, const TpsDeformation& tps) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Vec2 p = tps.map(Vec2(cell_coord(x, img.width), cell_coord(y, img.height)));
      const double px = (p.x() + 1.0) * 0.5 * (img.width - 1);
      const double py = (p.y() + 1.0) * 0.5 * (img.height - 1);
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = sample_bilinear(img, px, py, c);
    }
  return out;
}

Var apply_deformation(const Var& points, std::span<const TpsDeformation> per_item) {
  check_points(points, per_item.size());
  const int N = points.dim(0), K = points.dim(1);
  std::vector<TpsDeformation> tps(per_item.begin(), per_item.end());
  const auto pv = points.value();
  ag::Buffer out(pv.size());
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      const std::size_t o = 2 * (static_cast<std::size_t>(n) * K + k);
      const Vec2 q = tps[n].map(Vec2(pv[o], pv[o + 1]));
      out[o] = q.x();
      out[o + 1] = q.y();
    }
  return ag::make_result(points.shape(), std::move(out), {points}, [tps, N, K](ag::Node& node) {
    auto& parent = *node.parents[0];
    auto gp = parent.grad_buffer();
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        const std::size_t o = 2 * (static_cast<std::size_t>(n) * K + k);
        const Mat2 j = tps[n].jacobian(Vec2(parent.value[o], parent.value[o + 1]));
        const Vec2 g = j.transpose() * Vec2(node.grad[o], node.grad[o + 1]);
        gp[o] += g.x();
        gp[o + 1] += g.y();
      }
  });
}

Var deformation_jacobian(const Var& points, std::span<const TpsDeformation> per_item) {
  check_points(points, per_item.size());
  const int N = points.dim(0), K = points.dim(1);
  std::vector<TpsDeformation> tps(per_item.begin(), per_item.end());
  const auto pv = points.value();
  ag::Buffer out(pv.size() * 2);
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      const std::size_t o = 2 * (static_cast<std::size_t>(n) * K + k);
      const Mat2 j = tps[n].jacobian(Vec2(pv[o], pv[o + 1]));
      out[2 * o] = j(0, 0);
      out[2 * o + 1] = j(0, 1);
      out[2 * o + 2] = j(1, 0);
      out[2 * o + 3] = j(1, 1);
    }
  return ag::make_result({N, K, 2, 2}, std::move(out), {points}, [tps, N, K](ag::Node& node) {
    auto& parent = *node.parents[0];
    auto gp = parent.grad_buffer();
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        const std::size_t o = 2 * (static_cast<std::size_t>(n) * K + k);
        const auto h = tps[n].hessian(Vec2(parent.value[o], parent.value[o + 1]));
        Vec2 g = Vec2::Zero();
        for (int m = 0; m < 2; ++m)
          for (int j = 0; j < 2; ++j) g += node.grad[2 * o + 2 * m + j] * h[m].row(j).transpose();
        gp[o] += g.x();
        gp[o + 1] += g.y();
      }
  });
}

}  // namespace mareid::motion
