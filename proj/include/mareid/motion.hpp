#pragma once

// Keypoint geometry and first-order motion: soft-argmax coordinates,
// per-keypoint Jacobians, affine composition through the canonical frame,
// thin-plate-spline deformations, dense backward flow and warping.
//
// Coordinates are normalized to [-1,1]², origin at the grid centre, x to the
// right and y downward. Cell (row i, col j) of an h×w grid sits at
// (-1 + 2j/(w-1), -1 + 2i/(h-1)).

#include <Eigen/Dense>

#include <span>
#include <stdexcept>
#include <vector>

#include "mareid/autograd.hpp"
#include "mareid/image.hpp"
#include "mareid/rng.hpp"

namespace mareid::motion {

using ag::Var;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inverse-Jacobian regularisation for collapsed keypoint Jacobians.
inline constexpr double kDetFloor = 1e-4;
inline constexpr double kRidge = 1e-3;

// Row-major [h*w, 2] cell coordinates.
std::vector<double> grid_coordinates(int h, int w);
Var grid_coordinates_var(int h, int w);
Var identity_flow(int n, int h, int w);  // [n,h,w,2]

// heatmaps [..., K, h*w] with each map summing to one -> coords [..., K, 2].
Var soft_argmax(const Var& heatmaps, int h, int w, double tolerance = 1e-5);

// featmap [N,L,d], heatmaps [N,K,L], head (weight [4K,d], bias [4K]) -> [N,K,2,2].
// Each keypoint's Jacobian is its head output averaged under its heatmap.
Var jacobian_field(const Var& featmap, const Var& heatmaps, const Var& head_weight, const Var& head_bias);

struct KeypointState {
  Var coords;     // [N,K,2]
  Var jacobians;  // [N,K,2,2]
};

struct AffineSet {
  Var offsets;  // [N,K,2] keypoints in the reference image
  Var linear;   // [N,K,2,2] J_ref · J_tgt⁻¹
  Var anchors;  // [N,K,2] keypoints in the target image
  std::vector<int> degenerate;  // flat n*K+k indices regularised during inversion

  bool flagged(int n, int k, int num_keypoints) const;
};

// Local affine maps taking target-image coordinates to reference-image
// coordinates around each keypoint.
AffineSet compose_affine(const KeypointState& ref, const KeypointState& tgt);

// tgt_parts [N,K+1,L] (channel K = background) -> backward flow [N,h,w,2].
// field[z] = Σ_k M_k(z)·(offset_k + linear_k·(z − anchor_k)) + M_bg(z)·z
// Part maps must sum to one per cell; evaluated as z plus the per-part
// displacement so identity affines return the grid bit for bit.
Var dense_flow(const Var& tgt_parts, const AffineSet& affines, int h, int w);

// featmap [N,h,w,C] sampled bilinearly at flow [N,h',w',2].
Var warp_features(const Var& featmap, const Var& flow);

struct TpsConfig {
  int grid = 5;
  double tps_std = 0.1;          // control-point displacement
  double affine_std = 0.05;      // perturbation of the linear part
  double translation_std = 0.05;
  double max_std = 0.5;          // diffeomorphic range guard
  int max_retries = 20;
};

// Known deformation T mapping points of the deformed image Y to the
// original image X: T(p) = B·[p;1] + f(p), with f the thin-plate spline that
// interpolates the control displacements.
class TpsDeformation {
 public:
  TpsDeformation();  // identity
  TpsDeformation(const Eigen::Matrix<double, 2, 3>& base_affine, int grid, const Eigen::MatrixX2d& displacements);

  static TpsDeformation identity() { return {}; }
  static TpsDeformation translation(double tx, double ty);

  Vec2 map(const Vec2& p) const;
  Mat2 jacobian(const Vec2& p) const;
  // hessian[m](j,l) = ∂²T_m / ∂p_j ∂p_l
  std::array<Mat2, 2> hessian(const Vec2& p) const;
  // Newton solve of T(p) = q.
  Vec2 inverse(const Vec2& q, int iterations = 50) const;
  // det J > 0 on a probe grid over [-1,1]².
  bool diffeomorphic(int probe = 21) const;

  const Eigen::Matrix<double, 2, 3>& base_affine() const { return base_; }
  const Eigen::MatrixX2d& control_points() const { return ctrl_; }
  const Eigen::MatrixX2d& displacements() const { return disp_; }

 private:
  Eigen::Matrix<double, 2, 3> base_;
  Eigen::MatrixX2d ctrl_;    // n×2
  Eigen::MatrixX2d disp_;    // n×2
  Eigen::MatrixX2d weights_;  // n×2
  Eigen::Matrix<double, 3, 2> poly_;  // constant + linear part of f
};

TpsDeformation sample_tps(Rng& rng, const TpsConfig& cfg);

// Y(z) = X(T(z)), bilinear with border padding.
Image apply_deformation(const Image& img, const TpsDeformation& tps);
// points [N,K,2] mapped through per-item deformations (differentiable).
Var apply_deformation(const Var& points, std::span<const TpsDeformation> per_item);
// Spatial Jacobian of each item's deformation at points [N,K,2] -> [N,K,2,2].
Var deformation_jacobian(const Var& points, std::span<const TpsDeformation> per_item);

}  // namespace mareid::motion
