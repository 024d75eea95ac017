#pragma once

// Identity, soft-margin triplet, equivariance and feature-consistency
// losses, and their weighted total.

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mareid/autograd.hpp"
#include "mareid/motion.hpp"

namespace mareid::losses {

using ag::Var;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kEps = 1e-8;

struct LossWeights {
  double id_global = 1.0;            // λ1
  double triplet_global = 1.0;       // λ2
  double id_part = 1.0;              // λ3
  double triplet_part = 1.0;         // λ4
  double equivariance = 10.0;        // λ5
  double feature_consistency = 5.0;  // λ6

  void validate() const;  // throws ConfigError on negative weights
};

struct LossBreakdown {
  double id_global = 0, triplet_global = 0, id_part = 0, triplet_part = 0, equivariance = 0,
         feature_consistency = 0, total = 0;
};

// Undefined terms count as zero (e.g. part losses with the segmentation
// branch disabled).
struct LossTerms {
  Var id_global, triplet_global, id_part, triplet_part, equivariance, feature_consistency;
};

struct TotalLoss {
  Var total;
  LossBreakdown breakdown;
};

TotalLoss total_loss(const LossTerms& terms, const LossWeights& w);
// Scalar version; fills breakdown.total from the six terms.
LossBreakdown total_loss(LossBreakdown terms, const LossWeights& w);

// Σ_z p log(p/q) along the last axis; both inputs are distributions.
Var kl_divergence(const Var& p, const Var& q, double eps = kEps);

// featmap [N,L,C] -> per-channel spatial softmax [N,C,L].
Var spatial_distribution(const Var& featmap);

// Channel-averaged KL(ref ‖ other) for token-major maps [N,L,C] -> [N].
Var feature_kl(const Var& ref, const Var& other);

// Backward flow that brings `ref`-image content into the target's frame,
// using the target's part maps.
Var flow_between(const Var& tgt_parts, const motion::KeypointState& ref, const motion::KeypointState& tgt, int h,
                 int w);

// Maps are channel-last [G,h,w,C]; flows [G,h,w,2] sample B, C, D into A's
// frame. Sum of the three KL terms, averaged over the G groups.
Var feature_consistency_loss(const Var& fa, const Var& fb, const Var& fc, const Var& fd, const Var& flow_ab,
                             const Var& flow_ac, const Var& flow_ad);

struct EquivarianceParts {
  Var coordinate;  // mean L1 over keypoints
  Var jacobian;    // mean L1 of J_k·dT − I over non-degenerate keypoints
  Var total;
  int excluded = 0;
};

// kp_x from the original images, kp_y from images deformed by `tps`
// (tps maps deformed-image points back to the original image).
EquivarianceParts equivariance_terms(const motion::KeypointState& kp_x, const motion::KeypointState& kp_y,
                                     std::span<const motion::TpsDeformation> tps, double det_floor = motion::kDetFloor);
Var equivariance_loss(const motion::KeypointState& kp_x, const motion::KeypointState& kp_y,
                      std::span<const motion::TpsDeformation> tps);

// logits [N,C] -> per-sample negative log-likelihood [N].
Var cross_entropy(const Var& logits, const std::vector<int>& labels);
Var identity_loss(const Var& logits, const std::vector<int>& labels);

struct TripletSelection {
  std::vector<int> positive, negative;  // per anchor, -1 when unavailable
  std::vector<bool> valid;
  int num_valid = 0;
};
// x / sqrt(Σ x² + eps) along the last axis.
Var l2_normalize(const Var& x, double eps = 1e-12);

// Hardest positive / negative per anchor under squared Euclidean distance.
TripletSelection batch_hard_selection(std::span<const double> embeddings, int n, int d,
                                      const std::vector<int>& labels);
// log(1 + exp(‖a−p‖² − ‖a−n‖²)) per anchor [N]; invalid anchors give 0.
Var triplet_per_anchor(const Var& embeddings, const std::vector<int>& labels, TripletSelection* selection = nullptr);
// Mean over valid anchors. Throws ContractError when no triplet exists.
Var triplet_loss(const Var& embeddings, const std::vector<int>& labels);

// Part losses weighted by per-sample part visibility [N,K] (rows sum to 1).
Var part_identity_loss(const Var& part_logits, const std::vector<int>& labels, const Var& visibility);
Var part_triplet_loss(const Var& part_embeddings, const std::vector<int>& labels, const Var& visibility);

}  // namespace mareid::losses
