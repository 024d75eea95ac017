#include "mareid/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace mareid::losses {

using ag::Shape;

void LossWeights::validate() const {
  const double all[] = {id_global, triplet_global, id_part, triplet_part, equivariance, feature_consistency};
  const char* names[] = {"lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6"};
  for (int i = 0; i < 6; ++i) {
    if (!(all[i] >= 0.0) || !std::isfinite(all[i])) {
      std::ostringstream os;
      os << "loss weight " << names[i] << " must be a nonnegative finite number, got " << all[i];
      throw ConfigError(os.str());
    }
  }
}

namespace {

double value_or_zero(const Var& v) { return v.defined() ? v.item() : 0.0; }

}  // namespace

TotalLoss total_loss(const LossTerms& t, const LossWeights& w) {
  w.validate();
  TotalLoss out;
  const std::pair<const Var*, double> pairs[] = {
      {&t.id_global, w.id_global},       {&t.triplet_global, w.triplet_global},
      {&t.id_part, w.id_part},           {&t.triplet_part, w.triplet_part},
      {&t.equivariance, w.equivariance}, {&t.feature_consistency, w.feature_consistency}};
  Var total;
  for (const auto& [term, weight] : pairs) {
    if (!term->defined()) continue;
    if (term->numel() != 1) throw ContractError("loss term must be a scalar, got " + ag::shape_str(term->shape()));
    Var scaled = ag::scale(*term, weight);
    total = total.defined() ? ag::add(total, scaled) : scaled;
  }
  out.total = total.defined() ? total : Var::scalar(0.0);
  LossBreakdown b;
  b.id_global = value_or_zero(t.id_global);
  b.triplet_global = value_or_zero(t.triplet_global);
  b.id_part = value_or_zero(t.id_part);
  b.triplet_part = value_or_zero(t.triplet_part);
  b.equivariance = value_or_zero(t.equivariance);
  b.feature_consistency = value_or_zero(t.feature_consistency);
  b.total = out.total.item();
  out.breakdown = b;
  return out;
}

LossBreakdown total_loss(LossBreakdown t, const LossWeights& w) {
  w.validate();
  t.total = w.id_global * t.id_global + w.triplet_global * t.triplet_global + w.id_part * t.id_part +
            w.triplet_part * t.triplet_part + w.equivariance * t.equivariance +
            w.feature_consistency * t.feature_consistency;
  return t;
}

Var kl_divergence(const Var& p, const Var& q, double eps) {
  if (p.shape() != q.shape())
    throw ContractError("kl_divergence: shape mismatch " + ag::shape_str(p.shape()) + " vs " +
                        ag::shape_str(q.shape()));
  Var ratio = ag::sub(ag::log(ag::clamp_min(p, eps)), ag::log(ag::clamp_min(q, eps)));
  Var out = ag::sum(ag::mul(p, ratio), p.rank() - 1);
  for (double v : out.value())
    if (!std::isfinite(v)) throw ContractError("kl_divergence: non-finite value");
  return out;
}

Var spatial_distribution(const Var& featmap) {
  if (featmap.rank() != 3) throw ContractError("spatial_distribution expects [N,L,C], got " + ag::shape_str(featmap.shape()));
  return ag::softmax(ag::permute(featmap, {0, 2, 1}), 2);
}

Var feature_kl(const Var& ref, const Var& other) {
  return ag::mean(kl_divergence(spatial_distribution(ref), spatial_distribution(other)), 1);
}

Var flow_between(const Var& tgt_parts, const motion::KeypointState& ref, const motion::KeypointState& tgt, int h,
                 int w) {
  return motion::dense_flow(tgt_parts, motion::compose_affine(ref, tgt), h, w);
}

Var feature_consistency_loss(const Var& fa, const Var& fb, const Var& fc, const Var& fd, const Var& flow_ab,
                             const Var& flow_ac, const Var& flow_ad) {
  if (fa.rank() != 4) throw ContractError("feature maps must be [G,h,w,C], got " + ag::shape_str(fa.shape()));
  const int g = fa.dim(0), h = fa.dim(1), w = fa.dim(2), c = fa.dim(3);
  for (const Var* f : {&fb, &fc, &fd})
    if (f->shape() != fa.shape())
      throw ContractError("feature map shape mismatch " + ag::shape_str(f->shape()) + " vs " +
                          ag::shape_str(fa.shape()));
  Var ref = ag::reshape(fa, {g, h * w, c});
  Var acc;
  const std::pair<const Var*, const Var*> others[] = {{&fb, &flow_ab}, {&fc, &flow_ac}, {&fd, &flow_ad}};
  for (const auto& [f, flow] : others) {
    Var warped = ag::reshape(motion::warp_features(*f, *flow), {g, h * w, c});
    Var kl = feature_kl(ref, warped);
    acc = acc.defined() ? ag::add(acc, kl) : kl;
  }
  return ag::mean(acc);
}

EquivarianceParts equivariance_terms(const motion::KeypointState& kp_x, const motion::KeypointState& kp_y,
                                     std::span<const motion::TpsDeformation> tps, double det_floor) {
  const Shape& s = kp_x.coords.shape();
  if (s.size() != 3 || s[2] != 2 || kp_y.coords.shape() != s)
    throw ContractError("equivariance: keypoint shapes must match [N,K,2]");
  const int n = s[0], k = s[1];
  if (static_cast<int>(tps.size()) != n) throw ContractError("equivariance: need one deformation per image");

  EquivarianceParts out;
  Var mapped = motion::apply_deformation(kp_y.coords, tps);
  out.coordinate = ag::mean(ag::sum(ag::abs(ag::sub(kp_x.coords, mapped)), 2));

  Var dt = motion::deformation_jacobian(kp_y.coords, tps);
  auto a = motion::compose_affine(kp_y, kp_x);
  Var prod = ag::matmul(a.linear, dt);
  std::vector<double> eye(4 * static_cast<std::size_t>(n) * k, 0.0);
  std::vector<double> mask(static_cast<std::size_t>(n) * k, 1.0);
  auto dv = dt.value();
  int kept = 0;
  for (int i = 0; i < n * k; ++i) {
    eye[4 * i] = eye[4 * i + 3] = 1.0;
    double det = dv[4 * i] * dv[4 * i + 3] - dv[4 * i + 1] * dv[4 * i + 2];
    if (!(det >= det_floor)) {
      mask[i] = 0.0;
      ++out.excluded;
    } else {
      ++kept;
    }
  }
  Var dev = ag::sum(ag::sum(ag::abs(ag::sub(prod, Var::constant({n, k, 2, 2}, std::move(eye)))), 3), 2);
  Var masked = ag::mul(dev, Var::constant({n, k}, std::move(mask)));
  out.jacobian = ag::scale(ag::sum(masked), kept > 0 ? 1.0 / kept : 0.0);
  out.total = ag::add(out.coordinate, out.jacobian);
  return out;
}

Var equivariance_loss(const motion::KeypointState& kp_x, const motion::KeypointState& kp_y,
                      std::span<const motion::TpsDeformation> tps) {
  return equivariance_terms(kp_x, kp_y, tps).total;
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ContractError("cross_entropy expects [N,C], got " + ag::shape_str(logits.shape()));
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ContractError("cross_entropy: label count mismatch");
  std::vector<double> onehot(static_cast<std::size_t>(n) * c, 0.0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) {
      std::ostringstream os;
      os << "label " << labels[i] << " out of range [0, " << c << ")";
      throw ContractError(os.str());
    }
    onehot[static_cast<std::size_t>(i) * c + labels[i]] = 1.0;
  }
  return ag::neg(ag::sum(ag::mul(ag::log_softmax(logits, 1), Var::constant({n, c}, std::move(onehot))), 1));
}

Var identity_loss(const Var& logits, const std::vector<int>& labels) { return ag::mean(cross_entropy(logits, labels)); }

namespace {

std::string batch_composition(const std::vector<int>& labels) {
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  std::ostringstream os;
  os << labels.size() << " samples over " << counts.size() << " identities {";
  bool first = true;
  for (auto [id, c] : counts) {
    os << (first ? "" : ", ") << id << ":" << c;
    first = false;
  }
  os << "}";
  return os.str();
}

}  // namespace

Var l2_normalize(const Var& x, double eps) {
  return ag::div(x, ag::sqrt(ag::add_scalar(ag::sum(ag::square(x), x.rank() - 1, true), eps)));
}

TripletSelection batch_hard_selection(std::span<const double> e, int n, int d, const std::vector<int>& labels) {
  TripletSelection s;
  s.positive.assign(n, -1);
  s.negative.assign(n, -1);
  s.valid.assign(n, false);
  auto dist = [&](int i, int j) {
    double acc = 0.0;
    for (int t = 0; t < d; ++t) {
      double diff = e[static_cast<std::size_t>(i) * d + t] - e[static_cast<std::size_t>(j) * d + t];
      acc += diff * diff;
    }
    return acc;
  };
  for (int i = 0; i < n; ++i) {
    double best_pos = -1.0, best_neg = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double dij = dist(i, j);
      if (labels[j] == labels[i]) {
        if (dij > best_pos) best_pos = dij, s.positive[i] = j;
      } else if (dij < best_neg) {
        best_neg = dij, s.negative[i] = j;
      }
    }
    s.valid[i] = s.positive[i] >= 0 && s.negative[i] >= 0;
    s.num_valid += s.valid[i] ? 1 : 0;
  }
  return s;
}

Var triplet_per_anchor(const Var& embeddings, const std::vector<int>& labels, TripletSelection* selection) {
  if (embeddings.rank() != 2) throw ContractError("triplet expects [N,d], got " + ag::shape_str(embeddings.shape()));
  const int n = embeddings.dim(0), d = embeddings.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ContractError("triplet: label count mismatch");
  for (double x : embeddings.value())
    if (!std::isfinite(x)) throw ContractError("triplet: non-finite embedding");
  TripletSelection s = batch_hard_selection(embeddings.value(), n, d, labels);
  if (s.num_valid == 0) throw ContractError("no valid triplet in batch: " + batch_composition(labels));
  std::vector<int> pos(n), neg(n);
  std::vector<double> mask(n);
  for (int i = 0; i < n; ++i) {
    pos[i] = s.valid[i] ? s.positive[i] : i;
    neg[i] = s.valid[i] ? s.negative[i] : i;
    mask[i] = s.valid[i] ? 1.0 : 0.0;
  }
  Var dp = ag::sum(ag::square(ag::sub(embeddings, ag::index_select(embeddings, 0, pos))), 1);
  Var dn = ag::sum(ag::square(ag::sub(embeddings, ag::index_select(embeddings, 0, neg))), 1);
  Var out = ag::mul(ag::softplus(ag::sub(dp, dn)), Var::constant({n}, std::move(mask)));
  if (selection) *selection = std::move(s);
  return out;
}

Var triplet_loss(const Var& embeddings, const std::vector<int>& labels) {
  TripletSelection s;
  Var per = triplet_per_anchor(embeddings, labels, &s);
  return ag::scale(ag::sum(per), 1.0 / s.num_valid);
}

Var part_identity_loss(const Var& part_logits, const std::vector<int>& labels, const Var& visibility) {
  if (part_logits.rank() != 3) throw ContractError("part logits must be [N,K,C]");
  const int n = part_logits.dim(0), k = part_logits.dim(1), c = part_logits.dim(2);
  if (visibility.shape() != Shape{n, k}) throw ContractError("visibility must be [N,K]");
  std::vector<int> rep(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < k; ++p) rep[static_cast<std::size_t>(i) * k + p] = labels.at(i);
  Var ce = ag::reshape(cross_entropy(ag::reshape(part_logits, {n * k, c}), rep), {n, k});
  return ag::scale(ag::sum(ag::mul(ce, visibility)), 1.0 / n);
}

Var part_triplet_loss(const Var& part_embeddings, const std::vector<int>& labels, const Var& visibility) {
  if (part_embeddings.rank() != 3) throw ContractError("part embeddings must be [N,K,d]");
  const int n = part_embeddings.dim(0), k = part_embeddings.dim(1), d = part_embeddings.dim(2);
  if (visibility.shape() != Shape{n, k}) throw ContractError("visibility must be [N,K]");
  Var acc;
  int valid = 0;
  for (int p = 0; p < k; ++p) {
    TripletSelection s;
    Var per = triplet_per_anchor(ag::reshape(ag::slice(part_embeddings, 1, p, 1), {n, d}), labels, &s);
    valid = s.num_valid;
    Var weighted = ag::sum(ag::mul(per, ag::reshape(ag::slice(visibility, 1, p, 1), {n})));
    acc = acc.defined() ? ag::add(acc, weighted) : weighted;
  }
  return ag::scale(acc, 1.0 / valid);
}

}  // namespace mareid::losses
