#pragma once

// Direct evaluations shared by the unit tests and the acceptance binary.

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "mareid/motion.hpp"
#include "mareid/reid.hpp"
#include "mareid/rng.hpp"

namespace mareid::test {

using ag::Var;
using motion::AffineSet;

// Softmax(T Tᵀ / √D) T evaluated entry by entry.
inline std::vector<double> attention_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                            const std::vector<double>& v, int l, int d) {
  std::vector<double> out(static_cast<std::size_t>(l) * d, 0.0);
  for (int i = 0; i < l; ++i) {
    std::vector<double> s(l);
    double mx = -INFINITY;
    for (int j = 0; j < l; ++j) {
      double acc = 0.0;
      for (int t = 0; t < d; ++t) acc += q[i * d + t] * k[j * d + t];
      s[j] = acc / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - mx));
    for (int j = 0; j < l; ++j)
      for (int t = 0; t < d; ++t) out[i * d + t] += s[j] / z * v[j * d + t];
  }
  return out;
}

inline std::vector<double> jac_values(Rng& rng, int n, double spread = 0.3) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) {
    v.push_back(1.0 + uniform(rng, -spread, spread));
    v.push_back(uniform(rng, -spread, spread));
    v.push_back(uniform(rng, -spread, spread));
    v.push_back(1.0 + uniform(rng, -spread, spread));
  }
  return v;
}

inline std::vector<double> coord_values(Rng& rng, int n, double range = 0.6) {
  std::vector<double> v;
  for (int i = 0; i < 2 * n; ++i) v.push_back(uniform(rng, -range, range));
  return v;
}

// Softmax over channels of random logits at each cell, [n,k+1,l].
inline Var random_parts(Rng& rng, int n, int k, int l, double sharpness = 2.0) {
  std::vector<double> v(static_cast<std::size_t>(n) * (k + 1) * l);
  for (int b = 0; b < n; ++b)
    for (int z = 0; z < l; ++z) {
      std::vector<double> e(k + 1);
      double s = 0.0;
      for (double& x : e) s += (x = std::exp(sharpness * normal(rng)));
      for (int c = 0; c <= k; ++c) v[(static_cast<std::size_t>(b) * (k + 1) + c) * l + z] = e[c] / s;
    }
  return Var::constant({n, k + 1, l}, v);
}

// field[z] = Σ_k M_k(z)·(o_k + L_k(z − a_k)) + M_bg(z)·z, one cell at a time.
inline std::vector<double> flow_oracle(const Var& parts, const AffineSet& a, int h, int w) {
  const int n = parts.dim(0), k = parts.dim(1) - 1;
  std::vector<double> out;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const int z = i * w + j;
        const double zx = -1.0 + 2.0 * j / (w - 1), zy = -1.0 + 2.0 * i / (h - 1);
        double fx = parts.at({b, k, z}) * zx, fy = parts.at({b, k, z}) * zy;
        for (int p = 0; p < k; ++p) {
          const double m = parts.at({b, p, z});
          const double dx = zx - a.anchors.at({b, p, 0}), dy = zy - a.anchors.at({b, p, 1});
          fx += m * (a.offsets.at({b, p, 0}) + a.linear.at({b, p, 0, 0}) * dx + a.linear.at({b, p, 0, 1}) * dy);
          fy += m * (a.offsets.at({b, p, 1}) + a.linear.at({b, p, 1, 0}) * dx + a.linear.at({b, p, 1, 1}) * dy);
        }
        out.push_back(fx);
        out.push_back(fy);
      }
  return out;
}

struct Instance {
  std::vector<double> dist;
  std::vector<int> qid, qcam, gid, gcam;
};

inline Instance random_instance(Rng& rng, int nq, int ng, int ids, bool ties) {
  Instance in;
  for (int q = 0; q < nq; ++q) in.qid.push_back(uniform_int(rng, 0, ids - 1)), in.qcam.push_back(uniform_int(rng, 0, 1));
  for (int g = 0; g < ng; ++g) in.gid.push_back(uniform_int(rng, 0, ids - 1)), in.gcam.push_back(uniform_int(rng, 0, 1));
  for (int i = 0; i < nq * ng; ++i) in.dist.push_back(ties ? uniform_int(rng, 0, 4) * 0.25 : uniform(rng));
  return in;
}

// Per-query oracle AP after removing same-id same-camera items.
inline std::vector<double> oracle_aps(const Instance& in) {
  std::vector<double> out;
  const std::size_t ng = in.gid.size();
  for (std::size_t q = 0; q < in.qid.size(); ++q) {
    std::vector<double> d;
    std::vector<char> rel;
    for (std::size_t g = 0; g < ng; ++g) {
      if (in.gid[g] == in.qid[q] && in.gcam[g] == in.qcam[q]) continue;
      d.push_back(in.dist[q * ng + g]);
      rel.push_back(in.gid[g] == in.qid[q]);
    }
    int relevant = 0;
    for (char r : rel) relevant += r;
    if (relevant == 0) continue;
    std::vector<bool> flags(rel.begin(), rel.end());
    std::unique_ptr<bool[]> buf(new bool[flags.size()]);
    for (std::size_t i = 0; i < flags.size(); ++i) buf[i] = flags[i];
    out.push_back(reid::ap_oracle(d, std::span<const bool>(buf.get(), flags.size())));
  }
  return out;
}

}  // namespace mareid::test
