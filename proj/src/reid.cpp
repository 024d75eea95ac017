#include "mareid/reid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mareid::reid {

Var weighted_pool(const Var& featmap, const Var& parts) {
  if (featmap.rank() != 3 || parts.rank() != 3 || parts.dim(0) != featmap.dim(0) || parts.dim(2) != featmap.dim(1))
    throw ContractError("weighted_pool: featmap [N,L,d] and parts [N,K+1,L] required, got " +
                        ag::shape_str(featmap.shape()) + " and " + ag::shape_str(parts.shape()));
  const int k = parts.dim(1) - 1;
  Var fg = ag::slice(parts, 1, 0, k);
  Var num = ag::matmul(fg, featmap);
  Var mass = ag::add_scalar(ag::sum(fg, 2, true), kPoolEps);
  return ag::div(num, mass);
}

Var part_visibility(const Var& parts) {
  const int k = parts.dim(1) - 1;
  Var mass = ag::sum(ag::slice(parts, 1, 0, k), 2);
  return ag::div(mass, ag::add_scalar(ag::sum(mass, 1, true), kPoolEps));
}

namespace {

std::vector<double> normalized(std::span<const double> v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  std::vector<double> out(v.begin(), v.end());
  if (n2 > 0.0) {
    double inv = 1.0 / std::sqrt(n2);
    for (double& x : out) x *= inv;
  }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::vector<Descriptor> build_descriptors(const Var& global_map, const Var& part_featmap, const Var& parts) {
  ag::NoGradGuard ng;
  const int n = global_map.dim(0), dg = global_map.dim(2);
  const int k = parts.dim(1) - 1, dp = part_featmap.dim(2);
  Var g = ag::mean(global_map, 1);
  Var pooled = weighted_pool(part_featmap, parts);
  auto gv = g.value();
  auto pv = pooled.value();
  auto pr = parts.value();
  const int l = parts.dim(2);
  std::vector<Descriptor> out(n);
  for (int i = 0; i < n; ++i) {
    Descriptor& d = out[i];
    d.global = normalized(gv.subspan(static_cast<std::size_t>(i) * dg, dg));
    d.parts.resize(k);
    std::vector<double> mass(k, 0.0);
    for (int p = 0; p < k; ++p) {
      d.parts[p] = normalized(pv.subspan((static_cast<std::size_t>(i) * k + p) * dp, dp));
      for (int x = 0; x < l; ++x) mass[p] += pr[(static_cast<std::size_t>(i) * (k + 1) + p) * l + x];
    }
    double total = std::accumulate(mass.begin(), mass.end(), 0.0);
    d.visibility.resize(k);
    for (int p = 0; p < k; ++p) d.visibility[p] = total > 0.0 ? mass[p] / total : 1.0 / k;
  }
  return out;
}

Descriptor build_descriptor(const Var& global_map, const Var& part_featmap, const Var& parts) {
  if (global_map.dim(0) != 1) throw ContractError("build_descriptor expects a single item; use build_descriptors");
  return build_descriptors(global_map, part_featmap, parts).front();
}

double descriptor_distance(const Descriptor& a, const Descriptor& b, double wg, DescriptorMode mode) {
  if (a.global.size() != b.global.size() || a.parts.size() != b.parts.size())
    throw ContractError("descriptor_distance: descriptor shapes differ");
  double global = 1.0 - dot(a.global, b.global);
  if (mode == DescriptorMode::kGlobal) return std::max(0.0, global);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.parts.size(); ++k) {
    double v = std::min(a.visibility[k], b.visibility[k]);
    if (v <= 0.0) continue;
    num += v * (1.0 - dot(a.parts[k], b.parts[k]));
    den += v;
  }
  if (den <= 0.0) return std::max(0.0, wg * global);
  return std::max(0.0, wg * global + (1.0 - wg) * num / den);
}

double RetrievalResult::rank(int k) const {
  if (cmc.empty() || k < 1) return 0.0;
  return cmc[std::min<std::size_t>(k, cmc.size()) - 1];
}

RetrievalResult evaluate_retrieval(std::span<const double> dist, std::span<const int> qid, std::span<const int> qcam,
                                   std::span<const int> gid, std::span<const int> gcam, int max_rank) {
  const std::size_t nq = qid.size(), ng = gid.size();
  if (ng == 0) throw ContractError("evaluate_retrieval: empty gallery");
  if (dist.size() != nq * ng || qcam.size() != nq || gcam.size() != ng)
    throw ContractError("evaluate_retrieval: inconsistent sizes");
  RetrievalResult r;
  r.cmc.assign(max_rank, 0.0);
  std::vector<int> order;
  for (std::size_t q = 0; q < nq; ++q) {
    order.clear();
    int relevant = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      if (gid[g] == qid[q] && gcam[g] == qcam[q]) continue;
      order.push_back(static_cast<int>(g));
      if (gid[g] == qid[q]) ++relevant;
    }
    if (relevant == 0) {
      ++r.num_excluded;
      continue;
    }
    const double* row = dist.data() + q * ng;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row[a] < row[b]; });
    double ap = 0.0;
    int hits = 0, first = -1;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      if (gid[order[pos]] != qid[q]) continue;
      ++hits;
      if (first < 0) first = static_cast<int>(pos);
      ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
    }
    r.ap.push_back(ap / relevant);
    for (int k = first; k < max_rank; ++k) r.cmc[k] += 1.0;
  }
  r.num_queries = static_cast<int>(r.ap.size());
  if (r.num_queries > 0) {
    for (double& c : r.cmc) c /= r.num_queries;
    r.mAP = std::accumulate(r.ap.begin(), r.ap.end(), 0.0) / r.num_queries;
  }
  return r;
}

RetrievalResult evaluate_retrieval(std::span<const Descriptor> queries, std::span<const int> qid,
                                   std::span<const int> qcam, std::span<const Descriptor> gallery,
                                   std::span<const int> gid, std::span<const int> gcam, DescriptorMode mode,
                                   double wg, int max_rank) {
  std::vector<double> dist(queries.size() * gallery.size());
  for (std::size_t q = 0; q < queries.size(); ++q)
    for (std::size_t g = 0; g < gallery.size(); ++g)
      dist[q * gallery.size() + g] = descriptor_distance(queries[q], gallery[g], wg, mode);
  return evaluate_retrieval(dist, qid, qcam, gid, gcam, max_rank);
}

double ap_oracle(std::span<const double> d, std::span<const bool> relevant) {
  const std::size_t n = d.size();
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (d[j] < d[i] || (d[j] == d[i] && j < i)) ++ahead;
    rank[i] = ahead + 1;
  }
  std::vector<double> precision_at(n + 1, -1.0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!relevant[i]) continue;
    ++total;
    std::size_t better = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (relevant[j] && rank[j] <= rank[i]) ++better;
    precision_at[rank[i]] = static_cast<double>(better) / static_cast<double>(rank[i]);
  }
  if (total == 0) return 0.0;
  double sum = 0.0;
  for (double p : precision_at)
    if (p >= 0.0) sum += p;
  return sum / static_cast<double>(total);
}

nlohmann::json metrics_json(const RetrievalResult& r) {
  return {{"mAP", r.mAP},
          {"rank1", r.rank(1)},
          {"rank5", r.rank(5)},
          {"rank10", r.rank(10)},
          {"num_queries", r.num_queries},
          {"num_excluded", r.num_excluded}};
}

}  // namespace mareid::reid
