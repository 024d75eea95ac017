#pragma once

// Part pooling, retrieval descriptors, distances and mAP / CMC evaluation.

#include <nlohmann/json.hpp>

#include <span>
#include <stdexcept>
#include <vector>

#include "mareid/autograd.hpp"

namespace mareid::reid {

using ag::Var;

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kPoolEps = 1e-8;

// featmap [N,L,d], parts [N,K+1,L] (last channel background) -> [N,K,d].
Var weighted_pool(const Var& featmap, const Var& parts);
// Foreground mass of each part normalized over parts, [N,K].
Var part_visibility(const Var& parts);

struct Descriptor {
  std::vector<double> global;
  std::vector<std::vector<double>> parts;
  std::vector<double> visibility;
};

// One descriptor per batch item. global_map [N,L,d_g], part_featmap [N,L,d_p].
std::vector<Descriptor> build_descriptors(const Var& global_map, const Var& part_featmap, const Var& parts);
Descriptor build_descriptor(const Var& global_map, const Var& part_featmap, const Var& parts);

enum class DescriptorMode { kGlobal, kFull };

double descriptor_distance(const Descriptor& a, const Descriptor& b, double global_weight = 0.5,
                           DescriptorMode mode = DescriptorMode::kFull);

struct RetrievalResult {
  std::vector<double> ap;   // per evaluated query
  std::vector<double> cmc;  // cmc[r] = fraction with a hit within rank r+1
  double mAP = 0.0;
  int num_queries = 0;   // evaluated
  int num_excluded = 0;  // identity absent from the filtered gallery

  double rank(int k) const;
};

// distances is row-major [Q, G].
RetrievalResult evaluate_retrieval(std::span<const double> distances, std::span<const int> query_ids,
                                   std::span<const int> query_cams, std::span<const int> gallery_ids,
                                   std::span<const int> gallery_cams, int max_rank = 50);
RetrievalResult evaluate_retrieval(std::span<const Descriptor> queries, std::span<const int> query_ids,
                                   std::span<const int> query_cams, std::span<const Descriptor> gallery,
                                   std::span<const int> gallery_ids, std::span<const int> gallery_cams,
                                   DescriptorMode mode = DescriptorMode::kFull, double global_weight = 0.5,
                                   int max_rank = 50);

// Reference AP for one ranked list: items sorted by distance, ties by index.
double ap_oracle(std::span<const double> distances, std::span<const bool> relevant);

nlohmann::json metrics_json(const RetrievalResult& r);

}  // namespace mareid::reid
