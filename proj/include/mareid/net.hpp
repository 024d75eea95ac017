#pragma once

// Conv backbone, transformer encoder/decoder, keypoint and segmentation
// heads. Feature maps inside the transformer are token-major [N, h*w, d].

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mareid/autograd.hpp"
#include "mareid/image.hpp"
#include "mareid/motion.hpp"
#include "mareid/rng.hpp"

namespace mareid::net {

using ag::Var;

enum class PosMode { kAdd, kConcat };

struct NetConfig {
  int height = 64;
  int width = 32;
  std::array<int, 3> backbone_channels{32, 64, 128};
  bool backbone_norm = true;  // per-pixel channel layer norm after conv1..3
  int feature_dim = 64;  // D, backbone output depth
  int model_dim = 64;    // d_g
  int heads = 4;
  int ffn_dim = 128;
  int encoder_layers = 2;
  bool use_decoder = true;
  int num_parts = 10;  // K
  PosMode pos_mode = PosMode::kAdd;
  bool learned_pos = false;
  int pos_dim = 16;     // only used when concatenating
  int num_classes = 0;  // identity classifiers are created when > 0

  static constexpr int kStride = 8;
  int grid_h() const { return height / kStride; }
  int grid_w() const { return width / kStride; }
  void validate() const;
};

struct Param {
  std::string name;
  Var var;
  bool decay = true;   // false for normalization parameters
  std::string group;   // "keypoint" marks the keypoint branch
};

class ParamStore {
 public:
  Var add(const std::string& name, ag::Shape shape, std::vector<double> values, bool decay = true,
          const std::string& group = "");
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::vector<Param>& entries() { return entries_; }
  const std::vector<Param>& entries() const { return entries_; }
  std::size_t total_size() const;
  void zero_grad();

 private:
  std::vector<Param> entries_;
  std::map<std::string, std::size_t> index_;
};

struct HeadOutputs {
  Var heatmaps;      // [N,K,L], each map sums to one
  Var seg_logits;    // [N,K+1,L]
};

struct NetOutputs {
  Var features;      // backbone map [N,D,h,w]
  Var global;        // f_g [N,L,d_g]
  Var keypoint_embeddings;  // [N,K,d_g]
  Var segment_embeddings;   // [N,K+1,d_g]
  HeadOutputs heads;
  Var parts;         // [N,K+1,L], softmax over channels
  motion::KeypointState keypoints;
};

// Attention without projections: softmax(T Tᵀ/√D′) T over [..., L, D′].
Var self_attention(const Var& tokens);
Var scaled_dot_product_attention(const Var& q, const Var& k, const Var& v);

// Heatmaps: sigmoid(e_k · f[x]) normalised over the grid (sum + 1e-8).
// Segmentation logits: e_k · f[x].
HeadOutputs project_maps(const Var& keypoint_embeddings, const Var& segment_embeddings, const Var& global);
Var normalize_heatmaps(const Var& activations);

// Fixed 2D sinusoidal table, [h*w, dim]; half the channels encode x, half y.
std::vector<double> sinusoidal_position_embedding(int h, int w, int dim);

// [N,3,H,W] tensor scaled to roughly zero mean.
Var images_to_tensor(std::span<const Image> images);

class Network {
 public:
  Network(const NetConfig& cfg, Rng& init_rng);

  const NetConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  Var extract_features(const Var& images) const;  // [N,D,h,w]
  Var tokens(const Var& features) const;          // [N,L,D′] with position embeddings
  Var encode(const Var& tokens) const;            // f_g [N,L,d_g]
  // Keypoint and segment embeddings, [N,K,d] and [N,K+1,d].
  std::pair<Var, Var> decode_queries(const Var& global) const;
  NetOutputs forward(const Var& images) const;

  Var classify_global(const Var& vec) const;  // [..., d] -> [..., C]
  Var classify_part(const Var& vec) const;

 private:
  Var conv(const std::string& name, const Var& x, int stride) const;
  Var dense(const std::string& name, const Var& x) const;
  Var norm(const std::string& name, const Var& x) const;
  Var attention(const std::string& name, const Var& q_in, const Var& kv_in) const;
  Var ffn(const std::string& name, const Var& x) const;

  void add_conv(const std::string& name, int in, int out, Rng& rng);
  void add_dense(const std::string& name, int in, int out, Rng& rng, const std::string& group = "");
  void add_norm(const std::string& name, int dim);
  void add_attention(const std::string& name, Rng& rng);

  NetConfig cfg_;
  ParamStore params_;
  std::vector<double> pos_table_;
};

}  // namespace mareid::net
