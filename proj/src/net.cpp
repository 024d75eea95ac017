#include "mareid/net.hpp"

#include <cmath>
#include <stdexcept>

namespace mareid::net {

namespace {

std::vector<double> normal_values(Rng& rng, std::size_t n, double stddev) {
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng, 0.0, stddev);
  return v;
}

std::vector<double> uniform_values(Rng& rng, std::size_t n, double limit) {
  std::vector<double> v(n);
  for (double& x : v) x = uniform(rng, -limit, limit);
  return v;
}

}  // namespace

void NetConfig::validate() const {
  if (height % kStride || width % kStride || height < 2 * kStride || width < 2 * kStride)
    throw ag::ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                         " must be a multiple of the stride " + std::to_string(kStride) + " and give a grid >= 2x2");
  if (num_parts < 1) throw std::invalid_argument("num_parts must be >= 1");
  if (model_dim % heads) throw std::invalid_argument("model_dim must be divisible by heads");
  if (encoder_layers < 0) throw std::invalid_argument("encoder_layers must be >= 0");
  if (pos_mode == PosMode::kAdd && !learned_pos && feature_dim % 4)
    throw std::invalid_argument("sinusoidal embeddings need feature_dim divisible by 4");
  if (pos_mode == PosMode::kConcat && pos_dim % 4) throw std::invalid_argument("pos_dim must be divisible by 4");
}

Var ParamStore::add(const std::string& name, ag::Shape shape, std::vector<double> values, bool decay,
                    const std::string& group) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  Var v = Var::parameter(std::move(shape), std::move(values));
  index_[name] = entries_.size();
  entries_.push_back({name, v, decay, group});
  return v;
}

const Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return entries_[it->second].var;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : entries_) n += p.var.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : entries_) {
    auto g = p.var.mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

Var scaled_dot_product_attention(const Var& q, const Var& k, const Var& v) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Var scores = ag::scale(ag::matmul(q, ag::transpose(k, -1, -2)), scale);
  return ag::matmul(ag::softmax(scores, -1), v);
}

Var self_attention(const Var& tokens) { return scaled_dot_product_attention(tokens, tokens, tokens); }

Var normalize_heatmaps(const Var& activations) {
  return ag::div(activations, ag::add_scalar(ag::sum(activations, -1, true), 1e-8));
}

HeadOutputs project_maps(const Var& keypoint_embeddings, const Var& segment_embeddings, const Var& global) {
  const Var ft = ag::transpose(global, -1, -2);  // [N,d,L]
  HeadOutputs out;
  out.heatmaps = normalize_heatmaps(ag::sigmoid(ag::matmul(keypoint_embeddings, ft)));
  out.seg_logits = ag::matmul(segment_embeddings, ft);
  return out;
}

std::vector<double> sinusoidal_position_embedding(int h, int w, int dim) {
  const auto coords = motion::grid_coordinates(h, w);
  const int half = dim / 2;
  const int freqs = half / 2;
  std::vector<double> table(static_cast<std::size_t>(h) * w * dim);
  for (int l = 0; l < h * w; ++l)
    for (int axis = 0; axis < 2; ++axis) {
      // grid coordinates in [-1,1] are rescaled to cell units
      const double pos = (coords[2 * l + axis] + 1.0) * 0.5 * ((axis == 0 ? w : h) - 1);
      for (int f = 0; f < freqs; ++f) {
        const double rate = std::pow(100.0, -static_cast<double>(f) / std::max(freqs, 1));
        table[l * dim + axis * half + 2 * f] = std::sin(pos * rate);
        table[l * dim + axis * half + 2 * f + 1] = std::cos(pos * rate);
      }
    }
  return table;
}

Var images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ag::ShapeError("no images");
  const int N = static_cast<int>(images.size());
  const int H = images[0].height, W = images[0].width, C = images[0].channels;
  std::vector<double> v(static_cast<std::size_t>(N) * C * H * W);
  for (int n = 0; n < N; ++n) {
    const Image& img = images[n];
    if (img.height != H || img.width != W || img.channels != C) throw ag::ShapeError("images differ in shape");
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          v[((static_cast<std::size_t>(n) * C + c) * H + y) * W + x] = (img.at(y, x, c) - 0.5) * 4.0;
  }
  return Var::constant({N, C, H, W}, std::move(v));
}

// --- Network ---

void Network::add_conv(const std::string& name, int in, int out, Rng& rng) {
  params_.add(name + ".weight", {out, in, 3, 3}, normal_values(rng, static_cast<std::size_t>(out) * in * 9,
                                                                std::sqrt(2.0 / (in * 9))));
  params_.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
}

void Network::add_dense(const std::string& name, int in, int out, Rng& rng, const std::string& group) {
  params_.add(name + ".weight", {out, in},
              uniform_values(rng, static_cast<std::size_t>(out) * in, std::sqrt(6.0 / (in + out))), true, group);
  params_.add(name + ".bias", {out}, std::vector<double>(out, 0.0), true, group);
}

void Network::add_norm(const std::string& name, int dim) {
  params_.add(name + ".gamma", {dim}, std::vector<double>(dim, 1.0), false);
  params_.add(name + ".beta", {dim}, std::vector<double>(dim, 0.0), false);
}

void Network::add_attention(const std::string& name, Rng& rng) {
  const int d = cfg_.model_dim;
  for (const char* p : {".q", ".k", ".v", ".o"}) add_dense(name + p, d, d, rng);
}

Network::Network(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto& ch = cfg_.backbone_channels;
  add_conv("backbone.conv1", 3, ch[0], rng);
  add_conv("backbone.conv2", ch[0], ch[1], rng);
  add_conv("backbone.conv3", ch[1], ch[2], rng);
  if (cfg_.backbone_norm)
    for (int i = 0; i < 3; ++i) add_norm("backbone.norm" + std::to_string(i + 1), ch[i]);
  add_conv("backbone.conv4", ch[2], cfg_.feature_dim, rng);

  const int h = cfg_.grid_h(), w = cfg_.grid_w(), L = h * w;
  const int pos_dim = cfg_.pos_mode == PosMode::kAdd ? cfg_.feature_dim : cfg_.pos_dim;
  const int token_dim = cfg_.pos_mode == PosMode::kAdd ? cfg_.feature_dim : cfg_.feature_dim + cfg_.pos_dim;
  if (cfg_.learned_pos)
    params_.add("pos_embedding", {L, pos_dim}, normal_values(rng, static_cast<std::size_t>(L) * pos_dim, 0.1));
  else
    pos_table_ = sinusoidal_position_embedding(h, w, pos_dim);
  add_dense("input_proj", token_dim, cfg_.model_dim, rng);

  for (int i = 0; i < cfg_.encoder_layers; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    add_attention(p + ".attn", rng);
    add_norm(p + ".norm1", cfg_.model_dim);
    add_dense(p + ".ffn1", cfg_.model_dim, cfg_.ffn_dim, rng);
    add_dense(p + ".ffn2", cfg_.ffn_dim, cfg_.model_dim, rng);
    add_norm(p + ".norm2", cfg_.model_dim);
  }

  const int K = cfg_.num_parts, d = cfg_.model_dim;
  params_.add("queries.keypoint", {K, d}, normal_values(rng, static_cast<std::size_t>(K) * d, 1.0), true, "keypoint");
  params_.add("queries.segment", {K + 1, d}, normal_values(rng, static_cast<std::size_t>(K + 1) * d, 1.0));
  if (cfg_.use_decoder) {
    add_attention("decoder.self_attn", rng);
    add_norm("decoder.norm1", d);
    add_attention("decoder.cross_attn", rng);
    add_norm("decoder.norm2", d);
    add_dense("decoder.ffn1", d, cfg_.ffn_dim, rng);
    add_dense("decoder.ffn2", cfg_.ffn_dim, d, rng);
    add_norm("decoder.norm3", d);
    add_norm("decoder.final_norm", d);
  }
  add_dense("keypoint_head.fc1", d, d, rng, "keypoint");
  add_dense("keypoint_head.fc2", d, d, rng, "keypoint");
  add_dense("segment_head.fc1", d, d, rng);
  add_dense("segment_head.fc2", d, d, rng);

  std::vector<double> jb(4 * static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    jb[4 * k] = 1.0;
    jb[4 * k + 3] = 1.0;
  }
  params_.add("jacobian_head.weight", {4 * K, d}, std::vector<double>(4 * static_cast<std::size_t>(K) * d, 0.0), true,
              "keypoint");
  params_.add("jacobian_head.bias", {4 * K}, std::move(jb), true, "keypoint");

  if (cfg_.num_classes > 0) {
    for (const char* name : {"classifier.global", "classifier.part"}) {
      const std::string n = name;
      params_.add(n + ".weight", {cfg_.num_classes, d},
                  std::vector<double>(static_cast<std::size_t>(cfg_.num_classes) * d, 0.0));
      params_.add(n + ".bias", {cfg_.num_classes}, std::vector<double>(cfg_.num_classes, 0.0));
    }
  }
}

Var Network::conv(const std::string& name, const Var& x, int stride) const {
  return ag::conv2d(x, params_.get(name + ".weight"), params_.get(name + ".bias"), stride, 1);
}

Var Network::dense(const std::string& name, const Var& x) const {
  return ag::linear(x, params_.get(name + ".weight"), params_.get(name + ".bias"));
}

Var Network::norm(const std::string& name, const Var& x) const {
  return ag::layer_norm(x, params_.get(name + ".gamma"), params_.get(name + ".beta"));
}

Var Network::attention(const std::string& name, const Var& q_in, const Var& kv_in) const {
  const int N = q_in.dim(0), Lq = q_in.dim(1), Lk = kv_in.dim(1);
  const int H = cfg_.heads, dh = cfg_.model_dim / H;
  auto split = [&](const Var& x, int len) { return ag::permute(ag::reshape(x, {N, len, H, dh}), {0, 2, 1, 3}); };
  const Var q = split(dense(name + ".q", q_in), Lq);
  const Var k = split(dense(name + ".k", kv_in), Lk);
  const Var v = split(dense(name + ".v", kv_in), Lk);
  Var out = scaled_dot_product_attention(q, k, v);  // [N,H,Lq,dh]
  out = ag::reshape(ag::permute(out, {0, 2, 1, 3}), {N, Lq, cfg_.model_dim});
  return dense(name + ".o", out);
}

Var Network::ffn(const std::string& name, const Var& x) const {
  return dense(name + "2", ag::gelu(dense(name + "1", x)));
}

Var Network::extract_features(const Var& images) const {
  if (images.rank() != 4 || images.dim(2) != cfg_.height || images.dim(3) != cfg_.width)
    throw ag::ShapeError("extract_features: expected [N,3," + std::to_string(cfg_.height) + "," +
                         std::to_string(cfg_.width) + "], got " + ag::shape_str(images.shape()));
  auto block = [&](int i, const Var& in) {
    Var y = conv("backbone.conv" + std::to_string(i), in, 2);
    if (cfg_.backbone_norm)
      y = ag::permute(norm("backbone.norm" + std::to_string(i), ag::permute(y, {0, 2, 3, 1})), {0, 3, 1, 2});
    return ag::gelu(y);
  };
  Var x = block(3, block(2, block(1, images)));
  return conv("backbone.conv4", x, 1);
}

Var Network::tokens(const Var& features) const {
  const int N = features.dim(0), D = features.dim(1), h = features.dim(2), w = features.dim(3);
  const int L = h * w;
  Var t = ag::reshape(ag::permute(features, {0, 2, 3, 1}), {N, L, D});
  const int pos_dim = cfg_.pos_mode == PosMode::kAdd ? D : cfg_.pos_dim;
  const Var pos = cfg_.learned_pos ? params_.get("pos_embedding") : Var::constant({L, pos_dim}, pos_table_);
  if (cfg_.pos_mode == PosMode::kAdd) return ag::add(t, pos);
  return ag::concat({t, ag::add(Var::constant({N, L, pos_dim}, 0.0), pos)}, 2);
}

Var Network::encode(const Var& tokens) const {
  Var x = dense("input_proj", tokens);
  for (int i = 0; i < cfg_.encoder_layers; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    const Var a = norm(p + ".norm1", x);
    x = ag::add(x, attention(p + ".attn", a, a));
    x = ag::add(x, ffn(p + ".ffn", norm(p + ".norm2", x)));
  }
  return x;
}

std::pair<Var, Var> Network::decode_queries(const Var& global) const {
  const int N = global.dim(0), K = cfg_.num_parts, d = cfg_.model_dim;
  Var q = ag::concat({params_.get("queries.keypoint"), params_.get("queries.segment")}, 0);  // [2K+1,d]
  q = ag::add(Var::constant({N, 2 * K + 1, d}, 0.0), q);
  if (cfg_.use_decoder) {
    const Var a = norm("decoder.norm1", q);
    q = ag::add(q, attention("decoder.self_attn", a, a));
    q = ag::add(q, attention("decoder.cross_attn", norm("decoder.norm2", q), global));
    q = norm("decoder.final_norm", ag::add(q, ffn("decoder.ffn", norm("decoder.norm3", q))));
  }
  return {ag::slice(q, 1, 0, K), ag::slice(q, 1, K, K + 1)};
}

NetOutputs Network::forward(const Var& images) const {
  NetOutputs out;
  out.features = extract_features(images);
  out.global = encode(tokens(out.features));
  std::tie(out.keypoint_embeddings, out.segment_embeddings) = decode_queries(out.global);
  const Var kp = dense("keypoint_head.fc2", ag::gelu(dense("keypoint_head.fc1", out.keypoint_embeddings)));
  const Var seg = dense("segment_head.fc2", ag::gelu(dense("segment_head.fc1", out.segment_embeddings)));
  out.heads = project_maps(kp, seg, out.global);
  out.parts = ag::softmax(out.heads.seg_logits, 1);
  const int h = cfg_.grid_h(), w = cfg_.grid_w();
  out.keypoints.coords = motion::soft_argmax(out.heads.heatmaps, h, w, 1.0);
  out.keypoints.jacobians = motion::jacobian_field(out.global, out.heads.heatmaps, params_.get("jacobian_head.weight"),
                                                   params_.get("jacobian_head.bias"));
  return out;
}

Var Network::classify_global(const Var& vec) const { return dense("classifier.global", vec); }
Var Network::classify_part(const Var& vec) const { return dense("classifier.part", vec); }

}  // namespace mareid::net
