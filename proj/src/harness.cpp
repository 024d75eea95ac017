#include "mareid/harness.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace mareid::harness {

using json = nlohmann::json;

// Configuration ----------------------------------------------------------------

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + what);
}

template <class T>
T parse_value(const std::string& key, const std::string& s);

template <>
int parse_value<int>(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  try {
    long v = std::stol(s, &pos);
    if (pos == s.size() && v >= INT32_MIN && v <= INT32_MAX) return static_cast<int>(v);
  } catch (const std::exception&) {
  }
  bad_value(key, s, "an integer");
}

template <>
std::uint64_t parse_value<std::uint64_t>(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  try {
    if (!s.empty() && s[0] != '-') {
      unsigned long long v = std::stoull(s, &pos);
      if (pos == s.size()) return v;
    }
  } catch (const std::exception&) {
  }
  bad_value(key, s, "an unsigned integer");
}

template <>
double parse_value<double>(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  try {
    double v = std::stod(s, &pos);
    if (pos == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  bad_value(key, s, "a number");
}

template <>
bool parse_value<bool>(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  bad_value(key, s, "a boolean");
}

template <>
std::string parse_value<std::string>(const std::string&, const std::string& s) {
  return s;
}

struct Key {
  std::string name;
  bool architecture = false;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<json(const TrainConfig&)> get;
};

template <class T, class Access>
Key field(const char* name, Access access, bool architecture = false) {
  Key k;
  k.name = name;
  k.architecture = architecture;
  k.set = [name, access](TrainConfig& c, const std::string& v) { access(c) = parse_value<T>(name, v); };
  k.get = [access](const TrainConfig& c) { return json(access(const_cast<TrainConfig&>(c))); };
  return k;
}

#define MAREID_FIELD(T, key, member, arch) field<T>(key, [](TrainConfig& c) -> T& { return c.member; }, arch)

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> t = {
        MAREID_FIELD(std::string, "data_dir", data_dir, false),
        MAREID_FIELD(std::string, "out_dir", out_dir, false),
        MAREID_FIELD(int, "epochs", epochs, false),
        MAREID_FIELD(int, "batch_identities", batch_identities, false),
        MAREID_FIELD(int, "steps_per_epoch", steps_per_epoch, false),
        MAREID_FIELD(double, "lr", lr, false),
        MAREID_FIELD(double, "momentum", momentum, false),
        MAREID_FIELD(double, "weight_decay", weight_decay, false),
        MAREID_FIELD(double, "lr_decay_factor", lr_decay_factor, false),
        MAREID_FIELD(int, "lr_decay_period", lr_decay_period, false),
        MAREID_FIELD(double, "grad_clip", grad_clip, false),
        MAREID_FIELD(int, "warmup_epochs", warmup_epochs, false),
        MAREID_FIELD(std::uint64_t, "seed", seed, false),
        MAREID_FIELD(bool, "freeze_keypoints", freeze_keypoints, false),
        MAREID_FIELD(bool, "segmentation_branch", segmentation_branch, false),
        MAREID_FIELD(bool, "keep_all_checkpoints", keep_all_checkpoints, false),
        MAREID_FIELD(bool, "detach_consistency_features", detach_consistency_features, false),
        MAREID_FIELD(bool, "detach_visibility", detach_visibility, false),
        MAREID_FIELD(int, "height", net.height, true),
        MAREID_FIELD(int, "width", net.width, true),
        MAREID_FIELD(bool, "backbone_norm", net.backbone_norm, true),
        MAREID_FIELD(int, "feature_dim", net.feature_dim, true),
        MAREID_FIELD(int, "model_dim", net.model_dim, true),
        MAREID_FIELD(int, "heads", net.heads, true),
        MAREID_FIELD(int, "ffn_dim", net.ffn_dim, true),
        MAREID_FIELD(int, "encoder_layers", net.encoder_layers, true),
        MAREID_FIELD(bool, "use_decoder", net.use_decoder, true),
        MAREID_FIELD(int, "num_parts", net.num_parts, true),
        MAREID_FIELD(bool, "learned_pos", net.learned_pos, true),
        MAREID_FIELD(int, "pos_dim", net.pos_dim, true),
        MAREID_FIELD(int, "num_classes", net.num_classes, true),
        MAREID_FIELD(double, "lambda1", weights.id_global, false),
        MAREID_FIELD(double, "lambda2", weights.triplet_global, false),
        MAREID_FIELD(double, "lambda3", weights.id_part, false),
        MAREID_FIELD(double, "lambda4", weights.triplet_part, false),
        MAREID_FIELD(double, "lambda5", weights.equivariance, false),
        MAREID_FIELD(double, "lambda6", weights.feature_consistency, false),
        MAREID_FIELD(int, "tps_grid", tps.grid, false),
        MAREID_FIELD(double, "tps_std", tps.tps_std, false),
        MAREID_FIELD(double, "tps_affine_std", tps.affine_std, false),
        MAREID_FIELD(double, "tps_translation_std", tps.translation_std, false),
        MAREID_FIELD(bool, "augment_flip", augment.flip, false),
        MAREID_FIELD(bool, "augment_pad_crop", augment.pad_crop, false),
        MAREID_FIELD(bool, "augment_erase", augment.erase, false),
        MAREID_FIELD(int, "augment_pad", augment.pad, false),
        MAREID_FIELD(double, "erase_prob", augment.erase_prob, false),
    };
    Key channels;
    channels.name = "backbone_channels";
    channels.architecture = true;
    channels.set = [](TrainConfig& c, const std::string& v) {
      std::array<int, 3> ch{};
      std::stringstream ss(v);
      std::string item;
      int i = 0;
      while (std::getline(ss, item, ',')) {
        if (i >= 3) bad_value("backbone_channels", v, "three comma-separated integers");
        ch[i++] = parse_value<int>("backbone_channels", item);
      }
      if (i != 3) bad_value("backbone_channels", v, "three comma-separated integers");
      c.net.backbone_channels = ch;
    };
    channels.get = [](const TrainConfig& c) {
      const auto& ch = c.net.backbone_channels;
      return json(std::to_string(ch[0]) + "," + std::to_string(ch[1]) + "," + std::to_string(ch[2]));
    };
    t.push_back(channels);
    Key pos;
    pos.name = "pos_mode";
    pos.architecture = true;
    pos.set = [](TrainConfig& c, const std::string& v) {
      if (v == "add")
        c.net.pos_mode = net::PosMode::kAdd;
      else if (v == "concat")
        c.net.pos_mode = net::PosMode::kConcat;
      else
        bad_value("pos_mode", v, "add|concat");
    };
    pos.get = [](const TrainConfig& c) { return json(c.net.pos_mode == net::PosMode::kAdd ? "add" : "concat"); };
    t.push_back(pos);
    return t;
  }();
  return table;
}

#undef MAREID_FIELD

const Key& find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_identities < 2) fail("batch_identities must be >= 2");
  if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
  if (!(lr >= 0)) fail("lr must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0,1)");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (!(lr_decay_factor > 0)) fail("lr_decay_factor must be > 0");
  if (lr_decay_period < 1) fail("lr_decay_period must be >= 1");
  if (!(grad_clip >= 0)) fail("grad_clip must be >= 0");
  if (warmup_epochs < 0) fail("warmup_epochs must be >= 0");
  if (tps.grid < 2) fail("tps_grid must be >= 2");
  if (tps.tps_std < 0 || tps.affine_std < 0 || tps.translation_std < 0) fail("tps deviations must be >= 0");
  if (augment.pad < 0 || augment.erase_prob < 0 || augment.erase_prob > 1) fail("invalid augmentation settings");
  try {
    net.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
  try {
    weights.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

json config_to_json(const TrainConfig& cfg) {
  json j = json::object();
  for (const auto& k : keys()) j[k.name] = k.get(cfg);
  return j;
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, value);
}

TrainConfig config_from_json(const json& j, TrainConfig base) {
  if (!j.is_object()) throw ConfigError("config must be a key/value object");
  for (const auto& [k, v] : j.items()) apply_override(base, k, v.is_string() ? v.get<std::string>() : v.dump());
  return base;
}

TrainConfig load_train_config(const fs::path& path, TrainConfig base) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  if (root.IsNull()) return base;
  if (!root.IsMap()) throw ConfigError("config file " + path.string() + " must be a key: value map");
  for (const auto& kv : root) {
    if (!kv.second.IsScalar())
      throw ConfigError("config key '" + kv.first.as<std::string>() + "' must have a scalar value");
    apply_override(base, kv.first.as<std::string>(), kv.second.as<std::string>());
  }
  return base;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

std::uint64_t config_hash(const TrainConfig& cfg) {
  json j = json::object();
  for (const auto& k : keys())
    if (k.architecture) j[k.name] = k.get(cfg);
  return fnv1a(j.dump());
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  return cfg.lr * std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_period);
}

// Data -----------------------------------------------------------------------------

TrainData make_train_data(std::vector<Image> images, std::vector<int> ids) {
  TrainData d;
  d.images = std::move(images);
  d.ids = std::move(ids);
  std::vector<int> uniq = d.ids;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  d.num_classes = static_cast<int>(uniq.size());
  for (int id : d.ids)
    d.labels.push_back(static_cast<int>(std::lower_bound(uniq.begin(), uniq.end(), id) - uniq.begin()));
  d.record_ids.resize(d.ids.size());
  for (std::size_t i = 0; i < d.ids.size(); ++i) d.record_ids[i] = static_cast<int>(i);
  return d;
}

TrainData load_train_data(const fs::path& data_dir) {
  const fs::path mp = synth::manifest_path(data_dir, synth::Split::kTrain);
  if (!fs::exists(mp)) throw ConfigError("dataset manifest not found: " + mp.string());
  auto m = synth::load_manifest(mp);
  auto split = synth::load_split(data_dir, m);
  return make_train_data(std::move(split.images), std::move(split.ids));
}

PreparedBatch prepare_batch(const TrainData& data, const synth::QuadrupletBatch& batch, const TrainConfig& cfg,
                            Rng& rng) {
  PreparedBatch out;
  const bool deform = cfg.weights.equivariance > 0.0;
  for (std::size_t i = 0; i < batch.record_indices.size(); ++i) {
    const int r = batch.record_indices[i];
    synth::AugmentConfig aug = cfg.augment;
    if (i % 4 == 0) aug.erase = false;
    out.images.push_back(synth::augment(data.images.at(r), aug, rng));
    out.labels.push_back(data.labels.at(r));
    if (deform) {
      out.tps.push_back(motion::sample_tps(rng, cfg.tps));
      out.deformed.push_back(motion::apply_deformation(out.images.back(), out.tps.back()));
    }
  }
  return out;
}

// Losses and optimisation ------------------------------------------------------

LossGraph compute_losses(const net::Network& model, const PreparedBatch& batch, const TrainConfig& cfg) {
  const auto& w = cfg.weights;
  const auto& nc = model.config();
  const int n = static_cast<int>(batch.images.size());
  if (n == 0 || n % 4) throw TrainingError("batch must hold whole quadruplets, got " + std::to_string(n) + " images");
  if (nc.num_classes <= 0) throw TrainingError("model has no identity classifier (num_classes = 0)");
  const int h = nc.grid_h(), wd = nc.grid_w(), d = nc.model_dim;

  net::NetOutputs out = model.forward(net::images_to_tensor(batch.images));
  LossGraph g;
  auto& t = g.terms;
  Var gvec = ag::mean(out.global, 1);
  if (w.id_global > 0) t.id_global = losses::identity_loss(model.classify_global(gvec), batch.labels);
  if (w.triplet_global > 0) t.triplet_global = losses::triplet_loss(losses::l2_normalize(gvec), batch.labels);

  if (cfg.segmentation_branch) {
    if (w.id_part > 0 || w.triplet_part > 0) {
      Var pooled = reid::weighted_pool(out.global, out.parts);
      Var vis = reid::part_visibility(out.parts);
      if (cfg.detach_visibility) vis = vis.detach();
      if (w.id_part > 0) t.id_part = losses::part_identity_loss(model.classify_part(pooled), batch.labels, vis);
      if (w.triplet_part > 0)
        t.triplet_part = losses::part_triplet_loss(losses::l2_normalize(pooled), batch.labels, vis);
    }
    if (w.feature_consistency > 0) {
      const int groups = n / 4;
      std::array<std::vector<int>, 4> idx;
      for (int q = 0; q < groups; ++q)
        for (int r = 0; r < 4; ++r) idx[r].push_back(4 * q + r);
      Var fmap = ag::reshape(cfg.detach_consistency_features ? out.global.detach() : out.global, {n, h, wd, d});
      auto pick = [&](const Var& v, int r) { return ag::index_select(v, 0, idx[r]); };
      auto kp = [&](int r) {
        return motion::KeypointState{pick(out.keypoints.coords, r), pick(out.keypoints.jacobians, r)};
      };
      const Var parts_a = pick(out.parts, 0);
      const auto kp_a = kp(0);
      t.feature_consistency = losses::feature_consistency_loss(
          pick(fmap, 0), pick(fmap, 1), pick(fmap, 2), pick(fmap, 3), losses::flow_between(parts_a, kp(1), kp_a, h, wd),
          losses::flow_between(parts_a, kp(2), kp_a, h, wd), losses::flow_between(parts_a, kp(3), kp_a, h, wd));
    }
  }
  if (w.equivariance > 0) {
    if (batch.deformed.size() != batch.images.size()) throw TrainingError("batch is missing deformed images");
    net::NetOutputs outy = model.forward(net::images_to_tensor(batch.deformed));
    t.equivariance = losses::equivariance_loss(out.keypoints, outy.keypoints, batch.tps);
  }
  g.total = losses::total_loss(t, w);
  return g;
}

SgdState make_sgd_state(const net::ParamStore& params) {
  SgdState s;
  for (const auto& p : params.entries()) s.velocity.emplace_back(p.var.numel(), 0.0);
  return s;
}

void sgd_update(net::ParamStore& params, SgdState& state, double lr, double momentum, double weight_decay,
                bool freeze_keypoints) {
  auto& entries = params.entries();
  if (state.velocity.size() != entries.size()) throw TrainingError("optimizer state does not match the model");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i];
    if (freeze_keypoints && p.group == "keypoint") continue;
    auto g = p.var.grad();
    if (g.empty()) continue;
    auto v = p.var.mutable_value();
    auto& vel = state.velocity[i];
    const double wd = p.decay ? weight_decay : 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      vel[j] = momentum * vel[j] + g[j] + wd * v[j];
      v[j] -= lr * vel[j];
    }
  }
}

double clip_grad_norm(net::ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params.entries())
    for (double g : p.var.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params.entries())
      if (!p.var.grad().empty())
        for (double& g : p.var.mutable_grad()) g *= f;
  }
  return norm;
}

losses::LossBreakdown train_step(net::Network& model, SgdState& opt, const PreparedBatch& batch,
                                 const TrainConfig& cfg, double lr) {
  model.params().zero_grad();
  LossGraph g;
  try {
    g = compute_losses(model, batch, cfg);
  } catch (const losses::ContractError& e) {
    if (std::string(e.what()).find("non-finite") != std::string::npos)
      throw TrainingError(std::string("non-finite loss term: ") + e.what());
    throw;
  }
  const auto& b = g.total.breakdown;
  const std::pair<const char*, double> named[] = {{"id_global", b.id_global},
                                                  {"triplet_global", b.triplet_global},
                                                  {"id_part", b.id_part},
                                                  {"triplet_part", b.triplet_part},
                                                  {"equivariance", b.equivariance},
                                                  {"feature_consistency", b.feature_consistency},
                                                  {"total", b.total}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v)) throw TrainingError(std::string("non-finite loss term: ") + name);
  ag::backward(g.total.total);
  if (cfg.grad_clip > 0) clip_grad_norm(model.params(), cfg.grad_clip);
  sgd_update(model.params(), opt, lr, cfg.momentum, cfg.weight_decay, cfg.freeze_keypoints);
  return b;
}

// Checkpoints ------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'A', 'R', 'E', 'I', 'D', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json header;
  header["config"] = ckpt.config;
  header["config_hash"] = std::to_string(ckpt.config_hash);
  header["epoch"] = ckpt.epoch;
  header["rng_state"] = ckpt.rng_state;
  json tensors = json::array();
  std::uint64_t offset = 0;
  std::vector<const std::vector<double>*> blobs;
  for (const auto& [name, sv] : ckpt.params) {
    tensors.push_back({{"name", name}, {"kind", "param"}, {"shape", sv.first}, {"offset", offset}, {"count", sv.second.size()}});
    offset += sv.second.size();
    blobs.push_back(&sv.second);
  }
  for (const auto& [name, v] : ckpt.velocity) {
    tensors.push_back({{"name", name}, {"kind", "velocity"}, {"offset", offset}, {"count", v.size()}});
    offset += v.size();
    blobs.push_back(&v);
  }
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint: " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    os.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
    const std::uint64_t len = hs.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto* b : blobs)
      os.write(reinterpret_cast<const char*>(b->data()), static_cast<std::streamsize>(b->size() * sizeof(double)));
    if (!os) throw CheckpointError("short write on checkpoint: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(magic, sizeof magic);
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint: " + path.string());
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  std::string hs(len, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(len));
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint header: " + std::string(e.what()));
  }
  Checkpoint c;
  c.config = header.at("config");
  c.config_hash = std::stoull(header.at("config_hash").get<std::string>());
  c.epoch = header.at("epoch").get<int>();
  c.rng_state = header.at("rng_state").get<std::string>();
  const auto data_start = is.tellg();
  for (const auto& t : header.at("tensors")) {
    const auto count = t.at("count").get<std::uint64_t>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    std::vector<double> v(count);
    is.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(double)));
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw CheckpointError("truncated checkpoint: " + path.string());
    const auto name = t.at("name").get<std::string>();
    if (t.at("kind") == "param")
      c.params[name] = {t.at("shape").get<ag::Shape>(), std::move(v)};
    else
      c.velocity[name] = std::move(v);
  }
  return c;
}

Checkpoint make_checkpoint(const TrainConfig& cfg, const net::Network& model, const SgdState* opt, int epoch,
                           const Rng* rng) {
  Checkpoint c;
  TrainConfig full = cfg;
  full.net = model.config();
  c.config = config_to_json(full);
  c.config_hash = config_hash(full);
  c.epoch = epoch;
  if (rng) c.rng_state = rng_state(*rng);
  const auto& entries = model.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& p = entries[i];
    c.params[p.name] = {p.var.shape(), std::vector<double>(p.var.value().begin(), p.var.value().end())};
    if (opt) c.velocity[p.name] = opt->velocity.at(i);
  }
  return c;
}

TrainConfig checkpoint_config(const Checkpoint& ckpt) { return config_from_json(ckpt.config); }

namespace {

void load_weights(net::Network& model, const Checkpoint& ckpt) {
  for (auto& p : model.params().entries()) {
    auto it = ckpt.params.find(p.name);
    if (it == ckpt.params.end()) throw CheckpointError("checkpoint is missing parameter " + p.name);
    if (it->second.first != p.var.shape())
      throw CheckpointError("parameter " + p.name + " has shape " + ag::shape_str(it->second.first) +
                            ", model expects " + ag::shape_str(p.var.shape()));
    std::copy(it->second.second.begin(), it->second.second.end(), p.var.mutable_value().begin());
  }
}

}  // namespace

net::Network restore_network(const Checkpoint& ckpt) {
  TrainConfig cfg = checkpoint_config(ckpt);
  Rng scratch(0);
  net::Network model(cfg.net, scratch);
  load_weights(model, ckpt);
  return model;
}

// Fit ---------------------------------------------------------------------------------

json to_json(const LogRecord& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"lr", r.lr},
          {"id_global", r.loss.id_global},
          {"triplet_global", r.loss.triplet_global},
          {"id_part", r.loss.id_part},
          {"triplet_part", r.loss.triplet_part},
          {"equivariance", r.loss.equivariance},
          {"feature_consistency", r.loss.feature_consistency},
          {"total", r.loss.total}};
}

std::vector<LogRecord> read_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw TrainingError("cannot read log " + path.string());
  std::vector<LogRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    LogRecord r;
    r.epoch = j.at("epoch");
    r.step = j.at("step");
    r.lr = j.at("lr");
    r.loss.id_global = j.at("id_global");
    r.loss.triplet_global = j.at("triplet_global");
    r.loss.id_part = j.at("id_part");
    r.loss.triplet_part = j.at("triplet_part");
    r.loss.equivariance = j.at("equivariance");
    r.loss.feature_consistency = j.at("feature_consistency");
    r.loss.total = j.at("total");
    out.push_back(r);
  }
  return out;
}

namespace {

void probe_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError("cannot create output directory " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream os(probe, std::ios::binary | std::ios::trunc);
    std::vector<char> bytes(1 << 16, 0);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw CheckpointError("output directory is not writable: " + dir.string());
  }
  fs::remove(probe, ec);
}

}  // namespace

FitResult fit(const TrainConfig& cfg_in, const FitOptions& opts) {
  cfg_in.validate();
  const fs::path out_dir = cfg_in.out_dir;
  probe_writable(out_dir);
  TrainData data = load_train_data(cfg_in.data_dir);
  TrainConfig cfg = cfg_in;
  cfg.net.num_classes = data.num_classes;

  Rng init = substream(cfg.seed, 101);
  net::Network model(cfg.net, init);
  SgdState opt = make_sgd_state(model.params());
  Rng rng = substream(cfg.seed, 102);
  int start_epoch = 0;

  FitResult res;
  res.checkpoint = out_dir / "model.ckpt";
  res.log = out_dir / "train_log.jsonl";

  if (!opts.resume.empty()) {
    Checkpoint ck = load_checkpoint(opts.resume);
    if (ck.config_hash != config_hash(cfg))
      throw CheckpointError("checkpoint " + opts.resume.string() + " was written for a different model config");
    load_weights(model, ck);
    const auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto it = ck.velocity.find(entries[i].name);
      if (it != ck.velocity.end() && it->second.size() == opt.velocity[i].size()) opt.velocity[i] = it->second;
    }
    if (!ck.rng_state.empty()) set_rng_state(rng, ck.rng_state);
    start_epoch = ck.epoch;
  }

  std::ofstream log(res.log, opts.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw CheckpointError("cannot open training log " + res.log.string());

  const int images_per_step = 4 * cfg.batch_identities;
  const int steps =
      cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch
                              : std::max(1, static_cast<int>(data.images.size()) / images_per_step);

  if (start_epoch >= cfg.epochs) {
    save_checkpoint(res.checkpoint, make_checkpoint(cfg, model, &opt, start_epoch, &rng));
    return res;
  }
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    for (int s = 0; s < steps; ++s) {
      auto qb = synth::sample_quadruplet_batch(data.ids, cfg.batch_identities, rng);
      PreparedBatch batch = prepare_batch(data, qb, cfg, rng);
      LogRecord rec;
      rec.epoch = epoch;
      rec.step = epoch * steps + s;
      rec.lr = lr;
      if (epoch < cfg.warmup_epochs)
        rec.lr = lr * static_cast<double>(rec.step + 1) / static_cast<double>(cfg.warmup_epochs * steps);
      rec.loss = train_step(model, opt, batch, cfg, rec.lr);
      log << to_json(rec).dump() << '\n';
      log.flush();
      res.records.push_back(rec);
      if (opts.on_step) opts.on_step(rec);
    }
    Checkpoint ck = make_checkpoint(cfg, model, &opt, epoch + 1, &rng);
    save_checkpoint(res.checkpoint, ck);
    if (cfg.keep_all_checkpoints) save_checkpoint(out_dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt"), ck);
  }
  return res;
}

// Evaluation ---------------------------------------------------------------------------

std::vector<reid::Descriptor> describe(const net::Network& model, const std::vector<Image>& images, int batch_size) {
  ag::NoGradGuard ng;
  std::vector<reid::Descriptor> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const Image> chunk(images.data() + start, end - start);
    net::NetOutputs o = model.forward(net::images_to_tensor(chunk));
    auto d = reid::build_descriptors(o.global, o.global, o.parts);
    for (auto& x : d) out.push_back(std::move(x));
  }
  return out;
}

EvalReport evaluate(const net::Network& model, const fs::path& data_dir, double wg) {
  auto load = [&](synth::Split s) {
    const fs::path mp = synth::manifest_path(data_dir, s);
    if (!fs::exists(mp)) throw ConfigError("dataset manifest not found: " + mp.string());
    return synth::load_split(data_dir, synth::load_manifest(mp));
  };
  auto q = load(synth::Split::kQuery);
  auto g = load(synth::Split::kGallery);
  auto qd = describe(model, q.images);
  auto gd = describe(model, g.images);
  EvalReport r;
  r.global = reid::evaluate_retrieval(qd, q.ids, q.cameras, gd, g.ids, g.cameras, reid::DescriptorMode::kGlobal, wg);
  r.full = reid::evaluate_retrieval(qd, q.ids, q.cameras, gd, g.ids, g.cameras, reid::DescriptorMode::kFull, wg);
  return r;
}

// Gradient check ----------------------------------------------------------------------

double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-5});
}

TrainConfig micro_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.batch_identities = 2;
  c.net.height = 32;
  c.net.width = 16;
  c.net.backbone_channels = {4, 4, 4};
  c.net.feature_dim = 8;
  c.net.model_dim = 8;
  c.net.heads = 2;
  c.net.ffn_dim = 16;
  c.net.encoder_layers = 1;
  c.net.num_parts = 2;
  c.net.num_classes = 2;
  c.augment = synth::AugmentConfig::none();
  c.weights = {1, 1, 1, 1, 1, 1};
  c.detach_consistency_features = false;
  c.detach_visibility = false;
  return c;
}

namespace {

const char* kTermNames[] = {"id_global",    "triplet_global", "id_part",
                            "triplet_part", "equivariance",   "feature_consistency"};

double term_value(const LossGraph& g, int t) {
  const Var* vars[] = {&g.terms.id_global,    &g.terms.triplet_global, &g.terms.id_part,
                       &g.terms.triplet_part, &g.terms.equivariance,   &g.terms.feature_consistency};
  return vars[t]->item();
}

const Var& term_var(const LossGraph& g, int t) {
  const Var* vars[] = {&g.terms.id_global,    &g.terms.triplet_global, &g.terms.id_part,
                       &g.terms.triplet_part, &g.terms.equivariance,   &g.terms.feature_consistency};
  return *vars[t];
}

}  // namespace

GradCheckReport grad_check(const GradCheckOptions& o) {
  TrainConfig cfg = micro_config(o.seed);
  synth::GenConfig gen;
  gen.height = cfg.net.height;
  gen.width = cfg.net.width;
  std::vector<Image> images;
  std::vector<int> ids;
  for (int id = 0; id < 2; ++id)
    for (int i = 0; i < 4; ++i) {
      images.push_back(synth::generate_record(gen, o.seed, id, i).image);
      ids.push_back(id);
    }
  TrainData data = make_train_data(images, ids);
  Rng init = substream(o.seed, 201);
  net::Network model(cfg.net, init);
  // Non-trivial Jacobian head so every path carries gradient.
  for (auto& p : model.params().entries())
    if (p.name == "jacobian_head.weight")
      for (double& v : p.var.mutable_value()) v = normal(init, 0.0, 0.05);
  Rng rng = substream(o.seed, 202);
  synth::QuadrupletBatch qb;
  for (int i = 0; i < 8; ++i) {
    qb.record_indices.push_back(i);
    qb.id_labels.push_back(ids[i]);
  }
  PreparedBatch batch = prepare_batch(data, qb, cfg, rng);

  auto& entries = model.params().entries();
  std::vector<std::vector<std::vector<double>>> analytic(6);
  {
    LossGraph g = compute_losses(model, batch, cfg);
    for (int t = 0; t < 6; ++t) {
      model.params().zero_grad();
      ag::backward(term_var(g, t));
      for (auto& p : entries) {
        auto gr = p.var.grad();
        analytic[t].emplace_back(p.var.numel(), 0.0);
        if (!gr.empty()) std::copy(gr.begin(), gr.end(), analytic[t].back().begin());
      }
    }
  }

  GradCheckReport rep;
  rep.threshold = o.threshold;
  rep.terms.resize(6);
  for (int t = 0; t < 6; ++t) rep.terms[t].term = kTermNames[t];
  Rng pick = substream(o.seed, 203);
  ag::NoGradGuard ng;
  for (std::size_t pi = 0; pi < entries.size(); ++pi) {
    auto vals = entries[pi].var.mutable_value();
    std::vector<std::size_t> coords(vals.size());
    for (std::size_t j = 0; j < coords.size(); ++j) coords[j] = j;
    if (o.max_coords_per_param > 0 && coords.size() > static_cast<std::size_t>(o.max_coords_per_param)) {
      std::shuffle(coords.begin(), coords.end(), pick);
      coords.resize(o.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t j : coords) {
      const double orig = vals[j];
      vals[j] = orig + o.step;
      LossGraph plus = compute_losses(model, batch, cfg);
      vals[j] = orig - o.step;
      LossGraph minus = compute_losses(model, batch, cfg);
      vals[j] = orig;
      for (int t = 0; t < 6; ++t) {
        const double numeric = (term_value(plus, t) - term_value(minus, t)) / (2 * o.step);
        const double err = relative_error(analytic[t][pi][j], numeric);
        auto& tc = rep.terms[t];
        ++tc.checked;
        if (err >= tc.max_rel_error) {
          tc.max_rel_error = err;
          tc.worst_param = entries[pi].name + "[" + std::to_string(j) + "]";
        }
      }
    }
  }
  rep.pass = true;
  for (auto& tc : rep.terms) {
    tc.pass = tc.max_rel_error <= o.threshold;
    rep.pass = rep.pass && tc.pass;
  }
  return rep;
}

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  for (const auto& t : terms)
    os << std::left << std::setw(20) << t.term << " max_rel_err=" << std::scientific << std::setprecision(3)
       << t.max_rel_error << " coords=" << t.checked << " worst=" << t.worst_param << " "
       << (t.pass ? "PASS" : "FAIL") << '\n';
  os << "grad-check " << (pass ? "PASS" : "FAIL") << " (threshold " << std::scientific << std::setprecision(1)
     << threshold << ")\n";
  return os.str();
}

json GradCheckReport::to_json() const {
  json terms_j = json::array();
  for (const auto& t : terms)
    terms_j.push_back({{"term", t.term},
                       {"max_rel_error", t.max_rel_error},
                       {"worst_param", t.worst_param},
                       {"checked", t.checked},
                       {"pass", t.pass}});
  return {{"terms", terms_j}, {"threshold", threshold}, {"pass", pass}};
}

// Ablations --------------------------------------------------------------------------

std::vector<std::string> parse_switches(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty() && item != "none" && item != "full") out.push_back(item);
  }
  return out;
}

TrainConfig apply_switches(TrainConfig cfg, const std::vector<std::string>& switches) {
  for (const auto& s : switches) {
    if (s == "no-encoder") {
      cfg.net.encoder_layers = 0;
    } else if (s == "no-decoder") {
      cfg.net.use_decoder = false;
    } else if (s == "no-segmentation-branch") {
      cfg.segmentation_branch = false;
      cfg.weights.id_part = cfg.weights.triplet_part = 0.0;
      cfg.weights.feature_consistency = 0.0;
      cfg.weights.equivariance = 0.0;
    } else if (s == "frozen-keypoints") {
      cfg.freeze_keypoints = true;
      cfg.weights.equivariance = 0.0;
    } else if (s == "lambda6=0") {
      cfg.weights.feature_consistency = 0.0;
    } else if (s.rfind("K=", 0) == 0) {
      int k = 0;
      try {
        k = parse_value<int>("K", s.substr(2));
      } catch (const ConfigError&) {
        throw ConfigError("invalid ablation switch: " + s);
      }
      if (k < 1) throw ConfigError("invalid ablation switch: " + s);
      cfg.net.num_parts = k;
    } else {
      throw ConfigError("unknown ablation switch: " + s);
    }
  }
  return cfg;
}

namespace {

std::string variant_dir(const Variant& v, std::uint64_t seed) {
  std::string name = v.name;
  for (char& c : name)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return name + "_seed" + std::to_string(seed);
}

const reid::RetrievalResult& headline(const AblationRow& r) {
  return r.config.segmentation_branch ? r.report.full : r.report.global;
}

struct Averaged {
  double r1 = 0, r5 = 0, r10 = 0, map = 0;
  int n = 0;
};

std::vector<std::pair<const AblationRow*, Averaged>> by_variant(const std::vector<AblationRow>& rows) {
  std::vector<std::pair<const AblationRow*, Averaged>> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](auto& e) { return e.first->variant.name == r.variant.name; });
    if (it == out.end()) {
      out.push_back({&r, {}});
      it = out.end() - 1;
    }
    const auto& m = headline(r);
    it->second.r1 += m.rank(1);
    it->second.r5 += m.rank(5);
    it->second.r10 += m.rank(10);
    it->second.map += m.mAP;
    ++it->second.n;
  }
  for (auto& [_, a] : out) {
    a.r1 /= a.n;
    a.r5 /= a.n;
    a.r10 /= a.n;
    a.map /= a.n;
  }
  return out;
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * v;
  return os.str();
}

}  // namespace

AblationReport ablate(const TrainConfig& base, const std::vector<Variant>& variants,
                      const std::vector<std::uint64_t>& seeds, const std::function<void(const AblationRow&)>& on_row) {
  for (const auto& v : variants) apply_switches(base, v.switches).validate();
  AblationReport rep;
  for (std::uint64_t seed : seeds) {
    for (const auto& v : variants) {
      TrainConfig cfg = apply_switches(base, v.switches);
      cfg.seed = seed;
      cfg.out_dir = (fs::path(base.out_dir) / variant_dir(v, seed)).string();
      FitResult fr = fit(cfg);
      net::Network model = restore_network(load_checkpoint(fr.checkpoint));
      AblationRow row;
      row.variant = v;
      row.seed = seed;
      row.config = cfg;
      row.config.net = model.config();
      row.report = evaluate(model, cfg.data_dir);
      if (on_row) on_row(row);
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

std::string AblationReport::module_table() const {
  std::ostringstream os;
  os << "| Index | Variant | Encoder | Decoder | Segmentation Branch | Pre-train | Self-supervised | Rank-1 | Rank-5 | "
        "Rank-10 | mAP |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|---|\n";
  int idx = 1;
  for (const auto& [row, a] : by_variant(rows)) {
    const auto& c = row->config;
    const bool seg = c.segmentation_branch;
    auto mark = [](bool b) { return b ? "x" : " "; };
    os << "| #" << idx++ << " | " << row->variant.name << " | " << mark(c.net.encoder_layers > 0) << " | "
       << mark(c.net.use_decoder) << " | " << mark(seg) << " | " << mark(seg && c.freeze_keypoints) << " | "
       << mark(seg && !c.freeze_keypoints) << " | " << pct(a.r1) << " | " << pct(a.r5) << " | " << pct(a.r10)
       << " | " << pct(a.map) << " |\n";
  }
  return os.str();
}

std::string AblationReport::part_table() const {
  auto avg = by_variant(rows);
  std::stable_sort(avg.begin(), avg.end(),
                   [](auto& x, auto& y) { return x.first->config.net.num_parts < y.first->config.net.num_parts; });
  std::ostringstream os;
  os << "| Index | part number | Rank-1 | Rank-5 | Rank-10 | mAP |\n|---|---|---|---|---|---|\n";
  int idx = 1;
  for (const auto& [row, a] : avg)
    os << "| #" << idx++ << " | " << row->config.net.num_parts << " | " << pct(a.r1) << " | " << pct(a.r5) << " | "
       << pct(a.r10) << " | " << pct(a.map) << " |\n";
  return os.str();
}

json AblationReport::to_json() const {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"variant", r.variant.name},
                   {"switches", r.variant.switches},
                   {"seed", r.seed},
                   {"num_parts", r.config.net.num_parts},
                   {"global", reid::metrics_json(r.report.global)},
                   {"full", reid::metrics_json(r.report.full)}});
  return {{"rows", arr}};
}

}  // namespace mareid::harness
