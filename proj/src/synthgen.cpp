#include "mareid/synthgen.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

namespace mareid::synth {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kStreamRecord = 1;
constexpr std::uint64_t kStreamIdentity = 2;
constexpr std::uint64_t kStreamSplit = 3;

struct Vec2 {
  double x = 0, y = 0;
};
Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

// Distance from p to segment ab, and the parameter of the closest point.
double seg_dist(Vec2 p, Vec2 a, Vec2 b, double* t_out = nullptr) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
  if (t_out) *t_out = t;
  const Vec2 d = p - (a + t * ab);
  return std::sqrt(dot(d, d));
}

Rgb random_color(Rng& rng, double lo = 0.05, double hi = 0.95) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

Rgb lerp(Rgb a, Rgb b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

Rgb shade(Rgb c, double f) { return {c.r * f, c.g * f, c.b * f}; }

struct Limb {
  int part;
  Vec2 a, b;
  double radius;
};

struct Skeleton {
  std::vector<Limb> limbs;  // back-to-front draw order, head excluded
  Vec2 head_center;
  double head_radius = 0;
};

Skeleton pose_skeleton(const GenConfig& cfg, const BodyProportions& body, const PoseParams& pose) {
  const double H = cfg.height, W = cfg.width;
  const double s = pose.scale * H;
  const auto& q = pose.joint_angles;
  const Vec2 hip{(pose.root_x + 1.0) * 0.5 * (W - 1), (pose.root_y + 1.0) * 0.5 * (H - 1)};
  const double lean = q[8];
  const Vec2 up{std::sin(lean), -std::cos(lean)};
  const Vec2 side{std::cos(lean), std::sin(lean)};
  const Vec2 neck = hip + body.torso_length * s * up;

  Skeleton sk;
  auto limb_dir = [](double angle, double sign) { return Vec2{sign * std::sin(angle), std::cos(angle)}; };
  // Legs first (behind torso).
  for (int leftright = 0; leftright < 2; ++leftright) {
    const double sign = leftright == 0 ? -1.0 : 1.0;
    const double hip_a = q[4 + 2 * leftright], knee_a = q[5 + 2 * leftright];
    const Vec2 joint = hip + (sign * body.torso_width * 0.55 * s) * side;
    const Vec2 knee = joint + (body.thigh * s) * limb_dir(hip_a, sign);
    const Vec2 ankle = knee + (body.shin * s) * limb_dir(hip_a - knee_a, sign);
    sk.limbs.push_back({leftright == 0 ? kLeftThigh : kRightThigh, joint, knee, body.leg_width * s});
    sk.limbs.push_back({leftright == 0 ? kLeftShin : kRightShin, knee, ankle, body.leg_width * 0.9 * s});
  }
  sk.limbs.push_back({kTorso, hip + (0.3 * body.torso_width * s) * up, neck + (-0.4 * body.torso_width * s) * up,
                      body.torso_width * s});
  for (int leftright = 0; leftright < 2; ++leftright) {
    const double sign = leftright == 0 ? -1.0 : 1.0;
    const double sh_a = q[2 * leftright], el_a = q[1 + 2 * leftright];
    const Vec2 shoulder = neck + (sign * body.torso_width * 1.05 * s) * side + (-0.03 * s) * up;
    const Vec2 elbow = shoulder + (body.upper_arm * s) * limb_dir(sh_a, sign);
    const Vec2 wrist = elbow + (body.lower_arm * s) * limb_dir(sh_a - el_a, sign);
    sk.limbs.push_back({leftright == 0 ? kLeftUpperArm : kRightUpperArm, shoulder, elbow, body.arm_width * s});
    sk.limbs.push_back({leftright == 0 ? kLeftLowerArm : kRightLowerArm, elbow, wrist, body.arm_width * 0.85 * s});
  }
  sk.head_radius = body.head_radius * s;
  sk.head_center = neck + (sk.head_radius * 0.9) * up;
  return sk;
}

Rgb part_color(const Appearance& ap, int part, double t_along, double px, double py, double scale) {
  switch (part) {
    case kTorso: {
      const double period = ap.pattern_period * scale;
      const bool hs = std::fmod(py / period, 2.0) < 1.0;
      const bool vs = std::fmod(px / period, 2.0) < 1.0;
      switch (ap.shirt_pattern) {
        case Pattern::kSolid: return ap.shirt;
        case Pattern::kHorizontalStripes: return hs ? ap.shirt : ap.shirt_accent;
        case Pattern::kVerticalStripes: return vs ? ap.shirt : ap.shirt_accent;
        case Pattern::kChecker: return (hs != vs) ? ap.shirt : ap.shirt_accent;
      }
      return ap.shirt;
    }
    case kLeftUpperArm:
    case kRightUpperArm:
      return ap.short_sleeves && t_along > 0.6 ? ap.skin : ap.shirt;
    case kLeftLowerArm:
    case kRightLowerArm:
      return ap.short_sleeves ? ap.skin : (t_along > 0.85 ? ap.skin : ap.shirt);
    case kLeftThigh:
    case kRightThigh:
      return ap.pants;
    case kLeftShin:
    case kRightShin:
      return t_along > 0.82 ? ap.shoes : ap.pants;
    default:
      return ap.skin;
  }
}

Rgb background(int camera, int x, int y, int H, int W, double phase) {
  const double fy = static_cast<double>(y) / (H - 1);
  if (camera == 0) {
    const Rgb top{0.62, 0.66, 0.72}, bottom{0.40, 0.42, 0.46};
    Rgb c = lerp(top, bottom, fy);
    if (fy > 0.7 && (static_cast<int>(x + phase) / 4) % 2 == 0) c = shade(c, 0.9);
    if ((static_cast<int>(y + 2 * phase) / 6) % 2 == 0 && fy < 0.7) c = shade(c, 1.04);
    return c;
  }
  const Rgb top{0.70, 0.62, 0.50}, bottom{0.52, 0.46, 0.36};
  Rgb c = lerp(top, bottom, fy);
  if (((x + static_cast<int>(phase)) / 3 + y / 3) % 2 == 0) c = shade(c, 0.93);
  (void)W;
  return c;
}

constexpr std::array<Rgb, 2> kCameraGain{{{1.0, 1.0, 1.0}, {0.86, 0.82, 0.76}}};

}  // namespace

const char* part_name(int part) {
  static constexpr std::array<const char*, kNumParts> names{
      "head", "torso", "left_upper_arm", "left_lower_arm", "right_upper_arm",
      "right_lower_arm", "left_thigh", "left_shin", "right_thigh", "right_shin"};
  return part >= 0 && part < kNumParts ? names[part] : "background";
}

void GenConfig::validate() const {
  if (num_identities <= 0) throw ConfigError("num_identities must be positive");
  if (images_per_identity <= 0) throw ConfigError("images_per_identity must be positive");
  if (height < 8 || width < 8) throw ConfigError("image size must be at least 8x8");
  if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) throw ConfigError("occlusion_prob must lie in [0,1]");
  if (!(partial_prob >= 0.0 && partial_prob <= 1.0)) throw ConfigError("partial_prob must lie in [0,1]");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must lie in [0,1]");
  if (queries_per_identity < 1) throw ConfigError("queries_per_identity must be >= 1");
  if (!(scale_min > 0 && scale_max >= scale_min)) throw ConfigError("invalid scale range");
  if (noise_std < 0) throw ConfigError("noise_std must be nonnegative");
  const auto& l = limits;
  if (l.shoulder_min > l.shoulder_max || l.elbow_min > l.elbow_max || l.hip_min > l.hip_max ||
      l.knee_min > l.knee_max || l.lean_max < 0)
    throw ConfigError("articulation limits must satisfy min <= max");
}

GenConfig load_gen_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config not found: " + path.string());
  YAML::Node n;
  try {
    n = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  GenConfig c;
  static const std::set<std::string> known{
      "num_identities", "images_per_identity", "height", "width", "occlusion_prob", "partial_prob",
      "train_fraction", "queries_per_identity", "scale_min", "scale_max", "noise_std", "shoulder_min",
      "shoulder_max", "elbow_min", "elbow_max", "hip_min", "hip_max", "knee_min", "knee_max", "lean_max"};
  for (const auto& kv : n) {
    const auto key = kv.first.as<std::string>();
    if (!known.count(key)) throw ConfigError("unknown generation setting: " + key);
  }
  auto get = [&](const char* key, auto& field) {
    if (n[key]) field = n[key].as<std::decay_t<decltype(field)>>();
  };
  get("num_identities", c.num_identities);
  get("images_per_identity", c.images_per_identity);
  get("height", c.height);
  get("width", c.width);
  get("occlusion_prob", c.occlusion_prob);
  get("partial_prob", c.partial_prob);
  get("train_fraction", c.train_fraction);
  get("queries_per_identity", c.queries_per_identity);
  get("scale_min", c.scale_min);
  get("scale_max", c.scale_max);
  get("noise_std", c.noise_std);
  get("shoulder_min", c.limits.shoulder_min);
  get("shoulder_max", c.limits.shoulder_max);
  get("elbow_min", c.limits.elbow_min);
  get("elbow_max", c.limits.elbow_max);
  get("hip_min", c.limits.hip_min);
  get("hip_max", c.limits.hip_max);
  get("knee_min", c.limits.knee_min);
  get("knee_max", c.limits.knee_max);
  get("lean_max", c.limits.lean_max);
  c.validate();
  return c;
}

SpriteIdentity make_identity(std::uint64_t seed, int id_label) {
  Rng rng = substream(seed, kStreamIdentity, static_cast<std::uint64_t>(id_label));
  SpriteIdentity who;
  who.id_label = id_label;
  auto& ap = who.appearance;
  const Rgb light_skin{0.96, 0.80, 0.69}, dark_skin{0.36, 0.22, 0.14};
  ap.skin = lerp(light_skin, dark_skin, uniform(rng));
  ap.hair = random_color(rng, 0.02, 0.45);
  ap.shirt = random_color(rng);
  ap.shirt_accent = random_color(rng);
  ap.pants = random_color(rng, 0.05, 0.8);
  ap.shoes = random_color(rng, 0.0, 0.35);
  ap.shirt_pattern = static_cast<Pattern>(uniform_int(rng, 0, 3));
  ap.pattern_period = uniform(rng, 2.5, 5.5);
  ap.short_sleeves = uniform(rng) < 0.5;
  auto jitter = [&](double v) { return v * uniform(rng, 0.9, 1.1); };
  auto& b = who.body;
  b.head_radius = jitter(b.head_radius);
  b.torso_length = jitter(b.torso_length);
  b.torso_width = jitter(b.torso_width);
  b.upper_arm = jitter(b.upper_arm);
  b.lower_arm = jitter(b.lower_arm);
  b.arm_width = jitter(b.arm_width);
  b.thigh = jitter(b.thigh);
  b.shin = jitter(b.shin);
  b.leg_width = jitter(b.leg_width);
  return who;
}

PoseParams sample_pose(const GenConfig& cfg, Rng& rng) {
  const auto& l = cfg.limits;
  PoseParams p;
  auto& q = p.joint_angles;
  q[0] = uniform(rng, l.shoulder_min, l.shoulder_max);
  q[1] = uniform(rng, l.elbow_min, l.elbow_max);
  q[2] = uniform(rng, l.shoulder_min, l.shoulder_max);
  q[3] = uniform(rng, l.elbow_min, l.elbow_max);
  q[4] = uniform(rng, l.hip_min, l.hip_max);
  q[5] = uniform(rng, l.knee_min, l.knee_max);
  q[6] = uniform(rng, l.hip_min, l.hip_max);
  q[7] = uniform(rng, l.knee_min, l.knee_max);
  q[8] = uniform(rng, -l.lean_max, l.lean_max);
  p.scale = uniform(rng, cfg.scale_min, cfg.scale_max);
  p.root_x = uniform(rng, -0.12, 0.12);
  p.root_y = uniform(rng, 0.02, 0.14);
  if (uniform(rng) < cfg.partial_prob) p.root_y += (uniform(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.25, 0.4);
  return p;
}

ImageSample render_sample(const GenConfig& cfg, const SpriteIdentity& who, const PoseParams& pose, int camera,
                          bool occluded, Rng& rng) {
  const int H = cfg.height, W = cfg.width;
  ImageSample out;
  out.id_label = who.id_label;
  out.camera = camera;
  out.pose = pose;
  out.image = Image(H, W, 3);
  out.occluder_mask = Mask(H, W);
  std::vector<int> label(static_cast<std::size_t>(H) * W, -1);  // -1 background

  const double phase = uniform(rng, 0.0, 12.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const Rgb c = background(camera, x, y, H, W, phase);
      out.image.at(y, x, 0) = c.r;
      out.image.at(y, x, 1) = c.g;
      out.image.at(y, x, 2) = c.b;
    }

  const Skeleton sk = pose_skeleton(cfg, who.body, pose);
  const double tex_scale = H / 64.0;
  auto paint = [&](int x, int y, int part, Rgb c, double shading) {
    const Rgb s = shade(c, shading);
    out.image.at(y, x, 0) = s.r;
    out.image.at(y, x, 1) = s.g;
    out.image.at(y, x, 2) = s.b;
    label[static_cast<std::size_t>(y) * W + x] = part;
  };
  for (const Limb& limb : sk.limbs) {
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(limb.a.x, limb.b.x) - limb.radius)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(limb.a.x, limb.b.x) + limb.radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(limb.a.y, limb.b.y) - limb.radius)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(limb.a.y, limb.b.y) + limb.radius)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double t = 0;
        const double d = seg_dist({x + 0.0, y + 0.0}, limb.a, limb.b, &t);
        if (d > limb.radius) continue;
        const double r = d / std::max(limb.radius, 1e-9);
        paint(x, y, limb.part, part_color(who.appearance, limb.part, t, x, y, tex_scale), 1.0 - 0.28 * r * r);
      }
  }
  {
    const Vec2 c = sk.head_center;
    const double rad = sk.head_radius;
    for (int y = std::max(0, static_cast<int>(c.y - rad - 1)); y <= std::min(H - 1, static_cast<int>(c.y + rad + 1)); ++y)
      for (int x = std::max(0, static_cast<int>(c.x - rad - 1)); x <= std::min(W - 1, static_cast<int>(c.x + rad + 1));
           ++x) {
        const Vec2 d{x - c.x, y - c.y};
        const double r = std::sqrt(dot(d, d));
        if (r > rad) continue;
        const Rgb col = d.y < -0.2 * rad ? who.appearance.hair : who.appearance.skin;
        paint(x, y, kHead, col, 1.0 - 0.2 * (r / rad) * (r / rad));
      }
  }

  if (occluded) {
    const bool ellipse = uniform(rng) < 0.5;
    const double ow = uniform(rng, 0.45, 0.9) * W * 0.5;
    const double oh = uniform(rng, 0.15, 0.35) * H * 0.5;
    const double ocx = uniform(rng, 0.15, 0.85) * W;
    const double ocy = uniform(rng, 0.3, 0.9) * H;
    const Rgb fill = random_color(rng, 0.1, 0.9);
    const Rgb fill2 = random_color(rng, 0.1, 0.9);
    const int period = uniform_int(rng, 2, 5);
    const bool vertical = uniform(rng) < 0.5;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double dx = (x - ocx) / ow, dy = (y - ocy) / oh;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::fabs(dx) <= 1.0 && std::fabs(dy) <= 1.0;
        if (!inside) continue;
        const bool band = ((vertical ? x : y) / period) % 2 == 0;
        const Rgb c = band ? fill : fill2;
        out.image.at(y, x, 0) = c.r;
        out.image.at(y, x, 1) = c.g;
        out.image.at(y, x, 2) = c.b;
        out.occluder_mask.at(y, x) = 1;
        label[static_cast<std::size_t>(y) * W + x] = -1;
      }
  }

  const Rgb gain = kCameraGain[camera % 2];
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      out.image.at(y, x, 0) = std::clamp(out.image.at(y, x, 0) * gain.r + normal(rng, 0, cfg.noise_std), 0.0, 1.0);
      out.image.at(y, x, 1) = std::clamp(out.image.at(y, x, 1) * gain.g + normal(rng, 0, cfg.noise_std), 0.0, 1.0);
      out.image.at(y, x, 2) = std::clamp(out.image.at(y, x, 2) * gain.b + normal(rng, 0, cfg.noise_std), 0.0, 1.0);
    }

  out.gt_part_masks.assign(kNumParts, Mask(H, W));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int p = label[static_cast<std::size_t>(y) * W + x];
      if (p >= 0) out.gt_part_masks[p].at(y, x) = 1;
    }
  out.image = quantize8(out.image);
  return out;
}

ImageSample generate_record(const GenConfig& cfg, std::uint64_t seed, int id_label, int index) {
  const std::uint64_t global = static_cast<std::uint64_t>(id_label) * 1000003ULL + static_cast<std::uint64_t>(index);
  Rng rng = substream(seed, kStreamRecord, global);
  const SpriteIdentity who = make_identity(seed, id_label);
  const PoseParams pose = sample_pose(cfg, rng);
  const bool occluded = uniform(rng) < cfg.occlusion_prob;
  return render_sample(cfg, who, pose, index % 2, occluded, rng);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kQuery: return "query";
    case Split::kGallery: return "gallery";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "query") return Split::kQuery;
  if (s == "gallery") return Split::kGallery;
  throw ConfigError("unknown split: " + s);
}

std::vector<int> DatasetManifest::identities() const {
  std::set<int> ids;
  for (const auto& r : records) ids.insert(r.id);
  return {ids.begin(), ids.end()};
}

namespace {

std::string record_stem(int id, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d_%02d", id, index);
  return buf;
}

}  // namespace

Dataset plan_dataset(const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int n = cfg.num_identities;
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = substream(seed, kStreamSplit);
  std::shuffle(ids.begin(), ids.end(), rng);
  int n_train = static_cast<int>(std::lround(cfg.train_fraction * n));
  if (n >= 2) n_train = std::clamp(n_train, 1, n - 1);
  else n_train = n;
  std::set<int> train_ids(ids.begin(), ids.begin() + n_train);

  Dataset ds;
  ds.train.split = Split::kTrain;
  ds.query.split = Split::kQuery;
  ds.gallery.split = Split::kGallery;
  ds.train.seed = ds.query.seed = ds.gallery.seed = seed;
  for (int id = 0; id < n; ++id) {
    int queries = 0;
    for (int i = 0; i < cfg.images_per_identity; ++i) {
      ManifestRecord r{"images/" + record_stem(id, i) + ".png", id, i % 2};
      if (train_ids.count(id)) {
        ds.train.records.push_back(r);
      } else if (r.camera == 0 && queries < cfg.queries_per_identity && i + 1 < cfg.images_per_identity) {
        ds.query.records.push_back(r);
        ++queries;
      } else {
        ds.gallery.records.push_back(r);
      }
    }
  }
  return ds;
}

fs::path manifest_path(const fs::path& root, Split split) {
  return root / (std::string(split_name(split)) + ".json");
}

Dataset build_dataset(const GenConfig& cfg, std::uint64_t seed, const fs::path& out_dir) {
  Dataset ds = plan_dataset(cfg, seed);
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");
  for (int id = 0; id < cfg.num_identities; ++id)
    for (int i = 0; i < cfg.images_per_identity; ++i) {
      const ImageSample s = generate_record(cfg, seed, id, i);
      const std::string stem = record_stem(id, i);
      write_png(out_dir / "images" / (stem + ".png"), s.image);
      std::vector<std::uint8_t> labels(static_cast<std::size_t>(cfg.height) * cfg.width, 0);
      for (int p = 0; p < kNumParts; ++p)
        for (std::size_t k = 0; k < labels.size(); ++k)
          if (s.gt_part_masks[p].data[k]) labels[k] = static_cast<std::uint8_t>(p + 1);
      write_label_png(out_dir / "masks" / (stem + "_parts.png"), cfg.height, cfg.width, labels);
      write_png(out_dir / "masks" / (stem + "_occluder.png"), s.occluder_mask);
    }
  for (const auto* m : {&ds.train, &ds.query, &ds.gallery}) save_manifest(manifest_path(out_dir, m->split), *m);
  return ds;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
  json j;
  j["split"] = split_name(m.split);
  j["seed"] = m.seed;
  j["records"] = json::array();
  for (const auto& r : m.records) j["records"].push_back({{"path", r.path}, {"id", r.id}, {"camera", r.camera}});
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << j.dump(1) << '\n';
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("manifest not found: " + path.string());
  json j = json::parse(is);
  DatasetManifest m;
  m.split = parse_split(j.at("split").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& r : j.at("records"))
    m.records.push_back({r.at("path").get<std::string>(), r.at("id").get<int>(), r.at("camera").get<int>()});
  return m;
}

LoadedSplit load_split(const fs::path& root, const DatasetManifest& m) {
  LoadedSplit s;
  for (const auto& r : m.records) {
    s.images.push_back(read_png(root / r.path));
    s.ids.push_back(r.id);
    s.cameras.push_back(r.camera);
  }
  return s;
}

QuadrupletBatch sample_quadruplet_batch(const DatasetManifest& manifest, int num_identities, Rng& rng) {
  std::vector<int> ids;
  ids.reserve(manifest.records.size());
  for (const auto& r : manifest.records) ids.push_back(r.id);
  return sample_quadruplet_batch(ids, num_identities, rng);
}

QuadrupletBatch sample_quadruplet_batch(const std::vector<int>& record_ids, int num_identities, Rng& rng) {
  std::map<int, std::vector<int>> by_id;
  for (int i = 0; i < static_cast<int>(record_ids.size()); ++i) by_id[record_ids[i]].push_back(i);
  if (num_identities < 1) throw SamplingError("need at least one identity per batch");
  if (static_cast<int>(by_id.size()) < num_identities)
    throw SamplingError("batch asks for " + std::to_string(num_identities) + " identities but the split has " +
                        std::to_string(by_id.size()));
  std::vector<int> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(num_identities);
  QuadrupletBatch b;
  for (int id : ids) {
    auto pool = by_id[id];
    if (pool.size() < 4)
      throw SamplingError("identity " + std::to_string(id) + " has only " + std::to_string(pool.size()) +
                          " images (need 4)");
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int k = 0; k < 4; ++k) {
      b.record_indices.push_back(pool[k]);
      b.id_labels.push_back(id);
    }
  }
  return b;
}

Image hflip(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  Image out = img;
  const int H = img.height, W = img.width, C = img.channels;
  if (cfg.flip && uniform(rng) < 0.5) out = hflip(out);
  if (cfg.pad_crop && cfg.pad > 0) {
    const int pad = std::min(cfg.pad, std::min(H, W) / 2);
    const int dy = uniform_int(rng, -pad, pad);
    const int dx = uniform_int(rng, -pad, pad);
    Image shifted(H, W, C, 0.0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int sy = y + dy, sx = x + dx;
        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
        for (int c = 0; c < C; ++c) shifted.at(y, x, c) = out.at(sy, sx, c);
      }
    out = std::move(shifted);
  }
  if (cfg.erase && uniform(rng) < cfg.erase_prob) {
    const double area_lo = std::clamp(cfg.erase_area_min, 0.0, 1.0);
    const double area_hi = std::clamp(cfg.erase_area_max, area_lo, 1.0);
    const double asp_lo = std::max(cfg.erase_aspect_min, 1e-3);
    const double asp_hi = std::max(cfg.erase_aspect_max, asp_lo);
    const double area = uniform(rng, area_lo, area_hi) * H * W;
    const double aspect = std::exp(uniform(rng, std::log(asp_lo), std::log(asp_hi)));
    const int eh = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, H);
    const int ew = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, W);
    const int y0 = uniform_int(rng, 0, H - eh);
    const int x0 = uniform_int(rng, 0, W - ew);
    for (int y = y0; y < y0 + eh; ++y)
      for (int x = x0; x < x0 + ew; ++x)
        for (int c = 0; c < C; ++c) out.at(y, x, c) = uniform(rng);
  }
  return out;
}

}  // namespace mareid::synth
