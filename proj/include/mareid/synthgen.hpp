#pragma once

// Procedural articulated-sprite pedestrians with identities, poses, part
// masks, occluders and two virtual cameras.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mareid/image.hpp"
#include "mareid/rng.hpp"

namespace mareid::synth {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum Part : int {
  kHead = 0,
  kTorso,
  kLeftUpperArm,
  kLeftLowerArm,
  kRightUpperArm,
  kRightLowerArm,
  kLeftThigh,
  kLeftShin,
  kRightThigh,
  kRightShin,
  kNumParts
};
const char* part_name(int part);

// Radians. Arm/leg angles are measured outward from the downward vertical.
struct ArticulationLimits {
  double shoulder_min = 0.05, shoulder_max = 0.9;
  double elbow_min = 0.0, elbow_max = 1.2;
  double hip_min = -0.05, hip_max = 0.45;
  double knee_min = 0.0, knee_max = 0.7;
  double lean_max = 0.12;
};

struct GenConfig {
  int num_identities = 50;
  int images_per_identity = 16;
  int height = 64;
  int width = 32;
  double occlusion_prob = 0.5;
  double partial_prob = 0.1;  // chance the sprite is shifted partly out of frame
  double train_fraction = 0.5;
  int queries_per_identity = 2;
  double scale_min = 0.85;
  double scale_max = 1.05;
  double noise_std = 0.015;
  ArticulationLimits limits;

  void validate() const;  // throws ConfigError
};

GenConfig load_gen_config(const std::filesystem::path& path);

struct Rgb {
  double r = 0, g = 0, b = 0;
};

enum class Pattern : int { kSolid = 0, kHorizontalStripes, kVerticalStripes, kChecker };

struct Appearance {
  Rgb skin, hair, shirt, shirt_accent, pants, shoes;
  Pattern shirt_pattern = Pattern::kSolid;
  double pattern_period = 4.0;  // pixels at 64-pixel height
  bool short_sleeves = false;
};

// Lengths in units of image height.
struct BodyProportions {
  double head_radius = 0.07;
  double torso_length = 0.27;
  double torso_width = 0.11;  // half-width
  double upper_arm = 0.16, lower_arm = 0.15, arm_width = 0.032;
  double thigh = 0.2, shin = 0.2, leg_width = 0.04;
};

struct SpriteIdentity {
  int id_label = 0;
  Appearance appearance;
  BodyProportions body;
};

struct PoseParams {
  // left shoulder, left elbow, right shoulder, right elbow,
  // left hip, left knee, right hip, right knee, torso lean
  std::array<double, 9> joint_angles{};
  double root_x = 0.0;  // normalized [-1,1] hip-centre position
  double root_y = 0.0;
  double scale = 1.0;
};

struct ImageSample {
  Image image;
  int id_label = 0;
  int camera = 0;
  std::vector<Mask> gt_part_masks;  // kNumParts masks, visible pixels only
  Mask occluder_mask;
  PoseParams pose;
};

enum class Split { kTrain, kQuery, kGallery };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct ManifestRecord {
  std::string path;  // relative to the dataset root
  int id = 0;
  int camera = 0;
};

struct DatasetManifest {
  Split split = Split::kTrain;
  std::uint64_t seed = 0;
  std::vector<ManifestRecord> records;

  std::vector<int> identities() const;  // sorted, unique
};

struct Dataset {
  DatasetManifest train, query, gallery;
  std::size_t total_records() const { return train.records.size() + query.records.size() + gallery.records.size(); }
};

SpriteIdentity make_identity(std::uint64_t seed, int id_label);
PoseParams sample_pose(const GenConfig& cfg, Rng& rng);
ImageSample render_sample(const GenConfig& cfg, const SpriteIdentity& who, const PoseParams& pose, int camera,
                          bool occluded, Rng& rng);

// Pure function of (cfg, seed, id_label, index).
ImageSample generate_record(const GenConfig& cfg, std::uint64_t seed, int id_label, int index);

// Renders every record, writes images/masks/manifests under out_dir.
Dataset build_dataset(const GenConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir);
// Same split logic without touching disk.
Dataset plan_dataset(const GenConfig& cfg, std::uint64_t seed);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& root, Split split);

struct LoadedSplit {
  std::vector<Image> images;
  std::vector<int> ids;
  std::vector<int> cameras;
};
LoadedSplit load_split(const std::filesystem::path& root, const DatasetManifest& m);

// P identity groups × 4 images (order A,B,C,D within a group).
struct QuadrupletBatch {
  std::vector<int> record_indices;
  std::vector<int> id_labels;
  int groups() const { return static_cast<int>(record_indices.size() / 4); }
};
QuadrupletBatch sample_quadruplet_batch(const DatasetManifest& manifest, int num_identities, Rng& rng);
QuadrupletBatch sample_quadruplet_batch(const std::vector<int>& record_ids, int num_identities, Rng& rng);

struct AugmentConfig {
  bool flip = true;
  bool pad_crop = true;
  bool erase = true;
  int pad = 4;
  double erase_prob = 0.5;
  double erase_area_min = 0.02, erase_area_max = 0.2;
  double erase_aspect_min = 0.3, erase_aspect_max = 3.3;

  static AugmentConfig none() { return {false, false, false}; }
};

Image hflip(const Image& img);
Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng);

}  // namespace mareid::synth
