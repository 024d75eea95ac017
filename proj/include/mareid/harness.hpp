#pragma once

// Training loop, SGD with momentum, checkpoints, evaluation, gradient
// checks and ablation sweeps.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mareid/losses.hpp"
#include "mareid/motion.hpp"
#include "mareid/net.hpp"
#include "mareid/reid.hpp"
#include "mareid/synthgen.hpp"

namespace mareid::harness {

namespace fs = std::filesystem;
using ag::Var;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string data_dir = "data";
  std::string out_dir = "runs/default";
  int epochs = 30;
  int batch_identities = 8;  // P; the batch holds 4P images
  int steps_per_epoch = 0;   // 0: #train images / 4P
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_decay_factor = 0.1;
  int lr_decay_period = 30;
  double grad_clip = 5.0;  // global gradient norm cap, 0 disables
  int warmup_epochs = 0;   // linear ramp of the learning rate
  std::uint64_t seed = 1;
  bool freeze_keypoints = false;
  bool segmentation_branch = true;
  bool keep_all_checkpoints = false;
  // Feature consistency trains the motion and part maps only.
  bool detach_consistency_features = true;
  // Part losses weight by visibility without pushing mass to the background.
  bool detach_visibility = true;
  net::NetConfig net;
  losses::LossWeights weights;
  motion::TpsConfig tps;
  synth::AugmentConfig augment;

  void validate() const;
};

// Flat key/value view used by YAML files, checkpoints and `--set` overrides.
nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {});
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig load_train_config(const fs::path& path, TrainConfig base = {});
std::vector<std::string> config_keys();
// Hash of the model-defining fields (architecture and image size).
std::uint64_t config_hash(const TrainConfig& cfg);

double learning_rate(const TrainConfig& cfg, int epoch);

// Images for one quadruplet step, augmented and paired with deformed copies.
struct PreparedBatch {
  std::vector<Image> images;
  std::vector<Image> deformed;
  std::vector<motion::TpsDeformation> tps;
  std::vector<int> labels;  // contiguous classifier labels
};

struct TrainData {
  std::vector<Image> images;
  std::vector<int> ids;
  std::vector<int> labels;  // id -> [0, C)
  std::vector<int> record_ids;  // positional
  int num_classes = 0;
};
TrainData load_train_data(const fs::path& data_dir);
TrainData make_train_data(std::vector<Image> images, std::vector<int> ids);

PreparedBatch prepare_batch(const TrainData& data, const synth::QuadrupletBatch& batch, const TrainConfig& cfg,
                            Rng& rng);

struct LossGraph {
  losses::LossTerms terms;
  losses::TotalLoss total;
};
// Builds every active loss term on a prepared batch.
LossGraph compute_losses(const net::Network& model, const PreparedBatch& batch, const TrainConfig& cfg);

struct SgdState {
  std::vector<std::vector<double>> velocity;  // parallel to ParamStore entries
};
SgdState make_sgd_state(const net::ParamStore& params);
void sgd_update(net::ParamStore& params, SgdState& state, double lr, double momentum, double weight_decay,
                bool freeze_keypoints);

// Rescales gradients so their global norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(net::ParamStore& params, double max_norm);

// One SGD-with-momentum update against the total loss.
losses::LossBreakdown train_step(net::Network& model, SgdState& opt, const PreparedBatch& batch,
                                 const TrainConfig& cfg, double lr);

struct Checkpoint {
  nlohmann::json config;
  std::uint64_t config_hash = 0;
  int epoch = 0;
  std::string rng_state;
  std::map<std::string, std::pair<ag::Shape, std::vector<double>>> params;
  std::map<std::string, std::vector<double>> velocity;
};
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);
Checkpoint make_checkpoint(const TrainConfig& cfg, const net::Network& model, const SgdState* opt, int epoch,
                           const Rng* rng);
// Rebuilds the network described by the checkpoint with its weights.
net::Network restore_network(const Checkpoint& ckpt);
TrainConfig checkpoint_config(const Checkpoint& ckpt);

struct LogRecord {
  int epoch = 0;
  int step = 0;
  double lr = 0.0;
  losses::LossBreakdown loss;
};
nlohmann::json to_json(const LogRecord& r);
std::vector<LogRecord> read_log(const fs::path& path);

struct FitOptions {
  fs::path resume;  // checkpoint to continue from
  std::function<void(const LogRecord&)> on_step;
};
struct FitResult {
  fs::path checkpoint;
  fs::path log;
  std::vector<LogRecord> records;  // steps run by this call
};
FitResult fit(const TrainConfig& cfg, const FitOptions& opts = {});

// Network outputs in evaluation mode, batched.
std::vector<reid::Descriptor> describe(const net::Network& model, const std::vector<Image>& images,
                                       int batch_size = 64);

struct EvalReport {
  reid::RetrievalResult global, full;
};
EvalReport evaluate(const net::Network& model, const fs::path& data_dir, double global_weight = 0.5);

// Gradient check -------------------------------------------------------------

struct TermCheck {
  std::string term;
  double max_rel_error = 0.0;
  std::string worst_param;
  int checked = 0;
  bool pass = false;
};
struct GradCheckReport {
  std::vector<TermCheck> terms;
  double threshold = 1e-4;
  bool pass = false;
  std::string to_text() const;
  nlohmann::json to_json() const;
};
struct GradCheckOptions {
  std::uint64_t seed = 1;
  double step = 1e-5;
  double threshold = 1e-4;
  int max_coords_per_param = 0;  // sampled coordinates per tensor, 0 = all
};
// Micro model: 32×16 images (4×2 grid), K=2, D=8, two identities × 4 images.
TrainConfig micro_config(std::uint64_t seed = 1);
GradCheckReport grad_check(const GradCheckOptions& opts = {});
double relative_error(double analytic, double numeric);

// Ablations -------------------------------------------------------------------

struct Variant {
  std::string name;
  std::vector<std::string> switches;
};
// Recognised switches: no-encoder, no-decoder, no-segmentation-branch,
// frozen-keypoints, lambda6=0, K=<n>.
TrainConfig apply_switches(TrainConfig cfg, const std::vector<std::string>& switches);
std::vector<std::string> parse_switches(const std::string& csv);

struct AblationRow {
  Variant variant;
  std::uint64_t seed = 0;
  TrainConfig config;
  EvalReport report;
};
struct AblationReport {
  std::vector<AblationRow> rows;
  // Module table (encoder / decoder / segmentation / keypoint branch columns).
  std::string module_table() const;
  // Part-count table.
  std::string part_table() const;
  nlohmann::json to_json() const;
};
AblationReport ablate(const TrainConfig& base, const std::vector<Variant>& variants,
                      const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace mareid::harness
