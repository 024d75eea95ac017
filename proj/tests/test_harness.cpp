#include <gtest/gtest.h>

#include <fstream>

#include "mareid/harness.hpp"
#include "support.hpp"

using namespace mareid;
using namespace mareid::harness;

namespace {

// Small dataset matching micro_config's 32×16 input.
const std::filesystem::path& micro_data() {
  static test::TempDir dir("harness_data");
  static bool built = false;
  if (!built) {
    synth::GenConfig g;
    g.num_identities = 6;
    g.images_per_identity = 8;
    g.height = 32;
    g.width = 16;
    synth::build_dataset(g, 5, dir.path);
    built = true;
  }
  return dir.path;
}

TrainConfig micro_run(const std::filesystem::path& out, int epochs = 1) {
  TrainConfig c = micro_config(3);
  c.data_dir = micro_data().string();
  c.out_dir = out.string();
  c.epochs = epochs;
  c.weights = losses::LossWeights{};
  return c;
}

PreparedBatch micro_batch(const TrainConfig& cfg, Rng& rng) {
  TrainData data = load_train_data(cfg.data_dir);
  auto qb = synth::sample_quadruplet_batch(data.ids, cfg.batch_identities, rng);
  return prepare_batch(data, qb, cfg, rng);
}

net::Network micro_model(TrainConfig& cfg) {
  cfg.net.num_classes = load_train_data(cfg.data_dir).num_classes;
  Rng init = substream(cfg.seed, 101);
  return net::Network(cfg.net, init);
}

std::vector<double> flat_params(const net::Network& m) {
  std::vector<double> out;
  for (const auto& p : m.params().entries()) out.insert(out.end(), p.var.value().begin(), p.var.value().end());
  return out;
}

std::vector<double> losses_of(const std::vector<LogRecord>& recs) {
  std::vector<double> out;
  for (const auto& r : recs)
    for (double v : {r.loss.id_global, r.loss.triplet_global, r.loss.id_part, r.loss.triplet_part, r.loss.equivariance,
                     r.loss.feature_consistency, r.loss.total})
      out.push_back(v);
  return out;
}

}  // namespace

TEST(Harness, DefaultsFollowDeskSchedule) {
  TrainConfig c;
  EXPECT_EQ(c.epochs, 30);
  EXPECT_EQ(c.batch_identities, 8);
  EXPECT_DOUBLE_EQ(c.lr, 0.01);
  EXPECT_DOUBLE_EQ(c.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.net.num_parts, 10);
  EXPECT_EQ(c.net.height, 64);
  EXPECT_EQ(c.net.width, 32);
  EXPECT_DOUBLE_EQ(c.weights.equivariance, 10.0);
  EXPECT_DOUBLE_EQ(c.weights.feature_consistency, 5.0);
  c.validate();
}

TEST(Harness, LearningRateSchedule) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 0.01);
  EXPECT_DOUBLE_EQ(learning_rate(c, 29), 0.01);
  EXPECT_NEAR(learning_rate(c, 30), 0.001, 1e-15);
  for (int e = 0; e < 100; ++e) EXPECT_DOUBLE_EQ(learning_rate(c, e), 0.01 * std::pow(0.1, e / 30));
}

TEST(Harness, ConfigOverridesAndYaml) {
  test::TempDir dir("cfg");
  {
    std::ofstream os(dir.path / "c.yaml");
    os << "epochs: 5\nlambda5: 2.5\nbackbone_channels: \"8,8,16\"\nuse_decoder: false\n";
  }
  TrainConfig c = load_train_config(dir.path / "c.yaml");
  EXPECT_EQ(c.epochs, 5);
  EXPECT_DOUBLE_EQ(c.weights.equivariance, 2.5);
  EXPECT_EQ(c.net.backbone_channels, (std::array<int, 3>{8, 8, 16}));
  EXPECT_FALSE(c.net.use_decoder);
  apply_override(c, "num_parts", "6");
  EXPECT_EQ(c.net.num_parts, 6);
  EXPECT_THROW(apply_override(c, "no_such_key", "1"), ConfigError);
  EXPECT_THROW(apply_override(c, "epochs", "many"), ConfigError);
  EXPECT_THROW(load_train_config(dir.path / "missing.yaml"), ConfigError);
  TrainConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(config_keys().size(), config_to_json(c).size());
}

TEST(Harness, InvalidConfigRejected) {
  TrainConfig c;
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_identities = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weights.id_global = -1;
  EXPECT_ANY_THROW(c.validate());
}

TEST(Harness, ConfigHashTracksArchitectureOnly) {
  TrainConfig a, b;
  b.lr = 0.5;
  b.epochs = 3;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.net.num_parts = 6;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Harness, ZeroLearningRateLeavesParameters) {
  TrainConfig cfg = micro_run("unused");
  net::Network model = micro_model(cfg);
  SgdState opt = make_sgd_state(model.params());
  Rng rng(1);
  PreparedBatch b = micro_batch(cfg, rng);
  auto before = flat_params(model);
  train_step(model, opt, b, cfg, 0.0);
  EXPECT_EQ(flat_params(model), before);
}

TEST(Harness, SmallStepDecreasesTotalLoss) {
  TrainConfig cfg = micro_run("unused");
  net::Network model = micro_model(cfg);
  SgdState opt = make_sgd_state(model.params());
  Rng rng(2);
  PreparedBatch b = micro_batch(cfg, rng);
  double before = compute_losses(model, b, cfg).total.breakdown.total;
  train_step(model, opt, b, cfg, 1e-4);
  double after = compute_losses(model, b, cfg).total.breakdown.total;
  EXPECT_LT(after, before);
}

TEST(Harness, FrozenKeypointsSkipKeypointGroup) {
  TrainConfig cfg = micro_run("unused");
  cfg.freeze_keypoints = true;
  net::Network model = micro_model(cfg);
  SgdState opt = make_sgd_state(model.params());
  Rng rng(3);
  PreparedBatch b = micro_batch(cfg, rng);
  std::map<std::string, std::vector<double>> before;
  for (const auto& p : model.params().entries()) before[p.name] = {p.var.value().begin(), p.var.value().end()};
  train_step(model, opt, b, cfg, 0.01);
  int frozen = 0, moved = 0;
  for (const auto& p : model.params().entries()) {
    std::vector<double> now(p.var.value().begin(), p.var.value().end());
    if (p.group == "keypoint") {
      EXPECT_EQ(now, before[p.name]) << p.name;
      ++frozen;
    } else {
      moved += now != before[p.name];
    }
  }
  EXPECT_GT(frozen, 0);
  EXPECT_GT(moved, 0);
}

TEST(Harness, SgdMatchesMomentumRecurrence) {
  net::ParamStore store;
  store.add("w", {2}, {1.0, -2.0});
  store.add("norm.gamma", {1}, {0.5}, false);
  SgdState st = make_sgd_state(store);
  std::vector<double> v = {0, 0, 0}, p = {1.0, -2.0, 0.5};
  for (int step = 0; step < 3; ++step) {
    store.zero_grad();
    auto gw = store.entries()[0].var.mutable_grad();
    gw[0] = 0.3 * (step + 1), gw[1] = -0.1;
    store.entries()[1].var.mutable_grad()[0] = 0.2;
    sgd_update(store, st, 0.1, 0.9, 0.01, false);
    const double g[3] = {0.3 * (step + 1), -0.1, 0.2};
    for (int i = 0; i < 3; ++i) {
      const double wd = i < 2 ? 0.01 : 0.0;
      v[i] = 0.9 * v[i] + g[i] + wd * p[i];
      p[i] -= 0.1 * v[i];
    }
  }
  EXPECT_NEAR(store.entries()[0].var.value()[0], p[0], 1e-15);
  EXPECT_NEAR(store.entries()[0].var.value()[1], p[1], 1e-15);
  EXPECT_NEAR(store.entries()[1].var.value()[0], p[2], 1e-15);
}

TEST(Harness, GradientClippingCapsNorm) {
  net::ParamStore store;
  store.add("w", {2}, {0.0, 0.0});
  auto g = store.entries()[0].var.mutable_grad();
  g[0] = 3.0, g[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), 5.0);
  EXPECT_NEAR(store.entries()[0].var.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(store.entries()[0].var.grad()[1], 0.8, 1e-15);
}

TEST(Harness, NonFiniteLossNamesTerm) {
  TrainConfig cfg = micro_run("unused");
  net::Network model = micro_model(cfg);
  for (auto& p : model.params().entries())
    if (p.name == "classifier.global.weight") p.var.mutable_value()[0] = NAN;
  SgdState opt = make_sgd_state(model.params());
  Rng rng(4);
  PreparedBatch b = micro_batch(cfg, rng);
  try {
    train_step(model, opt, b, cfg, 0.01);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite loss term: id_global"), std::string::npos) << e.what();
  }
}

TEST(Harness, ZeroEpochsWritesInitialization) {
  test::TempDir out("fit0");
  TrainConfig cfg = micro_run(out.path, 0);
  FitResult r = fit(cfg);
  EXPECT_TRUE(r.records.empty());
  EXPECT_TRUE(read_log(r.log).empty());
  Checkpoint ck = load_checkpoint(r.checkpoint);
  EXPECT_EQ(ck.epoch, 0);
  net::Network restored = restore_network(ck);
  TrainConfig c2 = cfg;
  EXPECT_EQ(flat_params(restored), flat_params(micro_model(c2)));
}

TEST(Harness, LogRecordsEverySixTerms) {
  test::TempDir out("fitlog");
  TrainConfig cfg = micro_run(out.path, 1);
  FitResult r = fit(cfg);
  auto recs = read_log(r.log);
  ASSERT_EQ(recs.size(), r.records.size());
  ASSERT_FALSE(recs.empty());
  std::ifstream is(r.log);
  std::string line;
  std::getline(is, line);
  auto j = nlohmann::json::parse(line);
  for (const char* k : {"id_global", "triplet_global", "id_part", "triplet_part", "equivariance",
                        "feature_consistency", "total", "lr", "epoch", "step"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(losses_of(recs), losses_of(r.records));
}

TEST(Harness, IdenticalSeedsGiveIdenticalLogs) {
  test::TempDir a("det_a"), b("det_b");
  FitResult ra = fit(micro_run(a.path, 2));
  FitResult rb = fit(micro_run(b.path, 2));
  EXPECT_EQ(losses_of(read_log(ra.log)), losses_of(read_log(rb.log)));
}

TEST(Harness, ResumeMatchesUnbrokenRun) {
  test::TempDir a("full"), b("resumed");
  TrainConfig full = micro_run(a.path, 3);
  full.keep_all_checkpoints = true;
  FitResult unbroken = fit(full);
  TrainConfig part = micro_run(b.path, 3);
  FitOptions opts;
  opts.resume = a.path / "epoch_1.ckpt";
  FitResult resumed = fit(part, opts);
  const std::size_t per_epoch = unbroken.records.size() / 3;
  ASSERT_GE(resumed.records.size(), 3u);
  ASSERT_EQ(resumed.records.size(), 2 * per_epoch);
  auto want = losses_of(std::vector<LogRecord>(unbroken.records.begin() + per_epoch, unbroken.records.end()));
  auto got = losses_of(resumed.records);
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  EXPECT_EQ(resumed.records.front().step, unbroken.records[per_epoch].step);
}

TEST(Harness, ResumeRejectsOtherArchitecture) {
  test::TempDir a("arch_a"), b("arch_b");
  fit(micro_run(a.path, 1));
  TrainConfig other = micro_run(b.path, 2);
  other.net.num_parts = 3;
  FitOptions opts;
  opts.resume = a.path / "model.ckpt";
  EXPECT_THROW(fit(other, opts), CheckpointError);
}

TEST(Harness, CheckpointRoundTripPreservesDescriptors) {
  test::TempDir out("ckpt");
  FitResult r = fit(micro_run(out.path, 1));
  Checkpoint ck = load_checkpoint(r.checkpoint);
  save_checkpoint(out.path / "copy.ckpt", ck);
  net::Network a = restore_network(ck);
  net::Network b = restore_network(load_checkpoint(out.path / "copy.ckpt"));
  auto q = synth::load_split(micro_data(), synth::load_manifest(synth::manifest_path(micro_data(), synth::Split::kQuery)));
  auto da = describe(a, q.images), db = describe(b, q.images);
  ASSERT_EQ(da.size(), db.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    EXPECT_EQ(da[i].global, db[i].global);
    EXPECT_EQ(da[i].parts, db[i].parts);
    EXPECT_EQ(da[i].visibility, db[i].visibility);
  }
  EXPECT_EQ(checkpoint_config(ck).net.num_parts, 2);
}

TEST(Harness, CheckpointErrors) {
  test::TempDir dir("bad");
  try {
    load_checkpoint(dir.path / "missing.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("checkpoint not found"), std::string::npos);
  }
  {
    std::ofstream os(dir.path / "junk.ckpt", std::ios::binary);
    os << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir.path / "junk.ckpt"), CheckpointError);
}

TEST(Harness, UnwritableOutputFailsBeforeTraining) {
  test::TempDir dir("unwritable");
  { std::ofstream os(dir.path / "file"); }
  TrainConfig cfg = micro_run(dir.path / "file" / "sub", 1);
  int steps = 0;
  FitOptions opts;
  opts.on_step = [&](const LogRecord&) { ++steps; };
  EXPECT_THROW(fit(cfg, opts), CheckpointError);
  EXPECT_EQ(steps, 0);
}

TEST(Harness, TrainedDescriptorsAreNotFlipSymmetric) {
  test::TempDir out("flip");
  FitResult r = fit(micro_run(out.path, 2));
  net::Network model = restore_network(load_checkpoint(r.checkpoint));
  auto q = synth::load_split(micro_data(), synth::load_manifest(synth::manifest_path(micro_data(), synth::Split::kQuery)));
  std::vector<Image> imgs = {q.images[0], synth::hflip(q.images[0])};
  auto d = describe(model, imgs);
  EXPECT_GT(test::max_abs_diff(d[0].global, d[1].global), 1e-9);
}

TEST(Harness, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-5);
}

TEST(Harness, LinearToyHeadGradientExact) {
  Rng rng(5);
  Var x = test::random_const(rng, {4, 3});
  Var w = test::random_param(rng, {5, 3});
  Var b = test::random_param(rng, {5});
  std::vector<int> labels = {0, 4, 2, 2};
  auto f = [&] { return losses::identity_loss(ag::linear(x, w, b), labels); };
  ag::backward(f());
  double worst = 0.0;
  for (Var* v : {&w, &b}) {
    std::vector<double> analytic(v->grad().begin(), v->grad().end());
    for (std::size_t i = 0; i < v->numel(); ++i) {
      double& vi = v->mutable_value()[i];
      const double keep = vi, h = 1e-5;
      vi = keep + h;
      double up = f().item();
      vi = keep - h;
      double down = f().item();
      vi = keep;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * h)));
    }
  }
  EXPECT_LE(worst, 1e-8);
}

TEST(Harness, GradCheckPassesAndIsDeterministic) {
  GradCheckReport a = grad_check({});
  ASSERT_EQ(a.terms.size(), 6u);
  for (const auto& t : a.terms) {
    EXPECT_TRUE(t.pass) << t.term << " " << t.max_rel_error << " " << t.worst_param;
    EXPECT_LE(t.max_rel_error, 1e-4);
    EXPECT_GT(t.checked, 0);
  }
  EXPECT_TRUE(a.pass);
  GradCheckReport b = grad_check({});
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.to_text(), b.to_text());
}

TEST(Harness, AblationSwitchSemantics) {
  TrainConfig base;
  EXPECT_EQ(apply_switches(base, {"no-encoder"}).net.encoder_layers, 0);
  EXPECT_FALSE(apply_switches(base, {"no-decoder"}).net.use_decoder);
  TrainConfig noseg = apply_switches(base, {"no-segmentation-branch"});
  EXPECT_FALSE(noseg.segmentation_branch);
  EXPECT_EQ(noseg.weights.id_part + noseg.weights.triplet_part + noseg.weights.feature_consistency, 0.0);
  TrainConfig frozen = apply_switches(base, {"frozen-keypoints"});
  EXPECT_TRUE(frozen.freeze_keypoints);
  EXPECT_EQ(frozen.weights.equivariance, 0.0);
  EXPECT_EQ(apply_switches(base, {"lambda6=0"}).weights.feature_consistency, 0.0);
  EXPECT_EQ(apply_switches(base, {"K=17"}).net.num_parts, 17);
  EXPECT_THROW(apply_switches(base, {"K=0"}), ConfigError);
  EXPECT_THROW(apply_switches(base, {"bogus"}), ConfigError);
  EXPECT_EQ(parse_switches("none"), std::vector<std::string>{});
  EXPECT_EQ(parse_switches("frozen-keypoints, K=3"), (std::vector<std::string>{"frozen-keypoints", "K=3"}));
}

TEST(Harness, AblationTablesAndDeterminism) {
  test::TempDir a("abl_a"), b("abl_b");
  std::vector<Variant> variants = {{"full", {}}, {"no-seg", {"no-segmentation-branch"}}};
  TrainConfig base = micro_run(a.path, 1);
  AblationReport ra = ablate(base, variants, {1});
  base.out_dir = b.path.string();
  AblationReport rb = ablate(base, variants, {1});
  ASSERT_EQ(ra.rows.size(), 2u);
  const std::string table = ra.module_table();
  for (const char* col : {"Index", "Encoder", "Decoder", "Segmentation Branch", "Pre-train", "Self-supervised",
                          "Rank-1", "Rank-5", "Rank-10", "mAP"})
    EXPECT_NE(table.find(col), std::string::npos) << col;
  EXPECT_EQ(table, rb.module_table());
  EXPECT_EQ(ra.to_json(), rb.to_json());
}

TEST(Harness, PartSweepTable) {
  test::TempDir a("sweep");
  std::vector<Variant> variants;
  for (int k : {3, 6, 10, 17}) variants.push_back({"K=" + std::to_string(k), {"K=" + std::to_string(k)}});
  TrainConfig base = micro_run(a.path, 1);
  base.steps_per_epoch = 1;
  AblationReport r = ablate(base, variants, {1});
  ASSERT_EQ(r.rows.size(), 4u);
  const std::string table = r.part_table();
  EXPECT_NE(table.find("part number"), std::string::npos);
  for (const char* k : {"| 3 |", "| 6 |", "| 10 |", "| 17 |"}) EXPECT_NE(table.find(k), std::string::npos) << table;
}
