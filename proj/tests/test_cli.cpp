#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "mareid/cli.hpp"
#include "mareid/harness.hpp"
#include "support.hpp"

using namespace mareid;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Dataset plus a micro-model training config shared by the CLI tests.
struct Fixture {
  test::TempDir dir{"cli"};
  std::filesystem::path data = dir.path / "data", config = dir.path / "micro.yaml", run_dir = dir.path / "run";
  Fixture() {
    {
      std::ofstream g(dir.path / "gen.yaml");
      g << "num_identities: 6\nimages_per_identity: 8\nheight: 32\nwidth: 16\n";
    }
    Result r = run({"gen-data", "--config", (dir.path / "gen.yaml").string(), "--out", data.string(), "--seed", "4"});
    if (r.code != 0) throw std::runtime_error(r.err);
    harness::TrainConfig c = harness::micro_config(2);
    c.weights = losses::LossWeights{};
    std::ofstream os(config);
    os << harness::config_to_json(c).dump(2) << '\n';
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

std::filesystem::path trained_checkpoint() {
  static std::filesystem::path ck;
  if (ck.empty()) {
    auto& f = fixture();
    Result r = run({"train", "--config", f.config.string(), "--data", f.data.string(), "--out", f.run_dir.string(),
                    "--epochs", "1", "--quiet"});
    if (r.code != 0) throw std::runtime_error(r.err);
    ck = f.run_dir / "model.ckpt";
  }
  return ck;
}

}  // namespace

TEST(Cli, GenDataReportsSplitSizes) {
  auto& f = fixture();
  EXPECT_TRUE(std::filesystem::exists(synth::manifest_path(f.data, synth::Split::kTrain)));
  test::TempDir out("gen");
  Result r = run({"gen-data", "--out", out.path.string(), "--num-identities", "4", "--images-per-identity", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["train"], 8);
  EXPECT_EQ(j["query"].get<int>() + j["gallery"].get<int>(), 8);
}

TEST(Cli, TrainWritesCheckpointAndLog) {
  auto ck = trained_checkpoint();
  EXPECT_TRUE(std::filesystem::exists(ck));
  auto recs = harness::read_log(fixture().run_dir / "train_log.jsonl");
  EXPECT_FALSE(recs.empty());
}

TEST(Cli, TrainStreamsStepRecords) {
  auto& f = fixture();
  test::TempDir out("stream");
  Result r = run({"train", "--config", f.config.string(), "--data", f.data.string(), "--out", out.path.string(),
                  "--epochs", "1", "--set", "steps_per_epoch=2"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream is(r.out);
  std::string line;
  int steps = 0;
  while (std::getline(is, line))
    if (nlohmann::json::parse(line).contains("total")) ++steps;
  EXPECT_EQ(steps, 2);
}

TEST(Cli, EvalPrintsMetrics) {
  auto ck = trained_checkpoint();
  Result r = run({"eval", "--checkpoint", ck.string(), "--descriptor", "global"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j.contains("mAP"));
  EXPECT_TRUE(j.contains("rank1"));
}

TEST(Cli, GradCheckSucceeds) {
  test::TempDir out("gc");
  Result r = run({"grad-check", "--seed", "1", "--out", (out.path / "gc.json").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(slurp(out.path / "gc.json"));
  EXPECT_TRUE(j["pass"].get<bool>());
}

TEST(Cli, MissingCheckpointIsRuntimeFailure) {
  Result r = run({"eval", "--checkpoint", "missing.ckpt"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("checkpoint not found"), std::string::npos) << r.err;
  r = run({"visualize", "--checkpoint", "missing.ckpt"});
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"train", "--no-such-flag"}).code, 2);
  EXPECT_EQ(run({"eval"}).code, 2);
  EXPECT_EQ(run({"visualize", "--checkpoint", "x", "--n", "0"}).code, 2);
}

TEST(Cli, BadOverrideIsRuntimeFailure) {
  Result r = run({"train", "--set", "nonsense=1", "--epochs", "0"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nonsense"), std::string::npos) << r.err;
}

TEST(Cli, VisualizeIsDeterministic) {
  auto ck = trained_checkpoint();
  test::TempDir a("vis_a"), b("vis_b");
  for (auto* d : {&a, &b}) {
    Result r = run({"visualize", "--checkpoint", ck.string(), "--out", d->path.string(), "--n", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(a.path)) {
    ++n;
    EXPECT_EQ(slurp(e.path()), slurp(b.path / e.path().filename()));
  }
  EXPECT_EQ(n, 4);
}

TEST(Cli, LegendHasOneSwatchPerPartAndBackground) {
  std::set<std::array<double, 3>> colours;
  for (int k = 0; k <= 10; ++k) colours.insert(cli::part_color(k, 10));
  EXPECT_EQ(colours.size(), 11u);
  EXPECT_EQ(cli::part_color(10, 10), cli::palette()[10]);

  net::NetConfig nc;
  nc.num_parts = 10;
  nc.num_classes = 3;
  Rng rng(1);
  net::Network model(nc, rng);
  Image img(64, 32, 3, 0.5);
  Image panel = cli::render_panel(model, img, 1);
  const int legend_top = 64 + 8;
  std::set<std::array<double, 3>> seen;
  for (int y = legend_top; y < panel.height; ++y)
    for (int x = 0; x < panel.width; ++x) {
      std::array<double, 3> c = {panel.at(y, x, 0), panel.at(y, x, 1), panel.at(y, x, 2)};
      if (c != std::array<double, 3>{1.0, 1.0, 1.0}) seen.insert(c);
    }
  EXPECT_EQ(seen, colours);
}

#ifdef MAREID_CLI_PATH
TEST(Cli, BinaryExitCodes) {
  const std::string bin = MAREID_CLI_PATH;
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " --help > /dev/null").c_str())), 0);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " bogus > /dev/null 2>&1").c_str())), 2);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " eval --checkpoint missing.ckpt > /dev/null 2>&1").c_str())), 1);
}
#endif
