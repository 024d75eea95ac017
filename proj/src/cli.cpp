#include "mareid/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mareid/harness.hpp"
#include "mareid/synthgen.hpp"

namespace mareid::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

const std::array<std::array<double, 3>, 11>& palette() {
  static const std::array<std::array<double, 3>, 11> p = {{
      {0.902, 0.098, 0.294},
      {0.235, 0.706, 0.294},
      {1.000, 0.882, 0.098},
      {0.263, 0.388, 0.847},
      {0.961, 0.510, 0.192},
      {0.569, 0.118, 0.706},
      {0.259, 0.831, 0.957},
      {0.941, 0.196, 0.902},
      {0.749, 0.937, 0.271},
      {0.980, 0.745, 0.831},
      {0.150, 0.150, 0.150},
  }};
  return p;
}

std::array<double, 3> part_color(int part, int num_parts) {
  if (part >= num_parts) return palette()[10];
  return palette()[part % 10];
}

namespace {

Image upscale(const Image& img, int s) {
  Image out(img.height * s, img.width * s, img.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y / s, x / s, c);
  return out;
}

void blit(Image& dst, const Image& src, int oy, int ox) {
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < 3; ++c) dst.at(oy + y, ox + x, c) = src.at(y, x, c);
}

void dot(Image& img, double cx, double cy, int r, const std::array<double, 3>& col) {
  for (int y = static_cast<int>(std::floor(cy - r)); y <= static_cast<int>(std::ceil(cy + r)); ++y)
    for (int x = static_cast<int>(std::floor(cx - r)); x <= static_cast<int>(std::ceil(cx + r)); ++x) {
      if (y < 0 || x < 0 || y >= img.height || x >= img.width) continue;
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      if (d2 > r * r) continue;
      const bool rim = d2 > (r - 1) * (r - 1);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = rim ? 0.0 : col[c];
    }
}

}  // namespace

Image render_panel(const net::Network& model, const Image& image, int scale) {
  ag::NoGradGuard ng;
  const auto& nc = model.config();
  const int K = nc.num_parts, gh = nc.grid_h(), gw = nc.grid_w(), L = gh * gw;
  const int H = image.height, W = image.width;
  net::NetOutputs o = model.forward(net::images_to_tensor(std::span<const Image>(&image, 1)));
  auto parts = o.parts.value();
  auto coords = o.keypoints.coords.value();

  Image seg(H, W, 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int cell = (y / net::NetConfig::kStride) * gw + x / net::NetConfig::kStride;
      int best = 0;
      for (int k = 1; k <= K; ++k)
        if (parts[static_cast<std::size_t>(k) * L + cell] > parts[static_cast<std::size_t>(best) * L + cell]) best = k;
      const auto col = part_color(best, K);
      for (int c = 0; c < 3; ++c) seg.at(y, x, c) = col[c];
    }
  Image base = upscale(image, scale);
  Image kp = base;
  for (int k = 0; k < K; ++k) {
    const double gx = (coords[2 * k] + 1.0) * 0.5 * (gw - 1);
    const double gy = (coords[2 * k + 1] + 1.0) * 0.5 * (gh - 1);
    const double px = ((gx + 0.5) * net::NetConfig::kStride - 0.5) * scale + (scale - 1) * 0.5;
    const double py = ((gy + 0.5) * net::NetConfig::kStride - 0.5) * scale + (scale - 1) * 0.5;
    dot(kp, px, py, std::max(2, scale + 1), part_color(k, K));
  }
  Image segs = upscale(seg, scale);
  Image over = base;
  for (std::size_t i = 0; i < over.data.size(); ++i) over.data[i] = 0.5 * base.data[i] + 0.5 * segs.data[i];

  const int tw = W * scale, th = H * scale, gap = 4;
  const int sw = std::max(6, scale * 4);
  const int legend_h = sw + 2 * gap;
  const int total_w = 4 * tw + 5 * gap;
  const int cols = std::max(1, (total_w - gap) / (sw + gap));
  const int legend_rows = (K + 1 + cols - 1) / cols;
  Image panel(th + 2 * gap + legend_rows * legend_h, total_w, 3, 1.0);
  const Image* tiles[] = {&base, &kp, &segs, &over};
  for (int t = 0; t < 4; ++t) blit(panel, *tiles[t], gap, gap + t * (tw + gap));
  for (int e = 0; e <= K; ++e) {
    const int row = e / cols, col = e % cols;
    const auto c = part_color(e, K);
    const int oy = th + 2 * gap + row * legend_h + gap, ox = gap + col * (sw + gap);
    for (int y = 0; y < sw; ++y)
      for (int x = 0; x < sw; ++x)
        for (int ch = 0; ch < 3; ++ch) panel.at(oy + y, ox + x, ch) = c[ch];
  }
  return panel;
}

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Failure("invalid seed list: " + csv);
    }
  }
  if (out.empty()) throw Failure("empty seed list");
  return out;
}

void apply_sets(harness::TrainConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw harness::ConfigError("--set expects key=value, got '" + s + "'");
    harness::apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << text;
  if (!os) throw Failure("cannot write " + path.string());
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Keypoint and part-segmentation re-identification toolkit", "mareid"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic sprite dataset");
  std::string gen_config, gen_out = "data";
  std::uint64_t gen_seed = 1;
  int gen_ids = -1, gen_per_id = -1;
  gen->add_option("--config", gen_config, "YAML generator config");
  gen->add_option("--out", gen_out, "Output dataset directory")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--num-identities", gen_ids, "Override identity count");
  gen->add_option("--images-per-identity", gen_per_id, "Override images per identity");

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string tr_config, tr_data, tr_out, tr_resume;
  std::uint64_t tr_seed = 1;
  int tr_epochs = -1;
  std::vector<std::string> tr_sets;
  bool tr_quiet = false;
  train->add_option("--config", tr_config, "YAML training config");
  train->add_option("--data", tr_data, "Dataset directory (overrides data_dir)");
  train->add_option("--out", tr_out, "Run directory (overrides out_dir)");
  auto* tr_seed_opt = train->add_option("--seed", tr_seed, "Training seed");
  train->add_option("--epochs", tr_epochs, "Override epoch count");
  train->add_option("--resume", tr_resume, "Checkpoint to resume from");
  train->add_option("--set", tr_sets, "Config override key=value (repeatable)");
  train->add_flag("--quiet", tr_quiet, "Only print the final summary");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate retrieval on query/gallery");
  std::string ev_ckpt, ev_data, ev_out, ev_desc = "full";
  double ev_wg = 0.5;
  ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset directory (default: the checkpoint's data_dir)");
  ev->add_option("--descriptor", ev_desc, "global | full | both")
      ->check(CLI::IsMember({"global", "full", "both"}))
      ->capture_default_str();
  ev->add_option("--global-weight", ev_wg, "Weight of the global term in the full distance")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  ev->add_option("--out", ev_out, "Write metrics JSON here");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and compare ablation variants");
  std::string ab_config, ab_data, ab_out = "runs/ablation", ab_seeds = "1", ab_variants = "full", ab_ksweep;
  std::vector<std::string> ab_sets;
  ab->add_option("--config", ab_config, "YAML training config");
  ab->add_option("--data", ab_data, "Dataset directory");
  ab->add_option("--out", ab_out, "Output directory")->capture_default_str();
  ab->add_option("--seeds", ab_seeds, "Comma-separated seeds")->capture_default_str();
  ab->add_option("--variants", ab_variants,
                 "Semicolon-separated switch sets, e.g. 'full;no-segmentation-branch;frozen-keypoints'. Switches: "
                 "no-encoder, no-decoder, no-segmentation-branch, frozen-keypoints, lambda6=0, K=<n>")
      ->capture_default_str();
  ab->add_option("--k-sweep", ab_ksweep, "Comma-separated part counts, e.g. 3,6,10,17");
  ab->add_option("--set", ab_sets, "Config override key=value (repeatable)");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient check on the micro model");
  std::uint64_t gc_seed = 1;
  int gc_coords = 0;
  std::string gc_out;
  gc->add_option("--seed", gc_seed, "Seed")->capture_default_str();
  gc->add_option("--max-coords", gc_coords, "Coordinates sampled per tensor (0 = all)")->capture_default_str();
  gc->add_option("--out", gc_out, "Write the JSON report here");

  // visualize
  auto* vis = app.add_subcommand("visualize", "Write keypoint / part-segmentation panels");
  std::string vis_ckpt, vis_data, vis_out = "panels", vis_split = "query";
  int vis_n = 4, vis_scale = 3;
  std::uint64_t vis_seed = 1;
  vis->add_option("--checkpoint", vis_ckpt, "Model checkpoint")->required();
  vis->add_option("--data", vis_data, "Dataset directory (default: the checkpoint's data_dir)");
  vis->add_option("--out", vis_out, "Output directory")->capture_default_str();
  vis->add_option("--n", vis_n, "Number of panels")->check(CLI::PositiveNumber)->capture_default_str();
  vis->add_option("--split", vis_split, "train | query | gallery")
      ->check(CLI::IsMember({"train", "query", "gallery"}))
      ->capture_default_str();
  vis->add_option("--scale", vis_scale, "Pixel upscaling")->check(CLI::Range(1, 16))->capture_default_str();
  vis->add_option("--seed", vis_seed, "Sample selection seed")->capture_default_str();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    const CLI::App* sub = nullptr;
    for (auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (*gen) {
      synth::GenConfig g = gen_config.empty() ? synth::GenConfig{} : synth::load_gen_config(gen_config);
      if (gen_ids > 0) g.num_identities = gen_ids;
      if (gen_per_id > 0) g.images_per_identity = gen_per_id;
      g.validate();
      auto ds = synth::build_dataset(g, gen_seed, gen_out);
      json j = {{"out", gen_out},
                {"train", ds.train.records.size()},
                {"query", ds.query.records.size()},
                {"gallery", ds.gallery.records.size()},
                {"seed", gen_seed}};
      out << j.dump() << '\n';
      return 0;
    }
    if (*train) {
      harness::TrainConfig cfg = tr_config.empty() ? harness::TrainConfig{} : harness::load_train_config(tr_config);
      if (!tr_data.empty()) cfg.data_dir = tr_data;
      if (!tr_out.empty()) cfg.out_dir = tr_out;
      if (tr_seed_opt->count()) cfg.seed = tr_seed;
      if (tr_epochs >= 0) cfg.epochs = tr_epochs;
      apply_sets(cfg, tr_sets);
      cfg.validate();
      harness::FitOptions fo;
      if (!tr_resume.empty()) {
        if (!fs::exists(tr_resume)) throw Failure("checkpoint not found: " + tr_resume);
        fo.resume = tr_resume;
      }
      if (!tr_quiet)
        fo.on_step = [&](const harness::LogRecord& r) { out << harness::to_json(r).dump() << '\n' << std::flush; };
      auto res = harness::fit(cfg, fo);
      out << json{{"checkpoint", res.checkpoint.string()}, {"log", res.log.string()}, {"steps", res.records.size()}}
                 .dump()
          << '\n';
      return 0;
    }
    if (*ev) {
      if (!fs::exists(ev_ckpt)) throw Failure("checkpoint not found: " + ev_ckpt);
      auto ck = harness::load_checkpoint(ev_ckpt);
      net::Network model = harness::restore_network(ck);
      const fs::path data = ev_data.empty() ? fs::path(harness::checkpoint_config(ck).data_dir) : fs::path(ev_data);
      auto rep = harness::evaluate(model, data, ev_wg);
      json j;
      if (ev_desc == "global")
        j = reid::metrics_json(rep.global);
      else if (ev_desc == "full")
        j = reid::metrics_json(rep.full);
      else
        j = {{"global", reid::metrics_json(rep.global)}, {"full", reid::metrics_json(rep.full)}};
      if (!ev_out.empty()) write_text(ev_out, j.dump(2) + "\n");
      out << j.dump() << '\n';
      return 0;
    }
    if (*ab) {
      harness::TrainConfig cfg = ab_config.empty() ? harness::TrainConfig{} : harness::load_train_config(ab_config);
      if (!ab_data.empty()) cfg.data_dir = ab_data;
      cfg.out_dir = ab_out;
      apply_sets(cfg, ab_sets);
      std::vector<harness::Variant> variants;
      std::stringstream vs(ab_variants);
      std::string item;
      while (std::getline(vs, item, ';')) {
        if (item.empty()) continue;
        harness::Variant v{item, harness::parse_switches(item)};
        if (v.switches.empty()) v.name = "full";
        variants.push_back(v);
      }
      if (!ab_ksweep.empty()) {
        std::stringstream ks(ab_ksweep);
        while (std::getline(ks, item, ','))
          if (!item.empty()) variants.push_back({"K=" + item, {"K=" + item}});
      }
      if (variants.empty()) throw harness::ConfigError("no ablation variants given");
      auto seeds = parse_seeds(ab_seeds);
      auto rep = harness::ablate(cfg, variants, seeds, [&](const harness::AblationRow& r) {
        out << json{{"variant", r.variant.name}, {"seed", r.seed}, {"full", reid::metrics_json(r.report.full)},
                    {"global", reid::metrics_json(r.report.global)}}
                   .dump()
            << '\n'
            << std::flush;
      });
      write_text(fs::path(ab_out) / "ablation.json", rep.to_json().dump(2) + "\n");
      write_text(fs::path(ab_out) / "module_table.md", rep.module_table());
      write_text(fs::path(ab_out) / "part_table.md", rep.part_table());
      out << rep.module_table() << '\n' << rep.part_table();
      return 0;
    }
    if (*gc) {
      harness::GradCheckOptions o;
      o.seed = gc_seed;
      o.max_coords_per_param = gc_coords;
      auto rep = harness::grad_check(o);
      out << rep.to_text();
      if (!gc_out.empty()) write_text(gc_out, rep.to_json().dump(2) + "\n");
      if (!rep.pass) {
        err << "error: grad-check failed\n";
        return 1;
      }
      return 0;
    }
    if (*vis) {
      if (!fs::exists(vis_ckpt)) throw Failure("checkpoint not found: " + vis_ckpt);
      auto ck = harness::load_checkpoint(vis_ckpt);
      net::Network model = harness::restore_network(ck);
      const fs::path data = vis_data.empty() ? fs::path(harness::checkpoint_config(ck).data_dir) : fs::path(vis_data);
      const fs::path mp = synth::manifest_path(data, synth::parse_split(vis_split));
      if (!fs::exists(mp)) throw Failure("dataset manifest not found: " + mp.string());
      auto m = synth::load_manifest(mp);
      std::vector<std::size_t> order(m.records.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng = substream(vis_seed, 301);
      std::shuffle(order.begin(), order.end(), rng);
      const std::size_t n = std::min<std::size_t>(vis_n, order.size());
      fs::create_directories(vis_out);
      json written = json::array();
      for (std::size_t i = 0; i < n; ++i) {
        const auto& rec = m.records[order[i]];
        Image img = read_png(data / rec.path);
        Image panel = render_panel(model, img, vis_scale);
        char name[32];
        std::snprintf(name, sizeof name, "panel_%02zu.png", i);
        write_png(fs::path(vis_out) / name, panel);
        written.push_back((fs::path(vis_out) / name).string());
      }
      out << json{{"panels", written}}.dump() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }
  return 2;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace mareid::cli
