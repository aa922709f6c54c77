// artfix command-line tool. Exit codes: 0 success, 2 configuration or
// usage error, 3 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "artfix/artfix.hpp"
#include "artfix/config.hpp"
#include "artfix/data.hpp"
#include "artfix/image_io.hpp"
#include "artfix/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace artfix;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool needs_out = true) {
  app->add_option("--config", c.config, "config file (key = value, [section] headers)");
  app->add_option("--seed", c.seed, "run seed (overrides run.seed)");
  app->add_option("--set", c.overrides, "override as section.key=value")->take_all();
  auto* o = app->add_option("--out", c.out, "output directory");
  if (needs_out) o->required();
}

RunConfig resolve(const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) load_config_file(rc, c.config);
  for (const auto& o : c.overrides) apply_override(rc, o);
  if (c.seed) rc.seed = *c.seed;
  rc.train.seed = rc.seed;
  validate_config(rc);
  return rc;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

/// A file or every image in a directory, sorted by name.
std::vector<fs::path> inputs_of(const fs::path& p) {
  if (fs::is_directory(p)) {
    auto v = list_images(p);
    if (v.empty()) throw UsageError("no PNG/JPEG images in " + p.string());
    return v;
  }
  if (!fs::exists(p)) throw UsageError("input " + p.string() + " does not exist");
  return {p};
}

/// Training images from the config: a directory or the generated corpus.
std::vector<ImageTensor> training_images(const RunConfig& rc, std::vector<ImageTensor>* held_out) {
  if (!rc.data.root_path.empty()) {
    if (!fs::is_directory(rc.data.root_path))
      throw ConfigError("data.root_path: '" + rc.data.root_path.string() + "' is not a directory");
    Dataset d = load_dataset(rc.data);
    if (held_out) *held_out = d.validation;
    return d.train;
  }
  if (rc.synthetic_count <= 0)
    throw ConfigError("data.root_path: required (or set data.synthetic_count to train on generated textures)");
  auto imgs = tissue_corpus(std::size_t(rc.synthetic_count), std::size_t(rc.model.image_size), rc.seed + 1);
  for (auto& im : imgs) im = im.converted(ValueDomain::signed11);
  if (held_out) {
    held_out->clear();
    for (auto& im : tissue_corpus(64, std::size_t(rc.model.image_size), rc.seed + 7919))
      held_out->push_back(im.converted(ValueDomain::signed11));
  }
  return imgs;
}

TrainResult run_training(const RunConfig& rc, const DenoiserConfig& model, const fs::path& out,
                         std::vector<ImageTensor>* held_out) {
  fs::create_directories(out);
  auto images = training_images(rc, held_out);
  spdlog::info("training {} on {} images for {} steps", model.variant_name(), images.size(), rc.train.total_steps);
  std::ofstream loss_csv(out / "loss.csv");
  loss_csv << "step,loss\n";
  loss_csv.precision(9);
  double window = 0;
  auto on_step = [&](std::int64_t step, double loss) {
    loss_csv << step << ',' << loss << '\n';
    window += loss;
    if (step % 100 == 0) {
      spdlog::info("step {} mean loss {:.5f}", step, window / 100);
      window = 0;
    }
  };
  auto on_ckpt = [&](const Checkpoint& c) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_%06lld.bin", static_cast<long long>(c.step));
    save_checkpoint(c, out / name);
  };
  try {
    TrainResult r = train(std::move(images), model, rc.train, rc.diffusion, on_ckpt, on_step);
    save_checkpoint(r.final, out / "model.bin");
    return r;
  } catch (const TrainingDiverged& e) {
    write_text(out / "diverged.txt", e.what());
    throw;
  }
}

/// Weights used for inference: the moving average when the checkpoint has one.
DenoiserWeights<float> inference_weights(const Checkpoint& c) {
  DenoiserWeights<float> w = c.weights;
  for (auto& [k, t] : w.tensors) {
    auto it = c.optimizer_state.find("ema/" + k);
    if (it != c.optimizer_state.end()) t.data = it->second;
  }
  return w;
}

std::uint64_t image_seed(std::uint64_t seed, std::size_t index) { return seed * 1000003ull + index; }

// ------------------------------------------------------------ commands

int cmd_train(const Common& c) {
  const RunConfig rc = resolve(c);
  run_training(rc, rc.model, c.out, nullptr);
  return 0;
}

int cmd_textures(const Common& c, int count) {
  const RunConfig rc = resolve(c);
  if (count < 1) throw UsageError("--count must be >= 1");
  fs::create_directories(c.out);
  const auto imgs = tissue_corpus(std::size_t(count), std::size_t(rc.model.image_size), rc.seed);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "tex_%04zu.png", i);
    write_image(fs::path(c.out) / name, imgs[i]);
  }
  return 0;
}

int cmd_synthesize(const Common& c, const std::string& input) {
  const RunConfig rc = resolve(c);
  const auto files = inputs_of(input);
  const fs::path out = c.out;
  fs::create_directories(out / "masks");
  for (std::size_t i = 0; i < files.size(); ++i) {
    const ImageTensor x = read_image(files[i], ValueDomain::byte255);
    SyntheticArtifactSpec spec;
    spec.kind = rc.synth_kind;
    spec.intensity = rc.synth_intensity;
    spec.seed = image_seed(rc.seed, i);
    const auto r = synthesize_artifact(x, spec);
    const auto name = files[i].stem().string() + ".png";
    write_image(out / name, r.corrupted);
    write_mask(out / "masks" / name, r.truth);
  }
  spdlog::info("synthesized {} {} artifacts into {}", files.size(), artifact_kind_name(rc.synth_kind), out.string());
  return 0;
}

int cmd_detect(const Common& c, const std::string& input) {
  const RunConfig rc = resolve(c);
  const auto files = inputs_of(input);
  const fs::path out = c.out;
  fs::create_directories(out);
  std::ostringstream csv;
  csv << "id,coverage\n";
  for (const auto& f : files) {
    const ArtifactMask m = detect_artifacts(read_image(f, ValueDomain::unit01), rc.detect);
    write_mask(out / (f.stem().string() + ".png"), m);
    csv << f.stem().string() << ',' << format_metric(m.coverage()) << '\n';
  }
  write_text(out / "coverage.csv", csv.str());
  return 0;
}

int cmd_restore(const Common& c, const std::string& checkpoint, const std::string& input, const std::string& mask,
                bool detect, const std::vector<int>& snapshots_flag) {
  if (mask.empty() == !detect) throw UsageError("restore needs exactly one of --mask or --detect");
  RunConfig rc = resolve(c);
  if (!snapshots_flag.empty()) rc.snapshots = snapshots_flag;
  const Checkpoint ck = load_checkpoint(checkpoint);
  const NoiseSchedule s = ck.schedule.build();
  for (int t : rc.snapshots)
    if (t < 0 || t > s.steps()) throw UsageError("--snapshots: timestep " + std::to_string(t) + " out of range");
  const DenoiserWeights<float> w = inference_weights(ck);

  const auto files = inputs_of(input);
  const bool mask_dir = !mask.empty() && fs::is_directory(mask);
  if (!mask.empty() && !mask_dir && files.size() != 1)
    throw UsageError("--mask must be a directory when restoring a directory");
  const fs::path out = c.out;
  fs::create_directories(out / "masks");
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string stem = files[i].stem().string();
    const ImageTensor x = read_image(files[i], ValueDomain::signed11);
    ArtifactMask m;
    if (detect) {
      m = detect_artifacts(x.converted(ValueDomain::unit01), rc.detect);
    } else {
      const fs::path mp = mask_dir ? fs::path(mask) / (stem + ".png") : fs::path(mask);
      if (!fs::exists(mp)) throw UsageError("no mask for '" + stem + "' at " + mp.string());
      m = read_mask(mp);
    }
    if (!m.matches(x)) throw std::runtime_error("mask for '" + stem + "' does not match the image size");
    const auto tr = restore(x, m, w, ck.config, s, rc.snapshots, image_seed(rc.seed, i), rc.restore);
    write_image(out / (stem + ".png"), tr.final);
    write_mask(out / "masks" / (stem + ".png"), m);
    if (!tr.snapshots.empty()) {
      const fs::path sd = out / "snapshots" / stem;
      fs::create_directories(sd);
      std::vector<ImageTensor> strip;
      for (const auto& [t, img] : tr.snapshots) {
        write_image(sd / ("snap_t" + std::to_string(t) + ".png"), img);
        strip.push_back(img);
      }
      write_strip(sd / "grid.png", strip);
    }
    spdlog::info("restored {} ({:.1f}% masked)", stem, 100 * m.coverage());
  }
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& clean, const std::string& restored, const std::string& masks) {
  resolve(c);
  auto index = [](const fs::path& dir) {
    if (!fs::is_directory(dir)) throw UsageError(dir.string() + " is not a directory");
    std::map<std::string, fs::path> m;
    for (const auto& p : list_images(dir)) m[p.stem().string()] = p;
    return m;
  };
  const auto a = index(clean), b = index(restored), mk = index(masks);
  std::vector<std::string> unmatched;
  for (const auto& [k, _] : a)
    if (!b.count(k) || !mk.count(k)) unmatched.push_back(k);
  for (const auto& [k, _] : b)
    if (!a.count(k)) unmatched.push_back(k);
  if (!unmatched.empty()) {
    std::string msg = "unpaired ids:";
    for (const auto& k : unmatched) msg += " " + k;
    throw UsageError(msg);
  }
  if (a.empty()) throw UsageError("no images to evaluate");
  std::vector<MetricRow> rows;
  for (const auto& [k, p] : a) {
    const ImageTensor x = read_image(p, ValueDomain::byte255), y = read_image(b.at(k), ValueDomain::byte255);
    if (!x.same_shape(y)) throw std::runtime_error("'" + k + "': clean and restored sizes differ");
    rows.push_back(evaluate_pair(k, x, y, read_mask(mk.at(k))));
  }
  const MetricsReport rep = build_report(std::move(rows));
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "report.csv", rep.to_csv());
  write_text(fs::path(c.out) / "report.json", rep.to_json().dump(2) + "\n");
  std::cout << rep.to_csv();
  return 0;
}

/// Held-out corruption used by ablate: kinds cycle fold, bubble, ink.
SynthesisResult corrupt_held_out(const ImageTensor& clean01, std::size_t k, std::uint64_t seed, double intensity) {
  SyntheticArtifactSpec spec;
  spec.kind = std::array{ArtifactKind::fold, ArtifactKind::bubble, ArtifactKind::ink}[k % 3];
  spec.seed = image_seed(seed, k);
  spec.intensity = intensity;
  return synthesize_artifact(clean01, spec);
}

int cmd_ablate(const Common& c) {
  const RunConfig rc = resolve(c);
  const fs::path out = c.out;
  fs::create_directories(out);
  const NoiseSchedule s = rc.diffusion.build();
  std::ostringstream csv;
  csv << "variant";
  for (const auto& col : metric_columns()) csv << ',' << col;
  csv << ",params,flops,inference_seconds\n";
  nlohmann::ordered_json js = nlohmann::ordered_json::array();

  for (const auto& variant : variant_names()) {
    const DenoiserConfig model = with_variant(rc.model, variant);
    std::vector<ImageTensor> held;
    const TrainResult tr = run_training(rc, model, out / variant, &held);
    if (held.empty()) throw ConfigError("data.validation_fraction: ablate needs held-out images");

    std::vector<MetricRow> rows;
    std::vector<double> seconds;
    const std::size_t runs = std::max<std::size_t>(std::size_t(rc.ablate_eval_images), std::size_t(rc.ablate_timed_restores));
    for (std::size_t k = 0; k < runs; ++k) {
      const ImageTensor clean = held[k % held.size()].converted(ValueDomain::unit01);
      const auto syn = corrupt_held_out(clean, k, rc.seed, rc.synth_intensity);
      const ImageTensor x = syn.corrupted.converted(ValueDomain::signed11);
      const auto t0 = std::chrono::steady_clock::now();
      const auto rt = restore(x, syn.truth, inference_weights(tr.final), model, s, {}, image_seed(rc.seed, k),
                              rc.restore);
      seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (k < std::size_t(rc.ablate_eval_images))
        rows.push_back(evaluate_pair(std::to_string(k), clean, rt.final, syn.truth));
    }
    double mean_s = 0;
    for (double v : seconds) mean_s += v / double(seconds.size());
    const MetricsReport rep = build_report(rows, Complexity{param_count(model), flop_count(model), mean_s});
    write_text(out / variant / "report.json", rep.to_json().dump(2) + "\n");

    const auto& a = rep.aggregate;
    csv << variant;
    for (double v : {a.l2_region * 1e-4, a.mse, a.ssim, a.psnr, a.fsim, a.sre}) csv << ',' << format_metric(v);
    csv << ',' << param_count(model) << ',' << flop_count(model) << ',' << format_metric(mean_s) << '\n';
    nlohmann::ordered_json row;
    row["variant"] = variant;
    const auto j = rep.to_json();
    for (const auto& col : metric_columns()) row[col] = j["aggregate"][col];
    row["params"] = param_count(model);
    row["flops"] = flop_count(model);
    row["inference_seconds"] = mean_s;
    js.push_back(row);
    spdlog::info("{}: ssim {:.4f} psnr {:.2f} params {} mean restore {:.2f}s", variant, a.ssim, a.psnr,
                 param_count(model), mean_s);
  }
  write_text(out / "ablation.csv", csv.str());
  write_text(out / "ablation.json", js.dump(2) + "\n");
  std::cout << csv.str();
  return 0;
}

/// Prints a report or ablation JSON as a fixed-width table.
int cmd_report(const std::string& input) {
  std::ifstream f(input);
  if (!f) throw UsageError("cannot read " + input);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(f);
  } catch (const std::exception& e) {
    throw UsageError(input + ": not JSON (" + e.what() + ")");
  }
  std::vector<nlohmann::ordered_json> rows;
  std::vector<std::string> cols;
  std::string key = "id";
  if (j.is_array()) {
    key = "variant";
    for (const auto& r : j) rows.push_back(r);
  } else {
    if (!j.contains("aggregate")) throw UsageError(input + ": not a metrics report");
    for (const auto& r : j["per_image"]) rows.push_back(r);
    rows.push_back(j["aggregate"]);
  }
  if (rows.empty()) throw UsageError(input + ": no rows");
  for (const auto& [k, _] : rows[0].items())
    if (k != key) cols.push_back(k);
  std::printf("%-14s", key.c_str());
  for (const auto& col : cols) std::printf(" %16s", col.c_str());
  std::printf("\n");
  for (const auto& r : rows) {
    std::printf("%-14s", r[key].get<std::string>().c_str());
    for (const auto& col : cols) {
      const auto& v = r[col];
      if (v.is_string()) std::printf(" %16s", v.get<std::string>().c_str());
      else if (v.is_number_integer() || v.is_number_unsigned()) std::printf(" %16lld", v.get<long long>());
      else std::printf(" %16.6g", v.get<double>());
    }
    std::printf("\n");
  }
  if (j.is_object() && j.contains("complexity")) {
    const auto& cx = j["complexity"];
    std::printf("params %lld  flops %lld  inference_seconds %.4g\n", cx["params"].get<long long>(),
                cx["flops"].get<long long>(), cx["mean_inference_seconds"].get<double>());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based regional restoration of histology image artifacts"};
  app.require_subcommand(1);
  spdlog::set_pattern("[%H:%M:%S] %v");

  Common common;
  std::string input, checkpoint, mask, clean, restored, masks, report_in;
  bool detect = false;
  int count = 100;
  std::vector<int> snapshots;

  auto* train = app.add_subcommand("train", "train a denoiser; writes checkpoints and loss.csv");
  add_common(train, common);
  auto* textures = app.add_subcommand("textures", "write generated tissue textures");
  add_common(textures, common);
  textures->add_option("--count", count, "number of images");
  auto* synth = app.add_subcommand("synthesize", "paint synthetic artifacts; writes images and masks/");
  add_common(synth, common);
  synth->add_option("--input", input, "image or directory")->required();
  auto* det = app.add_subcommand("detect", "threshold artifact detection; writes mask PNGs");
  add_common(det, common);
  det->add_option("--input", input, "image or directory")->required();
  auto* rest = app.add_subcommand("restore", "restore masked regions");
  add_common(rest, common);
  rest->add_option("--checkpoint", checkpoint, "trained model")->required();
  rest->add_option("--input", input, "image or directory")->required();
  rest->add_option("--mask", mask, "mask PNG, or a directory of masks named like the inputs");
  rest->add_flag("--detect", detect, "derive masks with the threshold detector");
  rest->add_option("--snapshots", snapshots, "timesteps to snapshot (default 0,50,100,150)")->delimiter(',');
  auto* eval = app.add_subcommand("evaluate", "score restored images against clean ones");
  add_common(eval, common);
  eval->add_option("--clean", clean, "clean directory")->required();
  eval->add_option("--restored", restored, "restored directory")->required();
  eval->add_option("--masks", masks, "artifact mask directory")->required();
  auto* abl = app.add_subcommand("ablate", "train and score swin_concat, swin_add and unet");
  add_common(abl, common);
  auto* rep = app.add_subcommand("report", "print a report or ablation JSON as a table");
  rep->add_option("--input", report_in, "report.json or ablation.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(common);
    if (*textures) return cmd_textures(common, count);
    if (*synth) return cmd_synthesize(common, input);
    if (*det) return cmd_detect(common, input);
    if (*rest) return cmd_restore(common, checkpoint, input, mask, detect, snapshots);
    if (*eval) return cmd_evaluate(common, clean, restored, masks);
    if (*abl) return cmd_ablate(common);
    if (*rep) return cmd_report(report_in);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
  return 2;
}
