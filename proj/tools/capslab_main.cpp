#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "capslab/analysis.hpp"
#include "capslab/artifacts.hpp"
#include "capslab/checkpoint.hpp"
#include "capslab/dataset.hpp"
#include "capslab/errors.hpp"
#include "capslab/train.hpp"
#include "capslab/transforms.hpp"
#include "json.hpp"

using namespace capslab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "capslab " CAPSLAB_VERSION;

std::string default_data_dir() {
  const char* env = std::getenv("CAPSLAB_DATA_DIR");
  return env && *env ? env : "data/mnist";
}

std::string find_data_file(const std::string& dir, const std::string& base) {
  for (const char* ext : {".gz", ""}) {
    const fs::path p = fs::path(dir) / (base + ext);
    if (fs::exists(p)) return p.string();
  }
  throw IoError("missing dataset file '" + (fs::path(dir) / base).string() +
                "[.gz]' (set CAPSLAB_DATA_DIR or pass --data-dir)");
}

struct MnistPair {
  Dataset train, test;
  std::map<std::string, std::string> checksums;  // manifest input block
};

std::string crc_hex(uint32_t crc) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

MnistPair load_mnist(const std::string& dir, int train_count, int test_count) {
  MnistPair out;
  const std::string ti = find_data_file(dir, "train-images-idx3-ubyte");
  const std::string tl = find_data_file(dir, "train-labels-idx1-ubyte");
  const std::string vi = find_data_file(dir, "t10k-images-idx3-ubyte");
  const std::string vl = find_data_file(dir, "t10k-labels-idx1-ubyte");
  Dataset train = load_idx(ti, tl, "train");
  Dataset test = load_idx(vi, vl, "test");
  out.checksums[ti] = crc_hex(train.checksum);
  out.checksums[vi] = crc_hex(test.checksum);
  out.train = train_count > 0 && train_count < train.count() ? take(train, train_count)
                                                             : std::move(train);
  out.test =
      test_count > 0 && test_count < test.count() ? take(test, test_count) : std::move(test);
  return out;
}

std::string join_command(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    out += argv[i];
  }
  return out;
}

NetworkConfig caps_config(bool full, const std::string& routing, const std::string& recon) {
  NetworkConfig cfg = full ? NetworkConfig::full() : NetworkConfig::tiny();
  if (routing == "on") {
    cfg.routing_enabled = true;
  } else if (routing == "off") {
    cfg.routing_enabled = false;
  } else {
    throw UsageError("--routing wants on|off, got '" + routing + "'");
  }
  cfg.recon_mode = recon_mode_from_string(recon);
  return cfg;
}

std::string pct_pm(double mean_pct, double std_pct) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f±%.3f", mean_pct, std_pct);
  return buf;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct MeanStd {
  double mean = 0.0, stddev = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - r.mean) * (x - r.mean);
    r.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return r;
}

// Shared across subcommands; the manifest is written last so its presence
// marks a completed run.
struct Run {
  std::string out_dir;
  RunManifest manifest;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  explicit Run(const std::string& dir, const std::string& command) {
    out_dir = dir;
    fs::create_directories(dir);
    manifest.command = command;
    manifest.tool_version = kVersion;
  }
  std::string path(const std::string& name) const {
    return (fs::path(out_dir) / name).string();
  }
  void add_artifact(const std::string& name) { manifest.artifacts.push_back(name); }
  void finish() {
    manifest.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_manifest(out_dir, manifest);
  }
};

struct TrainArgs {
  std::string routing = "on";
  std::string recon = "strong";
  std::string model = "capsnet";
  bool full = false;
  int epochs = 5;
  uint64_t seed = 0;
  int trials = 1;
  int batch = 32;
  float lr = 1e-3f;
  int train_count = 10000;
  int test_count = 2000;
  std::string data_dir = default_data_dir();
  std::string out = "artifacts/train";
  bool quiet = false;
};

// Trains `trials` models (seeds seed..seed+trials-1), writes per-epoch
// checkpoints and per-seed reports; returns the final test errors.
std::vector<double> run_training(Run& run, const TrainArgs& a, const MnistPair& data) {
  std::vector<double> errors;
  for (int t = 0; t < a.trials; ++t) {
    TrainOptions opt;
    opt.epochs = a.epochs;
    opt.batch_size = a.batch;
    opt.lr = a.lr;
    opt.seed = a.seed + static_cast<uint64_t>(t);
    opt.checkpoint_dir = run.out_dir;
    opt.log = !a.quiet;

    TrainReport report;
    if (a.model == "cnn") {
      CnnConfig cfg = a.full ? CnnConfig::full() : CnnConfig::tiny();
      report = train_cnn(cfg, data.train, data.test, opt).report;
    } else {
      report = train_capsnet(caps_config(a.full, a.routing, a.recon), data.train, data.test, opt)
                   .report;
    }

    const std::string stem = "report_" + report.config_id + "_seed" + std::to_string(opt.seed);
    write_text(run.path(stem + ".json"), report_to_json(report));
    write_text(run.path(stem + ".csv"), report_to_csv(report));
    run.add_artifact(stem + ".json");
    run.add_artifact(stem + ".csv");
    for (const std::string& ck : report.checkpoint_files) {
      run.add_artifact(fs::path(ck).filename().string());
    }
    run.manifest.seeds.push_back(opt.seed);
    errors.push_back(report.final_test_error);
    std::printf("%s seed %llu: test error %.4f\n", report.config_id.c_str(),
                static_cast<unsigned long long>(opt.seed), report.final_test_error);
  }
  return errors;
}

int cmd_train(const TrainArgs& a, const std::string& command) {
  if (a.model != "capsnet" && a.model != "cnn") {
    throw UsageError("--model wants capsnet|cnn, got '" + a.model + "'");
  }
  const MnistPair data = load_mnist(a.data_dir, a.train_count, a.test_count);
  Run run(a.out, command);
  run.manifest.input_checksums = data.checksums;
  run.manifest.config = {{"model", a.model},         {"routing", a.routing},
                         {"recon", a.recon},         {"scale", a.full ? "full" : "tiny"},
                         {"epochs", a.epochs},       {"seed", a.seed},
                         {"trials", a.trials},       {"batch", a.batch},
                         {"lr", a.lr},               {"train_count", data.train.count()},
                         {"test_count", data.test.count()}};

  const std::vector<double> errors = run_training(run, a, data);
  if (a.trials > 1) {
    std::vector<double> pct(errors.size());
    for (size_t i = 0; i < errors.size(); ++i) pct[i] = errors[i] * 100.0;
    const MeanStd ms = mean_std(pct);
    const std::string id = a.model == "cnn"
                               ? std::string("cnn")
                               : caps_config(a.full, a.routing, a.recon).id();
    std::string csv = "config_id,trials,mean_error_pct,std_error_pct,display\n";
    csv += id + "," + std::to_string(a.trials) + "," + num(ms.mean) + "," + num(ms.stddev) + "," +
           pct_pm(ms.mean, ms.stddev) + "\n";
    write_text(run.path("trials.csv"), csv);
    run.add_artifact("trials.csv");
    std::printf("%s: %s%% over %d trials\n", id.c_str(), pct_pm(ms.mean, ms.stddev).c_str(),
                a.trials);
  }
  run.finish();
  return 0;
}

struct Table1Args {
  bool full = false;
  int epochs = 2;
  int trials = 3;
  uint64_t seed = 0;
  int batch = 32;
  float lr = 1e-3f;
  int train_count = 10000;
  int test_count = 2000;
  std::string data_dir = default_data_dir();
  std::string out = "artifacts/table1";
  bool quiet = false;
};

int cmd_table1(const Table1Args& a, const std::string& command) {
  const MnistPair data = load_mnist(a.data_dir, a.train_count, a.test_count);
  Run run(a.out, command);
  run.manifest.input_checksums = data.checksums;
  run.manifest.config = {{"scale", a.full ? "full" : "tiny"}, {"epochs", a.epochs},
                         {"trials", a.trials},                {"seed", a.seed},
                         {"batch", a.batch},                  {"lr", a.lr},
                         {"train_count", data.train.count()}, {"test_count", data.test.count()}};

  struct Row {
    const char* model;
    const char* recon;    // "-" for the cnn
    const char* routing;  // "-" for the cnn
  };
  // Source table order: baseline first, then recon none/weak/strong within
  // routing off, then the same within routing on.
  const Row rows[7] = {{"Baseline CNN", "-", "-"}, {"CapsNet", "no", "no"},
                       {"CapsNet", "weak", "no"},  {"CapsNet", "strong", "no"},
                       {"CapsNet", "no", "yes"},   {"CapsNet", "weak", "yes"},
                       {"CapsNet", "strong", "yes"}};

  const char* scale = a.full ? "full" : "tiny";
  std::printf("note: desk-scale run (%s models, %d train / %d test); error rates are not\n"
              "comparable to the full-scale reference results.\n\n",
              scale, data.train.count(), data.test.count());
  std::printf("%-14s %-14s %-8s %s\n", "Model", "Reconstruction", "Routing", "Error (%)");

  std::string csv = "model,reconstruction,routing,trials,mean_error_pct,std_error_pct,display\n";
  for (const Row& row : rows) {
    std::vector<double> pct;
    for (int t = 0; t < a.trials; ++t) {
      TrainOptions opt;
      opt.epochs = a.epochs;
      opt.batch_size = a.batch;
      opt.lr = a.lr;
      opt.seed = a.seed + static_cast<uint64_t>(t);
      opt.log = !a.quiet;

      TrainReport report;
      if (std::string(row.model) == "Baseline CNN") {
        report = train_cnn(a.full ? CnnConfig::full() : CnnConfig::tiny(), data.train, data.test,
                           opt)
                     .report;
      } else {
        NetworkConfig cfg = a.full ? NetworkConfig::full() : NetworkConfig::tiny();
        cfg.routing_enabled = std::string(row.routing) == "yes";
        cfg.recon_mode = recon_mode_from_string(row.recon);
        report = train_capsnet(cfg, data.train, data.test, opt).report;
      }
      const std::string stem = "report_" + report.config_id + "_seed" + std::to_string(opt.seed);
      write_text(run.path(stem + ".json"), report_to_json(report));
      run.add_artifact(stem + ".json");
      run.manifest.seeds.push_back(opt.seed);
      pct.push_back(report.final_test_error * 100.0);
    }
    const MeanStd ms = mean_std(pct);
    const std::string display = pct_pm(ms.mean, ms.stddev);
    std::printf("%-14s %-14s %-8s %s\n", row.model, row.recon, row.routing, display.c_str());
    csv += std::string(row.model) + "," + row.recon + "," + row.routing + "," +
           std::to_string(a.trials) + "," + num(ms.mean) + "," + num(ms.stddev) + "," + display +
           "\n";
  }
  write_text(run.path("table1.csv"), csv);
  run.add_artifact("table1.csv");
  run.finish();
  return 0;
}

struct AmArgs {
  std::string checkpoint;
  int class_j = 6;
  int trials = 100;
  int steps = 1000;
  float step_size = 0.1f;
  int filter_period = 100;
  uint64_t seed = 0;
  std::string out = "artifacts/fig6-am";
};

int cmd_am(const AmArgs& a, const std::string& command) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  Run run(a.out, command);
  run.manifest.seeds = {a.seed};
  run.manifest.config = {{"checkpoint", a.checkpoint}, {"model", ck.model},
                         {"class", a.class_j},         {"trials", a.trials},
                         {"steps", a.steps},           {"step_size", a.step_size},
                         {"filter_period", a.filter_period}};

  AmConfig am;
  am.steps = a.steps;
  am.step_size = a.step_size;
  am.filter_period = a.filter_period;
  am.seed = a.seed;
  am.trials = a.trials;

  std::vector<AmTrial> trials;
  if (ck.model == "cnn") {
    trials = activation_maximize_cnn(cnn_from_checkpoint(ck), ck.cnn_config, a.class_j, am);
  } else {
    trials = activation_maximize(capsnet_from_checkpoint(ck), ck.caps_config, a.class_j, am);
  }

  const int cols = 10;
  const int rows = (a.trials + cols - 1) / cols;
  std::vector<Tensor> tiles;
  tiles.reserve(trials.size());
  for (const AmTrial& t : trials) tiles.push_back(t.image);
  const Tensor grid = assemble_grid(tiles, rows, std::min(cols, a.trials));
  const std::string png = "am_grid_class" + std::to_string(a.class_j) + ".png";
  write_png_gray(run.path(png), quantize_pixels(grid.data()), grid.dim(2), grid.dim(1));
  run.add_artifact(png);

  std::string csv = "rank,trial,activation,initial\n";
  for (size_t i = 0; i < trials.size(); ++i) {
    csv += std::to_string(i) + "," + std::to_string(trials[i].trial) + "," +
           num(trials[i].activation) + "," + num(trials[i].initial) + "\n";
  }
  write_text(run.path("activations.csv"), csv);
  run.add_artifact("activations.csv");
  run.finish();
  return 0;
}

struct CompactionArgs {
  std::vector<std::string> checkpoints;
  int class_j = -1;  // -1: aggregate across classes
  int test_count = 2000;
  std::string data_dir = default_data_dir();
  std::string out = "artifacts/fig8-compaction";
};

int cmd_compaction(const CompactionArgs& a, const std::string& command) {
  const MnistPair data = load_mnist(a.data_dir, 0, a.test_count);
  Run run(a.out, command);
  run.manifest.input_checksums = data.checksums;
  run.manifest.config = {{"checkpoints", a.checkpoints},
                         {"class", a.class_j},
                         {"test_count", data.test.count()}};

  std::string csv = "checkpoint,config_id,scope,component,variance,cumulative\n";
  for (const std::string& path : a.checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.model != "capsnet") {
      throw UsageError("energy compaction wants a capsule checkpoint, '" + path + "' holds a " +
                       ck.model);
    }
    const CapsNetParams params = capsnet_from_checkpoint(ck);
    const CompactionCurve curve =
        a.class_j < 0 ? energy_compaction_curve_all(params, ck.caps_config, data.test)
                      : energy_compaction_curve(params, ck.caps_config, data.test, a.class_j);
    const std::string stem = fs::path(path).stem().string();
    for (size_t i = 0; i < curve.variance.size(); ++i) {
      csv += stem + "," + ck.caps_config.id() + "," + curve.scope + "," + std::to_string(i + 1) +
             "," + num(curve.variance[i]) + "," + num(curve.cumulative[i]) + "\n";
    }
  }
  write_text(run.path("compaction.csv"), csv);
  run.add_artifact("compaction.csv");
  run.finish();
  return 0;
}

struct EncodeArgs {
  std::string checkpoint;
  std::string transform = "rotation";
  int component = 2;
  std::vector<double> offsets = {-1.0, -0.5, 0.0, 0.5, 1.0};
  int image_index = 0;
  int steps = 300;
  uint64_t seed = 0;
  int test_count = 2000;
  std::string data_dir = default_data_dir();
  std::string out = "artifacts/fig9-encode";
};

int cmd_encode(const EncodeArgs& a, const std::string& command) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  if (ck.model != "capsnet") {
    throw UsageError("transformation encoding wants a capsule checkpoint, '" + a.checkpoint +
                     "' holds a " + ck.model);
  }
  const MnistPair data = load_mnist(a.data_dir, 0, a.test_count);
  if (a.image_index < 0 || a.image_index >= data.test.count()) {
    throw UsageError("--image-index " + std::to_string(a.image_index) + " outside the " +
                     std::to_string(data.test.count()) + "-image test subset");
  }

  Run run(a.out, command);
  run.manifest.input_checksums = data.checksums;
  run.manifest.seeds = {a.seed};
  run.manifest.config = {{"checkpoint", a.checkpoint}, {"transform", a.transform},
                         {"component", a.component},   {"offsets", a.offsets},
                         {"image_index", a.image_index}, {"steps", a.steps},
                         {"test_count", data.test.count()}};

  const CapsNetParams params = capsnet_from_checkpoint(ck);
  const Tensor image = image_at(data.test, a.image_index);
  const int label = data.test.labels[static_cast<size_t>(a.image_index)];
  const TransformSpec spec = TransformSpec::standard(transform_kind_from_string(a.transform));

  const TransformCurve curve = forward_analysis(params, ck.caps_config, image, label, spec);
  if (curve.misclassified) {
    std::fprintf(stderr,
                 "warning: image %d is classified %d but labelled %d; proceeding anyway\n",
                 a.image_index, curve.predicted_label, curve.true_label);
  }

  AmConfig am;
  am.steps = a.steps;
  am.seed = a.seed;
  const PreImageResult pre =
      preimage_analysis(params, ck.caps_config, image, curve, a.component, a.offsets, am);

  json forward_points = json::array();
  for (const auto& pt : curve.points) forward_points.push_back({pt[0], pt[1]});
  json modified_points = json::array();
  const std::vector<double> base =
      pca_project(curve.pca, curve.capsules[static_cast<size_t>(spec.center_index())]);
  for (double off : a.offsets) {
    std::vector<double> moved = base;
    moved[static_cast<size_t>(a.component - 1)] += off;
    modified_points.push_back({moved[0], moved.size() > 1 ? moved[1] : 0.0});
  }

  std::vector<std::string> pngs;
  for (size_t i = 0; i < pre.images.size(); ++i) {
    const std::string name = "preimage_" + std::to_string(i) + ".png";
    write_png_gray(run.path(name), quantize_pixels(pre.images[i].data()),
                   ck.caps_config.input_w, ck.caps_config.input_h);
    run.add_artifact(name);
    pngs.push_back(name);
  }

  const json doc{{"transform", a.transform},
                 {"true_label", curve.true_label},
                 {"predicted_label", curve.predicted_label},
                 {"misclassified", curve.misclassified},
                 {"component", a.component},
                 {"offsets", a.offsets},
                 {"forward_points", forward_points},
                 {"modified_points", modified_points},
                 {"final_loss", pre.final_loss},
                 {"reduction_ratio", pre.reduction_ratio},
                 {"manifold_distance", pre.manifold_distance},
                 {"images", pngs}};
  write_text(run.path("encode.json"), doc.dump(2) + "\n");
  run.add_artifact("encode.json");
  run.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string command = join_command(argc, argv);
  CLI::App app{"capsule network lab: training, visualization, and capsule-space analysis"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model and write reports + checkpoints");
  train->set_config("--config", "", "flat key=value file; command-line flags win");
  train->add_option("--routing", train_args.routing, "dynamic routing: on|off");
  train->add_option("--recon", train_args.recon, "reconstruction loss: none|weak|strong");
  train->add_option("--model", train_args.model, "capsnet|cnn (cnn ignores routing/recon)");
  train->add_flag("--full", train_args.full, "full-size layout (default is tiny)");
  train->add_flag("--tiny", [](int64_t) {}, "desk-scale layout (the default)");
  train->add_option("--epochs", train_args.epochs);
  train->add_option("--seed", train_args.seed);
  train->add_option("--trials", train_args.trials, "train this many seeds; report mean±std");
  train->add_option("--batch", train_args.batch);
  train->add_option("--lr", train_args.lr);
  train->add_option("--train-count", train_args.train_count);
  train->add_option("--test-count", train_args.test_count);
  train->add_option("--data-dir", train_args.data_dir);
  train->add_option("--out", train_args.out);
  train->add_flag("--quiet", train_args.quiet);

  Table1Args t1_args;
  CLI::App* t1 = app.add_subcommand("table1", "error-rate table across all 7 configurations");
  t1->set_config("--config", "", "flat key=value file; command-line flags win");
  t1->add_flag("--full", t1_args.full);
  t1->add_flag("--tiny", [](int64_t) {}, "desk-scale layout (the default)");
  t1->add_option("--epochs", t1_args.epochs);
  t1->add_option("--trials", t1_args.trials);
  t1->add_option("--seed", t1_args.seed);
  t1->add_option("--batch", t1_args.batch);
  t1->add_option("--lr", t1_args.lr);
  t1->add_option("--train-count", t1_args.train_count);
  t1->add_option("--test-count", t1_args.test_count);
  t1->add_option("--data-dir", t1_args.data_dir);
  t1->add_option("--out", t1_args.out);
  t1->add_flag("--quiet", t1_args.quiet);

  AmArgs am_args;
  CLI::App* am = app.add_subcommand("am", "activation-maximization image grid");
  am->add_option("--checkpoint", am_args.checkpoint)->required();
  am->add_option("--class", am_args.class_j);
  am->add_option("--trials", am_args.trials);
  am->add_option("--steps", am_args.steps);
  am->add_option("--step-size", am_args.step_size);
  am->add_option("--filter-period", am_args.filter_period);
  am->add_option("--seed", am_args.seed);
  am->add_option("--out", am_args.out);

  CompactionArgs comp_args;
  CLI::App* comp = app.add_subcommand("compaction", "PCA energy-compaction curves");
  comp->add_option("--checkpoints", comp_args.checkpoints)->required()->delimiter(',');
  comp->add_option("--class", comp_args.class_j, "single class; default aggregates all");
  comp->add_option("--test-count", comp_args.test_count);
  comp->add_option("--data-dir", comp_args.data_dir);
  comp->add_option("--out", comp_args.out);

  EncodeArgs enc_args;
  CLI::App* enc = app.add_subcommand("encode", "transformation encoding: forward + pre-image");
  enc->add_option("--checkpoint", enc_args.checkpoint)->required();
  enc->add_option("--transform", enc_args.transform, "rotation|scale|shift_y|morphology");
  enc->add_option("--component", enc_args.component);
  enc->add_option("--offsets", enc_args.offsets)->delimiter(',');
  enc->add_option("--image-index", enc_args.image_index);
  enc->add_option("--steps", enc_args.steps);
  enc->add_option("--seed", enc_args.seed);
  enc->add_option("--test-count", enc_args.test_count);
  enc->add_option("--data-dir", enc_args.data_dir);
  enc->add_option("--out", enc_args.out);

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(train_args, command);
    if (t1->parsed()) return cmd_table1(t1_args, command);
    if (am->parsed()) return cmd_am(am_args, command);
    if (comp->parsed()) return cmd_compaction(comp_args, command);
    if (enc->parsed()) return cmd_encode(enc_args, command);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
