#include "capslab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include "capslab/adam.hpp"
#include "capslab/checkpoint.hpp"
#include "capslab/errors.hpp"
#include "capslab/ops.hpp"
#include "json.hpp"

namespace capslab {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point from) {
  return std::chrono::duration<double>(Clock::now() - from).count();
}

void expect_dataset(const Dataset& d, int h, int w, int classes, const char* which) {
  if (d.count() < 1) throw UsageError(std::string(which) + " dataset is empty");
  if (d.height() != h || d.width() != w) {
    throw ShapeError(std::string(which) + " images are " + std::to_string(d.height()) + "x" +
                     std::to_string(d.width()) + ", the model wants " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  for (int l : d.labels) {
    if (l < 0 || l >= classes) {
      throw UsageError(std::string(which) + " labels exceed the model's " +
                       std::to_string(classes) + " classes");
    }
  }
}

// Copies rows order[from..to) into a batch tensor + label vector.
std::pair<Tensor, std::vector<int>> make_batch(const Dataset& d, const std::vector<int>& order,
                                               size_t from, size_t to) {
  const int h = d.height(), w = d.width();
  const size_t px = static_cast<size_t>(h) * w;
  std::vector<float> data((to - from) * px);
  std::vector<int> labels(to - from);
  std::span<const float> src = d.images.data();
  for (size_t i = from; i < to; ++i) {
    const size_t at = static_cast<size_t>(order[i]) * px;
    std::copy(src.begin() + at, src.begin() + at + px, data.begin() + (i - from) * px);
    labels[i - from] = d.labels[static_cast<size_t>(order[i])];
  }
  return {Tensor::from_vector({static_cast<int>(to - from), 1, h, w}, std::move(data)),
          std::move(labels)};
}

void check_finite_loss(double total, int64_t step, int epoch) {
  if (!std::isfinite(total)) {
    throw NumericError("training diverged: loss is not finite at step " + std::to_string(step) +
                       " (epoch " + std::to_string(epoch) + ")");
  }
}

void log_epoch(const TrainOptions& opt, const std::string& id, const EpochStats& s) {
  if (!opt.log) return;
  std::fprintf(stderr, "[%s] epoch %d: total %.4f margin %.4f recon %.4f test_err %.4f (%.1fs)\n",
               id.c_str(), s.epoch, s.total, s.margin, s.recon, s.test_error, s.seconds);
}

Evaluation evaluate_generic(int classes, const Dataset& data,
                            const std::function<std::vector<int>(const Tensor&)>& predict) {
  Evaluation ev;
  ev.classes = classes;
  ev.confusion.assign(static_cast<size_t>(classes) * classes, 0);
  std::vector<int> order(static_cast<size_t>(data.count()));
  std::iota(order.begin(), order.end(), 0);
  int wrong = 0;
  const size_t batch = 64;
  for (size_t at = 0; at < order.size(); at += batch) {
    const size_t to = std::min(order.size(), at + batch);
    auto [x, labels] = make_batch(data, order, at, to);
    const std::vector<int> pred = predict(x);
    for (size_t i = 0; i < labels.size(); ++i) {
      ++ev.confusion[static_cast<size_t>(labels[i]) * classes + pred[i]];
      if (pred[i] != labels[i]) ++wrong;
    }
  }
  ev.error_rate = static_cast<double>(wrong) / data.count();
  return ev;
}

}  // namespace

namespace {

// Forward passes during evaluation skip the tape entirely.
struct GradOff {
  std::vector<Tensor> tensors;
  bool had;
  explicit GradOff(std::vector<Tensor> ts) : tensors(std::move(ts)) {
    had = !tensors.empty() && tensors.front().requires_grad();
    for (Tensor& t : tensors) t.set_requires_grad(false);
  }
  ~GradOff() {
    for (Tensor& t : tensors) t.set_requires_grad(had);
  }
};

}  // namespace

Evaluation evaluate_capsnet(const CapsNetParams& p, const NetworkConfig& cfg, const Dataset& data) {
  expect_dataset(data, cfg.input_h, cfg.input_w, cfg.num_classes, "evaluation");
  GradOff off(p.all());
  return evaluate_generic(cfg.num_classes, data, [&](const Tensor& x) {
    return ops::argmax_rows(capsnet_forward(x, p, cfg).probs);
  });
}

Evaluation evaluate_cnn(const CnnParams& p, const CnnConfig& cfg, const Dataset& data) {
  expect_dataset(data, cfg.input_h, cfg.input_w, cfg.num_classes, "evaluation");
  GradOff off(p.all());
  return evaluate_generic(cfg.num_classes, data, [&](const Tensor& x) {
    return ops::argmax_rows(cnn_forward(x, p, cfg));
  });
}

CapsTrainResult train_capsnet(const NetworkConfig& cfg, const Dataset& train_set,
                              const Dataset& test_set, const TrainOptions& opt) {
  cfg.validate();
  expect_dataset(train_set, cfg.input_h, cfg.input_w, cfg.num_classes, "training");
  expect_dataset(test_set, cfg.input_h, cfg.input_w, cfg.num_classes, "test");
  if (opt.epochs < 1) throw UsageError("train: epochs must be >= 1");
  if (opt.batch_size < 1) throw UsageError("train: batch_size must be >= 1");

  const auto start = Clock::now();
  Rng init_rng(opt.seed, 0);
  Rng order_rng(opt.seed, 1);
  CapsNetParams params = CapsNetParams::init(cfg, init_rng);
  Adam adam(params.all(), {.lr = opt.lr});

  TrainReport report;
  report.config_id = cfg.id();
  report.seed = opt.seed;

  std::vector<int> order(static_cast<size_t>(train_set.count()));
  std::iota(order.begin(), order.end(), 0);
  int64_t step = 0;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    order_rng.shuffle(order);
    double margin_sum = 0.0, recon_sum = 0.0, total_sum = 0.0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(opt.batch_size)) {
      const size_t to = std::min(order.size(), at + static_cast<size_t>(opt.batch_size));
      auto [x, labels] = make_batch(train_set, order, at, to);
      ++step;

      CapsNetOutput out = capsnet_forward(x, params, cfg);
      CapsNetLoss loss = capsnet_loss(x, out, labels, params, cfg, true);
      const double total = loss.total.item();
      check_finite_loss(total, step, epoch);
      const double b = static_cast<double>(to - at);
      margin_sum += loss.margin.item() * b;
      recon_sum += (loss.recon.defined() ? loss.recon.item() : 0.0f) * b;
      total_sum += total * b;

      backward(loss.total);
      adam.step();
      adam.zero_grad();
    }

    EpochStats s;
    s.epoch = epoch;
    s.margin = margin_sum / train_set.count();
    s.recon = recon_sum / train_set.count();
    s.total = total_sum / train_set.count();
    s.test_error = evaluate_capsnet(params, cfg, test_set).error_rate;
    s.seconds = elapsed(epoch_start);
    report.epochs.push_back(s);
    log_epoch(opt, report.config_id, s);

    if (!opt.checkpoint_dir.empty()) {
      const std::string path = opt.checkpoint_dir + "/" + report.config_id + "_seed" +
                               std::to_string(opt.seed) + "_epoch" + std::to_string(epoch) +
                               ".ckpt";
      save_checkpoint(path, make_checkpoint(cfg, params, epoch, opt.seed,
                                            {{"test_error", s.test_error}}));
      report.checkpoint_files.push_back(path);
    }
  }
  report.final_test_error = report.epochs.back().test_error;
  report.wall_seconds = elapsed(start);
  return {std::move(params), std::move(report)};
}

CnnTrainResult train_cnn(const CnnConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                         const TrainOptions& opt) {
  cfg.validate();
  expect_dataset(train_set, cfg.input_h, cfg.input_w, cfg.num_classes, "training");
  expect_dataset(test_set, cfg.input_h, cfg.input_w, cfg.num_classes, "test");
  if (opt.epochs < 1) throw UsageError("train: epochs must be >= 1");
  if (opt.batch_size < 1) throw UsageError("train: batch_size must be >= 1");

  const auto start = Clock::now();
  Rng init_rng(opt.seed, 0);
  Rng order_rng(opt.seed, 1);
  Rng dropout_rng(opt.seed, 2);
  CnnParams params = CnnParams::init(cfg, init_rng);
  Adam adam(params.all(), {.lr = opt.lr});

  TrainReport report;
  report.config_id = "cnn";
  report.seed = opt.seed;

  std::vector<int> order(static_cast<size_t>(train_set.count()));
  std::iota(order.begin(), order.end(), 0);
  int64_t step = 0;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    order_rng.shuffle(order);
    double total_sum = 0.0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(opt.batch_size)) {
      const size_t to = std::min(order.size(), at + static_cast<size_t>(opt.batch_size));
      auto [x, labels] = make_batch(train_set, order, at, to);
      ++step;

      Tensor logits = cnn_forward(x, params, cfg, &dropout_rng);
      Tensor loss = ops::softmax_cross_entropy(logits, labels);
      const double total = loss.item();
      check_finite_loss(total, step, epoch);
      total_sum += total * static_cast<double>(to - at);

      backward(loss);
      adam.step();
      adam.zero_grad();
    }

    EpochStats s;
    s.epoch = epoch;
    s.margin = total_sum / train_set.count();  // cross-entropy; no recon term
    s.recon = 0.0;
    s.total = s.margin;
    s.test_error = evaluate_cnn(params, cfg, test_set).error_rate;
    s.seconds = elapsed(epoch_start);
    report.epochs.push_back(s);
    log_epoch(opt, report.config_id, s);

    if (!opt.checkpoint_dir.empty()) {
      const std::string path = opt.checkpoint_dir + "/" + report.config_id + "_seed" +
                               std::to_string(opt.seed) + "_epoch" + std::to_string(epoch) +
                               ".ckpt";
      save_checkpoint(path, make_checkpoint(cfg, params, epoch, opt.seed,
                                            {{"test_error", s.test_error}}));
      report.checkpoint_files.push_back(path);
    }
  }
  report.final_test_error = report.epochs.back().test_error;
  report.wall_seconds = elapsed(start);
  return {std::move(params), std::move(report)};
}

std::string report_to_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochStats& s : r.epochs) {
    epochs.push_back({{"epoch", s.epoch},
                      {"margin", s.margin},
                      {"recon", s.recon},
                      {"total", s.total},
                      {"test_error", s.test_error}});
  }
  nlohmann::json j{{"config_id", r.config_id},
                   {"seed", r.seed},
                   {"epochs", epochs},
                   {"final_test_error", r.final_test_error},
                   {"checkpoints", r.checkpoint_files}};
  return j.dump(2) + "\n";
}

std::string report_to_csv(const TrainReport& r) {
  std::string out = "config_id,seed,epoch,margin,recon,total,test_error\n";
  char line[256];
  for (const EpochStats& s : r.epochs) {
    std::snprintf(line, sizeof(line), "%s,%llu,%d,%.9g,%.9g,%.9g,%.9g\n", r.config_id.c_str(),
                  static_cast<unsigned long long>(r.seed), s.epoch, s.margin, s.recon, s.total,
                  s.test_error);
    out += line;
  }
  return out;
}

}  // namespace capslab
