#include "capslab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "capslab/errors.hpp"
#include "capslab/filters.hpp"
#include "capslab/ops.hpp"
#include "capslab/rng.hpp"

namespace capslab {
namespace {

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

void clip_pixels(std::vector<float>& px, float lo, float hi) {
  for (float& v : px) v = std::clamp(v, lo, hi);
}

double eval_objective(const AmObjective& objective, std::vector<float> px, int h, int w) {
  return objective(Tensor::from_vector({1, 1, h, w}, std::move(px))).item();
}

// One projected-gradient run from `px`; shared by maximization and matching.
AmTrial run_trial(const AmObjective& objective, std::vector<float> px, int h, int w,
                  const AmConfig& cfg, int trial) {
  clip_pixels(px, cfg.clip_lo, cfg.clip_hi);
  AmTrial out;
  out.trial = trial;
  out.initial = eval_objective(objective, px, h, w);

  for (int step = 1; step <= cfg.steps; ++step) {
    Tensor x = Tensor::from_vector({1, 1, h, w}, px, true);
    Tensor a = objective(x);
    backward(a);
    const std::span<const float> g = x.grad();
    for (size_t i = 0; i < px.size(); ++i) {
      px[i] = std::clamp(px[i] + cfg.step_size * g[i], cfg.clip_lo, cfg.clip_hi);
    }
    if (step % cfg.filter_period == 0) {
      Tensor filtered = median_filter3x3(Tensor::from_vector({1, h, w}, std::move(px)));
      px.assign(filtered.data().begin(), filtered.data().end());
    }
  }

  out.activation = eval_objective(objective, px, h, w);
  out.image = Tensor::from_vector({1, h, w}, std::move(px));
  return out;
}

std::vector<float> noise_image(int h, int w, const AmConfig& cfg, uint64_t trial) {
  Rng rng(cfg.seed, trial);
  std::vector<float> px(static_cast<size_t>(h) * w);
  for (float& v : px) v = rng.uniform(cfg.init_lo, cfg.init_hi);
  return px;
}

void expect_class(int class_j, int num_classes) {
  if (class_j < 0 || class_j >= num_classes) {
    throw UsageError("class " + std::to_string(class_j) + " outside 0.." +
                     std::to_string(num_classes - 1));
  }
}

// ||v_j(x)|| as a taped scalar: zero every other class row first.
Tensor class_capsule_length(const CapsNetOutput& out, int class_j) {
  return ops::sum(ops::l2_norm(ops::mask_rows(out.v, {class_j})));
}

std::vector<float> image_pixels(const Tensor& image, int h, int w) {
  if (!image.defined() || image.ndim() < 2 || image.dim(image.ndim() - 2) != h ||
      image.dim(image.ndim() - 1) != w || image.size() != int64_t(h) * w) {
    throw ShapeError("expected a single " + std::to_string(h) + "x" + std::to_string(w) +
                     " image");
  }
  return {image.data().begin(), image.data().end()};
}

}  // namespace

void AmConfig::validate() const {
  if (steps < 0) throw UsageError("steps must be >= 0");
  if (step_size <= 0.0f) throw UsageError("step size must be positive");
  if (filter_period < 1) throw UsageError("filter period must be >= 1");
  if (!(clip_lo < clip_hi)) throw UsageError("clip bounds must be ordered");
  if (!(init_lo < init_hi)) throw UsageError("init-noise bounds must be ordered");
  if (trials < 1) throw UsageError("trials must be >= 1");
}

std::vector<AmTrial> maximize_objective(const AmObjective& objective, int h, int w,
                                        const AmConfig& cfg) {
  cfg.validate();
  std::vector<AmTrial> trials;
  trials.reserve(static_cast<size_t>(cfg.trials));
  for (int t = 0; t < cfg.trials; ++t) {
    trials.push_back(
        run_trial(objective, noise_image(h, w, cfg, static_cast<uint64_t>(t)), h, w, cfg, t));
  }
  std::stable_sort(trials.begin(), trials.end(),
                   [](const AmTrial& a, const AmTrial& b) { return a.activation > b.activation; });
  return trials;
}

std::vector<AmTrial> activation_maximize(const CapsNetParams& p, const NetworkConfig& cfg,
                                         int class_j, const AmConfig& am) {
  cfg.validate();
  expect_class(class_j, cfg.num_classes);
  GradOff off(p.all());
  return maximize_objective(
      [&](const Tensor& x) { return class_capsule_length(capsnet_forward(x, p, cfg), class_j); },
      cfg.input_h, cfg.input_w, am);
}

std::vector<AmTrial> activation_maximize_cnn(const CnnParams& p, const CnnConfig& cfg, int class_j,
                                             const AmConfig& am) {
  cfg.validate();
  expect_class(class_j, cfg.num_classes);
  GradOff off(p.all());
  std::vector<float> hot(static_cast<size_t>(cfg.num_classes), 0.0f);
  hot[static_cast<size_t>(class_j)] = 1.0f;
  const Tensor pick = Tensor::from_vector({1, cfg.num_classes}, std::move(hot));
  return maximize_objective(
      [&](const Tensor& x) { return ops::sum(ops::mul(cnn_forward(x, p, cfg), pick)); },
      cfg.input_h, cfg.input_w, am);
}

MatchResult activation_match(const CapsNetParams& p, const NetworkConfig& cfg, int class_j,
                             std::span<const float> target, const AmConfig& am,
                             const Tensor* init) {
  cfg.validate();
  am.validate();
  expect_class(class_j, cfg.num_classes);
  if (static_cast<int>(target.size()) != cfg.class_dim) {
    throw UsageError("matching target has " + std::to_string(target.size()) +
                     " values, the class capsule has " + std::to_string(cfg.class_dim));
  }
  GradOff off(p.all());

  // Target embedded at row j of an otherwise zero [1,J,D] block, so the
  // masked difference is exactly v_j - target.
  std::vector<float> block(static_cast<size_t>(cfg.num_classes) * cfg.class_dim, 0.0f);
  std::copy(target.begin(), target.end(),
            block.begin() + static_cast<size_t>(class_j) * cfg.class_dim);
  const Tensor target_rows =
      Tensor::from_vector({1, cfg.num_classes, cfg.class_dim}, std::move(block));

  // Descent on the squared distance == ascent on its negation.
  const AmObjective objective = [&](const Tensor& x) {
    Tensor diff = ops::sub(ops::mask_rows(capsnet_forward(x, p, cfg).v, {class_j}), target_rows);
    return ops::scale(ops::sum(ops::mul(diff, diff)), -1.0f);
  };

  std::vector<float> start = init ? image_pixels(*init, cfg.input_h, cfg.input_w)
                                  : noise_image(cfg.input_h, cfg.input_w, am, 0);
  AmTrial trial = run_trial(objective, std::move(start), cfg.input_h, cfg.input_w, am, 0);

  MatchResult r;
  r.image = trial.image;
  r.initial_loss = -trial.initial;
  r.final_loss = -trial.activation;
  r.reduction_ratio =
      r.initial_loss <= 0.0 ? 1.0
                            : std::clamp((r.initial_loss - r.final_loss) / r.initial_loss, 0.0, 1.0);
  const Tensor batch = ops::reshape(trial.image, {1, 1, cfg.input_h, cfg.input_w});
  r.predicted_class = ops::argmax_rows(capsnet_forward(batch, p, cfg).probs)[0];
  return r;
}

std::vector<std::vector<double>> capsule_rows(const CapsNetParams& p, const NetworkConfig& cfg,
                                              const Dataset& images, int class_j) {
  cfg.validate();
  expect_class(class_j, cfg.num_classes);
  if (images.count() < 1) throw UsageError("capsule extraction needs at least one image");
  if (images.height() != cfg.input_h || images.width() != cfg.input_w) {
    throw ShapeError("images are " + std::to_string(images.height()) + "x" +
                     std::to_string(images.width()) + ", the model wants " +
                     std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w));
  }
  GradOff off(p.all());

  const int n = images.count();
  const size_t px = static_cast<size_t>(cfg.input_h) * cfg.input_w;
  const size_t d = static_cast<size_t>(cfg.class_dim);
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(n));
  const std::span<const float> src = images.images.data();

  const int batch = 64;
  for (int at = 0; at < n; at += batch) {
    const int to = std::min(n, at + batch);
    std::vector<float> data(src.begin() + at * px, src.begin() + to * px);
    const Tensor x =
        Tensor::from_vector({to - at, 1, cfg.input_h, cfg.input_w}, std::move(data));
    const Tensor v = capsnet_forward(x, p, cfg).v;
    const std::span<const float> vd = v.data();
    for (int i = 0; i < to - at; ++i) {
      const size_t base = (static_cast<size_t>(i) * cfg.num_classes + class_j) * d;
      rows.emplace_back(vd.begin() + base, vd.begin() + base + d);
    }
  }
  return rows;
}

PcaModel fit_pca(const CapsNetParams& p, const NetworkConfig& cfg, const Dataset& images,
                 int class_j) {
  if (images.count() < 2) {
    throw UsageError("pca needs at least 2 images, got " + std::to_string(images.count()));
  }
  PcaModel m = fit_pca_points(capsule_rows(p, cfg, images, class_j));
  m.fitted_class = std::to_string(class_j);
  m.fitted_on = images.split + "[" + std::to_string(images.count()) + "]";
  return m;
}

namespace {

Dataset filter_label(const Dataset& d, int label) {
  const size_t px = static_cast<size_t>(d.height()) * d.width();
  const std::span<const float> src = d.images.data();
  std::vector<float> data;
  std::vector<int> labels;
  for (int i = 0; i < d.count(); ++i) {
    if (d.labels[static_cast<size_t>(i)] != label) continue;
    data.insert(data.end(), src.begin() + i * px, src.begin() + (i + 1) * px);
    labels.push_back(label);
  }
  Dataset out;
  if (!labels.empty()) {
    out.images = Tensor::from_vector(
        {static_cast<int>(labels.size()), 1, d.height(), d.width()}, std::move(data));
  }
  out.labels = std::move(labels);
  out.split = d.split;
  return out;
}

std::vector<double> normalized_or_empty(const std::vector<double>& variance) {
  double total = 0.0;
  for (double v : variance) total += v;
  if (total <= 0.0) return {};
  std::vector<double> out(variance.size());
  for (size_t i = 0; i < variance.size(); ++i) out[i] = variance[i] / total;
  return out;
}

}  // namespace

CompactionCurve energy_compaction_curve(const CapsNetParams& p, const NetworkConfig& cfg,
                                        const Dataset& test, int class_j) {
  const PcaModel m = fit_pca(p, cfg, filter_label(test, class_j), class_j);
  CompactionCurve curve;
  curve.scope = "class-" + std::to_string(class_j);
  curve.variance = m.variances;
  curve.cumulative.resize(m.variances.size(), 0.0);
  const std::vector<double> frac = normalized_or_empty(m.variances);
  double run = 0.0;
  for (size_t i = 0; i < frac.size(); ++i) {
    run += frac[i];
    curve.cumulative[i] = run;
  }
  return curve;
}

CompactionCurve energy_compaction_curve_all(const CapsNetParams& p, const NetworkConfig& cfg,
                                            const Dataset& test) {
  CompactionCurve curve;
  curve.scope = "all-classes";
  curve.variance.assign(static_cast<size_t>(cfg.class_dim), 0.0);
  curve.cumulative.assign(static_cast<size_t>(cfg.class_dim), 0.0);

  int used = 0;
  for (int j = 0; j < cfg.num_classes; ++j) {
    const Dataset members = filter_label(test, j);
    if (members.count() < 2) continue;
    const std::vector<double> frac =
        normalized_or_empty(fit_pca(p, cfg, members, j).variances);
    if (frac.empty()) continue;  // a degenerate class has no spectrum to average
    for (size_t i = 0; i < frac.size(); ++i) curve.variance[i] += frac[i];
    ++used;
  }
  if (used > 0) {
    for (double& v : curve.variance) v /= used;
    double run = 0.0;
    for (size_t i = 0; i < curve.variance.size(); ++i) {
      run += curve.variance[i];
      curve.cumulative[i] = run;
    }
  }
  return curve;
}

TransformCurve forward_analysis(const CapsNetParams& p, const NetworkConfig& cfg,
                                const Tensor& image, int true_label, const TransformSpec& spec) {
  cfg.validate();
  spec.validate();
  expect_class(true_label, cfg.num_classes);
  const std::vector<float> px = image_pixels(image, cfg.input_h, cfg.input_w);

  TransformCurve curve;
  curve.spec = spec;
  curve.true_label = true_label;

  const std::vector<Tensor> series =
      make_transform_series(Tensor::from_vector({1, cfg.input_h, cfg.input_w}, px), spec);
  const int s = static_cast<int>(series.size());
  std::vector<float> stacked;
  stacked.reserve(static_cast<size_t>(s) * px.size());
  for (const Tensor& t : series) {
    stacked.insert(stacked.end(), t.data().begin(), t.data().end());
  }

  GradOff off(p.all());
  const CapsNetOutput out = capsnet_forward(
      Tensor::from_vector({s, 1, cfg.input_h, cfg.input_w}, std::move(stacked)), p, cfg);
  curve.predicted_label = ops::argmax_rows(out.probs)[static_cast<size_t>(spec.center_index())];
  curve.misclassified = curve.predicted_label != true_label;

  const size_t d = static_cast<size_t>(cfg.class_dim);
  const std::span<const float> vd = out.v.data();
  for (int i = 0; i < s; ++i) {
    const size_t base = (static_cast<size_t>(i) * cfg.num_classes + true_label) * d;
    curve.capsules.emplace_back(vd.begin() + base, vd.begin() + base + d);
  }

  if (s >= 2) {
    curve.pca = fit_pca_points(curve.capsules);
  } else {
    // A single point spans nothing: identity axes centred on the point.
    curve.pca.dim = cfg.class_dim;
    curve.pca.mean = curve.capsules.front();
    curve.pca.components.assign(d * d, 0.0);
    for (size_t i = 0; i < d; ++i) curve.pca.components[i * d + i] = 1.0;
    curve.pca.variances.assign(d, 0.0);
  }
  curve.pca.fitted_class = std::to_string(true_label);
  curve.pca.fitted_on = "series-" + to_string(spec.kind);

  for (const std::vector<double>& row : curve.capsules) {
    const std::vector<double> coords = pca_project(curve.pca, row);
    curve.points.push_back({coords[0], coords.size() > 1 ? coords[1] : 0.0});
  }
  return curve;
}

PreImageResult preimage_analysis(const CapsNetParams& p, const NetworkConfig& cfg,
                                 const Tensor& image, const TransformCurve& curve, int component,
                                 const std::vector<double>& offsets, const AmConfig& am) {
  cfg.validate();
  am.validate();
  if (component < 1 || component > curve.pca.dim) {
    throw UsageError("component " + std::to_string(component) + " outside the fitted 1.." +
                     std::to_string(curve.pca.dim));
  }

  // Capsule vector of the unmodified image, then its curve-space coordinates.
  const std::vector<float> px = image_pixels(image, cfg.input_h, cfg.input_w);
  std::vector<double> phi;
  {
    GradOff off(p.all());
    const Tensor v =
        capsnet_forward(Tensor::from_vector({1, 1, cfg.input_h, cfg.input_w}, px), p, cfg).v;
    const size_t base = static_cast<size_t>(curve.true_label) * cfg.class_dim;
    phi.assign(v.data().begin() + base, v.data().begin() + base + cfg.class_dim);
  }
  const std::vector<double> coords = pca_project(curve.pca, phi);

  // Matching starts at the original image so the zero offset is a fixed point
  // (up to filtering) and nonzero offsets deform the digit along the component.
  const Tensor start = Tensor::from_vector({1, cfg.input_h, cfg.input_w}, px);

  PreImageResult r;
  r.component = component;
  r.offsets = offsets;
  for (size_t i = 0; i < offsets.size(); ++i) {
    std::vector<double> moved = coords;
    moved[static_cast<size_t>(component - 1)] += offsets[i];
    const std::vector<double> target_d = pca_unproject(curve.pca, moved);
    std::vector<float> target(target_d.begin(), target_d.end());

    const MatchResult match = activation_match(p, cfg, curve.true_label, target, am, &start);

    double nearest = std::numeric_limits<double>::infinity();
    for (const std::array<double, 2>& pt : curve.points) {
      nearest = std::min(nearest, std::hypot(moved[0] - pt[0],
                                             (moved.size() > 1 ? moved[1] : 0.0) - pt[1]));
    }

    r.targets.push_back(std::move(target));
    r.images.push_back(match.image);
    r.initial_loss.push_back(match.initial_loss);
    r.final_loss.push_back(match.final_loss);
    r.reduction_ratio.push_back(match.reduction_ratio);
    r.manifold_distance.push_back(nearest);
  }
  return r;
}

}  // namespace capslab
