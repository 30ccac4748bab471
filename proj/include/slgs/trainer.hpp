#pragma once

// Optimization loop: Adam over named parameter groups, gradient-driven
// densification and pruning, chunked checkpoints that resume bit-exactly.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "slgs/checkpoint.hpp"
#include "slgs/errors.hpp"
#include "slgs/losses.hpp"
#include "slgs/model.hpp"
#include "slgs/nn.hpp"
#include "slgs/scene_model.hpp"
#include "slgs/tensor.hpp"

namespace slgs {

struct TrainConfig {
  int iterations = 2000;
  std::uint64_t seed = 0;

  float lr_position = 1.6e-4f;  // scaled by the scene extent, decays exponentially
  float lr_position_final = 1.6e-6f;
  float lr_opacity = 0.05f;
  float lr_rotation = 1e-3f;
  float lr_scale = 5e-3f;
  float lr_latent = 2.5e-3f;
  float lr_network = 1e-3f;
  float lr_sh = 2.5e-3f;
  float lr_final_fraction = 0.1f;  // every other group decays exponentially to this fraction of its rate

  int densify_interval = 100;
  int densify_from = 500;
  float densify_until_fraction = 0.6f;  // of `iterations`
  float densify_grad_threshold = 2e-4f;  // NDC units
  float percent_dense = 0.01f;           // clone/split boundary, fraction of the scene extent
  float prune_opacity = 0.005f;
  float max_screen_radius = 0.0f;  // pixels; 0 disables the radius cap
  int opacity_reset_interval = 0;  // 0 disables periodic opacity reset

  int log_interval = 100;

  LossWeights loss;
  ModelConfig model;

  int densify_until() const { return static_cast<int>(densify_until_fraction * iterations); }
};

namespace detail {

template <class Cfg, class F>
void for_each_field(Cfg& c, F&& f) {
  f("iterations", &c.iterations);
  f("seed", &c.seed);
  f("lr_position", &c.lr_position);
  f("lr_position_final", &c.lr_position_final);
  f("lr_opacity", &c.lr_opacity);
  f("lr_rotation", &c.lr_rotation);
  f("lr_scale", &c.lr_scale);
  f("lr_latent", &c.lr_latent);
  f("lr_network", &c.lr_network);
  f("lr_sh", &c.lr_sh);
  f("lr_final_fraction", &c.lr_final_fraction);
  f("densify_interval", &c.densify_interval);
  f("densify_from", &c.densify_from);
  f("densify_until_fraction", &c.densify_until_fraction);
  f("densify_grad_threshold", &c.densify_grad_threshold);
  f("percent_dense", &c.percent_dense);
  f("prune_opacity", &c.prune_opacity);
  f("max_screen_radius", &c.max_screen_radius);
  f("opacity_reset_interval", &c.opacity_reset_interval);
  f("log_interval", &c.log_interval);
  f("lambda_dssim", &c.loss.lambda_dssim);
  f("lambda_diffuse", &c.loss.lambda_diffuse);
  f("lambda_normal", &c.loss.lambda_normal);
  f("diffuse_dims", &c.model.diffuse_dims);
  f("specular_dims", &c.model.specular_dims);
  f("no_mask", &c.model.no_mask);
  f("no_specular", &c.model.no_specular);
  f("sh_color_baseline", &c.model.sh_color_baseline);
  f("near_plane", &c.model.near_plane);
}

}  // namespace detail

inline void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(c.iterations > 0, "iterations must be > 0");
  for (float lr : {c.lr_position, c.lr_position_final, c.lr_opacity, c.lr_rotation, c.lr_scale, c.lr_latent,
                   c.lr_network, c.lr_sh})
    require(std::isfinite(lr) && lr >= 0.0f, "learning rates must be finite and >= 0");
  require(c.lr_position_final > 0.0f || c.lr_position == 0.0f, "lr_position_final must be > 0");
  require(c.lr_final_fraction > 0.0f && c.lr_final_fraction <= 1.0f, "lr_final_fraction must lie in (0, 1]");
  require(c.densify_interval > 0, "densify_interval must be > 0");
  require(c.densify_from >= 0, "densify_from must be >= 0");
  require(c.densify_until_fraction >= 0.0f && c.densify_until_fraction <= 1.0f,
          "densify_until_fraction must lie in [0, 1]");
  require(c.densify_grad_threshold > 0.0f, "densify_grad_threshold must be > 0");
  require(c.percent_dense > 0.0f, "percent_dense must be > 0");
  require(c.prune_opacity > 0.0f && c.prune_opacity < 1.0f, "prune_opacity must lie in (0, 1)");
  require(c.max_screen_radius >= 0.0f, "max_screen_radius must be >= 0");
  require(c.opacity_reset_interval >= 0, "opacity_reset_interval must be >= 0");
  require(c.log_interval > 0, "log_interval must be > 0");
  require(c.loss.lambda_dssim >= 0.0f && c.loss.lambda_dssim <= 1.0f, "lambda_dssim must lie in [0, 1]");
  require(c.loss.lambda_diffuse >= 0.0f && c.loss.lambda_normal >= 0.0f, "loss weights must be >= 0");
  require(c.model.diffuse_dims > 0 && c.model.specular_dims > 0, "latent widths must be > 0");
  require(c.model.near_plane > 0.0f, "near_plane must be > 0");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  TrainConfig copy = c;
  detail::for_each_field(copy, [&](const char* name, auto* field) { j[name] = *field; });
  return j;
}

/// Overlays `j` on the defaults. Unknown keys and mistyped values are
/// rejected; the result is validated.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::map<std::string, bool> known;
  detail::for_each_field(base, [&](const char* name, auto* field) {
    known[name] = true;
    const auto it = j.find(name);
    if (it == j.end()) return;
    using T = std::remove_pointer_t<decltype(field)>;
    const bool ok = std::is_same_v<T, bool> ? it->is_boolean()
                    : std::is_floating_point_v<T> ? it->is_number()
                                                  : it->is_number_integer() || it->is_number_unsigned();
    if (!ok) throw ConfigError("config key '" + std::string(name) + "' has the wrong type");
    *field = it->template get<T>();
  });
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  validate(base);
  return base;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamMoments {
  ad::Tensor m, v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam with per-parameter state keyed by name.
class Adam {
 public:
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  std::map<std::string, AdamMoments> state;

  /// Updates every parameter in place. All gradients are checked before any
  /// parameter or moment changes; a non-finite one aborts the whole step.
  void step(const nn::ParamList& params, const std::vector<ad::Tensor>& grads,
            const std::function<float(const std::string&)>& lr_of) {
    if (grads.size() != params.size()) throw ShapeError("adam: gradient count does not match parameter count");
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (grads[k].shape() != params[k].value->shape())
        throw ShapeError("adam: gradient shape " + ad::to_string(grads[k].shape()) + " for " + params[k].name +
                         " " + ad::to_string(params[k].value->shape()));
      for (float g : grads[k].values())
        if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient in parameter group " + params[k].name);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      AdamMoments& s = moments_for(params[k]);
      ++s.step;
      const double c1 = 1.0 - std::pow(double(beta1), double(s.step));
      const double c2 = 1.0 - std::pow(double(beta2), double(s.step));
      const float lr = lr_of(params[k].name);
      std::span<float> p = params[k].value->data(), m = s.m.data(), v = s.v.data();
      const auto& g = grads[k].values();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

  /// Re-indexes row-aligned moments after densification: row r takes the
  /// moments of old row source[r], or zeros when source[r] < 0.
  void remap_rows(const std::string& name, const std::vector<int>& source) {
    const auto it = state.find(name);
    if (it == state.end()) return;
    AdamMoments& s = it->second;
    const int width = s.m.rank() == 2 ? s.m.dim(1) : 1;
    const int rows = static_cast<int>(source.size());
    ad::Tensor m(ad::Shape{rows, width}, 0.0f), v(ad::Shape{rows, width}, 0.0f);
    for (int r = 0; r < rows; ++r) {
      if (source[r] < 0) continue;
      for (int c = 0; c < width; ++c) {
        m[r * width + c] = s.m[source[r] * width + c];
        v[r * width + c] = s.v[source[r] * width + c];
      }
    }
    s.m = m;
    s.v = v;
  }

  void reset(const std::string& name) {
    const auto it = state.find(name);
    if (it == state.end()) return;
    for (float& x : it->second.m.data()) x = 0.0f;
    for (float& x : it->second.v.data()) x = 0.0f;
  }

 private:
  AdamMoments& moments_for(const nn::NamedParam& p) {
    AdamMoments& s = state[p.name];
    if (s.m.shape() != p.value->shape()) {
      s.m = ad::Tensor(p.value->shape(), 0.0f);
      s.v = ad::Tensor(p.value->shape(), 0.0f);
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Densification

struct DensifyConfig {
  float grad_threshold = 2e-4f;
  float percent_dense = 0.01f;
  float prune_opacity = 0.005f;
  float max_screen_radius = 0.0f;  // 0 disables
};

struct DensifyReport {
  /// Old row feeding each new row; -1 for freshly created Gaussians.
  std::vector<int> source;
  int cloned = 0, split = 0, pruned = 0;
};

inline constexpr int kSplitChildren = 2;
inline constexpr float kSplitScaleDivisor = 1.6f;

/// Clones small and splits large Gaussians whose mean NDC gradient reaches
/// the threshold, then prunes by opacity (and by the optional radius cap).
/// Statistics are reset afterwards.
inline DensifyReport densify_and_prune(GaussianCloud& cloud, const DensifyConfig& cfg, float scene_extent,
                                       std::mt19937_64& rng) {
  if (!cloud.bookkeeping_consistent()) throw StateError("densify_and_prune: bookkeeping out of sync");
  const int n = static_cast<int>(cloud.size());
  const float boundary = cfg.percent_dense * scene_extent;
  std::vector<LatentGaussian> next;
  std::vector<int> source;
  std::vector<float> radii;
  DensifyReport report;
  std::vector<LatentGaussian> appended;
  std::normal_distribution<float> nd;
  for (int i = 0; i < n; ++i) {
    const LatentGaussian& g = cloud.gaussians[i];
    const bool hot = cloud.mean_grad(i) >= cfg.grad_threshold;
    const float max_scale = std::exp(g.log_scale.maxCoeff());
    if (hot && max_scale > boundary) {
      // Split: the parent is replaced by children drawn inside its footprint.
      const Eigen::Vector3f scale = g.log_scale.array().exp();
      const Eigen::Matrix3f r = rotation_matrix(g.rotation);
      for (int k = 0; k < kSplitChildren; ++k) {
        LatentGaussian child = g;
        const Eigen::Vector3f offset(scale.x() * nd(rng), scale.y() * nd(rng), scale.z() * nd(rng));
        child.position = g.position + r * offset;
        child.log_scale = (scale / kSplitScaleDivisor).array().log();
        appended.push_back(std::move(child));
      }
      ++report.split;
      continue;
    }
    next.push_back(g);
    source.push_back(i);
    radii.push_back(cloud.max_radii[i]);
    if (hot) {
      appended.push_back(g);
      ++report.cloned;
    }
  }
  for (auto& g : appended) {
    next.push_back(std::move(g));
    source.push_back(-1);
    radii.push_back(0.0f);
  }

  GaussianCloud out;
  out.diffuse_dims = cloud.diffuse_dims;
  out.specular_dims = cloud.specular_dims;
  for (std::size_t r = 0; r < next.size(); ++r) {
    const LatentGaussian& g = next[r];
    bool drop = sigmoid(g.opacity_logit) < cfg.prune_opacity;
    if (cfg.max_screen_radius > 0.0f)
      drop = drop || radii[r] > cfg.max_screen_radius || std::exp(g.log_scale.maxCoeff()) > 0.1f * scene_extent;
    if (drop) {
      ++report.pruned;
      continue;
    }
    out.push_back(g);
    report.source.push_back(source[r]);
  }
  cloud = std::move(out);
  return report;
}

/// 1.1 x the largest distance from a camera center to their mean.
inline float scene_extent(const std::vector<CameraView>& views) {
  if (views.empty()) return 1.0f;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& v : views) mean += camera_center(v).cast<double>();
  mean /= static_cast<double>(views.size());
  double radius = 0.0;
  for (const auto& v : views) radius = std::max(radius, (camera_center(v).cast<double>() - mean).norm());
  return static_cast<float>(1.1 * std::max(radius, 1e-6));
}

// ---------------------------------------------------------------------------
// Trainer

struct StepStats {
  int iteration = 0;
  int view = 0;
  float loss = 0.0f;
  LossTerms terms;
  double psnr = 0.0;
  int num_gaussians = 0;
};

struct ViewMetrics {
  double psnr = 0.0, ssim = 0.0;
};

/// Clamps to the displayable range, as images are when written.
inline ad::Tensor clamp01(const ad::Tensor& x) {
  ad::Tensor out = x.clone();
  for (float& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

/// The trained state without the training data: enough to render.
struct Model {
  TrainConfig config;
  GaussianParams params;
  Networks nets;
  int iteration = 0;

  RenderOutput render(const CameraView& view) const { return slgs::render(params, nets, view, config.model); }

  nn::ParamList collect() {
    nn::ParamList out;
    params.collect(out);
    nets.collect(out);
    return out;
  }
};

class Trainer {
 public:
  /// `views` and `images` are the training split; images are (3 x H x W).
  Trainer(TrainConfig config, std::vector<CameraView> views, std::vector<ad::Tensor> images,
          const GaussianCloud& init)
      : views_(std::move(views)), images_(std::move(images)), rng_(config.seed) {
    validate(config);
    check_data();
    if (init.diffuse_dims != config.model.diffuse_dims || init.specular_dims != config.model.specular_dims)
      throw ConfigError("initial cloud latent widths do not match the model configuration");
    model_.config = config;
    model_.params = to_params(init, config.model.sh_color_baseline);
    model_.nets = Networks(config.model, rng_);
    stats_ = init;
    stats_.reset_stats();
    extent_ = scene_extent(views_);
  }

  const Model& model() const { return model_; }
  const TrainConfig& config() const { return model_.config; }
  int iteration() const { return model_.iteration; }
  float extent() const { return extent_; }
  const GaussianCloud& stats() const { return stats_; }
  const Adam& optimizer() const { return adam_; }
  const std::vector<CameraView>& views() const { return views_; }

  /// Current learning rate of a named parameter.
  float learning_rate(const std::string& name) const {
    const TrainConfig& c = model_.config;
    const double t = std::clamp(static_cast<double>(model_.iteration) / c.iterations, 0.0, 1.0);
    if (name == "gaussians.position") {
      if (c.lr_position == 0.0f) return 0.0f;
      const double lr = std::exp((1.0 - t) * std::log(double(c.lr_position)) + t * std::log(double(c.lr_position_final)));
      return static_cast<float>(lr * extent_);
    }
    const double decay = std::pow(double(c.lr_final_fraction), t);
    auto decayed = [decay](float lr) { return static_cast<float>(lr * decay); };
    if (name == "gaussians.opacity") return decayed(c.lr_opacity);
    if (name == "gaussians.rotation") return decayed(c.lr_rotation);
    if (name == "gaussians.scale") return decayed(c.lr_scale);
    if (name == "gaussians.f_diffuse" || name == "gaussians.f_specular") return decayed(c.lr_latent);
    if (name == "gaussians.sh") return decayed(c.lr_sh);
    return decayed(c.lr_network);
  }

  StepStats step() {
    const TrainConfig& c = model_.config;
    std::uniform_int_distribution<int> pick(0, static_cast<int>(views_.size()) - 1);
    const int vi = pick(rng_);
    const CameraView& view = views_[vi];
    const ad::Tensor& gt = images_[vi];

    StepStats st;
    st.iteration = model_.iteration + 1;
    st.view = vi;
    nn::ParamList params = model_.collect();
    std::vector<ad::Tensor> grads;
    ad::Tensor geometry_grad;
    std::vector<float> radii;
    {
      ad::Tape tape;
      struct Detach {
        const nn::ParamList& p;
        ~Detach() { nn::detach_all(p); }
      } detach{params};
      nn::watch_all(params, tape);
      const RenderOutput out = model_.render(view);
      st.terms = total_loss(out.rgb, out.diffuse, gt, out.normals, out.pseudo_normals, c.loss, &out.visible);
      st.loss = st.terms.total.item();
      if (!std::isfinite(st.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at iteration " << st.iteration << ", view " << vi << " (render " << st.terms.render
            << ", diffuse " << st.terms.diffuse << ", normal " << st.terms.normal << ")";
        throw NonFiniteLoss(msg.str());
      }
      tape.backward(st.terms.total);
      for (const auto& p : params) grads.push_back(tape.grad(*p.value));
      geometry_grad = tape.grad(out.projection.geometry);
      radii = out.projection.radii;
      st.psnr = psnr(clamp01(out.rgb.detach()), gt);
    }
    adam_.step(params, grads, [this](const std::string& name) { return learning_rate(name); });
    accumulate_stats(geometry_grad, radii, view);
    ++model_.iteration;

    const int it = model_.iteration;
    if (it >= c.densify_from && it <= c.densify_until() && it % c.densify_interval == 0) densify();
    if (c.opacity_reset_interval > 0 && it % c.opacity_reset_interval == 0 && it < c.densify_until())
      reset_opacity();
    st.num_gaussians = model_.params.size();
    return st;
  }

  /// Runs to the configured iteration count, writing a metrics line every
  /// log_interval iterations (and at the end).
  void run(std::ostream* metrics = nullptr, const std::function<void(const StepStats&)>& on_step = {}) {
    while (model_.iteration < model_.config.iterations) {
      const StepStats st = step();
      if (on_step) on_step(st);
      if (metrics && (st.iteration % model_.config.log_interval == 0 || st.iteration == model_.config.iterations)) {
        const ViewMetrics m = evaluate_view(model_, views_[st.view], images_[st.view]);
        *metrics << metrics_line(st.iteration, m.psnr, m.ssim, st.loss) << '\n';
      }
    }
  }

  static ViewMetrics evaluate_view(const Model& model, const CameraView& view, const ad::Tensor& gt) {
    const ad::Tensor rgb = clamp01(model.render(view).rgb);
    return {psnr(rgb, gt), ssim_value(rgb, gt)};
  }

  /// Mean PSNR over the training views.
  double mean_training_psnr() const {
    double s = 0.0;
    for (std::size_t i = 0; i < views_.size(); ++i) s += evaluate_view(model_, views_[i], images_[i]).psnr;
    return s / static_cast<double>(views_.size());
  }

  /// `run_info` is stored verbatim in the meta chunk (e.g. dataset location).
  void save(const std::filesystem::path& path, const nlohmann::json& run_info = nullptr) const;
  static Model load_model(const std::filesystem::path& path);
  static Trainer load(const std::filesystem::path& path, std::vector<CameraView> views,
                      std::vector<ad::Tensor> images);

 private:
  Trainer() = default;

  void check_data() const {
    if (views_.empty()) throw ConfigError("training needs at least one view");
    if (views_.size() != images_.size()) throw ConfigError("training views and images differ in count");
    for (std::size_t i = 0; i < views_.size(); ++i) {
      validate(views_[i]);
      if (images_[i].shape() != ad::Shape{3, views_[i].height, views_[i].width})
        throw ShapeError("training image " + std::to_string(i) + " has shape " + ad::to_string(images_[i].shape()) +
                         ", expected (3 x " + std::to_string(views_[i].height) + " x " +
                         std::to_string(views_[i].width) + ")");
    }
  }

  void accumulate_stats(const ad::Tensor& geometry_grad, const std::vector<float>& radii, const CameraView& view) {
    const float sx = 0.5f * view.width, sy = 0.5f * view.height;
    for (std::size_t i = 0; i < radii.size(); ++i) {
      if (radii[i] <= 0.0f) continue;
      const float gx = geometry_grad[6 * i] * sx, gy = geometry_grad[6 * i + 1] * sy;
      stats_.grad_accum[i] += std::sqrt(gx * gx + gy * gy);
      stats_.grad_count[i] += 1.0f;
      stats_.max_radii[i] = std::max(stats_.max_radii[i], radii[i]);
    }
  }

  void densify() {
    const TrainConfig& c = model_.config;
    GaussianCloud cloud = stats_;
    write_back(model_.params, cloud);
    const DensifyReport rep = densify_and_prune(
        cloud, {c.densify_grad_threshold, c.percent_dense, c.prune_opacity, c.max_screen_radius}, extent_, rng_);
    model_.params = to_params(cloud, c.model.sh_color_baseline);
    nn::ParamList gaussians;
    model_.params.collect(gaussians);
    for (const auto& p : gaussians) adam_.remap_rows(p.name, rep.source);
    stats_ = std::move(cloud);
    stats_.reset_stats();
  }

  void reset_opacity() {
    const float cap = logit(0.01f);
    for (float& v : model_.params.opacity_logits.data()) v = std::min(v, cap);
    adam_.reset("gaussians.opacity");
  }

  Model model_;
  std::vector<CameraView> views_;
  std::vector<ad::Tensor> images_;
  std::mt19937_64 rng_;
  Adam adam_;
  GaussianCloud stats_;  // bookkeeping only; parameters live in model_
  float extent_ = 1.0f;
};

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline std::string tensor_chunk(const ad::Tensor& t) {
  checkpoint::Payload p;
  p.put_tensor(t);
  return p.bytes();
}

inline ad::Tensor read_tensor_chunk(const checkpoint::Container& c, const std::string& name) {
  checkpoint::Cursor cur(c.at(name), name);
  return cur.get_tensor();
}

inline void write_model_chunks(const Model& model, checkpoint::Container& out, const nlohmann::json& run_info) {
  nlohmann::json meta;
  meta["run"] = run_info;
  meta["config"] = to_json(model.config);
  meta["iteration"] = model.iteration;
  meta["num_gaussians"] = model.params.size();
  meta["params_per_gaussian"] = params_per_gaussian(model.config.model.diffuse_dims, model.config.model.specular_dims);
  out.add("meta", meta.dump());
  Model alias = model;  // shares tensor buffers; collect() needs a mutable object
  for (const auto& p : alias.collect()) out.add("param/" + p.name, tensor_chunk(*p.value));
  checkpoint::Payload it;
  it.put<std::uint64_t>(static_cast<std::uint64_t>(model.iteration));
  out.add("iteration", it.bytes());
}

inline Model read_model_chunks(const checkpoint::Container& c) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(c.at("meta"));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedFile(std::string("checkpoint: bad meta chunk: ") + e.what());
  }
  Model m;
  try {
    m.config = train_config_from_json(meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedFile(std::string("checkpoint: bad meta chunk: ") + e.what());
  }
  checkpoint::Cursor it(c.at("iteration"), "iteration");
  m.iteration = static_cast<int>(it.get<std::uint64_t>());
  std::mt19937_64 scratch(0);  // shapes only; every value is overwritten below
  m.nets = Networks(m.config.model, scratch);
  m.params = GaussianParams{ad::Tensor({0, 3}), ad::Tensor({0, 1}), ad::Tensor({0, 4}), ad::Tensor({0, 3}),
                            ad::Tensor({0, m.config.model.diffuse_dims}), ad::Tensor({0, m.config.model.specular_dims}),
                            ad::Tensor({0, m.config.model.sh_color_baseline ? kShColorCoefficients : 0})};
  const bool with_sh = m.config.model.sh_color_baseline;
  for (const auto& p : m.collect()) {
    ad::Tensor t = read_tensor_chunk(c, "param/" + p.name);
    const bool row_aligned = p.name.rfind("gaussians.", 0) == 0;
    if (row_aligned ? (t.rank() != 2 || t.dim(1) != p.value->dim(1)) : t.shape() != p.value->shape())
      throw MalformedFile("checkpoint: parameter " + p.name + " has shape " + ad::to_string(t.shape()) +
                          ", expected " + ad::to_string(p.value->shape()));
    *p.value = t;
  }
  if (!with_sh) m.params.sh_coeffs = ad::Tensor({m.params.size(), 0});
  const int n = m.params.size();
  for (const ad::Tensor* t : {&m.params.opacity_logits, &m.params.rotations, &m.params.log_scales,
                              &m.params.f_diffuse, &m.params.f_specular, &m.params.sh_coeffs})
    if (t->dim(0) != n) throw MalformedFile("checkpoint: Gaussian parameter row counts disagree");
  return m;
}

}  // namespace detail

inline void Trainer::save(const std::filesystem::path& path, const nlohmann::json& run_info) const {
  checkpoint::Container c;
  detail::write_model_chunks(model_, c, run_info);
  for (const auto& [name, s] : adam_.state) {
    checkpoint::Payload p;
    p.put<std::uint64_t>(s.step).put_tensor(s.m).put_tensor(s.v);
    c.add("adam/" + name, p.bytes());
  }
  checkpoint::Payload stats;
  const int n = static_cast<int>(stats_.size());
  stats.put_tensor(ad::Tensor({n}, stats_.grad_accum))
      .put_tensor(ad::Tensor({n}, stats_.grad_count))
      .put_tensor(ad::Tensor({n}, stats_.max_radii));
  c.add("bookkeeping", stats.bytes());
  std::ostringstream rng;
  rng << rng_;
  c.add("rng", rng.str());
  checkpoint::Payload extent;
  extent.put<float>(extent_);
  c.add("scene_extent", extent.bytes());
  c.write(path);
}

/// The meta chunk: config, iteration, counts and the caller's run info.
inline nlohmann::json read_checkpoint_meta(const std::filesystem::path& path) {
  const checkpoint::Container c = checkpoint::Container::read(path);
  try {
    return nlohmann::json::parse(c.at("meta"));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedFile(std::string("checkpoint: bad meta chunk: ") + e.what());
  }
}

inline Model Trainer::load_model(const std::filesystem::path& path) {
  return detail::read_model_chunks(checkpoint::Container::read(path));
}

inline Trainer Trainer::load(const std::filesystem::path& path, std::vector<CameraView> views,
                             std::vector<ad::Tensor> images) {
  const checkpoint::Container c = checkpoint::Container::read(path);
  Trainer t;
  t.model_ = detail::read_model_chunks(c);
  t.views_ = std::move(views);
  t.images_ = std::move(images);
  t.check_data();
  for (const auto& [name, payload] : c.chunks) {
    if (name.rfind("adam/", 0) != 0) continue;
    checkpoint::Cursor cur(payload, name);
    AdamMoments s;
    s.step = cur.get<std::uint64_t>();
    s.m = cur.get_tensor();
    s.v = cur.get_tensor();
    t.adam_.state[name.substr(5)] = std::move(s);
  }
  checkpoint::Cursor stats(c.at("bookkeeping"), "bookkeeping");
  const int n = t.model_.params.size();
  std::vector<float>* fields[3] = {&t.stats_.grad_accum, &t.stats_.grad_count, &t.stats_.max_radii};
  for (auto* f : fields) {
    const ad::Tensor v = stats.get_tensor();
    if (v.size() != static_cast<std::size_t>(n)) throw MalformedFile("checkpoint: bookkeeping length mismatch");
    *f = v.values();
  }
  write_back(t.model_.params, t.stats_);
  std::istringstream rng(c.at("rng"));
  rng >> t.rng_;
  if (!rng) throw MalformedFile("checkpoint: bad rng state");
  checkpoint::Cursor extent(c.at("scene_extent"), "scene_extent");
  t.extent_ = extent.get<float>();
  return t;
}

}  // namespace slgs
