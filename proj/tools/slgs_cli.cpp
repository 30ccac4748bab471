// slgs: train, render, evaluate and inspect latent-feature Gaussian splatting
// models on COLMAP datasets.
//
// Exit codes: 0 success, 1 training aborted, 2 usage / input errors.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "slgs/slgs.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace slgs;

namespace {

constexpr int kExitAbort = 1;
constexpr int kExitUsage = 2;

// Input problems detected before any training work starts.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::vector<CameraView> views;  // sorted by image name
  std::vector<std::string> names;
  std::vector<colmap::SfmPoint> points;

  std::vector<std::size_t> split(const std::string& which) const {
    if (which != "train" && which != "test") throw UsageError("--split must be 'train' or 'test'");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < views.size(); ++i)
      if (colmap::is_test_view(i) == (which == "test")) out.push_back(i);
    return out;
  }
};

Dataset load_dataset(const fs::path& data, int downscale) {
  const fs::path sparse = data / "sparse" / "0";
  if (!fs::is_directory(sparse)) throw UsageError("sparse reconstruction not found: " + sparse.string());
  const colmap::SparseReconstruction rec = colmap::read_sparse_dir(sparse);
  Dataset d;
  d.views = colmap::make_views(rec, data / "images", downscale);
  for (const auto& v : d.views) d.names.push_back(fs::path(v.image_path).filename().string());
  d.points = rec.points;
  return d;
}

ad::Tensor load_ground_truth(const CameraView& v, int downscale) {
  ad::Tensor img = load_image(v.image_path, downscale);
  if (img.dim(1) != v.height || img.dim(2) != v.width)
    throw UsageError("image " + v.image_path + " is " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)) +
                     " after downscaling, camera expects " + std::to_string(v.width) + "x" +
                     std::to_string(v.height));
  return img;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string default_config_text() {
  json j = to_json(TrainConfig{});
  j["data"] = "<required>";
  j["out"] = "<required>";
  j["downscale"] = 1;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, out, config;
  std::optional<int> iters, downscale, diffuse_dims, specular_dims;
  std::optional<std::uint64_t> seed;
  bool no_mask = false, no_specular = false, sh_color_baseline = false, quiet = false;
};

int cmd_train(const TrainArgs& a) {
  // Effective config: defaults <- config file <- command-line flags.
  json run = {{"downscale", 1}};
  json train_keys = json::object();
  if (!a.config.empty()) {
    const json file = read_json_file(a.config);
    if (!file.is_object()) throw UsageError("config must be a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (key == "data" || key == "out" || key == "downscale")
        run[key] = value;
      else
        train_keys[key] = value;
    }
  }
  if (!a.data.empty()) run["data"] = a.data;
  if (!a.out.empty()) run["out"] = a.out;
  if (a.downscale) run["downscale"] = *a.downscale;
  if (a.iters) train_keys["iterations"] = *a.iters;
  if (a.seed) train_keys["seed"] = *a.seed;
  if (a.diffuse_dims) train_keys["diffuse_dims"] = *a.diffuse_dims;
  if (a.specular_dims) train_keys["specular_dims"] = *a.specular_dims;
  if (a.no_mask) train_keys["no_mask"] = true;
  if (a.no_specular) train_keys["no_specular"] = true;
  if (a.sh_color_baseline) train_keys["sh_color_baseline"] = true;
  if (!run.contains("data") || !run["data"].is_string()) throw UsageError("--data (or \"data\" in the config) is required");
  if (!run.contains("out") || !run["out"].is_string()) throw UsageError("--out (or \"out\" in the config) is required");
  if (!run["downscale"].is_number_integer() || run["downscale"].get<int>() < 1)
    throw UsageError("downscale must be an integer >= 1");
  const TrainConfig cfg = train_config_from_json(train_keys);
  const fs::path data = run["data"].get<std::string>(), out = run["out"].get<std::string>();
  const int downscale = run["downscale"].get<int>();

  const Dataset ds = load_dataset(data, downscale);
  std::vector<CameraView> views;
  std::vector<ad::Tensor> images;
  for (std::size_t i : ds.split("train")) {
    views.push_back(ds.views[i]);
    images.push_back(load_ground_truth(ds.views[i], downscale));
  }
  if (views.size() < 2)
    throw UsageError("training needs at least 2 training views, found " + std::to_string(views.size()));
  std::mt19937_64 init_rng(cfg.seed);
  const GaussianCloud init =
      colmap::init_cloud(ds.points, init_rng, cfg.model.diffuse_dims, cfg.model.specular_dims,
                         cfg.model.sh_color_baseline ? kShColorCoefficients : 0);

  fs::create_directories(out);
  json effective = to_json(cfg);
  effective.update(run);
  write_text(out / "config.json", effective.dump(2) + "\n");
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw IoError("cannot write " + (out / "metrics.jsonl").string());

  Trainer trainer(cfg, views, images, init);
  std::cout << "training " << views.size() << " views, " << init.size() << " initial Gaussians, "
            << cfg.iterations << " iterations\n";
  try {
    trainer.run(&metrics, [&](const StepStats& st) {
      if (!a.quiet && st.iteration % cfg.log_interval == 0)
        std::cout << "iter " << st.iteration << "  loss " << st.loss << "  psnr " << std::fixed
                  << std::setprecision(2) << st.psnr << std::defaultfloat << "  gaussians " << st.num_gaussians
                  << std::endl;
    });
  } catch (const slgs::Error& e) {
    const fs::path dump = out / "abort.json";
    write_text(dump, json{{"iteration", trainer.iteration()}, {"error", e.what()}}.dump(2) + "\n");
    std::cerr << "training aborted: " << e.what() << " (details in " << dump.string() << ")\n";
    return kExitAbort;
  }
  trainer.save(out / "ckpt.slgs", {{"data", fs::absolute(data).string()}, {"downscale", downscale}});
  std::cout << "wrote " << (out / "ckpt.slgs").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// render

struct RenderArgs {
  std::string ckpt, data, pose, out = ".", split = "test";
  std::optional<int> view, downscale;
  bool components = false, no_mask = false;
};

// Dataset location recorded at training time, overridable on the command line.
std::pair<fs::path, int> dataset_of(const fs::path& ckpt, const std::string& data, std::optional<int> downscale) {
  const json meta = read_checkpoint_meta(ckpt);
  const json run = meta.value("run", json::object());
  fs::path dir = data;
  if (dir.empty()) {
    if (!run.is_object() || !run.contains("data")) throw UsageError("--data is required for this checkpoint");
    dir = run["data"].get<std::string>();
  }
  int ds = downscale.value_or(run.is_object() ? run.value("downscale", 1) : 1);
  if (ds < 1) throw UsageError("downscale must be >= 1");
  return {dir, ds};
}

CameraView view_from_pose_file(const fs::path& path) {
  const json j = read_json_file(path);
  try {
    CameraView v;
    v.width = j.at("width").get<int>();
    v.height = j.at("height").get<int>();
    v.focal_x = j.at("fx").get<float>();
    v.focal_y = j.at("fy").get<float>();
    v.principal_point = Eigen::Vector2f(j.at("cx").get<float>(), j.at("cy").get<float>());
    const auto m = j.at("world_to_camera").get<std::vector<float>>();
    if (m.size() != 16) throw UsageError("world_to_camera must have 16 row-major entries");
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) v.world_to_camera(r, c) = m[4 * r + c];
    validate(v);
    return v;
  } catch (const json::exception& e) {
    throw UsageError("pose file " + path.string() + ": " + e.what());
  } catch (const InvalidCamera& e) {
    throw UsageError("pose file " + path.string() + ": " + e.what());
  }
}

int cmd_render(const RenderArgs& a) {
  Model model = Trainer::load_model(a.ckpt);
  if (a.no_mask) model.config.model.no_mask = true;
  CameraView view;
  if (!a.pose.empty()) {
    view = view_from_pose_file(a.pose);
  } else {
    if (!a.view) throw UsageError("render needs --view or --pose");
    const auto [dir, downscale] = dataset_of(a.ckpt, a.data, a.downscale);
    const Dataset ds = load_dataset(dir, downscale);
    const auto idx = ds.split(a.split);
    if (*a.view < 0 || *a.view >= static_cast<int>(idx.size()))
      throw UsageError("view index " + std::to_string(*a.view) + " out of range: the " + a.split + " split has " +
                       std::to_string(idx.size()) + " views");
    view = ds.views[idx[*a.view]];
  }
  const RenderOutput r = model.render(view);
  const fs::path out = a.out;
  fs::create_directories(out);
  save_png(out / "rgb.png", r.rgb);
  std::cout << "wrote " << (out / "rgb.png").string() << "\n";
  if (a.components) {
    save_png(out / "diffuse.png", r.diffuse);
    save_png(out / "specular.png", r.specular);
    save_png(out / "mask.png", r.mask);
    save_png(out / "specular_masked.png", ad::mul(r.specular, r.mask));
    std::cout << "wrote diffuse.png, specular.png, mask.png, specular_masked.png\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string ckpt, data, out, split = "test";
  std::optional<int> downscale;
};

int cmd_eval(const EvalArgs& a) {
  const Model model = Trainer::load_model(a.ckpt);
  const auto [dir, downscale] = dataset_of(a.ckpt, a.data, a.downscale);
  const Dataset ds = load_dataset(dir, downscale);
  const auto idx = ds.split(a.split);
  if (idx.empty()) throw UsageError("the " + a.split + " split is empty");
  json report = {{"split", a.split}, {"checkpoint", a.ckpt}, {"iteration", model.iteration}, {"views", json::array()}};
  double sum_psnr = 0.0, sum_ssim = 0.0;
  std::cout << std::left << std::setw(28) << "view" << std::right << std::setw(10) << "PSNR" << std::setw(10)
            << "SSIM" << "\n";
  for (std::size_t i : idx) {
    const ViewMetrics m = Trainer::evaluate_view(model, ds.views[i], load_ground_truth(ds.views[i], downscale));
    sum_psnr += m.psnr;
    sum_ssim += m.ssim;
    report["views"].push_back({{"name", ds.names[i]}, {"psnr", m.psnr}, {"ssim", m.ssim}});
    std::cout << std::left << std::setw(28) << ds.names[i] << std::right << std::fixed << std::setprecision(3)
              << std::setw(10) << m.psnr << std::setw(10) << std::setprecision(4) << m.ssim << "\n";
  }
  report["mean_psnr"] = sum_psnr / idx.size();
  report["mean_ssim"] = sum_ssim / idx.size();
  std::cout << std::left << std::setw(28) << "mean" << std::right << std::setw(10) << std::setprecision(3)
            << sum_psnr / idx.size() << std::setw(10) << std::setprecision(4) << sum_ssim / idx.size() << "\n";
  const fs::path out = a.out.empty() ? fs::path(a.ckpt).parent_path() / ("eval_" + a.split + ".json") : fs::path(a.out);
  write_text(out, report.dump(2) + "\n");
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectArgs {
  std::string ckpt;
  int diffuse_dims = kDefaultDiffuseDims, specular_dims = kDefaultSpecularDims;
};

int cmd_inspect(const InspectArgs& a) {
  int dd = a.diffuse_dims, sd = a.specular_dims;
  std::optional<Model> model;
  if (!a.ckpt.empty()) {
    model = Trainer::load_model(a.ckpt);
    dd = model->config.model.diffuse_dims;
    sd = model->config.model.specular_dims;
  }
  std::cout << "parameters per Gaussian: " << params_per_gaussian(dd, sd) << " (position 3, opacity 1, rotation 4, "
            << "scale 3, latent " << dd << " + " << sd << ")\n"
            << "3D-GS baseline with degree-3 SH color: " << kShBaselineParamsPerGaussian << "\n";
  if (!model) return 0;
  Model& m = *model;
  const GaussianParams& p = m.params;
  const int n = p.size();
  std::cout << "iteration: " << m.iteration << "\n" << "gaussians: " << n << "\n";
  if (n > 0) {
    std::vector<float> opacity, scale;
    for (int i = 0; i < n; ++i) {
      opacity.push_back(sigmoid(p.opacity_logits[i]));
      for (int k = 0; k < 3; ++k) scale.push_back(std::exp(p.log_scales[3 * i + k]));
    }
    auto summary = [](std::vector<float> v) {
      std::sort(v.begin(), v.end());
      std::ostringstream o;
      o << "min " << v.front() << "  median " << v[v.size() / 2] << "  max " << v.back();
      return o.str();
    };
    std::cout << "opacity: " << summary(opacity) << "\n" << "scale: " << summary(scale) << "\n";
  }
  nn::ParamList gaussians, shading, diffuse, specular;
  m.params.collect(gaussians);
  m.nets.shading.collect(shading, "shading");
  m.nets.diffuse.collect(diffuse, "diffuse_unet");
  m.nets.specular.collect(specular, "specular_cnn");
  std::cout << "scalars: gaussians " << nn::count_scalars(gaussians) << ", shading MLPs " << nn::count_scalars(shading)
            << ", diffuse UNet " << nn::count_scalars(diffuse) << ", specular CNN " << nn::count_scalars(specular)
            << "\n";
  std::cout << "config: " << to_json(m.config).dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 1;
  int views = 8, size = 32, gaussians = 3;
};

/// Writes the self-consistency scene as a COLMAP text dataset with PNGs.
int cmd_synth(const SynthArgs& a) {
  SyntheticOptions opt;
  opt.num_views = a.views;
  opt.size = a.size;
  opt.num_gaussians = a.gaussians;
  if (a.views < 1 || a.size < 8 || a.gaussians < 1) throw UsageError("synth needs views >= 1, size >= 8, gaussians >= 1");
  const SyntheticScene s = make_synthetic_scene(a.seed, opt);
  const fs::path out = a.out, sparse = out / "sparse" / "0", images = out / "images";
  fs::create_directories(sparse);
  fs::create_directories(images);
  std::ostringstream cams, imgs, pts;
  cams.precision(17);
  imgs.precision(17);
  pts.precision(17);
  const CameraView& v0 = s.views.front();
  cams << "# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n"
       << "1 PINHOLE " << v0.width << ' ' << v0.height << ' ' << v0.focal_x << ' ' << v0.focal_y << ' '
       << v0.principal_point.x() << ' ' << v0.principal_point.y() << "\n";
  imgs << "# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n";
  for (std::size_t i = 0; i < s.views.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "view_%03zu.png", i);
    const Eigen::Vector4f q = matrix_to_quaternion(s.views[i].rotation());
    const Eigen::Vector3f t = s.views[i].translation();
    imgs << i + 1 << ' ' << q[0] << ' ' << q[1] << ' ' << q[2] << ' ' << q[3] << ' ' << t.x() << ' ' << t.y() << ' '
         << t.z() << " 1 " << name << "\n\n";
    save_png(images / name, s.images[i]);
  }
  pts << "# POINT3D_ID X Y Z R G B ERROR TRACK[]\n";
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    const auto& p = s.points[i];
    pts << i + 1 << ' ' << p.position.x() << ' ' << p.position.y() << ' ' << p.position.z() << ' '
        << int(p.color[0]) << ' ' << int(p.color[1]) << ' ' << int(p.color[2]) << " 0\n";
  }
  write_text(sparse / "cameras.txt", cams.str());
  write_text(sparse / "images.txt", imgs.str());
  write_text(sparse / "points3D.txt", pts.str());
  std::cout << "wrote " << s.views.size() << " views of a " << a.gaussians << "-Gaussian scene to " << out.string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-feature Gaussian splatting: train, render, evaluate, inspect."};
  app.require_subcommand(1);
  app.footer("Environment: SLGS_THREADS caps worker threads.");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Optimize a model on a COLMAP dataset (<data>/sparse/0, <data>/images)");
  train->add_option("--data", ta.data, "Dataset directory");
  train->add_option("--out", ta.out, "Output directory (config.json, metrics.jsonl, ckpt.slgs)");
  train->add_option("--config", ta.config, "JSON config; unknown keys are rejected")->check(CLI::ExistingFile);
  train->add_option("--iters", ta.iters, "Iterations (default 2000)");
  train->add_option("--seed", ta.seed, "Random seed (default 0)");
  train->add_option("--downscale", ta.downscale, "Integer image downscale factor (default 1)");
  train->add_option("--diffuse-dims", ta.diffuse_dims, "Diffuse latent channels (default 8)");
  train->add_option("--specular-dims", ta.specular_dims, "Specular latent channels (default 8)");
  train->add_flag("--no-mask", ta.no_mask, "Ablation: composed = diffuse + specular");
  train->add_flag("--no-specular", ta.no_specular, "Ablation: composed = diffuse");
  train->add_flag("--sh-color-baseline", ta.sh_color_baseline, "Comparison: diffuse + per-Gaussian SH color");
  train->add_flag("--quiet", ta.quiet, "No progress lines");
  train->footer("Config keys and defaults:\n" + default_config_text());

  RenderArgs ra;
  auto* render = app.add_subcommand("render", "Render a view from a checkpoint");
  render->add_option("--ckpt", ra.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  render->add_option("--view", ra.view, "View index within --split");
  render->add_option("--split", ra.split, "test (default) or train");
  render->add_option("--pose", ra.pose, "Camera JSON: width, height, fx, fy, cx, cy, world_to_camera[16]");
  render->add_option("--data", ra.data, "Dataset directory (default: the one used for training)");
  render->add_option("--downscale", ra.downscale, "Downscale factor (default: the one used for training)");
  render->add_option("--out", ra.out, "Output directory (default .)");
  render->add_flag("--components", ra.components, "Also write diffuse, specular, mask and specular*mask");
  render->add_flag("--no-mask", ra.no_mask, "Compose as diffuse + specular");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "PSNR / SSIM over a split (held-out by default)");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", ea.split, "test (default) or train");
  eval->add_option("--data", ea.data, "Dataset directory (default: the one used for training)");
  eval->add_option("--downscale", ea.downscale, "Downscale factor (default: the one used for training)");
  eval->add_option("--out", ea.out, "Report path (default <ckpt dir>/eval_<split>.json)");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Parameter counts and checkpoint statistics");
  inspect->add_option("--ckpt", ia.ckpt, "Checkpoint")->check(CLI::ExistingFile);
  inspect->add_option("--diffuse-dims", ia.diffuse_dims, "Diffuse latent channels without a checkpoint");
  inspect->add_option("--specular-dims", ia.specular_dims, "Specular latent channels without a checkpoint");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write the synthetic self-consistency scene as a COLMAP dataset");
  synth->add_option("--out", sa.out, "Output dataset directory")->required();
  synth->add_option("--seed", sa.seed, "Scene seed (default 1)");
  synth->add_option("--views", sa.views, "Number of views (default 8)");
  synth->add_option("--size", sa.size, "Image side in pixels (default 32)");
  synth->add_option("--gaussians", sa.gaussians, "Number of Gaussians (default 3)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*render) return cmd_render(ra);
    if (*eval) return cmd_eval(ea);
    if (*inspect) return cmd_inspect(ia);
    if (*synth) return cmd_synth(sa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitAbort;
  } catch (const NonFiniteGradient& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitAbort;
  } catch (const slgs::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
