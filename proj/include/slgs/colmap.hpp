#pragma once

// COLMAP sparse reconstruction readers (binary and text) and cloud
// initialization from the SfM points.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "slgs/errors.hpp"
#include "slgs/scene_model.hpp"

namespace slgs::colmap {

struct CameraIntrinsics {
  std::uint32_t id = 0;
  std::string model;
  std::uint64_t width = 0, height = 0;
  std::vector<double> params;
};

struct ImagePose {
  std::uint32_t id = 0;
  Eigen::Vector4d qvec{1, 0, 0, 0};  // w x y z, world-to-camera
  Eigen::Vector3d tvec = Eigen::Vector3d::Zero();
  std::uint32_t camera_id = 0;
  std::string name;

  Eigen::Matrix4f world_to_camera() const {
    Eigen::Matrix4f m = Eigen::Matrix4f::Identity();
    m.topLeftCorner<3, 3>() = rotation_matrix(qvec.cast<float>());
    m.topRightCorner<3, 1>() = tvec.cast<float>();
    return m;
  }
};

struct SfmPoint {
  Eigen::Vector3f position = Eigen::Vector3f::Zero();
  std::array<std::uint8_t, 3> color{0, 0, 0};
  double reprojection_error = 0.0;
};

struct SparseReconstruction {
  std::map<std::uint32_t, CameraIntrinsics> cameras;
  std::map<std::uint32_t, ImagePose> images;
  std::vector<SfmPoint> points;
};

namespace detail {

struct ModelInfo {
  int id;
  const char* name;
  int num_params;
};

// COLMAP's camera model table.
inline constexpr ModelInfo kModels[] = {
    {0, "SIMPLE_PINHOLE", 3}, {1, "PINHOLE", 4},       {2, "SIMPLE_RADIAL", 4},
    {3, "RADIAL", 5},         {4, "OPENCV", 8},        {5, "OPENCV_FISHEYE", 8},
    {6, "FULL_OPENCV", 12},   {7, "FOV", 5},           {8, "SIMPLE_RADIAL_FISHEYE", 4},
    {9, "RADIAL_FISHEYE", 5}, {10, "THIN_PRISM_FISHEYE", 12}};

inline const ModelInfo* model_by_id(int id) {
  for (const auto& m : kModels)
    if (m.id == id) return &m;
  return nullptr;
}

inline const ModelInfo* model_by_name(const std::string& name) {
  for (const auto& m : kModels)
    if (name == m.name) return &m;
  return nullptr;
}

// Bounds-checked little-endian reader.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T read() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string read_cstring() {
    std::string s;
    while (true) {
      need(1);
      const char c = static_cast<char>(bytes_[pos_++]);
      if (c == '\0') return s;
      s.push_back(c);
    }
  }

  void skip(std::uint64_t n) {
    need(n);
    pos_ += n;
  }

  // Guards counts against the remaining payload before any allocation.
  void check_count(std::uint64_t count, std::uint64_t min_record_bytes) const {
    if (min_record_bytes > 0 && count > (bytes_.size() - pos_) / min_record_bytes)
      throw MalformedFile(what_ + ": record count " + std::to_string(count) + " exceeds file size");
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_)
      throw MalformedFile(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

// Non-comment, non-blank lines of a text file.
inline std::vector<std::string> data_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    lines.push_back(line);
  }
  return lines;
}

template <class T>
T parse_field(std::istringstream& in, const std::string& what) {
  T v;
  if (!(in >> v)) throw MalformedFile(what + ": missing or malformed field");
  if constexpr (std::is_floating_point_v<T>)
    if (!std::isfinite(v)) throw MalformedFile(what + ": non-finite value");
  return v;
}

// Reads a floating-point field, accepting "nan"/"inf" spellings so they can be
// rejected with a typed error rather than a generic parse failure.
inline double parse_real(std::istringstream& in, const std::string& what) {
  std::string tok;
  if (!(in >> tok)) throw MalformedFile(what + ": missing field");
  double v;
  try {
    std::size_t used = 0;
    v = std::stod(tok, &used);
    if (used != tok.size()) throw MalformedFile(what + ": malformed number '" + tok + "'");
  } catch (const std::invalid_argument&) {
    throw MalformedFile(what + ": malformed number '" + tok + "'");
  } catch (const std::out_of_range&) {
    throw MalformedFile(what + ": number out of range '" + tok + "'");
  }
  if (!std::isfinite(v)) throw MalformedFile(what + ": non-finite value");
  return v;
}

inline std::span<const std::uint8_t> as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary

inline std::map<std::uint32_t, CameraIntrinsics> parse_cameras_bin(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "cameras.bin");
  const auto count = r.read<std::uint64_t>();
  r.check_count(count, 24);
  std::map<std::uint32_t, CameraIntrinsics> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    CameraIntrinsics c;
    c.id = r.read<std::uint32_t>();
    const int model_id = r.read<std::int32_t>();
    const auto* model = detail::model_by_id(model_id);
    if (!model) throw UnsupportedCameraModel("cameras.bin: unknown camera model id " + std::to_string(model_id));
    c.model = model->name;
    c.width = r.read<std::uint64_t>();
    c.height = r.read<std::uint64_t>();
    for (int k = 0; k < model->num_params; ++k) c.params.push_back(r.read<double>());
    out[c.id] = std::move(c);
  }
  return out;
}

inline std::map<std::uint32_t, ImagePose> parse_images_bin(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "images.bin");
  const auto count = r.read<std::uint64_t>();
  r.check_count(count, 73);
  std::map<std::uint32_t, ImagePose> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    ImagePose im;
    im.id = r.read<std::uint32_t>();
    for (int k = 0; k < 4; ++k) im.qvec[k] = r.read<double>();
    for (int k = 0; k < 3; ++k) im.tvec[k] = r.read<double>();
    im.camera_id = r.read<std::uint32_t>();
    im.name = r.read_cstring();
    const auto n2d = r.read<std::uint64_t>();
    r.check_count(n2d, 24);
    r.skip(n2d * 24);
    if (!im.qvec.allFinite() || !im.tvec.allFinite() || im.qvec.norm() == 0.0)
      throw MalformedFile("images.bin: invalid pose for image " + std::to_string(im.id));
    im.qvec.normalize();
    out[im.id] = std::move(im);
  }
  return out;
}

inline std::vector<SfmPoint> parse_points3d_bin(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "points3D.bin");
  const auto count = r.read<std::uint64_t>();
  r.check_count(count, 43);
  std::vector<SfmPoint> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    SfmPoint p;
    r.read<std::uint64_t>();  // point id
    Eigen::Vector3d xyz;
    for (int k = 0; k < 3; ++k) xyz[k] = r.read<double>();
    for (int k = 0; k < 3; ++k) p.color[k] = r.read<std::uint8_t>();
    p.reprojection_error = r.read<double>();
    const auto track = r.read<std::uint64_t>();
    r.check_count(track, 8);
    r.skip(track * 8);
    if (!xyz.allFinite()) throw MalformedFile("points3D.bin: non-finite position");
    p.position = xyz.cast<float>();
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text

inline std::map<std::uint32_t, CameraIntrinsics> parse_cameras_txt(std::string_view text) {
  std::map<std::uint32_t, CameraIntrinsics> out;
  for (const auto& line : detail::data_lines(text)) {
    std::istringstream in(line);
    CameraIntrinsics c;
    c.id = detail::parse_field<std::uint32_t>(in, "cameras.txt");
    c.model = detail::parse_field<std::string>(in, "cameras.txt");
    const auto* model = detail::model_by_name(c.model);
    if (!model) throw UnsupportedCameraModel("cameras.txt: unknown camera model " + c.model);
    c.width = detail::parse_field<std::uint64_t>(in, "cameras.txt");
    c.height = detail::parse_field<std::uint64_t>(in, "cameras.txt");
    for (int k = 0; k < model->num_params; ++k) c.params.push_back(detail::parse_real(in, "cameras.txt"));
    out[c.id] = std::move(c);
  }
  return out;
}

/// Image records span two lines; the second (2D observations) is skipped.
inline std::map<std::uint32_t, ImagePose> parse_images_txt(std::string_view text) {
  std::map<std::uint32_t, ImagePose> out;
  // Blank observation lines are significant here, so only comments are dropped.
  std::vector<std::string> lines;
  {
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first != std::string::npos && line[first] == '#') continue;
      lines.push_back(line);
    }
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream in(lines[i]);
    ImagePose im;
    im.id = detail::parse_field<std::uint32_t>(in, "images.txt");
    for (int k = 0; k < 4; ++k) im.qvec[k] = detail::parse_real(in, "images.txt");
    for (int k = 0; k < 3; ++k) im.tvec[k] = detail::parse_real(in, "images.txt");
    im.camera_id = detail::parse_field<std::uint32_t>(in, "images.txt");
    in >> std::ws;
    std::getline(in, im.name);
    if (im.name.empty()) throw MalformedFile("images.txt: missing image name for id " + std::to_string(im.id));
    if (im.qvec.norm() == 0.0) throw MalformedFile("images.txt: zero quaternion for image " + std::to_string(im.id));
    im.qvec.normalize();
    out[im.id] = std::move(im);
    ++i;  // observation line
  }
  return out;
}

inline std::vector<SfmPoint> parse_points3d_txt(std::string_view text) {
  std::vector<SfmPoint> out;
  for (const auto& line : detail::data_lines(text)) {
    std::istringstream in(line);
    SfmPoint p;
    detail::parse_field<std::uint64_t>(in, "points3D.txt");
    for (int k = 0; k < 3; ++k) p.position[k] = static_cast<float>(detail::parse_real(in, "points3D.txt"));
    for (int k = 0; k < 3; ++k) {
      const int c = detail::parse_field<int>(in, "points3D.txt");
      if (c < 0 || c > 255) throw MalformedFile("points3D.txt: color component out of range");
      p.color[k] = static_cast<std::uint8_t>(c);
    }
    p.reprojection_error = detail::parse_real(in, "points3D.txt");
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Directories and views

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Reads <dir>/{cameras,images,points3D}.bin, falling back to .txt.
inline SparseReconstruction read_sparse_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("sparse reconstruction directory not found: " + dir.string());
  SparseReconstruction rec;
  auto pick = [&](const char* stem) -> std::pair<fs::path, bool> {
    const fs::path bin = dir / (std::string(stem) + ".bin"), txt = dir / (std::string(stem) + ".txt");
    if (fs::exists(bin)) return {bin, true};
    if (fs::exists(txt)) return {txt, false};
    throw IoError("missing " + std::string(stem) + ".bin/.txt in " + dir.string());
  };
  const auto [cam_path, cam_bin] = pick("cameras");
  const auto [img_path, img_bin] = pick("images");
  const auto [pts_path, pts_bin] = pick("points3D");
  const std::string cams = read_file(cam_path), imgs = read_file(img_path), pts = read_file(pts_path);
  rec.cameras = cam_bin ? parse_cameras_bin(detail::as_bytes(cams)) : parse_cameras_txt(cams);
  rec.images = img_bin ? parse_images_bin(detail::as_bytes(imgs)) : parse_images_txt(imgs);
  rec.points = pts_bin ? parse_points3d_bin(detail::as_bytes(pts)) : parse_points3d_txt(pts);
  for (const auto& [id, im] : rec.images)
    if (!rec.cameras.count(im.camera_id))
      throw MalformedFile("image " + im.name + " references missing camera " + std::to_string(im.camera_id));
  return rec;
}

/// Pinhole intrinsics of a camera; other models are rejected.
inline void apply_intrinsics(const CameraIntrinsics& c, CameraView& v) {
  v.width = static_cast<int>(c.width);
  v.height = static_cast<int>(c.height);
  if (c.model == "SIMPLE_PINHOLE") {
    v.focal_x = v.focal_y = static_cast<float>(c.params[0]);
    v.principal_point = Eigen::Vector2f(static_cast<float>(c.params[1]), static_cast<float>(c.params[2]));
  } else if (c.model == "PINHOLE") {
    v.focal_x = static_cast<float>(c.params[0]);
    v.focal_y = static_cast<float>(c.params[1]);
    v.principal_point = Eigen::Vector2f(static_cast<float>(c.params[2]), static_cast<float>(c.params[3]));
  } else {
    throw UnsupportedCameraModel("camera " + std::to_string(c.id) + " uses unsupported model " + c.model +
                                 " (only PINHOLE and SIMPLE_PINHOLE)");
  }
}

/// One CameraView per image, sorted by image name. Intrinsics are divided by
/// `downscale`; image paths are resolved under `image_dir`.
inline std::vector<CameraView> make_views(const SparseReconstruction& rec, const std::filesystem::path& image_dir,
                                          int downscale = 1) {
  if (downscale < 1) throw ConfigError("downscale factor must be >= 1");
  std::vector<const ImagePose*> ordered;
  for (const auto& [id, im] : rec.images) ordered.push_back(&im);
  std::sort(ordered.begin(), ordered.end(), [](const ImagePose* a, const ImagePose* b) { return a->name < b->name; });
  std::vector<CameraView> views;
  for (const ImagePose* im : ordered) {
    CameraView v;
    apply_intrinsics(rec.cameras.at(im->camera_id), v);
    if (downscale > 1) {
      v.width /= downscale;
      v.height /= downscale;
      v.focal_x /= downscale;
      v.focal_y /= downscale;
      v.principal_point /= static_cast<float>(downscale);
    }
    v.world_to_camera = im->world_to_camera();
    v.image_path = (image_dir / im->name).string();
    validate(v);
    views.push_back(std::move(v));
  }
  return views;
}

/// Every 8th view (index % 8 == 0, in name order) is held out for testing.
inline bool is_test_view(std::size_t index) { return index % 8 == 0; }

// ---------------------------------------------------------------------------
// Initialization

inline constexpr float kCoincidentScale = 1e-4f;
inline constexpr float kInitialOpacity = 0.1f;
inline constexpr float kLatentInitRange = 0.1f;

/// Mean distance to the 3 nearest other points (fewer when the cloud is
/// smaller), floored at kCoincidentScale. Uses a uniform grid with shell
/// search, exact for any point distribution.
inline std::vector<float> mean_neighbor_distance(const std::vector<SfmPoint>& points) {
  const std::size_t n = points.size();
  std::vector<float> out(n, kCoincidentScale);
  if (n < 2) return out;
  Eigen::AlignedBox3f box;
  for (const auto& p : points) box.extend(p.position);
  const Eigen::Vector3f extent = box.sizes().cwiseMax(1e-6f);
  // About two points per occupied cell for roughly uniform clouds.
  // At most 4096 cells per axis keeps cell keys within 64 bits.
  const float cell = std::max({std::cbrt(extent.prod() / (0.5f * n)), extent.maxCoeff() / 4096.0f, 1e-6f});
  auto cell_of = [&](const Eigen::Vector3f& p) {
    return ((p - box.min()) / cell).array().floor().cast<int>().matrix().eval();
  };
  const Eigen::Vector3i max_cell = cell_of(box.max());
  const Eigen::Vector3<std::int64_t> dims = (max_cell.array() + 1).cast<std::int64_t>();
  auto key = [&](const Eigen::Vector3i& c) { return (c.x() * dims.y() + c.y()) * dims.z() + c.z(); };
  auto inside = [&](const Eigen::Vector3i& c) {
    return (c.array() >= 0).all() && (c.array() <= max_cell.array()).all();
  };
  std::unordered_map<std::int64_t, std::vector<std::uint32_t>> grid;
  for (std::size_t i = 0; i < n; ++i) grid[key(cell_of(points[i].position))].push_back(static_cast<std::uint32_t>(i));
  const int max_ring = max_cell.maxCoeff() + 1;
  const std::size_t k = std::min<std::size_t>(3, n - 1);
  std::vector<float> best;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3f& p = points[i].position;
    const Eigen::Vector3i c = cell_of(p);
    best.assign(k, std::numeric_limits<float>::infinity());
    auto offer = [&](std::size_t j) {
      if (j == i) return;
      const float d = (p - points[j].position).norm();
      if (d < best.back()) {
        best.back() = d;
        std::sort(best.begin(), best.end());
      }
    };
    for (int ring = 0; ring <= max_ring; ++ring) {
      if (std::pow(2.0 * ring + 1.0, 3.0) > static_cast<double>(n)) {
        // Shell enumeration would cost more than a linear scan.
        best.assign(k, std::numeric_limits<float>::infinity());
        for (std::size_t j = 0; j < n; ++j) offer(j);
        break;
      }
      for (int dz = -ring; dz <= ring; ++dz)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dx = -ring; dx <= ring; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            const Eigen::Vector3i q = c + Eigen::Vector3i(dx, dy, dz);
            if (!inside(q)) continue;
            const auto it = grid.find(key(q));
            if (it == grid.end()) continue;
            for (std::uint32_t j : it->second) offer(j);
          }
      // Anything outside this ring is at least ring * cell away.
      if (best.back() <= ring * cell) break;
    }
    double s = 0.0;
    for (float d : best) s += d;
    out[i] = std::max(kCoincidentScale, static_cast<float>(s / k));
  }
  return out;
}

/// One Gaussian per point: isotropic scale from the neighbor distance,
/// opacity 0.1, identity rotation, latents uniform in [-0.1, 0.1].
inline GaussianCloud init_cloud(const std::vector<SfmPoint>& points, std::mt19937_64& rng,
                                int diffuse_dims = kDefaultDiffuseDims, int specular_dims = kDefaultSpecularDims,
                                int sh_coeffs = 0) {
  if (points.empty()) throw EmptyReconstruction("init_cloud: no SfM points");
  GaussianCloud cloud;
  cloud.diffuse_dims = diffuse_dims;
  cloud.specular_dims = specular_dims;
  const auto dist = mean_neighbor_distance(points);
  std::uniform_real_distribution<float> latent(-kLatentInitRange, kLatentInitRange);
  for (std::size_t i = 0; i < points.size(); ++i) {
    LatentGaussian g;
    g.position = points[i].position;
    g.log_scale.setConstant(std::log(dist[i]));
    g.opacity_logit = logit(kInitialOpacity);
    g.f_diffuse.resize(diffuse_dims);
    g.f_specular.resize(specular_dims);
    for (float& v : g.f_diffuse) v = latent(rng);
    for (float& v : g.f_specular) v = latent(rng);
    if (sh_coeffs > 0) {
      // DC terms from the point color, higher orders zero.
      g.sh_coeffs.assign(sh_coeffs, 0.0f);
      for (int c = 0; c < 3; ++c)
        g.sh_coeffs[c] = static_cast<float>((points[i].color[c] / 255.0 - 0.5) / 0.28209479177387814);
    }
    cloud.push_back(std::move(g));
  }
  return cloud;
}

}  // namespace slgs::colmap
