// Image/mask samples: directory loading, synthetic shadow scenes, flipping.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "dsc/png_io.hpp"
#include "dsc/rng.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

struct Sample {
  Tensor<float> image;  // (1, 3, H, W), values in [0, 1]
  Tensor<float> mask;   // (1, 1, H, W), values in {0, 1}
  std::string id;
  std::string provenance;  // source path or synthesis seed

  [[nodiscard]] double shadow_fraction() const {
    double s = 0;
    for (float v : mask.data()) s += v;
    return mask.empty() ? 0.0 : s / static_cast<double>(mask.size());
  }
};

inline void validate_sample(const Sample& s) {
  const Shape& is = s.image.shape();
  const Shape& ms = s.mask.shape();
  if (is.n != 1 || is.c != 3 || ms.n != 1 || ms.c != 1 || is.h != ms.h || is.w != ms.w) {
    throw ConfigError("sample '" + s.id + "': image " + is.str() + " and mask " + ms.str() +
                      " do not pair");
  }
  for (float v : s.image.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("sample '" + s.id + "': image out of [0,1]");
  }
  for (float v : s.mask.data()) {
    if (v != 0.0f && v != 1.0f) throw ConfigError("sample '" + s.id + "': mask not binary");
  }
}

// ---------------------------------------------------------------------------
// Tensor <-> 8-bit conversions

inline Tensor<float> image_from_png(const Image8& img) {
  Tensor<float> t({1, 3, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        t.at(0, c, y, x) = static_cast<float>(img.pixels[(y * img.width + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return t;
}

/// Gray value >= 128 is shadow.
inline Tensor<float> mask_from_png(const Image8& img) {
  Tensor<float> t({1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i] >= 128 ? 1.0f : 0.0f;
  return t;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Probability to byte such that p >= 0.5 iff byte >= 128.
inline std::uint8_t probability_to_byte(double p) {
  const long b = std::lround(std::clamp(p, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(p >= 0.5 ? std::max(b, 128L) : std::min(b, 127L));
}

inline Image8 image_to_png(const Tensor<float>& t) {
  const Shape& s = t.shape();
  Image8 img{s.w, s.h, 3, std::vector<std::uint8_t>(s.w * s.h * 3)};
  for (std::size_t y = 0; y < s.h; ++y) {
    for (std::size_t x = 0; x < s.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.pixels[(y * s.w + x) * 3 + c] = to_byte(t.at(0, c, y, x));
      }
    }
  }
  return img;
}

inline Image8 mask_to_png(const Tensor<float>& m) {
  Image8 img{m.shape().w, m.shape().h, 1, std::vector<std::uint8_t>(m.size())};
  for (std::size_t i = 0; i < m.size(); ++i) img.pixels[i] = m[i] >= 0.5f ? 255 : 0;
  return img;
}

inline Image8 probability_to_png(const Tensor<float>& p) {
  Image8 img{p.shape().w, p.shape().h, 1, std::vector<std::uint8_t>(p.size())};
  for (std::size_t i = 0; i < p.size(); ++i) img.pixels[i] = probability_to_byte(p[i]);
  return img;
}

inline Tensor<float> probability_from_png(const Image8& img) {
  Tensor<float> t({1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    t[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Directory datasets: <dir>/images/NAME.png with <dir>/masks/NAME.png

namespace detail {
inline std::set<std::string> png_stems(const std::filesystem::path& dir) {
  std::set<std::string> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.insert(e.path().stem().string());
  }
  return out;
}
}  // namespace detail

inline Sample load_sample(const std::filesystem::path& image_path,
                          const std::filesystem::path& mask_path, std::string id) {
  Sample s{image_from_png(read_png(image_path, 3)), mask_from_png(read_png(mask_path, 1)),
           std::move(id), image_path.string()};
  if (s.image.shape().h != s.mask.shape().h || s.image.shape().w != s.mask.shape().w) {
    throw IoError("size mismatch between " + image_path.string() + " and " + mask_path.string());
  }
  return s;
}

/// Pairs sorted by file name. A directory with neither images/ nor masks/
/// yields an empty list.
inline std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  const auto images = detail::png_stems(dir / "images");
  const auto masks = detail::png_stems(dir / "masks");
  for (const auto& m : masks) {
    if (!images.contains(m)) {
      throw IoError("missing image for mask: " + (dir / "images" / (m + ".png")).string());
    }
  }
  std::vector<Sample> out;
  for (const auto& name : images) {
    const auto mask_path = dir / "masks" / (name + ".png");
    if (!masks.contains(name)) throw IoError("missing mask: " + mask_path.string());
    out.push_back(load_sample(dir / "images" / (name + ".png"), mask_path, name));
  }
  return out;
}

inline void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const auto& s : samples) {
    write_png(dir / "images" / (s.id + ".png"), image_to_png(s.image));
    write_png(dir / "masks" / (s.id + ".png"), mask_to_png(s.mask));
  }
}

// ---------------------------------------------------------------------------
// Horizontal flip

template <typename T>
Tensor<T> hflip(const Tensor<T>& t) {
  const Shape& s = t.shape();
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t x = 0; x < s.w; ++x) out.at(n, c, y, s.w - 1 - x) = t.at(n, c, y, x);
      }
    }
  }
  return out;
}

inline Sample hflip(const Sample& s) {
  constexpr std::string_view suffix = "_hflip";
  std::string id = s.id;
  if (id.size() >= suffix.size() && id.compare(id.size() - suffix.size(), suffix.size(), suffix) == 0) {
    id.resize(id.size() - suffix.size());
  } else {
    id += suffix;
  }
  return {hflip(s.image), hflip(s.mask), std::move(id), s.provenance};
}

// ---------------------------------------------------------------------------
// Synthetic shadow scenes

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t count = 10;
  std::size_t size = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 4;
  double darkening_min = 0.25;  // multiplicative factor inside a shadow
  double darkening_max = 0.6;
  double softness_min = 0.5;  // edge ramp half-width in pixels
  double softness_max = 2.5;
  double min_density = 0.02;
  double max_density = 0.40;
  std::size_t max_attempts = 200;
  std::string id_prefix = "synth";

  void validate() const {
    if (size < 16 || (size & (size - 1)) != 0) {
      throw ConfigError("synth size must be a power of two >= 16");
    }
    if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("synth shape range invalid");
    if (!(darkening_min > 0.0 && darkening_max < 1.0 && darkening_min <= darkening_max)) {
      throw ConfigError("synth darkening factors must satisfy 0 < min <= max < 1");
    }
    if (!(softness_min >= 0.0 && softness_min <= softness_max)) {
      throw ConfigError("synth softness range invalid");
    }
    if (!(min_density >= 0.0 && min_density < max_density && max_density <= 1.0)) {
      throw ConfigError("synth density range invalid");
    }
    if (max_attempts == 0) throw ConfigError("synth max_attempts must be positive");
  }
};

namespace detail {

struct Shape2d {
  bool ellipse = true;
  double cx = 0, cy = 0, a = 1, b = 1, angle = 0;
  std::vector<std::array<double, 2>> poly;  // counter-clockwise vertices

  /// Approximate signed distance in pixels, negative inside.
  [[nodiscard]] double distance(double x, double y) const {
    if (ellipse) {
      const double dx = x - cx, dy = y - cy;
      const double u = std::cos(angle) * dx + std::sin(angle) * dy;
      const double v = -std::sin(angle) * dx + std::cos(angle) * dy;
      const double r = std::sqrt((u * u) / (a * a) + (v * v) / (b * b));
      return (r - 1.0) * std::min(a, b);
    }
    double d = -1e30;
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const auto& p = poly[i];
      const auto& q = poly[(i + 1) % poly.size()];
      const double ex = q[0] - p[0], ey = q[1] - p[1];
      const double len = std::hypot(ex, ey);
      // outward normal of a counter-clockwise edge (y down): (ey, -ex)
      d = std::max(d, ((x - p[0]) * ey - (y - p[1]) * ex) / len);
    }
    return d;
  }
};

inline Shape2d random_shape(Rng& rng, double size) {
  Shape2d s;
  s.ellipse = rng.bernoulli(0.5);
  s.cx = rng.uniform(0.1, 0.9) * size;
  s.cy = rng.uniform(0.1, 0.9) * size;
  s.a = rng.uniform(0.08, 0.28) * size;
  s.b = rng.uniform(0.08, 0.28) * size;
  s.angle = rng.uniform(0.0, 3.14159265358979323846);
  if (!s.ellipse) {
    const auto n = static_cast<std::size_t>(rng.integer(3, 7));
    std::vector<double> angles(n);
    for (auto& t : angles) t = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    std::sort(angles.begin(), angles.end());
    // Points on an ellipse in angular order form a convex polygon.
    for (double t : angles) {
      const double u = s.a * std::cos(t), v = s.b * std::sin(t);
      s.poly.push_back({s.cx + std::cos(s.angle) * u - std::sin(s.angle) * v,
                        s.cy + std::sin(s.angle) * u + std::cos(s.angle) * v});
    }
    // Orientation check; flip to counter-clockwise in image coordinates.
    double area = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = s.poly[i];
      const auto& q = s.poly[(i + 1) % n];
      area += p[0] * q[1] - q[0] * p[1];
    }
    if (area < 0) std::reverse(s.poly.begin(), s.poly.end());
  }
  return s;
}

// Smooth random field on a coarse grid, bilinearly interpolated.
inline std::vector<double> value_noise(Rng& rng, std::size_t size, std::size_t cell) {
  const std::size_t g = size / cell + 2;
  std::vector<double> grid(g * g);
  for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(cell);
      const double fx = static_cast<double>(x) / static_cast<double>(cell);
      const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
      const double ty = fy - static_cast<double>(iy), tx = fx - static_cast<double>(ix);
      const double top = grid[iy * g + ix] + tx * (grid[iy * g + ix + 1] - grid[iy * g + ix]);
      const double bot =
          grid[(iy + 1) * g + ix] + tx * (grid[(iy + 1) * g + ix + 1] - grid[(iy + 1) * g + ix]);
      out[y * size + x] = top + ty * (bot - top);
    }
  }
  return out;
}

}  // namespace detail

/// One synthetic scene from its own PRNG stream (seed, index).
inline Sample synthesize_one(const SynthConfig& cfg, std::size_t index) {
  Rng rng = Rng::stream(cfg.seed, index);
  const std::size_t n = cfg.size;
  const double size = static_cast<double>(n);
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    // Background: colour gradient between random corner colours plus texture.
    std::array<std::array<double, 3>, 4> corner{};
    for (auto& c : corner) {
      for (auto& v : c) v = rng.uniform(0.45, 0.95);
    }
    const auto coarse = detail::value_noise(rng, n, 8);
    const double coarse_amp = rng.uniform(0.03, 0.10);
    const double fine_amp = rng.uniform(0.01, 0.05);

    const auto shapes = static_cast<std::size_t>(rng.integer(
        static_cast<std::int64_t>(cfg.min_shapes), static_cast<std::int64_t>(cfg.max_shapes)));
    std::vector<detail::Shape2d> geo;
    for (std::size_t k = 0; k < shapes; ++k) geo.push_back(detail::random_shape(rng, size));
    const double factor = rng.uniform(cfg.darkening_min, cfg.darkening_max);
    const double soft = rng.uniform(cfg.softness_min, cfg.softness_max);

    Sample s{Tensor<float>({1, 3, n, n}), Tensor<float>({1, 1, n, n}), "", ""};
    std::size_t shadow = 0;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double d = 1e30;
        for (const auto& g : geo) d = std::min(d, g.distance(px, py));
        const double coverage =
            soft > 0 ? std::clamp(0.5 - d / (2.0 * soft), 0.0, 1.0) : (d <= 0 ? 1.0 : 0.0);
        const double shade = 1.0 - (1.0 - factor) * coverage;
        const double u = static_cast<double>(x) / (size - 1), v = static_cast<double>(y) / (size - 1);
        const double texture = coarse_amp * coarse[y * n + x] + fine_amp * rng.uniform(-1.0, 1.0);
        for (std::size_t c = 0; c < 3; ++c) {
          const double top = corner[0][c] + u * (corner[1][c] - corner[0][c]);
          const double bot = corner[2][c] + u * (corner[3][c] - corner[2][c]);
          const double base = std::clamp(top + v * (bot - top) + texture, 0.0, 1.0);
          s.image.at(0, c, y, x) = static_cast<float>(base * shade);
        }
        // Labelled shadow where at least half of the full darkening applies.
        const bool is_shadow = coverage >= 0.5;
        s.mask.at(0, 0, y, x) = is_shadow ? 1.0f : 0.0f;
        shadow += is_shadow ? 1 : 0;
      }
    }
    const double density = static_cast<double>(shadow) / static_cast<double>(n * n);
    if (density < cfg.min_density || density > cfg.max_density) continue;
    char id[32];
    std::snprintf(id, sizeof(id), "%04zu", index);
    s.id = cfg.id_prefix + "_" + id;
    s.provenance = "synth:seed=" + std::to_string(cfg.seed) + ",index=" + std::to_string(index);
    return s;
  }
  throw ConfigError("synthesis could not meet the shadow density range after " +
                    std::to_string(cfg.max_attempts) + " attempts");
}

inline std::vector<Sample> synthesize(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Sample> out;
  out.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) out.push_back(synthesize_one(cfg, i));
  return out;
}

}  // namespace dsc
