#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "albedo/dataset.hpp"
#include "albedo/error.hpp"
#include "albedo/image.hpp"
#include "albedo/png_io.hpp"
#include "albedo/rng.hpp"
#include "albedo/types.hpp"

namespace albedo {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

using Rgb = std::array<double, 3>;

inline constexpr double kShadingMax = kShadingScale;
inline constexpr double kAlbedoMin = 0.05;
inline constexpr double kAlbedoMax = 0.95;

enum class PrimitiveKind { disk, rectangle, polygon };

// Coordinates live in the unit square; pixel (x, y) samples ((x+0.5)/W, (y+0.5)/H).
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::disk;
  Vec2 center{0.5, 0.5};
  double radius = 0.2;
  Vec2 min{0.3, 0.3};
  Vec2 max{0.7, 0.7};
  std::vector<Vec2> vertices;
  Rgb color{0.5, 0.5, 0.5};
  std::optional<Rgb> gradient_to;
  Vec2 gradient_dir{1.0, 0.0};
  double bump = 0.0;
};

struct SpecularLobe {
  Vec2 center;
  double radius = 0.1;
  double strength = 0.5;
  double shininess = 2.0;
};

struct ShadowEllipse {
  Vec2 center;
  double rx = 0.2;
  double ry = 0.1;
  double angle = 0.0;
};

struct Nuisance {
  bool specular = false;
  bool cast_shadow = false;
  bool color_shift = false;
  std::vector<SpecularLobe> lobes;
  std::vector<ShadowEllipse> shadows;
  double shadow_depth = 0.5;
  double gamma = 1.0;
  Rgb gains{1.0, 1.0, 1.0};

  bool any() const { return specular || cast_shadow || color_shift; }
};

struct SceneSpec {
  Rgb background{0.5, 0.5, 0.5};
  std::vector<Primitive> primitives;
  Vec2 light_dir{1.0, 0.0};
  double light_elevation = 1.0;  // z component before normalization
  double light_intensity = 1.0;
  double ambient = 0.15;
  bool undulate = true;  // seed-driven height undulation under the primitives
  Nuisance nuisance;
};

// ---------------------------------------------------------------------------
// Lambertian composition

inline ImageTensor compose(const ImageTensor& albedo, const ImageTensor& shading) {
  require_same_shape(albedo, shading, "compose");
  ImageTensor out(albedo.height(), albedo.width());
  auto a = albedo.values();
  auto s = shading.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(a[i] * s[i], 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Scene geometry

namespace detail {

inline double polygon_area(const std::vector<Vec2>& v) {
  double a = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& p = v[i];
    const auto& q = v[(i + 1) % v.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

inline bool inside_polygon(const std::vector<Vec2>& v, Vec2 p) {
  bool in = false;
  for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
    if (((v[i].y > p.y) != (v[j].y > p.y)) &&
        (p.x < (v[j].x - v[i].x) * (p.y - v[i].y) / (v[j].y - v[i].y) + v[i].x)) {
      in = !in;
    }
  }
  return in;
}

inline bool inside(const Primitive& prim, Vec2 p) {
  switch (prim.kind) {
    case PrimitiveKind::disk: {
      const double dx = p.x - prim.center.x, dy = p.y - prim.center.y;
      return dx * dx + dy * dy <= prim.radius * prim.radius;
    }
    case PrimitiveKind::rectangle:
      return p.x >= prim.min.x && p.x <= prim.max.x && p.y >= prim.min.y && p.y <= prim.max.y;
    case PrimitiveKind::polygon:
      return inside_polygon(prim.vertices, p);
  }
  return false;
}

inline Vec2 centroid(const Primitive& prim) {
  switch (prim.kind) {
    case PrimitiveKind::disk: return prim.center;
    case PrimitiveKind::rectangle: return {0.5 * (prim.min.x + prim.max.x), 0.5 * (prim.min.y + prim.max.y)};
    case PrimitiveKind::polygon: {
      Vec2 c;
      for (const auto& v : prim.vertices) {
        c.x += v.x;
        c.y += v.y;
      }
      c.x /= static_cast<double>(prim.vertices.size());
      c.y /= static_cast<double>(prim.vertices.size());
      return c;
    }
  }
  return {};
}

inline double extent(const Primitive& prim) {
  switch (prim.kind) {
    case PrimitiveKind::disk: return 2.0 * prim.radius;
    case PrimitiveKind::rectangle: return std::max(prim.max.x - prim.min.x, prim.max.y - prim.min.y);
    case PrimitiveKind::polygon: {
      double lo_x = 1e9, hi_x = -1e9, lo_y = 1e9, hi_y = -1e9;
      for (const auto& v : prim.vertices) {
        lo_x = std::min(lo_x, v.x);
        hi_x = std::max(hi_x, v.x);
        lo_y = std::min(lo_y, v.y);
        hi_y = std::max(hi_y, v.y);
      }
      return std::max(hi_x - lo_x, hi_y - lo_y);
    }
  }
  return 1.0;
}

inline Rgb primitive_color(const Primitive& prim, Vec2 p) {
  if (!prim.gradient_to) return prim.color;
  const Vec2 c = centroid(prim);
  const double len = std::hypot(prim.gradient_dir.x, prim.gradient_dir.y);
  const double t = std::clamp(((p.x - c.x) * prim.gradient_dir.x + (p.y - c.y) * prim.gradient_dir.y) /
                                      (len * extent(prim)) + 0.5, 0.0, 1.0);
  Rgb out;
  for (int k = 0; k < 3; ++k) out[k] = (1.0 - t) * prim.color[k] + t * (*prim.gradient_to)[k];
  return out;
}

// Smooth bump profile in [0,1], zero slope at the primitive boundary.
inline double bump_profile(const Primitive& prim, Vec2 p) {
  switch (prim.kind) {
    case PrimitiveKind::disk: {
      const double dx = p.x - prim.center.x, dy = p.y - prim.center.y;
      const double r2 = (dx * dx + dy * dy) / (prim.radius * prim.radius);
      if (r2 >= 1.0) return 0.0;
      return (1.0 - r2) * (1.0 - r2);
    }
    case PrimitiveKind::rectangle: {
      if (!inside(prim, p)) return 0.0;
      const double u = 2.0 * (p.x - prim.min.x) / (prim.max.x - prim.min.x) - 1.0;
      const double v = 2.0 * (p.y - prim.min.y) / (prim.max.y - prim.min.y) - 1.0;
      return (1.0 - u * u) * (1.0 - u * u) * (1.0 - v * v) * (1.0 - v * v);
    }
    case PrimitiveKind::polygon:
      return 0.0;
  }
  return 0.0;
}

inline bool valid_color(const Rgb& c) {
  return std::all_of(c.begin(), c.end(), [](double v) { return v >= kAlbedoMin && v <= kAlbedoMax; });
}

struct HeightBump {
  Vec2 center;
  double sigma;
  double amplitude;
};

// Seed-driven low-frequency undulation added under the primitives.
inline std::vector<HeightBump> undulation(std::uint64_t seed) {
  Rng rng = make_rng(seed, "heightfield");
  std::vector<HeightBump> bumps(3);
  for (auto& b : bumps) {
    b.center = {uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)};
    b.sigma = uniform(rng, 0.15, 0.35);
    b.amplitude = uniform(rng, -0.12, 0.12);
  }
  return bumps;
}

inline double height_at(const SceneSpec& spec, const std::vector<HeightBump>& bumps, Vec2 p) {
  double h = 0.0;
  for (const auto& prim : spec.primitives) h += prim.bump * bump_profile(prim, p);
  for (const auto& b : bumps) {
    const double dx = p.x - b.center.x, dy = p.y - b.center.y;
    h += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
  }
  return h;
}

}  // namespace detail

inline void validate_scene(const SceneSpec& spec) {
  require(!spec.primitives.empty(), ErrorCode::invalid_argument, "scene needs at least one primitive");
  require(detail::valid_color(spec.background), ErrorCode::invalid_argument, "background albedo outside [0.05, 0.95]");
  require(spec.light_intensity >= 0.3 && spec.light_intensity <= 1.5, ErrorCode::invalid_argument,
          "light intensity outside [0.3, 1.5]");
  require(std::abs(std::hypot(spec.light_dir.x, spec.light_dir.y) - 1.0) < 1e-9, ErrorCode::invalid_argument,
          "light direction must be a unit 2-vector");
  for (const auto& prim : spec.primitives) {
    require(detail::valid_color(prim.color) && (!prim.gradient_to || detail::valid_color(*prim.gradient_to)),
            ErrorCode::invalid_argument, "primitive albedo outside [0.05, 0.95]");
    double area = 0.0;
    switch (prim.kind) {
      case PrimitiveKind::disk: area = prim.radius > 0 ? M_PI * prim.radius * prim.radius : 0.0; break;
      case PrimitiveKind::rectangle:
        area = std::max(0.0, prim.max.x - prim.min.x) * std::max(0.0, prim.max.y - prim.min.y);
        break;
      case PrimitiveKind::polygon: area = prim.vertices.size() >= 3 ? detail::polygon_area(prim.vertices) : 0.0; break;
    }
    require(area > 1e-9, ErrorCode::invalid_argument, "degenerate scene: zero-area primitive");
  }
}

inline ImageTensor render_albedo(const SceneSpec& spec, int size) {
  ImageTensor a(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Vec2 p{(x + 0.5) / size, (y + 0.5) / size};
      Rgb c = spec.background;
      for (const auto& prim : spec.primitives) {
        if (detail::inside(prim, p)) c = detail::primitive_color(prim, p);
      }
      for (int k = 0; k < 3; ++k) a.at(y, x, k) = snap16(c[k]);
    }
  }
  return a;
}

// Diffuse shading ambient + I * max(0, n.l) over the height field; grey, so
// all three channels carry the same value.
inline ImageTensor render_shading(const SceneSpec& spec, int size, std::uint64_t seed) {
  const auto bumps = spec.undulate ? detail::undulation(seed) : std::vector<detail::HeightBump>{};
  const double lnorm = std::sqrt(spec.light_dir.x * spec.light_dir.x + spec.light_dir.y * spec.light_dir.y +
                                 spec.light_elevation * spec.light_elevation);
  const double lx = spec.light_dir.x / lnorm, ly = spec.light_dir.y / lnorm, lz = spec.light_elevation / lnorm;
  const double d = 0.5 / size;
  ImageTensor s(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Vec2 p{(x + 0.5) / size, (y + 0.5) / size};
      const double hx = (detail::height_at(spec, bumps, {p.x + d, p.y}) -
                         detail::height_at(spec, bumps, {p.x - d, p.y})) / (2 * d);
      const double hy = (detail::height_at(spec, bumps, {p.x, p.y + d}) -
                         detail::height_at(spec, bumps, {p.x, p.y - d})) / (2 * d);
      const double nn = std::sqrt(hx * hx + hy * hy + 1.0);
      const double ndotl = (-hx * lx - hy * ly + lz) / nn;
      const double v = std::clamp(spec.ambient + spec.light_intensity * std::max(0.0, ndotl), 0.0, kShadingMax);
      const double q = snap16(v, kShadingMax);
      for (int k = 0; k < 3; ++k) s.at(y, x, k) = q;
    }
  }
  return s;
}

inline ScenePair render_synthetic(const SceneSpec& spec, int size, std::uint64_t seed) {
  validate_scene(spec);
  require(!spec.nuisance.any(), ErrorCode::precondition, "synthetic renders take no nuisance flags");
  require(size > 0, ErrorCode::invalid_argument, "size must be positive");
  ScenePair pair;
  pair.albedo = render_albedo(spec, size);
  pair.shading = render_shading(spec, size, seed);
  pair.rgb = compose(pair.albedo, pair.shading);
  pair.domain = DomainTag::synthetic;
  pair.id = content_id(pair.rgb);
  return pair;
}

// Nuisances applied after composition: cast shadows, then specular lobes,
// then the global gamma/gain color shift.
inline ImageTensor apply_nuisance(const ImageTensor& diffuse, const Nuisance& n) {
  ImageTensor rgb = diffuse;
  const int h = rgb.height(), w = rgb.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec2 p{(x + 0.5) / w, (y + 0.5) / h};
      double shadow = 1.0;
      if (n.cast_shadow) {
        for (const auto& e : n.shadows) {
          const double c = std::cos(e.angle), s = std::sin(e.angle);
          const double dx = p.x - e.center.x, dy = p.y - e.center.y;
          const double u = (c * dx + s * dy) / e.rx, v = (-s * dx + c * dy) / e.ry;
          const double rho = std::sqrt(u * u + v * v);
          const double t = std::clamp((rho - 0.6) / 0.4, 0.0, 1.0);
          const double inner = 1.0 - t * t * (3.0 - 2.0 * t);
          shadow *= 1.0 - n.shadow_depth * inner;
        }
      }
      double lobe = 0.0;
      if (n.specular) {
        for (const auto& l : n.lobes) {
          const double dx = p.x - l.center.x, dy = p.y - l.center.y;
          const double r2 = (dx * dx + dy * dy) / (l.radius * l.radius);
          lobe += l.strength * std::pow(std::max(0.0, 1.0 - r2), l.shininess);
        }
      }
      for (int k = 0; k < 3; ++k) {
        double v = std::clamp(rgb.at(y, x, k) * shadow + lobe, 0.0, 1.0);
        if (n.color_shift) v = std::clamp(n.gains[k] * std::pow(v, n.gamma), 0.0, 1.0);
        rgb.at(y, x, k) = v;
      }
    }
  }
  return rgb;
}

inline ScenePair render_real_like(const SceneSpec& spec, int size, std::uint64_t seed) {
  validate_scene(spec);
  require(spec.nuisance.any(), ErrorCode::precondition, "real-like renders need at least one nuisance flag");
  require(size > 0, ErrorCode::invalid_argument, "size must be positive");
  ScenePair pair;
  pair.albedo = render_albedo(spec, size);
  pair.shading = render_shading(spec, size, seed);
  pair.rgb = apply_nuisance(compose(pair.albedo, pair.shading), spec.nuisance);
  pair.domain = DomainTag::real_like;
  pair.id = content_id(pair.rgb);
  return pair;
}

// ---------------------------------------------------------------------------
// Random scene specs

inline Rgb random_color(Rng& rng) { return {uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9)}; }

inline Primitive random_primitive(Rng& rng, PrimitiveKind kind) {
  Primitive p;
  p.kind = kind;
  p.color = random_color(rng);
  if (coin(rng, 0.3)) {
    p.gradient_to = random_color(rng);
    const double a = uniform(rng, 0.0, 2.0 * M_PI);
    p.gradient_dir = {std::cos(a), std::sin(a)};
  }
  switch (kind) {
    case PrimitiveKind::disk:
      p.center = {uniform(rng, 0.25, 0.75), uniform(rng, 0.25, 0.75)};
      p.radius = uniform(rng, 0.12, 0.3);
      p.bump = uniform(rng, 0.05, 0.15);
      break;
    case PrimitiveKind::rectangle: {
      const double cx = uniform(rng, 0.25, 0.75), cy = uniform(rng, 0.25, 0.75);
      const double hw = uniform(rng, 0.1, 0.25), hh = uniform(rng, 0.1, 0.25);
      p.min = {cx - hw, cy - hh};
      p.max = {cx + hw, cy + hh};
      p.bump = uniform(rng, 0.0, 0.1);
      break;
    }
    case PrimitiveKind::polygon: {
      const double cx = uniform(rng, 0.3, 0.7), cy = uniform(rng, 0.3, 0.7);
      const int n = uniform_int(rng, 3, 5);
      const double r = uniform(rng, 0.15, 0.3);
      const double phase = uniform(rng, 0.0, 2.0 * M_PI);
      for (int i = 0; i < n; ++i) {
        const double a = phase + 2.0 * M_PI * i / n;
        p.vertices.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
      }
      break;
    }
  }
  return p;
}

enum class SceneDomain { synthetic, real_like };

inline SceneSpec random_scene_spec(Rng& rng, SceneDomain domain) {
  SceneSpec spec;
  spec.background = random_color(rng);
  const int count = uniform_int(rng, 1, 3);
  spec.primitives.push_back(random_primitive(rng, PrimitiveKind::disk));
  for (int i = 1; i < count; ++i) {
    const int k = uniform_int(rng, 0, 2);
    spec.primitives.push_back(random_primitive(rng, static_cast<PrimitiveKind>(k)));
  }
  const double a = uniform(rng, 0.0, 2.0 * M_PI);
  spec.light_dir = {std::cos(a), std::sin(a)};
  spec.light_elevation = uniform(rng, 0.8, 1.6);
  spec.light_intensity = uniform(rng, 0.7, 1.4);
  spec.ambient = uniform(rng, 0.1, 0.25);

  if (domain == SceneDomain::real_like) {
    auto& n = spec.nuisance;
    do {
      n.specular = coin(rng, 0.55);
      n.cast_shadow = coin(rng, 0.55);
      n.color_shift = coin(rng, 0.45);
    } while (!n.any());
    const int lobes = uniform_int(rng, 1, 2);
    for (int i = 0; i < lobes; ++i) {
      const Vec2 c = detail::centroid(spec.primitives[static_cast<std::size_t>(i) % spec.primitives.size()]);
      n.lobes.push_back({{c.x + uniform(rng, -0.08, 0.08), c.y + uniform(rng, -0.08, 0.08)},
                         uniform(rng, 0.1, 0.2), uniform(rng, 0.35, 0.7), uniform(rng, 1.5, 3.0)});
    }
    const int shadows = uniform_int(rng, 1, 2);
    for (int i = 0; i < shadows; ++i) {
      n.shadows.push_back({{uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)}, uniform(rng, 0.15, 0.35),
                           uniform(rng, 0.08, 0.2), uniform(rng, 0.0, M_PI)});
    }
    n.shadow_depth = uniform(rng, 0.35, 0.65);
    n.gamma = std::exp(uniform(rng, std::log(0.8), std::log(1.25)));
    for (auto& g : n.gains) g = uniform(rng, 0.85, 1.15);
  }
  return spec;
}

// Generates `count` scenes; scene k uses streams derived from (seed, k).
inline std::vector<ScenePair> generate_dataset(SceneDomain domain, int count, int size, std::uint64_t seed) {
  std::vector<ScenePair> out;
  out.reserve(static_cast<std::size_t>(count));
  const char* tag = domain == SceneDomain::synthetic ? "synthetic-spec" : "real-like-spec";
  for (int k = 0; k < count; ++k) {
    Rng rng = make_rng(seed, tag, static_cast<std::uint64_t>(k));
    const auto spec = random_scene_spec(rng, domain);
    const auto render_seed = derive_seed(seed, "render", static_cast<std::uint64_t>(k));
    out.push_back(domain == SceneDomain::synthetic ? render_synthetic(spec, size, render_seed)
                                                   : render_real_like(spec, size, render_seed));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Illuminance-aware global augmentation

inline constexpr double kAugmentKnee = 0.9;

// Global gain with a highlight-preserving soft clip: linear up to the knee,
// then 1 - (1 - u)^p compresses [knee, gain] into [knee, 1] with slope
// continuity at the knee. gain <= 1 never reaches the compressed branch.
inline double augment_value(double v, double gain) {
  const double scaled = gain * v;
  if (scaled <= kAugmentKnee || gain <= 1.0) return scaled;
  const double top = gain;  // image of v = 1
  const double u = std::clamp((scaled - kAugmentKnee) / (top - kAugmentKnee), 0.0, 1.0);
  const double p = (top - kAugmentKnee) / (1.0 - kAugmentKnee);
  return kAugmentKnee + (1.0 - kAugmentKnee) * (1.0 - std::pow(1.0 - u, p));
}

inline ImageTensor illuminance_augment(const ImageTensor& image, double gain) {
  require(gain >= 0.5 && gain <= 1.5, ErrorCode::invalid_argument, "augmentation gain outside [0.5, 1.5]");
  ImageTensor out = image;
  for (double& v : out.values()) v = augment_value(v, gain);
  return out;
}

inline ImageTensor illuminance_augment(const ImageTensor& image, Rng& rng) {
  return illuminance_augment(image, uniform(rng, 0.5, 1.5));
}

}  // namespace albedo
