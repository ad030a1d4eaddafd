#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "nmil/bag.hpp"
#include "nmil/tensor.hpp"

namespace nmil::synth {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, Vec3 a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(Vec3 a, Vec3 b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(Vec3 a) { return (1.0 / std::sqrt(dot(a, a))) * a; }

/// Rotation about the vertical (z) axis.
inline Vec3 rotate_z(Vec3 v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]};
}

enum class PrimitiveKind { box, ellipsoid, wedge };

/// Axis-aligned primitive in object coordinates (x right, y toward the front, z up).
/// A wedge is its bounding box cut by the plane z/hz + y/hy <= 0 (sloping down toward +y).
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::box;
  Vec3 center{};
  Vec3 half{1, 1, 1};
  Vec3 color{1, 1, 1};
};

/// One object: class layout plus per-sample jitter.
struct ShapeSpec {
  std::size_t class_id = 0;
  std::array<std::size_t, 3> layout{};  // attribute per perspective (top, front, back)
  double scale = 1.0;
  double yaw = 0.0;  // radians, about the vertical axis
  std::vector<Primitive> primitives;
};

enum class Perspective { top, front, back };

inline const char* to_string(Perspective p) {
  switch (p) {
    case Perspective::top: return "top";
    case Perspective::front: return "front";
    case Perspective::back: return "back";
  }
  return "?";
}

inline constexpr std::array<Perspective, 3> kPerspectives{Perspective::top, Perspective::front, Perspective::back};

struct ViewSpec {
  Perspective perspective = Perspective::front;
  double offset_degrees = 0.0;  // 0 or 30
};

struct RenderOptions {
  std::size_t size = 38;       // square source image extent
  double half_extent = 1.25;   // world units covered from the image center to an edge
  double noise = 0.02;         // uniform pixel noise amplitude
  Vec3 background{0.08, 0.08, 0.1};
};

/// Layouts available per class: (top, front, back) attributes. The first eight
/// span {0,1}^3 so every perspective carries signal at the desk default.
inline const std::vector<std::array<std::size_t, 3>>& class_layouts() {
  static const std::vector<std::array<std::size_t, 3>> table{
      {0, 0, 0}, {1, 1, 0}, {0, 1, 1}, {1, 0, 1}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1},
      {1, 1, 1}, {2, 0, 1}, {0, 2, 0}, {1, 2, 2}, {2, 1, 0}, {2, 2, 1},
  };
  return table;
}

inline std::size_t max_classes() { return class_layouts().size(); }

namespace detail {

inline Vec3 jitter_color(Vec3 base, Rng& rng, double amount) {
  Vec3 c;
  for (int i = 0; i < 3; ++i) c[i] = std::clamp(base[i] + uniform(rng, -amount, amount), 0.0, 1.0);
  return c;
}

// Thin decal on a face; `pos` selects the placement on the face for the attribute value.
inline Primitive face_feature(std::size_t value, int face, const Vec3& body_half, Rng& rng) {
  constexpr double depth = 0.03;
  Primitive p;
  static const Vec3 feature_colors[3] = {{0.9, 0.25, 0.2}, {0.2, 0.75, 0.3}, {0.25, 0.4, 0.95}};
  // colour is drawn independently of the attribute; only placement and form encode it
  p.color = jitter_color(feature_colors[uniform_index(rng, 3)], rng, 0.12);
  if (face == 0) {  // top face: features laid on z = +hz
    const double z = body_half[2] + depth;
    switch (value) {
      case 0: p = {PrimitiveKind::box, {-0.28, 0.0, z}, {0.22, 0.3, depth}, p.color}; break;
      case 1: p = {PrimitiveKind::ellipsoid, {0.28, 0.0, z}, {0.24, 0.3, depth}, p.color}; break;
      default: p = {PrimitiveKind::wedge, {0.0, 0.18, z}, {0.5, 0.14, depth}, p.color}; break;
    }
    return p;
  }
  const double sign = face == 1 ? 1.0 : -1.0;  // front (+y) or back (-y)
  const double y = sign * (body_half[1] + depth);
  switch (value) {
    case 0: p = {PrimitiveKind::box, {-0.3, y, 0.1}, {0.22, depth, 0.2}, p.color}; break;
    case 1: p = {PrimitiveKind::ellipsoid, {0.3, y, -0.05}, {0.24, depth, 0.24}, p.color}; break;
    default: p = {PrimitiveKind::box, {0.0, y, 0.18}, {0.5, depth, 0.1}, p.color}; break;
  }
  return p;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal{};
  Vec3 color{};
};

// Ray p(t) = o + t d against a convex set of half-spaces n·p <= c.
inline bool clip_halfspaces(const Vec3& o, const Vec3& d, const std::vector<std::pair<Vec3, double>>& planes,
                            double& t_hit, Vec3& n_hit) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  Vec3 n0{};
  for (const auto& [n, c] : planes) {
    const double nd = dot(n, d), no = dot(n, o);
    if (std::abs(nd) < 1e-15) {
      if (no > c) return false;
      continue;
    }
    const double t = (c - no) / nd;
    if (nd < 0) {
      if (t > t0) {
        t0 = t;
        n0 = n;
      }
    } else {
      t1 = std::min(t1, t);
    }
  }
  if (t0 > t1 || t1 < 0) return false;
  t_hit = t0;
  n_hit = n0;
  return true;
}

inline bool intersect(const Primitive& p, const Vec3& o, const Vec3& d, double& t, Vec3& n) {
  // move into the primitive's unit frame
  const Vec3 lo{(o[0] - p.center[0]) / p.half[0], (o[1] - p.center[1]) / p.half[1], (o[2] - p.center[2]) / p.half[2]};
  const Vec3 ld{d[0] / p.half[0], d[1] / p.half[1], d[2] / p.half[2]};
  Vec3 ln{};
  switch (p.kind) {
    case PrimitiveKind::ellipsoid: {
      const double a = dot(ld, ld), b = 2 * dot(lo, ld), c = dot(lo, lo) - 1;
      const double disc = b * b - 4 * a * c;
      if (disc < 0) return false;
      t = (-b - std::sqrt(disc)) / (2 * a);
      if (t < 0) return false;
      ln = lo + t * ld;
      break;
    }
    case PrimitiveKind::box:
    case PrimitiveKind::wedge: {
      std::vector<std::pair<Vec3, double>> planes{{{1, 0, 0}, 1}, {{-1, 0, 0}, 1}, {{0, 1, 0}, 1},
                                                  {{0, -1, 0}, 1}, {{0, 0, 1}, 1}, {{0, 0, -1}, 1}};
      if (p.kind == PrimitiveKind::wedge) planes.push_back({normalized({0, 1, 1}), 0.0});
      if (!clip_halfspaces(lo, ld, planes, t, ln)) return false;
      break;
    }
  }
  // normals transform with the inverse-transpose of the scaling
  n = normalized({ln[0] / p.half[0], ln[1] / p.half[1], ln[2] / p.half[2]});
  return true;
}

struct Camera {
  Vec3 forward, right, up;
};

inline Camera camera_for(const ViewSpec& v) {
  const double off = v.offset_degrees * std::numbers::pi / 180.0;
  switch (v.perspective) {
    case Perspective::top: {
      // looking straight down; the offset spins the view about the vertical axis
      const Vec3 f{0, 0, -1};
      const Vec3 u = rotate_z({0, 1, 0}, off);
      return {f, cross(f, u), u};
    }
    case Perspective::front:
    case Perspective::back: {
      const Vec3 f = rotate_z(v.perspective == Perspective::front ? Vec3{0, -1, 0} : Vec3{0, 1, 0}, off);
      const Vec3 u{0, 0, 1};
      return {f, cross(f, u), u};
    }
  }
  return {};
}

}  // namespace detail

/// Builds a jittered object of the given class.
inline ShapeSpec make_shape(std::size_t class_id, Rng& rng) {
  if (class_id >= max_classes()) throw std::out_of_range("class id " + std::to_string(class_id) + " has no layout");
  ShapeSpec s;
  s.class_id = class_id;
  s.layout = class_layouts()[class_id];
  s.scale = uniform(rng, 0.88, 1.08);
  s.yaw = uniform(rng, -12.0, 12.0) * std::numbers::pi / 180.0;
  const Vec3 half{0.62 * uniform(rng, 0.93, 1.07), 0.45 * uniform(rng, 0.93, 1.07), 0.36 * uniform(rng, 0.93, 1.07)};
  s.primitives.push_back({PrimitiveKind::box, {0, 0, 0}, half, detail::jitter_color({0.6, 0.6, 0.55}, rng, 0.1)});
  for (int face = 0; face < 3; ++face) {
    s.primitives.push_back(detail::face_feature(s.layout[static_cast<std::size_t>(face)], face, half, rng));
  }
  return s;
}

/// Reflection z -> -z of the whole object.
inline ShapeSpec mirrored(const ShapeSpec& s) {
  ShapeSpec m = s;
  for (Primitive& p : m.primitives) {
    p.center[2] = -p.center[2];
    if (p.kind == PrimitiveKind::wedge) throw std::invalid_argument("mirrored: wedges are not mirror-closed");
  }
  return m;
}

/// Orthographic flat-shaded rendering; values quantized to multiples of 1/255.
inline Tensor render_view(const ShapeSpec& shape, const ViewSpec& view, std::uint64_t seed,
                          const RenderOptions& opts = {}) {
  const detail::Camera cam = detail::camera_for(view);
  const Vec3 key = normalized({0.35, 0.5, 0.8});
  const std::size_t n = opts.size;
  Tensor img({3, n, n});
  Rng rng(seed);
  for (std::size_t py = 0; py < n; ++py) {
    for (std::size_t px = 0; px < n; ++px) {
      const double u = ((static_cast<double>(px) + 0.5) / static_cast<double>(n) * 2.0 - 1.0) * opts.half_extent;
      const double v = (1.0 - (static_cast<double>(py) + 0.5) / static_cast<double>(n) * 2.0) * opts.half_extent;
      Vec3 origin = u * cam.right + v * cam.up + (-10.0) * cam.forward;
      // into object coordinates: undo yaw, then scale
      Vec3 o = (1.0 / shape.scale) * rotate_z(origin, -shape.yaw);
      Vec3 d = (1.0 / shape.scale) * rotate_z(cam.forward, -shape.yaw);
      detail::Hit best;
      for (const Primitive& p : shape.primitives) {
        double t;
        Vec3 nrm;
        if (detail::intersect(p, o, d, t, nrm) && t < best.t) best = {t, nrm, p.color};
      }
      Vec3 c = opts.background;
      if (std::isfinite(best.t)) {
        const Vec3 nw = rotate_z(best.normal, shape.yaw);
        const double light = 0.35 + 0.45 * std::abs(dot(nw, cam.forward)) + 0.2 * std::max(0.0, dot(nw, key));
        c = light * best.color;
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double noisy = c[ch] + (opts.noise > 0 ? uniform(rng, -opts.noise, opts.noise) : 0.0);
        img.at(ch, py, px) = std::round(std::clamp(noisy, 0.0, 1.0) * 255.0) / 255.0;
      }
    }
  }
  return img;
}

struct DatasetOptions {
  std::size_t num_bags = 4000;
  std::size_t num_classes = 8;
  RenderOptions render;
};

/// Bags of three sub-bags (top, front, back), each holding a direct view and a 30° offset view.
inline std::vector<Bag> generate_dataset(const DatasetOptions& opts, std::uint64_t seed) {
  if (opts.num_classes == 0 || opts.num_classes > max_classes()) {
    throw std::invalid_argument("generate_dataset: num_classes must be in [1, " + std::to_string(max_classes()) + "]");
  }
  std::vector<std::size_t> labels(opts.num_bags);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % opts.num_classes;
  Rng label_rng(derive_seed(seed, "labels"));
  shuffle(labels, label_rng);
  std::vector<Bag> bags;
  bags.reserve(opts.num_bags);
  for (std::size_t i = 0; i < opts.num_bags; ++i) {
    Rng rng(derive_seed(seed, "shape", i));
    const ShapeSpec shape = make_shape(labels[i], rng);
    Bag bag{i, labels[i], {}};
    for (std::size_t j = 0; j < kPerspectives.size(); ++j) {
      SubBag sb{j, {}};
      for (double off : {0.0, 30.0}) {
        const ViewSpec view{kPerspectives[j], off};
        const std::uint64_t view_seed = derive_seed(seed, "render", i * 8 + j * 2 + (off > 0 ? 1 : 0));
        sb.images.push_back({"b" + std::to_string(i) + "_" + to_string(view.perspective) + "_" +
                                 std::to_string(static_cast<int>(off)),
                             std::make_shared<const Tensor>(render_view(shape, view, view_seed, opts.render))});
      }
      bag.sub_bags.push_back(std::move(sb));
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

enum class DropMethod { none, random, most_relevant, least_relevant };

inline const char* to_string(DropMethod m) {
  switch (m) {
    case DropMethod::none: return "none";
    case DropMethod::random: return "random";
    case DropMethod::most_relevant: return "most_relevant";
    case DropMethod::least_relevant: return "least_relevant";
  }
  return "?";
}

inline DropMethod parse_drop_method(const std::string& s) {
  for (DropMethod m : {DropMethod::none, DropMethod::random, DropMethod::most_relevant, DropMethod::least_relevant}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown drop method '" + s + "'");
}

/// Correct-class probability of image `image` in sub-bag `subbag` of `bag`.
using RelevanceFn = std::function<double(const Bag& bag, std::size_t subbag, std::size_t image)>;

struct DropRecord {
  std::size_t bag_id;
  std::size_t subbag;
  std::string image_id;
  double relevance;  // NaN for random dropping
};

struct DropResult {
  std::vector<Bag> bags;
  std::vector<DropRecord> log;
};

inline constexpr std::size_t kMaxDropped = 4;

/// Removes k ~ Uniform{0..4} instances per bag, chosen by the given method.
inline DropResult drop_instances(const std::vector<Bag>& bags, DropMethod method, const RelevanceFn& relevance,
                                 std::uint64_t seed) {
  if ((method == DropMethod::most_relevant || method == DropMethod::least_relevant) && !relevance) {
    throw std::invalid_argument("drop_instances: relevance dropping needs pretrained networks");
  }
  DropResult res;
  res.bags.reserve(bags.size());
  for (const Bag& bag : bags) {
    Rng rng(derive_seed(seed, "drop", bag.id));
    struct Slot {
      std::size_t subbag, image;
      double score;
    };
    std::vector<Slot> slots;
    for (std::size_t j = 0; j < bag.sub_bags.size(); ++j) {
      for (std::size_t k = 0; k < bag.sub_bags[j].images.size(); ++k) {
        slots.push_back({j, k, std::numeric_limits<double>::quiet_NaN()});
      }
    }
    std::size_t k = method == DropMethod::none ? 0 : uniform_index(rng, kMaxDropped + 1);
    if (k >= slots.size()) throw BagError("drop_instances: bag " + std::to_string(bag.id) + " would become empty");
    if (method == DropMethod::random) {
      shuffle(slots, rng);
    } else if (method != DropMethod::none) {
      for (Slot& s : slots) s.score = relevance(bag, s.subbag, s.image);
      const bool most = method == DropMethod::most_relevant;
      // slots are generated in instance-index order, so stable_sort breaks ties by index
      std::stable_sort(slots.begin(), slots.end(), [most](const Slot& a, const Slot& b) {
        return most ? a.score > b.score : a.score < b.score;
      });
    }
    std::vector<std::vector<bool>> drop(bag.sub_bags.size());
    for (std::size_t j = 0; j < bag.sub_bags.size(); ++j) drop[j].assign(bag.sub_bags[j].images.size(), false);
    for (std::size_t i = 0; i < k; ++i) {
      drop[slots[i].subbag][slots[i].image] = true;
      res.log.push_back({bag.id, slots[i].subbag, bag.sub_bags[slots[i].subbag].images[slots[i].image].id,
                         slots[i].score});
    }
    Bag out{bag.id, bag.label, {}};
    for (std::size_t j = 0; j < bag.sub_bags.size(); ++j) {
      SubBag sb{j, {}};
      for (std::size_t q = 0; q < bag.sub_bags[j].images.size(); ++q) {
        if (!drop[j][q]) sb.images.push_back(bag.sub_bags[j].images[q]);
      }
      out.sub_bags.push_back(std::move(sb));
    }
    res.bags.push_back(std::move(out));
  }
  return res;
}

}  // namespace nmil::synth
