#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nmil/autograd.hpp"
#include "nmil/bag.hpp"
#include "nmil/layers.hpp"
#include "nmil/nested_net.hpp"
#include "nmil/tensor.hpp"

namespace nmil {

class FillError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class FillStrategy { reproduction, random_fill, optimization };

inline const char* to_string(FillStrategy s) {
  switch (s) {
    case FillStrategy::reproduction: return "reproduction";
    case FillStrategy::random_fill: return "random_fill";
    case FillStrategy::optimization: return "optimization";
  }
  return "?";
}

inline FillStrategy parse_fill_strategy(const std::string& s) {
  if (s == "reproduction") return FillStrategy::reproduction;
  if (s == "random_fill") return FillStrategy::random_fill;
  if (s == "optimization") return FillStrategy::optimization;
  throw std::invalid_argument("unknown fill strategy '" + s + "'");
}

enum class InversionMethod { adam, sgd };

inline const char* to_string(InversionMethod m) { return m == InversionMethod::adam ? "adam" : "sgd"; }

inline InversionMethod parse_inversion_method(const std::string& s) {
  if (s == "adam") return InversionMethod::adam;
  if (s == "sgd") return InversionMethod::sgd;
  throw std::invalid_argument("unknown inversion method '" + s + "'");
}

struct InversionOptions {
  InversionMethod method = InversionMethod::adam;
  std::size_t max_iters = 2000;
  double lr = 0.03;
  double lr_growth = 1.25;  // sgd: applied after each accepted step
  double beta1 = 0.9;
  double beta2 = 0.999;
  double tolerance = 0.02;  // relative residual ||C(x)-mu|| / ||mu||
  // Stop once the best residual improved by less than plateau_rel (relative)
  // over the last plateau_window iterations; 0 disables.
  std::size_t plateau_window = 0;
  double plateau_rel = 1e-3;
  std::size_t max_nonfinite = 50;
};

struct FillPolicy {
  FillStrategy strategy = FillStrategy::reproduction;
  CropKind crop = CropKind::center;
  // When false, the optimization strategy skips max exact fill: each source
  // image contributes one instance and every remaining slot gets the neutral instance.
  bool replicate_before_neutral = true;
  InversionOptions inversion;
};

// ---------------------------------------------------------------------------
// Crops

inline CropDescriptor crop_at(CropKind kind, std::size_t src_h, std::size_t src_w, std::size_t h, std::size_t w,
                              Rng* rng = nullptr) {
  if (src_h < h || src_w < w) {
    throw ShapeError("crop: source " + std::to_string(src_h) + "x" + std::to_string(src_w) +
                     " smaller than instance " + std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t dy = src_h - h, dx = src_w - w;
  switch (kind) {
    case CropKind::center: return {kind, dy / 2, dx / 2};
    case CropKind::top_left: return {kind, 0, 0};
    case CropKind::top_right: return {kind, 0, dx};
    case CropKind::bottom_left: return {kind, dy, 0};
    case CropKind::bottom_right: return {kind, dy, dx};
    case CropKind::full: return {kind, 0, 0};
    case CropKind::random:
      if (!rng) throw std::invalid_argument("random crop needs an Rng");
      return {kind, uniform_index(*rng, dy + 1), uniform_index(*rng, dx + 1)};
  }
  return {};
}

inline Instance make_instance(const SourceImage& src, const CropDescriptor& crop, const Shape& instance_shape) {
  const Tensor& img = *src.pixels;
  const std::size_t c = instance_shape.at(0), h = instance_shape.at(1), w = instance_shape.at(2);
  if (img.rank() != 3 || img.dim(0) != c) {
    throw ShapeError("source image " + src.id + " has shape " + to_string(img.shape()) + ", instance needs " +
                     std::to_string(c) + " channels");
  }
  if (crop.offset_y + h > img.dim(1) || crop.offset_x + w > img.dim(2)) {
    throw ShapeError("crop outside source image " + src.id);
  }
  Tensor out(instance_shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out.at(ch, y, x) = img.at(ch, y + crop.offset_y, x + crop.offset_x);
    }
  }
  return Instance{std::move(out), src.id, crop, false};
}

inline Instance crop_instance(const SourceImage& src, CropKind kind, const Shape& instance_shape, Rng* rng = nullptr) {
  const Tensor& img = *src.pixels;
  return make_instance(src, crop_at(kind, img.dim(1), img.dim(2), instance_shape.at(1), instance_shape.at(2), rng),
                       instance_shape);
}

/// A random offset crop that differs from the center crop whenever the source allows it.
inline Instance different_crop(const SourceImage& src, const Shape& instance_shape, Rng& rng) {
  const Tensor& img = *src.pixels;
  const std::size_t h = instance_shape.at(1), w = instance_shape.at(2);
  const CropDescriptor center = crop_at(CropKind::center, img.dim(1), img.dim(2), h, w);
  if (img.dim(1) == h && img.dim(2) == w) return make_instance(src, center, instance_shape);
  CropDescriptor c;
  do {
    c = crop_at(CropKind::random, img.dim(1), img.dim(2), h, w, &rng);
  } while (c.offset_y == center.offset_y && c.offset_x == center.offset_x);
  return make_instance(src, c, instance_shape);
}

// ---------------------------------------------------------------------------
// Sub-bag size adjustment

/// I distinct images chosen uniformly, one instance per image.
inline std::vector<Instance> sample_down(const std::vector<SourceImage>& images, std::size_t target, Rng& rng,
                                         const Shape& instance_shape, CropKind crop = CropKind::center) {
  if (images.size() <= target) {
    throw FillError("sample_down: needs more images (" + std::to_string(images.size()) + ") than slots (" +
                    std::to_string(target) + ")");
  }
  std::vector<std::size_t> idx(images.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < target; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
  std::vector<Instance> out;
  for (std::size_t i = 0; i < target; ++i) out.push_back(crop_instance(images[idx[i]], crop, instance_shape, &rng));
  return out;
}

struct ExactFill {
  std::vector<Instance> instances;  // I - o center crops
  std::size_t open = 0;             // o = I mod m
};

/// Replicates each image floor(I/m) times as center crops.
inline ExactFill max_exact_fill(const std::vector<SourceImage>& images, std::size_t target, const Shape& instance_shape) {
  const std::size_t m = images.size();
  if (m == 0) throw FillError("max_exact_fill: empty sub-bag (handled by sub-bag dropout, not fill-in)");
  if (m >= target) {
    throw FillError("max_exact_fill: needs fewer images (" + std::to_string(m) + ") than slots (" +
                    std::to_string(target) + ")");
  }
  ExactFill f;
  const std::size_t reps = target / m;
  for (std::size_t r = 0; r < reps; ++r) {
    for (const SourceImage& img : images) {
      Instance inst = crop_instance(img, CropKind::center, instance_shape);
      inst.synthetic = r > 0;
      f.instances.push_back(std::move(inst));
    }
  }
  f.open = target % m;
  return f;
}

/// I instances cycling through random permutations of the images, each with a
/// random center or corner crop.
inline std::vector<Instance> random_fill(const std::vector<SourceImage>& images, std::size_t count, Rng& rng,
                                         const Shape& instance_shape) {
  if (images.empty()) throw FillError("random_fill: empty sub-bag");
  static constexpr CropKind kinds[] = {CropKind::center, CropKind::top_left, CropKind::top_right,
                                       CropKind::bottom_left, CropKind::bottom_right};
  std::vector<Instance> out;
  std::vector<std::size_t> pool;
  while (out.size() < count) {
    if (pool.empty()) {
      pool.resize(images.size());
      for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
      shuffle(pool, rng);
    }
    const std::size_t pick = pool.back();
    pool.pop_back();
    Instance inst = crop_instance(images[pick], kinds[uniform_index(rng, 5)], instance_shape);
    inst.synthetic = out.size() >= images.size();
    out.push_back(std::move(inst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neutral instance

struct InversionResult {
  Instance neutral;
  std::vector<std::pair<std::size_t, double>> trace;  // (iteration, ||C(x) - mu||)
  double relative_residual = 0.0;
  bool converged = false;
};

class InversionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct InversionEval {
  double loss = 0.0;
  Tensor grad;
};

// Free-weight input layer: a constant all-ones input scaled elementwise by the
// trainable pixel weights x, followed by the frozen encoder.
inline InversionEval inversion_objective(const Network& encoder, const Tensor& x, const Tensor& target) {
  Graph g;
  const NodeId ones = g.constant(Tensor(x.shape(), 1.0));
  const NodeId pixels = g.parameter(x);
  const NodeId input_layer = g.hadamard(ones, pixels);
  const BoundNetwork frozen = bind_network(g, encoder, no_layers);
  const NodeId emb = forward(g, encoder, frozen, input_layer);
  const NodeId loss = g.squared_distance(emb, target);
  g.backward(loss);
  return {g.value(loss)[0], g.grad(pixels)};
}

}  // namespace detail

/// Minimizes ||C(x) - mu||² over x in [0,1]^(C×H×W) with projected steps.
/// adam: the returned instance is the best iterate seen and the trace records the
/// best residual so far. sgd: a step that does not decrease the loss is reverted
/// and the step size halved. Either way the trace never increases.
inline InversionResult neutral_instance(const Network& encoder, const Tensor& mu, const Tensor& init,
                                        const InversionOptions& opts = {}) {
  if (init.shape() != encoder.input_shape) {
    throw ShapeError("neutral_instance: init shape " + to_string(init.shape()) + ", encoder expects " +
                     to_string(encoder.input_shape));
  }
  const Shape out = encoder.output_shape();
  if (mu.size() != element_count(out)) {
    throw ShapeError("neutral_instance: target length " + std::to_string(mu.size()) + ", embedding length " +
                     std::to_string(element_count(out)));
  }
  if (!(opts.lr > 0.0) || !(opts.beta1 >= 0.0 && opts.beta1 < 1.0) || !(opts.beta2 >= 0.0 && opts.beta2 < 1.0)) {
    throw std::invalid_argument("neutral_instance: bad optimizer settings");
  }
  const double mu_norm = l2_norm(mu.values());
  auto relative = [&](double loss) {
    const double r = std::sqrt(loss);
    return mu_norm > 0.0 ? r / mu_norm : r;
  };

  Tensor x = init;
  for (double& v : x.values()) v = std::clamp(v, 0.0, 1.0);
  detail::InversionEval cur = detail::inversion_objective(encoder, x, mu);
  if (!std::isfinite(cur.loss)) throw InversionError("neutral_instance: non-finite loss at initialization");

  InversionResult res;
  Tensor best = x;
  double best_loss = cur.loss;
  res.trace.emplace_back(0, std::sqrt(best_loss));
  Tensor m1(x.shape()), m2(x.shape());
  double lr = opts.lr, b1t = 1.0, b2t = 1.0;
  std::size_t nonfinite = 0;
  for (std::size_t it = 1; it <= opts.max_iters && relative(best_loss) > opts.tolerance; ++it) {
    b1t *= opts.beta1;
    b2t *= opts.beta2;
    const bool adam = opts.method == InversionMethod::adam;
    Tensor cand = x;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      const double gi = cur.grad[i];
      double step = gi;
      if (adam) {
        m1[i] = opts.beta1 * m1[i] + (1.0 - opts.beta1) * gi;
        m2[i] = opts.beta2 * m2[i] + (1.0 - opts.beta2) * gi * gi;
        step = (m1[i] / (1.0 - b1t)) / (std::sqrt(m2[i] / (1.0 - b2t)) + 1e-12);
      }
      cand[i] = std::clamp(cand[i] - lr * step, 0.0, 1.0);
    }
    detail::InversionEval next = detail::inversion_objective(encoder, cand, mu);
    if (!std::isfinite(next.loss)) {
      if (++nonfinite > opts.max_nonfinite) {
        throw InversionError("neutral_instance: diverged after " + std::to_string(nonfinite) + " step halvings");
      }
      lr *= 0.5;
    } else if (!adam && next.loss > cur.loss) {
      nonfinite = 0;
      lr *= 0.5;
    } else {
      if (!adam) lr *= opts.lr_growth;
      nonfinite = 0;
      x = std::move(cand);
      cur = std::move(next);
      if (cur.loss < best_loss) {
        best_loss = cur.loss;
        best = x;
      }
    }
    res.trace.emplace_back(it, std::sqrt(best_loss));
    if (lr < 1e-30) break;  // stalled at a constrained stationary point
    const std::size_t w = opts.plateau_window;
    if (w > 0 && it >= w) {
      const double before = res.trace[it - w].second, now = res.trace[it].second;
      if (before - now <= opts.plateau_rel * before) break;
    }
  }
  res.relative_residual = relative(best_loss);
  res.converged = res.relative_residual <= opts.tolerance;
  res.neutral = Instance{std::move(best), "neutral", CropDescriptor{CropKind::full, 0, 0}, true};
  return res;
}

/// Mid-gray starting point for the inversion.
inline Tensor mid_gray(const Shape& shape) { return Tensor(shape, 0.5); }

/// Supplies the neutral instance for a partially filled sub-bag (given the instances so far).
using NeutralProvider = std::function<Instance(const std::vector<Instance>& existing)>;

inline NeutralProvider make_neutral_provider(const Network& encoder, const InversionOptions& opts) {
  return [&encoder, opts](const std::vector<Instance>& existing) {
    const Tensor mu = aggregate(encode_subbag(encoder, existing, existing.size()), Aggregation::average);
    return neutral_instance(encoder, mu, mid_gray(encoder.input_shape), opts).neutral;
  };
}

/// Fills the o open slots left after max exact fill.
inline std::vector<Instance> fill_remaining(FillStrategy strategy, const std::vector<SourceImage>& images,
                                            std::vector<Instance> partial, std::size_t open, Rng& rng,
                                            const Shape& instance_shape, const NeutralProvider* neutral = nullptr,
                                            Aggregation aggregation = Aggregation::average) {
  if (open == 0) return partial;
  if (images.empty()) throw FillError("fill_remaining: empty sub-bag");
  switch (strategy) {
    case FillStrategy::reproduction: {
      if (open > images.size()) throw FillError("fill_remaining: more open slots than images");
      std::vector<std::size_t> idx(images.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      shuffle(idx, rng);
      for (std::size_t k = 0; k < open; ++k) {
        Instance inst = different_crop(images[idx[k]], instance_shape, rng);
        inst.synthetic = true;
        partial.push_back(std::move(inst));
      }
      return partial;
    }
    case FillStrategy::random_fill: {
      // cycles from scratch; the replicated prefix is regenerated with random crops
      return random_fill(images, partial.size() + open, rng, instance_shape);
    }
    case FillStrategy::optimization: {
      if (aggregation == Aggregation::max) {
        // max is invariant to replication, no inversion needed
        for (std::size_t k = 0; k < open; ++k) {
          Instance inst = crop_instance(images[k % images.size()], CropKind::center, instance_shape);
          inst.synthetic = true;
          partial.push_back(std::move(inst));
        }
        return partial;
      }
      if (!neutral || !*neutral) throw FillError("fill_remaining: optimization strategy needs an encoder and target");
      if (partial.empty()) throw FillError("fill_remaining: optimization needs at least one existing instance");
      Instance xn = (*neutral)(partial);
      xn.synthetic = true;
      for (std::size_t k = 0; k < open; ++k) partial.push_back(xn);
      return partial;
    }
  }
  return partial;
}

/// Produces exactly `target` instances for one present sub-bag.
inline std::vector<Instance> materialize_subbag(const std::vector<SourceImage>& images, std::size_t target,
                                                const FillPolicy& policy, Aggregation aggregation, Rng& rng,
                                                const Shape& instance_shape, const NeutralProvider* neutral = nullptr) {
  const std::size_t m = images.size();
  if (m == 0) throw FillError("materialize_subbag: empty sub-bag");
  if (m > target) return sample_down(images, target, rng, instance_shape, policy.crop);
  std::vector<Instance> base;
  std::size_t open = 0;
  if (m == target) {
    for (const SourceImage& img : images) base.push_back(crop_instance(img, policy.crop, instance_shape, &rng));
    return base;
  }
  if (policy.strategy == FillStrategy::random_fill) return random_fill(images, target, rng, instance_shape);
  if (policy.strategy == FillStrategy::optimization && !policy.replicate_before_neutral &&
      aggregation == Aggregation::average) {
    for (const SourceImage& img : images) base.push_back(crop_instance(img, CropKind::center, instance_shape));
    open = target - m;
  } else {
    ExactFill f = max_exact_fill(images, target, instance_shape);
    base = std::move(f.instances);
    open = f.open;
  }
  return fill_remaining(policy.strategy, images, std::move(base), open, rng, instance_shape, neutral, aggregation);
}

}  // namespace nmil
