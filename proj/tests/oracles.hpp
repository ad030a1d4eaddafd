#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <memory>

#include "nmil/autograd.hpp"
#include "nmil/bag.hpp"
#include "nmil/tensor.hpp"

namespace nmil::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

using GraphBuilder = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;

struct GradCheck {
  double worst = 0.0;  // max over components of |a - n| / (max(|a|,|n|) + floor)
  bool ok = true;
};

/// Compares backward() against central differences of <seed, f(inputs)> for every input component.
inline GradCheck check_gradients(const GraphBuilder& build, std::vector<Tensor> inputs, Rng& rng,
                                 double h = 1e-5, double tol = 1e-4, double floor = 1e-7) {
  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : inputs) ids.push_back(g.input(t));
  const NodeId out = build(g, ids);
  const Tensor seed = random_tensor(g.value(out).shape(), rng);
  g.backward(out, seed);

  auto objective = [&](const std::vector<Tensor>& xs) {
    Graph g2;
    std::vector<NodeId> ids2;
    for (const Tensor& t : xs) ids2.push_back(g2.input(t));
    const Tensor& v = g2.value(build(g2, ids2));
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += seed[i] * v[i];
    return s;
  };

  GradCheck res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = g.grad(ids[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = objective(inputs);
      inputs[k][i] = orig - h;
      const double down = objective(inputs);
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / (std::max(std::abs(a), std::abs(numeric)) + floor);
      res.worst = std::max(res.worst, err);
      if (std::abs(a - numeric) > tol * std::max(std::abs(a), std::abs(numeric)) + floor) res.ok = false;
    }
  }
  return res;
}

struct GradCase {
  std::string name;
  std::function<GradCheck(Rng&)> run;
};

/// One finite-difference case per op kind plus a random 4-layer stack.
inline std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"conv2d", [](Rng& rng) {
    const std::size_t stride = 1 + uniform_index(rng, 2), pad = uniform_index(rng, 2);
    const std::size_t h = stride == 2 ? 7 : 5;
    return check_gradients([&](Graph& g, const std::vector<NodeId>& x) { return g.conv2d(x[0], x[1], x[2], stride, pad); },
                           {random_tensor({2, h, h}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}, rng);
  }});
  cases.push_back({"relu", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.relu(x[0]); },
                           {random_tensor({2, 4, 4}, rng)}, rng);
  }});
  cases.push_back({"maxpool2d", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.maxpool2d(x[0], 2, 2); },
                           {random_tensor({2, 6, 6}, rng)}, rng);
  }});
  cases.push_back({"dense", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.dense(x[0], x[1], x[2]); },
                           {random_tensor({5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)}, rng);
  }});
  cases.push_back({"flatten", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.flatten(x[0]); },
                           {random_tensor({2, 3, 2}, rng)}, rng);
  }});
  cases.push_back({"softmax", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.softmax(x[0]); },
                           {random_tensor({6}, rng, -3.0, 3.0)}, rng);
  }});
  cases.push_back({"hadamard", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.hadamard(x[0], x[1]); },
                           {random_tensor({7}, rng), random_tensor({7}, rng)}, rng);
  }});
  cases.push_back({"mean", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.mean(x); },
                           {random_tensor({5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)}, rng);
  }});
  cases.push_back({"max", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.max(x); },
                           {random_tensor({5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)}, rng);
  }});
  cases.push_back({"sum", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.sum(x); },
                           {random_tensor({4}, rng), random_tensor({4}, rng)}, rng);
  }});
  cases.push_back({"concat", [](Rng& rng) {
    return check_gradients([](Graph& g, const std::vector<NodeId>& x) { return g.concat(x); },
                           {random_tensor({3}, rng), random_tensor({2}, rng), random_tensor({4}, rng)}, rng);
  }});
  cases.push_back({"kl_divergence", [](Rng& rng) {
    Tensor target = random_tensor({5}, rng, 0.0, 1.0);
    double s = 0.0;
    for (double v : target.values()) s += v;
    for (double& v : target.values()) v /= s;
    return check_gradients([target](Graph& g, const std::vector<NodeId>& x) { return g.kl_divergence(x[0], target); },
                           {random_tensor({5}, rng, 0.1, 1.0)}, rng);
  }});
  cases.push_back({"squared_distance", [](Rng& rng) {
    const Tensor target = random_tensor({6}, rng);
    return check_gradients([target](Graph& g, const std::vector<NodeId>& x) { return g.squared_distance(x[0], target); },
                           {random_tensor({6}, rng)}, rng);
  }});
  cases.push_back({"stack4", [](Rng& rng) {
    // conv -> relu -> maxpool -> dense, gradients w.r.t. input and all parameters
    return check_gradients(
        [](Graph& g, const std::vector<NodeId>& x) {
          const NodeId c = g.relu(g.conv2d(x[0], x[1], x[2], 1, 1));
          return g.dense(g.flatten(g.maxpool2d(c, 2, 2)), x[3], x[4]);
        },
        {random_tensor({2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng),
         random_tensor({4, 27}, rng), random_tensor({4}, rng)},
        rng);
  }});
  return cases;
}

/// Direct six-loop cross-correlation used as the convolution oracle.
inline Tensor reference_conv2d(const Tensor& in, const Tensor& k, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({cout, oh, ow});
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = b[co];
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long y = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long x = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
              s += in.at(ci, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) *
                   k[((co * cin + ci) * kh + ky) * kw + kx];
            }
        out.at(co, oy, ox) = s;
      }
  return out;
}


inline SourceImage random_image(const std::string& id, const Shape& shape, Rng& rng) {
  return {id, std::make_shared<const Tensor>(random_tensor(shape, rng, 0.0, 1.0))};
}

/// Bag with counts[j] random source images in sub-bag j.
inline Bag toy_bag(std::size_t id, std::size_t label, const std::vector<std::size_t>& counts, const Shape& image_shape,
                   Rng& rng) {
  Bag b;
  b.id = id;
  b.label = label;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    SubBag sb;
    sb.index = j;
    for (std::size_t k = 0; k < counts[j]; ++k) {
      sb.images.push_back(random_image(std::to_string(id) + "_" + std::to_string(j) + "_" + std::to_string(k),
                                       image_shape, rng));
    }
    b.sub_bags.push_back(std::move(sb));
  }
  return b;
}

}  // namespace nmil::testing
