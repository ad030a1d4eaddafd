#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>

#include "nmil/synth.hpp"

using namespace nmil;
using namespace nmil::synth;

namespace {

RenderOptions small_render() {
  RenderOptions r;
  r.size = 24;
  return r;
}

std::vector<Bag> small_dataset(std::size_t n, std::uint64_t seed, std::size_t classes = 8) {
  DatasetOptions opts;
  opts.num_bags = n;
  opts.num_classes = classes;
  opts.render = small_render();
  return generate_dataset(opts, seed);
}

double fraction_full(const std::vector<Bag>& bags) {
  std::size_t full = 0;
  for (const Bag& b : bags) full += configuration_of(b).is_full() ? 1 : 0;
  return static_cast<double>(full) / static_cast<double>(bags.size());
}

// P(no sub-bag loses both images) with k ~ U{0..4} removals out of 3 pairs, by enumerating removal sets.
double enumerated_full_probability() {
  double total = 0.0;
  for (std::size_t k = 0; k <= kMaxDropped; ++k) {
    std::size_t sets = 0, keep_full = 0;
    for (unsigned mask = 0; mask < 64; ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
      ++sets;
      bool full = true;
      for (unsigned pair = 0; pair < 3; ++pair) full = full && ((mask >> (2 * pair)) & 3U) != 3U;
      keep_full += full ? 1 : 0;
    }
    total += static_cast<double>(keep_full) / static_cast<double>(sets);
  }
  return total / static_cast<double>(kMaxDropped + 1);
}

double hashed_score(const Bag& bag, std::size_t j, std::size_t k) {
  return static_cast<double>(derive_seed(bag.id, "score", j * 2 + k) % 1000) / 1000.0;
}

}  // namespace

TEST(Render, Deterministic) {
  Rng rng(1);
  const ShapeSpec s = make_shape(3, rng);
  const ViewSpec v{Perspective::front, 30.0};
  EXPECT_EQ(render_view(s, v, 42, small_render()), render_view(s, v, 42, small_render()));
  for (double x : render_view(s, v, 42, small_render()).values()) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
  }
}

TEST(Render, MirroredSymmetricShapeHasIdenticalTopView) {
  ShapeSpec s;
  s.primitives.push_back({PrimitiveKind::box, {0, 0, 0}, {0.6, 0.4, 0.3}, {0.6, 0.6, 0.5}});
  s.primitives.push_back({PrimitiveKind::ellipsoid, {0.2, 0.1, 0.35}, {0.2, 0.15, 0.1}, {0.9, 0.2, 0.2}});
  s.primitives.push_back({PrimitiveKind::ellipsoid, {0.2, 0.1, -0.35}, {0.2, 0.15, 0.1}, {0.9, 0.2, 0.2}});
  const ShapeSpec m = mirrored(s);
  EXPECT_NE(m.primitives[1].center[2], s.primitives[1].center[2]);
  const ViewSpec top{Perspective::top, 0.0};
  EXPECT_EQ(render_view(s, top, 7, small_render()), render_view(m, top, 7, small_render()));
}

TEST(Render, FrontAndBackDiffer) {
  for (std::uint64_t i = 0; i < 100; ++i) {
    Rng rng(derive_seed(5, "shape", i));
    const std::size_t cls = i % 8;
    const ShapeSpec s = make_shape(cls, rng);
    const Tensor front = render_view(s, {Perspective::front, 0.0}, i, small_render());
    const Tensor back = render_view(s, {Perspective::back, 0.0}, i, small_render());
    std::size_t differ = 0;
    const std::size_t n = front.dim(1) * front.dim(2);
    for (std::size_t p = 0; p < n; ++p) {
      bool d = false;
      for (std::size_t c = 0; c < 3; ++c) d = d || std::abs(front[c * n + p] - back[c * n + p]) > 0.1;
      differ += d ? 1 : 0;
    }
    EXPECT_GE(static_cast<double>(differ) / static_cast<double>(n), 0.01) << "class " << cls;
  }
}

TEST(Generate, StructureAndDeterminism) {
  const auto a = small_dataset(24, 3);
  const auto b = small_dataset(24, 3);
  ASSERT_EQ(a.size(), 24u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].label, b[i].label);
    ASSERT_EQ(a[i].sub_bags.size(), 3u);
    EXPECT_TRUE(configuration_of(a[i]).is_full());
    for (std::size_t j = 0; j < 3; ++j) {
      ASSERT_EQ(a[i].sub_bags[j].images.size(), 2u);
      for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(*a[i].sub_bags[j].images[k].pixels, *b[i].sub_bags[j].images[k].pixels);
        EXPECT_EQ(a[i].sub_bags[j].images[k].pixels->shape(), (Shape{3, 24, 24}));
      }
    }
  }
  EXPECT_EQ(a[0].sub_bags[1].images[1].id, "b0_front_30");
  const auto c = small_dataset(24, 4);
  EXPECT_NE(*a[0].sub_bags[0].images[0].pixels, *c[0].sub_bags[0].images[0].pixels);
}

TEST(Generate, ClassBalance) {
  DatasetOptions opts;
  opts.num_bags = 1300;
  opts.num_classes = 13;
  opts.render.size = 4;
  const auto bags = generate_dataset(opts, 11);
  std::map<std::size_t, std::size_t> counts;
  for (const Bag& b : bags) counts[b.label]++;
  ASSERT_EQ(counts.size(), 13u);
  for (const auto& [cls, n] : counts) {
    EXPECT_GE(n, 90u) << cls;
    EXPECT_LE(n, 110u) << cls;
  }
  opts.num_classes = 14;
  EXPECT_THROW(generate_dataset(opts, 1), std::invalid_argument);
}

TEST(Generate, LayoutsAreDistinct) {
  const auto& layouts = class_layouts();
  for (std::size_t a = 0; a < layouts.size(); ++a)
    for (std::size_t b = a + 1; b < layouts.size(); ++b) EXPECT_NE(layouts[a], layouts[b]);
}

TEST(Drop, NoneLeavesBagsUnchanged) {
  const auto bags = small_dataset(8, 2);
  const DropResult r = drop_instances(bags, DropMethod::none, {}, 1);
  EXPECT_TRUE(r.log.empty());
  for (const Bag& b : r.bags) EXPECT_TRUE(configuration_of(b).is_full());
}

TEST(Drop, RandomFullFractionMatchesEnumeration) {
  DatasetOptions opts;
  opts.num_bags = 4000;
  opts.render.size = 2;
  const auto bags = generate_dataset(opts, 6);
  const DropResult r = drop_instances(bags, DropMethod::random, {}, 9);
  const double want = enumerated_full_probability();
  EXPECT_NEAR(want, 0.64, 1e-12);
  // binomial sd at n = 4000 is about 0.0076
  EXPECT_NEAR(fraction_full(r.bags), want, 0.03);

  std::map<std::size_t, std::size_t> per_bag;
  for (const DropRecord& d : r.log) {
    per_bag[d.bag_id]++;
    EXPECT_TRUE(std::isnan(d.relevance));
  }
  std::map<std::size_t, std::size_t> k_hist;
  for (const Bag& b : bags) k_hist[per_bag[b.id]]++;
  ASSERT_EQ(k_hist.size(), 5u);
  for (const auto& [k, n] : k_hist) EXPECT_NEAR(static_cast<double>(n) / 4000.0, 0.2, 0.03) << "k=" << k;
  for (std::size_t i = 0; i < bags.size(); ++i) EXPECT_EQ(r.bags[i].label, bags[i].label);
}

TEST(Drop, Deterministic) {
  const auto bags = small_dataset(30, 2);
  const DropResult a = drop_instances(bags, DropMethod::random, {}, 5);
  const DropResult b = drop_instances(bags, DropMethod::random, {}, 5);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].image_id, b.log[i].image_id);
}

TEST(Drop, RelevanceOrdering) {
  DatasetOptions opts;
  opts.num_bags = 300;
  opts.render.size = 2;
  const auto bags = generate_dataset(opts, 8);
  for (DropMethod method : {DropMethod::most_relevant, DropMethod::least_relevant}) {
    const DropResult r = drop_instances(bags, method, hashed_score, 3);
    for (std::size_t i = 0; i < bags.size(); ++i) {
      double lo_removed = 2.0, hi_removed = -1.0, lo_kept = 2.0, hi_kept = -1.0;
      for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t k = 0; k < 2; ++k) {
          const std::string& id = bags[i].sub_bags[j].images[k].id;
          bool kept = false;
          for (const SourceImage& img : r.bags[i].sub_bags[j].images) kept = kept || img.id == id;
          const double s = hashed_score(bags[i], j, k);
          if (kept) {
            lo_kept = std::min(lo_kept, s);
            hi_kept = std::max(hi_kept, s);
          } else {
            lo_removed = std::min(lo_removed, s);
            hi_removed = std::max(hi_removed, s);
          }
        }
      }
      if (hi_removed < 0.0) continue;
      if (method == DropMethod::most_relevant) EXPECT_GE(lo_removed, hi_kept);
      else EXPECT_LE(hi_removed, lo_kept);
    }
    for (const DropRecord& d : r.log) EXPECT_FALSE(std::isnan(d.relevance));
  }
  EXPECT_THROW(drop_instances(bags, DropMethod::most_relevant, {}, 1), std::invalid_argument);
}

TEST(Drop, ConcentratedRelevanceEmptiesMoreSubbags) {
  // both images of a perspective share most of their relevance, as views of one face do
  DatasetOptions opts;
  opts.num_bags = 2000;
  opts.render.size = 2;
  const auto bags = generate_dataset(opts, 10);
  const RelevanceFn shared_face = [](const Bag& b, std::size_t j, std::size_t k) {
    return static_cast<double>(derive_seed(b.id, "face", j) % 100) + 0.01 * static_cast<double>(k);
  };
  const double random_full = fraction_full(drop_instances(bags, DropMethod::random, {}, 4).bags);
  const double relevant_full = fraction_full(drop_instances(bags, DropMethod::most_relevant, shared_face, 4).bags);
  EXPECT_LT(relevant_full, random_full);
}

TEST(Drop, ParseMethods) {
  EXPECT_EQ(parse_drop_method("most_relevant"), DropMethod::most_relevant);
  EXPECT_THROW(parse_drop_method("all"), std::invalid_argument);
}
