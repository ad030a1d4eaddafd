#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "nmil/nested_net.hpp"
#include "oracles.hpp"

using namespace nmil;
using nmil::testing::random_tensor;

namespace {

const Shape kInstance{1, 4, 4};

ModelSpec toy_spec(std::size_t s, Aggregation agg) {
  ModelSpec spec;
  spec.num_subbags = s;
  spec.num_classes = 3;
  spec.instance_shape = kInstance;
  spec.encoder = {LayerSpec::conv(2, 3, 1), LayerSpec::relu(), LayerSpec::flatten()};
  spec.head = {LayerSpec::dense(4), LayerSpec::relu(), LayerSpec::dense(3)};
  spec.aggregation = agg;
  return spec;
}

Instance random_instance(Rng& rng) { return {random_tensor(kInstance, rng, 0.0, 1.0), "x", {}, false}; }

MaterializedBag random_bag(std::size_t s, std::size_t per_subbag, std::size_t label, Rng& rng) {
  MaterializedBag b;
  b.label = label;
  b.sub_bags.resize(s);
  for (auto& sub : b.sub_bags) {
    for (std::size_t k = 0; k < per_subbag; ++k) sub.push_back(random_instance(rng));
  }
  return b;
}

double bag_loss(const ModelParams& m, const MaterializedBag& b, const Configuration& c) {
  return kl_loss(one_hot(b.label, m.num_classes()), forward_bag(m, b, c).probs);
}

}  // namespace

TEST(EncodeSubbag, IdenticalInstancesGiveIdenticalEmbeddings) {
  Rng rng(1);
  const ModelParams m = make_model(toy_spec(1, Aggregation::average), rng);
  const Instance x = random_instance(rng);
  const auto e = encode_subbag(m.encoder(0), {x, x, x}, 3);
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e[0], e[1]);
  EXPECT_EQ(e[1], e[2]);
}

TEST(EncodeSubbag, ZeroKernelGivesBiasPattern) {
  Rng rng(2);
  ModelParams m = make_model(toy_spec(1, Aggregation::average), rng);
  Network& enc = m.encoder(0);
  enc.params[0].weights.fill(0.0);
  enc.params[0].bias = Tensor::vector({0.25, -0.5});
  const auto e = encode_subbag(enc, {random_instance(rng)}, 1);
  // relu(bias) per channel, 16 positions each
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(e[0][i], 0.25);
  for (std::size_t i = 16; i < 32; ++i) EXPECT_EQ(e[0][i], 0.0);
}

TEST(EncodeSubbag, MatchesDirectConvolutionThenFlatten) {
  Rng rng(3);
  const Network enc = make_network({LayerSpec::conv(3, 3, 1), LayerSpec::flatten()}, kInstance, rng);
  Network with_bias = enc;
  with_bias.params[0].bias = random_tensor({3}, rng);
  const Instance x = random_instance(rng);
  const Tensor got = encode_subbag(with_bias, {x}, 1)[0];
  const Tensor want = nmil::testing::reference_conv2d(x.image, with_bias.params[0].weights, with_bias.params[0].bias, 1, 1);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LE(std::abs(got[i] - want[i]), 1e-12);
}

TEST(EncodeSubbag, RejectsWrongCountOrShape) {
  Rng rng(4);
  const ModelParams m = make_model(toy_spec(1, Aggregation::average), rng);
  EXPECT_THROW(encode_subbag(m.encoder(0), {random_instance(rng)}, 2), ShapeError);
  const Instance bad{Tensor({1, 5, 5}), "b", {}, false};
  EXPECT_THROW(encode_subbag(m.encoder(0), {bad}, 1), ShapeError);
}

TEST(Aggregate, Examples) {
  const std::vector<Tensor> e{Tensor::vector({1, 5, 2}), Tensor::vector({3, 2, 2})};
  EXPECT_EQ(aggregate(e, Aggregation::max), Tensor::vector({3, 5, 2}));
  EXPECT_EQ(aggregate(e, Aggregation::average), Tensor::vector({2, 3.5, 2}));
  EXPECT_THROW(aggregate({}, Aggregation::max), ShapeError);
  EXPECT_THROW(aggregate({Tensor::vector({1}), Tensor::vector({1, 2})}, Aggregation::average), ShapeError);
}

TEST(Aggregate, ReplicationInvariance) {
  Rng rng(5);
  const Tensor v = random_tensor({6}, rng);
  for (std::size_t k : {1, 2, 5}) {
    const std::vector<Tensor> copies(k, v);
    EXPECT_EQ(aggregate(copies, Aggregation::max), v);
    const Tensor avg = aggregate(copies, Aggregation::average);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(avg[i], v[i], 1e-15);
  }
}

TEST(ModelBuild, RejectsDenseEncoderAndMismatchedHead) {
  Rng rng(6);
  ModelSpec spec = toy_spec(3, Aggregation::average);
  spec.encoder = {LayerSpec::flatten(), LayerSpec::dense(4)};
  EXPECT_THROW(make_model(spec, rng), ShapeError);
  spec = toy_spec(3, Aggregation::average);
  spec.encoder = {LayerSpec::conv(2, 3, 1)};
  EXPECT_THROW(make_model(spec, rng), ShapeError);
  spec = toy_spec(3, Aggregation::average);
  spec.num_classes = 5;
  EXPECT_THROW(make_model(spec, rng), ShapeError);
}

TEST(ForwardBag, FullConfigurationMaskIsIdentity) {
  Rng rng(7);
  const ModelParams m = make_model(toy_spec(3, Aggregation::average), rng);
  const auto t = forward_bag(m, random_bag(3, 2, 0, rng), Configuration::full(3));
  EXPECT_EQ(t.masked, t.concatenated);
  EXPECT_EQ(t.concatenated.size(), 3 * m.embedding_length());
  double sum = 0.0;
  for (double p : t.probs.values()) {
    EXPECT_GE(p, 0.0);
    sum += p;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(ForwardBag, DroppedMiddleBlockIsZero) {
  Rng rng(8);
  const ModelParams m = make_model(toy_spec(3, Aggregation::average), rng);
  MaterializedBag b = random_bag(3, 2, 1, rng);
  b.sub_bags[1].clear();
  const auto t = forward_bag(m, b, Configuration::parse("101"));
  const std::size_t e = m.embedding_length();
  for (std::size_t i = e; i < 2 * e; ++i) EXPECT_EQ(t.masked[i], 0.0);
  EXPECT_TRUE(t.embeddings[1].empty());
}

TEST(ForwardBag, ConstantHeadGivesSoftmaxOfBias) {
  Rng rng(9);
  ModelParams m = make_model(toy_spec(3, Aggregation::max), rng);
  m.head.params.back().weights.fill(0.0);
  m.head.params.back().bias = Tensor::vector({0.5, -1.0, 2.0});
  const double z = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
  for (int trial = 0; trial < 3; ++trial) {
    const auto t = forward_bag(m, random_bag(3, 2, 0, rng), Configuration::full(3));
    EXPECT_NEAR(t.probs[0], std::exp(0.5) / z, 1e-12);
    EXPECT_NEAR(t.probs[2], std::exp(2.0) / z, 1e-12);
  }
}

TEST(ForwardBag, MissingMaterializationThrows) {
  Rng rng(10);
  const ModelParams m = make_model(toy_spec(3, Aggregation::average), rng);
  MaterializedBag b = random_bag(3, 2, 0, rng);
  b.sub_bags[2].clear();
  EXPECT_THROW(forward_bag(m, b, Configuration::full(3)), BagError);
  EXPECT_THROW(forward_bag(m, b, Configuration::parse("000")), BagError);
  EXPECT_THROW(forward_bag(m, b, Configuration::parse("11")), ShapeError);
}

TEST(KlLoss, Examples) {
  const Tensor p = Tensor::vector({0.1, 0.7, 0.2});
  EXPECT_NEAR(kl_loss(one_hot(1, 3), p), -std::log(0.7), 1e-12);
  EXPECT_NEAR(kl_loss(one_hot(1, 3), p), 0.356675, 1e-6);
  EXPECT_EQ(kl_loss(one_hot(2, 3), p), -std::log(0.2));
  const Tensor y = Tensor::vector({0.25, 0.25, 0.5});
  EXPECT_NEAR(kl_loss(y, y), 0.0, 1e-15);
  EXPECT_THROW(kl_loss(one_hot(0, 2), p), ShapeError);
  EXPECT_THROW(kl_loss(Tensor::vector({0.5, 0.6, 0.0}), p), std::invalid_argument);
  EXPECT_THROW(kl_loss(Tensor::vector({1.5, -0.5, 0.0}), p), std::invalid_argument);
}

TEST(KlLoss, ClampsZeroProbability) {
  const double l = kl_loss(one_hot(0, 2), Tensor::vector({0.0, 1.0}));
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(1e-12), 1e-9);
}

TEST(BatchLoss, SumsPerBagLosses) {
  Rng rng(11);
  const ModelParams m = make_model(toy_spec(3, Aggregation::average), rng);
  const Configuration full = Configuration::full(3);
  const MaterializedBag a = random_bag(3, 2, 0, rng);
  EXPECT_EQ(batch_loss(m, {a}, {full}), bag_loss(m, a, full));
  EXPECT_EQ(batch_loss(m, {a, a}, {full, full}), 2.0 * bag_loss(m, a, full));

  MaterializedBag b = random_bag(3, 2, 1, rng), c = random_bag(3, 2, 2, rng);
  c.sub_bags[0].clear();
  const Configuration cb = Configuration::full(3), cc = Configuration::parse("011");
  const double want = bag_loss(m, a, full) + bag_loss(m, b, cb) + bag_loss(m, c, cc);
  EXPECT_NEAR(batch_loss(m, {a, b, c}, {full, cb, cc}), want, 1e-12);
  EXPECT_THROW(batch_loss(m, {a}, {}), ShapeError);
}

class AggregationModes : public ::testing::TestWithParam<Aggregation> {};

TEST_P(AggregationModes, PermutingInstancesLeavesLossUnchanged) {
  Rng rng(12);
  const ModelParams m = make_model(toy_spec(3, GetParam()), rng);
  MaterializedBag b = random_bag(3, 4, 1, rng);
  const double before = bag_loss(m, b, Configuration::full(3));
  for (auto& sub : b.sub_bags) std::reverse(sub.begin(), sub.end());
  std::swap(b.sub_bags[0][0], b.sub_bags[0][2]);
  EXPECT_NEAR(bag_loss(m, b, Configuration::full(3)), before, 1e-9);
}

TEST_P(AggregationModes, MaskEqualsZeroBlockForEveryConfiguration) {
  Rng rng(13);
  const ModelParams m = make_model(toy_spec(3, GetParam()), rng);
  const MaterializedBag b = random_bag(3, 2, 2, rng);
  const std::size_t e = m.embedding_length();
  for (const Configuration& c : nonempty_configurations(3)) {
    const auto skipped = forward_bag(m, b, c);
    const auto masked = forward_bag(m, b, c, {.encode_dropped = true});
    // zero-block oracle: aggregates computed directly, dropped blocks zeroed, head run alone
    Tensor concat({3 * e});
    for (std::size_t j = 0; j < 3; ++j) {
      if (!c[j]) continue;
      const Tensor agg = aggregate(encode_subbag(m.encoder(j), b.sub_bags[j], 2), m.aggregation);
      for (std::size_t i = 0; i < e; ++i) concat[j * e + i] = agg[i];
    }
    const ForwardPass head = forward(m.head, concat);
    const Tensor& logits = head.graph.value(head.output);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(skipped.logits[i], logits[i], 1e-12) << c.to_string();
      EXPECT_NEAR(masked.probs[i], skipped.probs[i], 1e-12) << c.to_string();
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Both, AggregationModes, ::testing::Values(Aggregation::average, Aggregation::max),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Aggregation, MaxIgnoresAnyDuplication) {
  Rng rng(14);
  const ModelParams m = make_model(toy_spec(1, Aggregation::max), rng);
  const std::vector<Instance> base{random_instance(rng), random_instance(rng), random_instance(rng)};
  const Tensor o = aggregate(encode_subbag(m.encoder(0), base, 3), Aggregation::max);
  std::vector<Instance> dup = base;
  dup.push_back(base[1]);
  dup.push_back(base[1]);
  dup.push_back(base[2]);
  EXPECT_EQ(aggregate(encode_subbag(m.encoder(0), dup, dup.size()), Aggregation::max), o);
}

TEST(Aggregation, AverageIgnoresExactFill) {
  Rng rng(15);
  const ModelParams m = make_model(toy_spec(1, Aggregation::average), rng);
  const std::vector<Instance> base{random_instance(rng), random_instance(rng), random_instance(rng)};
  const Tensor o = aggregate(encode_subbag(m.encoder(0), base, 3), Aggregation::average);
  std::vector<Instance> tripled;
  for (int r = 0; r < 3; ++r) tripled.insert(tripled.end(), base.begin(), base.end());
  const Tensor o3 = aggregate(encode_subbag(m.encoder(0), tripled, 9), Aggregation::average);
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(o3[i], o[i], 1e-12);
}

TEST(Softmax, NormalizedAndShiftInvariant) {
  Graph g;
  const Tensor logits = Tensor::vector({0.3, -2.0, 4.5, 1.0});
  Tensor shifted = logits;
  for (double& v : shifted.values()) v += 123.0;
  const Tensor p = g.value(g.softmax(g.input(logits)));
  const Tensor q = g.value(g.softmax(g.input(shifted)));
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum += p[i];
    EXPECT_NEAR(p[i], q[i], 1e-9);
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(BagGradient, MatchesFiniteDifferences) {
  Rng rng(16);
  ModelSpec spec = toy_spec(2, Aggregation::average);
  spec.num_classes = 2;
  spec.head = {LayerSpec::dense(3), LayerSpec::relu(), LayerSpec::dense(2)};
  ModelParams m = make_model(spec, rng);
  m.for_each_param([&](const std::string&, Tensor& t) {
    for (double& v : t.values()) v += uniform(rng, -0.1, 0.1);
  });
  const MaterializedBag b = random_bag(2, 2, 1, rng);
  const Configuration full = Configuration::full(2);

  ModelParams grads = zeros_like(m);
  accumulate_bag_gradient(m, b, full, TrainableSet::everything(), grads);

  std::vector<Tensor*> params, analytic;
  m.for_each_param([&](const std::string&, Tensor& t) { params.push_back(&t); });
  grads.for_each_param([&](const std::string&, Tensor& t) { analytic.push_back(&t); });
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->size(); ++i) {
      const double orig = (*params[p])[i];
      (*params[p])[i] = orig + h;
      const double up = batch_loss(m, {b}, {full});
      (*params[p])[i] = orig - h;
      const double down = batch_loss(m, {b}, {full});
      (*params[p])[i] = orig;
      const double num = (up - down) / (2 * h), a = (*analytic[p])[i];
      const double err = std::abs(a - num);
      EXPECT_LE(err, 1e-4 * std::max(std::abs(a), std::abs(num)) + 1e-8) << "param " << p << "[" << i << "]";
      worst = std::max(worst, err);
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(BagGradient, DroppedEncoderAndLockedGroupsGetNothing) {
  Rng rng(17);
  const ModelParams m = make_model(toy_spec(3, Aggregation::average), rng);
  MaterializedBag b = random_bag(3, 2, 0, rng);
  b.sub_bags[1].clear();

  ModelParams grads = zeros_like(m);
  accumulate_bag_gradient(m, b, Configuration::parse("101"), TrainableSet::everything(), grads);
  const ModelParams zero = zeros_like(m);
  EXPECT_EQ(grads.encoders[1], zero.encoders[1]);
  EXPECT_NE(grads.encoders[0], zero.encoders[0]);
  EXPECT_NE(grads.head, zero.head);

  ModelParams head_only = zeros_like(m);
  accumulate_bag_gradient(m, random_bag(3, 2, 0, rng), Configuration::full(3), TrainableSet::head_only(), head_only);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(head_only.encoders[j], zero.encoders[j]);
  EXPECT_NE(head_only.head, zero.head);

  ModelParams conv_only = zeros_like(m);
  accumulate_bag_gradient(m, random_bag(3, 2, 0, rng), Configuration::full(3), TrainableSet::encoder_layer(0),
                          conv_only);
  EXPECT_EQ(conv_only.head, zero.head);
  EXPECT_NE(conv_only.encoders[2].params[0].weights, zero.encoders[2].params[0].weights);
}

TEST(Checkpoint, ModelRoundTrip) {
  Rng rng(18);
  const ModelParams m = make_model(toy_spec(3, Aggregation::average), rng);
  ModelParams other = make_model(toy_spec(3, Aggregation::average), rng);
  ASSERT_NE(other, m);
  load_checkpoint(other, to_checkpoint(m));
  EXPECT_EQ(other, m);
  ModelParams wrong = make_model(toy_spec(2, Aggregation::average), rng);
  EXPECT_THROW(load_checkpoint(wrong, to_checkpoint(m)), std::exception);
}
