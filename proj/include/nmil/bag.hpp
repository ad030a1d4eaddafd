#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nmil/tensor.hpp"

namespace nmil {

class BagError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A raw image attached to a sub-bag, larger than the instance shape so crops are meaningful.
struct SourceImage {
  std::string id;
  std::shared_ptr<const Tensor> pixels;  // [C,H,W], values in [0,1]
};

enum class CropKind { center, top_left, top_right, bottom_left, bottom_right, random, full };

inline const char* to_string(CropKind k) {
  switch (k) {
    case CropKind::center: return "center";
    case CropKind::top_left: return "top_left";
    case CropKind::top_right: return "top_right";
    case CropKind::bottom_left: return "bottom_left";
    case CropKind::bottom_right: return "bottom_right";
    case CropKind::random: return "random";
    case CropKind::full: return "full";
  }
  return "?";
}

struct CropDescriptor {
  CropKind kind = CropKind::center;
  std::size_t offset_y = 0, offset_x = 0;
  friend bool operator==(const CropDescriptor&, const CropDescriptor&) = default;
};

/// One network input x_jk.
struct Instance {
  Tensor image;
  std::string source_id;
  CropDescriptor crop;
  bool synthetic = false;  // produced by a fill-in method rather than taken from a source image
};

struct SubBag {
  std::size_t index = 0;
  std::vector<SourceImage> images;
  bool empty() const noexcept { return images.empty(); }
};

struct Bag {
  std::size_t id = 0;
  std::size_t label = 0;
  std::vector<SubBag> sub_bags;
};

/// Presence tuple over sub-bags.
struct Configuration {
  std::vector<std::uint8_t> present;

  Configuration() = default;
  explicit Configuration(std::vector<std::uint8_t> bits) : present(std::move(bits)) {
    for (auto b : present) {
      if (b > 1) throw BagError("configuration entries must be 0 or 1");
    }
  }
  static Configuration full(std::size_t s) { return Configuration(std::vector<std::uint8_t>(s, 1)); }

  std::size_t size() const noexcept { return present.size(); }
  bool operator[](std::size_t j) const { return present.at(j) != 0; }
  std::size_t l1() const {
    return static_cast<std::size_t>(std::count(present.begin(), present.end(), std::uint8_t{1}));
  }
  bool is_full() const { return l1() == present.size(); }
  bool is_empty() const { return l1() == 0; }

  std::string to_string() const {
    std::string s;
    for (auto b : present) s += b ? '1' : '0';
    return s;
  }
  static Configuration parse(const std::string& s) {
    std::vector<std::uint8_t> bits;
    for (char c : s) {
      if (c != '0' && c != '1') throw BagError("bad configuration string '" + s + "'");
      bits.push_back(c == '1');
    }
    return Configuration(std::move(bits));
  }

  friend auto operator<=>(const Configuration&, const Configuration&) = default;
};

/// All 2^s - 1 non-empty configurations, in increasing binary order.
inline std::vector<Configuration> nonempty_configurations(std::size_t s) {
  std::vector<Configuration> out;
  for (std::size_t mask = 1; mask < (std::size_t{1} << s); ++mask) {
    std::vector<std::uint8_t> bits(s);
    for (std::size_t j = 0; j < s; ++j) bits[j] = (mask >> (s - 1 - j)) & 1U;
    out.emplace_back(std::move(bits));
  }
  return out;
}

inline void validate(const Bag& bag) {
  if (bag.sub_bags.empty()) throw BagError("bag " + std::to_string(bag.id) + " has no sub-bags");
  const bool any = std::any_of(bag.sub_bags.begin(), bag.sub_bags.end(), [](const SubBag& s) { return !s.empty(); });
  if (!any) throw BagError("bag " + std::to_string(bag.id) + " has only empty sub-bags");
}

inline Configuration configuration_of(const Bag& bag) {
  validate(bag);
  std::vector<std::uint8_t> bits;
  bits.reserve(bag.sub_bags.size());
  for (const SubBag& s : bag.sub_bags) bits.push_back(s.empty() ? 0 : 1);
  return Configuration(std::move(bits));
}

/// Bags grouped by their exact configuration; every bag lands in exactly one class.
struct DatasetPartition {
  std::map<Configuration, std::vector<std::size_t>> classes;  // configuration -> bag ids
  std::map<std::size_t, bool> is_test;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [c, ids] : classes) n += ids.size();
    return n;
  }
};

inline DatasetPartition partition_dataset(const std::vector<Bag>& bags) {
  DatasetPartition p;
  for (const Bag& b : bags) p.classes[configuration_of(b)].push_back(b.id);
  return p;
}

struct TestSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Uniformly random train/test split by bag id; round(fraction·n) bags go to test.
inline TestSplit split_test(const std::vector<Bag>& bags, double fraction, std::uint64_t seed) {
  if (bags.empty()) throw BagError("split_test: empty dataset");
  if (!(fraction > 0.0 && fraction < 1.0)) throw BagError("split_test: fraction must be in (0,1)");
  const auto n_test = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(bags.size())));
  if (n_test < 1) throw BagError("split_test: fraction selects no test bags");
  std::vector<std::size_t> order(bags.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  shuffle(order, rng);
  std::vector<bool> test(bags.size(), false);
  for (std::size_t i = 0; i < n_test; ++i) test[order[i]] = true;
  TestSplit split;
  for (std::size_t i = 0; i < bags.size(); ++i) (test[i] ? split.test : split.train).push_back(bags[i].id);
  return split;
}

/// Index from bag id to position.
inline std::map<std::size_t, std::size_t> index_by_id(const std::vector<Bag>& bags) {
  std::map<std::size_t, std::size_t> idx;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (!idx.emplace(bags[i].id, i).second) throw BagError("duplicate bag id " + std::to_string(bags[i].id));
  }
  return idx;
}

inline std::vector<Bag> select_bags(const std::vector<Bag>& bags, const std::vector<std::size_t>& ids) {
  const auto idx = index_by_id(bags);
  std::vector<Bag> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) out.push_back(bags.at(idx.at(id)));
  return out;
}

}  // namespace nmil
