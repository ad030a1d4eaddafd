#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "nmil/autograd.hpp"
#include "nmil/bag.hpp"
#include "nmil/tensor.hpp"

namespace nmil {

/// Block-structured 0/1 mask over the concatenated sub-bag embeddings.
struct BlockMask {
  Configuration config;
  std::vector<std::size_t> block_lengths;
  Tensor mask;  // length = sum of block_lengths
};

inline BlockMask build_mask(const Configuration& config, std::vector<std::size_t> block_lengths) {
  if (config.size() != block_lengths.size()) {
    throw ShapeError("build_mask: configuration has " + std::to_string(config.size()) + " entries but " +
                     std::to_string(block_lengths.size()) + " block lengths were given");
  }
  if (config.is_empty()) throw BagError("build_mask: all-zero configuration " + config.to_string());
  std::vector<double> m;
  for (std::size_t j = 0; j < config.size(); ++j) {
    if (block_lengths[j] == 0) throw ShapeError("build_mask: zero-length block " + std::to_string(j));
    m.insert(m.end(), block_lengths[j], config[j] ? 1.0 : 0.0);
  }
  return {config, std::move(block_lengths), Tensor::vector(std::move(m))};
}

/// Hadamard product with the mask. No rescaling of the surviving blocks.
inline Tensor apply_mask(const Tensor& embedding, const BlockMask& mask) {
  if (embedding.size() != mask.mask.size()) {
    throw ShapeError("apply_mask: embedding length " + std::to_string(embedding.size()) + " vs mask length " +
                     std::to_string(mask.mask.size()));
  }
  Tensor out = embedding;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask.mask[i];
  return out;
}

inline NodeId apply_mask(Graph& g, NodeId embedding, const BlockMask& mask) {
  if (g.value(embedding).size() != mask.mask.size()) {
    throw ShapeError("apply_mask: embedding length " + std::to_string(g.value(embedding).size()) +
                     " vs mask length " + std::to_string(mask.mask.size()));
  }
  return g.hadamard(embedding, g.constant(mask.mask));
}

}  // namespace nmil
