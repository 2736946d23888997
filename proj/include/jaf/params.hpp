#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "jaf/tensor.hpp"

namespace jaf {

/// Affine map y = x W + b over the rows of x. `bias` may be undefined.
struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

/// Glorot-uniform weights, zero bias.
Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias = true);
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// Ordered collection of named parameter blocks. Names are unique.
class ParamSet {
 public:
  void add(std::string name, const Tensor& t);
  void add(const std::string& prefix, const Linear& l);
  void append(const std::string& prefix, const ParamSet& other);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  void zero_grad() const;

  /// Writes `<dir>/manifest.txt` (one "name file shape" line per block) and one
  /// tensor file per block.
  void save(const std::string& dir) const;
  /// Overwrites values of the blocks in this set from a directory written by
  /// save(). Every block must be present with an identical shape.
  void load(const std::string& dir) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace jaf
