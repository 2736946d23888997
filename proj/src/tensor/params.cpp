#include "jaf/params.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "jaf/ops.hpp"

namespace jaf {

Tensor Linear::operator()(const Tensor& x) const {
  auto y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                      std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias) {
  Linear l;
  l.weight = glorot_uniform({in, out}, in, out, rng);
  if (with_bias) l.bias = Tensor::zeros({out});
  return l;
}

void ParamSet::add(std::string name, const Tensor& t) {
  if (!t.defined()) return;
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  entries_.emplace_back(std::move(name), t);
}

void ParamSet::add(const std::string& prefix, const Linear& l) {
  add(prefix + ".weight", l.weight);
  add(prefix + ".bias", l.bias);
}

void ParamSet::append(const std::string& prefix, const ParamSet& other) {
  for (const auto& [name, t] : other.entries_) add(prefix + "." + name, t);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw ConfigError("no parameter named '" + name + "'");
}

void ParamSet::zero_grad() const {
  for (const auto& e : entries_) e.second.clear_grad();
}

void ParamSet::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw Error("cannot write manifest in " + dir);
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [name, t] = entries_[i];
    const std::string file = "p" + std::to_string(i) + ".bin";
    save_tensor(dir + "/" + file, t);
    manifest << name << ' ' << file << ' ' << shape_str(t.shape()) << '\n';
  }
}

void ParamSet::load(const std::string& dir) const {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw Error("missing manifest in " + dir);
  std::string line;
  std::size_t loaded = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, file;
    ls >> name >> file;
    const Tensor& dst = get(name);
    auto src = load_tensor(dir + "/" + file);
    if (src.shape() != dst.shape()) {
      throw DimensionError("checkpoint block '" + name + "' has shape " +
                           shape_str(src.shape()) + ", model expects " + shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    ++loaded;
  }
  if (loaded != entries_.size()) {
    throw Error("checkpoint in " + dir + " holds " + std::to_string(loaded) + " of " +
                std::to_string(entries_.size()) + " parameter blocks");
  }
}

}  // namespace jaf
