#include "jaf/encoders.hpp"

#include <cmath>
#include <string>

#include "jaf/ops.hpp"

namespace jaf::enc {

std::size_t TextSequence::non_pad_count() const {
  std::size_t n = 0;
  for (bool pad : pad_mask) n += pad ? 0 : 1;
  return n;
}

void validate(const TextSequence& seq) {
  if (seq.token_ids.empty()) throw DimensionError("text sequence is empty");
  if (seq.pad_mask.size() != seq.token_ids.size()) {
    throw DimensionError("pad mask length " + std::to_string(seq.pad_mask.size()) +
                         " differs from sequence length " + std::to_string(seq.token_ids.size()));
  }
  for (auto id : seq.token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= seq.vocab_size) {
      throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of size " +
                           std::to_string(seq.vocab_size));
    }
  }
}

ParamSet TextEncoderParams::params() const {
  ParamSet ps;
  ps.add("embedding", embedding);
  ps.add("position", position);
  ps.add("query", query);
  ps.add("key", key);
  ps.add("value", value);
  ps.add("out", out);
  return ps;
}

TextEncoderParams make_text_encoder(std::size_t vocab, std::size_t seq_len, std::size_t dim,
                                    std::mt19937_64& rng) {
  TextEncoderParams p;
  std::normal_distribution<double> n(0.0, 0.5);
  std::vector<double> e(vocab * dim), pos(seq_len * dim);
  for (auto& v : e) v = n(rng);
  for (auto& v : pos) v = 0.2 * n(rng);
  p.embedding = Tensor({vocab, dim}, std::move(e));
  p.position = Tensor({seq_len, dim}, std::move(pos));
  p.query = glorot_uniform({dim, dim}, dim, dim, rng);
  p.key = glorot_uniform({dim, dim}, dim, dim, rng);
  p.value = glorot_uniform({dim, dim}, dim, dim, rng);
  p.out = glorot_uniform({dim, dim}, dim, dim, rng);
  return p;
}

Tensor encode_text(const TextSequence& seq, const TextEncoderParams& p) {
  validate(seq);
  const std::size_t s = seq.length(), d = p.dim();
  if (seq.vocab_size != p.embedding.dim(0)) {
    throw DimensionError("sequence vocabulary " + std::to_string(seq.vocab_size) +
                         " differs from embedding table " + shape_str(p.embedding.shape()));
  }
  if (p.position.dim(0) != s) {
    throw DimensionError("sequence length " + std::to_string(s) + " differs from position table " +
                         shape_str(p.position.shape()));
  }
  auto h = add(gather_rows(p.embedding, seq.token_ids), p.position);
  auto q = matmul(h, p.query);
  auto k = matmul(h, p.key);
  auto v = matmul(h, p.value);

  // Padded keys receive a large negative score; padded rows are zeroed below.
  std::vector<double> key_mask(s * s, 0.0), row_mask(s * d, 1.0);
  for (std::size_t j = 0; j < s; ++j) {
    if (!seq.pad_mask[j]) continue;
    for (std::size_t i = 0; i < s; ++i) key_mask[i * s + j] = -1e9;
    for (std::size_t c = 0; c < d; ++c) row_mask[j * d + c] = 0.0;
  }
  auto scores = add(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))),
                    Tensor({s, s}, std::move(key_mask)));
  auto attended = matmul(softmax(scores, 1), v);
  auto out = add(h, matmul(attended, p.out));
  return mul(out, Tensor({s, d}, std::move(row_mask)));
}

Tensor pool_text(const Tensor& f_t, const TextSequence& seq) {
  const std::size_t s = seq.length();
  const std::size_t count = seq.non_pad_count();
  if (count == 0) throw DimensionError("pool_text: sequence has no tokens");
  std::vector<double> w(s, 0.0);
  for (std::size_t i = 0; i < s; ++i) w[i] = seq.pad_mask[i] ? 0.0 : 1.0 / double(count);
  return matmul(Tensor({1, s}, std::move(w)), f_t);
}

// ---------------------------------------------------------------------------

ParamSet VisionEncoderParams::params() const {
  ParamSet ps;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    ps.add("conv" + std::to_string(i) + ".kernel", kernels[i]);
    if (i < biases.size()) ps.add("conv" + std::to_string(i) + ".bias", biases[i]);
  }
  return ps;
}

VisionEncoderParams make_vision_encoder(std::array<std::size_t, 3> extents,
                                        const std::vector<std::size_t>& channels,
                                        std::mt19937_64& rng, bool with_bias) {
  if (channels.size() < 2) throw ConfigError("vision encoder needs input and output channels");
  VisionEncoderParams p;
  p.input_extents = extents;
  for (std::size_t i = 1; i < channels.size(); ++i) {
    const std::size_t cin = channels[i - 1], cout = channels[i];
    const std::size_t fan_in = cin * 27;
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / double(fan_in)));
    std::vector<double> k(cout * cin * 27);
    for (auto& v : k) v = n(rng);
    p.kernels.emplace_back(Shape{cout, cin, 3, 3, 3}, std::move(k));
    p.biases.push_back(with_bias ? Tensor::zeros({cout}) : Tensor{});
  }
  return p;
}

VisionFeatures encode_vision(const Tensor& volume, const VisionEncoderParams& p) {
  if (volume.rank() != 3 || volume.dim(0) != p.input_extents[0] ||
      volume.dim(1) != p.input_extents[1] || volume.dim(2) != p.input_extents[2]) {
    throw DimensionError("vision encoder expects a " +
                         shape_str({p.input_extents[0], p.input_extents[1], p.input_extents[2]}) +
                         " volume, got " + shape_str(volume.shape()));
  }
  auto x = reshape(volume, {1, volume.dim(0), volume.dim(1), volume.dim(2)});
  for (std::size_t i = 0; i < p.kernels.size(); ++i) {
    const Tensor bias = i < p.biases.size() ? p.biases[i] : Tensor{};
    x = conv3(x, p.kernels[i], p.stride, bias);
    if (p.relu) x = relu(x);
  }
  const std::size_t c = x.dim(0);
  auto pooled = mean_axis(reshape(x, {c, x.numel() / c}), 1);
  return {reshape(pooled, {1, c}), x};
}

// ---------------------------------------------------------------------------

void validate_unified(const UnifiedShape& shape) {
  if (shape.channels == 0 || shape.height == 0 || shape.width == 0 || shape.height % 16 != 0 ||
      shape.width % 16 != 0) {
    throw ConfigError("unified grid " +
                      shape_str({shape.channels, shape.height, shape.width}) +
                      " needs height and width divisible by 16");
  }
}

TrtParams make_trt(std::size_t seq_len, const UnifiedShape& shape, std::mt19937_64& rng) {
  return {make_linear(seq_len * seq_len, shape.numel(), rng)};
}

VrtParams make_vrt(std::size_t vision_dim, const UnifiedShape& shape, std::mt19937_64& rng) {
  validate_unified(shape);
  return {make_linear(vision_dim, shape.channels * (shape.height / 16) * (shape.width / 16), rng)};
}

Tensor gram(const Tensor& f_t) { return matmul(f_t, transpose(f_t)); }

Tensor trt_transform(const Tensor& f_t, const TrtParams& p, const UnifiedShape& shape) {
  if (f_t.rank() != 2 || f_t.dim(0) < 1) throw DimensionError("trt: f^t must be [S x D]");
  const std::size_t s = f_t.dim(0);
  if (p.fc.in_features() != s * s || p.fc.out_features() != shape.numel()) {
    throw DimensionError("trt: FC " + shape_str(p.fc.weight.shape()) + " incompatible with S=" +
                         std::to_string(s) + " and grid of " + std::to_string(shape.numel()));
  }
  auto flat = reshape(gram(f_t), {1, s * s});
  return reshape(p.fc(flat), {shape.channels, shape.height, shape.width});
}

Tensor vrt_transform(const Tensor& f_v, const VrtParams& p, const UnifiedShape& shape) {
  validate_unified(shape);
  const std::size_t sh = shape.height / 16, sw = shape.width / 16;
  if (f_v.numel() != p.fc.in_features()) {
    throw DimensionError("vrt: f^v " + shape_str(f_v.shape()) + " vs FC " +
                         shape_str(p.fc.weight.shape()));
  }
  if (p.fc.out_features() != shape.channels * sh * sw) {
    throw DimensionError("vrt: FC output does not match the seed grid");
  }
  auto grid = reshape(p.fc(reshape(f_v, {1, f_v.numel()})), {shape.channels, sh, sw});
  for (std::size_t i = 0; i < kVrtUpsamplings; ++i) grid = upsample_nearest(grid, 2);
  return grid;
}

}  // namespace jaf::enc
