#include "jaf/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "jaf/ops.hpp"

namespace jaf::fusion {

Grid pooled_grid(Grid grid, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0) throw ConfigError("softpool: empty pooling region");
  if (kernel > grid.height || kernel > grid.width) {
    throw ConfigError("softpool: kernel " + std::to_string(kernel) + " exceeds grid " +
                      std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  if ((grid.height - kernel) % stride != 0 || (grid.width - kernel) % stride != 0) {
    throw ConfigError("softpool: grid " + std::to_string(grid.height) + "x" +
                      std::to_string(grid.width) + " not divisible by stride " +
                      std::to_string(stride));
  }
  return {(grid.height - kernel) / stride + 1, (grid.width - kernel) / stride + 1};
}

Tensor softpool(const Tensor& x, Grid grid, std::size_t kernel, std::size_t stride) {
  if (x.rank() != 2 || x.dim(0) != grid.positions()) {
    throw DimensionError("softpool: input " + shape_str(x.shape()) + " does not fit a " +
                         std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
  }
  const Grid out_grid = pooled_grid(grid, kernel, stride);
  const std::size_t d = x.dim(1), np = out_grid.positions();
  std::vector<double> out(np * d);
  // Normalized weights per (output position, region member, channel), reused
  // by the backward rule.
  const std::size_t region = kernel * kernel;
  std::vector<double> weights(np * region * d);
  std::vector<std::size_t> source(np * region);
  for (std::size_t oy = 0; oy < out_grid.height; ++oy)
    for (std::size_t ox = 0; ox < out_grid.width; ++ox) {
      const std::size_t o = oy * out_grid.width + ox;
      for (std::size_t a = 0; a < kernel; ++a)
        for (std::size_t b = 0; b < kernel; ++b)
          source[o * region + a * kernel + b] = (oy * stride + a) * grid.width + ox * stride + b;
      for (std::size_t c = 0; c < d; ++c) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < region; ++r) mx = std::max(mx, x[source[o * region + r] * d + c]);
        double z = 0.0;
        for (std::size_t r = 0; r < region; ++r) {
          const double e = std::exp(x[source[o * region + r] * d + c] - mx);
          weights[(o * region + r) * d + c] = e;
          z += e;
        }
        double acc = 0.0;
        for (std::size_t r = 0; r < region; ++r) {
          auto& w = weights[(o * region + r) * d + c];
          w /= z;
          acc += w * x[source[o * region + r] * d + c];
        }
        out[o * d + c] = acc;
      }
    }
  return make_op_output({np, d}, std::move(out), {x}, [=](Tensor y) {
    return [=]() mutable {
      Tensor in = x;
      auto g = y.grad();
      auto xg = in.grad_buffer();
      // d out / d a_r = w_r (1 + a_r - out)
      for (std::size_t o = 0; o < np; ++o)
        for (std::size_t r = 0; r < region; ++r) {
          const std::size_t src = source[o * region + r];
          for (std::size_t c = 0; c < d; ++c) {
            const double w = weights[(o * region + r) * d + c];
            xg[src * d + c] += g[o * d + c] * w * (1.0 + in[src * d + c] - y[o * d + c]);
          }
        }
    };
  });
}

Tensor to_positions(const Tensor& grid_tensor) {
  if (grid_tensor.rank() != 3) {
    throw DimensionError("expected a [C x H x W] grid, got " + shape_str(grid_tensor.shape()));
  }
  const std::size_t c = grid_tensor.dim(0);
  return transpose(reshape(grid_tensor, {c, grid_tensor.numel() / c}));
}

// ---------------------------------------------------------------------------

ParamSet CmafParams::params() const {
  ParamSet ps;
  ps.add("entry_vision", entry_vision);
  ps.add("entry_text", entry_text);
  ps.add("wq1", wq1);
  ps.add("wk1", wk1);
  ps.add("wv1", wv1);
  ps.add("wq2", wq2);
  ps.add("wk2", wk2);
  ps.add("wv2", wv2);
  ps.add("post_vision", post_vision);
  ps.add("post_text", post_text);
  ps.add("gamma1", gamma1);
  ps.add("gamma2", gamma2);
  return ps;
}

CmafParams make_cmaf(std::size_t channels, std::mt19937_64& rng) {
  if (channels < 2 || channels % 2 != 0) {
    throw ConfigError("cross-modal block needs an even channel count, got " +
                      std::to_string(channels));
  }
  const std::size_t d = channels / 2;
  CmafParams p;
  p.entry_vision = make_linear(channels, d, rng);
  p.entry_text = make_linear(channels, d, rng);
  p.wq1 = glorot_uniform({d, d}, d, d, rng);
  p.wk1 = glorot_uniform({d, d}, d, d, rng);
  p.wv1 = glorot_uniform({d, d}, d, d, rng);
  p.wq2 = glorot_uniform({d, d}, d, d, rng);
  p.wk2 = glorot_uniform({d, d}, d, d, rng);
  p.wv2 = glorot_uniform({d, d}, d, d, rng);
  p.post_vision = make_linear(d, d, rng);
  p.post_text = make_linear(d, d, rng);
  p.gamma1 = Tensor::scalar(1.0);
  p.gamma2 = Tensor::scalar(1.0);
  return p;
}

MatchingScores matching_scores(const Tensor& x, const Tensor& y, const CmafParams& p) {
  if (x.shape() != y.shape()) {
    throw DimensionError("matching degrees: vision " + shape_str(x.shape()) + " vs text " +
                         shape_str(y.shape()));
  }
  auto q1 = matmul(x, p.wq1);
  auto k1 = matmul(x, p.wk1);
  auto q2 = matmul(y, p.wq2);
  auto k2 = matmul(y, p.wk2);
  return {matmul(q1, transpose(k2)), matmul(q2, transpose(k1))};
}

AttentionMaps matching_degrees(const Tensor& x, const Tensor& y, const CmafParams& p) {
  if (x.shape() != y.shape()) {
    throw DimensionError("matching degrees: vision " + shape_str(x.shape()) + " vs text " +
                         shape_str(y.shape()));
  }
  // s^T = K2(y) Q1(x)^T and t^T = K1(x) Q2(y)^T, built directly to skip the
  // [S x S] transposes.
  auto q1 = matmul(x, p.wq1);
  auto k1 = matmul(x, p.wk1);
  auto q2 = matmul(y, p.wq2);
  auto k2 = matmul(y, p.wk2);
  return {softmax(matmul(k2, transpose(q1)), 1), softmax(matmul(k1, transpose(q2)), 1)};
}

CmafOutput cmaf_forward(const Tensor& vision, const Tensor& text, Grid grid, const CmafParams& p) {
  if (vision.shape() != text.shape() || vision.rank() != 2 ||
      vision.dim(0) != grid.positions()) {
    throw DimensionError("cross-modal block: inputs " + shape_str(vision.shape()) + " and " +
                         shape_str(text.shape()) + " must share one " +
                         std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
  }
  if (vision.dim(1) != p.in_channels()) {
    throw DimensionError("cross-modal block: expected " + std::to_string(p.in_channels()) +
                         " channels, got " + std::to_string(vision.dim(1)));
  }
  const Grid out_grid = pooled_grid(grid, 2, 2);

  auto x = p.entry_vision(vision);
  auto y = p.entry_text(text);
  auto maps = matching_degrees(x, y, p);
  auto o_x = matmul(maps.beta, matmul(x, p.wv1));
  auto o_y = matmul(maps.rho, matmul(y, p.wv2));

  auto o_v = p.post_vision(add(softpool(o_x, grid, 2, 2), softpool(x, grid, 2, 2)));
  auto o_w = p.post_text(add(softpool(o_y, grid, 2, 2), softpool(y, grid, 2, 2)));
  auto fused = concat({mul_scalar(softmax(o_v, 1), p.gamma1), mul_scalar(softmax(o_w, 1), p.gamma2)},
                      1);
  return {fused, maps, out_grid};
}

CmafOutput cmaf_forward(const Tensor& v_tilde, const Tensor& t_tilde, const CmafParams& p) {
  if (v_tilde.shape() != t_tilde.shape() || v_tilde.rank() != 3) {
    throw DimensionError("cross-modal block: unified shapes differ, " +
                         shape_str(v_tilde.shape()) + " vs " + shape_str(t_tilde.shape()));
  }
  const Grid grid{v_tilde.dim(1), v_tilde.dim(2)};
  return cmaf_forward(to_positions(v_tilde), to_positions(t_tilde), grid, p);
}

// ---------------------------------------------------------------------------

ParamSet MhsafParams::params() const {
  ParamSet ps;
  ps.add("wq", wq);
  ps.add("wk", wk);
  ps.add("wv", wv);
  ps.add("out", out);
  return ps;
}

MhsafParams make_mhsaf(std::size_t channels, std::size_t heads, std::mt19937_64& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("self-attention block: " + std::to_string(channels) +
                      " channels cannot split into " + std::to_string(heads) + " heads");
  }
  MhsafParams p;
  p.wq = glorot_uniform({channels, channels}, channels, channels, rng);
  p.wk = glorot_uniform({channels, channels}, channels, channels, rng);
  p.wv = glorot_uniform({channels, channels}, channels, channels, rng);
  p.out = make_linear(channels, channels, rng);
  p.heads = heads;
  return p;
}

MhsafOutput mhsaf_forward(const Tensor& f, const MhsafParams& p) {
  if (f.rank() != 2 || f.dim(1) != p.channels()) {
    throw DimensionError("self-attention block: input " + shape_str(f.shape()) + " vs " +
                         std::to_string(p.channels()) + " channels");
  }
  if (p.heads == 0 || p.channels() % p.heads != 0) {
    throw ConfigError("self-attention block: channels not divisible by head count");
  }
  const std::size_t dh = p.channels() / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto q = matmul(f, p.wq);
  auto k = matmul(f, p.wk);
  auto v = matmul(f, p.wv);
  MhsafOutput result;
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto qh = p.heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    auto kh = p.heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
    auto vh = p.heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
    auto att = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
    heads.push_back(matmul(att, vh));
    result.attention.push_back(att);
  }
  auto merged = p.heads == 1 ? heads.front() : concat(heads, 1);
  result.output = add(f, p.out(merged));
  return result;
}

void write_attention_csv(const std::string& path, const AttentionMaps& maps) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "j,i,beta,rho\n";
  const std::size_t s = maps.beta.dim(0);
  char buf[96];
  for (std::size_t j = 0; j < s; ++j)
    for (std::size_t i = 0; i < s; ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g\n", j, i, maps.beta.at(j, i),
                    maps.rho.at(j, i));
      out << buf;
    }
}

}  // namespace jaf::fusion
