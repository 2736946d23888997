#pragma once

// Joint-attention fusion: SoftPool, the cross-modal attention fusion block and
// the multi-head self-attention fusion block.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "jaf/encoders.hpp"
#include "jaf/params.hpp"

namespace jaf::fusion {

/// Spatial layout of a position-major feature matrix [S x d], S = height * width.
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t positions() const { return height * width; }
};

/// Exponentially weighted average over each kernel x kernel region and channel:
/// sum_i softmax(a)_i * a_i. Input [S x d] laid out on `grid`; output is
/// [S' x d] on the pooled grid.
Tensor softpool(const Tensor& x, Grid grid, std::size_t kernel, std::size_t stride);
Grid pooled_grid(Grid grid, std::size_t kernel, std::size_t stride);

/// [C x H x W] -> [H*W x C].
Tensor to_positions(const Tensor& grid_tensor);

struct CmafParams {
  Linear entry_vision, entry_text;          // C -> d
  Tensor wq1, wk1, wv1;                     // vision branch, [d x d_k], [d x d_k], [d x d_v]
  Tensor wq2, wk2, wv2;                     // text branch
  Linear post_vision, post_text;            // d_v -> d_v
  Tensor gamma1, gamma2;                    // [1]

  std::size_t in_channels() const { return entry_vision.in_features(); }
  std::size_t reduced() const { return entry_vision.out_features(); }
  std::size_t value_dim() const { return wv1.dim(1); }
  ParamSet params() const;
};

/// Entry FC halves the channels; d_k = d_v = C/2; gammas start at 1.
CmafParams make_cmaf(std::size_t channels, std::mt19937_64& rng);

struct MatchingScores {
  Tensor s;  // s[i, j] = (w^{Q1} x_i)^T (w^{K2} y_j)
  Tensor t;  // t[i, j] = (w^{Q2} y_i)^T (w^{K1} x_j)
};

struct AttentionMaps {
  Tensor beta;  // [S x S], row j is a distribution over vision positions i
  Tensor rho;   // [S x S], row j is a distribution over text positions i
};

MatchingScores matching_scores(const Tensor& x, const Tensor& y, const CmafParams& p);
/// Each matching-degree distribution is normalized over the attended (source)
/// positions: beta[j, :] = softmax_i s[i, j], rho[j, :] = softmax_i t[i, j].
AttentionMaps matching_degrees(const Tensor& x, const Tensor& y, const CmafParams& p);

struct CmafOutput {
  Tensor fused;  // f^cmf [S/4 x 2 d_v]
  AttentionMaps maps;
  Grid grid;     // grid of `fused`
};

/// Inputs are position-major [S x C] matrices on `grid`.
CmafOutput cmaf_forward(const Tensor& vision, const Tensor& text, Grid grid, const CmafParams& p);
/// Inputs are unified grids [C x H x W].
CmafOutput cmaf_forward(const Tensor& v_tilde, const Tensor& t_tilde, const CmafParams& p);

struct MhsafParams {
  Tensor wq, wk, wv;  // [c x c]
  Linear out;         // c -> c
  std::size_t heads = 4;

  std::size_t channels() const { return wq.dim(0); }
  ParamSet params() const;
};

MhsafParams make_mhsaf(std::size_t channels, std::size_t heads, std::mt19937_64& rng);

struct MhsafOutput {
  Tensor output;                   // [S x c]
  std::vector<Tensor> attention;   // one [S x S] map per head
};

/// Multi-head scaled dot-product self-attention with head concat, output
/// projection and a residual connection.
MhsafOutput mhsaf_forward(const Tensor& f, const MhsafParams& p);

/// Writes `j,i,beta,rho` rows for every (j, i) pair.
void write_attention_csv(const std::string& path, const AttentionMaps& maps);

}  // namespace jaf::fusion
