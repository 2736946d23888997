#pragma once

// Desk-scale text and vision encoders and the two representation
// transformations that bring both modalities onto one channel grid.

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "jaf/params.hpp"
#include "jaf/tensor.hpp"

namespace jaf::enc {

struct TextSequence {
  std::vector<std::int64_t> token_ids;
  std::size_t vocab_size = 0;
  std::vector<bool> pad_mask;  // true where the position is padding

  std::size_t length() const { return token_ids.size(); }
  std::size_t non_pad_count() const;
};

/// Throws DimensionError when an id is outside [0, vocab) or the mask length
/// differs from the sequence length.
void validate(const TextSequence& seq);

/// Scan volume [D x H x W]. Values are Hounsfield units before preprocessing
/// and standardized units after.
struct Volume {
  Tensor values;
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
};

/// Channel grid shared by both modalities after TRT/VRT.
struct UnifiedShape {
  std::size_t channels = 8;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t positions() const { return height * width; }
  std::size_t numel() const { return channels * height * width; }
  bool operator==(const UnifiedShape&) const = default;
};

// ---------------------------------------------------------------------------
// Text encoder: embedding + learned positions + one residual self-attention
// layer. Output rows at padded positions are zero.

struct TextEncoderParams {
  Tensor embedding;  // [V x D]
  Tensor position;   // [S x D]
  Tensor query, key, value, out;  // [D x D]

  std::size_t dim() const { return embedding.dim(1); }
  ParamSet params() const;
};

TextEncoderParams make_text_encoder(std::size_t vocab, std::size_t seq_len, std::size_t dim,
                                    std::mt19937_64& rng);

/// Returns f^t [S x D].
Tensor encode_text(const TextSequence& seq, const TextEncoderParams& p);

/// Mean of the non-padded rows of f^t, [1 x D]. Used as the sequence-level
/// text embedding by the alignment losses.
Tensor pool_text(const Tensor& f_t, const TextSequence& seq);

// ---------------------------------------------------------------------------
// Vision encoder: stride-2 conv3 stages with ReLU, then global average pool.

struct VisionEncoderParams {
  std::array<std::size_t, 3> input_extents{32, 32, 32};
  std::vector<Tensor> kernels;  // stage i: [C_i x C_{i-1} x 3 x 3 x 3]
  std::vector<Tensor> biases;   // undefined entries mean bias-free
  bool relu = true;
  std::size_t stride = 2;

  std::size_t out_dim() const { return kernels.back().dim(0); }
  ParamSet params() const;
};

VisionEncoderParams make_vision_encoder(std::array<std::size_t, 3> extents,
                                        const std::vector<std::size_t>& channels,
                                        std::mt19937_64& rng, bool with_bias = true);

struct VisionFeatures {
  Tensor representation;   // f^v [1 x D_v]
  Tensor last_activation;  // output of the last conv stage [C x d x h x w]
};

/// `volume` is [D x H x W] in standardized units.
VisionFeatures encode_vision(const Tensor& volume, const VisionEncoderParams& p);

// ---------------------------------------------------------------------------
// Representation transformations.

struct TrtParams {
  Linear fc;  // [S_t^2 -> C*H*W]
};

struct VrtParams {
  Linear fc;  // [D_v -> C*(H/16)*(W/16)]
};

inline constexpr std::size_t kVrtUpsamplings = 4;

TrtParams make_trt(std::size_t seq_len, const UnifiedShape& shape, std::mt19937_64& rng);
VrtParams make_vrt(std::size_t vision_dim, const UnifiedShape& shape, std::mt19937_64& rng);

/// f^t (f^t)^T, [S x S].
Tensor gram(const Tensor& f_t);

/// f^t [S x D] -> [C x H x W]: Gram matrix, flatten, FC, reshape.
Tensor trt_transform(const Tensor& f_t, const TrtParams& p, const UnifiedShape& shape);

/// f^v [1 x D_v] -> [C x H x W]: FC to a [C x H/16 x W/16] seed grid, then four
/// x2 nearest-neighbour up-samplings.
Tensor vrt_transform(const Tensor& f_v, const VrtParams& p, const UnifiedShape& shape);

/// Throws ConfigError unless height and width are divisible by 16.
void validate_unified(const UnifiedShape& shape);

}  // namespace jaf::enc
