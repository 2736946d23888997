#pragma once

// Joint vision-text objective: intra/inter-modal alignment, similarity
// distribution matching, masked token modelling and their weighted sum.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "jaf/encoders.hpp"
#include "jaf/tensor.hpp"

namespace jaf::loss {

/// n vision/text representation pairs plus identity labels. Row i of `vision`
/// and row i of `text` come from the same sample.
struct PairBatch {
  Tensor vision;  // [n x D]
  Tensor text;    // [n x D]
  std::vector<std::int64_t> identity;

  std::size_t size() const { return identity.size(); }
};

/// l[i, j] = 1 iff identity[i] == identity[j].
std::vector<double> matching_matrix(const std::vector<std::int64_t>& identity);

/// How the positive is chosen for intra-modal anchors. Negatives are always the
/// samples with a different identity.
enum class IntraPositive {
  NextSameIdentity,  // next sample (cyclically, in batch order) sharing the identity
};

struct NegativeSets {
  std::vector<std::vector<std::size_t>> negatives;  // per anchor
  std::vector<std::int64_t> intra_positive;         // -1 when the anchor has none
};

NegativeSets build_negative_sets(const std::vector<std::int64_t>& identity,
                                 IntraPositive strategy = IntraPositive::NextSameIdentity);

/// Mean over anchors i with a positive and a non-empty negative set of
///   -log( d(a_i, b_p) / (d(a_i, b_p) + sum_{k in N_i} d(a_i, b_k)) ),  d(a,b) = exp(a^T b).
/// `anchors` and `targets` are used as given (callers normalize). Returns an
/// undefined tensor when no anchor qualifies.
Tensor alignment_term(const Tensor& anchors, const Tensor& targets,
                      const std::vector<std::int64_t>& positive, const NegativeSets& sets);

struct AlignmentTerms {
  Tensor t2t, v2v, t2v, v2t;  // undefined when the direction has no valid anchor
  Tensor total;
};

/// Sum of the four directional alignment terms over L2-normalized
/// representations. Throws Error when no anchor has a negative.
AlignmentTerms imima_terms(const PairBatch& batch,
                           IntraPositive strategy = IntraPositive::NextSameIdentity);
Tensor imima_loss(const PairBatch& batch, IntraPositive strategy = IntraPositive::NextSameIdentity);

struct LossWeights {
  double alpha = 0.84;   // similarity distribution matching
  double beta = 0.45;    // masked token modelling
  double tau = 0.02;     // cosine-similarity temperature
  double epsilon = 1e-8; // added to q inside the KL log
};

void validate(const LossWeights& w);

/// p[i, j] = softmax_j(cos(v_i, t_j) / tau) as a [n x n] tensor.
Tensor matching_probabilities(const Tensor& vision, const Tensor& text, double tau);

/// KL(p || q + eps) averaged over rows, summed over both directions.
Tensor sdm_loss(const PairBatch& batch, const LossWeights& weights);

/// Maps a (masked) sequence to per-position vocabulary logits [S x V].
using TokenModel = std::function<Tensor(const enc::TextSequence&)>;

struct MlmResult {
  Tensor loss;
  std::vector<std::size_t> masked_positions;  // ascending
};

/// Masks ceil(mask_rate * non_pad) positions chosen by `rng`, replaces them
/// with `mask_token`, and returns the mean cross-entropy of the model's
/// predictions of the original tokens at those positions.
MlmResult mlm_loss(const enc::TextSequence& seq, double mask_rate, const TokenModel& model,
                   std::mt19937_64& rng, std::int64_t mask_token);

/// l_imima + alpha * l_sdm + beta * l_mlm. `alpha` and `beta` are
/// single-element tensors so they can be trained or frozen.
Tensor vtmf_loss(const Tensor& l_imima, const Tensor& l_sdm, const Tensor& l_mlm,
                 const Tensor& alpha, const Tensor& beta);
Tensor vtmf_loss(const Tensor& l_imima, const Tensor& l_sdm, const Tensor& l_mlm,
                 const LossWeights& weights);

}  // namespace jaf::loss
