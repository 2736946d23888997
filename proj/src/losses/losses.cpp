#include "jaf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "jaf/ops.hpp"

namespace jaf::loss {

std::vector<double> matching_matrix(const std::vector<std::int64_t>& identity) {
  const std::size_t n = identity.size();
  std::vector<double> l(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) l[i * n + j] = identity[i] == identity[j] ? 1.0 : 0.0;
  return l;
}

NegativeSets build_negative_sets(const std::vector<std::int64_t>& identity, IntraPositive) {
  const std::size_t n = identity.size();
  NegativeSets sets;
  sets.negatives.resize(n);
  sets.intra_positive.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (identity[j] != identity[i]) sets.negatives[i].push_back(j);
    }
    for (std::size_t step = 1; step < n; ++step) {
      const std::size_t j = (i + step) % n;
      if (identity[j] == identity[i]) {
        sets.intra_positive[i] = static_cast<std::int64_t>(j);
        break;
      }
    }
  }
  return sets;
}

Tensor alignment_term(const Tensor& anchors, const Tensor& targets,
                      const std::vector<std::int64_t>& positive, const NegativeSets& sets) {
  const std::size_t n = anchors.dim(0);
  if (targets.dim(0) != n || positive.size() != n || sets.negatives.size() != n) {
    throw DimensionError("alignment term: batch size mismatch");
  }
  // Support mask: positive plus negatives per anchor row; valid-anchor weights.
  std::vector<double> support(n * n, 0.0), weight(n, 0.0);
  std::vector<std::int64_t> pos_index(n, 0);
  std::size_t valid = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i] < 0 || sets.negatives[i].empty()) continue;
    ++valid;
    pos_index[i] = positive[i];
    support[i * n + static_cast<std::size_t>(positive[i])] = 1.0;
    for (auto k : sets.negatives[i]) support[i * n + k] = 1.0;
  }
  if (valid == 0) return Tensor{};
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i] >= 0 && !sets.negatives[i].empty()) weight[i] = 1.0 / double(valid);
  }
  // Rows of invalid anchors get a dummy unit entry so the log stays finite;
  // their weight is zero.
  for (std::size_t i = 0; i < n; ++i) {
    if (weight[i] == 0.0) support[i * n + i] = 1.0;
  }
  auto sims = matmul(anchors, transpose(targets));
  auto denom = sum_axis(mul(exp(sims), Tensor({n, n}, std::move(support))), 1);
  auto per_anchor = sub(log(denom), gather_elements(sims, pos_index));
  return sum(mul(per_anchor, Tensor({n}, std::move(weight))));
}

AlignmentTerms imima_terms(const PairBatch& batch, IntraPositive strategy) {
  const std::size_t n = batch.size();
  if (batch.vision.rank() != 2 || batch.text.rank() != 2 || batch.vision.dim(0) != n ||
      batch.text.dim(0) != n || batch.vision.dim(1) != batch.text.dim(1)) {
    throw DimensionError("pair batch: vision " + shape_str(batch.vision.shape()) + ", text " +
                         shape_str(batch.text.shape()) + ", " + std::to_string(n) + " labels");
  }
  const auto sets = build_negative_sets(batch.identity, strategy);
  if (std::all_of(sets.negatives.begin(), sets.negatives.end(),
                  [](const auto& s) { return s.empty(); })) {
    throw Error("alignment loss undefined: every sample shares one identity, no negatives");
  }
  std::vector<std::int64_t> self(n);
  std::iota(self.begin(), self.end(), 0);

  auto v = normalize_rows(batch.vision);
  auto t = normalize_rows(batch.text);
  AlignmentTerms terms;
  terms.t2t = alignment_term(t, t, sets.intra_positive, sets);
  terms.v2v = alignment_term(v, v, sets.intra_positive, sets);
  terms.t2v = alignment_term(t, v, self, sets);
  terms.v2t = alignment_term(v, t, self, sets);
  for (const auto* term : {&terms.t2t, &terms.v2v, &terms.t2v, &terms.v2t}) {
    if (!term->defined()) continue;
    terms.total = terms.total.defined() ? add(terms.total, *term) : *term;
  }
  return terms;
}

Tensor imima_loss(const PairBatch& batch, IntraPositive strategy) {
  return imima_terms(batch, strategy).total;
}

void validate(const LossWeights& w) {
  if (!(w.tau > 0.0)) throw ConfigError("temperature must be positive");
  if (!(w.epsilon > 0.0)) throw ConfigError("KL smoothing constant must be positive");
  if (w.alpha < 0.0 || w.beta < 0.0) throw ConfigError("loss weights must be non-negative");
}

Tensor matching_probabilities(const Tensor& vision, const Tensor& text, double tau) {
  auto sim = matmul(normalize_rows(vision), transpose(normalize_rows(text)));
  return softmax(scale(sim, 1.0 / tau), 1);
}

namespace {

// (1/n) sum_i sum_j p_ij (log p_ij - log(q_ij + eps)) with p = softmax(logits).
Tensor kl_to_targets(const Tensor& logits, const std::vector<double>& log_q, std::size_t n) {
  auto logp = log_softmax(logits, 1);
  auto p = exp(logp);
  return scale(sum(mul(p, sub(logp, Tensor({n, n}, log_q)))), 1.0 / double(n));
}

}  // namespace

Tensor sdm_loss(const PairBatch& batch, const LossWeights& weights) {
  validate(weights);
  const std::size_t n = batch.size();
  if (n < 2) throw Error("similarity distribution matching needs at least two pairs");
  if (batch.vision.dim(0) != n || batch.text.dim(0) != n) {
    throw DimensionError("pair batch rows differ from label count");
  }
  const auto l = matching_matrix(batch.identity);
  std::vector<double> log_q(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t k = 0; k < n; ++k) row += l[i * n + k];
    for (std::size_t j = 0; j < n; ++j)
      log_q[i * n + j] = std::log(l[i * n + j] / row + weights.epsilon);
  }
  auto sim = matmul(normalize_rows(batch.vision), transpose(normalize_rows(batch.text)));
  auto logits = scale(sim, 1.0 / weights.tau);
  auto v2t = kl_to_targets(logits, log_q, n);
  // l is symmetric, so the text-to-vision targets are the same rows.
  auto t2v = kl_to_targets(transpose(logits), log_q, n);
  return add(v2t, t2v);
}

MlmResult mlm_loss(const enc::TextSequence& seq, double mask_rate, const TokenModel& model,
                   std::mt19937_64& rng, std::int64_t mask_token) {
  if (!(mask_rate > 0.0) || mask_rate > 1.0) throw ConfigError("mask rate must be in (0, 1]");
  enc::validate(seq);
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < seq.length(); ++i) {
    if (!seq.pad_mask[i]) maskable.push_back(i);
  }
  if (maskable.empty()) throw Error("masked token loss: sequence has no maskable tokens");
  const auto count = static_cast<std::size_t>(std::ceil(mask_rate * double(maskable.size())));
  std::shuffle(maskable.begin(), maskable.end(), rng);
  std::vector<std::size_t> chosen(maskable.begin(),
                                  maskable.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(chosen.begin(), chosen.end());

  enc::TextSequence masked = seq;
  std::vector<std::int64_t> targets;
  for (auto pos : chosen) {
    targets.push_back(seq.token_ids[pos]);
    masked.token_ids[pos] = mask_token;
  }
  auto logits = model(masked);
  if (logits.rank() != 2 || logits.dim(0) != seq.length()) {
    throw DimensionError("token model returned " + shape_str(logits.shape()) + " for " +
                         std::to_string(seq.length()) + " positions");
  }
  std::vector<double> picker(count * seq.length(), 0.0);
  for (std::size_t r = 0; r < count; ++r) picker[r * seq.length() + chosen[r]] = 1.0;
  auto rows = matmul(Tensor({count, seq.length()}, std::move(picker)), logits);
  return {cross_entropy(rows, targets), chosen};
}

Tensor vtmf_loss(const Tensor& l_imima, const Tensor& l_sdm, const Tensor& l_mlm,
                 const Tensor& alpha, const Tensor& beta) {
  for (const auto* c : {&l_imima, &l_sdm, &l_mlm}) {
    if (!c->defined() || c->numel() != 1) throw DimensionError("loss components must be scalars");
    if (!std::isfinite((*c)[0])) throw NumericError("non-finite loss component");
  }
  return add(add(l_imima, mul_scalar(l_sdm, alpha)), mul_scalar(l_mlm, beta));
}

Tensor vtmf_loss(const Tensor& l_imima, const Tensor& l_sdm, const Tensor& l_mlm,
                 const LossWeights& weights) {
  validate(weights);
  return vtmf_loss(l_imima, l_sdm, l_mlm, Tensor::scalar(weights.alpha),
                   Tensor::scalar(weights.beta));
}

}  // namespace jaf::loss
