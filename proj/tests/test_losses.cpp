#include <doctest.h>

#include <cmath>
#include <random>

#include "jaf/losses.hpp"
#include "jaf/ops.hpp"
#include "test_util.hpp"

using namespace jaf;
using namespace jaf::loss;
using jaf::testing::check_gradient;
using jaf::testing::random_tensor;

namespace {

std::vector<std::vector<double>> unit_rows(const Tensor& x) {
  std::vector<std::vector<double>> rows(x.dim(0), std::vector<double>(x.dim(1)));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double n = 0.0;
    for (std::size_t k = 0; k < x.dim(1); ++k) n += x.at(i, k) * x.at(i, k);
    for (std::size_t k = 0; k < x.dim(1); ++k) rows[i][k] = x.at(i, k) / std::sqrt(n);
  }
  return rows;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

// Plain-loop reference for the four-direction alignment loss.
double imima_reference(const PairBatch& b) {
  const auto v = unit_rows(b.vision), t = unit_rows(b.text);
  const std::size_t n = b.size();
  auto term = [&](const auto& a, const auto& c, bool intra) {
    double total = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      long pos = intra ? -1 : long(i);
      if (intra) {
        for (std::size_t s = 1; s < n && pos < 0; ++s)
          if (b.identity[(i + s) % n] == b.identity[i]) pos = long((i + s) % n);
      }
      double neg = 0.0;
      bool any = false;
      for (std::size_t k = 0; k < n; ++k)
        if (b.identity[k] != b.identity[i]) {
          neg += std::exp(dot(a[i], c[k]));
          any = true;
        }
      if (pos < 0 || !any) continue;
      const double dp = std::exp(dot(a[i], c[pos]));
      total += -std::log(dp / (dp + neg));
      ++count;
    }
    return count ? total / count : 0.0;
  };
  return term(t, t, true) + term(v, v, true) + term(t, v, false) + term(v, t, false);
}

PairBatch random_batch(std::size_t n, std::size_t d, std::mt19937_64& rng, int classes = 2) {
  std::uniform_int_distribution<int> label(0, classes - 1);
  PairBatch b{random_tensor({n, d}, rng), random_tensor({n, d}, rng), {}};
  for (std::size_t i = 0; i < n; ++i) b.identity.push_back(label(rng));
  b.identity[0] = 0;
  b.identity[1] = 1;
  return b;
}

enc::TextSequence make_sequence(std::vector<std::int64_t> ids, std::size_t vocab,
                                std::size_t pads) {
  enc::TextSequence s;
  s.vocab_size = vocab;
  s.token_ids = std::move(ids);
  s.pad_mask.assign(s.token_ids.size(), false);
  for (std::size_t i = 0; i < pads; ++i) s.pad_mask[s.token_ids.size() - 1 - i] = true;
  return s;
}

}  // namespace

TEST_CASE("imima: orthonormal two-identity example") {
  PairBatch b{Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2, 2}, {1, 0, 0, 1}), {0, 1}};
  auto terms = imima_terms(b);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(expected == doctest::Approx(0.3133).epsilon(1e-4));
  // Single-member identities have no intra positive.
  CHECK_FALSE(terms.t2t.defined());
  CHECK_FALSE(terms.v2v.defined());
  CHECK(terms.t2v.item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(terms.v2t.item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(terms.total.item() == doctest::Approx(2 * expected).epsilon(1e-14));
}

TEST_CASE("imima: agrees with a plain-loop reference and sums its terms") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto b = random_batch(8, 5, rng, 3);
    auto terms = imima_terms(b);
    CHECK(terms.total.item() == doctest::Approx(imima_reference(b)).epsilon(1e-12));
    double parts = 0.0;
    for (const auto* t : {&terms.t2t, &terms.v2v, &terms.t2v, &terms.v2t})
      if (t->defined()) parts += t->item();
    CHECK(terms.total.item() == doctest::Approx(parts).epsilon(1e-14));
  }
}

TEST_CASE("imima: rejects single-identity batches and bad shapes") {
  std::mt19937_64 rng(12);
  PairBatch same{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng), {2, 2, 2, 2}};
  CHECK_THROWS_AS(imima_loss(same), Error);
  PairBatch mismatched{random_tensor({4, 3}, rng), random_tensor({4, 2}, rng), {0, 1, 0, 1}};
  CHECK_THROWS_AS(imima_loss(mismatched), DimensionError);
  PairBatch zero_row{Tensor::zeros({2, 2}), random_tensor({2, 2}, rng), {0, 1}};
  CHECK_THROWS_AS(imima_loss(zero_row), NumericError);
}

TEST_CASE("imima: non-negative on 1000 random batches") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 1000; ++trial) {
    auto b = random_batch(6, 4, rng);
    CHECK(imima_loss(b).item() >= 0.0);
  }
}

TEST_CASE("sdm: near zero when p matches q") {
  // Orthonormal pairs with distinct identities: p is one-hot up to e^-50.
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  PairBatch b{Tensor({4, 4}, eye), Tensor({4, 4}, eye), {0, 1, 2, 3}};
  CHECK(std::abs(sdm_loss(b, LossWeights{}).item()) <= 1e-6);
}

TEST_CASE("sdm: two-pair direct oracle") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    PairBatch b{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng),
                {0, trial % 2 == 0 ? 1 : 0}};
    LossWeights w;
    w.tau = 0.3;
    const auto v = unit_rows(b.vision), t = unit_rows(b.text);
    double c[2][2];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) c[i][j] = dot(v[i], t[j]) / w.tau;
    double q[2][2];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        const double same = b.identity[i] == b.identity[j] ? 1.0 : 0.0;
        const double row = b.identity[0] == b.identity[1] ? 2.0 : 1.0;
        q[i][j] = same / row;
      }
    double expected = 0.0;
    for (int dir = 0; dir < 2; ++dir)
      for (int i = 0; i < 2; ++i) {
        const double a = dir == 0 ? c[i][0] : c[0][i];
        const double bb = dir == 0 ? c[i][1] : c[1][i];
        const double p0 = 1.0 / (1.0 + std::exp(bb - a)), p1 = 1.0 - p0;
        expected += (p0 * std::log(p0 / (q[i][0] + w.epsilon)) +
                     p1 * std::log(p1 / (q[i][1] + w.epsilon))) / 2.0;
      }
    CHECK(sdm_loss(b, w).item() == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("sdm: invariant to positive row scaling, bounded below") {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int trial = 0; trial < 1000; ++trial) {
    auto b = random_batch(6, 4, rng, 3);
    const double loss = sdm_loss(b, LossWeights{}).item();
    CHECK(loss >= -1e-6);
    if (trial % 50 == 0) {
      auto sv = b.vision.clone(), st = b.text.clone();
      auto dv = sv.mutable_data(), dt = st.mutable_data();
      for (std::size_t i = 0; i < 6; ++i) {
        const double a = u(rng), c = u(rng);
        for (std::size_t k = 0; k < 4; ++k) {
          dv[i * 4 + k] *= a;
          dt[i * 4 + k] *= c;
        }
      }
      CHECK(sdm_loss({sv, st, b.identity}, LossWeights{}).item() ==
            doctest::Approx(loss).epsilon(1e-9));
    }
  }
  PairBatch single{random_tensor({1, 3}, rng), random_tensor({1, 3}, rng), {0}};
  CHECK_THROWS_AS(sdm_loss(single, LossWeights{}), Error);
  LossWeights bad;
  bad.tau = 0.0;
  CHECK_THROWS_AS(sdm_loss(random_batch(4, 3, rng), bad), ConfigError);
}

TEST_CASE("matching probabilities: rows normalized, sharpen as temperature drops") {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = random_tensor({5, 4}, rng), t = random_tensor({5, 4}, rng);
    std::vector<double> prev_max(5, 0.0);
    for (double tau : {1.0, 0.5, 0.1, 0.02}) {
      auto p = matching_probabilities(v, t, tau);
      for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0, mx = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          s += p.at(i, j);
          mx = std::max(mx, p.at(i, j));
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
        CHECK(mx >= prev_max[i] - 1e-12);
        prev_max[i] = mx;
      }
    }
  }
}

TEST_CASE("mlm: uniform predictions give log V") {
  const std::size_t vocab = 37;
  auto seq = make_sequence({3, 5, 7, 11, 13, 17, 19, 23, 0, 0}, vocab, 2);
  std::mt19937_64 rng(17);
  auto r = mlm_loss(seq, 0.15, [&](const enc::TextSequence& s) {
    return Tensor::zeros({s.length(), vocab});
  }, rng, 36);
  CHECK(std::abs(r.loss.item() - std::log(double(vocab))) <= 1e-9);
  // ceil(0.15 * 8) = 2 positions, never padding.
  CHECK(r.masked_positions.size() == 2);
  for (auto p : r.masked_positions) CHECK(p < 8);
}

TEST_CASE("mlm: confident correct predictions drive the loss to zero") {
  const std::size_t vocab = 10;
  auto seq = make_sequence({1, 2, 3, 4, 5, 6, 7, 8, 9, 1, 2, 3}, vocab, 0);
  double prev = 1e300;
  for (double margin : {0.0, 1.0, 5.0, 20.0, 40.0}) {
    std::mt19937_64 rng(18);
    auto r = mlm_loss(seq, 0.15, [&](const enc::TextSequence& s) {
      std::vector<double> logits(s.length() * vocab, 0.0);
      for (std::size_t i = 0; i < s.length(); ++i) logits[i * vocab + seq.token_ids[i]] = margin;
      return Tensor({s.length(), vocab}, logits);
    }, rng, 0);
    const double expected = -std::log(std::exp(margin) / (std::exp(margin) + double(vocab - 1)));
    CHECK(r.loss.item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(r.loss.item() <= prev);
    prev = r.loss.item();
  }
  CHECK(prev < 1e-15);
}

TEST_CASE("mlm: masking is deterministic per seed and replaces the chosen tokens") {
  const std::size_t vocab = 50;
  std::vector<std::int64_t> ids;
  for (int i = 0; i < 40; ++i) ids.push_back(1 + i);
  auto seq = make_sequence(ids, vocab, 6);
  std::vector<std::vector<std::size_t>> runs;
  for (int rep = 0; rep < 2; ++rep) {
    std::mt19937_64 rng(19);
    auto r = mlm_loss(seq, 0.15, [&](const enc::TextSequence& s) {
      std::size_t masked = 0;
      for (std::size_t i = 0; i < s.length(); ++i) masked += s.token_ids[i] == 49;
      CHECK(masked == 6);  // ceil(0.15 * 34)
      return Tensor::zeros({s.length(), vocab});
    }, rng, 49);
    runs.push_back(r.masked_positions);
  }
  CHECK(runs[0] == runs[1]);
  std::mt19937_64 other(20);
  auto r = mlm_loss(seq, 0.15, [&](const enc::TextSequence& s) {
    return Tensor::zeros({s.length(), vocab});
  }, other, 49);
  CHECK(r.masked_positions != runs[0]);

  std::mt19937_64 rng(21);
  CHECK_THROWS_AS(mlm_loss(seq, 0.0, [](const enc::TextSequence&) { return Tensor(); }, rng, 49),
                  ConfigError);
  auto all_pad = make_sequence({0, 0}, vocab, 2);
  CHECK_THROWS_AS(
      mlm_loss(all_pad, 0.15, [](const enc::TextSequence&) { return Tensor(); }, rng, 49), Error);
}

TEST_CASE("vtmf: weighted sum, linearity, gradient wrt components") {
  auto one = Tensor::scalar(1.0);
  CHECK(vtmf_loss(one, one, one, LossWeights{}).item() == doctest::Approx(2.29).epsilon(1e-14));

  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    const double a = u(rng), b = u(rng), c = u(rng), k = u(rng);
    LossWeights w;
    const double base = vtmf_loss(Tensor::scalar(a), Tensor::scalar(b), Tensor::scalar(c), w).item();
    CHECK(base == doctest::Approx(a + 0.84 * b + 0.45 * c).epsilon(1e-14));
    const double scaled =
        vtmf_loss(Tensor::scalar(k * a), Tensor::scalar(k * b), Tensor::scalar(k * c), w).item();
    CHECK(scaled == doctest::Approx(k * base).epsilon(1e-12));
  }

  auto li = Tensor::scalar(0.7, true), ls = Tensor::scalar(1.9, true), lm = Tensor::scalar(2.3, true);
  auto alpha = Tensor::scalar(0.84, true), beta = Tensor::scalar(0.45, true);
  Tape tape;
  Tensor total;
  {
    TapeScope scope(tape);
    total = vtmf_loss(li, ls, lm, alpha, beta);
  }
  backward(tape, total);
  CHECK(li.grad()[0] == doctest::Approx(1.0));
  CHECK(ls.grad()[0] == doctest::Approx(0.84).epsilon(1e-15));
  CHECK(lm.grad()[0] == doctest::Approx(0.45).epsilon(1e-15));
  CHECK(alpha.grad()[0] == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(beta.grad()[0] == doctest::Approx(2.3).epsilon(1e-15));

  CHECK_THROWS_AS(vtmf_loss(Tensor::scalar(NAN), one, one, LossWeights{}), NumericError);
  CHECK_THROWS_AS(vtmf_loss(Tensor::zeros({2}), one, one, LossWeights{}), DimensionError);
  LossWeights neg;
  neg.alpha = -1.0;
  CHECK_THROWS_AS(vtmf_loss(one, one, one, neg), ConfigError);
}

TEST_CASE("losses: gradients match finite differences") {
  std::mt19937_64 rng(23);
  for (int point = 0; point < 10; ++point) {
    auto b = random_batch(6, 4, rng, 3);
    CHECK(check_gradient({b.vision, b.text}, [&] { return imima_loss(b); }) < 1e-5);
    for (double tau : {0.5, 0.1}) {
      LossWeights w;
      w.tau = tau;
      CHECK(check_gradient({b.vision, b.text}, [&] { return sdm_loss(b, w); }) < 1e-4);
    }

    const std::size_t vocab = 7;
    auto table = random_tensor({vocab, vocab}, rng);
    auto seq = make_sequence({1, 2, 3, 4, 5, 6, 1, 2, 0, 0}, vocab, 2);
    auto model = [&](const enc::TextSequence& s) { return gather_rows(table, s.token_ids); };
    CHECK(check_gradient({table}, [&] {
            std::mt19937_64 mask_rng(point);
            return mlm_loss(seq, 0.3, model, mask_rng, 0).loss;
          }) < 1e-5);
  }
}
