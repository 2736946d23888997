#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "jaf/tensor.hpp"

namespace jaf {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// a * s where s is a single-element tensor (a learnable gate).
Tensor mul_scalar(const Tensor& a, const Tensor& s);
/// Adds bias[n] to every row of a[m x n].
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Rows of table[V x D] selected by ids.
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& ids);
/// x[i, idx[i]] for each row of x[n x m].
Tensor gather_elements(const Tensor& x, const std::vector<std::int64_t>& idx);

/// Each row divided by its L2 norm. Throws NumericError on a zero row.
Tensor normalize_rows(const Tensor& x);

/// Valid cross-correlation of volume[C x D x H x W] with kernels[C' x C x k x k x k].
/// `bias` may be undefined.
Tensor conv3(const Tensor& volume, const Tensor& kernels, std::size_t stride,
             const Tensor& bias = Tensor{});

/// Nearest-neighbour spatial replication of x[C x H x W].
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Mean cross-entropy of logits[n x K] against integer targets.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for each coordinate.
/// f is evaluated with x's values perturbed in place and restored afterwards.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                            double h = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8).
double max_relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace jaf
