#include "jaf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace jaf {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Elementwise unary op with derivative expressed through input and output.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  return make_op_output(x.shape(), std::move(out), {x}, [x, deriv](Tensor y) {
    return [x, y, deriv]() mutable {
      auto g = y.grad();
      auto xg = x.grad_buffer();
      auto xd = x.data();
      auto yd = y.data();
      for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * deriv(xd[i], yd[i]);
    };
  });
}

}  // namespace

namespace {

// dst[j * m + i] (+)= src[i * n + j], in tiles so neither side strides
// through memory a column at a time.
template <bool Accumulate>
void transpose_into(const double* src, double* dst, std::size_t m, std::size_t n) {
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += tile)
    for (std::size_t j0 = 0; j0 < n; j0 += tile) {
      const std::size_t i1 = std::min(m, i0 + tile), j1 = std::min(n, j0 + tile);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) {
          if constexpr (Accumulate) dst[j * m + i] += src[i * n + j];
          else dst[j * m + i] = src[i * n + j];
        }
    }
}

// Below this output width the row-update kernels run too short an inner loop,
// so the narrow kernels work on a transposed copy of the narrow operand.
constexpr std::size_t kNarrow = 16;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  if (n < kNarrow) {
    std::vector<double> bt(n * k);
    transpose_into<false>(bd.data(), bt.data(), k, n);
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = ad.data() + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bcol = bt.data() + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * bcol[p];
        out[i * n + j] = acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* row = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ad[i * k + p];
        if (av == 0.0) continue;
        const double* brow = bd.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
      }
    }
  }
  return make_op_output({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Tensor c) {
    return [a, b, c, m, k, n]() mutable {
      auto g = c.grad();
      auto ad = a.data();
      auto bd = b.data();
      if (n < kNarrow) {
        if (a.requires_grad()) {
          // dA[i, :] += sum_j dC[i, j] B^T[j, :]
          std::vector<double> bt(n * k);
          transpose_into<false>(bd.data(), bt.data(), k, n);
          auto ag = a.grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            double* agrow = ag.data() + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double gv = g[i * n + j];
              if (gv == 0.0) continue;
              const double* bcol = bt.data() + j * k;
              for (std::size_t p = 0; p < k; ++p) agrow[p] += gv * bcol[p];
            }
          }
        }
        if (b.requires_grad()) {
          // dB^T[j, :] = sum_i dC[i, j] A[i, :]
          std::vector<double> bgt(n * k, 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            const double* arow = ad.data() + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double gv = g[i * n + j];
              if (gv == 0.0) continue;
              double* dst = bgt.data() + j * k;
              for (std::size_t p = 0; p < k; ++p) dst[p] += gv * arow[p];
            }
          }
          transpose_into<true>(bgt.data(), b.grad_buffer().data(), n, k);
        }
        return;
      }
      if (a.requires_grad()) {
        // dA = dC * B^T
        auto ag = a.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = bd.data() + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ag[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        auto bg = b.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            double* bgrow = bg.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) bgrow[j] += av * grow[j];
          }
        }
      }
    };
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  transpose_into<false>(a.data().data(), out.data(), m, n);
  return make_op_output({n, m}, std::move(out), {a}, [a, m, n](Tensor t) {
    return [a, t, m, n]() mutable {
      transpose_into<true>(t.grad().data(), a.grad_buffer().data(), n, m);
    };
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op_output(std::move(shape), std::move(out), {a}, [a](Tensor r) {
    return [a, r]() mutable {
      auto g = r.grad();
      auto ag = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
    };
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op_output(a.shape(), std::move(out), {a, b}, [a, b](Tensor c) {
    return [a, b, c]() mutable {
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ag = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
      }
      if (b.requires_grad()) {
        auto bg = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op_output(a.shape(), std::move(out), {a, b}, [a, b](Tensor c) {
    return [a, b, c]() mutable {
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ag = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
      }
      if (b.requires_grad()) {
        auto bg = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op_output(a.shape(), std::move(out), {a, b}, [a, b](Tensor c) {
    return [a, b, c]() mutable {
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ag = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto bg = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * a[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return make_op_output(a.shape(), std::move(out), {a}, [a, c](Tensor y) {
    return [a, y, c]() mutable {
      auto g = y.grad();
      auto ag = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * c;
    };
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: gate must hold one value, got " +
                                           shape_str(s.shape()));
  const double sv = s[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
  return make_op_output(a.shape(), std::move(out), {a, s}, [a, s](Tensor y) {
    return [a, s, y]() mutable {
      auto g = y.grad();
      if (a.requires_grad()) {
        auto ag = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * s[0];
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a[i];
        s.grad_buffer()[0] += acc;
      }
    };
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_bias");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs rows of " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + bias[j];
  return make_op_output(a.shape(), std::move(out), {a, bias}, [a, bias, m, n](Tensor y) {
    return [a, bias, y, m, n]() mutable {
      auto g = y.grad();
      if (a.requires_grad()) {
        auto ag = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto bg = bias.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) bg[j] += g[i * n + j];
      }
    };
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  }
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "softmax");
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, xd[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double e = std::exp(xd[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= z;
    }
  }
  return make_op_output(x.shape(), std::move(out), {x}, [x, s](Tensor y) {
    return [x, y, s]() mutable {
      auto g = y.grad();
      auto yd = y.data();
      auto xg = x.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.n * s.inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < s.n; ++i) {
            const auto idx = base + i * s.inner;
            dot += g[idx] * yd[idx];
          }
          for (std::size_t i = 0; i < s.n; ++i) {
            const auto idx = base + i * s.inner;
            xg[idx] += yd[idx] * (g[idx] - dot);
          }
        }
      }
    };
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "log_softmax");
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, xd[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) z += std::exp(xd[base + i * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] = xd[base + i * s.inner] - lz;
    }
  }
  return make_op_output(x.shape(), std::move(out), {x}, [x, s](Tensor y) {
    return [x, y, s]() mutable {
      auto g = y.grad();
      auto yd = y.data();
      auto xg = x.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.n * s.inner + in;
          double gsum = 0.0;
          for (std::size_t i = 0; i < s.n; ++i) gsum += g[base + i * s.inner];
          for (std::size_t i = 0; i < s.n; ++i) {
            const auto idx = base + i * s.inner;
            xg[idx] += g[idx] - std::exp(yd[idx]) * gsum;
          }
        }
      }
    };
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_op_output({1}, {acc}, {x}, [x](Tensor y) {
    return [x, y]() mutable {
      const double g = y.grad()[0];
      for (auto& v : x.grad_buffer()) v += g;
    };
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "sum_axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape.push_back(1);
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xd[(o * s.n + i) * s.inner + in];
  return make_op_output(std::move(shape), std::move(out), {x}, [x, s](Tensor y) {
    return [x, y, s]() mutable {
      auto g = y.grad();
      auto xg = x.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.n; ++i)
          for (std::size_t in = 0; in < s.inner; ++in)
            xg[(o * s.n + i) * s.inner + in] += g[o * s.inner + in];
    };
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.shape()[d] != ref[d]) {
        throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " +
                             shape_str(p.shape()));
      }
    }
    shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  const std::size_t total = shape[axis];

  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t n = p.shape()[axis];
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * n * inner, n * inner,
                  out.data() + (o * total + off) * inner);
    off += n;
  }
  return make_op_output(std::move(shape), std::move(out), parts,
                        [parts, offsets, outer, inner, total, axis](Tensor y) {
                          return [parts, offsets, outer, inner, total, axis, y]() mutable {
                            auto g = y.grad();
                            for (std::size_t k = 0; k < parts.size(); ++k) {
                              if (!parts[k].requires_grad()) continue;
                              const std::size_t n = parts[k].shape()[axis];
                              auto pg = parts[k].grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < n * inner; ++i)
                                  pg[o * n * inner + i] +=
                                      g[(o * total + offsets[k]) * inner + i];
                            }
                          };
                        });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_at(x.shape(), axis, "slice");
  if (begin >= end || end > s.n) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> out(shape_numel(shape));
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.data() + (o * s.n + begin) * s.inner, len * s.inner,
                out.data() + o * len * s.inner);
  return make_op_output(std::move(shape), std::move(out), {x}, [x, s, begin, len](Tensor y) {
    return [x, y, s, begin, len]() mutable {
      auto g = y.grad();
      auto xg = x.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < len * s.inner; ++i)
          xg[(o * s.n + begin) * s.inner + i] += g[o * len * s.inner + i];
    };
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& ids) {
  require_rank(table, 2, "gather_rows");
  const std::size_t v = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  std::vector<double> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[r]) + " outside [0," +
                           std::to_string(v) + ")");
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  return make_op_output({ids.size(), d}, std::move(out), {table}, [table, ids, d](Tensor y) {
    return [table, ids, d, y]() mutable {
      auto g = y.grad();
      auto tg = table.grad_buffer();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < d; ++j)
          tg[static_cast<std::size_t>(ids[r]) * d + j] += g[r * d + j];
    };
  });
}

Tensor gather_elements(const Tensor& x, const std::vector<std::int64_t>& idx) {
  require_rank(x, 2, "gather_elements");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (idx.size() != n) throw DimensionError("gather_elements: one index per row required");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= m) {
      throw DimensionError("gather_elements: index out of range");
    }
    out[i] = x[i * m + static_cast<std::size_t>(idx[i])];
  }
  return make_op_output({n}, std::move(out), {x}, [x, idx, m](Tensor y) {
    return [x, idx, m, y]() mutable {
      auto g = y.grad();
      auto xg = x.grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        xg[i * m + static_cast<std::size_t>(idx[i])] += g[i];
    };
  });
}

Tensor normalize_rows(const Tensor& x) {
  require_rank(x, 2, "normalize_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> norms(n), out(x.numel());
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x[i * d + j] * x[i * d + j];
    if (!(ss > 0.0)) throw NumericError("normalize_rows: zero-norm row " + std::to_string(i));
    norms[i] = std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / norms[i];
  }
  return make_op_output(x.shape(), std::move(out), {x}, [x, norms, n, d](Tensor y) {
    return [x, y, norms, n, d]() mutable {
      auto g = y.grad();
      auto xg = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
        for (std::size_t j = 0; j < d; ++j)
          xg[i * d + j] += (g[i * d + j] - dot * y[i * d + j]) / norms[i];
      }
    };
  });
}

Tensor conv3(const Tensor& volume, const Tensor& kernels, std::size_t stride, const Tensor& bias) {
  require_rank(volume, 4, "conv3");
  require_rank(kernels, 5, "conv3");
  if (stride < 1) throw ConfigError("conv3: stride must be >= 1");
  const std::size_t ci = volume.dim(0), d = volume.dim(1), h = volume.dim(2), w = volume.dim(3);
  const std::size_t co = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != ci || kernels.dim(3) != k || kernels.dim(4) != k) {
    throw DimensionError("conv3: kernels " + shape_str(kernels.shape()) + " incompatible with " +
                         shape_str(volume.shape()));
  }
  if (k > d || k > h || k > w) {
    throw DimensionError("conv3: kernel extent " + std::to_string(k) + " exceeds input " +
                         shape_str(volume.shape()));
  }
  if (bias.defined() && bias.numel() != co) throw DimensionError("conv3: bias size mismatch");
  const std::size_t od = (d - k) / stride + 1, oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const std::size_t ospat = od * oh * ow, ispat = d * h * w, k3 = k * k * k;

  std::vector<double> out(co * ospat, 0.0);
  auto vd = volume.data();
  auto kd = kernels.data();
  for (std::size_t o = 0; o < co; ++o) {
    double* op = out.data() + o * ospat;
    if (bias.defined()) std::fill(op, op + ospat, bias[o]);
    for (std::size_t c = 0; c < ci; ++c) {
      const double* ip = vd.data() + c * ispat;
      const double* kp = kd.data() + (o * ci + c) * k3;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b)
          for (std::size_t e = 0; e < k; ++e) {
            const double wv = kp[(a * k + b) * k + e];
            for (std::size_t z = 0; z < od; ++z)
              for (std::size_t y = 0; y < oh; ++y) {
                const double* src = ip + ((z * stride + a) * h + y * stride + b) * w + e;
                double* dst = op + (z * oh + y) * ow;
                for (std::size_t x = 0; x < ow; ++x) dst[x] += wv * src[x * stride];
              }
          }
    }
  }
  std::vector<Tensor> inputs{volume, kernels};
  if (bias.defined()) inputs.push_back(bias);
  return make_op_output(
      {co, od, oh, ow}, std::move(out), inputs,
      [=](Tensor y) {
        return [=]() mutable {
          Tensor vol = volume, ker = kernels, b = bias;
          auto g = y.grad();
          if (b.defined() && b.requires_grad()) {
            auto bg = b.grad_buffer();
            for (std::size_t o = 0; o < co; ++o)
              for (std::size_t i = 0; i < ospat; ++i) bg[o] += g[o * ospat + i];
          }
          const bool want_k = ker.requires_grad(), want_v = vol.requires_grad();
          if (!want_k && !want_v) return;
          auto vd = vol.data();
          auto kd = ker.data();
          std::span<double> kg, vg;
          if (want_k) kg = ker.grad_buffer();
          if (want_v) vg = vol.grad_buffer();
          for (std::size_t o = 0; o < co; ++o) {
            const double* gp = g.data() + o * ospat;
            for (std::size_t c = 0; c < ci; ++c) {
              const double* ip = vd.data() + c * ispat;
              for (std::size_t a = 0; a < k; ++a)
                for (std::size_t bb = 0; bb < k; ++bb)
                  for (std::size_t e = 0; e < k; ++e) {
                    const std::size_t kidx = (o * ci + c) * k3 + (a * k + bb) * k + e;
                    const double wv = kd[kidx];
                    double acc = 0.0;
                    for (std::size_t z = 0; z < od; ++z)
                      for (std::size_t yy = 0; yy < oh; ++yy) {
                        const std::size_t soff = ((z * stride + a) * h + yy * stride + bb) * w + e;
                        const double* gr = gp + (z * oh + yy) * ow;
                        if (want_k) {
                          const double* src = ip + soff;
                          for (std::size_t x = 0; x < ow; ++x) acc += gr[x] * src[x * stride];
                        }
                        if (want_v) {
                          double* dst = vg.data() + c * ispat + soff;
                          for (std::size_t x = 0; x < ow; ++x) dst[x * stride] += gr[x] * wv;
                        }
                      }
                    if (want_k) kg[kidx] += acc;
                  }
            }
          }
        };
      });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_rank(x, 3, "upsample_nearest");
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        out[(ch * oh + i) * ow + j] = x[(ch * h + i / factor) * w + j / factor];
  return make_op_output({c, oh, ow}, std::move(out), {x}, [=](Tensor y) {
    return [=]() mutable {
      Tensor in = x;
      auto g = y.grad();
      auto xg = in.grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j)
            xg[(ch * h + i / factor) * w + j / factor] += g[(ch * oh + i) * ow + j];
    };
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets) {
  auto lp = log_softmax(logits, 1);
  return scale(sum(gather_elements(lp, targets)), -1.0 / static_cast<double>(targets.size()));
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_gradient: step must be positive");
  std::vector<double> g(x.numel());
  auto xd = x.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double orig = xd[i];
    xd[i] = orig + h;
    const double fp = f(x);
    xd[i] = orig - h;
    const double fm = f(x);
    xd[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_gradient: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

double max_relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace jaf
