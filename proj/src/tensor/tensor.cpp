#include "jaf/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace jaf {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  if (rows.empty()) throw DimensionError("matrix literal needs at least one row");
  std::vector<double> data;
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), rows.front().size()}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  auto n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return impl_->data[r * impl_->shape.at(1) + c];
}

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) return Tensor::zeros(shape());
  return Tensor(shape(), impl_->grad);
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  if (consumed_) throw TapeError("cannot record on a tape that has already run backward");
  records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

bool Tape::contains_output(const Tensor& t) const {
  return std::any_of(records_.begin(), records_.end(),
                     [&](const Record& r) { return r.output.same(t); });
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("backward already ran on this tape; record a new forward pass");
  if (!loss.defined() || loss.numel() != 1) {
    throw TapeError("backward needs a scalar loss, got " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!contains_output(loss)) throw TapeError("loss tensor was not produced on this tape");
  consumed_ = true;

  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
  // Closures hold references to intermediates; release them now.
  records_.clear();
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

Tensor make_op_output(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                      const std::function<Tape::BackwardFn(Tensor)>& make_backward) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by op");
  }
  Tape* tape = active_tape();
  bool track = false;
  if (tape != nullptr) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  Tensor out(std::move(shape), std::move(data), track);
  if (track) tape->record(inputs, out, make_backward(out));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

void write_tensor(std::ostream& out, const Tensor& t) {
  out << "shape: ";
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i) out << ',';
    out << t.shape()[i];
  }
  out << '\n';
  for (double v : t.data()) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    out.write(bytes, 8);
  }
}

Tensor read_tensor(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header.rfind("shape: ", 0) != 0) {
    throw Error("tensor stream: missing 'shape:' header");
  }
  Shape shape;
  std::stringstream ss(header.substr(7));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      shape.push_back(static_cast<std::size_t>(std::stoull(tok)));
    } catch (const std::exception&) {
      throw Error("tensor stream: bad extent '" + tok + "'");
    }
  }
  if (shape.empty()) throw Error("tensor stream: empty shape");
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw Error("tensor stream: truncated data");
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[b];
    v = std::bit_cast<double>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_tensor(in);
}

}  // namespace jaf
