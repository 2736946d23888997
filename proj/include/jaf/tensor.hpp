#pragma once

// Dense double-precision tensors with a dynamic reverse-mode tape.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace jaf {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

/// Shared handle to a tensor. Copies alias the same storage (constness is that
/// of the handle, as with shared_ptr); use clone() for a deep copy. Values are
/// not modified by ops once created; only the optimizer writes parameter
/// values, and only between steps.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Row-major 2-D literal, e.g. matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(const std::vector<std::vector<double>>& rows,
                       bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;
  /// Element of a 2-D tensor.
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) const { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first use.
  std::span<double> grad_buffer() const;
  void clear_grad() const { impl_->grad.clear(); }
  Tensor grad_tensor() const;

  Tensor clone() const;
  /// Copy of the values that is not tracked by any tape.
  Tensor detach() const { return clone(); }

  const TensorImpl* id() const { return impl_.get(); }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable ops executed while this tape was active.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Record {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }
  bool contains_output(const Tensor& t) const;

  /// Reverse accumulation from a scalar loss. A tape supports exactly one
  /// backward pass.
  void backward(const Tensor& loss);

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
};

/// Makes `tape` the recording target for ops on the current thread until the
/// scope ends.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

void backward(Tape& tape, const Tensor& loss);

/// Builds an op output and records it on the active tape when any input
/// requires a gradient. `make_backward` receives the output tensor and returns
/// the backward rule; it is only invoked when recording.
Tensor make_op_output(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                      const std::function<Tape::BackwardFn(Tensor)>& make_backward);

// Tensor serialization: "shape: d0,d1,...\n" then little-endian float64 values.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace jaf
