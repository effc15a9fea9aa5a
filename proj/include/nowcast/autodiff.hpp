#pragma once

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nowcast::ad {

/// Up to four dimensions; convolutions use [batch, channels, height, width].
using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string to_string(const Shape& s);

class ShapeError : public std::invalid_argument {
public:
  ShapeError(const std::string& op, const std::string& detail) : std::invalid_argument(op + ": " + detail) {}
};

class TapeError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized like value when requires_grad
  bool requires_grad = false;
};

/// Shared handle to a dense tensor. Copies alias the same storage.
class Tensor {
public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  /// A trainable leaf; gradients accumulate into grad() across backward calls.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  int dim(int i) const { return storage_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return storage_->value.size(); }
  bool requires_grad() const { return storage_->requires_grad; }

  std::span<const double> value() const { return storage_->value; }
  // Handles have shallow constness: a const Tensor still exposes its storage.
  std::span<double> mutable_value() const { return storage_->value; }
  std::span<const double> grad() const { return storage_->grad; }
  std::span<double> mutable_grad() const { return storage_->grad; }
  double item() const;
  void zero_grad() const;

  /// Fresh leaf with a copy of this tensor's values.
  Tensor detach_copy(bool requires_grad) const;

private:
  explicit Tensor(std::shared_ptr<TensorStorage> s) : storage_(std::move(s)) {}
  friend class Tape;
  std::shared_ptr<TensorStorage> storage_;
};

/// Records the vector-Jacobian closures of one forward pass. An inference
/// tape records nothing and produces outputs that never require gradients.
class Tape {
public:
  enum class Mode { Record, Inference };
  explicit Tape(Mode mode = Mode::Record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::Record; }
  std::size_t size() const { return entries_.size(); }

  /// Output tensor of an op: requires grad iff recording and any input does.
  Tensor make_output(Shape shape, std::initializer_list<const Tensor*> inputs);
  Tensor make_output(Shape shape, const std::vector<const Tensor*>& inputs);
  void record(std::function<void()> backward_fn);

  /// Seeds d loss / d loss = 1 and runs the recorded closures in reverse.
  /// A tape can be run backward once.
  void backward(const Tensor& loss);

private:
  Mode mode_;
  bool consumed_ = false;
  std::vector<std::function<void()>> entries_;
};

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
/// Zero-padded convolution, kernel 1×1 or 3×3, stride 1 or 2.
/// x: [B, C, H, W], w: [O, C, k, k], bias: [O].
Tensor conv2d(Tape& t, const Tensor& x, const Tensor& w, const Tensor& bias, int stride);
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
/// x: [B, C, H, W] plus b: [B, C] broadcast over H and W.
Tensor add_channel_bias(Tape& t, const Tensor& x, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& a, double factor);
/// Multiplies channel c of x: [B, C, H, W] by factors[c].
Tensor scale_channels(Tape& t, const Tensor& x, std::vector<double> factors);
Tensor relu(Tape& t, const Tensor& a);
Tensor sigmoid(Tape& t, const Tensor& a);
Tensor mean(Tape& t, const Tensor& a);
/// mean |a - b|
Tensor l1_distance(Tape& t, const Tensor& a, const Tensor& b);
Tensor reshape(Tape& t, const Tensor& a, Shape shape);
Tensor upsample2x(Tape& t, const Tensor& x);
/// Channels [begin, begin + count) of x: [B, C, H, W].
Tensor slice_channels(Tape& t, const Tensor& x, int begin, int count);
/// mu + exp(log_var / 2) * noise, with noise supplied by the caller.
Tensor gaussian_sample(Tape& t, const Tensor& mu, const Tensor& log_var, std::span<const double> noise);
/// Inverted dropout with a caller-supplied keep mask (1 keep, 0 drop).
Tensor dropout(Tape& t, const Tensor& x, std::span<const double> keep_mask, double rate);

/// Generic node: `value` is the forward result; `vjp` receives the upstream
/// gradient and must add input gradients into the given buffers (one per
/// input, empty when that input does not require gradients).
using CustomVjp = std::function<void(std::span<const double> upstream, std::vector<std::span<double>>& input_grads)>;
Tensor custom(Tape& t, const std::vector<Tensor>& inputs, Shape shape, std::vector<double> value, CustomVjp vjp);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg);

}  // namespace nowcast::ad
