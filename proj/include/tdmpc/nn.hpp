#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdmpc/rng.hpp"
#include "tdmpc/tensor.hpp"

namespace tdmpc::nn {

enum class LayerKind { dense, conv2d, conv_transpose2d, batch_norm, activation };
enum class Activation { identity, elu, relu, sigmoid, tanh };
enum class Mode { train, eval };

const char* to_string(LayerKind kind);
const char* to_string(Activation act);

double activate(Activation act, double x);

/// One layer of a sequential network. Every kind applies `activation` after
/// its own operation; an `activation` layer is the bare nonlinearity.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::activation;
  std::size_t in = 0;   // features (dense) or channels (conv, batch norm)
  std::size_t out = 0;  // features or channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // Spatial size of a conv input that arrives flattened (e.g. after a dense layer).
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  Activation activation = Activation::identity;

  static LayerSpec dense(std::string name, std::size_t in, std::size_t out,
                         Activation act = Activation::identity);
  static LayerSpec conv2d(std::string name, std::size_t in_ch, std::size_t out_ch,
                          std::size_t kernel, std::size_t stride, std::size_t padding,
                          Activation act = Activation::identity);
  static LayerSpec conv_transpose2d(std::string name, std::size_t in_ch, std::size_t out_ch,
                                    std::size_t kernel, std::size_t stride,
                                    std::size_t padding,
                                    Activation act = Activation::identity);
  static LayerSpec batch_norm(std::string name, std::size_t features,
                              Activation act = Activation::identity);
  static LayerSpec act(std::string name, Activation act);

  LayerSpec& spatial(std::size_t h, std::size_t w) {
    in_height = h;
    in_width = w;
    return *this;
  }

  bool has_params() const {
    return kind != LayerKind::activation;
  }
};

/// Output spatial size of a strided convolution; 0 when the geometry is invalid.
std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding);
/// (in - 1) * stride - 2 * padding + kernel; 0 when not strictly positive.
std::size_t conv_transpose_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                    std::size_t padding);

struct LayerParams {
  Tensor weights;
  Tensor biases;
  std::optional<Tensor> running_mean;
  std::optional<Tensor> running_var;
};

using ParamSet = std::map<std::string, LayerParams>;

/// Visit every tensor of a ParamSet as ("layer.weights", tensor) in name order.
void for_each_tensor(ParamSet& params, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(const ParamSet& params,
                     const std::function<void(const std::string&, const Tensor&)>& fn);

/// Same layout as `params`, all zeros, running statistics dropped.
ParamSet zeros_like(const ParamSet& params);
void set_zero(ParamSet& grads);
/// grads *= factor, for trainable tensors only.
void scale(ParamSet& grads, double factor);
std::size_t parameter_count(const ParamSet& params);
bool same_layout(const ParamSet& a, const ParamSet& b);

class Network;

/// Activation record of one forward pass. Holds a pointer to the parameters
/// used, which must stay alive and unchanged until backward runs.
class Tape {
 public:
  bool consumed() const { return consumed_; }
  const Tensor& output() const { return values_.back(); }

 private:
  friend class Network;
  const ParamSet* params_ = nullptr;
  Mode mode_ = Mode::eval;
  std::vector<Tensor> values_;  // values_[i] is the input to layer i
  std::vector<Tensor> normalized_;
  std::vector<std::vector<double>> inv_std_;
  bool consumed_ = false;
};

struct ForwardResult {
  Tensor output;
  Tape tape;
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-8;
};

/// A fixed sequential stack of layers with shape checking at construction.
class Network {
 public:
  Network() = default;
  /// `input_shape` is the per-sample shape; batches carry a leading axis.
  Network(Shape input_shape, std::vector<LayerSpec> layers, BatchNormOptions bn = {});

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return shapes_.back(); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  /// Per-sample input shape of layer i (i == layers().size() gives the output).
  const Shape& shape_at(std::size_t i) const { return shapes_.at(i); }

  /// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero biases.
  ParamSet init(Rng& rng) const;
  /// Structurally valid parameters with every value zero.
  ParamSet zeros() const;
  void validate(const ParamSet& params) const;

  /// Train mode uses batch statistics and refreshes the running statistics
  /// stored in `params`; eval mode leaves `params` untouched.
  ForwardResult forward(ParamSet& params, const Tensor& input, Mode mode) const;
  ForwardResult forward(const ParamSet& params, const Tensor& input) const;
  /// Eval-mode forward without recording a tape.
  Tensor infer(const ParamSet& params, const Tensor& input) const;

  /// Reverse pass. Parameter gradients are added into `grads` when it is
  /// non-null (missing layers are created as zeros). Returns d(input) unless
  /// `want_input_grad` is false, in which case an empty tensor is returned.
  Tensor backward(Tape& tape, const Tensor& output_grad, ParamSet* grads,
                  bool want_input_grad = true) const;

 private:
  Tensor run(const ParamSet* params, ParamSet* mutable_params, const Tensor& input,
             Mode mode, Tape* tape) const;
  std::size_t batch_of(const Tensor& input) const;

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  BatchNormOptions bn_;
};

/// Elementwise logistic function; saturates to exactly 0/1 in floating point.
Tensor sigmoid_clamp(const Tensor& t);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  ParamSet m;
  ParamSet v;
};

AdamState make_adam_state(const ParamSet& params);

/// One Adam step with bias correction. Throws std::domain_error naming the
/// first non-finite gradient entry; nothing is modified in that case.
void optimizer_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr,
                    const AdamOptions& opt = {});

double global_grad_norm(const std::vector<const ParamSet*>& grads);
/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<ParamSet*>& grads, double max_norm);

}  // namespace tdmpc::nn
