#include "tdmpc/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tdmpc::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct Spatial {
  std::size_t c = 0, h = 1, w = 1;
  std::size_t plane() const { return h * w; }
};

double activation_grad_from_output(Activation act, double y) {
  switch (act) {
    case Activation::identity: return 1.0;
    case Activation::elu: return y >= 0.0 ? 1.0 : y + 1.0;
    case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: return y * (1.0 - y);
    case Activation::tanh: return 1.0 - y * y;
  }
  return 1.0;
}

void apply_activation(Activation act, std::vector<double>& v) {
  if (act == Activation::identity) return;
  for (double& x : v) x = activate(act, x);
}

// Turns an upstream gradient w.r.t. the activated output into one w.r.t. the
// pre-activation value, in place.
void activation_backward(Activation act, const std::vector<double>& y, std::vector<double>& g) {
  if (act == Activation::identity) return;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= activation_grad_from_output(act, y[i]);
}

// col[(c*K + ky)*K + kx, oy*Wo + ox] = img[c, oy*S - P + ky, ox*S - P + kx]
void im2col(const double* img, Spatial in, std::size_t k, std::size_t s, std::size_t p,
            std::size_t ho, std::size_t wo, double* col) {
  const std::size_t cols = ho * wo;
  for (std::size_t c = 0; c < in.c; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* dst = col + ((c * k + ky) * k + kx) * cols;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                    static_cast<std::ptrdiff_t>(p);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) -
                                      static_cast<std::ptrdiff_t>(p);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(in.h) &&
                                ix < static_cast<std::ptrdiff_t>(in.w);
            dst[oy * wo + ox] = inside ? img[(c * in.h + iy) * in.w + ix] : 0.0;
          }
        }
      }
}

// Adjoint of im2col: scatter-add columns back into the image.
void col2im(const double* col, Spatial in, std::size_t k, std::size_t s, std::size_t p,
            std::size_t ho, std::size_t wo, double* img) {
  const std::size_t cols = ho * wo;
  for (std::size_t c = 0; c < in.c; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* src = col + ((c * k + ky) * k + kx) * cols;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) -
                                    static_cast<std::ptrdiff_t>(p);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) -
                                      static_cast<std::ptrdiff_t>(p);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
            img[(c * in.h + iy) * in.w + ix] += src[oy * wo + ox];
          }
        }
      }
}

Spatial spatial_from_shape(const Shape& s) {
  if (s.size() == 3) return {s[0], s[1], s[2]};
  if (s.size() == 1) return {s[0], 1, 1};
  throw ShapeError("unsupported per-sample shape " + shape_str(s));
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv_transpose2d: return "conv_transpose2d";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::activation: return "activation";
  }
  return "?";
}

const char* to_string(Activation act) {
  switch (act) {
    case Activation::identity: return "identity";
    case Activation::elu: return "elu";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

double activate(Activation act, double x) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::elu: return x > 0.0 ? x : std::expm1(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    case Activation::tanh: return std::tanh(x);
  }
  return x;
}

LayerSpec LayerSpec::dense(std::string name, std::size_t in, std::size_t out, Activation act) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::dense;
  s.in = in;
  s.out = out;
  s.activation = act;
  return s;
}

LayerSpec LayerSpec::conv2d(std::string name, std::size_t in_ch, std::size_t out_ch,
                            std::size_t kernel, std::size_t stride, std::size_t padding,
                            Activation act) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::conv2d;
  s.in = in_ch;
  s.out = out_ch;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  s.activation = act;
  return s;
}

LayerSpec LayerSpec::conv_transpose2d(std::string name, std::size_t in_ch, std::size_t out_ch,
                                      std::size_t kernel, std::size_t stride,
                                      std::size_t padding, Activation act) {
  LayerSpec s = conv2d(std::move(name), in_ch, out_ch, kernel, stride, padding, act);
  s.kind = LayerKind::conv_transpose2d;
  return s;
}

LayerSpec LayerSpec::batch_norm(std::string name, std::size_t features, Activation act) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::batch_norm;
  s.in = features;
  s.out = features;
  s.activation = act;
  return s;
}

LayerSpec LayerSpec::act(std::string name, Activation act) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::activation;
  s.activation = act;
  return s;
}

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  if (stride == 0 || kernel == 0 || in + 2 * padding < kernel) return 0;
  return (in + 2 * padding - kernel) / stride + 1;
}

std::size_t conv_transpose_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                    std::size_t padding) {
  if (in == 0 || stride == 0 || kernel == 0) return 0;
  const std::size_t grown = (in - 1) * stride + kernel;
  if (grown <= 2 * padding) return 0;
  return grown - 2 * padding;
}

void for_each_tensor(ParamSet& params,
                     const std::function<void(const std::string&, Tensor&)>& fn) {
  for (auto& [name, p] : params) {
    fn(name + ".weights", p.weights);
    fn(name + ".biases", p.biases);
    if (p.running_mean) fn(name + ".running_mean", *p.running_mean);
    if (p.running_var) fn(name + ".running_var", *p.running_var);
  }
}

void for_each_tensor(const ParamSet& params,
                     const std::function<void(const std::string&, const Tensor&)>& fn) {
  for (const auto& [name, p] : params) {
    fn(name + ".weights", p.weights);
    fn(name + ".biases", p.biases);
    if (p.running_mean) fn(name + ".running_mean", *p.running_mean);
    if (p.running_var) fn(name + ".running_var", *p.running_var);
  }
}

ParamSet zeros_like(const ParamSet& params) {
  ParamSet out;
  for (const auto& [name, p] : params)
    out.emplace(name, LayerParams{Tensor(p.weights.shape), Tensor(p.biases.shape), {}, {}});
  return out;
}

void set_zero(ParamSet& grads) {
  for (auto& [name, p] : grads) {
    std::fill(p.weights.data.begin(), p.weights.data.end(), 0.0);
    std::fill(p.biases.data.begin(), p.biases.data.end(), 0.0);
  }
}

void scale(ParamSet& grads, double factor) {
  for (auto& [name, p] : grads) {
    for (double& v : p.weights.data) v *= factor;
    for (double& v : p.biases.data) v *= factor;
  }
}

std::size_t parameter_count(const ParamSet& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.weights.numel() + p.biases.numel();
  return n;
}

bool same_layout(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.weights.shape != ib->second.weights.shape) return false;
    if (ia->second.biases.shape != ib->second.biases.shape) return false;
  }
  return true;
}

Network::Network(Shape input_shape, std::vector<LayerSpec> layers, BatchNormOptions bn)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), bn_(bn) {
  if (layers_.empty()) throw ShapeError("network needs at least one layer");
  if (input_shape_.empty() || shape_numel(input_shape_) == 0)
    throw ShapeError("network input shape " + shape_str(input_shape_) + " is empty");
  shapes_.push_back(input_shape_);
  for (auto& l : layers_) {
    const Shape& in = shapes_.back();
    const std::string where = "layer '" + l.name + "' (" + to_string(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::dense: {
        if (l.in == 0 || l.out == 0) throw ShapeError(where + ": dims must be positive");
        if (shape_numel(in) != l.in)
          throw ShapeError(where + ": expects " + std::to_string(l.in) + " inputs, got " +
                           shape_str(in));
        shapes_.push_back({l.out});
        break;
      }
      case LayerKind::conv2d:
      case LayerKind::conv_transpose2d: {
        if (l.in == 0 || l.out == 0 || l.kernel == 0 || l.stride == 0)
          throw ShapeError(where + ": dims must be positive");
        Spatial s;
        if (l.in_height) {
          s = {l.in, l.in_height, l.in_width};
          if (shape_numel(in) != l.in * l.in_height * l.in_width)
            throw ShapeError(where + ": input " + shape_str(in) + " does not hold " +
                             shape_str({l.in, l.in_height, l.in_width}));
        } else {
          if (in.size() != 3 || in[0] != l.in)
            throw ShapeError(where + ": expects [" + std::to_string(l.in) + ",H,W], got " +
                             shape_str(in));
          s = spatial_from_shape(in);
          l.in_height = s.h;
          l.in_width = s.w;
        }
        const bool transposed = l.kind == LayerKind::conv_transpose2d;
        const auto ho = transposed ? conv_transpose_out_size(s.h, l.kernel, l.stride, l.padding)
                                   : conv_out_size(s.h, l.kernel, l.stride, l.padding);
        const auto wo = transposed ? conv_transpose_out_size(s.w, l.kernel, l.stride, l.padding)
                                   : conv_out_size(s.w, l.kernel, l.stride, l.padding);
        if (ho == 0 || wo == 0) throw ShapeError(where + ": non-positive output size");
        shapes_.push_back({l.out, ho, wo});
        break;
      }
      case LayerKind::batch_norm: {
        if (l.in == 0) throw ShapeError(where + ": dims must be positive");
        if (in.empty() || in[0] != l.in || (in.size() != 1 && in.size() != 3))
          throw ShapeError(where + ": expects [" + std::to_string(l.in) + "] or [" +
                           std::to_string(l.in) + ",H,W], got " + shape_str(in));
        shapes_.push_back(in);
        break;
      }
      case LayerKind::activation: shapes_.push_back(in); break;
    }
  }
}

ParamSet Network::zeros() const {
  ParamSet ps;
  for (const auto& l : layers_) {
    LayerParams p;
    switch (l.kind) {
      case LayerKind::dense:
        p.weights = Tensor({l.out, l.in});
        p.biases = Tensor({l.out});
        break;
      case LayerKind::conv2d:
        p.weights = Tensor({l.out, l.in, l.kernel, l.kernel});
        p.biases = Tensor({l.out});
        break;
      case LayerKind::conv_transpose2d:
        p.weights = Tensor({l.in, l.out, l.kernel, l.kernel});
        p.biases = Tensor({l.out});
        break;
      case LayerKind::batch_norm:
        p.weights = Tensor({l.in});
        p.biases = Tensor({l.in});
        p.running_mean = Tensor({l.in});
        p.running_var = Tensor({l.in}, 1.0);
        break;
      case LayerKind::activation: continue;
    }
    if (!ps.emplace(l.name, std::move(p)).second)
      throw std::invalid_argument("duplicate layer name '" + l.name + "'");
  }
  return ps;
}

ParamSet Network::init(Rng& rng) const {
  ParamSet ps = zeros();
  for (const auto& l : layers_) {
    if (!l.has_params()) continue;
    auto& p = ps.at(l.name);
    if (l.kind == LayerKind::batch_norm) {
      std::fill(p.weights.data.begin(), p.weights.data.end(), 1.0);
      continue;
    }
    std::size_t fan_in = l.in;
    if (l.kind == LayerKind::conv2d) fan_in = l.in * l.kernel * l.kernel;
    if (l.kind == LayerKind::conv_transpose2d) fan_in = l.out * l.kernel * l.kernel;
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (double& w : p.weights.data) w = rng.uniform(-bound, bound);
  }
  return ps;
}

void Network::validate(const ParamSet& params) const {
  const ParamSet ref = zeros();
  for (const auto& [name, p] : ref) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("missing parameters for layer '" + name + "'");
    require_shape(it->second.weights, p.weights.shape, "layer '" + name + "' weights");
    require_shape(it->second.biases, p.biases.shape, "layer '" + name + "' biases");
    if (p.running_mean && (!it->second.running_mean || !it->second.running_var))
      throw ShapeError("layer '" + name + "' lacks running statistics");
  }
  if (params.size() != ref.size()) throw ShapeError("parameter set has extra layers");
}

std::size_t Network::batch_of(const Tensor& input) const {
  if (input.rank() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), input.shape.begin() + 1))
    throw ShapeError("network input: expected [B," + shape_str(input_shape_).substr(1) +
                     ", got " + shape_str(input.shape));
  return input.dim(0);
}

ForwardResult Network::forward(ParamSet& params, const Tensor& input, Mode mode) const {
  ForwardResult r;
  r.output = run(&params, mode == Mode::train ? &params : nullptr, input, mode, &r.tape);
  return r;
}

ForwardResult Network::forward(const ParamSet& params, const Tensor& input) const {
  ForwardResult r;
  r.output = run(&params, nullptr, input, Mode::eval, &r.tape);
  return r;
}

Tensor Network::infer(const ParamSet& params, const Tensor& input) const {
  return run(&params, nullptr, input, Mode::eval, nullptr);
}

Tensor Network::run(const ParamSet* params, ParamSet* mutable_params, const Tensor& input,
                    Mode mode, Tape* tape) const {
  const std::size_t batch = batch_of(input);
  if (tape) {
    tape->params_ = params;
    tape->mode_ = mode;
    tape->values_.clear();
    tape->values_.reserve(layers_.size() + 1);
    tape->normalized_.assign(layers_.size(), Tensor());
    tape->inv_std_.assign(layers_.size(), {});
    tape->consumed_ = false;
  }
  Tensor x = input;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const LayerSpec& l = layers_[li];
    Shape out_shape{batch};
    out_shape.insert(out_shape.end(), shapes_[li + 1].begin(), shapes_[li + 1].end());
    Tensor y;
    y.shape = out_shape;
    y.data.assign(shape_numel(out_shape), 0.0);

    const LayerParams* p = nullptr;
    if (l.has_params()) {
      auto it = params->find(l.name);
      if (it == params->end()) throw ShapeError("missing parameters for layer '" + l.name + "'");
      p = &it->second;
    }

    switch (l.kind) {
      case LayerKind::dense: {
        require_shape(p->weights, {l.out, l.in}, "layer '" + l.name + "' weights");
        ConstMapMat X(x.data.data(), batch, l.in);
        ConstMapMat W(p->weights.data.data(), l.out, l.in);
        MapMat Y(y.data.data(), batch, l.out);
        Y.noalias() = X * W.transpose();
        Eigen::Map<const Eigen::RowVectorXd> b(p->biases.data.data(), l.out);
        Y.rowwise() += b;
        break;
      }
      case LayerKind::conv2d: {
        require_shape(p->weights, {l.out, l.in, l.kernel, l.kernel},
                      "layer '" + l.name + "' weights");
        const Spatial in{l.in, l.in_height, l.in_width};
        const Spatial out = spatial_from_shape(shapes_[li + 1]);
        const std::size_t kk = l.in * l.kernel * l.kernel;
        std::vector<double> col(kk * out.plane());
        ConstMapMat W(p->weights.data.data(), l.out, kk);
        for (std::size_t b = 0; b < batch; ++b) {
          im2col(x.data.data() + b * in.c * in.plane(), in, l.kernel, l.stride, l.padding,
                 out.h, out.w, col.data());
          ConstMapMat C(col.data(), kk, out.plane());
          MapMat Y(y.data.data() + b * out.c * out.plane(), out.c, out.plane());
          Y.noalias() = W * C;
          for (std::size_t c = 0; c < out.c; ++c) Y.row(c).array() += p->biases[c];
        }
        break;
      }
      case LayerKind::conv_transpose2d: {
        require_shape(p->weights, {l.in, l.out, l.kernel, l.kernel},
                      "layer '" + l.name + "' weights");
        const Spatial in{l.in, l.in_height, l.in_width};
        const Spatial out = spatial_from_shape(shapes_[li + 1]);
        const std::size_t kk = l.out * l.kernel * l.kernel;
        std::vector<double> col(kk * in.plane());
        ConstMapMat W(p->weights.data.data(), l.in, kk);
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMapMat X(x.data.data() + b * in.c * in.plane(), in.c, in.plane());
          MapMat C(col.data(), kk, in.plane());
          C.noalias() = W.transpose() * X;
          double* yb = y.data.data() + b * out.c * out.plane();
          col2im(col.data(), out, l.kernel, l.stride, l.padding, in.h, in.w, yb);
          for (std::size_t c = 0; c < out.c; ++c)
            for (std::size_t i = 0; i < out.plane(); ++i) yb[c * out.plane() + i] += p->biases[c];
        }
        break;
      }
      case LayerKind::batch_norm: {
        const Spatial sp = spatial_from_shape(shapes_[li]);
        const std::size_t count = batch * sp.plane();
        std::vector<double> mean(sp.c, 0.0), var(sp.c, 0.0), inv(sp.c);
        if (mode == Mode::train) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < sp.c; ++c)
              for (std::size_t i = 0; i < sp.plane(); ++i)
                mean[c] += x.data[(b * sp.c + c) * sp.plane() + i];
          for (auto& m : mean) m /= static_cast<double>(count);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < sp.c; ++c)
              for (std::size_t i = 0; i < sp.plane(); ++i) {
                const double d = x.data[(b * sp.c + c) * sp.plane() + i] - mean[c];
                var[c] += d * d;
              }
          for (auto& v : var) v /= static_cast<double>(count);
          if (mutable_params) {
            auto& mp = mutable_params->at(l.name);
            const double unbias =
                count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
            for (std::size_t c = 0; c < sp.c; ++c) {
              (*mp.running_mean)[c] =
                  (1.0 - bn_.momentum) * (*mp.running_mean)[c] + bn_.momentum * mean[c];
              (*mp.running_var)[c] =
                  (1.0 - bn_.momentum) * (*mp.running_var)[c] + bn_.momentum * var[c] * unbias;
            }
          }
        } else {
          mean = p->running_mean->data;
          var = p->running_var->data;
        }
        for (std::size_t c = 0; c < sp.c; ++c) inv[c] = 1.0 / std::sqrt(var[c] + bn_.eps);
        Tensor xhat(y.shape);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < sp.c; ++c)
            for (std::size_t i = 0; i < sp.plane(); ++i) {
              const std::size_t k = (b * sp.c + c) * sp.plane() + i;
              xhat.data[k] = (x.data[k] - mean[c]) * inv[c];
              y.data[k] = p->weights[c] * xhat.data[k] + p->biases[c];
            }
        if (tape) {
          tape->normalized_[li] = std::move(xhat);
          tape->inv_std_[li] = std::move(inv);
        }
        break;
      }
      case LayerKind::activation: y.data = x.data; break;
    }
    apply_activation(l.activation, y.data);
    if (tape) tape->values_.push_back(std::move(x));
    x = std::move(y);
  }
  if (tape) tape->values_.push_back(x);
  return x;
}

Tensor Network::backward(Tape& tape, const Tensor& output_grad, ParamSet* grads,
                         bool want_input_grad) const {
  if (tape.consumed_) throw std::logic_error("tape already consumed; run forward again");
  if (tape.values_.size() != layers_.size() + 1)
    throw std::logic_error("tape does not belong to this network");
  require_shape(output_grad, tape.values_.back().shape, "backward output_grad");
  tape.consumed_ = true;
  const std::size_t batch = output_grad.dim(0);
  const ParamSet& params = *tape.params_;

  Tensor g = output_grad;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const LayerSpec& l = layers_[li];
    const Tensor& x = tape.values_[li];
    const Tensor& y = tape.values_[li + 1];
    activation_backward(l.activation, y.data, g.data);
    const bool need_dx = want_input_grad || li > 0;

    LayerParams* gp = nullptr;
    if (grads && l.has_params()) {
      auto it = grads->find(l.name);
      if (it == grads->end()) {
        const auto& src = params.at(l.name);
        it = grads->emplace(l.name, LayerParams{Tensor(src.weights.shape),
                                                Tensor(src.biases.shape), {}, {}})
                 .first;
      }
      gp = &it->second;
    }
    const LayerParams* p = l.has_params() ? &params.at(l.name) : nullptr;

    Tensor dx;
    if (need_dx) {
      dx.shape = x.shape;
      dx.data.assign(x.numel(), 0.0);
    }

    switch (l.kind) {
      case LayerKind::dense: {
        ConstMapMat G(g.data.data(), batch, l.out);
        ConstMapMat X(x.data.data(), batch, l.in);
        ConstMapMat W(p->weights.data.data(), l.out, l.in);
        if (gp) {
          MapMat dW(gp->weights.data.data(), l.out, l.in);
          dW.noalias() += G.transpose() * X;
          // plain loops: Eigen reductions peel by alignment, which breaks bitwise replay
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < l.out; ++o) gp->biases[o] += G(b, o);
        }
        if (need_dx) {
          MapMat dX(dx.data.data(), batch, l.in);
          dX.noalias() = G * W;
        }
        break;
      }
      case LayerKind::conv2d: {
        const Spatial in{l.in, l.in_height, l.in_width};
        const Spatial out = spatial_from_shape(shapes_[li + 1]);
        const std::size_t kk = l.in * l.kernel * l.kernel;
        std::vector<double> col(kk * out.plane()), dcol(kk * out.plane());
        ConstMapMat W(p->weights.data.data(), l.out, kk);
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMapMat G(g.data.data() + b * out.c * out.plane(), out.c, out.plane());
          if (gp) {
            im2col(x.data.data() + b * in.c * in.plane(), in, l.kernel, l.stride, l.padding,
                   out.h, out.w, col.data());
            ConstMapMat C(col.data(), kk, out.plane());
            MapMat dW(gp->weights.data.data(), l.out, kk);
            dW.noalias() += G * C.transpose();
            for (std::size_t c = 0; c < out.c; ++c) {
              double acc = 0.0;
              for (std::size_t i = 0; i < out.plane(); ++i) acc += G(c, i);
              gp->biases[c] += acc;
            }
          }
          if (need_dx) {
            MapMat DC(dcol.data(), kk, out.plane());
            DC.noalias() = W.transpose() * G;
            col2im(dcol.data(), in, l.kernel, l.stride, l.padding, out.h, out.w,
                   dx.data.data() + b * in.c * in.plane());
          }
        }
        break;
      }
      case LayerKind::conv_transpose2d: {
        const Spatial in{l.in, l.in_height, l.in_width};
        const Spatial out = spatial_from_shape(shapes_[li + 1]);
        const std::size_t kk = l.out * l.kernel * l.kernel;
        std::vector<double> dcol(kk * in.plane());
        ConstMapMat W(p->weights.data.data(), l.in, kk);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* gb = g.data.data() + b * out.c * out.plane();
          im2col(gb, out, l.kernel, l.stride, l.padding, in.h, in.w, dcol.data());
          ConstMapMat DC(dcol.data(), kk, in.plane());
          if (gp) {
            ConstMapMat X(x.data.data() + b * in.c * in.plane(), in.c, in.plane());
            MapMat dW(gp->weights.data.data(), l.in, kk);
            dW.noalias() += X * DC.transpose();
            for (std::size_t c = 0; c < out.c; ++c)
              for (std::size_t i = 0; i < out.plane(); ++i) gp->biases[c] += gb[c * out.plane() + i];
          }
          if (need_dx) {
            MapMat dX(dx.data.data() + b * in.c * in.plane(), in.c, in.plane());
            dX.noalias() = W * DC;
          }
        }
        break;
      }
      case LayerKind::batch_norm: {
        const Spatial sp = spatial_from_shape(shapes_[li]);
        const Tensor& xhat = tape.normalized_[li];
        const auto& inv = tape.inv_std_[li];
        const double count = static_cast<double>(batch * sp.plane());
        for (std::size_t c = 0; c < sp.c; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < sp.plane(); ++i) {
              const std::size_t k = (b * sp.c + c) * sp.plane() + i;
              sum_g += g.data[k];
              sum_gx += g.data[k] * xhat.data[k];
            }
          if (gp) {
            gp->weights[c] += sum_gx;
            gp->biases[c] += sum_g;
          }
          if (!need_dx) continue;
          const double gamma = p->weights[c];
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < sp.plane(); ++i) {
              const std::size_t k = (b * sp.c + c) * sp.plane() + i;
              if (tape.mode_ == Mode::train)
                dx.data[k] = gamma * inv[c] / count *
                             (count * g.data[k] - sum_g - xhat.data[k] * sum_gx);
              else
                dx.data[k] = gamma * inv[c] * g.data[k];
            }
        }
        break;
      }
      case LayerKind::activation:
        if (need_dx) dx.data = g.data;
        break;
    }
    if (!need_dx) return Tensor();
    g = std::move(dx);
  }
  return g;
}

Tensor sigmoid_clamp(const Tensor& t) {
  Tensor out = t;
  out.grad.reset();
  for (double& v : out.data) v = activate(Activation::sigmoid, v);
  return out;
}

AdamState make_adam_state(const ParamSet& params) {
  return AdamState{0, zeros_like(params), zeros_like(params)};
}

void optimizer_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr,
                    const AdamOptions& opt) {
  if (!same_layout(params, grads))
    throw ShapeError("optimizer_step: gradient layout does not match parameters");
  for (const auto& [name, g] : grads) {
    auto check = [&](const Tensor& t, const char* what) {
      for (std::size_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t[i]))
          throw std::domain_error("non-finite gradient in '" + name + "." + what + "' at index " +
                                  std::to_string(i));
    };
    check(g.weights, "weights");
    check(g.biases, "biases");
  }
  if (!same_layout(params, state.m)) {
    state.m = zeros_like(params);
    state.v = zeros_like(params);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  auto update = [&](Tensor& w, const Tensor& g, Tensor& m, Tensor& v) {
    for (std::size_t i = 0; i < w.numel(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  };
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    update(p.weights, g.weights, m.weights, v.weights);
    update(p.biases, g.biases, m.biases, v.biases);
  }
}

double global_grad_norm(const std::vector<const ParamSet*>& grads) {
  double sq = 0.0;
  for (const ParamSet* ps : grads)
    for (const auto& [name, p] : *ps) sq += squared_norm(p.weights) + squared_norm(p.biases);
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<ParamSet*>& grads, double max_norm) {
  std::vector<const ParamSet*> view(grads.begin(), grads.end());
  const double norm = global_grad_norm(view);
  if (std::isfinite(norm) && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-12);
    for (ParamSet* ps : grads) scale(*ps, factor);
  }
  return norm;
}

}  // namespace tdmpc::nn
