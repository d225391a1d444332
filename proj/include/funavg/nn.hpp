#pragma once

// Same-resolution convolutional segmentation net with per-client 1×1 heads,
// inverted dropout and exact reverse-mode gradients.

#include <funavg/errors.hpp>
#include <funavg/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace funavg {

enum class LayerKind { conv3x3, relu, dropout, conv1x1 };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in_channels = 0;
  int out_channels = 0;
  double dropout_p = 0.0;

  bool is_conv() const { return kind == LayerKind::conv3x3 || kind == LayerKind::conv1x1; }
  int kernel() const { return kind == LayerKind::conv3x3 ? 3 : 1; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// conv3x3(in→w0)-relu-dropout-conv3x3(w0→w1)-relu-dropout-...-conv3x3-relu.
/// Dropout follows every hidden conv except the last.
std::vector<LayerSpec> make_backbone(const std::vector<int>& widths, double dropout_p, int in_channels = 1);

/// Throws std::invalid_argument when channel counts do not chain.
void validate_backbone(const std::vector<LayerSpec>& spec);

/// Output channels of the last conv, i.e. what every head consumes.
int feature_channels(const std::vector<LayerSpec>& spec);

enum class Mode { train, mc_test, deterministic };

inline bool dropout_active(Mode mode) { return mode != Mode::deterministic; }

template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> weight;  // out × in × k × k
  Tensor<Scalar> bias;    // out

  int out_channels() const { return weight.dim(0); }
  int in_channels() const { return weight.dim(1); }
  int kernel() const { return weight.dim(2); }

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

template <typename Scalar>
struct ModelParams {
  std::vector<LayerSpec> spec;
  std::vector<ConvParams<Scalar>> backbone;  // one entry per conv in `spec`
  std::map<std::string, ConvParams<Scalar>> heads;

  const ConvParams<Scalar>& head(const std::string& id) const {
    auto it = heads.find(id);
    if (it == heads.end()) throw std::invalid_argument("unknown head id '" + id + "'");
    return it->second;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Gradients for the backbone plus the single head that was used.
template <typename Scalar>
struct Gradients {
  std::string head_id;
  std::vector<ConvParams<Scalar>> backbone;
  ConvParams<Scalar> head;
};

namespace detail {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
Eigen::Map<const Matrix<Scalar>> weight_matrix(const ConvParams<Scalar>& conv) {
  const Eigen::Index fan_in = Eigen::Index(conv.in_channels()) * conv.kernel() * conv.kernel();
  return {conv.weight.data().data(), fan_in, conv.out_channels()};
}

template <typename Scalar>
Eigen::Map<Matrix<Scalar>> weight_matrix(ConvParams<Scalar>& conv) {
  const Eigen::Index fan_in = Eigen::Index(conv.in_channels()) * conv.kernel() * conv.kernel();
  return {conv.weight.data().data(), fan_in, conv.out_channels()};
}

/// Zero-padded patch matrix: row = pixel, column = (channel, ky, kx).
template <typename Scalar>
Matrix<Scalar> im2col(const Tensor<Scalar>& x, int k) {
  const int channels = x.dim(0), h = x.dim(1), w = x.dim(2), pad = k / 2;
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(Eigen::Index(h) * w, Eigen::Index(channels) * k * k);
  for (int c = 0; c < channels; ++c) {
    const Scalar* src = x.data().data() + Eigen::Index(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Scalar* dst = cols.col((Eigen::Index(c) * k + ky) * k + kx).data();
        const int dy = ky - pad, dx = kx - pad;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y) {
          const Scalar* row = src + Eigen::Index(y + dy) * w + dx;
          Scalar* out = dst + Eigen::Index(y) * w;
          for (int xx = x0; xx < x1; ++xx) out[xx] = row[xx];
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_add(const Matrix<Scalar>& cols, int k, Tensor<Scalar>& dx) {
  const int channels = dx.dim(0), h = dx.dim(1), w = dx.dim(2), pad = k / 2;
  for (int c = 0; c < channels; ++c) {
    Scalar* dst = dx.data().data() + Eigen::Index(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* src = cols.col((Eigen::Index(c) * k + ky) * k + kx).data();
        const int dy = ky - pad, ddx = kx - pad;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -ddx), x1 = std::min(w, w - ddx);
        for (int y = y0; y < y1; ++y) {
          Scalar* row = dst + Eigen::Index(y + dy) * w + ddx;
          const Scalar* in = src + Eigen::Index(y) * w;
          for (int xx = x0; xx < x1; ++xx) row[xx] += in[xx];
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> conv_forward(const ConvParams<Scalar>& conv, const Tensor<Scalar>& x, Matrix<Scalar>* cols_out) {
  if (x.rank() != 3 || x.dim(0) != conv.in_channels())
    throw std::invalid_argument("conv: channel mismatch");
  Tensor<Scalar> y({conv.out_channels(), x.dim(1), x.dim(2)});
  auto out = y.pixels();
  if (conv.kernel() == 1) {
    out.noalias() = x.pixels() * weight_matrix(conv);
  } else {
    Matrix<Scalar> cols = im2col(x, conv.kernel());
    out.noalias() = cols * weight_matrix(conv);
    if (cols_out) *cols_out = std::move(cols);
  }
  out.rowwise() += conv.bias.data().transpose();
  return y;
}

/// Accumulates parameter gradients into `grad` and returns dL/dx.
template <typename Scalar>
Tensor<Scalar> conv_backward(const ConvParams<Scalar>& conv, const Tensor<Scalar>& x, const Matrix<Scalar>& cols,
                             const Tensor<Scalar>& dy, ConvParams<Scalar>& grad, bool need_input_grad) {
  auto g = dy.pixels();
  auto dw = weight_matrix(grad);
  if (conv.kernel() == 1) {
    dw.noalias() += x.pixels().transpose() * g;
  } else {
    dw.noalias() += cols.transpose() * g;
  }
  grad.bias.data() += g.colwise().sum().transpose();
  Tensor<Scalar> dx({x.dim(0), x.dim(1), x.dim(2)});
  if (!need_input_grad) return dx;
  if (conv.kernel() == 1) {
    dx.pixels().noalias() = g * weight_matrix(conv).transpose();
  } else {
    Matrix<Scalar> dcols = g * weight_matrix(conv).transpose();
    col2im_add(dcols, conv.kernel(), dx);
  }
  return dx;
}

template <typename Scalar>
ConvParams<Scalar> zeros_like(const ConvParams<Scalar>& conv) {
  return {Tensor<Scalar>(conv.weight.dims()), Tensor<Scalar>(conv.bias.dims())};
}

}  // namespace detail

/// Per-element inverted-dropout multipliers: 0 with probability p, else 1/(1−p).
template <typename Scalar>
Eigen::Array<Scalar, Eigen::Dynamic, 1> dropout_mask(Eigen::Index n, double p, const RngState& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mask(n);
  const Scalar keep = Scalar(1.0 / (1.0 - p));
  auto gen = rng.engine();
  for (Eigen::Index i = 0; i < n; ++i) mask[i] = uniform01(gen) < p ? Scalar(0) : keep;
  return mask;
}

template <typename Scalar>
Tensor<Scalar> dropout_apply(const Tensor<Scalar>& x, double p, const RngState& rng, bool active) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!active || p == 0.0) return x;
  Tensor<Scalar> y = x;
  y.data().array() *= dropout_mask<Scalar>(x.size(), p, rng);
  return y;
}

/// Per-pixel softmax over the channel axis, max-subtracted.
template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits) {
  Tensor<Scalar> probs = logits;
  auto p = probs.pixels();
  p.colwise() -= p.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return probs;
}

/// Mean over pixels of −log probs[target].
template <typename Scalar>
double cross_entropy(const Tensor<Scalar>& probs, const LabelMap& target) {
  const int channels = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  if (target.rows() != h || target.cols() != w) throw std::invalid_argument("cross_entropy: shape mismatch");
  auto p = probs.pixels();
  double loss = 0.0;
  const Eigen::Index n = Eigen::Index(h) * w;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = target.data()[i];
    if (t < 0 || t >= channels) throw std::invalid_argument("cross_entropy: target out of channel range");
    loss -= std::log(std::max<double>(double(p(i, t)), std::numeric_limits<double>::min()));
  }
  return loss / double(n);
}

template <typename Scalar>
ConvParams<Scalar> init_conv(int in, int out, int k, double gain, std::mt19937_64& gen) {
  ConvParams<Scalar> conv{Tensor<Scalar>({out, in, k, k}), Tensor<Scalar>({out})};
  const double a = std::sqrt(gain / double(in * k * k));
  for (Eigen::Index i = 0; i < conv.weight.size(); ++i) conv.weight[i] = Scalar((2.0 * uniform01(gen) - 1.0) * a);
  return conv;
}

/// Uniform(−a, a) kernels, a = sqrt(6/fan_in) in the backbone (He) and
/// sqrt(1/fan_in) in the heads; zero biases.
template <typename Scalar>
ModelParams<Scalar> init_model(const std::vector<LayerSpec>& spec, const std::map<std::string, int>& head_channels,
                               const RngState& rng) {
  validate_backbone(spec);
  ModelParams<Scalar> params;
  params.spec = spec;
  auto gen = rng.derive(0x6261636bULL).engine();
  for (const auto& layer : spec)
    if (layer.is_conv())
      params.backbone.push_back(init_conv<Scalar>(layer.in_channels, layer.out_channels, layer.kernel(), 6.0, gen));
  const int features = feature_channels(spec);
  for (const auto& [id, channels] : head_channels) {
    if (channels < 2) throw std::invalid_argument("head '" + id + "' needs at least 2 channels");
    auto head_gen = rng.derive(0x68656164ULL, stable_hash(id)).engine();
    params.heads.emplace(id, init_conv<Scalar>(features, channels, 1, 1.0, head_gen));
  }
  return params;
}

/// Intermediate state kept by a forward pass for the matching backward pass.
template <typename Scalar>
struct ForwardTrace {
  std::vector<Tensor<Scalar>> activations;  // activations[i] is the input to layer i
  std::vector<detail::Matrix<Scalar>> columns;
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> masks;
  double min_relu_margin = std::numeric_limits<double>::infinity();
};

/// Backbone output F×H×W. Dropout layer `i` draws its mask from
/// rng.derive(i), so a backward call with the same rng sees the same mask.
template <typename Scalar>
Tensor<Scalar> features(const ModelParams<Scalar>& params, const Tensor<Scalar>& input, Mode mode,
                        const RngState& rng, ForwardTrace<Scalar>* trace = nullptr) {
  if (input.rank() != 3) throw std::invalid_argument("forward: input must be C×H×W");
  if (!params.spec.empty() && input.dim(0) != params.spec.front().in_channels)
    throw std::invalid_argument("forward: input channel mismatch");
  if (!input.all_finite()) throw DivergenceError("forward: non-finite input");

  Tensor<Scalar> x = input;
  std::size_t conv_index = 0;
  for (std::size_t i = 0; i < params.spec.size(); ++i) {
    const auto& layer = params.spec[i];
    if (trace) trace->activations.push_back(x);
    switch (layer.kind) {
      case LayerKind::conv3x3:
      case LayerKind::conv1x1: {
        detail::Matrix<Scalar> cols;
        x = detail::conv_forward(params.backbone.at(conv_index++), x, trace ? &cols : nullptr);
        if (trace) trace->columns.push_back(std::move(cols));
        break;
      }
      case LayerKind::relu:
        if (trace) trace->min_relu_margin = std::min(trace->min_relu_margin, double(x.data().cwiseAbs().minCoeff()));
        x.data() = x.data().cwiseMax(Scalar(0));
        break;
      case LayerKind::dropout: {
        if (dropout_active(mode) && layer.dropout_p > 0.0) {
          auto mask = dropout_mask<Scalar>(x.size(), layer.dropout_p, rng.derive(i));
          x.data().array() *= mask;
          if (trace) trace->masks.push_back(std::move(mask));
        } else if (trace) {
          trace->masks.push_back(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Ones(x.size()));
        }
        break;
      }
    }
  }
  if (trace) trace->activations.push_back(x);
  return x;
}

template <typename Scalar>
Tensor<Scalar> head_logits(const ModelParams<Scalar>& params, const std::string& head_id, const Tensor<Scalar>& feats) {
  const auto& head = params.head(head_id);
  if (head.in_channels() != feats.dim(0)) throw std::invalid_argument("forward: head channel mismatch");
  Tensor<Scalar> logits = detail::conv_forward<Scalar>(head, feats, nullptr);
  if (!logits.all_finite()) throw DivergenceError("forward: non-finite logits");
  return logits;
}

/// Logits C×H×W for the given head.
template <typename Scalar>
Tensor<Scalar> forward(const ModelParams<Scalar>& params, const std::string& head_id, const Tensor<Scalar>& input,
                       Mode mode, const RngState& rng, ForwardTrace<Scalar>* trace = nullptr) {
  params.head(head_id);
  return head_logits(params, head_id, features(params, input, mode, rng, trace));
}

template <typename Scalar>
double loss(const ModelParams<Scalar>& params, const std::string& head_id, const Tensor<Scalar>& input,
            const LabelMap& target, Mode mode, const RngState& rng) {
  return cross_entropy(softmax_channels(forward(params, head_id, input, mode, rng)), target);
}

template <typename Scalar>
struct BackwardResult {
  Gradients<Scalar> grads;
  double loss = 0.0;
};

/// Exact gradients of cross_entropy ∘ softmax ∘ forward(train) with the same
/// dropout masks the paired forward would draw from `rng`.
template <typename Scalar>
BackwardResult<Scalar> backward(const ModelParams<Scalar>& params, const std::string& head_id,
                                const Tensor<Scalar>& input, const LabelMap& target, const RngState& rng,
                                Mode mode = Mode::train) {
  ForwardTrace<Scalar> trace;
  Tensor<Scalar> probs = softmax_channels(forward(params, head_id, input, mode, rng, &trace));
  BackwardResult<Scalar> result;
  result.loss = cross_entropy(probs, target);

  // d(mean CE)/d(logits) = (p − onehot) / npix
  const Eigen::Index npix = target.size();
  auto g = probs.pixels();
  for (Eigen::Index i = 0; i < npix; ++i) g(i, target.data()[i]) -= Scalar(1);
  g *= Scalar(1.0 / double(npix));

  const auto& head = params.head(head_id);
  auto& grads = result.grads;
  grads.head_id = head_id;
  grads.head = detail::zeros_like(head);
  for (const auto& conv : params.backbone) grads.backbone.push_back(detail::zeros_like(conv));

  Tensor<Scalar> delta =
      detail::conv_backward(head, trace.activations.back(), detail::Matrix<Scalar>{}, probs, grads.head, true);

  std::size_t conv_index = params.backbone.size();
  std::size_t mask_index = trace.masks.size();
  for (std::size_t i = params.spec.size(); i-- > 0;) {
    const auto& layer = params.spec[i];
    switch (layer.kind) {
      case LayerKind::conv3x3:
      case LayerKind::conv1x1: {
        --conv_index;
        delta = detail::conv_backward(params.backbone[conv_index], trace.activations[i], trace.columns[conv_index],
                                      delta, grads.backbone[conv_index], i > 0);
        break;
      }
      case LayerKind::relu: {
        const auto& out = trace.activations[i + 1];
        delta.data().array() *= (out.data().array() > Scalar(0)).template cast<Scalar>();
        break;
      }
      case LayerKind::dropout:
        delta.data().array() *= trace.masks[--mask_index];
        break;
    }
  }
  return result;
}

template <typename Scalar>
void check_same_shape(const ConvParams<Scalar>& a, const ConvParams<Scalar>& b) {
  if (a.weight.dims() != b.weight.dims() || a.bias.dims() != b.bias.dims())
    throw std::invalid_argument("parameter shape mismatch");
}

/// params ← params − lr·grads for the backbone and the gradient's head.
template <typename Scalar>
void sgd_step(ModelParams<Scalar>& params, const Gradients<Scalar>& grads, Scalar lr) {
  if (!(lr >= Scalar(0))) throw std::invalid_argument("sgd_step: lr must be nonnegative");
  if (grads.backbone.size() != params.backbone.size()) throw std::invalid_argument("sgd_step: layer count mismatch");
  auto it = params.heads.find(grads.head_id);
  if (it == params.heads.end()) throw std::invalid_argument("sgd_step: unknown head id '" + grads.head_id + "'");
  for (std::size_t l = 0; l < params.backbone.size(); ++l) check_same_shape(params.backbone[l], grads.backbone[l]);
  check_same_shape(it->second, grads.head);
  for (std::size_t l = 0; l < params.backbone.size(); ++l) {
    params.backbone[l].weight.data() -= lr * grads.backbone[l].weight.data();
    params.backbone[l].bias.data() -= lr * grads.backbone[l].bias.data();
  }
  it->second.weight.data() -= lr * grads.head.weight.data();
  it->second.bias.data() -= lr * grads.head.bias.data();
}

/// a += scale·b, elementwise over every tensor.
template <typename Scalar>
void accumulate(Gradients<Scalar>& into, const Gradients<Scalar>& add, Scalar scale = Scalar(1)) {
  for (std::size_t l = 0; l < into.backbone.size(); ++l) {
    into.backbone[l].weight.data() += scale * add.backbone[l].weight.data();
    into.backbone[l].bias.data() += scale * add.backbone[l].bias.data();
  }
  into.head.weight.data() += scale * add.head.weight.data();
  into.head.bias.data() += scale * add.head.bias.data();
}

struct GradCheckInstance {
  std::string head_id;
  Tensor<double> input;
  LabelMap target;
  RngState rng;
};

/// Max over all backbone and head parameters of
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e−12), using central
/// differences with step `eps`. `analytic` overrides the computed gradient.
double grad_check(const ModelParams<double>& params, const GradCheckInstance& instance, double eps,
                  const Gradients<double>* analytic = nullptr);

/// Smallest |pre-activation| over all relu inputs of a train-mode forward.
double relu_margin(const ModelParams<double>& params, const GradCheckInstance& instance);

}  // namespace funavg
