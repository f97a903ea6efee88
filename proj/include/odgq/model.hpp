#pragma once

// Quantizable residual CNN: stem conv, residual stages, global pooling and a
// linear classifier. The pooled, flattened activations double as the
// alignment features fed to the MMD loss.

#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "odgq/autodiff.hpp"
#include "odgq/quantization.hpp"
#include "odgq/random.hpp"
#include "odgq/tensor.hpp"

namespace odgq {

struct ArchConfig {
  std::size_t in_channels = 1;
  std::size_t in_height = 28;
  std::size_t in_width = 28;
  std::size_t classes = 10;
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t blocks_per_stage = 1;
  QuantConfig quant{};
  bool quantize_first_last = false;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
};

enum class LayerKind { conv2d, batchnorm, relu, residual_block, avgpool_global, flatten, linear };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::residual_block: return "residual-block";
    case LayerKind::avgpool_global: return "avgpool-global";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool quantize_weights = false;
  bool quantize_activations = false;
  bool projection = false;  // residual block with 1x1 conv + bn shortcut
  Shape in_shape;           // per-sample (C,H,W) or (F)
  Shape out_shape;
};

struct Model {
  ArchConfig arch;
  std::vector<LayerSpec> layers;
};

template <class T>
struct Parameters {
  std::map<std::string, Tensor<T>> tensors;
  std::set<std::string> trainable;

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& name : trainable) n += tensors.at(name).size();
    return n;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    out.trainable = trainable;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Architecture text form (embedded in checkpoints)

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string arch_to_text(const ArchConfig& a) {
  std::ostringstream os;
  os << "input_shape=" << a.in_channels << ',' << a.in_height << ',' << a.in_width << '\n'
     << "classes=" << a.classes << '\n'
     << "widths=" << join_sizes(a.widths) << '\n'
     << "blocks_per_stage=" << a.blocks_per_stage << '\n'
     << "bits_w=" << a.quant.weight_bits << '\n'
     << "bits_a=" << a.quant.activation_bits << '\n'
     << "binarize_granularity=" << granularity_name(a.quant.granularity) << '\n'
     << "quantize_first_last=" << (a.quantize_first_last ? "true" : "false") << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ConfigError("invalid geometry: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

template <class T>
void add_conv(Parameters<T>& p, const std::string& name, std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(in * k * k)));
  p.tensors.emplace(name + ".weight", normal_tensor<T>({out, in, k, k}, rng, T(0), std));
  p.trainable.insert(name + ".weight");
}

template <class T>
void add_bn(Parameters<T>& p, const std::string& name, std::size_t c) {
  p.tensors.emplace(name + ".gamma", Tensor<T>({c}, T(1)));
  p.tensors.emplace(name + ".beta", Tensor<T>({c}, T(0)));
  p.tensors.emplace(name + ".running_mean", Tensor<T>({c}, T(0)));
  p.tensors.emplace(name + ".running_var", Tensor<T>({c}, T(1)));
  p.trainable.insert(name + ".gamma");
  p.trainable.insert(name + ".beta");
}

}  // namespace detail

inline void validate(const ArchConfig& a) {
  if (a.classes == 0) throw ConfigError("class count must be positive");
  if (a.in_channels == 0 || a.in_height == 0 || a.in_width == 0) throw ConfigError("input shape must be positive");
  if (a.widths.empty()) throw ConfigError("at least one stage width is required");
  for (std::size_t w : a.widths)
    if (w == 0) throw ConfigError("stage widths must be positive");
  if (a.blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be positive");
  validate(a.quant);
}

/// Layer stack for an architecture. Pure function of the config.
inline Model make_model(const ArchConfig& arch) {
  validate(arch);
  Model m{arch, {}};
  const bool qw = arch.quant.weight_bits < 32;
  const bool qa = arch.quant.activation_bits < 32;
  std::size_t c = arch.in_channels, h = arch.in_height, w = arch.in_width;

  LayerSpec stem{LayerKind::conv2d, "stem.conv"};
  stem.in_channels = c;
  stem.out_channels = arch.widths[0];
  stem.kernel = 3;
  stem.pad = 1;
  stem.quantize_weights = qw && arch.quantize_first_last;
  stem.in_shape = {c, h, w};
  c = arch.widths[0];
  h = detail::conv_out(h, 3, 1, 1);
  w = detail::conv_out(w, 3, 1, 1);
  stem.out_shape = {c, h, w};
  m.layers.push_back(stem);

  LayerSpec bn{LayerKind::batchnorm, "stem.bn"};
  bn.in_channels = bn.out_channels = c;
  bn.in_shape = bn.out_shape = {c, h, w};
  m.layers.push_back(bn);

  LayerSpec act{LayerKind::relu, "stem.act"};
  act.in_channels = act.out_channels = c;
  act.quantize_activations = qa;
  act.in_shape = act.out_shape = {c, h, w};
  m.layers.push_back(act);

  for (std::size_t s = 0; s < arch.widths.size(); ++s) {
    for (std::size_t b = 0; b < arch.blocks_per_stage; ++b) {
      LayerSpec blk{LayerKind::residual_block, "stage" + std::to_string(s + 1) + ".block" + std::to_string(b)};
      blk.in_channels = c;
      blk.out_channels = arch.widths[s];
      blk.kernel = 3;
      blk.pad = 1;
      blk.stride = (s > 0 && b == 0) ? 2 : 1;
      blk.quantize_weights = qw;
      blk.quantize_activations = qa;
      blk.projection = blk.stride != 1 || blk.in_channels != blk.out_channels;
      blk.in_shape = {c, h, w};
      c = blk.out_channels;
      h = detail::conv_out(h, 3, blk.stride, 1);
      w = detail::conv_out(w, 3, blk.stride, 1);
      blk.out_shape = {c, h, w};
      m.layers.push_back(blk);
    }
  }

  LayerSpec pool{LayerKind::avgpool_global, "pool"};
  pool.in_channels = pool.out_channels = c;
  pool.in_shape = {c, h, w};
  pool.out_shape = {c, 1, 1};
  m.layers.push_back(pool);

  LayerSpec flat{LayerKind::flatten, "flatten"};
  flat.in_shape = {c, 1, 1};
  flat.out_shape = {c};
  m.layers.push_back(flat);

  LayerSpec fc{LayerKind::linear, "fc"};
  fc.in_channels = c;
  fc.out_channels = arch.classes;
  fc.quantize_weights = qw && arch.quantize_first_last;
  fc.in_shape = {c};
  fc.out_shape = {arch.classes};
  m.layers.push_back(fc);

  for (std::size_t i = 1; i < m.layers.size(); ++i) {
    if (m.layers[i].in_shape != m.layers[i - 1].out_shape) {
      throw ConfigError("layer '" + m.layers[i].name + "' does not compose with '" + m.layers[i - 1].name + "'");
    }
  }
  return m;
}

/// Fresh parameters: He-normal convolution and linear weights, unit BN gain.
template <class T>
Parameters<T> init_parameters(const Model& m, std::uint64_t seed) {
  Parameters<T> p;
  Rng rng(derive_seed(seed, 0x1417));
  for (const LayerSpec& l : m.layers) {
    switch (l.kind) {
      case LayerKind::conv2d:
        detail::add_conv(p, l.name, l.out_channels, l.in_channels, l.kernel, rng);
        break;
      case LayerKind::batchnorm:
        detail::add_bn(p, l.name, l.out_channels);
        break;
      case LayerKind::residual_block:
        detail::add_conv(p, l.name + ".conv1", l.out_channels, l.in_channels, 3, rng);
        detail::add_bn(p, l.name + ".bn1", l.out_channels);
        detail::add_conv(p, l.name + ".conv2", l.out_channels, l.out_channels, 3, rng);
        detail::add_bn(p, l.name + ".bn2", l.out_channels);
        if (l.projection) {
          detail::add_conv(p, l.name + ".shortcut.conv", l.out_channels, l.in_channels, 1, rng);
          detail::add_bn(p, l.name + ".shortcut.bn", l.out_channels);
        }
        break;
      case LayerKind::linear: {
        const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(l.in_channels)));
        p.tensors.emplace(l.name + ".weight", normal_tensor<T>({l.in_channels, l.out_channels}, rng, T(0), std));
        p.tensors.emplace(l.name + ".bias", Tensor<T>({l.out_channels}, T(0)));
        p.trainable.insert(l.name + ".weight");
        p.trainable.insert(l.name + ".bias");
        break;
      }
      default:
        break;
    }
  }
  return p;
}

template <class T>
std::pair<Model, Parameters<T>> build_model(const ArchConfig& arch, std::uint64_t seed) {
  Model m = make_model(arch);
  Parameters<T> p = init_parameters<T>(m, seed);
  return {std::move(m), std::move(p)};
}

/// Checks that every tensor the architecture needs is present with the right
/// shape (extra tensors are an error too).
template <class T>
void check_parameters(const Model& m, const Parameters<T>& p) {
  const Parameters<T> ref = init_parameters<T>(m, 0);
  for (const auto& [name, t] : ref.tensors) {
    auto it = p.tensors.find(name);
    if (it == p.tensors.end()) throw ShapeError("parameter '" + name + "' missing");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", architecture expects " +
                       shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : p.tensors) {
    if (!ref.tensors.count(name)) throw ShapeError("unexpected parameter '" + name + "'");
  }
  for (const auto& [name, t] : p.tensors) {
    if (name.ends_with(".running_var")) {
      for (T v : t.data())
        if (!(v > T(0))) throw NumericError("running variance of '" + name + "' is not strictly positive");
    }
  }
}

// ---------------------------------------------------------------------------
// Forward pass

enum class Mode { train, eval };

struct ForwardOptions {
  Mode mode = Mode::eval;
  bool update_running_stats = true;
};

template <class T>
struct ModelOutput {
  Var<T> logits;    // [B, classes]
  Var<T> features;  // [B, F], pooled output of the last stage
};

/// Parameters placed on a tape as leaves.
template <class T>
struct BoundParams {
  std::map<std::string, Var<T>> vars;
  const Var<T>& operator()(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error("parameter '" + name + "' not bound");
    return it->second;
  }
};

template <class T>
BoundParams<T> bind(Tape<T>& tape, const Parameters<T>& params, bool requires_grad) {
  BoundParams<T> b;
  for (const auto& name : params.trainable) b.vars.emplace(name, tape.leaf(params.tensors.at(name), requires_grad));
  return b;
}

namespace detail {

template <class T>
Var<T> activation(const Var<T>& x, bool quantize, int bits) {
  if (quantize && bits == 1) return fake_binarize(x, ScaleGranularity::per_output_channel);
  Var<T> r = relu(x);
  return quantize ? fake_quantize_activation(r, bits) : r;
}

template <class T>
Var<T> conv_layer(const Var<T>& x, const BoundParams<T>& bp, const std::string& name, bool quantize,
                  const QuantConfig& q, Conv2dAttrs attrs) {
  Var<T> w = bp(name + ".weight");
  if (quantize) w = quantize_weight_var(w, q.weight_bits, q.granularity);
  return conv2d(x, w, attrs);
}

template <class T>
Var<T> bn_layer(const Var<T>& x, Parameters<T>& params, const BoundParams<T>& bp, const std::string& name,
                const ArchConfig& arch, const ForwardOptions& opt) {
  BatchNormAttrs a;
  a.training = opt.mode == Mode::train;
  a.update_running_stats = opt.update_running_stats;
  a.momentum = arch.bn_momentum;
  a.eps = arch.bn_eps;
  BatchNormState<T> st{&params.at(name + ".running_mean"), &params.at(name + ".running_var")};
  return batchnorm(x, bp(name + ".gamma"), bp(name + ".beta"), st, a);
}

}  // namespace detail

/// h(x). In train mode batchnorm uses batch statistics (and updates running
/// statistics when requested); in eval mode it uses the running statistics
/// and `params` is not modified.
template <class T>
ModelOutput<T> forward(const Model& model, Parameters<T>& params, const BoundParams<T>& bp, const Var<T>& x,
                       ForwardOptions opt = {}) {
  const ArchConfig& arch = model.arch;
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != arch.in_channels || xs[2] != arch.in_height || xs[3] != arch.in_width) {
    throw ShapeError("model input must be [B," + std::to_string(arch.in_channels) + "," + std::to_string(arch.in_height) +
                     "," + std::to_string(arch.in_width) + "], got " + shape_str(xs));
  }
  const QuantConfig& q = arch.quant;
  Var<T> h = x;
  Var<T> features;
  for (const LayerSpec& l : model.layers) {
    switch (l.kind) {
      case LayerKind::conv2d:
        h = detail::conv_layer(h, bp, l.name, l.quantize_weights, q, {l.stride, l.pad});
        break;
      case LayerKind::batchnorm:
        h = detail::bn_layer(h, params, bp, l.name, arch, opt);
        break;
      case LayerKind::relu:
        h = detail::activation(h, l.quantize_activations, q.activation_bits);
        break;
      case LayerKind::residual_block: {
        Var<T> y = detail::conv_layer(h, bp, l.name + ".conv1", l.quantize_weights, q, {l.stride, 1});
        y = detail::bn_layer(y, params, bp, l.name + ".bn1", arch, opt);
        y = detail::activation(y, l.quantize_activations, q.activation_bits);
        y = detail::conv_layer(y, bp, l.name + ".conv2", l.quantize_weights, q, {1, 1});
        y = detail::bn_layer(y, params, bp, l.name + ".bn2", arch, opt);
        Var<T> shortcut = h;
        if (l.projection) {
          shortcut = detail::conv_layer(h, bp, l.name + ".shortcut.conv", l.quantize_weights, q, {l.stride, 0});
          shortcut = detail::bn_layer(shortcut, params, bp, l.name + ".shortcut.bn", arch, opt);
        }
        h = detail::activation(add(y, shortcut), l.quantize_activations, q.activation_bits);
        break;
      }
      case LayerKind::avgpool_global:
        h = avgpool2d(h);
        break;
      case LayerKind::flatten:
        h = flatten(h);
        features = h;
        break;
      case LayerKind::linear: {
        Var<T> w = bp(l.name + ".weight");
        if (l.quantize_weights) w = quantize_weight_var(w, q.weight_bits, q.granularity);
        h = add(matmul(h, w), bp(l.name + ".bias"));
        break;
      }
    }
  }
  return {h, features};
}

/// Mean cross-entropy of logits [B,K] against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy<T>(logits, labels);
}

/// Eval-mode logits for a whole tensor batch, without recording gradients.
template <class T>
Tensor<T> predict_logits(const Model& model, Parameters<T>& params, const Tensor<T>& x) {
  Tape<T> tape;
  tape.set_recording(false);
  BoundParams<T> bp = bind(tape, params, false);
  Var<T> xv = tape.leaf(x, false);
  return forward(model, params, bp, xv, {Mode::eval, false}).logits.value();
}

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.raw() + b * K;
    out[b] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

}  // namespace odgq
