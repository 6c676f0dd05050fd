#pragma once

#include "brainfold/common.hpp"
#include "brainfold/io.hpp"
#include "brainfold/lstm.hpp"
#include "brainfold/rng.hpp"
#include "brainfold/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace brainfold {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// The three encoder variants:
///   common         — all channels feed one stacked LSTM; the deepest layer's
///                    final hidden state is the feature vector.
///   channel_common — one small LSTM per channel (scalar input); their
///                    concatenated hidden states feed the common stack at
///                    every timestep.
///   common_output  — common stack followed by an affine + ReLU output layer.
enum class EncoderArch { common, channel_common, common_output };

inline std::string_view arch_name(EncoderArch a) {
  switch (a) {
    case EncoderArch::common: return "common";
    case EncoderArch::channel_common: return "channel_common";
    case EncoderArch::common_output: return "common_output";
  }
  fail("encoder-config", "unknown architecture tag");
}

inline EncoderArch arch_from_name(std::string_view name) {
  if (name == "common") return EncoderArch::common;
  if (name == "channel_common") return EncoderArch::channel_common;
  if (name == "common_output") return EncoderArch::common_output;
  fail("encoder-config", "unknown architecture '" + std::string(name) + "'");
}

struct EncoderConfig {
  EncoderArch arch = EncoderArch::common;
  std::vector<int> common_sizes{128};  // stacked common-layer hidden sizes
  int channel_hidden = 5;              // per-channel hidden size (channel_common)
  int output_size = 128;               // affine+ReLU width (common_output)
  int channel_count = 29;
  int class_count = 40;
  bool standardize = true;  // per-channel zero-mean/unit-variance before encoding

  void validate() const {
    const std::string stage = "encoder-config";
    require(!common_sizes.empty(), stage, "at least one common layer is required");
    for (int s : common_sizes) require(s > 0, stage, "layer sizes must be positive");
    require(channel_count >= 1, stage, "channel count must be >= 1");
    require(class_count >= 1, stage, "class count must be >= 1");
    if (arch == EncoderArch::channel_common)
      require(channel_hidden >= 1, stage, "per-channel hidden size must be >= 1");
    if (arch == EncoderArch::common_output)
      require(output_size >= 1, stage, "output layer width must be >= 1");
  }

  /// Width of the feature vector the encoder emits.
  int feature_dimension() const {
    return arch == EncoderArch::common_output ? output_size : common_sizes.back();
  }

  /// Width of the per-timestep input to the first common layer.
  int stack_input_dimension() const {
    return arch == EncoderArch::channel_common ? channel_count * channel_hidden : channel_count;
  }
};

/// Parses the compact layer-size notation used in reports and config files:
///   "128,64 common"          two stacked common layers
///   "5 channel, 32 common"   per-channel hidden 5, common hidden 32
///   "128 common, 128 output" common hidden 128 plus output width 128
/// Sizes not covered by the notation (channel_count, class_count, ...) are
/// left untouched.
inline void parse_encoder_layout(std::string_view text, EncoderConfig& cfg) {
  const std::string stage = "encoder-config";
  std::vector<int> pending;
  std::vector<int> common, channel, output;
  std::string token;
  auto take = [&](std::string_view word) {
    require(!pending.empty(), stage, "layer group '" + std::string(word) + "' needs a size");
    if (word == "common")
      common = std::exchange(pending, {});
    else if (word == "channel")
      channel = std::exchange(pending, {});
    else if (word == "output")
      output = std::exchange(pending, {});
    else
      fail(stage, "unknown layer group '" + std::string(word) + "'");
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::string_view piece = text.substr(pos, comma - pos);
    // split the piece into whitespace-separated fields
    std::size_t i = 0;
    while (i < piece.size()) {
      while (i < piece.size() && std::isspace(static_cast<unsigned char>(piece[i]))) ++i;
      std::size_t j = i;
      while (j < piece.size() && !std::isspace(static_cast<unsigned char>(piece[j]))) ++j;
      if (j > i) {
        const std::string_view field = piece.substr(i, j - i);
        if (std::isdigit(static_cast<unsigned char>(field.front()))) {
          int value = 0;
          for (char ch : field) {
            require(std::isdigit(static_cast<unsigned char>(ch)), stage,
                    "bad size '" + std::string(field) + "'");
            value = value * 10 + (ch - '0');
          }
          require(value > 0, stage, "layer sizes must be positive");
          pending.push_back(value);
        } else {
          take(field);
        }
      }
      i = j;
    }
    pos = comma + 1;
  }
  require(pending.empty(), stage, "trailing sizes without a layer group");
  require(!common.empty(), stage, "layout needs a 'common' group");
  require(channel.size() <= 1, stage, "'channel' group takes a single size");
  require(output.size() <= 1, stage, "'output' group takes a single size");
  require(channel.empty() || output.empty(), stage,
          "combining 'channel' and 'output' groups is not supported");
  cfg.common_sizes = common;
  if (!channel.empty()) {
    cfg.arch = EncoderArch::channel_common;
    cfg.channel_hidden = channel.front();
  } else if (!output.empty()) {
    cfg.arch = EncoderArch::common_output;
    cfg.output_size = output.front();
  } else {
    cfg.arch = EncoderArch::common;
  }
}

inline std::string format_encoder_layout(const EncoderConfig& cfg) {
  std::string sizes;
  for (std::size_t i = 0; i < cfg.common_sizes.size(); ++i) {
    if (i) sizes += ',';
    sizes += std::to_string(cfg.common_sizes[i]);
  }
  switch (cfg.arch) {
    case EncoderArch::common: return sizes + " common";
    case EncoderArch::channel_common:
      return std::to_string(cfg.channel_hidden) + " channel, " + sizes + " common";
    case EncoderArch::common_output:
      return sizes + " common, " + std::to_string(cfg.output_size) + " output";
  }
  fail("encoder-config", "unknown architecture tag");
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Every trainable tensor of an encoder. The same struct doubles as the
/// gradient / momentum bundle, which keeps updates and serialization walking
/// one canonical tensor order.
template <class S>
struct EncoderParamsT {
  std::vector<LstmParamsT<S>> channel_units;  // one per channel (channel_common)
  std::vector<LstmParamsT<S>> stack;          // common layers, shallow to deep
  MatT<S> output_w;                           // affine output layer (common_output)
  VecT<S> output_b;
  MatT<S> head_w;  // softmax head: class_count x feature_dimension
  VecT<S> head_b;
};

using EncoderParams = EncoderParamsT<double>;

struct EncoderModel {
  EncoderConfig config;
  EncoderParams p;
};

/// Applies fn to every tensor (weights and biases) in canonical order.
template <class P, class Fn>
void for_each_tensor(P& params, Fn&& fn) {
  for (auto& u : params.channel_units) {
    fn(u.W);
    fn(u.b);
  }
  for (auto& l : params.stack) {
    fn(l.W);
    fn(l.b);
  }
  if (params.output_w.size() != 0) {
    fn(params.output_w);
    fn(params.output_b);
  }
  fn(params.head_w);
  fn(params.head_b);
}

/// Applies fn(dst_tensor, src_tensor) pairwise over two structurally equal
/// bundles; the workhorse behind gradient accumulation and parameter updates.
template <class S, class Fn>
void for_each_tensor_pair(EncoderParamsT<S>& dst, const EncoderParamsT<S>& src, Fn&& fn) {
  for (std::size_t i = 0; i < dst.channel_units.size(); ++i) {
    fn(dst.channel_units[i].W, src.channel_units[i].W);
    fn(dst.channel_units[i].b, src.channel_units[i].b);
  }
  for (std::size_t i = 0; i < dst.stack.size(); ++i) {
    fn(dst.stack[i].W, src.stack[i].W);
    fn(dst.stack[i].b, src.stack[i].b);
  }
  if (dst.output_w.size() != 0) {
    fn(dst.output_w, src.output_w);
    fn(dst.output_b, src.output_b);
  }
  fn(dst.head_w, src.head_w);
  fn(dst.head_b, src.head_b);
}

/// A zero-filled bundle with the shapes the config dictates.
inline EncoderParams zero_params(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderParams p;
  if (cfg.arch == EncoderArch::channel_common) {
    p.channel_units.resize(cfg.channel_count);
    for (auto& u : p.channel_units) {
      u.W = Mat::Zero(4 * cfg.channel_hidden, 1 + cfg.channel_hidden);
      u.b = Vec::Zero(4 * cfg.channel_hidden);
    }
  }
  int below = cfg.stack_input_dimension();
  for (int h : cfg.common_sizes) {
    LstmParams l;
    l.W = Mat::Zero(4 * h, below + h);
    l.b = Vec::Zero(4 * h);
    p.stack.push_back(std::move(l));
    below = h;
  }
  if (cfg.arch == EncoderArch::common_output) {
    p.output_w = Mat::Zero(cfg.output_size, below);
    p.output_b = Vec::Zero(cfg.output_size);
  }
  p.head_w = Mat::Zero(cfg.class_count, cfg.feature_dimension());
  p.head_b = Vec::Zero(cfg.class_count);
  return p;
}

/// Named views over the tensors, in the canonical order shared by
/// initialization, updates, the gradient check, and the model file.
template <class P>
auto tensor_refs(P& params) {
  using Ptr = decltype(params.head_b.data());
  struct Ref {
    std::string name;
    int rank;
    Eigen::Index rows, cols;
    Ptr data;
    Eigen::Index size() const { return rows * cols; }
  };
  std::vector<Ref> refs;
  auto add = [&](std::string name, auto& tensor) {
    if constexpr (std::remove_reference_t<decltype(tensor)>::ColsAtCompileTime == 1)
      refs.push_back({std::move(name), 1, tensor.size(), 1, tensor.data()});
    else
      refs.push_back({std::move(name), 2, tensor.rows(), tensor.cols(), tensor.data()});
  };
  for (std::size_t i = 0; i < params.channel_units.size(); ++i) {
    add("channel" + std::to_string(i) + ".weight", params.channel_units[i].W);
    add("channel" + std::to_string(i) + ".bias", params.channel_units[i].b);
  }
  for (std::size_t i = 0; i < params.stack.size(); ++i) {
    add("stack" + std::to_string(i) + ".weight", params.stack[i].W);
    add("stack" + std::to_string(i) + ".bias", params.stack[i].b);
  }
  if (params.output_w.size() != 0) {
    add("output.weight", params.output_w);
    add("output.bias", params.output_b);
  }
  add("head.weight", params.head_w);
  add("head.bias", params.head_b);
  return refs;
}

template <class To>
EncoderParamsT<To> cast_params(const EncoderParams& p) {
  EncoderParamsT<To> out;
  for (const auto& u : p.channel_units)
    out.channel_units.push_back({u.W.template cast<To>(), u.b.template cast<To>()});
  for (const auto& l : p.stack)
    out.stack.push_back({l.W.template cast<To>(), l.b.template cast<To>()});
  out.output_w = p.output_w.template cast<To>();
  out.output_b = p.output_b.template cast<To>();
  out.head_w = p.head_w.template cast<To>();
  out.head_b = p.head_b.template cast<To>();
  return out;
}

/// Seeded initialization: recurrent weights uniform in [-r, r] with
/// r = 1/sqrt(hidden); affine layers use r = 1/sqrt(fan_in); biases zero
/// except the LSTM forget gates.
inline EncoderModel init_encoder(const EncoderConfig& cfg, std::uint64_t seed,
                                 double forget_bias = 1.0) {
  cfg.validate();
  EncoderModel m{cfg, zero_params(cfg)};
  Rng rng = substream(seed, {0xe2c0de});
  for (auto& u : m.p.channel_units) u = lstm_init(rng, 1, cfg.channel_hidden, forget_bias);
  int below = cfg.stack_input_dimension();
  for (std::size_t l = 0; l < m.p.stack.size(); ++l) {
    m.p.stack[l] = lstm_init(rng, below, cfg.common_sizes[l], forget_bias);
    below = cfg.common_sizes[l];
  }
  auto fill_affine = [&rng](Mat& w) {
    const double r = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    double* data = w.data();
    for (Eigen::Index k = 0; k < w.size(); ++k) data[k] = rng.uniform(-r, r);
  };
  if (cfg.arch == EncoderArch::common_output) fill_affine(m.p.output_w);
  fill_affine(m.p.head_w);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Zero-mean / unit-variance per channel over the window. Channels with
/// (numerically) zero variance pass through unscaled.
template <class S>
MatT<S> standardize_channels(const MatT<S>& x) {
  MatT<S> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().sum() / S(x.cols());
    using std::sqrt;
    S sd = sqrt(var);
    if (!(sd > S(1e-12))) sd = S(1);
    out.row(r) = (x.row(r).array() - mean) / sd;
  }
  return out;
}

/// Applies the model's input normalization policy to raw samples.
inline Mat prepare_input(const EncoderConfig& cfg, const Mat& samples) {
  return cfg.standardize ? standardize_channels(samples) : samples;
}

template <class S>
struct EncodeTraceT {
  std::vector<std::vector<LstmStepCacheT<S>>> channel_steps;  // [channel][t]
  std::vector<std::vector<LstmStepCacheT<S>>> stack_steps;    // [layer][t]
  VecT<S> last_hidden;  // deepest common layer, final timestep
  VecT<S> pre_output;   // pre-ReLU activations (common_output)
  VecT<S> feature;
};

using EncodeTrace = EncodeTraceT<double>;

/// Core forward pass over prepared (already normalized) samples.
template <class S>
VecT<S> encode_samples(const EncoderConfig& cfg, const EncoderParamsT<S>& p, const MatT<S>& x,
                       EncodeTraceT<S>* trace = nullptr) {
  require(x.rows() == cfg.channel_count, "encode", "channel count mismatch");
  const Eigen::Index steps = x.cols();
  require(steps > 0, "encode", "empty sequence");
  const std::size_t depth = p.stack.size();

  std::vector<LstmStateT<S>> stack_state(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    stack_state[l].h = VecT<S>::Zero(cfg.common_sizes[l]);
    stack_state[l].c = VecT<S>::Zero(cfg.common_sizes[l]);
  }
  std::vector<LstmStateT<S>> channel_state(p.channel_units.size());
  for (auto& st : channel_state) {
    st.h = VecT<S>::Zero(cfg.channel_hidden);
    st.c = VecT<S>::Zero(cfg.channel_hidden);
  }
  if (trace) {
    trace->channel_steps.assign(channel_state.size(), std::vector<LstmStepCacheT<S>>(steps));
    trace->stack_steps.assign(depth, std::vector<LstmStepCacheT<S>>(steps));
  }

  VecT<S> x0(cfg.stack_input_dimension());
  VecT<S> scalar_in(1);
  for (Eigen::Index t = 0; t < steps; ++t) {
    if (cfg.arch == EncoderArch::channel_common) {
      for (Eigen::Index c = 0; c < cfg.channel_count; ++c) {
        scalar_in[0] = x(c, t);
        channel_state[c] =
            lstm_step(p.channel_units[c], scalar_in, channel_state[c],
                      trace ? &trace->channel_steps[c][t] : nullptr);
        x0.segment(c * cfg.channel_hidden, cfg.channel_hidden) = channel_state[c].h;
      }
    } else {
      x0 = x.col(t);
    }
    const VecT<S>* below = &x0;
    for (std::size_t l = 0; l < depth; ++l) {
      stack_state[l] = lstm_step(p.stack[l], *below, stack_state[l],
                                 trace ? &trace->stack_steps[l][t] : nullptr);
      below = &stack_state[l].h;
    }
  }

  VecT<S> last = stack_state.back().h;
  VecT<S> feature;
  if (cfg.arch == EncoderArch::common_output) {
    VecT<S> pre = p.output_w * last + p.output_b;
    feature = pre.cwiseMax(S(0));
    if (trace) trace->pre_output = std::move(pre);
  } else {
    feature = last;
  }
  if (trace) {
    trace->last_hidden = std::move(last);
    trace->feature = feature;
  }
  return feature;
}

/// Feature vector for one sequence (normalization applied per the config).
inline Vec encode(const EncoderModel& m, const EegSequence& seq) {
  require(seq.channels() == m.config.channel_count, "encode",
          "sequence has " + std::to_string(seq.channels()) + " channels, model expects " +
              std::to_string(m.config.channel_count));
  const Mat x = prepare_input(m.config, seq.samples);
  return encode_samples<double>(m.config, m.p, x);
}

// ---------------------------------------------------------------------------
// Softmax head
// ---------------------------------------------------------------------------

template <class S>
VecT<S> softmax(const VecT<S>& logits) {
  const S shift = logits.maxCoeff();
  VecT<S> e = (logits.array() - shift).exp().matrix();
  return e / e.sum();
}

inline Vec class_logits(const EncoderModel& m, const Vec& feature) {
  require(feature.size() == m.p.head_w.cols(), "classify",
          "feature dimension does not match the classification head");
  return m.p.head_w * feature + m.p.head_b;
}

/// Class probability vector for a feature (softmax over head logits).
inline Vec classify_features(const EncoderModel& m, const Vec& feature) {
  return softmax<double>(class_logits(m, feature));
}

/// Cross-entropy -log p[label], evaluated from logits in log-sum-exp form.
template <class S>
S loss_from_logits(const VecT<S>& logits, std::uint32_t label) {
  require(label < static_cast<std::uint32_t>(logits.size()), "loss", "label out of range");
  const S shift = logits.maxCoeff();
  using std::log;
  const S lse = shift + log((logits.array() - shift).exp().sum());
  return lse - logits[label];
}

inline double loss_crossentropy(const EncoderModel& m, const Vec& feature, std::uint32_t label) {
  return loss_from_logits<double>(class_logits(m, feature), label);
}

/// Sequence loss from raw parameters. `active`, when given, receives the
/// ReLU activation pattern of the output layer (which linear piece each unit
/// is on) — the gradient check uses it to detect kink crossings.
template <class S>
S encode_loss(const EncoderConfig& cfg, const EncoderParamsT<S>& p, const MatT<S>& x,
              std::uint32_t label, std::vector<char>* active = nullptr) {
  const VecT<S> feature = encode_samples<S>(cfg, p, x);
  if (active) {
    active->resize(static_cast<std::size_t>(feature.size()));
    for (Eigen::Index i = 0; i < feature.size(); ++i)
      (*active)[static_cast<std::size_t>(i)] = feature[i] > S(0) ? 1 : 0;
  }
  const VecT<S> logits = p.head_w * feature + p.head_b;
  return loss_from_logits<S>(logits, label);
}

inline std::uint32_t predict_class(const EncoderModel& m, const EegSequence& seq) {
  const Vec logits = class_logits(m, encode(m, seq));
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < logits.size(); ++k)
    if (logits[k] > logits[best]) best = k;  // ties keep the lowest class id
  return static_cast<std::uint32_t>(best);
}

// ---------------------------------------------------------------------------
// Backpropagation through time
// ---------------------------------------------------------------------------

/// Forward + backward for one sequence. Parameter gradients are accumulated
/// (+=) into `grads`; the cross-entropy loss is returned.
inline double sample_loss_grad(const EncoderConfig& cfg, const EncoderParams& p, const Mat& x,
                               std::uint32_t label, EncoderParams& grads) {
  EncodeTrace tr;
  const Vec feature = encode_samples<double>(cfg, p, x, &tr);
  const Vec logits = p.head_w * feature + p.head_b;
  const double loss = loss_from_logits<double>(logits, label);

  Vec dlogits = softmax<double>(logits);
  dlogits[label] -= 1.0;
  grads.head_w.noalias() += dlogits * feature.transpose();
  grads.head_b += dlogits;
  Vec dfeature = p.head_w.transpose() * dlogits;

  Vec dlast;
  if (cfg.arch == EncoderArch::common_output) {
    const Vec dpre =
        (dfeature.array() * (tr.pre_output.array() > 0.0).cast<double>()).matrix();
    grads.output_w.noalias() += dpre * tr.last_hidden.transpose();
    grads.output_b += dpre;
    dlast = p.output_w.transpose() * dpre;
  } else {
    dlast = std::move(dfeature);
  }

  const Eigen::Index steps = x.cols();
  const std::size_t depth = p.stack.size();
  std::vector<Vec> dh(depth), dc(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    dh[l] = Vec::Zero(cfg.common_sizes[l]);
    dc[l] = Vec::Zero(cfg.common_sizes[l]);
  }
  dh[depth - 1] = dlast;  // loss gradient enters at the deepest layer, last step

  std::vector<Vec> dh_chan(p.channel_units.size()), dc_chan(p.channel_units.size());
  for (std::size_t c = 0; c < p.channel_units.size(); ++c) {
    dh_chan[c] = Vec::Zero(cfg.channel_hidden);
    dc_chan[c] = Vec::Zero(cfg.channel_hidden);
  }

  Vec dx, dh_prev, dc_prev, dxc;
  for (Eigen::Index t = steps - 1; t >= 0; --t) {
    // Walk the stack top-down: layer l's input gradient feeds layer l-1's
    // hidden state at this same timestep.
    for (std::size_t li = depth; li-- > 0;) {
      Vec dh_total = dh[li];
      if (li + 1 < depth) dh_total += dx;
      lstm_step_backward(p.stack[li], tr.stack_steps[li][t], dh_total, dc[li], grads.stack[li],
                         dx, dh_prev, dc_prev);
      dh[li] = dh_prev;
      dc[li] = dc_prev;
    }
    if (cfg.arch == EncoderArch::channel_common) {
      for (std::size_t c = 0; c < p.channel_units.size(); ++c) {
        Vec dh_total =
            dh_chan[c] + dx.segment(static_cast<Eigen::Index>(c) * cfg.channel_hidden,
                                    cfg.channel_hidden);
        lstm_step_backward(p.channel_units[c], tr.channel_steps[c][t], dh_total, dc_chan[c],
                           grads.channel_units[c], dxc, dh_prev, dc_prev);
        dh_chan[c] = dh_prev;
        dc_chan[c] = dc_prev;
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckDetail {
  double max_rel_error = 0.0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::string tensor;
  Eigen::Index index = 0;
};

/// Compares the analytic gradient of the sequence loss against central finite
/// differences over every parameter; returns the maximum relative error
/// |a - n| / max(|a|, |n|, 1e-8). The difference quotients are evaluated in
/// extended precision. Gradients at or below the 1e-8 floor are effectively
/// compared absolutely: double-precision backprop carries rounding noise of
/// roughly that order on vanishing-gradient paths, so relative agreement is
/// not meaningful there, while a genuinely wrong value at that scale still
/// exceeds the floor-relative bound by orders of magnitude.
inline double grad_check(const EncoderModel& m, const EegSequence& seq, std::uint32_t label,
                         double epsilon, GradCheckDetail* detail = nullptr) {
  require(epsilon >= 1e-7 && epsilon <= 1e-3, "grad-check",
          "epsilon must lie in [1e-7, 1e-3]");
  require(seq.channels() == m.config.channel_count, "grad-check", "channel count mismatch");
  require(label < static_cast<std::uint32_t>(m.config.class_count), "grad-check",
          "label out of range");

  const Mat x = prepare_input(m.config, seq.samples);
  EncoderParams grads = zero_params(m.config);
  sample_loss_grad(m.config, m.p, x, label, grads);

  EncoderParamsT<long double> probe = cast_params<long double>(m.p);
  const MatT<long double> xl = x.cast<long double>();
  auto grad_refs = tensor_refs(grads);
  auto probe_refs = tensor_refs(probe);
  const long double eps = epsilon;

  GradCheckDetail worst;
  std::vector<char> piece_up, piece_down;
  for (std::size_t ti = 0; ti < probe_refs.size(); ++ti) {
    for (Eigen::Index k = 0; k < probe_refs[ti].size(); ++k) {
      long double* coeff = probe_refs[ti].data + k;
      const long double original = *coeff;
      long double step = eps;
      long double up = 0, down = 0;
      // If the two probes land on different linear pieces of the output
      // ReLU, the quotient spans a kink and estimates neither one-sided
      // derivative; shrink the step until both probes share a piece.
      for (int attempt = 0;; ++attempt) {
        *coeff = original + step;
        up = encode_loss<long double>(m.config, probe, xl, label, &piece_up);
        *coeff = original - step;
        down = encode_loss<long double>(m.config, probe, xl, label, &piece_down);
        if (piece_up == piece_down || attempt >= 12) break;
        step /= 2;
      }
      *coeff = original;
      const double numeric = static_cast<double>((up - down) / (2 * step));
      const double analytic = grad_refs[ti].data[k];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > worst.max_rel_error)
        worst = {rel, analytic, numeric, grad_refs[ti].name, k};
    }
  }
  if (detail) *detail = worst;
  return worst.max_rel_error;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainHyper {
  double learning_rate = 0.03;
  double momentum = 0.9;
  int batch_size = 16;
  int epochs = 100;
  double clip_norm = 0.0;  // L2 gradient clipping threshold; 0 disables
  double forget_bias = 1.0;
  int threads = 1;

  void validate() const {
    const std::string stage = "train";
    require(learning_rate > 0.0, stage, "learning rate must be positive");
    require(momentum >= 0.0 && momentum < 1.0, stage, "momentum must lie in [0, 1)");
    require(batch_size >= 1, stage, "batch size must be >= 1");
    require(epochs >= 1, stage, "epoch count must be >= 1");
    require(clip_norm >= 0.0, stage, "clip norm must be >= 0");
  }
};

struct EpochRecord {
  int epoch;  // 1-based
  double train_loss;
  double val_acc;
  double test_acc;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_index = 0;  // epoch with maximum validation accuracy

  const EpochRecord& best() const {
    require(best_index < epochs.size(), "train", "best epoch index out of range");
    return epochs[best_index];
  }

  std::string to_text() const {
    std::string out = "epoch, train_loss, val_acc, test_acc\n";
    for (const auto& e : epochs)
      out += std::to_string(e.epoch) + ", " + format_fixed(e.train_loss, 6) + ", " +
             format_fixed(e.val_acc, 6) + ", " + format_fixed(e.test_acc, 6) + "\n";
    return out;
  }
};

struct TrainResult {
  EncoderModel model;
  TrainHistory history;
};

/// Fraction of sequences whose argmax class matches the label.
inline double split_accuracy(const EncoderModel& m,
                             const std::vector<const EegSequence*>& seqs, int threads = 1) {
  if (seqs.empty()) return 0.0;
  std::vector<unsigned char> hit(seqs.size(), 0);
  parallel_chunks(seqs.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      hit[i] = predict_class(m, *seqs[i]) == seqs[i]->class_id ? 1 : 0;
  });
  std::size_t correct = 0;
  for (unsigned char h : hit) correct += h;
  return static_cast<double>(correct) / static_cast<double>(seqs.size());
}

/// Minibatch gradient descent with momentum over the training split, BPTT over
/// the full window. Per-epoch validation/test accuracy is recorded and the
/// parameter snapshot at the epoch of maximum validation accuracy is returned.
/// Identical (dataset, split, config, hyper, seed) inputs reproduce identical
/// results at any thread count: per-sample gradients are reduced in sample
/// order.
inline TrainResult train_encoder(const Dataset& ds, const SplitAssignment& split,
                                 const EncoderConfig& cfg, const TrainHyper& hyper,
                                 std::uint64_t seed) {
  const std::string stage = "train";
  cfg.validate();
  hyper.validate();

  const auto train = sequences_in_split(ds, split, Split::train);
  const auto val = sequences_in_split(ds, split, Split::val);
  const auto test = sequences_in_split(ds, split, Split::test);
  require(!train.empty(), stage, "training split is empty");
  require(!val.empty(), stage, "validation split is empty");
  require(!test.empty(), stage, "test split is empty");

  const Eigen::Index window = train.front()->samples.cols();
  for (const auto& seq : ds.sequences) {
    require(seq.channels() == cfg.channel_count, stage, "sequence channel count mismatch");
    require(seq.length() == window, stage, "sequences must share one windowed length");
    require(seq.class_id < static_cast<std::uint32_t>(cfg.class_count), stage,
            "class id out of range for the configured head");
  }

  EncoderModel model = init_encoder(cfg, seed, hyper.forget_bias);
  EncoderParams velocity = zero_params(cfg);
  EncoderParams batch_grad = zero_params(cfg);
  std::vector<EncoderParams> sample_grads(hyper.batch_size, zero_params(cfg));
  std::vector<double> sample_loss(hyper.batch_size, 0.0);

  TrainHistory history;
  EncoderParams best = model.p;
  double best_va = -1.0;

  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    Rng shuffler = substream(seed, {0xba7c4, static_cast<std::uint64_t>(epoch)});
    shuffler.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += hyper.batch_size) {
      const std::size_t bs = std::min<std::size_t>(hyper.batch_size, n - start);
      parallel_chunks(bs, hyper.threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) {
          const EegSequence& seq = *train[order[start + k]];
          for_each_tensor(sample_grads[k], [](auto& t) { t.setZero(); });
          const Mat x = prepare_input(cfg, seq.samples);
          sample_loss[k] = sample_loss_grad(cfg, model.p, x, seq.class_id, sample_grads[k]);
        }
      });
      for_each_tensor(batch_grad, [](auto& t) { t.setZero(); });
      for (std::size_t k = 0; k < bs; ++k) {
        require(std::isfinite(sample_loss[k]), stage,
                "training diverged (non-finite loss) at epoch " + std::to_string(epoch));
        loss_sum += sample_loss[k];
        for_each_tensor_pair(batch_grad, sample_grads[k],
                             [](auto& a, const auto& b) { a += b; });
      }
      const double inv = 1.0 / static_cast<double>(bs);
      for_each_tensor(batch_grad, [inv](auto& t) { t *= inv; });
      if (hyper.clip_norm > 0.0) {
        double sq = 0.0;
        for_each_tensor(batch_grad, [&sq](const auto& t) { sq += t.squaredNorm(); });
        const double norm = std::sqrt(sq);
        if (norm > hyper.clip_norm) {
          const double scale = hyper.clip_norm / norm;
          for_each_tensor(batch_grad, [scale](auto& t) { t *= scale; });
        }
      }
      const double lr = hyper.learning_rate;
      const double mu = hyper.momentum;
      for_each_tensor_pair(velocity, batch_grad,
                           [lr, mu](auto& v, const auto& g) { v = mu * v - lr * g; });
      for_each_tensor_pair(model.p, velocity, [](auto& p, const auto& v) { p += v; });
    }

    const double train_loss = loss_sum / static_cast<double>(n);
    const double val_acc = split_accuracy(model, val, hyper.threads);
    const double test_acc = split_accuracy(model, test, hyper.threads);
    history.epochs.push_back({epoch, train_loss, val_acc, test_acc});
    if (val_acc > best_va) {
      best_va = val_acc;
      best = model.p;
      history.best_index = history.epochs.size() - 1;
    }
  }

  model.p = std::move(best);
  return {std::move(model), std::move(history)};
}

// ---------------------------------------------------------------------------
// Serialization ("BFENC1")
// ---------------------------------------------------------------------------
// Layout: magic, u32 version, u32 architecture tag, u32 channel_count,
// u32 class_count, u32 standardize flag, u32 common layer count + sizes,
// u32 channel_hidden, u32 output_size, u32 tensor count, named f64 tensors
// (column-major). Tensor names and order match tensor_refs().

inline void save_encoder(const std::filesystem::path& path, const EncoderModel& m) {
  const std::string stage = "save-encoder";
  auto out = io::open_output(path, stage);
  io::write_magic(out, "BFENC1");
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(m.config.arch));
  io::write_u32(out, static_cast<std::uint32_t>(m.config.channel_count));
  io::write_u32(out, static_cast<std::uint32_t>(m.config.class_count));
  io::write_u32(out, m.config.standardize ? 1 : 0);
  io::write_u32(out, static_cast<std::uint32_t>(m.config.common_sizes.size()));
  for (int s : m.config.common_sizes) io::write_u32(out, static_cast<std::uint32_t>(s));
  io::write_u32(out, m.config.arch == EncoderArch::channel_common
                         ? static_cast<std::uint32_t>(m.config.channel_hidden)
                         : 0);
  io::write_u32(out, m.config.arch == EncoderArch::common_output
                         ? static_cast<std::uint32_t>(m.config.output_size)
                         : 0);
  auto refs = tensor_refs(m.p);
  io::write_u32(out, static_cast<std::uint32_t>(refs.size()));
  for (const auto& ref : refs) {
    std::vector<std::uint32_t> dims;
    dims.push_back(static_cast<std::uint32_t>(ref.rows));
    if (ref.rank == 2) dims.push_back(static_cast<std::uint32_t>(ref.cols));
    io::write_tensor(out, ref.name, dims, ref.data);
  }
  require(out.good(), stage, "write failed for " + path.string());
}

inline EncoderModel load_encoder(const std::filesystem::path& path) {
  const std::string stage = "load-encoder";
  auto in = io::open_input(path, stage);
  io::expect_magic(in, "BFENC1", stage);
  const std::uint32_t version = io::read_u32(in, stage);
  require(version == 1, stage, "unsupported model format version");

  EncoderConfig cfg;
  const std::uint32_t arch = io::read_u32(in, stage);
  require(arch <= 2, stage, "unknown architecture tag");
  cfg.arch = static_cast<EncoderArch>(arch);
  cfg.channel_count = static_cast<int>(io::read_u32(in, stage));
  cfg.class_count = static_cast<int>(io::read_u32(in, stage));
  cfg.standardize = io::read_u32(in, stage) != 0;
  const std::uint32_t depth = io::read_u32(in, stage);
  require(depth >= 1 && depth <= 64, stage, "implausible common layer count");
  cfg.common_sizes.clear();
  for (std::uint32_t l = 0; l < depth; ++l)
    cfg.common_sizes.push_back(static_cast<int>(io::read_u32(in, stage)));
  const std::uint32_t channel_hidden = io::read_u32(in, stage);
  const std::uint32_t output_size = io::read_u32(in, stage);
  if (cfg.arch == EncoderArch::channel_common)
    cfg.channel_hidden = static_cast<int>(channel_hidden);
  if (cfg.arch == EncoderArch::common_output) cfg.output_size = static_cast<int>(output_size);
  cfg.validate();

  EncoderModel m{cfg, zero_params(cfg)};
  auto refs = tensor_refs(m.p);
  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < refs.size(); ++i) by_name[refs[i].name] = i;
  std::vector<bool> filled(refs.size(), false);

  const std::uint32_t count = io::read_u32(in, stage);
  require(count == refs.size(), stage, "tensor count does not match the architecture");
  for (std::uint32_t i = 0; i < count; ++i) {
    io::NamedTensor t = io::read_tensor(in, stage);
    const auto it = by_name.find(t.name);
    require(it != by_name.end(), stage, "unexpected tensor '" + t.name + "'");
    auto& ref = refs[it->second];
    require(!filled[it->second], stage, "duplicate tensor '" + t.name + "'");
    const bool shape_ok =
        (ref.rank == 1 && t.dims.size() == 1 && t.dims[0] == ref.rows) ||
        (ref.rank == 2 && t.dims.size() == 2 && t.dims[0] == ref.rows && t.dims[1] == ref.cols);
    require(shape_ok, stage, "tensor '" + t.name + "' has the wrong shape");
    std::copy(t.values.begin(), t.values.end(), ref.data);
    filled[it->second] = true;
  }
  for (std::size_t i = 0; i < refs.size(); ++i)
    require(filled[i], stage, "missing tensor '" + refs[i].name + "'");
  return m;
}

}  // namespace brainfold
