#pragma once

#include "brainfold/common.hpp"
#include "brainfold/rng.hpp"

#include <cmath>

namespace brainfold {

/// One LSTM cell. The four gates (input, forget, cell-candidate, output) each
/// act on the concatenated vector [x, h_prev], so all gate weights live in a
/// single matrix whose rows are blocked per gate:
///
///   z = W * [x; h_prev] + b          (z has 4H rows: i | f | g | o)
///   i = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
///   c' = f (*) c + i (*) g
///   h' = o (*) tanh(c')
template <class S>
struct LstmParamsT {
  MatT<S> W;  // 4H x (D + H), gate row blocks in order i, f, g, o
  VecT<S> b;  // 4H

  Eigen::Index hidden_size() const { return b.size() / 4; }
  Eigen::Index input_size() const { return W.cols() - hidden_size(); }
};

using LstmParams = LstmParamsT<double>;

template <class S>
struct LstmStateT {
  VecT<S> h;
  VecT<S> c;
};

using LstmState = LstmStateT<double>;

/// Everything the backward pass needs from one forward step.
template <class S>
struct LstmStepCacheT {
  VecT<S> xh;      // concatenated [x; h_prev]
  VecT<S> c_prev;
  VecT<S> i, f, g, o;
  VecT<S> c;       // post-step cell
  VecT<S> tanh_c;
};

using LstmStepCache = LstmStepCacheT<double>;

namespace detail {

// Overflow-safe logistic sigmoid; exp() only ever sees non-positive args.
template <class S>
S sigmoid(S z) {
  using std::exp;
  if (z >= S(0)) return S(1) / (S(1) + exp(-z));
  const S e = exp(z);
  return e / (S(1) + e);
}

}  // namespace detail

/// Parameters drawn uniformly from [-r, r] with r = 1/sqrt(hidden). Biases
/// start at zero except the forget gate, which gets `forget_bias` so early
/// steps retain cell state instead of washing it out.
inline LstmParams lstm_init(Rng& rng, Eigen::Index input, Eigen::Index hidden,
                            double forget_bias = 1.0) {
  LstmParams p;
  p.W.resize(4 * hidden, input + hidden);
  p.b = Vec::Zero(4 * hidden);
  const double r = 1.0 / std::sqrt(static_cast<double>(hidden));
  double* w = p.W.data();
  for (Eigen::Index k = 0; k < p.W.size(); ++k) w[k] = rng.uniform(-r, r);
  p.b.segment(hidden, hidden).setConstant(forget_bias);
  return p;
}

/// One recurrence step. Fills `cache` (when given) for backpropagation.
template <class S>
LstmStateT<S> lstm_step(const LstmParamsT<S>& p, const VecT<S>& x, const LstmStateT<S>& state,
                        LstmStepCacheT<S>* cache = nullptr) {
  const Eigen::Index H = p.hidden_size();
  VecT<S> xh(x.size() + H);
  xh << x, state.h;
  VecT<S> z = p.W * xh + p.b;

  VecT<S> i(H), f(H), g(H), o(H);
  for (Eigen::Index k = 0; k < H; ++k) {
    using std::tanh;
    i[k] = detail::sigmoid(z[k]);
    f[k] = detail::sigmoid(z[H + k]);
    g[k] = tanh(z[2 * H + k]);
    o[k] = detail::sigmoid(z[3 * H + k]);
  }

  LstmStateT<S> out;
  out.c = f.cwiseProduct(state.c) + i.cwiseProduct(g);
  VecT<S> tanh_c = out.c.array().tanh().matrix();
  out.h = o.cwiseProduct(tanh_c);

  if (cache) {
    cache->xh = std::move(xh);
    cache->c_prev = state.c;
    cache->i = std::move(i);
    cache->f = std::move(f);
    cache->g = std::move(g);
    cache->o = std::move(o);
    cache->c = out.c;
    cache->tanh_c = std::move(tanh_c);
  }
  return out;
}

/// Reverse-mode step. `dh` and `dc_in` are the loss gradients flowing into
/// this step's outputs (h', c'). Parameter gradients accumulate into `grad`
/// (a parameter-shaped bundle); the returned gradients continue the chains
/// into the input and the previous state.
inline void lstm_step_backward(const LstmParams& p, const LstmStepCache& cache, const Vec& dh,
                               const Vec& dc_in, LstmParams& grad, Vec& dx, Vec& dh_prev,
                               Vec& dc_prev) {
  const Eigen::Index H = p.hidden_size();
  const Eigen::Index D = p.input_size();

  const Vec dout = dh.cwiseProduct(cache.tanh_c);
  const Vec dct =
      (dh.array() * cache.o.array() * (1.0 - cache.tanh_c.array().square())).matrix() + dc_in;

  Vec dz(4 * H);
  dz.segment(0, H) = (dct.array() * cache.g.array() * cache.i.array() *
                      (1.0 - cache.i.array()))
                         .matrix();
  dz.segment(H, H) = (dct.array() * cache.c_prev.array() * cache.f.array() *
                      (1.0 - cache.f.array()))
                         .matrix();
  dz.segment(2 * H, H) =
      (dct.array() * cache.i.array() * (1.0 - cache.g.array().square())).matrix();
  dz.segment(3 * H, H) =
      (dout.array() * cache.o.array() * (1.0 - cache.o.array())).matrix();

  grad.W.noalias() += dz * cache.xh.transpose();
  grad.b += dz;

  const Vec dxh = p.W.transpose() * dz;
  dx = dxh.head(D);
  dh_prev = dxh.tail(H);
  dc_prev = dct.cwiseProduct(cache.f);
}

}  // namespace brainfold
