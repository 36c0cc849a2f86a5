#pragma once

#include <string>
#include <vector>

#include "skurg/param_store.hpp"
#include "skurg/tensor.hpp"

namespace skurg {

template <class Real>
struct LinearT {
  TensorT<Real> w;  // [in, out]
  TensorT<Real> b;  // [1, out]

  TensorT<Real> operator()(const TensorT<Real>& x) const { return add_rowvec(matmul(x, w), b); }
};

template <class Real>
LinearT<Real> make_linear(ParamStoreT<Real>& params, const std::string& name, int in, int out,
                          NormalSampler& rng) {
  // Xavier-style scale for the weight, zero bias.
  const Real stddev = Real(std::sqrt(2.0 / double(in + out)));
  LinearT<Real> l;
  l.w = params.create_normal(name + ".w", {in, out}, rng, stddev);
  l.b = params.create_const(name + ".b", {1, out}, Real(0));
  return l;
}

template <class Real>
struct LayerNormT {
  TensorT<Real> gain;  // [1, d]
  TensorT<Real> bias;  // [1, d]
  Real eps = Real(1e-5);

  TensorT<Real> operator()(const TensorT<Real>& x) const {
    return add_rowvec(mul_rowvec(layer_norm_rows(x, eps), gain), bias);
  }
};

template <class Real>
LayerNormT<Real> make_layer_norm(ParamStoreT<Real>& params, const std::string& name, int d,
                                 Real eps) {
  LayerNormT<Real> ln;
  ln.gain = params.create_const(name + ".gain", {1, d}, Real(1));
  ln.bias = params.create_const(name + ".bias", {1, d}, Real(0));
  ln.eps = eps;
  return ln;
}

// Attention output plus the per-head pre-normalization (pre-softmax, scaled)
// score matrices, which the decoder aggregates for retrieval supervision, and
// the post-softmax weights, which carry the exact-zero masking guarantee.
template <class Real>
struct AttentionOut {
  TensorT<Real> output;                    // [Tq, d]
  std::vector<TensorT<Real>> head_scores;  // per head, [Tq, Tk]
  std::vector<TensorT<Real>> head_probs;   // per head, [Tq, Tk], rows sum to 1
};

template <class Real>
struct MultiHeadAttentionT {
  LinearT<Real> wq, wk, wv, wo;
  int heads = 1;

  // kv_proj lets callers precompute key/value projections of a fixed memory.
  struct ProjectedKV {
    std::vector<TensorT<Real>> k;  // per head, [Tk, dh]
    std::vector<TensorT<Real>> v;
  };

  ProjectedKV project_kv(const TensorT<Real>& kv_in) const {
    const int d = wk.w.cols();
    const int dh = d / heads;
    ProjectedKV out;
    TensorT<Real> k = wk(kv_in);
    TensorT<Real> v = wv(kv_in);
    out.k.reserve(std::size_t(heads));
    out.v.reserve(std::size_t(heads));
    for (int h = 0; h < heads; ++h) {
      out.k.push_back(slice_cols(k, h * dh, (h + 1) * dh));
      out.v.push_back(slice_cols(v, h * dh, (h + 1) * dh));
    }
    return out;
  }

  AttentionOut<Real> attend(const TensorT<Real>& q_in, const ProjectedKV& kv,
                            const Mask* mask) const {
    const int d = wq.w.cols();
    const int dh = d / heads;
    const Real inv_sqrt = Real(1) / Real(std::sqrt(double(dh)));
    TensorT<Real> q = wq(q_in);
    std::vector<TensorT<Real>> ctx;
    ctx.reserve(std::size_t(heads));
    AttentionOut<Real> out;
    out.head_scores.reserve(std::size_t(heads));
    for (int h = 0; h < heads; ++h) {
      TensorT<Real> qh = slice_cols(q, h * dh, (h + 1) * dh);
      TensorT<Real> scores = scale(matmul(qh, transpose(kv.k[std::size_t(h)])), inv_sqrt);
      TensorT<Real> probs = mask ? masked_softmax_rows(scores, *mask) : softmax_rows(scores);
      ctx.push_back(matmul(probs, kv.v[std::size_t(h)]));
      out.head_scores.push_back(std::move(scores));
      out.head_probs.push_back(std::move(probs));
    }
    out.output = wo(concat_cols(ctx));
    return out;
  }

  AttentionOut<Real> operator()(const TensorT<Real>& q_in, const TensorT<Real>& kv_in,
                                const Mask* mask) const {
    return attend(q_in, project_kv(kv_in), mask);
  }
};

template <class Real>
MultiHeadAttentionT<Real> make_attention(ParamStoreT<Real>& params, const std::string& name, int d,
                                         int heads, NormalSampler& rng) {
  if (heads < 1 || d % heads != 0)
    throw ShapeError("attention: head count " + std::to_string(heads) +
                     " must divide model dim " + std::to_string(d));
  MultiHeadAttentionT<Real> a;
  a.heads = heads;
  a.wq = make_linear(params, name + ".wq", d, d, rng);
  a.wk = make_linear(params, name + ".wk", d, d, rng);
  a.wv = make_linear(params, name + ".wv", d, d, rng);
  a.wo = make_linear(params, name + ".wo", d, d, rng);
  return a;
}

template <class Real>
struct FeedForwardT {
  LinearT<Real> up, down;

  TensorT<Real> operator()(const TensorT<Real>& x) const { return down(gelu(up(x))); }
};

template <class Real>
FeedForwardT<Real> make_feed_forward(ParamStoreT<Real>& params, const std::string& name, int d,
                                     int hidden, NormalSampler& rng) {
  FeedForwardT<Real> f;
  f.up = make_linear(params, name + ".up", d, hidden, rng);
  f.down = make_linear(params, name + ".down", hidden, d, rng);
  return f;
}

// Pre-norm bidirectional encoder layer.
template <class Real>
struct EncoderLayerT {
  LayerNormT<Real> ln_attn, ln_ffn;
  MultiHeadAttentionT<Real> attn;
  FeedForwardT<Real> ffn;

  TensorT<Real> operator()(const TensorT<Real>& x) const {
    TensorT<Real> a = ln_attn(x);
    TensorT<Real> y = add(x, attn(a, a, nullptr).output);
    return add(y, ffn(ln_ffn(y)));
  }
};

template <class Real>
EncoderLayerT<Real> make_encoder_layer(ParamStoreT<Real>& params, const std::string& name, int d,
                                       int heads, int hidden, Real eps, NormalSampler& rng) {
  EncoderLayerT<Real> l;
  l.ln_attn = make_layer_norm(params, name + ".ln_attn", d, eps);
  l.ln_ffn = make_layer_norm(params, name + ".ln_ffn", d, eps);
  l.attn = make_attention(params, name + ".attn", d, heads, rng);
  l.ffn = make_feed_forward(params, name + ".ffn", d, hidden, rng);
  return l;
}

template <class Real>
struct EncoderStackT {
  std::vector<EncoderLayerT<Real>> layers;
  LayerNormT<Real> ln_final;

  TensorT<Real> operator()(TensorT<Real> x) const {
    for (const auto& l : layers) x = l(x);
    return ln_final(x);
  }

  // Layers [begin, end) without the final norm; used by the split KG encoder.
  TensorT<Real> run_layers(TensorT<Real> x, std::size_t begin, std::size_t end) const {
    for (std::size_t i = begin; i < end; ++i) x = layers[i](x);
    return x;
  }
};

template <class Real>
EncoderStackT<Real> make_encoder_stack(ParamStoreT<Real>& params, const std::string& name, int d,
                                       int heads, int hidden, int n_layers, Real eps,
                                       NormalSampler& rng) {
  EncoderStackT<Real> s;
  for (int i = 0; i < n_layers; ++i)
    s.layers.push_back(
        make_encoder_layer(params, name + ".layer" + std::to_string(i), d, heads, hidden, eps, rng));
  s.ln_final = make_layer_norm(params, name + ".ln_final", d, eps);
  return s;
}

// Pre-norm decoder layer: causal self-attention, cross-attention over an
// external memory, feed-forward.
template <class Real>
struct DecoderLayerT {
  LayerNormT<Real> ln_self, ln_cross, ln_ffn;
  MultiHeadAttentionT<Real> self_attn, cross_attn;
  FeedForwardT<Real> ffn;
};

template <class Real>
DecoderLayerT<Real> make_decoder_layer(ParamStoreT<Real>& params, const std::string& name, int d,
                                       int heads, int hidden, Real eps, NormalSampler& rng) {
  DecoderLayerT<Real> l;
  l.ln_self = make_layer_norm(params, name + ".ln_self", d, eps);
  l.ln_cross = make_layer_norm(params, name + ".ln_cross", d, eps);
  l.ln_ffn = make_layer_norm(params, name + ".ln_ffn", d, eps);
  l.self_attn = make_attention(params, name + ".self", d, heads, rng);
  l.cross_attn = make_attention(params, name + ".cross", d, heads, rng);
  l.ffn = make_feed_forward(params, name + ".ffn", d, hidden, rng);
  return l;
}

template <class Real>
struct DecoderStackT {
  std::vector<DecoderLayerT<Real>> layers;
  LayerNormT<Real> ln_final;
};

template <class Real>
DecoderStackT<Real> make_decoder_stack(ParamStoreT<Real>& params, const std::string& name, int d,
                                       int heads, int hidden, int n_layers, Real eps,
                                       NormalSampler& rng) {
  DecoderStackT<Real> s;
  for (int i = 0; i < n_layers; ++i)
    s.layers.push_back(
        make_decoder_layer(params, name + ".layer" + std::to_string(i), d, heads, hidden, eps, rng));
  s.ln_final = make_layer_norm(params, name + ".ln_final", d, eps);
  return s;
}

// Head-averaged score matrix from a single attention call.
template <class Real>
TensorT<Real> mean_head_scores(const AttentionOut<Real>& attn) {
  TensorT<Real> acc = attn.head_scores[0];
  for (std::size_t h = 1; h < attn.head_scores.size(); ++h) acc = add(acc, attn.head_scores[h]);
  return scale(acc, Real(1) / Real(attn.head_scores.size()));
}

}  // namespace skurg
