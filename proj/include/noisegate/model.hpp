#pragma once

// Transformer encoder-decoder over word-feature sequences, with analytic
// gradients, plain SGD training and dev-loss model selection.
//
// Encoder: features -> linear embedding + sinusoidal position -> pre-LN
// blocks (self-attention, GELU feed-forward) -> final layer norm.
// Decoder: token embedding + position -> pre-LN blocks (causal self-attention,
// cross-attention over encoder output, feed-forward) -> final layer norm ->
// output projection. Dropout is not used anywhere.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisegate/corpus.hpp"
#include "noisegate/error.hpp"
#include "noisegate/matrix.hpp"
#include "noisegate/tokenizer.hpp"

namespace noisegate {

struct ModelConfig {
  std::size_t feature_dim = kDefaultFeatureDim;
  std::size_t d_model = 64;
  std::size_t n_layers_enc = 2;
  std::size_t n_heads = 4;
  std::size_t n_layers_dec = 2;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;

  std::size_t head_dim() const noexcept { return d_model / n_heads; }

  void validate() const {
    if (feature_dim == 0 || d_model == 0 || n_layers_enc == 0 || n_heads == 0 ||
        n_layers_dec == 0 || d_ff == 0 || vocab_size == 0 || max_len == 0)
      throw ConfigError("model dimensions must all be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    if (vocab_size <= static_cast<std::size_t>(kUnk))
      throw ConfigError("vocab_size must include the four special tokens");
  }

  // Small from-scratch model used for controls and tests.
  static ModelConfig desk(std::size_t feature_dim, std::size_t vocab_size) {
    ModelConfig c;
    c.feature_dim = feature_dim;
    c.vocab_size = vocab_size;
    return c;
  }

  // Encoder shape of the reference architecture: six layers, eight heads.
  static ModelConfig reference(std::size_t vocab_size) {
    ModelConfig c;
    c.feature_dim = kDefaultFeatureDim;
    c.d_model = 512;
    c.n_layers_enc = 6;
    c.n_heads = 8;
    c.n_layers_dec = 6;
    c.d_ff = 2048;
    c.vocab_size = vocab_size;
    c.max_len = 64;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"feature_dim", c.feature_dim}, {"d_model", c.d_model},
          {"n_layers_enc", c.n_layers_enc}, {"n_heads", c.n_heads},
          {"n_layers_dec", c.n_layers_dec}, {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},     {"max_len", c.max_len}};
}

using TensorMap = std::map<std::string, Matrix>;
using Gradients = TensorMap;

// Named weight tensors. "pos" is the fixed sinusoidal table: it has a gradient
// like every other tensor but sgd_step never changes it.
struct Params {
  ModelConfig config;
  TensorMap tensors;

  const Matrix& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("no parameter tensor named '" + name + "'");
    return it->second;
  }
  Matrix& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("no parameter tensor named '" + name + "'");
    return it->second;
  }

  friend bool operator==(const Params&, const Params&) = default;
};

inline constexpr std::string_view kPositionTable = "pos";
inline constexpr double kLayerNormEps = 1e-5;

inline bool is_frozen(const std::string& name) { return name == kPositionTable; }

namespace detail {

inline std::string layer_name(std::string_view side, std::size_t l, std::string_view rest) {
  return std::string(side) + "." + std::to_string(l) + "." + std::string(rest);
}

inline Gradients zeros_like(const TensorMap& t) {
  Gradients g;
  for (const auto& [name, m] : t) g.emplace(name, Matrix(m.rows(), m.cols()));
  return g;
}

inline Matrix sinusoidal_table(std::size_t max_len, std::size_t d) {
  Matrix pos(max_len, d);
  for (std::size_t t = 0; t < max_len; ++t)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pos(t, i) = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < d) pos(t, i + 1) = std::cos(static_cast<double>(t) * freq);
    }
  return pos;
}

}  // namespace detail

// Xavier-uniform weights, zero biases, unit layer-norm scales, zero offsets.
inline Params init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model, ff = config.d_ff;
  Params p;
  p.config = config;
  auto& t = p.tensors;

  auto add_ln = [&](const std::string& prefix) {
    t.emplace(prefix + ".g", Matrix(1, d, 1.0));
    t.emplace(prefix + ".b", Matrix(1, d));
  };
  auto add_attn = [&](const std::string& prefix) {
    for (const char* w : {".Wq", ".Wk", ".Wv", ".Wo"}) t.emplace(prefix + w, Matrix(d, d));
  };
  auto add_ff = [&](const std::string& prefix) {
    t.emplace(prefix + ".W1", Matrix(d, ff));
    t.emplace(prefix + ".b1", Matrix(1, ff));
    t.emplace(prefix + ".W2", Matrix(ff, d));
    t.emplace(prefix + ".b2", Matrix(1, d));
  };

  t.emplace("enc.in.W", Matrix(config.feature_dim, d));
  t.emplace("enc.in.b", Matrix(1, d));
  for (std::size_t l = 0; l < config.n_layers_enc; ++l) {
    add_ln(detail::layer_name("enc", l, "ln1"));
    add_attn(detail::layer_name("enc", l, "attn"));
    add_ln(detail::layer_name("enc", l, "ln2"));
    add_ff(detail::layer_name("enc", l, "ff"));
  }
  add_ln("enc.ln");
  t.emplace("dec.emb", Matrix(config.vocab_size, d));
  for (std::size_t l = 0; l < config.n_layers_dec; ++l) {
    add_ln(detail::layer_name("dec", l, "ln1"));
    add_attn(detail::layer_name("dec", l, "self"));
    add_ln(detail::layer_name("dec", l, "ln2"));
    add_attn(detail::layer_name("dec", l, "cross"));
    add_ln(detail::layer_name("dec", l, "ln3"));
    add_ff(detail::layer_name("dec", l, "ff"));
  }
  add_ln("dec.ln");
  t.emplace("out.W", Matrix(d, config.vocab_size));
  t.emplace("out.b", Matrix(1, config.vocab_size));
  t.emplace(std::string(kPositionTable), detail::sinusoidal_table(config.max_len, d));

  // Weight matrices are the 2-D tensors whose name ends in W, Wq.., W1, W2 or emb.
  std::mt19937_64 rng(seed);
  for (auto& [name, m] : t) {
    const auto leaf = name.substr(name.rfind('.') + 1);
    const bool weight = leaf.front() == 'W' || leaf == "emb";
    if (!weight) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : m.data()) v = u(rng);
  }
  return p;
}

namespace detail {

// ---------------------------------------------------------------------------
// Layer kernels. Each forward optionally records what its backward needs.
// ---------------------------------------------------------------------------

struct LinearCache {
  Matrix x;
};

inline Matrix linear_forward(const Matrix& x, const Matrix& w, const Matrix* b) {
  Matrix y = matmul(x, w);
  if (b)
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += (*b)(0, j);
  return y;
}

// Accumulates dW (and db) and returns dX.
inline Matrix linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, Matrix& dw,
                              Matrix* db) {
  add_matmul_tn(dw, x, dy);
  if (db)
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) (*db)(0, j) += dy(i, j);
  return matmul_nt(dy, w);
}

struct LnCache {
  Matrix xhat;
  std::vector<double> rstd;
};

inline Matrix ln_forward(const Matrix& x, const Matrix& g, const Matrix& b, LnCache* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix y(n, d);
  if (cache) {
    cache->xhat = Matrix(n, d);
    cache->rstd.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = x.row(i);
    const double mu = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (r[j] - mu) * rstd;
      y(i, j) = g(0, j) * xh + b(0, j);
      if (cache) cache->xhat(i, j) = xh;
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

inline Matrix ln_backward(const Matrix& dy, const LnCache& c, const Matrix& g, Matrix& dg,
                          Matrix& db) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxh(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dg(0, j) += dy(i, j) * c.xhat(i, j);
      db(0, j) += dy(i, j);
      dxh[j] = dy(i, j) * g(0, j);
      mean_dxh += dxh[j];
      mean_dxh_xh += dxh[j] * c.xhat(i, j);
    }
    mean_dxh /= static_cast<double>(d);
    mean_dxh_xh /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = c.rstd[i] * (dxh[j] - mean_dxh - c.xhat(i, j) * mean_dxh_xh);
  }
  return dx;
}

// tanh-approximated GELU; smooth everywhere, which keeps finite differences honest.
inline constexpr double kGeluC = 0.044715;

inline double gelu(double x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(k * (x + kGeluC * x * x * x)));
}

inline double gelu_grad(double x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  const double t = std::tanh(k * (x + kGeluC * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * kGeluC * x * x);
}

struct FfCache {
  Matrix x, pre, act;
};

struct FfWeights {
  const Matrix &w1, &b1, &w2, &b2;
};

inline Matrix ff_forward(const Matrix& x, const FfWeights& w, FfCache* cache) {
  Matrix pre = linear_forward(x, w.w1, &w.b1);
  Matrix act = pre;
  for (double& v : act.data()) v = gelu(v);
  Matrix y = linear_forward(act, w.w2, &w.b2);
  if (cache) *cache = {x, std::move(pre), std::move(act)};
  return y;
}

struct FfGrads {
  Matrix &w1, &b1, &w2, &b2;
};

inline Matrix ff_backward(const Matrix& dy, const FfCache& c, const FfWeights& w, FfGrads g) {
  Matrix dact = linear_backward(dy, c.act, w.w2, g.w2, &g.b2);
  for (std::size_t i = 0; i < dact.size(); ++i) dact.data()[i] *= gelu_grad(c.pre.data()[i]);
  return linear_backward(dact, c.x, w.w1, g.w1, &g.b1);
}

struct AttnWeights {
  const Matrix &wq, &wk, &wv, &wo;
};

struct AttnGrads {
  Matrix &wq, &wk, &wv, &wo;
};

struct AttnCache {
  Matrix xq, xkv, q, k, v, o;
  std::vector<Matrix> probs;  // per head, rows = queries
};

inline Matrix attn_forward(const Matrix& xq, const Matrix& xkv, const AttnWeights& w,
                           std::size_t n_heads, bool causal, AttnCache* cache) {
  const std::size_t nq = xq.rows(), nk = xkv.rows(), d = w.wq.cols(), hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix q = matmul(xq, w.wq), k = matmul(xkv, w.wk), v = matmul(xkv, w.wv);
  Matrix o(nq, d);
  std::vector<Matrix> probs;
  if (cache) probs.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    Matrix p(nq, nk);
    for (std::size_t i = 0; i < nq; ++i) {
      auto row = p.row(i);
      for (std::size_t j = 0; j < nk; ++j) {
        if (causal && j > i) {
          row[j] = -INFINITY;
          continue;
        }
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += q(i, off + c) * k(j, off + c);
        row[j] = s * scale;
      }
      softmax_inplace(row);
      for (std::size_t j = 0; j < nk; ++j) {
        const double pij = row[j];
        if (pij == 0.0) continue;
        for (std::size_t c = 0; c < hd; ++c) o(i, off + c) += pij * v(j, off + c);
      }
    }
    if (cache) probs.push_back(std::move(p));
  }
  Matrix y = matmul(o, w.wo);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->probs = std::move(probs);
  }
  return y;
}

// Accumulates weight gradients; adds the input gradients into dxq and dxkv.
inline void attn_backward(const Matrix& dy, const AttnCache& c, const AttnWeights& w, AttnGrads g,
                          std::size_t n_heads, Matrix& dxq, Matrix& dxkv) {
  const std::size_t nq = c.q.rows(), nk = c.k.rows(), d = c.q.cols(), hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix d_o = linear_backward(dy, c.o, w.wo, g.wo, nullptr);
  Matrix dq(nq, d), dk(nk, d), dv(nk, d);
  std::vector<double> dp(nk);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    const Matrix& p = c.probs[h];
    for (std::size_t i = 0; i < nq; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        double s = 0.0;
        for (std::size_t cc = 0; cc < hd; ++cc) s += d_o(i, off + cc) * c.v(j, off + cc);
        dp[j] = s;
        dot += s * p(i, j);
        const double pij = p(i, j);
        if (pij != 0.0)
          for (std::size_t cc = 0; cc < hd; ++cc) dv(j, off + cc) += pij * d_o(i, off + cc);
      }
      for (std::size_t j = 0; j < nk; ++j) {
        const double ds = p(i, j) * (dp[j] - dot) * scale;
        if (ds == 0.0) continue;
        for (std::size_t cc = 0; cc < hd; ++cc) {
          dq(i, off + cc) += ds * c.k(j, off + cc);
          dk(j, off + cc) += ds * c.q(i, off + cc);
        }
      }
    }
  }
  add_inplace(dxq, linear_backward(dq, c.xq, w.wq, g.wq, nullptr));
  add_inplace(dxkv, linear_backward(dk, c.xkv, w.wk, g.wk, nullptr));
  add_inplace(dxkv, linear_backward(dv, c.xkv, w.wv, g.wv, nullptr));
}

// ---------------------------------------------------------------------------
// Whole-network forward/backward.
// ---------------------------------------------------------------------------

struct EncLayerCache {
  LnCache ln1, ln2;
  AttnCache attn;
  FfCache ff;
};

struct DecLayerCache {
  LnCache ln1, ln2, ln3;
  AttnCache self, cross;
  FfCache ff;
};

struct ForwardCache {
  Matrix features;
  TokenSeq inputs;
  std::vector<EncLayerCache> enc;
  LnCache enc_ln;
  std::vector<DecLayerCache> dec;
  LnCache dec_ln;
  Matrix dec_final;  // decoder output after the final layer norm
};

class Network {
 public:
  explicit Network(const Params& p) : p_(p), cfg_(p.config) {}

  Matrix encode(const Matrix& features, ForwardCache* cache) const {
    if (features.rows() == 0) throw DataError("empty feature sequence");
    if (features.cols() != cfg_.feature_dim)
      throw DataError("feature width " + std::to_string(features.cols()) + " does not match model (" +
                      std::to_string(cfg_.feature_dim) + ")");
    if (features.rows() > cfg_.max_len)
      throw DataError("feature sequence of length " + std::to_string(features.rows()) +
                      " exceeds max_len " + std::to_string(cfg_.max_len));
    const Matrix& pos = p_.at(std::string(kPositionTable));
    Matrix x = linear_forward(features, p_.at("enc.in.W"), &p_.at("enc.in.b"));
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t j = 0; j < x.cols(); ++j) x(t, j) += pos(t, j);
    if (cache) {
      cache->features = features;
      cache->enc.assign(cfg_.n_layers_enc, {});
    }
    for (std::size_t l = 0; l < cfg_.n_layers_enc; ++l) {
      EncLayerCache* lc = cache ? &cache->enc[l] : nullptr;
      Matrix h = ln_forward(x, at("enc", l, "ln1.g"), at("enc", l, "ln1.b"), lc ? &lc->ln1 : nullptr);
      add_inplace(x, attn_forward(h, h, attn_w("enc", l, "attn"), cfg_.n_heads, false,
                                  lc ? &lc->attn : nullptr));
      h = ln_forward(x, at("enc", l, "ln2.g"), at("enc", l, "ln2.b"), lc ? &lc->ln2 : nullptr);
      add_inplace(x, ff_forward(h, ff_w("enc", l), lc ? &lc->ff : nullptr));
    }
    return ln_forward(x, p_.at("enc.ln.g"), p_.at("enc.ln.b"), cache ? &cache->enc_ln : nullptr);
  }

  Matrix decode(const Matrix& memory, const TokenSeq& inputs, ForwardCache* cache) const {
    if (inputs.empty()) throw DataError("empty decoder prefix");
    if (inputs.size() > cfg_.max_len)
      throw DataError("decoder prefix of length " + std::to_string(inputs.size()) +
                      " exceeds max_len " + std::to_string(cfg_.max_len));
    const Matrix& pos = p_.at(std::string(kPositionTable));
    const Matrix& emb = p_.at("dec.emb");
    Matrix y(inputs.size(), cfg_.d_model);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      const auto id = inputs[t];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw DataError("token id " + std::to_string(id) + " outside model vocabulary");
      for (std::size_t j = 0; j < cfg_.d_model; ++j)
        y(t, j) = emb(static_cast<std::size_t>(id), j) + pos(t, j);
    }
    if (cache) {
      cache->inputs = inputs;
      cache->dec.assign(cfg_.n_layers_dec, {});
    }
    for (std::size_t l = 0; l < cfg_.n_layers_dec; ++l) {
      DecLayerCache* lc = cache ? &cache->dec[l] : nullptr;
      Matrix h = ln_forward(y, at("dec", l, "ln1.g"), at("dec", l, "ln1.b"), lc ? &lc->ln1 : nullptr);
      add_inplace(y, attn_forward(h, h, attn_w("dec", l, "self"), cfg_.n_heads, true,
                                  lc ? &lc->self : nullptr));
      h = ln_forward(y, at("dec", l, "ln2.g"), at("dec", l, "ln2.b"), lc ? &lc->ln2 : nullptr);
      add_inplace(y, attn_forward(h, memory, attn_w("dec", l, "cross"), cfg_.n_heads, false,
                                  lc ? &lc->cross : nullptr));
      h = ln_forward(y, at("dec", l, "ln3.g"), at("dec", l, "ln3.b"), lc ? &lc->ln3 : nullptr);
      add_inplace(y, ff_forward(h, ff_w("dec", l), lc ? &lc->ff : nullptr));
    }
    Matrix z = ln_forward(y, p_.at("dec.ln.g"), p_.at("dec.ln.b"), cache ? &cache->dec_ln : nullptr);
    Matrix logits = linear_forward(z, p_.at("out.W"), &p_.at("out.b"));
    if (cache) cache->dec_final = std::move(z);
    return logits;
  }

  // Backpropagates dlogits through a cached forward pass into `g`.
  void backward(const Matrix& dlogits, const ForwardCache& c, Gradients& g) const {
    Matrix& dpos = g.at(std::string(kPositionTable));

    Matrix dz = linear_backward(dlogits, c.dec_final, p_.at("out.W"), g.at("out.W"), &g.at("out.b"));
    Matrix dy = ln_backward(dz, c.dec_ln, p_.at("dec.ln.g"), g.at("dec.ln.g"), g.at("dec.ln.b"));
    const Matrix& memory_in = c.dec.front().cross.xkv;
    Matrix dmemory(memory_in.rows(), memory_in.cols());

    for (std::size_t li = cfg_.n_layers_dec; li-- > 0;) {
      const DecLayerCache& lc = c.dec[li];
      {
        Matrix dh = ff_backward(dy, lc.ff, ff_w("dec", li), ff_g(g, "dec", li));
        add_inplace(dy, ln_backward(dh, lc.ln3, at("dec", li, "ln3.g"), gat(g, "dec", li, "ln3.g"),
                                    gat(g, "dec", li, "ln3.b")));
      }
      {
        Matrix dh(dy.rows(), dy.cols());
        attn_backward(dy, lc.cross, attn_w("dec", li, "cross"), attn_g(g, "dec", li, "cross"),
                      cfg_.n_heads, dh, dmemory);
        add_inplace(dy, ln_backward(dh, lc.ln2, at("dec", li, "ln2.g"), gat(g, "dec", li, "ln2.g"),
                                    gat(g, "dec", li, "ln2.b")));
      }
      {
        Matrix dh(dy.rows(), dy.cols());
        attn_backward(dy, lc.self, attn_w("dec", li, "self"), attn_g(g, "dec", li, "self"),
                      cfg_.n_heads, dh, dh);
        add_inplace(dy, ln_backward(dh, lc.ln1, at("dec", li, "ln1.g"), gat(g, "dec", li, "ln1.g"),
                                    gat(g, "dec", li, "ln1.b")));
      }
    }
    Matrix& demb = g.at("dec.emb");
    for (std::size_t t = 0; t < c.inputs.size(); ++t)
      for (std::size_t j = 0; j < cfg_.d_model; ++j) {
        demb(static_cast<std::size_t>(c.inputs[t]), j) += dy(t, j);
        dpos(t, j) += dy(t, j);
      }

    Matrix dx = ln_backward(dmemory, c.enc_ln, p_.at("enc.ln.g"), g.at("enc.ln.g"), g.at("enc.ln.b"));
    for (std::size_t li = cfg_.n_layers_enc; li-- > 0;) {
      const EncLayerCache& lc = c.enc[li];
      {
        Matrix dh = ff_backward(dx, lc.ff, ff_w("enc", li), ff_g(g, "enc", li));
        add_inplace(dx, ln_backward(dh, lc.ln2, at("enc", li, "ln2.g"), gat(g, "enc", li, "ln2.g"),
                                    gat(g, "enc", li, "ln2.b")));
      }
      {
        Matrix dh(dx.rows(), dx.cols());
        attn_backward(dx, lc.attn, attn_w("enc", li, "attn"), attn_g(g, "enc", li, "attn"),
                      cfg_.n_heads, dh, dh);
        add_inplace(dx, ln_backward(dh, lc.ln1, at("enc", li, "ln1.g"), gat(g, "enc", li, "ln1.g"),
                                    gat(g, "enc", li, "ln1.b")));
      }
    }
    for (std::size_t t = 0; t < dx.rows(); ++t)
      for (std::size_t j = 0; j < cfg_.d_model; ++j) dpos(t, j) += dx(t, j);
    linear_backward(dx, c.features, p_.at("enc.in.W"), g.at("enc.in.W"), &g.at("enc.in.b"));
  }

 private:
  const Matrix& at(std::string_view side, std::size_t l, std::string_view rest) const {
    return p_.at(layer_name(side, l, rest));
  }
  static Matrix& gat(Gradients& g, std::string_view side, std::size_t l, std::string_view rest) {
    return g.at(layer_name(side, l, rest));
  }
  AttnWeights attn_w(std::string_view side, std::size_t l, std::string_view block) const {
    const std::string b(block);
    return {at(side, l, b + ".Wq"), at(side, l, b + ".Wk"), at(side, l, b + ".Wv"),
            at(side, l, b + ".Wo")};
  }
  static AttnGrads attn_g(Gradients& g, std::string_view side, std::size_t l, std::string_view block) {
    const std::string b(block);
    return {gat(g, side, l, b + ".Wq"), gat(g, side, l, b + ".Wk"), gat(g, side, l, b + ".Wv"),
            gat(g, side, l, b + ".Wo")};
  }
  FfWeights ff_w(std::string_view side, std::size_t l) const {
    return {at(side, l, "ff.W1"), at(side, l, "ff.b1"), at(side, l, "ff.W2"), at(side, l, "ff.b2")};
  }
  static FfGrads ff_g(Gradients& g, std::string_view side, std::size_t l) {
    return {gat(g, side, l, "ff.W1"), gat(g, side, l, "ff.b1"), gat(g, side, l, "ff.W2"),
            gat(g, side, l, "ff.b2")};
  }

  const Params& p_;
  const ModelConfig& cfg_;
};

}  // namespace detail

// Encoder output for a feature sequence (one row per word).
inline Matrix encode(const Params& params, const Matrix& features) {
  return detail::Network(params).encode(features, nullptr);
}

// Decoder logits given a precomputed encoder output.
inline Matrix decode_logits(const Params& params, const Matrix& memory, const TokenSeq& prefix) {
  return detail::Network(params).decode(memory, prefix, nullptr);
}

// Row t holds the pre-softmax scores for the token following prefix[0..t].
inline Matrix forward(const Params& params, const Matrix& features, const TokenSeq& target_prefix) {
  detail::Network net(params);
  return net.decode(net.encode(features, nullptr), target_prefix, nullptr);
}

// Mean token cross-entropy over the non-PAD targets.
inline double loss(const Matrix& logits, const TokenSeq& targets) {
  if (targets.size() != logits.rows())
    throw DataError("loss: " + std::to_string(targets.size()) + " targets for " +
                    std::to_string(logits.rows()) + " logit rows");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == kPad) continue;
    const auto lp = log_softmax(logits.row(t));
    total -= lp.at(static_cast<std::size_t>(targets[t]));
    ++n;
  }
  if (n == 0) throw DataError("loss: every target is PAD");
  return total / static_cast<double>(n);
}

// One training example: features plus the full BOS ... EOS token sequence.
struct Example {
  Matrix features;
  TokenSeq ids;

  TokenSeq decoder_inputs() const { return {ids.begin(), ids.end() - 1}; }
  TokenSeq targets() const { return {ids.begin() + 1, ids.end()}; }
};

inline double example_loss(const Params& params, const Example& ex) {
  if (ex.ids.size() < 2) throw DataError("example token sequence needs BOS and EOS");
  return loss(forward(params, ex.features, ex.decoder_inputs()), ex.targets());
}

// Mean of the per-example losses.
inline double mean_loss(const Params& params, std::span<const Example> batch) {
  if (batch.empty()) throw DataError("mean_loss of an empty batch");
  double s = 0.0;
  for (const auto& ex : batch) s += example_loss(params, ex);
  return s / static_cast<double>(batch.size());
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

// Loss and analytic gradient of the batch mean of per-example losses.
inline LossAndGrad loss_and_grad(const Params& params, std::span<const Example> batch) {
  if (batch.empty()) throw DataError("grad: empty batch");
  LossAndGrad out;
  out.grads = detail::zeros_like(params.tensors);
  detail::Network net(params);
  const double weight = 1.0 / static_cast<double>(batch.size());

  for (const auto& ex : batch) {
    if (ex.ids.size() < 2) throw DataError("example token sequence needs BOS and EOS");
    detail::ForwardCache cache;
    const Matrix memory = net.encode(ex.features, &cache);
    const TokenSeq targets = ex.targets();
    const Matrix logits = net.decode(memory, ex.decoder_inputs(), &cache);

    Matrix dlogits(logits.rows(), logits.cols());
    std::size_t n = 0;
    for (auto t : targets) n += t != kPad;
    if (n == 0) throw DataError("loss: every target is PAD");
    double ex_loss = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (targets[t] == kPad) continue;
      auto row = dlogits.row(t);
      const auto lp = log_softmax(logits.row(t));
      const auto tgt = static_cast<std::size_t>(targets[t]);
      ex_loss -= lp[tgt];
      for (std::size_t v = 0; v < row.size(); ++v) row[v] = std::exp(lp[v]);
      row[tgt] -= 1.0;
      for (double& v : row) v *= weight / static_cast<double>(n);
    }
    out.loss += weight * ex_loss / static_cast<double>(n);
    net.backward(dlogits, cache, out.grads);
  }
  for (const auto& [name, m] : out.grads)
    if (!m.all_finite()) throw NumericError("non-finite gradient in tensor '" + name + "'");
  return out;
}

inline Gradients grad(const Params& params, std::span<const Example> batch) {
  return loss_and_grad(params, batch).grads;
}

// theta <- theta - lr * g for every trainable tensor.
inline Params sgd_step(const Params& params, const Gradients& grads, double lr) {
  Params out = params;
  for (auto& [name, m] : out.tensors) {
    if (is_frozen(name)) continue;
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("missing gradient for tensor '" + name + "'");
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw Error("gradient shape mismatch for tensor '" + name + "'");
    auto& d = m.data();
    const auto& gd = it->second.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * gd[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 4;
  // Plain SGD on a randomly initialized model; the reference setting of 2e-5
  // (see reference()) barely moves such a model in 30 epochs.
  double learning_rate = 0.1;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
  }

  static TrainConfig reference() {
    TrainConfig c;
    c.batch_size = 32;
    c.learning_rate = 2e-5;
    c.epochs = 30;
    return c;
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"epochs", c.epochs}, {"seed", c.seed}};
}

// Seed offsets for the noise corpora that replace training and dev features.
inline constexpr std::uint64_t kTrainNoiseSeedOffset = 1001;
inline constexpr std::uint64_t kDevNoiseSeedOffset = 1002;

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_loss = 0.0;
  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct TrainedModel {
  Params params;  // lowest-dev-loss snapshot
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double initial_train_loss = 0.0;
  double initial_dev_loss = 0.0;

  double best_dev_loss() const { return history.at(best_epoch - 1).dev_loss; }
};

inline std::vector<Example> make_examples(const Corpus& c, const Vocabulary& vocab) {
  std::vector<Example> out;
  out.reserve(c.size());
  for (const auto& p : c.pairs) out.push_back({p.features, encode(vocab, p.text)});
  return out;
}

// Trains on split.train (features replaced by seeded noise when
// train_input == Noise, dev likewise) and returns the epoch snapshot with the
// lowest dev loss.
inline TrainedModel train(const ModelConfig& mc, const TrainConfig& tc, const SplitDataset& split,
                          InputKind train_input, const Vocabulary& vocab,
                          const std::function<void(const EpochStats&)>& on_epoch = {}) {
  mc.validate();
  tc.validate();
  if (split.train.empty()) throw DataError("training split is empty");
  if (split.dev.empty()) throw DataError("dev split is empty; model selection needs it");
  if (mc.vocab_size != vocab.size())
    throw ConfigError("model vocab_size " + std::to_string(mc.vocab_size) + " != vocabulary size " +
                      std::to_string(vocab.size()));
  if (mc.feature_dim != split.train.feature_dim)
    throw ConfigError("model feature_dim " + std::to_string(mc.feature_dim) +
                      " != corpus feature_dim " + std::to_string(split.train.feature_dim));

  const bool noise = train_input == InputKind::Noise;
  const auto train_ex = make_examples(
      noise ? make_noise_like(split.train, tc.seed + kTrainNoiseSeedOffset) : split.train, vocab);
  const auto dev_ex = make_examples(
      noise ? make_noise_like(split.dev, tc.seed + kDevNoiseSeedOffset) : split.dev, vocab);

  TrainedModel result;
  Params params = init_model(mc, tc.seed);
  result.initial_train_loss = mean_loss(params, train_ex);
  result.initial_dev_loss = mean_loss(params, dev_ex);

  std::vector<std::size_t> order(train_ex.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(tc.seed);
  double best = INFINITY;
  std::vector<Example> batch;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_ex[order[i]]);
      LossAndGrad lg;
      try {
        lg = loss_and_grad(params, batch);
      } catch (const NumericError& e) {
        throw DivergenceError(static_cast<int>(epoch), e.what());
      }
      if (!std::isfinite(lg.loss)) throw DivergenceError(static_cast<int>(epoch), "non-finite loss");
      epoch_loss += lg.loss * static_cast<double>(end - start);
      params = sgd_step(params, lg.grads, tc.learning_rate);
    }
    EpochStats st{epoch, epoch_loss / static_cast<double>(order.size()), mean_loss(params, dev_ex)};
    if (!std::isfinite(st.dev_loss))
      throw DivergenceError(static_cast<int>(epoch), "non-finite dev loss");
    result.history.push_back(st);
    if (st.dev_loss < best) {
      best = st.dev_loss;
      result.best_epoch = epoch;
      result.params = params;
    }
    if (on_epoch) on_epoch(st);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout, all integers little-endian:
//   8 bytes  magic "NGCKPT01"
//   u64 x 8  feature_dim d_model n_layers_enc n_heads n_layers_dec d_ff vocab_size max_len
//   u64      vocabulary fingerprint
//   u64      tensor count
//   per tensor: u32 name length, name bytes, u64 rows, u64 cols,
//               rows*cols IEEE-754 binary64 values, row-major
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'N', 'G', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated checkpoint");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Params& p, std::uint64_t vocab_fingerprint) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const auto& c = p.config;
  for (std::size_t v : {c.feature_dim, c.d_model, c.n_layers_enc, c.n_heads, c.n_layers_dec, c.d_ff,
                        c.vocab_size, c.max_len})
    detail::put_u64(out, v);
  detail::put_u64(out, vocab_fingerprint);
  detail::put_u64(out, p.tensors.size());
  for (const auto& [name, m] : p.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(out, m.rows());
    detail::put_u64(out, m.cols());
    for (double v : m.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
}

struct Checkpoint {
  Params params;
  std::uint64_t vocab_fingerprint = 0;
};

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw DataError("not a checkpoint file (bad magic)");
  Checkpoint ck;
  auto& c = ck.params.config;
  for (std::size_t* f : {&c.feature_dim, &c.d_model, &c.n_layers_enc, &c.n_heads, &c.n_layers_dec,
                         &c.d_ff, &c.vocab_size, &c.max_len})
    *f = detail::get_u64(in);
  ck.vocab_fingerprint = detail::get_u64(in);
  const auto n = detail::get_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = detail::get_u32(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError("truncated checkpoint");
    const auto rows = detail::get_u64(in), cols = detail::get_u64(in);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = std::bit_cast<double>(detail::get_u64(in));
    ck.params.tensors.emplace(std::move(name), std::move(m));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Params& p,
                            std::uint64_t vocab_fingerprint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  write_checkpoint(out, p, vocab_fingerprint);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

inline nlohmann::json history_to_json(const TrainedModel& m) {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& e : m.history)
    h.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev_loss", e.dev_loss}});
  return {{"best_epoch", m.best_epoch},
          {"initial_train_loss", m.initial_train_loss},
          {"initial_dev_loss", m.initial_dev_loss},
          {"history", std::move(h)}};
}

}  // namespace noisegate
