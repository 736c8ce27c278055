// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/model.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "fsdrive/error.hpp"
#include "fsdrive/io.hpp"

namespace fsd::model {

namespace {

constexpr double kLnEps = 1e-5;
constexpr uint16_t kCheckpointVersion = 1;

// Row-major GEMM: C = alpha * op(A) op(B) + beta * C with op(A) M x K.
void Gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}
void Gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
T Gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
T GeluGrad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);  // 1/sqrt(2 pi)
  return cdf + x * pdf;
}

template <typename T>
void AddBias(T* y, const T* bias, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    T* row = y + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] += bias[c];
  }
}

template <typename T>
void ColSumInto(T* out, const T* x, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const T* row = x + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) out[c] += row[c];
  }
}

// y = xhat * g + b; caches xhat and 1/std per row.
template <typename T>
void LayerNormForward(const T* x, const T* g, const T* b, int rows, int d, T* xhat, T* rstd, T* y) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<size_t>(r) * d;
    T mean = 0;
    for (int i = 0; i < d; ++i) mean += xr[i];
    mean /= d;
    T var = 0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= d;
    const T rs = T(1) / std::sqrt(var + T(kLnEps));
    rstd[r] = rs;
    T* xh = xhat + static_cast<size_t>(r) * d;
    T* yr = y + static_cast<size_t>(r) * d;
    for (int i = 0; i < d; ++i) {
      xh[i] = (xr[i] - mean) * rs;
      yr[i] = xh[i] * g[i] + b[i];
    }
  }
}

// Accumulates dg, db and writes dx (overwrites) given dy.
template <typename T>
void LayerNormBackward(const T* dy, const T* xhat, const T* rstd, const T* g, int rows, int d, T* dx,
                       T* dg, T* db) {
  for (int r = 0; r < rows; ++r) {
    const T* dyr = dy + static_cast<size_t>(r) * d;
    const T* xh = xhat + static_cast<size_t>(r) * d;
    T* dxr = dx + static_cast<size_t>(r) * d;
    T mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (int i = 0; i < d; ++i) {
      const T dxh = dyr[i] * g[i];
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xh[i];
      dg[i] += dyr[i] * xh[i];
      db[i] += dyr[i];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for (int i = 0; i < d; ++i) {
      dxr[i] = rstd[r] * (dyr[i] * g[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
    }
  }
}

template <typename T>
bool AllFinite(const std::vector<T>& v) {
  for (T x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Activations cached by the forward pass for the backward pass.
template <typename T>
struct LayerCache {
  std::vector<T> x_in, xhat1, rstd1, h1, q, k, v, probs, att, x_mid, xhat2, rstd2, h2, ff_pre, ff_act;
};

template <typename T>
struct Workspace {
  int batch = 0, len = 0;
  std::vector<LayerCache<T>> layers;
  std::vector<T> x_out, xhatf, rstdf, hf;

  void Resize(const ModelConfig& cfg, int b, int l) {
    batch = b;
    len = l;
    const size_t n = static_cast<size_t>(b) * l;
    const size_t d = cfg.d_model, f = cfg.ffn_dim();
    layers.resize(cfg.n_layers);
    for (auto& c : layers) {
      for (auto* v : {&c.x_in, &c.h1, &c.q, &c.k, &c.v, &c.att, &c.x_mid, &c.h2, &c.xhat1, &c.xhat2}) v->resize(n * d);
      c.rstd1.resize(n);
      c.rstd2.resize(n);
      c.probs.resize(static_cast<size_t>(b) * cfg.n_heads * l * l);
      c.ff_pre.resize(n * f);
      c.ff_act.resize(n * f);
    }
    for (auto* v : {&x_out, &xhatf, &hf}) v->resize(n * d);
    rstdf.resize(n);
  }
};

template <typename T>
Workspace<T>& ThreadWorkspace() {
  thread_local Workspace<T> ws;
  return ws;
}

template <typename T>
void CheckTokens(const ModelConfig& cfg, std::span<const int> tokens, int batch, int len) {
  FSD_CHECK(batch > 0 && len > 0, ErrorKind::kShape, "empty token matrix");
  FSD_CHECK(tokens.size() == static_cast<size_t>(batch) * len, ErrorKind::kShape,
            "token matrix size does not match batch x len");
  FSD_CHECK(len <= cfg.context_len, ErrorKind::kCapacity,
            "sequence length " + std::to_string(len) + " exceeds context " + std::to_string(cfg.context_len));
  for (int t : tokens) {
    FSD_CHECK(t >= 0 && t < cfg.vocab_size, ErrorKind::kShape, "token id " + std::to_string(t) + " outside vocab");
  }
}

// Runs embeddings and all blocks; leaves the final normalized states in ws.hf.
template <typename T>
void RunTrunk(const Params<T>& p, std::span<const int> tokens, int batch, int len, Workspace<T>& ws) {
  const ModelConfig& cfg = p.config;
  const auto& L = p.layout;
  const int d = cfg.d_model, f = cfg.ffn_dim(), nh = cfg.n_heads, hd = cfg.head_dim();
  const int n = batch * len;
  ws.Resize(cfg, batch, len);
  const T scale = T(1) / std::sqrt(T(hd));

  {
    T* x = ws.layers[0].x_in.data();
    for (int b = 0; b < batch; ++b) {
      for (int i = 0; i < len; ++i) {
        const T* te = p.at(L.tok_emb) + static_cast<size_t>(tokens[b * len + i]) * d;
        const T* pe = p.at(L.pos_emb) + static_cast<size_t>(i) * d;
        T* xr = x + static_cast<size_t>(b * len + i) * d;
        for (int c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
      }
    }
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& c = ws.layers[l];
    const auto& o = L.layers[l];
    LayerNormForward(c.x_in.data(), p.at(o.ln1_g), p.at(o.ln1_b), n, d, c.xhat1.data(), c.rstd1.data(), c.h1.data());
    Gemm(false, false, n, d, d, T(1), c.h1.data(), d, p.at(o.wq), d, T(0), c.q.data(), d);
    Gemm(false, false, n, d, d, T(1), c.h1.data(), d, p.at(o.wk), d, T(0), c.k.data(), d);
    Gemm(false, false, n, d, d, T(1), c.h1.data(), d, p.at(o.wv), d, T(0), c.v.data(), d);
    AddBias(c.q.data(), p.at(o.bq), n, d);
    AddBias(c.k.data(), p.at(o.bk), n, d);
    AddBias(c.v.data(), p.at(o.bv), n, d);

    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < nh; ++h) {
        const size_t base = static_cast<size_t>(b) * len * d + static_cast<size_t>(h) * hd;
        T* probs = c.probs.data() + (static_cast<size_t>(b) * nh + h) * len * len;
        Gemm(false, true, len, len, hd, scale, c.q.data() + base, d, c.k.data() + base, d, T(0), probs, len);
        for (int i = 0; i < len; ++i) {
          T* row = probs + static_cast<size_t>(i) * len;
          T mx = row[0];
          for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
          }
          const T inv = T(1) / sum;
          for (int j = 0; j <= i; ++j) row[j] *= inv;
          for (int j = i + 1; j < len; ++j) row[j] = T(0);
        }
        Gemm(false, false, len, hd, len, T(1), probs, len, c.v.data() + base, d, T(0), c.att.data() + base, d);
      }
    }

    // x_mid = x_in + att Wo + bo
    c.x_mid = c.x_in;
    Gemm(false, false, n, d, d, T(1), c.att.data(), d, p.at(o.wo), d, T(1), c.x_mid.data(), d);
    AddBias(c.x_mid.data(), p.at(o.bo), n, d);

    LayerNormForward(c.x_mid.data(), p.at(o.ln2_g), p.at(o.ln2_b), n, d, c.xhat2.data(), c.rstd2.data(), c.h2.data());
    Gemm(false, false, n, f, d, T(1), c.h2.data(), d, p.at(o.w1), f, T(0), c.ff_pre.data(), f);
    AddBias(c.ff_pre.data(), p.at(o.b1), n, f);
    for (size_t i = 0; i < c.ff_pre.size(); ++i) c.ff_act[i] = Gelu(c.ff_pre[i]);

    std::vector<T>& x_next = (l + 1 < cfg.n_layers) ? ws.layers[l + 1].x_in : ws.x_out;
    x_next = c.x_mid;
    Gemm(false, false, n, d, f, T(1), c.ff_act.data(), f, p.at(o.w2), d, T(1), x_next.data(), d);
    AddBias(x_next.data(), p.at(o.b2), n, d);
  }
  LayerNormForward(ws.x_out.data(), p.at(L.lnf_g), p.at(L.lnf_b), n, d, ws.xhatf.data(), ws.rstdf.data(), ws.hf.data());
}

template <typename T>
[[noreturn]] void ReportNonFinite(const Params<T>& p, const Workspace<T>& ws) {
  for (int l = 0; l < p.config.n_layers; ++l) {
    const auto& c = ws.layers[l];
    if (!AllFinite(c.x_in)) Fail(ErrorKind::kNumeric, "non-finite activation entering layer " + std::to_string(l));
    if (!AllFinite(c.att) || !AllFinite(c.x_mid))
      Fail(ErrorKind::kNumeric, "non-finite activation in layer " + std::to_string(l) + " attention");
    if (!AllFinite(c.ff_act)) Fail(ErrorKind::kNumeric, "non-finite activation in layer " + std::to_string(l) + " ffn");
  }
  if (!AllFinite(ws.x_out) || !AllFinite(ws.hf)) Fail(ErrorKind::kNumeric, "non-finite activation in final norm");
  Fail(ErrorKind::kNumeric, "non-finite loss at output head");
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::Validate() const {
  FSD_CHECK(vocab_size > 0, ErrorKind::kConfig, "model.vocab_size must be positive");
  FSD_CHECK(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, ErrorKind::kConfig,
            "model.d_model must be divisible by model.n_heads");
  FSD_CHECK(n_layers > 0, ErrorKind::kConfig, "model.n_layers must be positive");
  FSD_CHECK(ffn_mult > 0, ErrorKind::kConfig, "model.ffn_mult must be positive");
  FSD_CHECK(context_len > 0, ErrorKind::kConfig, "model.context_len must be positive");
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.Validate();
  const int d = cfg.d_model, f = cfg.ffn_dim(), v = cfg.vocab_size;
  auto add = [&](const std::string& name, int rows, int cols) {
    slots.push_back({name, rows, cols, total});
    const size_t off = total;
    total += static_cast<size_t>(rows) * cols;
    return off;
  };
  tok_emb = add("tok_emb", v, d);
  pos_emb = add("pos_emb", cfg.context_len, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    Layer o;
    o.ln1_g = add(pre + "ln1.g", 1, d);
    o.ln1_b = add(pre + "ln1.b", 1, d);
    o.wq = add(pre + "attn.wq", d, d);
    o.bq = add(pre + "attn.bq", 1, d);
    o.wk = add(pre + "attn.wk", d, d);
    o.bk = add(pre + "attn.bk", 1, d);
    o.wv = add(pre + "attn.wv", d, d);
    o.bv = add(pre + "attn.bv", 1, d);
    o.wo = add(pre + "attn.wo", d, d);
    o.bo = add(pre + "attn.bo", 1, d);
    o.ln2_g = add(pre + "ln2.g", 1, d);
    o.ln2_b = add(pre + "ln2.b", 1, d);
    o.w1 = add(pre + "ffn.w1", d, f);
    o.b1 = add(pre + "ffn.b1", 1, f);
    o.w2 = add(pre + "ffn.w2", f, d);
    o.b2 = add(pre + "ffn.b2", 1, d);
    layers.push_back(o);
  }
  lnf_g = add("lnf.g", 1, d);
  lnf_b = add("lnf.b", 1, d);
  head = add("head", d, v);
}

const TensorSlot& ParamLayout::SlotOf(size_t i) const {
  auto it = std::upper_bound(slots.begin(), slots.end(), i,
                             [](size_t idx, const TensorSlot& s) { return idx < s.offset; });
  return *std::prev(it);
}

template <typename T>
Params<T> ZeroParams(const ModelConfig& config) {
  Params<T> p(config);
  for (const auto& s : p.layout.slots) {
    if (s.name.ends_with(".g")) std::fill_n(p.at(s.offset), s.size(), T(1));
  }
  return p;
}

template <typename T>
Params<T> InitParams(const ModelConfig& config, uint64_t seed, double std) {
  Params<T> p = ZeroParams<T>(config);
  Rng rng(seed);
  for (const auto& s : p.layout.slots) {
    if (s.rows == 1) continue;  // biases and norm parameters
    T* w = p.at(s.offset);
    for (size_t i = 0; i < s.size(); ++i) w[i] = static_cast<T>(std * rng.Normal());
  }
  return p;
}

template <typename To, typename From>
Params<To> CastParams(const Params<From>& p) {
  Params<To> out(p.config);
  for (size_t i = 0; i < p.data.size(); ++i) out.data[i] = static_cast<To>(p.data[i]);
  return out;
}

size_t Batch::MaskCount() const {
  return static_cast<size_t>(std::count(mask.begin(), mask.end(), uint8_t{1}));
}

Batch MakeBatch(std::span<const std::vector<int>> sequences, std::span<const std::vector<uint8_t>> target_flags,
                int pad_token) {
  FSD_CHECK(sequences.size() == target_flags.size() && !sequences.empty(), ErrorKind::kShape,
            "batch needs matching, non-empty sequence and flag lists");
  Batch b;
  b.batch = static_cast<int>(sequences.size());
  for (const auto& s : sequences) b.len = std::max(b.len, static_cast<int>(s.size()));
  b.tokens.assign(static_cast<size_t>(b.batch) * b.len, pad_token);
  b.mask.assign(static_cast<size_t>(b.batch) * b.len, 0);
  for (int i = 0; i < b.batch; ++i) {
    const auto& s = sequences[i];
    const auto& flags = target_flags[i];
    FSD_CHECK(flags.size() == s.size(), ErrorKind::kShape, "target flags must align with tokens");
    std::copy(s.begin(), s.end(), b.tokens.begin() + static_cast<ptrdiff_t>(i) * b.len);
    for (size_t j = 1; j < s.size(); ++j) b.mask[i * b.len + j - 1] = flags[j] ? 1 : 0;
  }
  return b;
}

template <typename T>
std::vector<T> Forward(const Params<T>& params, std::span<const int> tokens, int batch, int len) {
  CheckTokens<T>(params.config, tokens, batch, len);
  auto& ws = ThreadWorkspace<T>();
  RunTrunk(params, tokens, batch, len, ws);
  const int n = batch * len, d = params.config.d_model, v = params.config.vocab_size;
  std::vector<T> logits(static_cast<size_t>(n) * v);
  Gemm(false, false, n, v, d, T(1), ws.hf.data(), d, params.at(params.layout.head), v, T(0), logits.data(), v);
  return logits;
}

template <typename T>
double Loss(std::span<const T> logits, std::span<const int> targets, std::span<const uint8_t> mask, int vocab_size) {
  FSD_CHECK(targets.size() == mask.size() && logits.size() == targets.size() * vocab_size, ErrorKind::kShape,
            "loss inputs are misaligned");
  double total = 0.0;
  size_t count = 0;
  for (size_t r = 0; r < mask.size(); ++r) {
    if (!mask[r]) continue;
    const T* row = logits.data() + r * vocab_size;
    double mx = row[0];
    for (int j = 1; j < vocab_size; ++j) mx = std::max<double>(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < vocab_size; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    total += -(static_cast<double>(row[targets[r]]) - mx - std::log(sum));
    ++count;
  }
  FSD_CHECK(count > 0, ErrorKind::kDegenerate, "loss mask is empty");
  return total / static_cast<double>(count);
}

template <typename T>
double LossAndGrad(const Params<T>& p, const Batch& batch, std::vector<T>& grads) {
  const ModelConfig& cfg = p.config;
  const auto& L = p.layout;
  CheckTokens<T>(cfg, batch.tokens, batch.batch, batch.len);
  FSD_CHECK(batch.mask.size() == batch.tokens.size(), ErrorKind::kShape, "mask must match token matrix");
  const int len = batch.len, n = batch.batch * len;
  const int d = cfg.d_model, f = cfg.ffn_dim(), nh = cfg.n_heads, hd = cfg.head_dim(), v = cfg.vocab_size;

  std::vector<int> rows;
  for (int r = 0; r < n; ++r) {
    if (batch.mask[r] && (r % len) + 1 < len) rows.push_back(r);
  }
  FSD_CHECK(!rows.empty(), ErrorKind::kDegenerate, "loss mask is empty");
  const int m = static_cast<int>(rows.size());

  auto& ws = ThreadWorkspace<T>();
  RunTrunk(p, batch.tokens, batch.batch, len, ws);

  // Output head on scored rows only.
  std::vector<T> hm(static_cast<size_t>(m) * d);
  for (int i = 0; i < m; ++i) std::copy_n(ws.hf.data() + static_cast<size_t>(rows[i]) * d, d, hm.data() + static_cast<size_t>(i) * d);
  std::vector<T> dlogits(static_cast<size_t>(m) * v);
  Gemm(false, false, m, v, d, T(1), hm.data(), d, p.at(L.head), v, T(0), dlogits.data(), v);
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    T* row = dlogits.data() + static_cast<size_t>(i) * v;
    const int target = batch.tokens[rows[i] + 1];
    T mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    loss += -(static_cast<double>(row[target] - mx) - std::log(sum));
    const double inv = 1.0 / sum;
    for (int j = 0; j < v; ++j) row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) * inv / m);
    row[target] -= T(1) / T(m);
  }
  loss /= m;
  if (!std::isfinite(loss)) ReportNonFinite(p, ws);

  grads.assign(L.total, T(0));
  Gemm(true, false, d, v, m, T(1), hm.data(), d, dlogits.data(), v, T(0), grads.data() + L.head, v);
  std::vector<T> dhm(static_cast<size_t>(m) * d);
  Gemm(false, true, m, d, v, T(1), dlogits.data(), v, p.at(L.head), v, T(0), dhm.data(), d);
  std::vector<T> dhf(static_cast<size_t>(n) * d, T(0));
  for (int i = 0; i < m; ++i) std::copy_n(dhm.data() + static_cast<size_t>(i) * d, d, dhf.data() + static_cast<size_t>(rows[i]) * d);

  std::vector<T> dx(static_cast<size_t>(n) * d);
  LayerNormBackward(dhf.data(), ws.xhatf.data(), ws.rstdf.data(), p.at(L.lnf_g), n, d, dx.data(),
                    grads.data() + L.lnf_g, grads.data() + L.lnf_b);

  std::vector<T> dff(static_cast<size_t>(n) * f), dh(static_cast<size_t>(n) * d), dtmp(static_cast<size_t>(n) * d);
  std::vector<T> datt(static_cast<size_t>(n) * d), dq(static_cast<size_t>(n) * d), dk(static_cast<size_t>(n) * d),
      dv(static_cast<size_t>(n) * d);
  std::vector<T> dprobs(static_cast<size_t>(len) * len);
  const T scale = T(1) / std::sqrt(T(hd));

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    auto& c = ws.layers[l];
    const auto& o = L.layers[l];
    T* g = grads.data();

    // Feed-forward branch: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2.
    ColSumInto(g + o.b2, dx.data(), n, d);
    Gemm(true, false, f, d, n, T(1), c.ff_act.data(), f, dx.data(), d, T(0), g + o.w2, d);
    Gemm(false, true, n, f, d, T(1), dx.data(), d, p.at(o.w2), d, T(0), dff.data(), f);
    for (size_t i = 0; i < dff.size(); ++i) dff[i] *= GeluGrad(c.ff_pre[i]);
    ColSumInto(g + o.b1, dff.data(), n, f);
    Gemm(true, false, d, f, n, T(1), c.h2.data(), d, dff.data(), f, T(0), g + o.w1, f);
    Gemm(false, true, n, d, f, T(1), dff.data(), f, p.at(o.w1), f, T(0), dh.data(), d);
    LayerNormBackward(dh.data(), c.xhat2.data(), c.rstd2.data(), p.at(o.ln2_g), n, d, dtmp.data(), g + o.ln2_g, g + o.ln2_b);
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += dtmp[i];  // dx is now d(x_mid)

    // Attention branch: x_mid = x_in + att Wo + bo.
    ColSumInto(g + o.bo, dx.data(), n, d);
    Gemm(true, false, d, d, n, T(1), c.att.data(), d, dx.data(), d, T(0), g + o.wo, d);
    Gemm(false, true, n, d, d, T(1), dx.data(), d, p.at(o.wo), d, T(0), datt.data(), d);
    for (int b = 0; b < batch.batch; ++b) {
      for (int h = 0; h < nh; ++h) {
        const size_t base = static_cast<size_t>(b) * len * d + static_cast<size_t>(h) * hd;
        const T* probs = c.probs.data() + (static_cast<size_t>(b) * nh + h) * len * len;
        Gemm(false, true, len, len, hd, T(1), datt.data() + base, d, c.v.data() + base, d, T(0), dprobs.data(), len);
        Gemm(true, false, len, hd, len, T(1), probs, len, datt.data() + base, d, T(0), dv.data() + base, d);
        for (int i = 0; i < len; ++i) {
          const T* pr = probs + static_cast<size_t>(i) * len;
          T* dr = dprobs.data() + static_cast<size_t>(i) * len;
          T dot = 0;
          for (int j = 0; j <= i; ++j) dot += pr[j] * dr[j];
          for (int j = 0; j <= i; ++j) dr[j] = pr[j] * (dr[j] - dot);
          for (int j = i + 1; j < len; ++j) dr[j] = T(0);
        }
        Gemm(false, false, len, hd, len, scale, dprobs.data(), len, c.k.data() + base, d, T(0), dq.data() + base, d);
        Gemm(true, false, len, hd, len, scale, dprobs.data(), len, c.q.data() + base, d, T(0), dk.data() + base, d);
      }
    }
    ColSumInto(g + o.bq, dq.data(), n, d);
    ColSumInto(g + o.bk, dk.data(), n, d);
    ColSumInto(g + o.bv, dv.data(), n, d);
    Gemm(true, false, d, d, n, T(1), c.h1.data(), d, dq.data(), d, T(0), g + o.wq, d);
    Gemm(true, false, d, d, n, T(1), c.h1.data(), d, dk.data(), d, T(0), g + o.wk, d);
    Gemm(true, false, d, d, n, T(1), c.h1.data(), d, dv.data(), d, T(0), g + o.wv, d);
    Gemm(false, true, n, d, d, T(1), dq.data(), d, p.at(o.wq), d, T(0), dh.data(), d);
    Gemm(false, true, n, d, d, T(1), dk.data(), d, p.at(o.wk), d, T(1), dh.data(), d);
    Gemm(false, true, n, d, d, T(1), dv.data(), d, p.at(o.wv), d, T(1), dh.data(), d);
    LayerNormBackward(dh.data(), c.xhat1.data(), c.rstd1.data(), p.at(o.ln1_g), n, d, dtmp.data(), g + o.ln1_g, g + o.ln1_b);
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += dtmp[i];  // d(x_in)
  }

  for (int r = 0; r < n; ++r) {
    const T* dr = dx.data() + static_cast<size_t>(r) * d;
    T* te = grads.data() + L.tok_emb + static_cast<size_t>(batch.tokens[r]) * d;
    T* pe = grads.data() + L.pos_emb + static_cast<size_t>(r % len) * d;
    for (int c = 0; c < d; ++c) {
      te[c] += dr[c];
      pe[c] += dr[c];
    }
  }

  for (const auto& s : L.slots) {
    for (size_t i = 0; i < s.size(); ++i) {
      if (!std::isfinite(grads[s.offset + i])) Fail(ErrorKind::kNumeric, "non-finite gradient in " + s.name);
    }
  }
  return loss;
}

template <typename T>
double BatchLoss(const Params<T>& params, const Batch& batch) {
  auto logits = Forward(params, batch.tokens, batch.batch, batch.len);
  std::vector<int> targets(batch.tokens.size(), 0);
  std::vector<uint8_t> mask(batch.mask.size(), 0);
  for (int b = 0; b < batch.batch; ++b) {
    for (int i = 0; i + 1 < batch.len; ++i) {
      targets[b * batch.len + i] = batch.tokens[b * batch.len + i + 1];
      mask[b * batch.len + i] = batch.mask[b * batch.len + i];
    }
  }
  return Loss<T>(logits, targets, mask, params.config.vocab_size);
}

// ---------------------------------------------------------------------------

double Hyper::LearningRate(int64_t step) const {
  if (warmup_steps > 0 && step < warmup_steps) return lr * static_cast<double>(step + 1) / warmup_steps;
  if (total_steps <= 0) return lr;
  const double span = static_cast<double>(std::max<int64_t>(1, total_steps - warmup_steps));
  const double progress = std::clamp(static_cast<double>(step - warmup_steps) / span, 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return lr * (min_lr_ratio + (1.0 - min_lr_ratio) * cosine);
}

AdamState AdamState::For(const Params<float>& params) {
  AdamState s;
  s.m.assign(params.data.size(), 0.0f);
  s.v.assign(params.data.size(), 0.0f);
  return s;
}

template <typename T>
double ClipGlobalNorm(std::vector<T>& grads, double max_norm) {
  double sq = 0.0;
  for (T g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (T& g : grads) g *= s;
  }
  return norm;
}

StepResult TrainStep(Params<float>& params, AdamState& opt, const Batch& batch, const Hyper& hyper) {
  FSD_CHECK(opt.m.size() == params.data.size() && opt.v.size() == params.data.size(), ErrorKind::kState,
            "optimizer state does not match parameters");
  thread_local std::vector<float> grads;
  StepResult r;
  r.loss = LossAndGrad(params, batch, grads);
  r.grad_norm = hyper.clip_norm > 0.0 ? ClipGlobalNorm(grads, hyper.clip_norm) : 0.0;
  r.lr = hyper.LearningRate(opt.step);
  ++opt.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(opt.step));
  const float b1 = static_cast<float>(hyper.beta1), b2 = static_cast<float>(hyper.beta2);
  const float step_size = static_cast<float>(r.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(hyper.eps);
  if (r.lr == 0.0) {
    // Moments still advance; parameters stay bit-identical.
    for (size_t i = 0; i < grads.size(); ++i) {
      opt.m[i] = b1 * opt.m[i] + (1.0f - b1) * grads[i];
      opt.v[i] = b2 * opt.v[i] + (1.0f - b2) * grads[i] * grads[i];
    }
    return r;
  }
  for (size_t i = 0; i < grads.size(); ++i) {
    const float g = grads[i];
    opt.m[i] = b1 * opt.m[i] + (1.0f - b1) * g;
    opt.v[i] = b2 * opt.v[i] + (1.0f - b2) * g * g;
    params.data[i] -= step_size * opt.m[i] / (std::sqrt(opt.v[i]) * inv_sqrt_bc2 + eps);
  }
  return r;
}

// ---------------------------------------------------------------------------

ConstraintSchedule ConstraintSchedule::Repeat(codec::TokenRange range, int count) {
  ConstraintSchedule s;
  s.slots.assign(static_cast<size_t>(count), Slot{{range}, -1});
  return s;
}

void ConstraintSchedule::Append(const ConstraintSchedule& other) {
  slots.insert(slots.end(), other.slots.begin(), other.slots.end());
}

IncrementalDecoder::IncrementalDecoder(const Params<float>& params) : params_(params) {
  const auto& cfg = params.config;
  const size_t d = cfg.d_model;
  k_cache_.assign(cfg.n_layers, std::vector<float>(static_cast<size_t>(cfg.context_len) * d));
  v_cache_.assign(cfg.n_layers, std::vector<float>(static_cast<size_t>(cfg.context_len) * d));
  for (auto* v : {&x_, &h_, &q_, &k_, &v_, &att_, &proj_}) v->resize(d);
  ff_.resize(cfg.ffn_dim());
  scores_.resize(cfg.context_len);
  logits_.resize(cfg.vocab_size);
}

namespace {

// y = x W + b for W stored [in x out].
void Affine(const float* x, const float* w, const float* b, int in, int out, float* y) {
  cblas_sgemv(CblasRowMajor, CblasTrans, in, out, 1.0f, w, out, x, 1, 0.0f, y, 1);
  if (b != nullptr) {
    for (int i = 0; i < out; ++i) y[i] += b[i];
  }
}

void NormVec(const float* x, const float* g, const float* b, int d, float* y) {
  float mean = 0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  float var = 0;
  for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= d;
  const float rs = 1.0f / std::sqrt(var + static_cast<float>(kLnEps));
  for (int i = 0; i < d; ++i) y[i] = (x[i] - mean) * rs * g[i] + b[i];
}

}  // namespace

std::span<const float> IncrementalDecoder::Feed(int token) {
  const auto& cfg = params_.config;
  const auto& L = params_.layout;
  const int d = cfg.d_model, f = cfg.ffn_dim(), hd = cfg.head_dim();
  FSD_CHECK(pos_ < cfg.context_len, ErrorKind::kCapacity, "decoder context exhausted at " + std::to_string(pos_));
  FSD_CHECK(token >= 0 && token < cfg.vocab_size, ErrorKind::kShape, "token id " + std::to_string(token) + " outside vocab");
  const float* te = params_.at(L.tok_emb) + static_cast<size_t>(token) * d;
  const float* pe = params_.at(L.pos_emb) + static_cast<size_t>(pos_) * d;
  for (int i = 0; i < d; ++i) x_[i] = te[i] + pe[i];
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& o = L.layers[l];
    NormVec(x_.data(), params_.at(o.ln1_g), params_.at(o.ln1_b), d, h_.data());
    Affine(h_.data(), params_.at(o.wq), params_.at(o.bq), d, d, q_.data());
    float* kc = k_cache_[l].data() + static_cast<size_t>(pos_) * d;
    float* vc = v_cache_[l].data() + static_cast<size_t>(pos_) * d;
    Affine(h_.data(), params_.at(o.wk), params_.at(o.bk), d, d, kc);
    Affine(h_.data(), params_.at(o.wv), params_.at(o.bv), d, d, vc);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const float* qh = q_.data() + h * hd;
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j <= pos_; ++j) {
        const float* kj = k_cache_[l].data() + static_cast<size_t>(j) * d + h * hd;
        float s = 0;
        for (int c = 0; c < hd; ++c) s += qh[c] * kj[c];
        scores_[j] = s * scale;
        mx = std::max(mx, scores_[j]);
      }
      float sum = 0;
      for (int j = 0; j <= pos_; ++j) {
        scores_[j] = std::exp(scores_[j] - mx);
        sum += scores_[j];
      }
      float* ah = att_.data() + h * hd;
      std::fill_n(ah, hd, 0.0f);
      for (int j = 0; j <= pos_; ++j) {
        const float w = scores_[j] / sum;
        const float* vj = v_cache_[l].data() + static_cast<size_t>(j) * d + h * hd;
        for (int c = 0; c < hd; ++c) ah[c] += w * vj[c];
      }
    }
    Affine(att_.data(), params_.at(o.wo), params_.at(o.bo), d, d, proj_.data());
    for (int i = 0; i < d; ++i) x_[i] += proj_[i];
    NormVec(x_.data(), params_.at(o.ln2_g), params_.at(o.ln2_b), d, h_.data());
    Affine(h_.data(), params_.at(o.w1), params_.at(o.b1), d, f, ff_.data());
    for (float& a : ff_) a = Gelu(a);
    Affine(ff_.data(), params_.at(o.w2), params_.at(o.b2), f, d, proj_.data());
    for (int i = 0; i < d; ++i) x_[i] += proj_[i];
  }
  NormVec(x_.data(), params_.at(L.lnf_g), params_.at(L.lnf_b), d, h_.data());
  Affine(h_.data(), params_.at(L.head), nullptr, d, cfg.vocab_size, logits_.data());
  history_.push_back(token);
  ++pos_;
  return logits_;
}

void IncrementalDecoder::FeedAll(std::span<const int> tokens) {
  for (int t : tokens) Feed(t);
}

int SampleToken(std::span<const float> logits, const Slot& slot, const SampleOptions& options, Rng& rng) {
  const int v = static_cast<int>(logits.size());
  std::vector<int> allowed;
  for (const auto& r : slot.allowed) {
    for (int t = std::max(0, r.begin); t < std::min(v, r.end); ++t) allowed.push_back(t);
  }
  std::sort(allowed.begin(), allowed.end());
  allowed.erase(std::unique(allowed.begin(), allowed.end()), allowed.end());
  FSD_CHECK(!allowed.empty(), ErrorKind::kSchedule, "constraint slot allows no token");

  if (options.mode == DecodeMode::kGreedy) {
    int best = allowed[0];
    for (int t : allowed) {
      if (logits[t] > logits[best]) best = t;
    }
    return best;
  }
  const int k = std::min<int>(std::max(1, options.top_k), static_cast<int>(allowed.size()));
  std::partial_sort(allowed.begin(), allowed.begin() + k, allowed.end(), [&](int a, int b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  });
  const double temp = options.temperature > 0.0 ? options.temperature : 1.0;
  std::vector<double> w(k);
  const double mx = logits[allowed[0]];
  for (int i = 0; i < k; ++i) w[i] = std::exp((logits[allowed[i]] - mx) / temp);
  return allowed[rng.Categorical(w)];
}

std::vector<int> GenerateConstrained(IncrementalDecoder& decoder, const ConstraintSchedule& schedule,
                                     const SampleOptions& options, Rng& rng) {
  std::vector<int> out;
  for (const Slot& slot : schedule.slots) {
    FSD_CHECK(decoder.position() > 0, ErrorKind::kState, "generation needs a non-empty prompt");
    const int tok = SampleToken(decoder.logits(), slot, options, rng);
    out.push_back(tok);
    decoder.Feed(tok);
    if (tok == slot.stop_token) break;
  }
  return out;
}

std::vector<int> Sample(const Params<float>& params, std::span<const int> prompt, const ConstraintSchedule& schedule,
                        const SampleOptions& options) {
  FSD_CHECK(!prompt.empty(), ErrorKind::kState, "sampling needs a non-empty prompt");
  IncrementalDecoder dec(params);
  dec.FeedAll(prompt);
  Rng rng(options.seed);
  return GenerateConstrained(dec, schedule, options, rng);
}

// ---------------------------------------------------------------------------

std::string ModelConfigJson(const ModelConfig& c) {
  nlohmann::ordered_json j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
                              {"n_heads", c.n_heads},       {"ffn_mult", c.ffn_mult}, {"context_len", c.context_len}};
  return j.dump();
}

std::string SerializeCheckpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json meta;
  meta["config"] = nlohmann::ordered_json::parse(ModelConfigJson(ckpt.params.config));
  meta["vocab_hash"] = ckpt.meta.vocab_hash;
  meta["codebook_hash"] = ckpt.meta.codebook_hash;
  meta["step"] = ckpt.meta.step;
  meta["stage"] = ckpt.meta.stage;
  meta["rng_state"] = ckpt.meta.rng_state;
  meta["param_count"] = ckpt.params.data.size();
  meta["has_optimizer"] = ckpt.optimizer.has_value();
  meta["optimizer_step"] = ckpt.optimizer ? ckpt.optimizer->step : 0;
  meta["extra"] = nlohmann::ordered_json::parse(ckpt.meta.extra_json);
  const std::string meta_text = meta.dump();

  io::ByteWriter w;
  w.Str("FSDK");
  w.Pod<uint16_t>(kCheckpointVersion);
  w.Pod<uint32_t>(static_cast<uint32_t>(meta_text.size()));
  w.Str(meta_text);
  w.Bytes(ckpt.params.data.data(), ckpt.params.data.size() * sizeof(float));
  if (ckpt.optimizer) {
    w.Bytes(ckpt.optimizer->m.data(), ckpt.optimizer->m.size() * sizeof(float));
    w.Bytes(ckpt.optimizer->v.data(), ckpt.optimizer->v.size() * sizeof(float));
  }
  return w.Take();
}

Checkpoint DeserializeCheckpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.ExpectMagic("FSDK");
  const auto version = r.Pod<uint16_t>();
  FSD_CHECK(version == kCheckpointVersion, ErrorKind::kDecode, "unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = r.Pod<uint32_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.Str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kDecode, std::string("bad checkpoint metadata: ") + e.what());
  }
  try {
    ModelConfig cfg;
    const auto& c = meta.at("config");
    cfg.vocab_size = c.at("vocab_size");
    cfg.d_model = c.at("d_model");
    cfg.n_layers = c.at("n_layers");
    cfg.n_heads = c.at("n_heads");
    cfg.ffn_mult = c.at("ffn_mult");
    cfg.context_len = c.at("context_len");
    Checkpoint ck{Params<float>(cfg), {}, std::nullopt};
    FSD_CHECK(meta.at("param_count").get<size_t>() == ck.params.data.size(), ErrorKind::kDecode,
              "checkpoint parameter count mismatch");
    ck.meta.vocab_hash = meta.at("vocab_hash");
    ck.meta.codebook_hash = meta.at("codebook_hash");
    ck.meta.step = meta.at("step");
    ck.meta.stage = meta.at("stage");
    ck.meta.rng_state = meta.at("rng_state");
    ck.meta.extra_json = meta.at("extra").dump();
    r.Bytes(ck.params.data.data(), ck.params.data.size() * sizeof(float));
    if (meta.at("has_optimizer").get<bool>()) {
      AdamState s = AdamState::For(ck.params);
      s.step = meta.at("optimizer_step");
      r.Bytes(s.m.data(), s.m.size() * sizeof(float));
      r.Bytes(s.v.data(), s.v.size() * sizeof(float));
      ck.optimizer = std::move(s);
    }
    FSD_CHECK(r.remaining() == 0, ErrorKind::kDecode, "trailing bytes in checkpoint");
    for (float x : ck.params.data) FSD_CHECK(std::isfinite(x), ErrorKind::kDecode, "checkpoint holds non-finite weights");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kDecode, std::string("bad checkpoint metadata: ") + e.what());
  }
}

// Explicit instantiations.
template Params<float> ZeroParams<float>(const ModelConfig&);
template Params<double> ZeroParams<double>(const ModelConfig&);
template Params<float> InitParams<float>(const ModelConfig&, uint64_t, double);
template Params<double> InitParams<double>(const ModelConfig&, uint64_t, double);
template Params<double> CastParams<double, float>(const Params<float>&);
template Params<float> CastParams<float, double>(const Params<double>&);
template std::vector<float> Forward<float>(const Params<float>&, std::span<const int>, int, int);
template std::vector<double> Forward<double>(const Params<double>&, std::span<const int>, int, int);
template double Loss<float>(std::span<const float>, std::span<const int>, std::span<const uint8_t>, int);
template double Loss<double>(std::span<const double>, std::span<const int>, std::span<const uint8_t>, int);
template double LossAndGrad<float>(const Params<float>&, const Batch&, std::vector<float>&);
template double LossAndGrad<double>(const Params<double>&, const Batch&, std::vector<double>&);
template double BatchLoss<float>(const Params<float>&, const Batch&);
template double BatchLoss<double>(const Params<double>&, const Batch&);
template double ClipGlobalNorm<float>(std::vector<float>&, double);
template double ClipGlobalNorm<double>(std::vector<double>&, double);

}  // namespace fsd::model
