// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Decoder-only transformer over the unified vocabulary: forward pass,
// reverse-mode gradients written out by hand, Adam with global-norm
// clipping, and constrained autoregressive sampling.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsdrive/codec.hpp"
#include "fsdrive/rng.hpp"

namespace fsd::model {

struct ModelConfig {
  int vocab_size = 1056;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int ffn_mult = 4;
  int context_len = 512;

  int head_dim() const { return d_model / n_heads; }
  int ffn_dim() const { return d_model * ffn_mult; }
  void Validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One named tensor inside the flat parameter buffer.
struct TensorSlot {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  size_t size() const { return static_cast<size_t>(rows) * cols; }
};

/// Offsets of every tensor in declaration order. Weight matrices are stored
/// [in x out] so that y = x W for row-major activations.
struct ParamLayout {
  struct Layer {
    size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, head = 0;
  std::vector<Layer> layers;
  std::vector<TensorSlot> slots;
  size_t total = 0;

  explicit ParamLayout(const ModelConfig& config);
  /// Tensor containing flat index `i` (for error messages / gradcheck).
  const TensorSlot& SlotOf(size_t i) const;
};

template <typename T>
struct Params {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> data;

  explicit Params(const ModelConfig& cfg) : config(cfg), layout(cfg), data(layout.total, T(0)) {}

  T* at(size_t offset) { return data.data() + offset; }
  const T* at(size_t offset) const { return data.data() + offset; }
};

/// Zero weights, unit norm gains; all logits come out identical.
template <typename T>
Params<T> ZeroParams(const ModelConfig& config);

/// N(0, std^2) weights, zero biases, unit norm gains.
template <typename T>
Params<T> InitParams(const ModelConfig& config, uint64_t seed, double std = 0.02);

template <typename To, typename From>
Params<To> CastParams(const Params<From>& p);

/// Token matrix [batch x len] padded with PAD, plus a loss mask aligned with
/// positions: mask[b, i] scores the prediction at i against tokens[b, i + 1].
struct Batch {
  int batch = 0;
  int len = 0;
  std::vector<int> tokens;
  std::vector<uint8_t> mask;

  size_t MaskCount() const;
};

/// Builds a batch from variable-length sequences and per-token target flags
/// (flag[i] true when tokens[i] is a training target).
Batch MakeBatch(std::span<const std::vector<int>> sequences,
                std::span<const std::vector<uint8_t>> target_flags, int pad_token);

/// Full logits [batch x len x vocab].
template <typename T>
std::vector<T> Forward(const Params<T>& params, std::span<const int> tokens, int batch, int len);

/// Mean masked next-token cross entropy; `targets` and `mask` are aligned
/// with logits rows (targets = tokens shifted left by one).
template <typename T>
double Loss(std::span<const T> logits, std::span<const int> targets, std::span<const uint8_t> mask,
            int vocab_size);

/// Loss of the batch and its exact gradient w.r.t. every parameter
/// (`grads` is overwritten, same layout as params.data).
template <typename T>
double LossAndGrad(const Params<T>& params, const Batch& batch, std::vector<T>& grads);

template <typename T>
double BatchLoss(const Params<T>& params, const Batch& batch);

// ---------------------------------------------------------------------------
// Optimization

struct Hyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
  int64_t total_steps = 0;   // cosine horizon; 0 disables decay
  int64_t warmup_steps = 0;  // linear warmup before the cosine
  double min_lr_ratio = 0.0;

  double LearningRate(int64_t step) const;
};

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  int64_t step = 0;

  static AdamState For(const Params<float>& params);
};

/// Scales `grads` in place to global norm <= max_norm; returns the norm
/// before clipping.
template <typename T>
double ClipGlobalNorm(std::vector<T>& grads, double max_norm);

struct StepResult {
  double loss = 0.0;       // recorded before the update
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
};

StepResult TrainStep(Params<float>& params, AdamState& opt, const Batch& batch, const Hyper& hyper);

// ---------------------------------------------------------------------------
// Constrained sampling

/// One generated position: the union of `allowed` ranges is sampleable.
/// Emitting `stop_token` ends the schedule early.
struct Slot {
  std::vector<codec::TokenRange> allowed;
  int stop_token = -1;
};

struct ConstraintSchedule {
  std::vector<Slot> slots;

  static ConstraintSchedule Repeat(codec::TokenRange range, int count);
  void Append(const ConstraintSchedule& other);
};

enum class DecodeMode { kGreedy, kTopK };

struct SampleOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  int top_k = 5;
  double temperature = 1.0;
  uint64_t seed = 0;
};

/// KV-cached incremental evaluation of one sequence.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Params<float>& params);

  /// Appends `token` and returns the next-token logits at its position.
  std::span<const float> Feed(int token);
  void FeedAll(std::span<const int> tokens);
  std::span<const float> logits() const { return logits_; }
  int position() const { return pos_; }
  const std::vector<int>& tokens() const { return history_; }

 private:
  const Params<float>& params_;
  int pos_ = 0;
  std::vector<int> history_;
  std::vector<std::vector<float>> k_cache_, v_cache_;
  std::vector<float> x_, h_, q_, k_, v_, att_, proj_, ff_, scores_, logits_;
};

/// Draws one token from `logits` restricted to `slot`. Disallowed logits
/// are treated as -inf; greedy ties resolve to the lowest id.
int SampleToken(std::span<const float> logits, const Slot& slot, const SampleOptions& options, Rng& rng);

/// Continues `decoder` through the schedule, feeding each emitted token.
std::vector<int> GenerateConstrained(IncrementalDecoder& decoder, const ConstraintSchedule& schedule,
                                     const SampleOptions& options, Rng& rng);

/// Prompt-conditioned generation from scratch.
std::vector<int> Sample(const Params<float>& params, std::span<const int> prompt,
                        const ConstraintSchedule& schedule, const SampleOptions& options);

// ---------------------------------------------------------------------------
// Checkpoints ("FSDK")

struct CheckpointMeta {
  std::string vocab_hash;
  std::string codebook_hash;
  int64_t step = 0;
  std::string stage;
  uint64_t rng_state = 0;
  std::string extra_json = "{}";  // free-form provenance object
};

struct Checkpoint {
  Params<float> params;
  CheckpointMeta meta;
  std::optional<AdamState> optimizer;
};

std::string SerializeCheckpoint(const Checkpoint& ckpt);
Checkpoint DeserializeCheckpoint(std::string_view bytes);

std::string ModelConfigJson(const ModelConfig& config);

}  // namespace fsd::model
