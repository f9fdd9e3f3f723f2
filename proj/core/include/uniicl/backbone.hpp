#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uniicl/digest.hpp"
#include "uniicl/ops.hpp"
#include "uniicl/tensor.hpp"

namespace uniicl {

struct BackboneConfig {
  std::size_t vocab_size = 512;
  std::size_t embed_dim = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  /// Window limit shared by compression and generation.
  std::size_t max_positions = 512;
  std::size_t mlp_mult = 4;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Plain value copy of the counters.
struct ForwardCounts {
  std::uint64_t forward_calls = 0;
  std::uint64_t token_positions = 0;
  std::uint64_t flops = 0;

  ForwardCounts operator-(const ForwardCounts& o) const {
    return {forward_calls - o.forward_calls, token_positions - o.token_positions, flops - o.flops};
  }
};

/// Monotone counters; only reset() moves them backwards.
class ForwardStats {
 public:
  void record_forward(std::uint64_t positions, std::uint64_t flops);
  void record_flops(std::uint64_t flops);
  ForwardCounts snapshot() const;
  void reset();

 private:
  std::atomic<std::uint64_t> forward_calls_{0};
  std::atomic<std::uint64_t> token_positions_{0};
  std::atomic<std::uint64_t> flops_{0};
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w_up, b_up, w_down, b_down;
};

/// Small pre-LayerNorm decoder-only transformer with learned absolute
/// positions. It is the shared frozen LLM: the compressor runs it over
/// demonstration ⊕ Memory Slots, the generator over Memory Tokens ⊕ query.
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg);

  Backbone(Backbone&&) noexcept = default;
  Backbone& operator=(Backbone&&) noexcept = default;

  const BackboneConfig& config() const { return cfg_; }
  std::size_t embed_dim() const { return cfg_.embed_dim; }
  std::size_t max_positions() const { return cfg_.max_positions; }

  /// Token-embedding rows, without positions.
  Tensor embed_tokens(std::span<const TokenId> ids) const;
  const Tensor& token_embedding() const { return token_emb_; }

  /// Runs the stack over pre-assembled input embeddings [N×d]; position i
  /// receives positional row i. Returns final-LayerNorm hidden states.
  /// When `traces` is given it receives one AttentionTrace per layer.
  Tensor forward_embeds(const Tensor& embeds, std::vector<AttentionTrace>* traces = nullptr) const;

  /// hidden states of prefix ⊕ embed(ids). An undefined or zero-row prefix
  /// means no prefix. Throws LengthError when P+T exceeds the window.
  Tensor forward_hidden(const Tensor& prefix, std::span<const TokenId> ids,
                        std::vector<AttentionTrace>* traces = nullptr) const;
  Tensor forward_hidden(std::span<const TokenId> ids) const { return forward_hidden({}, ids); }

  Tensor logits(const Tensor& hidden) const;

  /// Mean NLL of `continuation` conditioned on prefix ⊕ context. PPL = exp(result).
  Tensor sequence_nll(const Tensor& prefix, std::span<const TokenId> context,
                      std::span<const TokenId> continuation) const;

  /// Stable order used by digests, checkpoints and optimizers.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  void set_trainable(bool trainable);
  bool trainable() const { return trainable_; }

  Digest digest() const;

  ForwardStats& stats() const { return *stats_; }

  void save(const std::filesystem::path& path) const;
  /// Verifies the stored digest; throws FormatError on mismatch or damage.
  static Backbone load(const std::filesystem::path& path);

 private:
  std::uint64_t layer_param_count() const;

  BackboneConfig cfg_;
  Tensor token_emb_, pos_emb_;
  std::vector<LayerParams> layers_;
  Tensor lnf_gain_, lnf_bias_;
  Tensor lm_head_;
  bool trainable_ = false;
  std::unique_ptr<ForwardStats> stats_;
};

}  // namespace uniicl
