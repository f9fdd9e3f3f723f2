#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "uniicl/backbone.hpp"
#include "uniicl/compressor.hpp"
#include "uniicl/errors.hpp"
#include "uniicl/optimizer.hpp"

namespace uniicl {

class DemoBank;

/// A source/target pair. The LM sees `source <sep> target <eos>`.
struct TaskInstance {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

struct TrainConfig {
  double learning_rate = 8e-5;
  /// Examples per optimizer step, reached by gradient accumulation.
  std::size_t effective_batch = 32;
  std::size_t epochs_phase1 = 10;
  std::size_t epochs_phase2 = 2;
  int ratio_min = 2;
  int ratio_max = 16;
  /// Trains with one ratio instead of sampling.
  std::optional<int> fixed_ratio;
  /// Ratio used for validation loss and mining-free evaluation.
  int validation_ratio = 12;
  /// InfoNCE temperature.
  double temperature = 1.0;
  /// Size of each of the two non-crossing candidate sets per query.
  std::size_t candidates_per_set = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

/// A sliced training instance: one side of the split is compressed.
struct TrainingExample {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
  std::vector<TokenId> compressed;    // x_c
  std::vector<TokenId> uncompressed;  // x_u
  bool compress_first = true;

  /// x_c and x_u glued back in their original order.
  std::vector<TokenId> reconstruct() const;
};

/// Uniform integer in [ratio_min, ratio_max], or fixed_ratio when set.
int sample_ratio(const TrainConfig& cfg, std::mt19937_64& rng);

/// Splits at a point drawn uniformly from the middle 30%–70% band and picks
/// the compressed side uniformly. nullopt when the source has < 2 tokens.
std::optional<TrainingExample> slice_example(std::span<const TokenId> source,
                                             std::span<const TokenId> target,
                                             std::mt19937_64& rng);

/// context = x ⊕ <sep>, continuation = y ⊕ <eos>.
std::vector<TokenId> with_separator(std::span<const TokenId> source);
std::vector<TokenId> with_eos(std::span<const TokenId> target);

/// Mean NLL of y given [C(x_c); x_u]. Differentiable w.r.t. params.
Tensor lm_loss(const Compressor& compressor, const TrainingExample& example, int ratio,
               const CompressorParams& params);

struct LmStep {
  double loss = 0.0;
  Gradients grads;
};

/// lm_loss plus its gradients; only memory_slot and adapter receive any.
LmStep lm_step(const Compressor& compressor, const TrainingExample& example, int ratio,
               const CompressorParams& params);

/// −log softmax([s⁺, s⁻]/τ)[0] with s = cosine to the query.
Tensor infonce_loss(const Tensor& query_pooled, const Tensor& positive_pooled,
                    const Tensor& negative_pooled, double temperature = 1.0);

/// Gold-label NLL of `query` with an optional compressed demonstration prefix.
double gold_nll(const Backbone& backbone, const TaskInstance& query, const Tensor& prefix);

struct ContrastivePair {
  bool from_set_b = false;
  std::size_t positive = 0;  // index within the chosen set
  std::size_t negative = 0;
  double gain_positive = 0.0;
  double gain_negative = 0.0;
};

struct MineOutcome {
  double ppl_query = 0.0;
  /// ppl^Q − ppl^D_i for each candidate of set A (and B when consulted).
  std::vector<double> gains_a;
  std::vector<double> gains_b;
  bool consulted_set_b = false;
  std::optional<ContrastivePair> pair;
};

/// PPL-gain mining. Set B is consulted exactly when no candidate of set A
/// has a positive gain. Degenerate sets (argmax == argmin) yield no pair.
/// Candidates are compressed at `ratio`, through `bank` when given.
MineOutcome mine_pair(const Compressor& compressor, const TaskInstance& query,
                      std::span<const DemonstrationRecord> set_a,
                      std::span<const DemonstrationRecord> set_b, const CompressorParams& params,
                      int ratio, DemoBank* bank = nullptr);

/// One query with its two non-crossing candidate sets.
struct ContrastiveInstance {
  TaskInstance query;
  std::vector<DemonstrationRecord> set_a;
  std::vector<DemonstrationRecord> set_b;
};

/// Splits `pool` into two disjoint halves by a seeded shuffle, then draws
/// `per_set` candidates from each half for every query.
std::vector<ContrastiveInstance> build_contrastive_instances(
    std::span<const TaskInstance> queries, std::span<const DemonstrationRecord> pool,
    std::size_t per_set, std::uint64_t seed);

struct StepRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lm_loss = 0.0;
  double ctr_loss = 0.0;
  /// Mean sampled ratio over the accumulated examples.
  double ratio = 0.0;
  std::uint64_t skip_count = 0;
};

struct TrainResult {
  CompressorParams params;  // best checkpoint by validation loss
  double initial_validation_loss = 0.0;
  std::vector<double> validation_losses;  // one per epoch
  std::size_t best_epoch = 0;
  std::vector<StepRecord> steps;
  std::uint64_t total_skips = 0;
  /// Optimizer state captured together with `params`.
  std::uint64_t optimizer_steps = 0;
  std::vector<std::vector<double>> adam_m;
  std::vector<std::vector<double>> adam_v;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Mean lm_loss on deterministic slices at cfg.validation_ratio.
double validation_loss(const Compressor& compressor, std::span<const TaskInstance> data,
                       const TrainConfig& cfg, const CompressorParams& params);

/// Base compression training: slice-and-compress LM objective with sampled
/// ratios. The backbone must be frozen. Throws TrainingDiverged on a
/// non-finite loss.
TrainResult train_phase1(const Compressor& compressor, std::span<const TaskInstance> train,
                         std::span<const TaskInstance> validation, const TrainConfig& cfg,
                         const CompressorParams& init, const StepCallback& on_step = {});

/// Selection augmentation: mined InfoNCE term plus the LM term. Skipped
/// instances contribute no gradient.
TrainResult train_phase2(const Compressor& compressor, std::span<const ContrastiveInstance> train,
                         std::span<const TaskInstance> validation, const TrainConfig& cfg,
                         const CompressorParams& init, const StepCallback& on_step = {});

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct PretrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch = 8;
  std::size_t epochs = 4;
  std::uint64_t seed = 0;
};

/// Plain next-token training of the backbone on `source <sep> target <eos>`
/// sequences. Leaves the backbone frozen. Returns per-epoch mean loss.
std::vector<double> pretrain_backbone(Backbone& backbone, std::span<const TaskInstance> data,
                                      const PretrainConfig& cfg);

/// Versioned checkpoint of CompressorParams + optimizer state + step count.
struct TrainerCheckpoint {
  CompressorParams params;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> adam_m;
  std::vector<std::vector<double>> adam_v;
  std::uint64_t seed = 0;
  Digest backbone_digest{};
};

void save_checkpoint(const std::filesystem::path& path, const TrainerCheckpoint& ckpt);
TrainerCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace uniicl
