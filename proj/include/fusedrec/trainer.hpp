#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fusedrec/config.hpp"
#include "fusedrec/corpus.hpp"
#include "fusedrec/model.hpp"
#include "fusedrec/sampler.hpp"

namespace fusedrec {

struct AdamState {
  ModelParams m;
  ModelParams v;
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  Rng rng;
  AdamState moments;
  double running_loss = 0.0;
  double best_ndcg10 = -1.0;
  std::size_t best_epoch = 0;
};

TrainState initial_state(const ModelParams& params, std::uint64_t seed);

// One training sequence: inputs[t] predicts targets[t].
struct SequenceExample {
  std::vector<ItemIndex> inputs;
  std::vector<ItemIndex> targets;
  std::uint64_t dropout_seed = 0;
  std::vector<std::vector<ItemIndex>> position_negatives;  // per-position mode only
};

struct Batch {
  std::vector<SequenceExample> sequences;
  std::vector<ItemIndex> shared_negatives;
};

// Splits a training history into next-item pairs over its most recent
// max_len transitions. Histories shorter than 2 yield no pairs.
SequenceExample make_example(std::span<const ItemIndex> history, std::size_t max_len);

// -log softmax of the positive logit against the negatives, cosine logits over
// temperature. Negatives whose id equals the positive are masked out.
double sampled_softmax_loss(const RowVector& h, ItemIndex positive, const NegativeBatch& negatives,
                            const FusedItemSpace& space, double temperature);

// Mean over sequences of the per-sequence mean position loss. When `grad` is
// non-null the gradient of that mean is accumulated into it. The result is
// independent of `workers`.
double compute_batch(const ModelParams& params, const Batch& batch, bool training, std::size_t workers,
                     ModelParams* grad);

// Decoupled-weight-decay Adam step over every non-frozen tensor.
void adamw_step(ModelParams& params, const ModelParams& grad, AdamState& moments, std::size_t step,
                const TrainConfig& cfg);

// Shuffles users from state.rng, one optimizer step per batch. Returns the
// mean per-sequence loss.
double train_epoch(const SplitDataset& data, ModelParams& params, TrainState& state, const TrainConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> hr10;
  std::optional<double> ndcg10;
  std::optional<double> mrr;
  double wall_s = 0.0;

  std::string to_json() const;
};

struct FitResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::vector<EpochLog> log;
  ModelParams params;
};

struct FitOptions {
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const EpochLog&)> on_epoch;
  bool quiet = false;
};

// Trains to cfg.epochs, writing best.ckpt (by NDCG@10), last.ckpt and
// train_log.jsonl into out_dir.
FitResult fit(const SplitDataset& data, std::shared_ptr<const Matrix> text, const TrainConfig& cfg,
              const std::filesystem::path& out_dir, const FitOptions& options = {});

}  // namespace fusedrec
