#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nif/datagen.hpp"
#include "nif/diffcore/optim.hpp"
#include "nif/model.hpp"

namespace nif {

enum class Regime { kAddGroup, kMulGroup, kField };

const char* regime_name(Regime r);
Regime parse_regime(std::string_view name);

struct LossWeights {
  double rec = 1.0;
  double iso_add = 1.0;
  double iso_mul = 1.0;
  double ord = 1.0;
};

struct TrainConfig {
  Regime regime = Regime::kField;
  int batch_size = 512;
  int epochs = 20;
  std::uint64_t seed = 0;
  std::string train_path;
  std::string eval_path;
  ModelConfig model;
  dc::LrSchedule schedule;
  LossWeights weights;
  // Treat encode(a op b) as a constant inside the iso loss.
  bool stop_target_gradient = true;
  // Train the order head in the group regimes as well (Field always does).
  bool order_in_groups = false;
  // Share of order pairs that compare a numeral with itself (label Approx).
  double approx_fraction = 0.1;
  // Eval numerals decoded greedily at the end of every epoch.
  int eval_samples = 2000;
  // 0: one pass over the training pool per epoch.
  int steps_per_epoch = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

bool op_enabled(Regime r, Op op);
bool order_enabled(const TrainConfig& c);

// Everything one optimization step looks at.
struct Batch {
  std::vector<std::string> numerals;  // reconstruction targets
  std::vector<NumeralPair> add_pairs;
  std::vector<NumeralPair> mul_pairs;
  std::vector<NumeralPair> order_pairs;

  const std::vector<NumeralPair>& pairs(Op op) const { return op == Op::kAdd ? add_pairs : mul_pairs; }
};

// Recorded loss terms; unused terms stay invalid.
template <typename T>
struct LossTerms {
  dc::BasicVar<T> total;
  dc::BasicVar<T> rec;
  dc::BasicVar<T> iso_add;
  dc::BasicVar<T> iso_mul;
  dc::BasicVar<T> ord;
  double ord_indicator = 0.0;  // mean of [1(a<b) - 1(h_a <w h_b)]^2
  double rec_token_accuracy = 0.0;
};

/// Mean token cross-entropy of decoding encode(a) back into a.
template <typename T>
dc::BasicVar<T> loss_rec(BasicGraph<T>& g, const BasicModel<T>& model, std::span<const std::string> numerals);

/// Mean over pairs and coordinates of (encode(a op b) - ano(encode(a), encode(b)))^2.
template <typename T>
dc::BasicVar<T> loss_iso(BasicGraph<T>& g, const BasicModel<T>& model, Op op, std::span<const NumeralPair> pairs,
                         bool stop_target_gradient = true);

struct OrderLoss {
  double indicator = 0.0;
};

/// Three-way cross-entropy of the order head against oracle labels
/// (Lt, Gt, Eq -> Approx). `indicator` receives the non-differentiable
/// squared-indicator disagreement rate.
template <typename T>
dc::BasicVar<T> loss_ord(BasicGraph<T>& g, const BasicModel<T>& model, std::span<const NumeralPair> pairs,
                         OrderLoss* indicator = nullptr);

/// Weighted sum of the regime's enabled terms. Numerals shared between the
/// reconstruction batch and pair operands are encoded once.
template <typename T>
LossTerms<T> loss_total(BasicGraph<T>& g, const BasicModel<T>& model, const Batch& batch, const TrainConfig& cfg);

// Produces the batches of one training run.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Batch next(Rng& rng) = 0;
  virtual std::size_t steps_per_epoch() const = 0;
};

/// Shuffles a numeral pool each epoch and pairs numerals within each batch;
/// pairs whose oracle result exceeds the digit budget are dropped.
class PoolBatchSource : public BatchSource {
 public:
  PoolBatchSource(std::vector<std::string> pool, const TrainConfig& cfg);
  Batch next(Rng& rng) override;
  std::size_t steps_per_epoch() const override;

 private:
  std::vector<std::string> pool_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  TrainConfig cfg_;
};

// Returns the same batch at every step.
class FixedBatchSource : public BatchSource {
 public:
  explicit FixedBatchSource(Batch batch, std::size_t steps_per_epoch = 1)
      : batch_(std::move(batch)), steps_(steps_per_epoch) {}
  Batch next(Rng&) override { return batch_; }
  std::size_t steps_per_epoch() const override { return steps_; }

 private:
  Batch batch_;
  std::size_t steps_;
};

/// Pairs (numerals[i], numerals[j]) from a random pairing whose `op` result
/// fits the digit budget for `max_len`.
std::vector<NumeralPair> pair_within(std::span<const std::string> numerals, Op op, int max_len, Rng& rng);

struct EpochMetrics {
  int epoch = 0;
  std::int64_t steps = 0;
  double rec = 0, iso_add = 0, iso_mul = 0, ord = 0, total = 0;
  double ord_indicator = 0;
  double train_token_accuracy = 0;
  double eval_token_accuracy = 0;
  double eval_exact_match = 0;
  double seconds = 0;
};

nlohmann::json to_json(const EpochMetrics& m);

struct ReconstructionScore {
  double token_accuracy = 0;
  double exact_match = 0;
};

/// Greedy decode of encode(x) at len(x) for every numeral.
ReconstructionScore reconstruction_score(const Model& model, std::span<const std::string> numerals,
                                         std::size_t batch_size = 256);

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> metrics;
  std::int64_t steps = 0;
};

using EpochCallback = std::function<void(const Model&, const EpochMetrics&, std::int64_t step)>;

/// Adam with the warmup/inverse-sqrt schedule over batches from `source`.
/// Deterministic for a fixed config and source. Throws TrainingDiverged on a
/// non-finite loss.
TrainResult train(const TrainConfig& cfg, BatchSource& source, std::span<const std::string> eval_pool,
                  const EpochCallback& on_epoch = {});

/// Reads cfg.train_path / cfg.eval_path and trains on them.
TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Keeps freed training buffers in the heap instead of returning them to the
/// OS every step (glibc only; a no-op elsewhere). Call once at startup.
void configure_allocator();

nlohmann::json checkpoint_meta(const TrainConfig& cfg, std::int64_t step, const nlohmann::json& sampler);

}  // namespace nif
