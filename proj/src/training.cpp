#include "nif/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace nif {

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::kAddGroup:
      return "add-group";
    case Regime::kMulGroup:
      return "mul-group";
    case Regime::kField:
      return "field";
  }
  return "?";
}

Regime parse_regime(std::string_view name) {
  if (name == "add-group") return Regime::kAddGroup;
  if (name == "mul-group") return Regime::kMulGroup;
  if (name == "field") return Regime::kField;
  throw Error("unknown regime: " + std::string(name));
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 2) throw Error("batch_size must be at least 2");
  if (epochs < 1) throw Error("epochs must be at least 1");
  if (!(schedule.base_scale > 0) || schedule.warmup_steps < 1) throw Error("invalid learning-rate schedule");
  if (weights.rec < 0 || weights.iso_add < 0 || weights.iso_mul < 0 || weights.ord < 0) {
    throw Error("loss weights must be non-negative");
  }
  if (!(approx_fraction >= 0 && approx_fraction <= 1)) throw Error("approx_fraction must be in [0, 1]");
  if (eval_samples < 0 || steps_per_epoch < 0) throw Error("eval_samples and steps_per_epoch must be non-negative");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"regime", regime_name(c.regime)},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"train_path", c.train_path},
          {"eval_path", c.eval_path},
          {"model", to_json(c.model)},
          {"lr_base_scale", c.schedule.base_scale},
          {"lr_warmup_steps", c.schedule.warmup_steps},
          {"w_rec", c.weights.rec},
          {"w_iso_add", c.weights.iso_add},
          {"w_iso_mul", c.weights.iso_mul},
          {"w_ord", c.weights.ord},
          {"stop_target_gradient", c.stop_target_gradient},
          {"order_in_groups", c.order_in_groups},
          {"approx_fraction", c.approx_fraction},
          {"eval_samples", c.eval_samples},
          {"steps_per_epoch", c.steps_per_epoch}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.regime = parse_regime(j.at("regime").get<std::string>());
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.train_path = j.at("train_path").get<std::string>();
  c.eval_path = j.at("eval_path").get<std::string>();
  c.model = model_config_from_json(j.at("model"));
  c.schedule.base_scale = j.at("lr_base_scale").get<double>();
  c.schedule.warmup_steps = j.at("lr_warmup_steps").get<std::int64_t>();
  c.weights = {j.at("w_rec").get<double>(), j.at("w_iso_add").get<double>(), j.at("w_iso_mul").get<double>(),
               j.at("w_ord").get<double>()};
  c.stop_target_gradient = j.at("stop_target_gradient").get<bool>();
  c.order_in_groups = j.at("order_in_groups").get<bool>();
  c.approx_fraction = j.at("approx_fraction").get<double>();
  c.eval_samples = j.at("eval_samples").get<int>();
  c.steps_per_epoch = j.at("steps_per_epoch").get<int>();
  return c;
}

bool op_enabled(Regime r, Op op) {
  if (r == Regime::kField) return true;
  return (r == Regime::kAddGroup) == (op == Op::kAdd);
}

bool order_enabled(const TrainConfig& c) { return c.regime == Regime::kField || c.order_in_groups; }

namespace {

template <typename T>
using VarT = dc::BasicVar<T>;

std::vector<TokenSequence> tokenize_all(std::span<const std::string> numerals) {
  std::vector<TokenSequence> out;
  out.reserve(numerals.size());
  for (const auto& s : numerals) out.push_back(tokenize(s));
  return out;
}

// Teacher-forced cross-entropy; optionally reports argmax token accuracy.
// Reconstruction targets must fit the digit budget the model was sized for.
void require_within(std::span<const std::string> numerals, int max_len) {
  for (const auto& s : numerals) {
    if (digit_count(s) > max_len) {
      throw SequenceTooLong("numeral " + s + " exceeds max_len " + std::to_string(max_len));
    }
  }
}

template <typename T>
VarT<T> rec_term(BasicGraph<T>& g, const BasicModel<T>& model, VarT<T> h, const std::vector<TokenSequence>& targets,
                 double* token_accuracy) {
  VarT<T> logits = model.decode_logits(g, h, targets);
  std::vector<int> flat;
  for (const auto& t : targets) flat.insert(flat.end(), t.begin(), t.end());
  if (token_accuracy) {
    const auto& lv = logits.value();
    std::size_t hits = 0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
      auto row = lv.row(r);
      if (std::max_element(row.begin(), row.end()) - row.begin() == flat[r]) ++hits;
    }
    *token_accuracy = static_cast<double>(hits) / static_cast<double>(flat.size());
  }
  return dc::cross_entropy(logits, flat);
}

std::vector<std::string> oracle_results(Op op, std::span<const NumeralPair> pairs) {
  std::vector<std::string> out;
  out.reserve(pairs.size());
  for (const auto& [a, b] : pairs) out.push_back(oracle_decimal(op, a, b));
  return out;
}

template <typename T>
VarT<T> target_embeddings(BasicGraph<T>& g, const BasicModel<T>& model, const std::vector<std::string>& results,
                          bool stop_gradient) {
  const auto seqs = tokenize_all(results);
  if (!stop_gradient) return model.encode(g, seqs);
  BasicGraph<T> frozen(false);
  return g.constant(model.encode(frozen, seqs).value());
}

std::vector<int> order_labels(std::span<const NumeralPair> pairs) {
  std::vector<int> labels;
  labels.reserve(pairs.size());
  for (const auto& [a, b] : pairs) labels.push_back(order_class(oracle_cmp(parse(a), parse(b))));
  return labels;
}

// Squared-indicator disagreement between 1(a<b) and 1(argmax == Lt).
template <typename T>
double indicator_rate(const dc::BasicTensor<T>& logits, const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    int best = 0;
    for (int c = 1; c < 3; ++c) {
      if (row[c] > row[best]) best = c;
    }
    const int truth = labels[r] == 0 ? 1 : 0;
    const int pred = best == 0 ? 1 : 0;
    total += (truth - pred) * (truth - pred);
  }
  return total / static_cast<double>(labels.size());
}

// Row lookup for numerals encoded once per step.
class EncodeIndex {
 public:
  int add(const std::string& s) {
    auto [it, inserted] = rows_.emplace(s, static_cast<int>(numerals_.size()));
    if (inserted) numerals_.push_back(s);
    return it->second;
  }
  const std::vector<std::string>& numerals() const { return numerals_; }

 private:
  std::map<std::string, int> rows_;
  std::vector<std::string> numerals_;
};

}  // namespace

template <typename T>
dc::BasicVar<T> loss_rec(BasicGraph<T>& g, const BasicModel<T>& model, std::span<const std::string> numerals) {
  require_within(numerals, model.config().max_len);
  const auto seqs = tokenize_all(numerals);
  return rec_term(g, model, model.encode(g, seqs), seqs, nullptr);
}

template <typename T>
dc::BasicVar<T> loss_iso(BasicGraph<T>& g, const BasicModel<T>& model, Op op, std::span<const NumeralPair> pairs,
                         bool stop_target_gradient) {
  std::vector<std::string> lhs, rhs;
  for (const auto& [a, b] : pairs) {
    lhs.push_back(a);
    rhs.push_back(b);
  }
  VarT<T> h1 = model.encode(g, tokenize_all(lhs));
  VarT<T> h2 = model.encode(g, tokenize_all(rhs));
  VarT<T> target = target_embeddings(g, model, oracle_results(op, pairs), stop_target_gradient);
  return dc::mse(model.ano(g, op, h1, h2), target);
}

template <typename T>
dc::BasicVar<T> loss_ord(BasicGraph<T>& g, const BasicModel<T>& model, std::span<const NumeralPair> pairs,
                         OrderLoss* indicator) {
  std::vector<std::string> lhs, rhs;
  for (const auto& [a, b] : pairs) {
    lhs.push_back(a);
    rhs.push_back(b);
  }
  VarT<T> logits = model.order_logits(g, model.encode(g, tokenize_all(lhs)), model.encode(g, tokenize_all(rhs)));
  const auto labels = order_labels(pairs);
  if (indicator) indicator->indicator = indicator_rate(logits.value(), labels);
  return dc::cross_entropy(logits, labels);
}

template <typename T>
LossTerms<T> loss_total(BasicGraph<T>& g, const BasicModel<T>& model, const Batch& batch, const TrainConfig& cfg) {
  LossTerms<T> terms;
  EncodeIndex index;
  std::vector<int> rec_rows;
  for (const auto& s : batch.numerals) rec_rows.push_back(index.add(s));
  const bool use_order = order_enabled(cfg) && !batch.order_pairs.empty();
  auto pair_rows = [&](std::span<const NumeralPair> pairs, std::vector<int>& left, std::vector<int>& right) {
    for (const auto& [a, b] : pairs) {
      left.push_back(index.add(a));
      right.push_back(index.add(b));
    }
  };
  std::vector<int> add_l, add_r, mul_l, mul_r, ord_l, ord_r;
  const bool use_add = op_enabled(cfg.regime, Op::kAdd) && !batch.add_pairs.empty();
  const bool use_mul = op_enabled(cfg.regime, Op::kMul) && !batch.mul_pairs.empty();
  if (use_add) pair_rows(batch.add_pairs, add_l, add_r);
  if (use_mul) pair_rows(batch.mul_pairs, mul_l, mul_r);
  if (use_order) pair_rows(batch.order_pairs, ord_l, ord_r);
  if (index.numerals().empty()) throw Error("empty training batch");

  VarT<T> h = model.encode(g, tokenize_all(index.numerals()));
  std::vector<std::pair<VarT<T>, double>> weighted;

  if (!rec_rows.empty()) {
    require_within(batch.numerals, model.config().max_len);
    terms.rec = rec_term(g, model, dc::gather_rows(h, rec_rows), tokenize_all(batch.numerals), &terms.rec_token_accuracy);
    weighted.emplace_back(terms.rec, cfg.weights.rec);
  }
  auto iso = [&](Op op, const std::vector<int>& left, const std::vector<int>& right) {
    VarT<T> target = target_embeddings(g, model, oracle_results(op, batch.pairs(op)), cfg.stop_target_gradient);
    return dc::mse(model.ano(g, op, dc::gather_rows(h, left), dc::gather_rows(h, right)), target);
  };
  if (use_add) {
    terms.iso_add = iso(Op::kAdd, add_l, add_r);
    weighted.emplace_back(terms.iso_add, cfg.weights.iso_add);
  }
  if (use_mul) {
    terms.iso_mul = iso(Op::kMul, mul_l, mul_r);
    weighted.emplace_back(terms.iso_mul, cfg.weights.iso_mul);
  }
  if (use_order) {
    VarT<T> logits = model.order_logits(g, dc::gather_rows(h, ord_l), dc::gather_rows(h, ord_r));
    const auto labels = order_labels(batch.order_pairs);
    terms.ord_indicator = indicator_rate(logits.value(), labels);
    terms.ord = dc::cross_entropy(logits, labels);
    weighted.emplace_back(terms.ord, cfg.weights.ord);
  }
  for (const auto& [term, w] : weighted) {
    VarT<T> scaled = w == 1.0 ? term : dc::scale(term, static_cast<T>(w));
    terms.total = terms.total.valid() ? dc::add(terms.total, scaled) : scaled;
  }
  return terms;
}

std::vector<NumeralPair> pair_within(std::span<const std::string> numerals, Op op, int max_len, Rng& rng) {
  std::vector<std::size_t> perm(numerals.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const int budget = result_budget(op, max_len);
  std::vector<NumeralPair> out;
  for (std::size_t i = 0; i + 1 < perm.size(); i += 2) {
    const std::string& a = numerals[perm[i]];
    const std::string& b = numerals[perm[i + 1]];
    if (fits_budget(oracle_apply(op, parse(a), parse(b)), budget, max_len)) out.emplace_back(a, b);
  }
  return out;
}

PoolBatchSource::PoolBatchSource(std::vector<std::string> pool, const TrainConfig& cfg)
    : pool_(std::move(pool)), cfg_(cfg) {
  if (pool_.empty()) throw Error("empty training pool");
  for (const auto& s : pool_) {
    if (digit_count(s) > cfg_.model.max_len) {
      throw SequenceTooLong("training numeral " + s + " exceeds max_len " + std::to_string(cfg_.model.max_len));
    }
  }
  order_.resize(pool_.size());
  std::iota(order_.begin(), order_.end(), 0);
  cursor_ = order_.size();  // shuffle on first use
}

std::size_t PoolBatchSource::steps_per_epoch() const {
  if (cfg_.steps_per_epoch > 0) return static_cast<std::size_t>(cfg_.steps_per_epoch);
  const std::size_t b = static_cast<std::size_t>(cfg_.batch_size);
  return (pool_.size() + b - 1) / b;
}

Batch PoolBatchSource::next(Rng& rng) {
  Batch batch;
  const std::size_t b = std::min<std::size_t>(cfg_.batch_size, pool_.size());
  while (batch.numerals.size() < b) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    batch.numerals.push_back(pool_[order_[cursor_++]]);
  }
  const int max_len = cfg_.model.max_len;
  if (op_enabled(cfg_.regime, Op::kAdd)) batch.add_pairs = pair_within(batch.numerals, Op::kAdd, max_len, rng);
  if (op_enabled(cfg_.regime, Op::kMul)) batch.mul_pairs = pair_within(batch.numerals, Op::kMul, max_len, rng);
  if (order_enabled(cfg_)) {
    std::vector<std::size_t> perm(batch.numerals.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::bernoulli_distribution same(cfg_.approx_fraction);
    for (std::size_t i = 0; i + 1 < perm.size(); i += 2) {
      const std::string& a = batch.numerals[perm[i]];
      batch.order_pairs.emplace_back(a, same(rng) ? a : batch.numerals[perm[i + 1]]);
    }
  }
  return batch;
}

nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"steps", m.steps},
          {"loss_rec", m.rec},
          {"loss_iso_add", m.iso_add},
          {"loss_iso_mul", m.iso_mul},
          {"loss_ord", m.ord},
          {"loss_total", m.total},
          {"ord_indicator", m.ord_indicator},
          {"train_token_accuracy", m.train_token_accuracy},
          {"eval_token_accuracy", m.eval_token_accuracy},
          {"eval_exact_match", m.eval_exact_match},
          {"seconds", m.seconds}};
}

ReconstructionScore reconstruction_score(const Model& model, std::span<const std::string> numerals,
                                         std::size_t batch_size) {
  ReconstructionScore score;
  if (numerals.empty()) return score;
  std::size_t tokens = 0, hits = 0, exact = 0;
  for (std::size_t start = 0; start < numerals.size(); start += batch_size) {
    const auto chunk = numerals.subspan(start, std::min(batch_size, numerals.size() - start));
    const auto seqs = tokenize_all(chunk);
    std::vector<int> lengths;
    for (const auto& s : seqs) lengths.push_back(static_cast<int>(s.size()));
    const auto decoded = model.decode_greedy(model.embed(seqs), lengths);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      std::size_t match = 0;
      for (std::size_t t = 0; t < seqs[i].size(); ++t) match += decoded[i][t] == seqs[i][t];
      tokens += seqs[i].size();
      hits += match;
      exact += match == seqs[i].size();
    }
  }
  score.token_accuracy = static_cast<double>(hits) / static_cast<double>(tokens);
  score.exact_match = static_cast<double>(exact) / static_cast<double>(numerals.size());
  return score;
}

TrainResult train(const TrainConfig& cfg, BatchSource& source, std::span<const std::string> eval_pool,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  TrainResult result{Model(cfg.model, cfg.seed), {}, 0};
  Model& model = result.model;
  Rng rng(split_seed(cfg.seed, Split::kEval) ^ 0x5851F42D4C957F2DULL);
  dc::AdamState adam;
  const auto params = model.parameters();
  const auto eval_subset = eval_pool.first(std::min<std::size_t>(eval_pool.size(), cfg.eval_samples));
  const std::size_t steps = source.steps_per_epoch();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    for (std::size_t s = 0; s < steps; ++s) {
      const Batch batch = source.next(rng);
      model.zero_grad();
      Graph g(true);
      const LossTerms<float> terms = loss_total(g, model, batch, cfg);
      const double total = terms.total.value()[0];
      if (!std::isfinite(total)) {
        throw TrainingDiverged("non-finite loss at step " + std::to_string(result.steps + 1));
      }
      g.tape.backward(terms.total);
      ++result.steps;
      dc::adam_step(params, adam, dc::lr_at(cfg.schedule, result.steps));
      auto val = [](const dc::Var& v) { return v.valid() ? static_cast<double>(v.value()[0]) : 0.0; };
      m.rec += val(terms.rec);
      m.iso_add += val(terms.iso_add);
      m.iso_mul += val(terms.iso_mul);
      m.ord += val(terms.ord);
      m.total += total;
      m.ord_indicator += terms.ord_indicator;
      m.train_token_accuracy += terms.rec_token_accuracy;
    }
    const double n = static_cast<double>(steps);
    m.rec /= n;
    m.iso_add /= n;
    m.iso_mul /= n;
    m.ord /= n;
    m.total /= n;
    m.ord_indicator /= n;
    m.train_token_accuracy /= n;
    m.steps = result.steps;
    const ReconstructionScore eval = reconstruction_score(model, eval_subset);
    m.eval_token_accuracy = eval.token_accuracy;
    m.eval_exact_match = eval.exact_match;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(model, m, result.steps);
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch) {
  const Dataset train_set = read_dataset(cfg.train_path);
  const Dataset eval_set = read_dataset(cfg.eval_path);
  PoolBatchSource source(train_set.numerals, cfg);
  return train(cfg, source, eval_set.numerals, on_epoch);
}

void configure_allocator() {
#if defined(__GLIBC__)
  // A step allocates and frees hundreds of MB of activations; without this
  // glibc unmaps and refaults them every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

nlohmann::json checkpoint_meta(const TrainConfig& cfg, std::int64_t step, const nlohmann::json& sampler) {
  return {{"regime", regime_name(cfg.regime)}, {"step", step}, {"seed", cfg.seed}, {"sampler", sampler},
          {"train", to_json(cfg)}};
}

#define NIF_INSTANTIATE_LOSSES(T)                                                                           \
  template dc::BasicVar<T> loss_rec(BasicGraph<T>&, const BasicModel<T>&, std::span<const std::string>);    \
  template dc::BasicVar<T> loss_iso(BasicGraph<T>&, const BasicModel<T>&, Op, std::span<const NumeralPair>, \
                                    bool);                                                                  \
  template dc::BasicVar<T> loss_ord(BasicGraph<T>&, const BasicModel<T>&, std::span<const NumeralPair>,     \
                                    OrderLoss*);                                                            \
  template LossTerms<T> loss_total(BasicGraph<T>&, const BasicModel<T>&, const Batch&, const TrainConfig&);

NIF_INSTANTIATE_LOSSES(float)
NIF_INSTANTIATE_LOSSES(double)

}  // namespace nif
