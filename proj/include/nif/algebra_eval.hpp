#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nif/datagen.hpp"
#include "nif/model.hpp"

namespace nif {

enum class TestType { kIdentity, kClosure, kInvertibility, kAssociative, kDistributive, kOrder };

struct TestKind {
  TestType type = TestType::kClosure;
  Op op = Op::kAdd;  // ignored by Distributive and Order

  bool has_op() const { return type != TestType::kDistributive && type != TestType::kOrder; }
  // "closure-add", "identity-mul", "distributive", "order", ...
  std::string name() const;

  friend bool operator==(const TestKind& a, const TestKind& b) {
    return a.type == b.type && (!a.has_op() || a.op == b.op);
  }
};

TestKind parse_test_kind(std::string_view name);

// Identity, closure, invertibility, associative for add then mul, then
// distributive and order.
std::vector<TestKind> all_tests();

struct EvalConfig {
  // Operand sampler; its seed is replaced by the per-run seed.
  SamplerConfig sampler;
  int n = 1000;
  std::size_t batch_size = 256;
};

struct EvalResult {
  TestKind test;
  int n = 0;
  double accuracy = 0;
  double exact_match = 0;
  double total_loss = 0;
  // Order only: among sampled triples predicted a < b and b < c, the
  // fraction also predicted a < c. Empty if no triple qualifies.
  std::optional<double> transitivity;
};

struct EvalReport {
  TestKind test;
  int n = 0;
  int seeds = 0;
  double accuracy_mean = 0, accuracy_std = 0;
  double exact_mean = 0, exact_std = 0;
  double loss_mean = 0, loss_std = 0;
  std::optional<double> transitivity_mean;
};

/// Fraction of positions where the tokens agree.
double per_digit_accuracy(std::span<const Token> decoded, std::span<const Token> truth);

EvalResult run_identity(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed);
EvalResult run_closure(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed);
EvalResult run_invertibility(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed);
EvalResult run_associative(const Model& model, Op op, const EvalConfig& cfg, std::uint64_t seed);
EvalResult run_distributive(const Model& model, const EvalConfig& cfg, std::uint64_t seed);
EvalResult run_order(const Model& model, const EvalConfig& cfg, std::uint64_t seed);

EvalResult run_test(const Model& model, const TestKind& test, const EvalConfig& cfg, std::uint64_t seed);

/// Every requested test once per seed; mean and sample standard deviation.
std::vector<EvalReport> run_all(const Model& model, std::span<const TestKind> tests, const EvalConfig& cfg,
                                std::span<const std::uint64_t> seeds);

EvalReport aggregate(std::span<const EvalResult> runs);

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
nlohmann::json reports_to_json(std::span<const EvalReport> reports);
std::vector<EvalReport> reports_from_json(const nlohmann::json& j);

// Percentages as "mean ± std", one row per test.
std::string format_table(std::span<const EvalReport> reports);

}  // namespace nif
