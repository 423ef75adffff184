#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "nif/numerals.hpp"

namespace nif {

using Rng = std::mt19937_64;

struct Poisson {
  double lambda = 1.0;
};
// Failures before the r-th success, success probability p.
struct NegBinomial {
  int r = 2;
  double p = 0.45;
};
// Geometric on {1,2,...} shifted down by one so that zero lengths occur.
struct GeometricShifted {
  double p = 0.5;
};

using LengthDistribution = std::variant<Poisson, NegBinomial, GeometricShifted>;

double pmf(const LengthDistribution& d, int k);
double analytic_mean(const LengthDistribution& d);
int sample_length(const LengthDistribution& d, Rng& rng);
void validate(const LengthDistribution& d);

nlohmann::json to_json(const LengthDistribution& d);
LengthDistribution length_distribution_from_json(const nlohmann::json& j);

struct SamplerConfig {
  LengthDistribution length_dist = NegBinomial{};
  int max_len = 20;  // cap on total digits of a sampled numeral
  double neg_prob = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SamplerConfig& cfg);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

// Pre-canonicalization draw: lengths and digits before zero stripping.
struct RawNumber {
  int int_len = 0;
  int dec_len = 0;
  bool negative = false;
  std::string int_digits;
  std::string dec_digits;

  std::string render() const;
};

inline constexpr int kMaxSampleAttempts = 10'000;

RawNumber sample_raw_number(const SamplerConfig& cfg, Rng& rng);
std::string sample_number(const SamplerConfig& cfg, Rng& rng);

/// Digit budget for the result of `op` on operands drawn with `max_len`:
/// sums get one carry digit, products the full 2*max_len.
int result_budget(Op op, int max_len);

/// Longest token sequence the decoder accepts for a given max_len.
int max_result_tokens(int max_len);

/// True when `value` renders as a terminating decimal within the digit budget
/// and token limit. On success `out` holds the canonical rendering.
bool fits_budget(const Rational& value, int digit_budget, int max_len, std::string* out = nullptr);

using NumeralPair = std::pair<std::string, std::string>;

NumeralPair sample_pair(const SamplerConfig& cfg, Op op, Rng& rng);
NumeralPair sample_inverse_pair(const SamplerConfig& cfg, Op op, Rng& rng);

struct NumeralTriple {
  std::string a, b, c;
};

// Triples whose two bracketings have every partial result within budget.
NumeralTriple sample_associative_triple(const SamplerConfig& cfg, Op op, Rng& rng);
// Triples with a*(b+c), a*b, a*c and a*b + a*c all within budget.
NumeralTriple sample_distributive_triple(const SamplerConfig& cfg, Rng& rng);

enum class Split { kTrain, kEval };

struct DatasetSpec {
  std::size_t n_samples = 0;
  Split split = Split::kTrain;
  std::string path;
};

/// Seed actually used for a split: the configured seed for train, a mixed
/// derivative of it for eval so the two streams are independent.
std::uint64_t split_seed(std::uint64_t seed, Split split);

inline constexpr const char* kDatasetMagic = "# nif-dataset v1 ";

void write_dataset(const DatasetSpec& spec, const SamplerConfig& cfg);

struct Dataset {
  nlohmann::json header;
  std::vector<std::string> numerals;
};

Dataset read_dataset(const std::string& path);

/// Tab-separated tuple files (pairs/triples) with the same header line.
void write_tuples(const std::string& path, const nlohmann::json& header,
                  const std::vector<std::vector<std::string>>& rows);
std::vector<std::vector<std::string>> read_tuples(const std::string& path, nlohmann::json* header = nullptr);

}  // namespace nif
