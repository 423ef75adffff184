#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "nif/datagen.hpp"
#include "nif/errors.hpp"

using namespace nif;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / ("nif-datagen-" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SamplerConfig config(int max_len, std::uint64_t seed = 1) {
  SamplerConfig c;
  c.max_len = max_len;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Pmf, Examples) {
  EXPECT_NEAR(pmf(NegBinomial{2, 0.45}, 0), 0.2025, 1e-12);
  EXPECT_NEAR(pmf(GeometricShifted{0.5}, 0), 0.5, 1e-12);
  EXPECT_NEAR(pmf(Poisson{1.0}, 0), std::exp(-1.0), 1e-12);
  // C(k+r-1, k) p^r (1-p)^k at k = 3, r = 2: 4 * 0.45^2 * 0.55^3.
  EXPECT_NEAR(pmf(NegBinomial{2, 0.45}, 3), 4 * 0.2025 * std::pow(0.55, 3), 1e-12);
  EXPECT_EQ(pmf(Poisson{2.0}, -1), 0.0);
}

TEST(Pmf, SumsToOne) {
  for (const LengthDistribution& d :
       {LengthDistribution{NegBinomial{2, 0.45}}, LengthDistribution{NegBinomial{5, 0.3}},
        LengthDistribution{GeometricShifted{0.2}}, LengthDistribution{Poisson{3.5}}}) {
    double total = 0;
    for (int k = 0; k < 2000; ++k) total += pmf(d, k);
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(SampleLength, EmpiricalMeans) {
  Rng rng(9);
  for (const LengthDistribution& d : {LengthDistribution{NegBinomial{2, 0.45}}, LengthDistribution{GeometricShifted{0.5}},
                                      LengthDistribution{Poisson{1.5}}}) {
    double sum = 0;
    const int n = 1'000'000;
    for (int i = 0; i < n; ++i) sum += sample_length(d, rng);
    EXPECT_NEAR(sum / n, analytic_mean(d), 0.02 * analytic_mean(d));
  }
  EXPECT_NEAR(analytic_mean(NegBinomial{2, 0.45}), 2.4444444, 1e-6);
}

TEST(SampleLength, DeterministicStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_length(NegBinomial{}, a), sample_length(NegBinomial{}, b));
}

TEST(Distribution, Validation) {
  EXPECT_THROW(validate(Poisson{0.0}), Error);
  EXPECT_THROW(validate(NegBinomial{0, 0.5}), Error);
  EXPECT_THROW(validate(GeometricShifted{1.5}), Error);
  for (const LengthDistribution& d : {LengthDistribution{NegBinomial{3, 0.2}}, LengthDistribution{Poisson{2.5}},
                                      LengthDistribution{GeometricShifted{0.7}}}) {
    EXPECT_EQ(to_json(length_distribution_from_json(to_json(d))), to_json(d));
  }
}

TEST(SampleNumber, SingleDigitDomain) {
  SamplerConfig c = config(1);
  c.neg_prob = 0;
  Rng rng(3);
  std::set<std::string> allowed;
  for (int d = 0; d <= 9; ++d) allowed.insert(std::to_string(d));
  for (int d = 1; d <= 9; ++d) allowed.insert("." + std::to_string(d));
  std::set<std::string> seen;
  for (int i = 0; i < 20000; ++i) {
    const std::string s = sample_number(c, rng);
    EXPECT_TRUE(allowed.count(s)) << s;
    seen.insert(s);
  }
  EXPECT_EQ(seen, allowed);
}

TEST(SampleNumber, RawDrawsRespectBounds) {
  const SamplerConfig c = config(6);
  Rng rng(4);
  for (int i = 0; i < 100000; ++i) {
    const RawNumber r = sample_raw_number(c, rng);
    EXPECT_GT(r.int_len + r.dec_len, 0);
    EXPECT_LE(r.int_len + r.dec_len, c.max_len);
    const std::string s = canonicalize(r.render());
    EXPECT_LE(digit_count(s), c.max_len);
    EXPECT_EQ(detokenize(tokenize(s)).text, s);
  }
}

TEST(SampleNumber, Reproducible) {
  const SamplerConfig c = config(10, 77);
  Rng a(c.seed), b(c.seed);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_number(c, a), sample_number(c, b));
}

TEST(SampleNumber, ExhaustionIsReported) {
  // Lengths are never below 30, so nothing fits max_len = 2.
  SamplerConfig c = config(2);
  c.length_dist = Poisson{60.0};
  Rng rng(1);
  EXPECT_THROW(sample_number(c, rng), SamplerExhausted);
}

TEST(Budget, Rules) {
  EXPECT_EQ(result_budget(Op::kAdd, 10), 11);
  EXPECT_EQ(result_budget(Op::kMul, 10), 20);
  EXPECT_EQ(max_result_tokens(10), 21);
  std::string out;
  EXPECT_TRUE(fits_budget(parse("9.5") + parse(".5"), 2, 1, &out));
  EXPECT_EQ(out, "10");
  EXPECT_FALSE(fits_budget(Rational(1, 3), 20, 20));
  EXPECT_FALSE(fits_budget(parse("123.456"), 5, 10));
}

TEST(SamplePair, ResultsFitBudget) {
  const SamplerConfig c = config(8, 5);
  Rng rng(c.seed);
  for (Op op : {Op::kAdd, Op::kMul}) {
    for (int i = 0; i < 2000; ++i) {
      const auto [a, b] = sample_pair(c, op, rng);
      const std::string r = oracle_decimal(op, a, b);
      EXPECT_LE(digit_count(r), result_budget(op, c.max_len));
      EXPECT_LE(static_cast<int>(r.size()), max_result_tokens(c.max_len));
    }
  }
}

TEST(SampleInversePair, AddAndMul) {
  const SamplerConfig c = config(6, 8);
  Rng rng(c.seed);
  for (int i = 0; i < 2000; ++i) {
    const auto [a, na] = sample_inverse_pair(c, Op::kAdd, rng);
    EXPECT_NE(a, "0");
    EXPECT_EQ(oracle_decimal(Op::kAdd, a, na), "0");
    const auto [m, inv] = sample_inverse_pair(c, Op::kMul, rng);
    EXPECT_EQ(oracle_decimal(Op::kMul, m, inv), "1");
    EXPECT_LE(digit_count(m), c.max_len);
    EXPECT_LE(digit_count(inv), c.max_len);
    EXPECT_NE(m, "3");
  }
}

TEST(SampleTriples, PartialResultsFit) {
  const SamplerConfig c = config(6, 10);
  Rng rng(c.seed);
  for (int i = 0; i < 500; ++i) {
    const NumeralTriple t = sample_associative_triple(c, Op::kMul, rng);
    EXPECT_LE(digit_count(oracle_decimal(Op::kMul, t.a, t.b)), result_budget(Op::kMul, c.max_len));
    const NumeralTriple d = sample_distributive_triple(c, rng);
    const Rational lhs = parse(d.a) * (parse(d.b) + parse(d.c));
    EXPECT_LE(digit_count(to_decimal(lhs)), result_budget(Op::kMul, c.max_len));
  }
}

TEST(Dataset, WriteReadRoundTrip) {
  const fs::path dir = temp_dir();
  const SamplerConfig c = config(10, 123);
  const std::string path = (dir / "three.txt").string();
  write_dataset({3, Split::kTrain, path}, c);
  const Dataset ds = read_dataset(path);
  EXPECT_EQ(ds.numerals.size(), 3u);
  EXPECT_EQ(ds.header.at("n"), 3);
  EXPECT_EQ(ds.header.at("split"), "train");
  EXPECT_EQ(sampler_config_from_json(ds.header).max_len, 10);
  const std::string text = slurp(path);
  EXPECT_EQ(text.rfind(kDatasetMagic, 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
}

TEST(Dataset, Reproducible) {
  const fs::path dir = temp_dir();
  const SamplerConfig c = config(10, 5);
  write_dataset({500, Split::kTrain, (dir / "a.txt").string()}, c);
  write_dataset({500, Split::kTrain, (dir / "b.txt").string()}, c);
  EXPECT_EQ(slurp(dir / "a.txt"), slurp(dir / "b.txt"));
}

TEST(Dataset, SplitsAreIndependentStreams) {
  const fs::path dir = temp_dir();
  const SamplerConfig c = config(20, 5);
  EXPECT_NE(split_seed(5, Split::kTrain), split_seed(5, Split::kEval));
  write_dataset({100000, Split::kTrain, (dir / "train.txt").string()}, c);
  write_dataset({100000, Split::kEval, (dir / "eval.txt").string()}, c);
  const auto train = read_dataset((dir / "train.txt").string()).numerals;
  const auto eval = read_dataset((dir / "eval.txt").string()).numerals;
  // Line-by-line collisions; short numerals collide by value, not by stream.
  std::size_t same = 0;
  for (std::size_t i = 0; i < train.size(); ++i) same += train[i] == eval[i];
  EXPECT_LE(same, train.size() / 100);
}

TEST(Dataset, RejectsBadFiles) {
  const fs::path dir = temp_dir();
  EXPECT_THROW(read_dataset((dir / "missing.txt").string()), IoError);
  {
    std::ofstream out(dir / "noheader.txt");
    out << "1.5\n";
  }
  EXPECT_THROW(read_dataset((dir / "noheader.txt").string()), IoError);
  {
    std::ofstream out(dir / "noncanon.txt");
    out << kDatasetMagic << "{}\n007\n";
  }
  EXPECT_THROW(read_dataset((dir / "noncanon.txt").string()), IoError);
}

TEST(Tuples, RoundTrip) {
  const fs::path dir = temp_dir();
  const std::vector<std::vector<std::string>> rows{{"1.5", "2"}, {"-.25", "4"}};
  write_tuples((dir / "pairs.txt").string(), {{"kind", "pairs"}}, rows);
  nlohmann::json header;
  EXPECT_EQ(read_tuples((dir / "pairs.txt").string(), &header), rows);
  EXPECT_EQ(header.at("kind"), "pairs");
}
