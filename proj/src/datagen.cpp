#include "nif/datagen.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nif {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

double pmf(const LengthDistribution& d, int k) {
  if (k < 0) return 0.0;
  return std::visit(
      Overloaded{
          [k](const Poisson& p) { return std::exp(k * std::log(p.lambda) - p.lambda - std::lgamma(k + 1.0)); },
          [k](const NegBinomial& nb) {
            const double log_choose = std::lgamma(k + nb.r) - std::lgamma(k + 1.0) - std::lgamma(nb.r);
            return std::exp(log_choose + nb.r * std::log(nb.p) + k * std::log1p(-nb.p));
          },
          [k](const GeometricShifted& g) { return g.p * std::pow(1.0 - g.p, k); },
      },
      d);
}

double analytic_mean(const LengthDistribution& d) {
  return std::visit(Overloaded{
                        [](const Poisson& p) { return p.lambda; },
                        [](const NegBinomial& nb) { return nb.r * (1.0 - nb.p) / nb.p; },
                        [](const GeometricShifted& g) { return (1.0 - g.p) / g.p; },
                    },
                    d);
}

int sample_length(const LengthDistribution& d, Rng& rng) {
  return std::visit(Overloaded{
                        [&rng](const Poisson& p) { return std::poisson_distribution<int>(p.lambda)(rng); },
                        [&rng](const NegBinomial& nb) {
                          return std::negative_binomial_distribution<int>(nb.r, nb.p)(rng);
                        },
                        [&rng](const GeometricShifted& g) { return std::geometric_distribution<int>(g.p)(rng); },
                    },
                    d);
}

void validate(const LengthDistribution& d) {
  std::visit(Overloaded{
                 [](const Poisson& p) {
                   if (!(p.lambda > 0)) throw Error("poisson lambda must be positive");
                 },
                 [](const NegBinomial& nb) {
                   if (nb.r < 1) throw Error("negbin r must be a positive integer");
                   if (!(nb.p > 0 && nb.p <= 1)) throw Error("negbin p must be in (0, 1]");
                 },
                 [](const GeometricShifted& g) {
                   if (!(g.p > 0 && g.p <= 1)) throw Error("geometric p must be in (0, 1]");
                 },
             },
             d);
}

nlohmann::json to_json(const LengthDistribution& d) {
  return std::visit(Overloaded{
                        [](const Poisson& p) { return nlohmann::json{{"dist", "poisson"}, {"lambda", p.lambda}}; },
                        [](const NegBinomial& nb) {
                          return nlohmann::json{{"dist", "negbin"}, {"r", nb.r}, {"p", nb.p}};
                        },
                        [](const GeometricShifted& g) { return nlohmann::json{{"dist", "geometric"}, {"p", g.p}}; },
                    },
                    d);
}

LengthDistribution length_distribution_from_json(const nlohmann::json& j) {
  const std::string name = j.at("dist").get<std::string>();
  if (name == "poisson") return Poisson{j.at("lambda").get<double>()};
  if (name == "negbin") return NegBinomial{j.at("r").get<int>(), j.at("p").get<double>()};
  if (name == "geometric") return GeometricShifted{j.at("p").get<double>()};
  throw Error("unknown length distribution: " + name);
}

void SamplerConfig::validate() const {
  nif::validate(length_dist);
  if (max_len < 1) throw Error("max_len must be at least 1");
  if (!(neg_prob >= 0 && neg_prob <= 1)) throw Error("neg_prob must be in [0, 1]");
}

nlohmann::json to_json(const SamplerConfig& cfg) {
  nlohmann::json j = to_json(cfg.length_dist);
  j["max_len"] = cfg.max_len;
  j["neg_prob"] = cfg.neg_prob;
  j["seed"] = cfg.seed;
  return j;
}

SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  SamplerConfig cfg;
  cfg.length_dist = length_distribution_from_json(j);
  cfg.max_len = j.at("max_len").get<int>();
  cfg.neg_prob = j.at("neg_prob").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

std::string RawNumber::render() const {
  std::string s = negative ? "-" : "";
  s += int_digits;
  if (dec_len > 0) {
    s.push_back('.');
    s += dec_digits;
  }
  return s;
}

RawNumber sample_raw_number(const SamplerConfig& cfg, Rng& rng) {
  std::uniform_int_distribution<int> digit(0, 9);
  std::bernoulli_distribution sign(cfg.neg_prob);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    RawNumber n;
    n.int_len = sample_length(cfg.length_dist, rng);
    n.dec_len = sample_length(cfg.length_dist, rng);
    if (n.int_len == 0 && n.dec_len == 0) continue;
    if (n.int_len + n.dec_len > cfg.max_len) continue;
    for (int i = 0; i < n.int_len; ++i) n.int_digits.push_back(static_cast<char>('0' + digit(rng)));
    for (int i = 0; i < n.dec_len; ++i) n.dec_digits.push_back(static_cast<char>('0' + digit(rng)));
    n.negative = sign(rng);
    return n;
  }
  throw SamplerExhausted("no admissible length pair within max_len after 10^4 attempts");
}

std::string sample_number(const SamplerConfig& cfg, Rng& rng) { return canonicalize(sample_raw_number(cfg, rng).render()); }

int result_budget(Op op, int max_len) { return op == Op::kAdd ? max_len + 1 : 2 * max_len; }

int max_result_tokens(int max_len) { return 2 * max_len + 1; }

bool fits_budget(const Rational& value, int digit_budget, int max_len, std::string* out) {
  if (!is_terminating(value)) return false;
  std::string s = to_decimal(value);
  if (digit_count(s) > digit_budget) return false;
  if (static_cast<int>(s.size()) > max_result_tokens(max_len)) return false;
  if (out) *out = std::move(s);
  return true;
}

NumeralPair sample_pair(const SamplerConfig& cfg, Op op, Rng& rng) {
  const int budget = result_budget(op, cfg.max_len);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    std::string a = sample_number(cfg, rng);
    std::string b = sample_number(cfg, rng);
    if (fits_budget(oracle_apply(op, parse(a), parse(b)), budget, cfg.max_len)) return {std::move(a), std::move(b)};
  }
  throw SamplerExhausted(std::string("no representable ") + op_name(op) + " pair after 10^4 attempts");
}

NumeralPair sample_inverse_pair(const SamplerConfig& cfg, Op op, Rng& rng) {
  if (op == Op::kAdd) {
    for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
      std::string a = sample_number(cfg, rng);
      if (a == "0") continue;
      return {a, to_decimal(oracle_neg(parse(a)))};
    }
    throw SamplerExhausted("no nonzero numeral after 10^4 attempts");
  }
  // a = +-2^i * 5^j * 10^k with only one of i, j nonzero: both a and 1/a
  // terminate.
  std::uniform_int_distribution<int> base_exp(0, 4);
  std::uniform_int_distribution<int> decade(-3, 3);
  std::bernoulli_distribution use_two(0.5);
  std::bernoulli_distribution sign(cfg.neg_prob);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    const int e = base_exp(rng);
    const long base = use_two(rng) ? 2 : 5;
    const int k = decade(rng);
    mpq_class q = 1;
    for (int i = 0; i < e; ++i) q *= base;
    for (int i = 0; i < std::abs(k); ++i) q = k > 0 ? mpq_class(q * 10) : mpq_class(q / 10);
    if (sign(rng)) q = -q;
    const Rational a(q);
    const Rational inv = oracle_recip(a);
    std::string sa, sinv;
    if (fits_budget(a, cfg.max_len, cfg.max_len, &sa) && fits_budget(inv, cfg.max_len, cfg.max_len, &sinv)) {
      return {std::move(sa), std::move(sinv)};
    }
  }
  throw SamplerExhausted("no invertible pair within max_len after 10^4 attempts");
}

NumeralTriple sample_associative_triple(const SamplerConfig& cfg, Op op, Rng& rng) {
  const int budget = result_budget(op, cfg.max_len);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    NumeralTriple t{sample_number(cfg, rng), sample_number(cfg, rng), sample_number(cfg, rng)};
    const Rational a = parse(t.a), b = parse(t.b), c = parse(t.c);
    const Rational ab = oracle_apply(op, a, b);
    const Rational bc = oracle_apply(op, b, c);
    const Rational abc = oracle_apply(op, ab, c);
    if (fits_budget(ab, budget, cfg.max_len) && fits_budget(bc, budget, cfg.max_len) &&
        fits_budget(abc, budget, cfg.max_len)) {
      return t;
    }
  }
  throw SamplerExhausted(std::string("no representable ") + op_name(op) + " triple after 10^4 attempts");
}

NumeralTriple sample_distributive_triple(const SamplerConfig& cfg, Rng& rng) {
  const int add_budget = result_budget(Op::kAdd, cfg.max_len);
  const int mul_budget = result_budget(Op::kMul, cfg.max_len);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    NumeralTriple t{sample_number(cfg, rng), sample_number(cfg, rng), sample_number(cfg, rng)};
    const Rational a = parse(t.a), b = parse(t.b), c = parse(t.c);
    const Rational ab = a * b, ac = a * c;
    if (fits_budget(b + c, add_budget, cfg.max_len) && fits_budget(ab, mul_budget, cfg.max_len) &&
        fits_budget(ac, mul_budget, cfg.max_len) && fits_budget(a * (b + c), mul_budget, cfg.max_len)) {
      return t;
    }
  }
  throw SamplerExhausted("no representable distributive triple after 10^4 attempts");
}

std::uint64_t split_seed(std::uint64_t seed, Split split) {
  if (split == Split::kTrain) return seed;
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

std::string header_line(const nlohmann::json& header) { return std::string(kDatasetMagic) + header.dump() + "\n"; }

void atomic_write(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out << contents;
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path + ": " + ec.message());
}

nlohmann::json parse_header(const std::string& line, const std::string& path) {
  const std::string magic = kDatasetMagic;
  if (line.compare(0, magic.size(), magic) != 0) throw IoError("missing dataset header in " + path);
  try {
    return nlohmann::json::parse(line.substr(magic.size()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad dataset header in " + path + ": " + e.what());
  }
}

}  // namespace

void write_dataset(const DatasetSpec& spec, const SamplerConfig& cfg) {
  cfg.validate();
  SamplerConfig effective = cfg;
  effective.seed = split_seed(cfg.seed, spec.split);
  nlohmann::json header = to_json(effective);
  header["split"] = spec.split == Split::kTrain ? "train" : "eval";
  header["n"] = spec.n_samples;
  Rng rng(effective.seed);
  std::string body = header_line(header);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    body += sample_number(effective, rng);
    body.push_back('\n');
  }
  atomic_write(spec.path, body);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  Dataset ds;
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty dataset: " + path);
  ds.header = parse_header(line, path);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (!is_canonical(line)) throw IoError("non-canonical numeral in " + path + ": " + line);
    ds.numerals.push_back(line);
  }
  return ds;
}

void write_tuples(const std::string& path, const nlohmann::json& header,
                  const std::vector<std::vector<std::string>>& rows) {
  std::string body = header_line(header);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) body.push_back('\t');
      body += row[i];
    }
    body.push_back('\n');
  }
  atomic_write(path, body);
}

std::vector<std::vector<std::string>> read_tuples(const std::string& path, nlohmann::json* header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tuple file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty tuple file: " + path);
  nlohmann::json h = parse_header(line, path);
  if (header) *header = std::move(h);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) row.push_back(field);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace nif
