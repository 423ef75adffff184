#include "nif/numerals.hpp"

#include <algorithm>

namespace nif {

char token_symbol(Token t) {
  if (t >= kVocabSize) throw MalformedNumeral("token id out of range: " + std::to_string(t));
  return kAlphabet[t];
}

Token symbol_token(char c) {
  if (c >= '0' && c <= '9') return static_cast<Token>(c - '0');
  switch (c) {
    case '.':
      return kPointToken;
    case '-':
      return kMinusToken;
    case '+':
      return kPlusToken;
    case 's':
      return kStartToken;
    default:
      throw MalformedNumeral(std::string("character outside the numeral alphabet: '") + c + "'");
  }
}

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

struct SplitNumeral {
  bool negative = false;
  std::string_view int_part;
  std::string_view dec_part;
};

// Grammar: [+-]? digit* ('.' digit*)?, with at least one digit overall.
bool split(std::string_view raw, SplitNumeral& out) {
  std::size_t i = 0;
  out = SplitNumeral{};
  if (i < raw.size() && (raw[i] == '+' || raw[i] == '-')) {
    out.negative = raw[i] == '-';
    ++i;
  }
  std::size_t start = i;
  while (i < raw.size() && is_digit(raw[i])) ++i;
  out.int_part = raw.substr(start, i - start);
  if (i < raw.size() && raw[i] == '.') {
    ++i;
    start = i;
    while (i < raw.size() && is_digit(raw[i])) ++i;
    out.dec_part = raw.substr(start, i - start);
  }
  if (i != raw.size()) return false;
  return !out.int_part.empty() || !out.dec_part.empty();
}

}  // namespace

std::string canonicalize(std::string_view raw) {
  SplitNumeral parts;
  if (!split(raw, parts)) throw MalformedNumeral("malformed numeral: \"" + std::string(raw) + "\"");
  std::string_view int_part = parts.int_part;
  std::string_view dec_part = parts.dec_part;
  while (!int_part.empty() && int_part.front() == '0') int_part.remove_prefix(1);
  while (!dec_part.empty() && dec_part.back() == '0') dec_part.remove_suffix(1);
  if (int_part.empty() && dec_part.empty()) return "0";
  std::string out;
  out.reserve(int_part.size() + dec_part.size() + 2);
  if (parts.negative) out.push_back('-');
  out.append(int_part);
  if (!dec_part.empty()) {
    out.push_back('.');
    out.append(dec_part);
  }
  return out;
}

bool is_canonical(std::string_view s) {
  SplitNumeral parts;
  if (!split(s, parts)) return false;
  return canonicalize(s) == s;
}

int digit_count(std::string_view s) {
  return static_cast<int>(std::count_if(s.begin(), s.end(), is_digit));
}

TokenSequence tokenize(std::string_view s) {
  TokenSequence out;
  out.reserve(s.size());
  for (char c : s) out.push_back(symbol_token(c));
  return out;
}

Detokenized detokenize(std::span<const Token> tokens) {
  Detokenized out;
  out.text.reserve(tokens.size());
  bool in_alphabet = true;
  for (Token t : tokens) {
    if (t >= kVocabSize) {
      out.text.push_back('?');
      in_alphabet = false;
    } else {
      out.text.push_back(kAlphabet[t]);
    }
  }
  SplitNumeral parts;
  if (!in_alphabet || !split(out.text, parts)) {
    out.validity = NumeralValidity::kMalformed;
  } else {
    out.validity = canonicalize(out.text) == out.text ? NumeralValidity::kValid
                                                      : NumeralValidity::kNonCanonical;
  }
  return out;
}

Rational::Rational(long num, long den) {
  if (den == 0) throw DivisionByZero("rational with zero denominator");
  value_ = mpq_class(num, den);
  value_.canonicalize();
}

Rational::Rational(mpq_class value) : value_(std::move(value)) { value_.canonicalize(); }

Rational operator+(const Rational& a, const Rational& b) { return Rational(mpq_class(a.value_ + b.value_)); }
Rational operator-(const Rational& a, const Rational& b) { return Rational(mpq_class(a.value_ - b.value_)); }
Rational operator*(const Rational& a, const Rational& b) { return Rational(mpq_class(a.value_ * b.value_)); }
Rational operator-(const Rational& a) { return Rational(mpq_class(-a.value_)); }
bool operator==(const Rational& a, const Rational& b) { return a.value_ == b.value_; }
std::strong_ordering operator<=>(const Rational& a, const Rational& b) {
  const int c = cmp(a.value_, b.value_);
  if (c < 0) return std::strong_ordering::less;
  if (c > 0) return std::strong_ordering::greater;
  return std::strong_ordering::equal;
}

Rational parse(std::string_view s) {
  SplitNumeral parts;
  if (!split(s, parts)) throw MalformedNumeral("malformed numeral: \"" + std::string(s) + "\"");
  std::string digits;
  digits.append(parts.int_part);
  digits.append(parts.dec_part);
  mpz_class num(digits, 10);
  mpz_class den;
  mpz_ui_pow_ui(den.get_mpz_t(), 10, parts.dec_part.size());
  if (parts.negative) num = -num;
  return Rational(mpq_class(num, den));
}

namespace {

// Strips factors of 2 and 5 from the denominator; returns the exponents.
bool terminating_exponents(const mpz_class& den, unsigned long& twos, unsigned long& fives) {
  mpz_class d = den;
  twos = mpz_remove(d.get_mpz_t(), d.get_mpz_t(), mpz_class(2).get_mpz_t());
  fives = mpz_remove(d.get_mpz_t(), d.get_mpz_t(), mpz_class(5).get_mpz_t());
  return d == 1;
}

}  // namespace

bool is_terminating(const Rational& r) {
  unsigned long twos = 0, fives = 0;
  return terminating_exponents(r.value().get_den(), twos, fives);
}

std::string to_decimal(const Rational& r) {
  unsigned long twos = 0, fives = 0;
  const mpq_class& q = r.value();
  if (!terminating_exponents(q.get_den(), twos, fives)) {
    throw NonTerminatingDecimal("no terminating decimal expansion for " + r.str());
  }
  const unsigned long places = std::max(twos, fives);
  mpz_class scale;
  mpz_ui_pow_ui(scale.get_mpz_t(), 10, places);
  mpz_class scaled = q.get_num() * (scale / q.get_den());
  const bool negative = scaled < 0;
  std::string digits = mpz_class(abs(scaled)).get_str();
  if (digits.size() <= places) digits.insert(0, places - digits.size() + 1, '0');
  std::string raw = negative ? "-" : "";
  raw += digits.substr(0, digits.size() - places);
  if (places > 0) {
    raw.push_back('.');
    raw += digits.substr(digits.size() - places);
  }
  return canonicalize(raw);
}

Rational oracle_add(const Rational& a, const Rational& b) { return a + b; }
Rational oracle_mul(const Rational& a, const Rational& b) { return a * b; }
Rational oracle_neg(const Rational& a) { return -a; }

Rational oracle_recip(const Rational& a) {
  if (a.sign() == 0) throw DivisionByZero("reciprocal of zero");
  return Rational(mpq_class(1 / a.value()));
}

Ordering oracle_cmp(const Rational& a, const Rational& b) {
  const auto c = a <=> b;
  if (c < 0) return Ordering::kLt;
  if (c > 0) return Ordering::kGt;
  return Ordering::kEq;
}

Rational oracle_apply(Op op, const Rational& a, const Rational& b) {
  return op == Op::kAdd ? oracle_add(a, b) : oracle_mul(a, b);
}

std::string oracle_decimal(Op op, std::string_view a, std::string_view b) {
  return to_decimal(oracle_apply(op, parse(a), parse(b)));
}

const char* op_name(Op op) { return op == Op::kAdd ? "add" : "mul"; }

Op parse_op(std::string_view name) {
  if (name == "add") return Op::kAdd;
  if (name == "mul") return Op::kMul;
  throw Error("unknown operator: " + std::string(name));
}

}  // namespace nif
