#pragma once

#include <gmpxx.h>

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nif/errors.hpp"

namespace nif {

// Token ids: digits 0-9 map to themselves, then '.', '-', '+' and the start
// symbol 's'.
using Token = std::uint8_t;

inline constexpr int kVocabSize = 14;
inline constexpr Token kPointToken = 10;
inline constexpr Token kMinusToken = 11;
inline constexpr Token kPlusToken = 12;
inline constexpr Token kStartToken = 13;

inline constexpr std::array<char, kVocabSize> kAlphabet = {
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '.', '-', '+', 's'};

char token_symbol(Token t);
Token symbol_token(char c);  // throws MalformedNumeral

using TokenSequence = std::vector<Token>;

/// Normalizes a decimal string: optional sign, digits, optional '.' and
/// digits. Strips leading zeros of the integer part and trailing zeros of the
/// decimal part, drops '+', and maps every zero to "0". A zero integer part is
/// omitted, so 0.25 renders as ".25".
std::string canonicalize(std::string_view raw);

bool is_canonical(std::string_view s);

/// Number of digit characters in a numeral.
int digit_count(std::string_view s);

TokenSequence tokenize(std::string_view s);

enum class NumeralValidity {
  kValid,         // canonical numeral
  kNonCanonical,  // parses as a number but is not in canonical form
  kMalformed,     // violates the numeral grammar
};

struct Detokenized {
  std::string text;
  NumeralValidity validity = NumeralValidity::kMalformed;
  bool valid() const { return validity == NumeralValidity::kValid; }
};

Detokenized detokenize(std::span<const Token> tokens);

/// Exact rational number in lowest terms with a positive denominator.
class Rational {
 public:
  Rational() = default;
  Rational(long value) : value_(value) {}
  Rational(long num, long den);  // throws DivisionByZero
  explicit Rational(mpq_class value);

  const mpq_class& value() const { return value_; }
  std::string numerator() const { return value_.get_num().get_str(); }
  std::string denominator() const { return value_.get_den().get_str(); }
  std::string str() const { return value_.get_str(); }
  int sign() const { return sgn(value_); }

  friend Rational operator+(const Rational& a, const Rational& b);
  friend Rational operator-(const Rational& a, const Rational& b);
  friend Rational operator*(const Rational& a, const Rational& b);
  friend Rational operator-(const Rational& a);
  friend bool operator==(const Rational& a, const Rational& b);
  friend std::strong_ordering operator<=>(const Rational& a, const Rational& b);

 private:
  mpq_class value_;
};

Rational parse(std::string_view s);

/// Canonical decimal rendering; throws NonTerminatingDecimal unless the
/// denominator is of the form 2^i 5^j.
std::string to_decimal(const Rational& r);

bool is_terminating(const Rational& r);

enum class Ordering { kLt, kEq, kGt };

Rational oracle_add(const Rational& a, const Rational& b);
Rational oracle_mul(const Rational& a, const Rational& b);
Rational oracle_neg(const Rational& a);
Rational oracle_recip(const Rational& a);
Ordering oracle_cmp(const Rational& a, const Rational& b);

enum class Op { kAdd, kMul };

Rational oracle_apply(Op op, const Rational& a, const Rational& b);

/// Decimal-string convenience: oracle result of `a op b` in canonical form.
std::string oracle_decimal(Op op, std::string_view a, std::string_view b);

const char* op_name(Op op);
Op parse_op(std::string_view name);

}  // namespace nif
