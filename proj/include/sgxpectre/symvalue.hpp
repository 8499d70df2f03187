#pragma once

// Symbolic 64-bit values: concrete constants, symbols and expression trees.
// Every node carries known-bit masks; a fully known node is always folded to
// a constant.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "asm.hpp"

namespace sgxpectre {

enum class SymOp : std::uint8_t { add, sub, mul, and_, or_, xor_, shl, shr, sar, load, sext };

inline std::string_view op_name(SymOp op) {
  static constexpr std::array<std::string_view, 11> names = {
      "add", "sub", "mul", "and", "or", "xor", "shl", "shr", "sar", "load", "sext"};
  return names[static_cast<std::size_t>(op)];
}

// Symbols created for attacker-controlled registers carry the register as origin;
// havoc symbols (unsupported instructions, unknown outcomes) have no origin.
struct SymbolInfo {
  std::uint32_t id = 0;
  std::optional<Reg> origin;
  friend bool operator==(const SymbolInfo&, const SymbolInfo&) = default;
  friend auto operator<=>(const SymbolInfo& a, const SymbolInfo& b) { return a.id <=> b.id; }
};

struct SymNode;
using SymValue = std::shared_ptr<const SymNode>;

struct SymNode {
  enum class Kind : std::uint8_t { concrete, symbol, expr } kind = Kind::concrete;
  std::uint64_t value = 0;     // concrete value
  SymbolInfo symbol;           // symbol leaf
  SymOp op = SymOp::add;       // expr
  std::uint8_t param = 0;      // load width in bytes, sext source bits
  std::vector<SymValue> args;  // expr operands
  std::uint64_t known_zero = 0;
  std::uint64_t known_one = 0;
  std::uint64_t hash = 0;
  std::vector<SymbolInfo> symbols;  // sorted, unique leaves

  bool is_concrete() const { return kind == Kind::concrete; }
};

namespace sym {

namespace detail {

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h * 0xff51afd7ed558ccdull;
}

inline std::uint64_t width_mask(unsigned bytes) {
  return bytes >= 8 ? ~std::uint64_t{0} : (std::uint64_t{1} << (8 * bytes)) - 1;
}

inline std::uint64_t bit_mask(unsigned bits) {
  return bits >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << bits) - 1;
}

// Known-bits of a + b + carry, carry given as known-zero/known-one.
inline std::pair<std::uint64_t, std::uint64_t> add_known(std::uint64_t az, std::uint64_t ao,
                                                         std::uint64_t bz, std::uint64_t bo,
                                                         bool carry_zero, bool carry_one) {
  std::uint64_t sum_zero = ~az + ~bz + (carry_zero ? 0 : 1);
  std::uint64_t sum_one = ao + bo + (carry_one ? 1 : 0);
  std::uint64_t carry_known_zero = ~(sum_zero ^ az ^ bz);
  std::uint64_t carry_known_one = sum_one ^ ao ^ bo;
  std::uint64_t known = (az | ao) & (bz | bo) & (carry_known_zero | carry_known_one);
  return {~sum_zero & known, sum_one & known};
}

}  // namespace detail

inline SymValue constant(std::uint64_t v) {
  auto n = std::make_shared<SymNode>();
  n->kind = SymNode::Kind::concrete;
  n->value = v;
  n->known_one = v;
  n->known_zero = ~v;
  n->hash = detail::mix(1, v);
  return n;
}

inline SymValue symbol(std::uint32_t id, std::optional<Reg> origin) {
  auto n = std::make_shared<SymNode>();
  n->kind = SymNode::Kind::symbol;
  n->symbol = {id, origin};
  n->hash = detail::mix(2, id);
  n->symbols = {n->symbol};
  return n;
}

inline bool same(const SymValue& a, const SymValue& b);

inline bool same_args(const SymNode& a, const SymNode& b) {
  if (a.args.size() != b.args.size()) return false;
  for (std::size_t i = 0; i < a.args.size(); ++i)
    if (!same(a.args[i], b.args[i])) return false;
  return true;
}

// Structural equality.
inline bool same(const SymValue& a, const SymValue& b) {
  if (a == b) return true;
  if (a->hash != b->hash || a->kind != b->kind) return false;
  switch (a->kind) {
    case SymNode::Kind::concrete: return a->value == b->value;
    case SymNode::Kind::symbol: return a->symbol.id == b->symbol.id;
    case SymNode::Kind::expr: return a->op == b->op && a->param == b->param && same_args(*a, *b);
  }
  return false;
}

inline SymValue make_expr(SymOp op, std::uint8_t param, std::vector<SymValue> args,
                          std::uint64_t kz, std::uint64_t ko) {
  if ((kz | ko) == ~std::uint64_t{0}) return constant(ko);
  auto n = std::make_shared<SymNode>();
  n->kind = SymNode::Kind::expr;
  n->op = op;
  n->param = param;
  n->known_zero = kz;
  n->known_one = ko;
  std::uint64_t h = detail::mix(3, static_cast<std::uint64_t>(op) * 256 + param);
  std::vector<SymbolInfo> syms;
  for (const auto& a : args) {
    h = detail::mix(h, a->hash);
    syms.insert(syms.end(), a->symbols.begin(), a->symbols.end());
  }
  std::sort(syms.begin(), syms.end());
  syms.erase(std::unique(syms.begin(), syms.end()), syms.end());
  n->symbols = std::move(syms);
  n->hash = h;
  n->args = std::move(args);
  return n;
}

// Concrete evaluation of a binary operator on 64-bit values.
inline std::uint64_t apply(SymOp op, std::uint64_t a, std::uint64_t b) {
  switch (op) {
    case SymOp::add: return a + b;
    case SymOp::sub: return a - b;
    case SymOp::mul: return a * b;
    case SymOp::and_: return a & b;
    case SymOp::or_: return a | b;
    case SymOp::xor_: return a ^ b;
    case SymOp::shl: return b >= 64 ? 0 : a << b;
    case SymOp::shr: return b >= 64 ? 0 : a >> b;
    case SymOp::sar: return static_cast<std::uint64_t>(static_cast<std::int64_t>(a) >> std::min<std::uint64_t>(b, 63));
    default: return 0;
  }
}

inline SymValue binop(SymOp op, const SymValue& a, const SymValue& b) {
  if (a->is_concrete() && b->is_concrete()) return constant(apply(op, a->value, b->value));
  const std::uint64_t all = ~std::uint64_t{0};
  std::uint64_t az = a->known_zero, ao = a->known_one, bz = b->known_zero, bo = b->known_one;
  auto is_const = [](const SymValue& v, std::uint64_t c) { return v->is_concrete() && v->value == c; };
  switch (op) {
    case SymOp::add: {
      if (is_const(b, 0)) return a;
      if (is_const(a, 0)) return b;
      auto [kz, ko] = detail::add_known(az, ao, bz, bo, true, false);
      return make_expr(op, 0, {a, b}, kz, ko);
    }
    case SymOp::sub: {
      if (is_const(b, 0)) return a;
      if (same(a, b)) return constant(0);
      auto [kz, ko] = detail::add_known(az, ao, bo, bz, false, true);
      return make_expr(op, 0, {a, b}, kz, ko);
    }
    case SymOp::mul: {
      if (is_const(b, 1)) return a;
      if (is_const(a, 1)) return b;
      unsigned tz = std::min(64, std::countr_one(az) + std::countr_one(bz));
      return make_expr(op, 0, {a, b}, detail::bit_mask(tz), 0);
    }
    case SymOp::and_: {
      if (same(a, b)) return a;
      if (is_const(b, all)) return a;
      if (is_const(a, all)) return b;
      std::uint64_t kz = az | bz, ko = ao & bo;
      // Mask already implied by known zeros of a.
      if (b->is_concrete() && (~b->value & ~az) == 0) return a;
      return make_expr(op, 0, {a, b}, kz, ko);
    }
    case SymOp::or_: {
      if (same(a, b)) return a;
      if (is_const(b, 0)) return a;
      if (is_const(a, 0)) return b;
      return make_expr(op, 0, {a, b}, az & bz, ao | bo);
    }
    case SymOp::xor_: {
      if (same(a, b)) return constant(0);
      if (is_const(b, 0)) return a;
      if (is_const(a, 0)) return b;
      return make_expr(op, 0, {a, b}, (az & bz) | (ao & bo), (az & bo) | (ao & bz));
    }
    case SymOp::shl:
    case SymOp::shr:
    case SymOp::sar: {
      if (!b->is_concrete()) {
        std::uint64_t kz = 0, ko = 0;
        if (op == SymOp::sar && (az >> 63)) kz = 0;  // nothing cheap to say
        return make_expr(op, 0, {a, b}, kz, ko);
      }
      std::uint64_t s = b->value;
      if (s == 0) return a;
      if (op == SymOp::shl) {
        if (s >= 64) return constant(0);
        return make_expr(op, 0, {a, b}, (az << s) | detail::bit_mask(static_cast<unsigned>(s)), ao << s);
      }
      if (op == SymOp::shr) {
        if (s >= 64) return constant(0);
        return make_expr(op, 0, {a, b}, (az >> s) | ~(all >> s), ao >> s);
      }
      s = std::min<std::uint64_t>(s, 63);
      auto kz = static_cast<std::uint64_t>(static_cast<std::int64_t>(az) >> s);
      auto ko = static_cast<std::uint64_t>(static_cast<std::int64_t>(ao) >> s);
      return make_expr(op, 0, {a, b}, kz, ko);
    }
    default: break;
  }
  return make_expr(op, 0, {a, b}, 0, 0);
}

inline SymValue add(const SymValue& a, const SymValue& b) { return binop(SymOp::add, a, b); }
inline SymValue sub(const SymValue& a, const SymValue& b) { return binop(SymOp::sub, a, b); }
inline SymValue mul(const SymValue& a, const SymValue& b) { return binop(SymOp::mul, a, b); }
inline SymValue band(const SymValue& a, const SymValue& b) { return binop(SymOp::and_, a, b); }
inline SymValue bor(const SymValue& a, const SymValue& b) { return binop(SymOp::or_, a, b); }
inline SymValue bxor(const SymValue& a, const SymValue& b) { return binop(SymOp::xor_, a, b); }
inline SymValue shl(const SymValue& a, unsigned s) { return binop(SymOp::shl, a, constant(s)); }
inline SymValue shr(const SymValue& a, unsigned s) { return binop(SymOp::shr, a, constant(s)); }

inline SymValue mask(const SymValue& a, unsigned bytes) {
  if (bytes >= 8) return a;
  return band(a, constant(detail::width_mask(bytes)));
}

// Sign-extends the low `bits` bits of a to 64 bits.
inline SymValue sext(const SymValue& a, unsigned bits) {
  if (bits >= 64) return a;
  if (a->is_concrete()) {
    unsigned s = 64 - bits;
    return constant(static_cast<std::uint64_t>(static_cast<std::int64_t>(a->value << s) >> s));
  }
  std::uint64_t low = detail::bit_mask(bits);
  std::uint64_t sign = std::uint64_t{1} << (bits - 1);
  std::uint64_t kz = a->known_zero & low, ko = a->known_one & low;
  if (a->known_zero & sign) kz |= ~low;
  if (a->known_one & sign) ko |= ~low;
  return make_expr(SymOp::sext, static_cast<std::uint8_t>(bits), {a}, kz, ko);
}

// Value read from a symbolic address; the upper bits of narrow loads are zero.
inline SymValue load(const SymValue& addr, unsigned bytes) {
  std::uint64_t kz = bytes >= 8 ? 0 : ~detail::width_mask(bytes);
  return make_expr(SymOp::load, static_cast<std::uint8_t>(bytes), {addr}, kz, 0);
}

inline bool depends_on(const SymValue& v, std::uint32_t symbol_id) {
  return std::any_of(v->symbols.begin(), v->symbols.end(),
                     [&](const SymbolInfo& s) { return s.id == symbol_id; });
}

inline bool depends_on(const SymValue& v, Reg origin) {
  return std::any_of(v->symbols.begin(), v->symbols.end(),
                     [&](const SymbolInfo& s) { return s.origin == origin; });
}

inline bool has_attacker_symbol(const SymValue& v) {
  return std::any_of(v->symbols.begin(), v->symbols.end(),
                     [](const SymbolInfo& s) { return s.origin.has_value(); });
}

// Evaluates v under a symbol assignment; load-of nodes read through `memory`.
class Evaluator {
 public:
  using SymbolFn = std::function<std::uint64_t(std::uint32_t)>;
  using MemoryFn = std::function<std::uint64_t(std::uint64_t addr, unsigned bytes)>;

  Evaluator(SymbolFn symbols, MemoryFn memory) : symbols_(std::move(symbols)), memory_(std::move(memory)) {}

  std::uint64_t operator()(const SymValue& v) {
    if (v->is_concrete()) return v->value;
    auto it = memo_.find(v.get());
    if (it != memo_.end()) return it->second;
    std::uint64_t r = 0;
    if (v->kind == SymNode::Kind::symbol) {
      r = symbols_(v->symbol.id);
    } else if (v->op == SymOp::load) {
      r = memory_((*this)(v->args[0]), v->param) & detail::width_mask(v->param);
    } else if (v->op == SymOp::sext) {
      unsigned s = 64 - v->param;
      r = static_cast<std::uint64_t>(static_cast<std::int64_t>((*this)(v->args[0]) << s) >> s);
    } else {
      r = apply(v->op, (*this)(v->args[0]), (*this)(v->args[1]));
    }
    memo_.emplace(v.get(), r);
    return r;
  }

 private:
  SymbolFn symbols_;
  MemoryFn memory_;
  std::unordered_map<const SymNode*, std::uint64_t> memo_;
};

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// True when flipping symbol `id` changes the value of v for some sampled
// assignment. Symbolic loads read a pseudo-random function of their address.
inline bool varies_with(const SymValue& v, std::uint32_t id, int samples = 3) {
  if (!depends_on(v, id)) return false;
  for (int s = 0; s < samples; ++s) {
    auto base = [s](std::uint32_t sid) { return splitmix(sid * 0x100000001b3ull + static_cast<std::uint64_t>(s)); };
    auto mem = [s](std::uint64_t addr, unsigned bytes) { return splitmix(addr ^ (std::uint64_t{bytes} << 56) ^ static_cast<std::uint64_t>(s)); };
    Evaluator e0(base, mem);
    Evaluator e1([&](std::uint32_t sid) { return sid == id ? ~base(sid) : base(sid); }, mem);
    if (e0(v) != e1(v)) return true;
  }
  return false;
}

// True when v varies with at least one attacker-origin symbol.
inline bool attacker_controlled(const SymValue& v) {
  for (const auto& s : v->symbols)
    if (s.origin && varies_with(v, s.id)) return true;
  return false;
}

inline std::string to_string(const SymValue& v, int depth = 6) {
  switch (v->kind) {
    case SymNode::Kind::concrete: return ::sgxpectre::detail::hex(v->value);
    case SymNode::Kind::symbol:
      return v->symbol.origin ? "S" + std::to_string(v->symbol.id) + "(" + std::string(reg_name(*v->symbol.origin)) + ")"
                              : "H" + std::to_string(v->symbol.id);
    case SymNode::Kind::expr: break;
  }
  if (depth == 0) return "...";
  std::string s = std::string(op_name(v->op));
  if (v->op == SymOp::load || v->op == SymOp::sext) s += std::to_string(v->param);
  s += "(";
  for (std::size_t i = 0; i < v->args.size(); ++i) s += (i ? ", " : "") + to_string(v->args[i], depth - 1);
  return s + ")";
}

}  // namespace sym
}  // namespace sgxpectre
