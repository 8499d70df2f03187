#pragma once

// AT&T-syntax disassembly listings: registers, operands, instruction
// classification, the listing container and its text parser/emitter.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

namespace sgxpectre {

inline constexpr std::uint64_t kMaxVirtualAddress = (std::uint64_t{1} << 48) - 1;

// ---------------------------------------------------------------------------
// Registers
// ---------------------------------------------------------------------------

// Encoding order; also the order registers are spilled into GPRSGX.
enum class Reg : std::uint8_t {
  rax, rcx, rdx, rbx, rsp, rbp, rsi, rdi,
  r8, r9, r10, r11, r12, r13, r14, r15,
  rip,
};

inline constexpr std::size_t kNumGprs = 16;

inline constexpr std::array<std::string_view, 17> kRegNames = {
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8",
    "r9",  "r10", "r11", "r12", "r13", "r14", "r15", "rip"};

// Order used when listing register sets in reports.
inline constexpr std::array<Reg, 16> kReportOrder = {
    Reg::rax, Reg::rbx, Reg::rcx, Reg::rdx, Reg::rdi, Reg::rsi, Reg::rbp, Reg::rsp,
    Reg::r8,  Reg::r9,  Reg::r10, Reg::r11, Reg::r12, Reg::r13, Reg::r14, Reg::r15};

inline std::string_view reg_name(Reg r) { return kRegNames[static_cast<std::size_t>(r)]; }

inline std::optional<Reg> reg_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRegNames.size(); ++i)
    if (kRegNames[i] == name) return static_cast<Reg>(i);
  return std::nullopt;
}

inline constexpr std::size_t reg_index(Reg r) { return static_cast<std::size_t>(r); }

// A (possibly partial) view of a 64-bit register.
struct RegView {
  Reg reg = Reg::rax;
  std::uint8_t bits = 64;
  bool high8 = false;  // ah/bh/ch/dh

  friend bool operator==(const RegView&, const RegView&) = default;
};

enum class WriteSemantics { full, zero_extend32, merge };

struct NormalizedReg {
  Reg parent;
  WriteSemantics semantics;
  friend bool operator==(const NormalizedReg&, const NormalizedReg&) = default;
};

namespace detail {

struct RegToken {
  std::string_view name;
  RegView view;
};

inline const std::vector<RegToken>& register_tokens() {
  static const std::vector<RegToken> table = [] {
    std::vector<RegToken> t;
    static constexpr std::array<std::string_view, 8> legacy32 = {"eax", "ecx", "edx", "ebx",
                                                                 "esp", "ebp", "esi", "edi"};
    static constexpr std::array<std::string_view, 8> legacy16 = {"ax", "cx", "dx", "bx",
                                                                 "sp", "bp", "si", "di"};
    static constexpr std::array<std::string_view, 8> legacy8 = {"al",  "cl",  "dl",  "bl",
                                                                "spl", "bpl", "sil", "dil"};
    static constexpr std::array<std::string_view, 4> high8 = {"ah", "ch", "dh", "bh"};
    static constexpr std::array<std::string_view, 8> ext = {"r8",  "r9",  "r10", "r11",
                                                            "r12", "r13", "r14", "r15"};
    static const std::array<std::string, 8> ext32 = {"r8d",  "r9d",  "r10d", "r11d",
                                                     "r12d", "r13d", "r14d", "r15d"};
    static const std::array<std::string, 8> ext16 = {"r8w",  "r9w",  "r10w", "r11w",
                                                     "r12w", "r13w", "r14w", "r15w"};
    static const std::array<std::string, 8> ext8 = {"r8b",  "r9b",  "r10b", "r11b",
                                                    "r12b", "r13b", "r14b", "r15b"};
    for (std::size_t i = 0; i < 8; ++i) {
      auto r = static_cast<Reg>(i);
      t.push_back({kRegNames[i], {r, 64, false}});
      t.push_back({legacy32[i], {r, 32, false}});
      t.push_back({legacy16[i], {r, 16, false}});
      t.push_back({legacy8[i], {r, 8, false}});
    }
    for (std::size_t i = 0; i < 4; ++i) t.push_back({high8[i], {static_cast<Reg>(i), 8, true}});
    for (std::size_t i = 0; i < 8; ++i) {
      auto r = static_cast<Reg>(8 + i);
      t.push_back({ext[i], {r, 64, false}});
      t.push_back({ext32[i], {r, 32, false}});
      t.push_back({ext16[i], {r, 16, false}});
      t.push_back({ext8[i], {r, 8, false}});
    }
    t.push_back({"rip", {Reg::rip, 64, false}});
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::optional<RegView> lookup_register(std::string_view token) {
  for (const auto& t : detail::register_tokens())
    if (t.name == token) return t.view;
  return std::nullopt;
}

inline std::string view_name(const RegView& v) {
  for (const auto& t : detail::register_tokens())
    if (t.view == v) return std::string(t.name);
  return "?";
}

inline NormalizedReg normalize_register(const RegView& v) {
  switch (v.bits) {
    case 64: return {v.reg, WriteSemantics::full};
    case 32: return {v.reg, WriteSemantics::zero_extend32};
    default: return {v.reg, WriteSemantics::merge};
  }
}

// ---------------------------------------------------------------------------
// Operands and instructions
// ---------------------------------------------------------------------------

enum class Segment : std::uint8_t { fs, gs };

struct Imm {
  std::uint64_t value = 0;
  friend bool operator==(const Imm&, const Imm&) = default;
};

struct MemRef {
  std::optional<Reg> base;
  std::optional<Reg> index;
  std::uint8_t scale = 1;
  std::int64_t disp = 0;
  std::uint8_t width = 8;  // access width in bytes
  std::optional<Segment> segment;
  friend bool operator==(const MemRef&, const MemRef&) = default;
};

using Operand = std::variant<Imm, RegView, MemRef>;

enum class InstrClass : std::uint8_t {
  load, store, reg_arith, lea, compare, direct_call, near_return, indirect_jump,
  indirect_call, cond_branch, direct_jump, push, pop, xchg, serialize, cache_flush,
  enclu, nop, unsupported,
};

inline std::string_view class_name(InstrClass c) {
  static constexpr std::array<std::string_view, 19> names = {
      "load",          "store",       "reg-arith",   "lea",       "compare",
      "direct-call",   "near-return", "indirect-jump", "indirect-call", "cond-branch",
      "direct-jump",   "push",        "pop",         "xchg",      "serialize",
      "cache-flush",   "enclu",       "nop",         "unsupported"};
  return names[static_cast<std::size_t>(c)];
}

inline bool is_indirect_branch(InstrClass c) {
  return c == InstrClass::indirect_jump || c == InstrClass::indirect_call ||
         c == InstrClass::near_return;
}

struct Instruction {
  std::uint64_t address = 0;
  std::uint32_t size = 1;
  std::vector<std::uint8_t> bytes;
  std::string mnemonic;  // base mnemonic, prefixes stripped
  InstrClass cls = InstrClass::unsupported;
  std::vector<Operand> operands;  // AT&T order: sources first, destination last
  std::string operand_text;       // raw operand field, kept for unsupported instructions
  std::string text;               // original source line

  std::uint64_t next_address() const { return address + size; }

  const MemRef* memory_operand() const {
    for (const auto& op : operands)
      if (const auto* m = std::get_if<MemRef>(&op)) return m;
    return nullptr;
  }
  bool has_memory_operand() const { return memory_operand() != nullptr; }
};

struct DataBlob {
  std::uint64_t address = 0;
  std::vector<std::uint8_t> bytes;
};

struct Listing {
  std::map<std::string, std::uint64_t> symbols;
  std::vector<Instruction> instructions;
  std::optional<std::pair<std::uint64_t, std::uint64_t>> enclave_range;  // [lo, hi)
  std::optional<std::string> entry_symbol;
  std::vector<DataBlob> secrets;
  std::vector<std::uint64_t> ssa_addresses;
  std::vector<std::uint64_t> tcs_addresses;
  std::optional<std::uint64_t> gs_base;

  const Instruction* find(std::uint64_t addr) const {
    auto it = index_.find(addr);
    return it == index_.end() ? nullptr : &instructions[it->second];
  }
  std::optional<std::size_t> index_of(std::uint64_t addr) const {
    auto it = index_.find(addr);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool in_enclave(std::uint64_t addr) const {
    return enclave_range && addr >= enclave_range->first && addr < enclave_range->second;
  }

  // Nearest preceding symbol, as "name:0xoff".
  std::string symbolize(std::uint64_t addr) const {
    const std::string* best = nullptr;
    std::uint64_t best_addr = 0;
    for (const auto& [name, a] : symbols) {
      if (a <= addr && (!best || a > best_addr || (a == best_addr && name < *best))) {
        best = &name;
        best_addr = a;
      }
    }
    std::ostringstream os;
    if (!best) {
      os << "0x" << std::hex << addr;
    } else {
      os << *best << ":0x" << std::hex << (addr - best_addr);
    }
    return os.str();
  }

  // Rebuilds the address index and validates ordering invariants.
  void reindex();

 private:
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class LookupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void Listing::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    if (i > 0 && instructions[i].address <= instructions[i - 1].address)
      throw std::invalid_argument("instruction addresses must strictly increase");
    index_[instructions[i].address] = i;
  }
}

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline bool is_hex_string(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isxdigit(static_cast<unsigned char>(c)) != 0;
  });
}

inline std::optional<std::uint64_t> parse_hex(std::string_view s) {
  if (s.starts_with("0x") || s.starts_with("0X")) s.remove_prefix(2);
  if (!is_hex_string(s) || s.size() > 16) return std::nullopt;
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

// Accepts "0x1f", "-0x8", "12", "-3". Returns two's complement bits.
inline std::optional<std::uint64_t> parse_number(std::string_view s) {
  bool neg = false;
  if (!s.empty() && s.front() == '-') {
    neg = true;
    s.remove_prefix(1);
  }
  std::optional<std::uint64_t> v;
  if (s.starts_with("0x") || s.starts_with("0X")) {
    v = parse_hex(s);
  } else if (!s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
               return std::isdigit(static_cast<unsigned char>(c)) != 0;
             })) {
    std::uint64_t d = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), d, 10);
    if (ec == std::errc() && p == s.data() + s.size()) v = d;
  }
  if (!v) return std::nullopt;
  return neg ? ~*v + 1 : *v;
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

inline std::string signed_hex(std::int64_t v) {
  if (v < 0) return "-" + hex(~static_cast<std::uint64_t>(v) + 1);
  return hex(static_cast<std::uint64_t>(v));
}

// Splits on commas that are not inside parentheses.
inline std::vector<std::string> split_operands(std::string_view s) {
  std::vector<std::string> out;
  int depth = 0;
  std::string cur;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == ',' && depth == 0) {
      out.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.emplace_back(trim(cur));
  return out;
}

inline bool is_condition_suffix(std::string_view cc) {
  static constexpr std::array<std::string_view, 30> ccs = {
      "o",  "no", "b",  "c",   "nae", "ae", "nb",  "nc", "e",  "z",
      "ne", "nz", "be", "na",  "a",   "nbe", "s",  "ns", "p",  "pe",
      "np", "po", "l",  "nge", "ge",  "nl",  "le", "ng", "g",  "nle"};
  return std::find(ccs.begin(), ccs.end(), cc) != ccs.end();
}

// Register tokens that are recognised but are not general-purpose registers.
inline bool is_non_gpr_register(std::string_view tok) {
  for (std::string_view p : {"xmm", "ymm", "zmm", "st", "mm", "cr", "dr", "k"}) {
    if (tok.starts_with(p) && tok.size() > p.size() &&
        std::all_of(tok.begin() + static_cast<std::ptrdiff_t>(p.size()), tok.end(),
                    [](char c) { return std::isdigit(static_cast<unsigned char>(c)) || c == '(' || c == ')'; }))
      return true;
  }
  return tok == "st" || tok == "cs" || tok == "ds" || tok == "es" || tok == "ss" ||
         tok == "fs" || tok == "gs";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Mnemonic table
// ---------------------------------------------------------------------------

namespace detail {

enum class MnemonicKind {
  mov, movx, lea, arith, cmp, test, call, ret, jmp, jcc, push, pop, xchg, serialize,
  flush, enclu, nop, setcc, cmovcc, unsupported
};

struct MnemonicInfo {
  MnemonicKind kind = MnemonicKind::unsupported;
  std::string base;
  std::uint8_t suffix_width = 0;  // from b/w/l/q suffix, 0 if none
  std::uint8_t source_width = 0;  // movz/movs source width
};

inline std::uint8_t suffix_bytes(char c) {
  switch (c) {
    case 'b': return 1;
    case 'w': return 2;
    case 'l': return 4;
    case 'q': return 8;
    default: return 0;
  }
}

inline MnemonicInfo classify_mnemonic(std::string_view m) {
  MnemonicInfo info;
  info.base = std::string(m);
  auto with_suffix = [&](std::string_view base, MnemonicKind kind) -> bool {
    if (m == base) {
      info.kind = kind;
      info.base = std::string(base);
      return true;
    }
    if (m.size() == base.size() + 1 && m.starts_with(base) && suffix_bytes(m.back())) {
      info.kind = kind;
      info.base = std::string(base);
      info.suffix_width = suffix_bytes(m.back());
      return true;
    }
    return false;
  };

  // movz/movs extensions: movzbl, movzwq, movsbl, movslq, movsxd, movzx, movsx
  if (m == "movsxd" || m == "movslq") {
    info.kind = MnemonicKind::movx;
    info.base = "movs";
    info.source_width = 4;
    info.suffix_width = 8;
    return info;
  }
  if ((m.starts_with("movz") || m.starts_with("movs")) && m.size() == 6 &&
      suffix_bytes(m[4]) && suffix_bytes(m[5])) {
    info.kind = MnemonicKind::movx;
    info.base = std::string(m.substr(0, 4));
    info.source_width = suffix_bytes(m[4]);
    info.suffix_width = suffix_bytes(m[5]);
    return info;
  }
  if (m == "movzx" || m == "movsx") {
    info.kind = MnemonicKind::movx;
    info.base = m == "movzx" ? "movz" : "movs";
    return info;
  }
  if (m == "movabs" || m == "movabsq") {
    info.kind = MnemonicKind::mov;
    info.base = "mov";
    info.suffix_width = 8;
    return info;
  }
  if (with_suffix("mov", MnemonicKind::mov)) return info;
  if (with_suffix("lea", MnemonicKind::lea)) return info;
  for (std::string_view a : {"add", "sub", "and", "or", "xor", "shl", "sal", "shr", "sar",
                             "rol", "ror", "imul", "not", "neg", "inc", "dec", "adc", "sbb",
                             "bswap"}) {
    if (with_suffix(a, MnemonicKind::arith)) return info;
  }
  for (std::string_view a : {"cltq", "cdqe", "cqto", "cqo", "cltd", "cdq", "cwtl"}) {
    if (m == a) {
      info.kind = MnemonicKind::arith;
      return info;
    }
  }
  if (with_suffix("cmp", MnemonicKind::cmp)) return info;
  if (with_suffix("test", MnemonicKind::test)) return info;
  if (with_suffix("call", MnemonicKind::call)) return info;
  if (with_suffix("ret", MnemonicKind::ret)) return info;
  if (with_suffix("jmp", MnemonicKind::jmp)) return info;
  if (with_suffix("push", MnemonicKind::push)) return info;
  if (with_suffix("pop", MnemonicKind::pop)) return info;
  if (with_suffix("xchg", MnemonicKind::xchg)) return info;
  if (m == "lfence" || m == "mfence") {
    info.kind = MnemonicKind::serialize;
    return info;
  }
  if (m == "clflush" || m == "clflushopt") {
    info.kind = MnemonicKind::flush;
    info.base = "clflush";
    return info;
  }
  if (m == "enclu") {
    info.kind = MnemonicKind::enclu;
    return info;
  }
  if (m == "nop" || m == "nopw" || m == "nopl" || m == "pause" || m == "endbr64") {
    info.kind = MnemonicKind::nop;
    info.base = m == "pause" ? "pause" : "nop";
    return info;
  }
  if (m.size() >= 2 && m[0] == 'j' && is_condition_suffix(m.substr(1))) {
    info.kind = MnemonicKind::jcc;
    return info;
  }
  if (m.size() >= 4 && m.starts_with("set") && is_condition_suffix(m.substr(3))) {
    info.kind = MnemonicKind::setcc;
    return info;
  }
  if (m.size() >= 5 && m.starts_with("cmov")) {
    auto cc = m.substr(4);
    if (is_condition_suffix(cc)) {
      info.kind = MnemonicKind::cmovcc;
      return info;
    }
    if (cc.size() >= 2 && suffix_bytes(cc.back()) && is_condition_suffix(cc.substr(0, cc.size() - 1))) {
      info.kind = MnemonicKind::cmovcc;
      info.base = std::string(m.substr(0, m.size() - 1));
      info.suffix_width = suffix_bytes(cc.back());
      return info;
    }
  }
  return info;
}

inline bool is_prefix(std::string_view tok) {
  for (std::string_view p : {"rep", "repz", "repe", "repnz", "repne", "lock", "bnd", "notrack",
                             "data16", "addr32", "cs", "ds"})
    if (tok == p) return true;
  return false;
}

struct OperandParse {
  std::optional<Operand> operand;
  bool non_gpr = false;
  bool indirect = false;  // leading '*'
  std::optional<std::uint64_t> branch_target;
};

inline std::optional<RegView> parse_reg_token(std::string_view tok, bool& non_gpr) {
  if (!tok.starts_with("%")) return std::nullopt;
  tok.remove_prefix(1);
  if (auto v = lookup_register(tok)) return v;
  if (is_non_gpr_register(tok)) non_gpr = true;
  return std::nullopt;
}

// Parses one AT&T operand. Throws std::invalid_argument on malformed text.
inline OperandParse parse_operand(std::string_view s) {
  OperandParse out;
  s = trim(s);
  if (s.starts_with("*")) {
    out.indirect = true;
    s.remove_prefix(1);
  }
  if (s.empty()) throw std::invalid_argument("empty operand");
  if (s.front() == '$') {
    auto v = parse_number(s.substr(1));
    if (!v) throw std::invalid_argument("bad immediate '" + std::string(s) + "'");
    out.operand = Imm{*v};
    return out;
  }
  if (s.front() == '%' && s.find('(') == std::string_view::npos && s.find(':') == std::string_view::npos) {
    auto r = parse_reg_token(s, out.non_gpr);
    if (!r) {
      if (out.non_gpr) return out;
      throw std::invalid_argument("unknown register '" + std::string(s) + "'");
    }
    out.operand = *r;
    return out;
  }
  MemRef mem;
  if (s.front() == '%') {
    // segment override, e.g. %gs:0x20
    auto colon = s.find(':');
    if (colon == std::string_view::npos) throw std::invalid_argument("bad operand '" + std::string(s) + "'");
    auto seg = s.substr(1, colon - 1);
    if (seg == "fs") {
      mem.segment = Segment::fs;
    } else if (seg == "gs") {
      mem.segment = Segment::gs;
    } else {
      out.non_gpr = true;
      return out;
    }
    s.remove_prefix(colon + 1);
  }
  auto paren = s.find('(');
  if (paren == std::string_view::npos) {
    // Bare number: direct branch target ("3709 <sym+0x1>") or absolute memory.
    std::string_view num = s;
    if (auto sp = num.find(' '); sp != std::string_view::npos) num = num.substr(0, sp);
    auto v = parse_hex(num);
    if (!v) v = parse_number(num);
    if (!v) throw std::invalid_argument("bad operand '" + std::string(s) + "'");
    mem.disp = static_cast<std::int64_t>(*v);
    out.operand = mem;
    if (!mem.segment) out.branch_target = *v;
    return out;
  }
  auto close = s.find(')', paren);
  if (close == std::string_view::npos) throw std::invalid_argument("unbalanced parentheses");
  auto disp_text = trim(s.substr(0, paren));
  if (!disp_text.empty()) {
    auto v = parse_number(disp_text);
    if (!v) throw std::invalid_argument("bad displacement '" + std::string(disp_text) + "'");
    mem.disp = static_cast<std::int64_t>(*v);
  }
  auto inner = s.substr(paren + 1, close - paren - 1);
  std::vector<std::string> parts;
  {
    std::string cur;
    for (char c : inner) {
      if (c == ',') {
        parts.emplace_back(trim(cur));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    parts.emplace_back(trim(cur));
  }
  auto reg_part = [&](const std::string& p) -> std::optional<Reg> {
    if (p.empty()) return std::nullopt;
    bool ng = false;
    auto r = parse_reg_token(p, ng);
    if (!r) {
      if (ng) out.non_gpr = true;
      throw std::invalid_argument("bad address register '" + p + "'");
    }
    return r->reg;
  };
  if (parts.size() > 3) throw std::invalid_argument("bad memory operand");
  mem.base = reg_part(parts[0]);
  if (parts.size() >= 2) mem.index = reg_part(parts[1]);
  if (parts.size() == 3) {
    auto sc = parse_number(parts[2]);
    if (!sc || (*sc != 1 && *sc != 2 && *sc != 4 && *sc != 8))
      throw std::invalid_argument("bad scale '" + parts[2] + "'");
    mem.scale = static_cast<std::uint8_t>(*sc);
  }
  if (!mem.index) mem.scale = 1;
  out.operand = mem;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Instruction decoding from mnemonic + operand text
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint8_t operand_reg_width(const std::vector<Operand>& ops) {
  for (const auto& op : ops)
    if (const auto* r = std::get_if<RegView>(&op)) return static_cast<std::uint8_t>(r->bits / 8);
  return 0;
}

inline void set_memory_width(std::vector<Operand>& ops, std::uint8_t w) {
  for (auto& op : ops)
    if (auto* m = std::get_if<MemRef>(&op)) m->width = w;
}

// Fills in class/operands for an instruction; unknown forms become unsupported.
inline void decode(Instruction& ins, std::string_view mnemonic, std::string_view operand_text) {
  auto info = classify_mnemonic(mnemonic);
  ins.mnemonic = info.base;
  ins.operand_text = std::string(trim(operand_text));
  ins.operands.clear();

  auto unsupported = [&] {
    ins.cls = InstrClass::unsupported;
    ins.operands.clear();
  };
  if (info.kind == MnemonicKind::unsupported) {
    ins.mnemonic = std::string(mnemonic);
    return unsupported();
  }

  bool indirect = false;
  std::optional<std::uint64_t> branch_target;
  if (!ins.operand_text.empty()) {
    for (const auto& part : split_operands(ins.operand_text)) {
      auto p = parse_operand(part);
      if (p.non_gpr || !p.operand) return unsupported();
      indirect = indirect || p.indirect;
      if (p.branch_target) branch_target = p.branch_target;
      ins.operands.push_back(*p.operand);
    }
  }
  auto& ops = ins.operands;
  bool is_branch = info.kind == MnemonicKind::call || info.kind == MnemonicKind::jmp ||
                   info.kind == MnemonicKind::jcc;
  if (is_branch && !indirect && branch_target && ops.size() == 1) {
    ops[0] = Imm{*branch_target};
  } else {
    branch_target.reset();
  }
  const MemRef* mem = ins.memory_operand();

  // Access width for memory operands.
  std::uint8_t width = info.suffix_width;
  if (info.kind == MnemonicKind::movx) {
    width = info.source_width;
    if (width == 0 && mem == nullptr) width = 0;
    if (width == 0) width = 1;
  } else if (width == 0) {
    width = operand_reg_width(ops);
    if (width == 0) width = 8;
  }
  if (info.kind == MnemonicKind::flush) width = 1;
  if (info.kind == MnemonicKind::call || info.kind == MnemonicKind::jmp ||
      info.kind == MnemonicKind::push || info.kind == MnemonicKind::pop)
    width = 8;
  set_memory_width(ops, width);
  mem = ins.memory_operand();

  auto dest_is_mem = !ops.empty() && std::holds_alternative<MemRef>(ops.back());
  auto count_ok = [&](std::size_t lo, std::size_t hi) { return ops.size() >= lo && ops.size() <= hi; };

  switch (info.kind) {
    case MnemonicKind::mov:
    case MnemonicKind::movx:
      if (!count_ok(2, 2) || std::holds_alternative<Imm>(ops.back())) return unsupported();
      if (dest_is_mem && std::holds_alternative<MemRef>(ops.front())) return unsupported();
      if (dest_is_mem)
        ins.cls = InstrClass::store;
      else if (mem)
        ins.cls = InstrClass::load;
      else
        ins.cls = InstrClass::reg_arith;
      return;
    case MnemonicKind::lea:
      if (!count_ok(2, 2) || !std::holds_alternative<MemRef>(ops[0]) ||
          !std::holds_alternative<RegView>(ops[1]))
        return unsupported();
      ins.cls = InstrClass::lea;
      return;
    case MnemonicKind::arith:
    case MnemonicKind::setcc:
    case MnemonicKind::cmovcc:
    case MnemonicKind::test:
      if (ops.size() > 3) return unsupported();
      ins.cls = InstrClass::reg_arith;
      return;
    case MnemonicKind::cmp:
      if (!count_ok(2, 2)) return unsupported();
      ins.cls = InstrClass::compare;
      return;
    case MnemonicKind::call:
      if (!count_ok(1, 1)) return unsupported();
      if (indirect) {
        ins.cls = InstrClass::indirect_call;
      } else if (branch_target) {
        ins.cls = InstrClass::direct_call;
      } else {
        return unsupported();
      }
      return;
    case MnemonicKind::jmp:
      if (!count_ok(1, 1)) return unsupported();
      if (indirect) {
        ins.cls = InstrClass::indirect_jump;
      } else if (branch_target) {
        ins.cls = InstrClass::direct_jump;
      } else {
        return unsupported();
      }
      return;
    case MnemonicKind::jcc:
      if (!count_ok(1, 1) || !branch_target) return unsupported();
      ins.cls = InstrClass::cond_branch;
      return;
    case MnemonicKind::ret:
      if (!ops.empty()) return unsupported();  // ret imm16 not modelled
      ins.cls = InstrClass::near_return;
      return;
    case MnemonicKind::push:
      if (!count_ok(1, 1)) return unsupported();
      ins.cls = InstrClass::push;
      return;
    case MnemonicKind::pop:
      if (!count_ok(1, 1) || std::holds_alternative<Imm>(ops[0])) return unsupported();
      ins.cls = InstrClass::pop;
      return;
    case MnemonicKind::xchg:
      if (!count_ok(2, 2)) return unsupported();
      if (!mem && std::get<RegView>(ops[0]) == std::get<RegView>(ops[1])) {
        ins.cls = InstrClass::nop;
        return;
      }
      ins.cls = InstrClass::xchg;
      return;
    case MnemonicKind::serialize:
      ins.cls = InstrClass::serialize;
      return;
    case MnemonicKind::flush:
      if (!count_ok(1, 1) || !mem) return unsupported();
      ins.cls = InstrClass::cache_flush;
      return;
    case MnemonicKind::enclu:
      ins.cls = InstrClass::enclu;
      return;
    case MnemonicKind::nop:
      ins.cls = InstrClass::nop;
      return;
    case MnemonicKind::unsupported:
      break;
  }
  unsupported();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Listing parser
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t checked_address(std::uint64_t v, std::size_t line) {
  if (v > kMaxVirtualAddress) throw ParseError(line, "address exceeds 48-bit virtual range");
  return v;
}

inline std::vector<std::uint8_t> parse_hex_bytes(std::string_view s, std::size_t line) {
  std::vector<std::uint8_t> out;
  std::string digits;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) digits.push_back(c);
  if (digits.size() % 2 != 0 || !(digits.empty() || is_hex_string(digits)))
    throw ParseError(line, "bad hex byte string");
  for (std::size_t i = 0; i < digits.size(); i += 2)
    out.push_back(static_cast<std::uint8_t>(std::stoul(digits.substr(i, 2), nullptr, 16)));
  return out;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace detail

// Parses the disassembly grammar plus the simulator directives.
inline Listing parse_listing(std::string_view text) {
  using namespace detail;
  Listing listing;
  std::vector<bool> has_bytes;
  std::map<std::string, std::size_t> symbol_lines;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view raw = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty() || line == "...") {
      if (eol == text.size()) break;
      continue;
    }

    if (line.front() == '.') {
      auto toks = split_ws(line);
      auto need = [&](std::size_t n) {
        if (toks.size() != n) throw ParseError(line_no, "wrong argument count for " + std::string(toks[0]));
      };
      auto addr_arg = [&](std::string_view t) {
        auto v = parse_number(t);
        if (!v) throw ParseError(line_no, "bad address '" + std::string(t) + "'");
        return checked_address(*v, line_no);
      };
      if (toks[0] == ".enclave") {
        need(3);
        auto lo = addr_arg(toks[1]);
        auto hi = addr_arg(toks[2]);
        if (hi <= lo) throw ParseError(line_no, "empty enclave range");
        listing.enclave_range = std::pair{lo, hi};
      } else if (toks[0] == ".entry") {
        need(2);
        listing.entry_symbol = std::string(toks[1]);
      } else if (toks[0] == ".secret") {
        auto q1 = line.find('"');
        auto q2 = line.rfind('"');
        if (q1 == std::string_view::npos || q2 == q1) throw ParseError(line_no, ".secret needs a quoted hex string");
        auto head = split_ws(line.substr(0, q1));
        if (head.size() != 2) throw ParseError(line_no, ".secret ADDR \"hexbytes\"");
        listing.secrets.push_back({addr_arg(head[1]), parse_hex_bytes(line.substr(q1 + 1, q2 - q1 - 1), line_no)});
      } else if (toks[0] == ".ssa") {
        need(2);
        listing.ssa_addresses.push_back(addr_arg(toks[1]));
      } else if (toks[0] == ".tcs") {
        need(2);
        listing.tcs_addresses.push_back(addr_arg(toks[1]));
      } else if (toks[0] == ".gsbase") {
        need(2);
        listing.gs_base = addr_arg(toks[1]);
      } else {
        throw ParseError(line_no, "unknown directive " + std::string(toks[0]));
      }
      continue;
    }

    // Address prefix.
    std::size_t i = 0;
    while (i < line.size() && std::isxdigit(static_cast<unsigned char>(line[i]))) ++i;
    if (i == 0) throw ParseError(line_no, "missing address prefix");
    auto addr = parse_hex(line.substr(0, i));
    if (!addr) throw ParseError(line_no, "bad address");
    auto address = checked_address(*addr, line_no);
    std::string_view rest = line.substr(i);

    if (!rest.empty() && rest.front() == ' ') {
      // Symbol header: "ADDR <name>:"
      auto body = trim(rest);
      if (body.size() < 4 || body.front() != '<' || !body.ends_with(">:"))
        throw ParseError(line_no, "malformed symbol header");
      std::string name(body.substr(1, body.size() - 3));
      if (name.empty()) throw ParseError(line_no, "empty symbol name");
      if (listing.symbols.contains(name)) throw ParseError(line_no, "duplicate symbol " + name);
      listing.symbols[name] = address;
      symbol_lines[name] = line_no;
      continue;
    }
    if (rest.empty() || rest.front() != ':') throw ParseError(line_no, "missing ':' after address");
    rest.remove_prefix(1);

    auto toks = split_ws(rest);
    std::vector<std::uint8_t> bytes;
    std::size_t t = 0;
    while (t < toks.size() && toks[t].size() == 2 && is_hex_string(toks[t])) {
      bytes.push_back(static_cast<std::uint8_t>(std::stoul(std::string(toks[t]), nullptr, 16)));
      ++t;
    }
    if (t == toks.size()) {
      // Byte-only continuation line.
      if (bytes.empty()) throw ParseError(line_no, "empty instruction");
      if (listing.instructions.empty()) throw ParseError(line_no, "continuation line without instruction");
      auto& prev = listing.instructions.back();
      prev.bytes.insert(prev.bytes.end(), bytes.begin(), bytes.end());
      has_bytes.back() = true;
      continue;
    }
    while (t + 1 < toks.size() && is_prefix(toks[t])) ++t;
    std::string_view mnemonic = toks[t];
    // Operand text is everything after the mnemonic token.
    auto mpos = static_cast<std::size_t>(mnemonic.data() - rest.data()) + mnemonic.size();
    std::string_view operand_text = trim(rest.substr(mpos));

    if (!listing.instructions.empty() && address <= listing.instructions.back().address) {
      if (address == listing.instructions.back().address ||
          listing.index_of(address).has_value())
        throw ParseError(line_no, "duplicate instruction address " + hex(address));
      throw ParseError(line_no, "instruction addresses must increase");
    }
    Instruction ins;
    ins.address = address;
    ins.bytes = std::move(bytes);
    ins.text = std::string(trim(raw));
    try {
      decode(ins, mnemonic, operand_text);
    } catch (const std::invalid_argument& e) {
      throw ParseError(line_no, e.what());
    }
    if (ins.operands.size() == 1 && (ins.cls == InstrClass::direct_call || ins.cls == InstrClass::direct_jump ||
                                     ins.cls == InstrClass::cond_branch))
      checked_address(std::get<Imm>(ins.operands[0]).value, line_no);
    has_bytes.push_back(!ins.bytes.empty());
    listing.instructions.push_back(std::move(ins));
    listing.reindex();
  }

  auto& ins = listing.instructions;
  for (std::size_t k = 0; k < ins.size(); ++k) {
    if (has_bytes[k])
      ins[k].size = static_cast<std::uint32_t>(ins[k].bytes.size());
    else if (k + 1 < ins.size())
      ins[k].size = static_cast<std::uint32_t>(std::min<std::uint64_t>(ins[k + 1].address - ins[k].address, 0xffffffffu));
    else
      ins[k].size = 1;
  }
  listing.reindex();
  for (const auto& [name, a] : listing.symbols)
    if (!listing.find(a)) throw ParseError(symbol_lines[name], "symbol " + name + " has no instruction");
  return listing;
}

// "name", "name+0xOFF" or "name:0xOFF".
inline std::uint64_t resolve_symbol(const Listing& listing, std::string_view ref) {
  std::string_view name = ref;
  std::uint64_t offset = 0;
  auto sep = ref.find_first_of("+:");
  if (sep != std::string_view::npos) {
    name = ref.substr(0, sep);
    auto off = detail::parse_number(ref.substr(sep + 1));
    if (!off) throw LookupError("bad offset in '" + std::string(ref) + "'");
    offset = *off;
  }
  auto it = listing.symbols.find(std::string(name));
  if (it == listing.symbols.end()) throw LookupError("unknown symbol '" + std::string(name) + "'");
  return it->second + offset;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

inline std::string format_operand(const Operand& op) {
  using detail::hex;
  using detail::signed_hex;
  if (const auto* i = std::get_if<Imm>(&op)) return "$" + hex(i->value);
  if (const auto* r = std::get_if<RegView>(&op)) return "%" + view_name(*r);
  const auto& m = std::get<MemRef>(op);
  std::string s;
  if (m.segment) s += m.segment == Segment::fs ? "%fs:" : "%gs:";
  if (!m.base && !m.index) return s + hex(static_cast<std::uint64_t>(m.disp));
  if (m.disp != 0) s += signed_hex(m.disp);
  s += "(";
  if (m.base) s += "%" + std::string(reg_name(*m.base));
  if (m.index) s += ",%" + std::string(reg_name(*m.index)) + "," + std::to_string(m.scale);
  s += ")";
  return s;
}

// Mnemonic with a width suffix where the operands alone would be ambiguous.
inline std::string format_mnemonic(const Instruction& ins) {
  const auto* m = ins.memory_operand();
  bool has_reg = detail::operand_reg_width(ins.operands) != 0;
  if (ins.mnemonic == "movz" || ins.mnemonic == "movs") {
    std::uint8_t dst = 8;
    if (const auto* r = std::get_if<RegView>(&ins.operands.back())) dst = static_cast<std::uint8_t>(r->bits / 8);
    std::uint8_t src = m ? m->width : 1;
    if (!m)
      if (const auto* r = std::get_if<RegView>(&ins.operands.front())) src = static_cast<std::uint8_t>(r->bits / 8);
    auto sfx = [](std::uint8_t w) { return w == 1 ? 'b' : w == 2 ? 'w' : w == 4 ? 'l' : 'q'; };
    if (ins.mnemonic == "movs" && src == 4) return "movslq";
    return ins.mnemonic + sfx(src) + sfx(dst);
  }
  if (m && !has_reg && ins.cls != InstrClass::indirect_call && ins.cls != InstrClass::indirect_jump &&
      ins.cls != InstrClass::push && ins.cls != InstrClass::pop && ins.cls != InstrClass::cache_flush &&
      ins.cls != InstrClass::lea) {
    char sfx = m->width == 1 ? 'b' : m->width == 2 ? 'w' : m->width == 4 ? 'l' : 'q';
    return ins.mnemonic + sfx;
  }
  return ins.mnemonic;
}

inline std::string format_instruction(const Instruction& ins) {
  std::ostringstream os;
  if (ins.cls == InstrClass::unsupported) {
    os << ins.mnemonic;
    if (!ins.operand_text.empty()) os << " " << ins.operand_text;
    return os.str();
  }
  os << format_mnemonic(ins);
  for (std::size_t i = 0; i < ins.operands.size(); ++i) {
    os << (i == 0 ? " " : ",");
    if (ins.cls == InstrClass::indirect_call || ins.cls == InstrClass::indirect_jump) os << "*";
    if ((ins.cls == InstrClass::direct_call || ins.cls == InstrClass::direct_jump ||
         ins.cls == InstrClass::cond_branch) && std::holds_alternative<Imm>(ins.operands[i])) {
      os << std::hex << std::get<Imm>(ins.operands[i]).value << std::dec;
    } else {
      os << format_operand(ins.operands[i]);
    }
  }
  return os.str();
}

inline std::string emit_listing(const Listing& listing) {
  std::ostringstream os;
  if (listing.enclave_range)
    os << ".enclave " << detail::hex(listing.enclave_range->first) << " "
       << detail::hex(listing.enclave_range->second) << "\n";
  if (listing.entry_symbol) os << ".entry " << *listing.entry_symbol << "\n";
  for (const auto& s : listing.secrets) {
    os << ".secret " << detail::hex(s.address) << " \"";
    for (std::size_t i = 0; i < s.bytes.size(); ++i) {
      static constexpr char digits[] = "0123456789abcdef";
      os << digits[s.bytes[i] >> 4] << digits[s.bytes[i] & 15];
    }
    os << "\"\n";
  }
  for (auto a : listing.ssa_addresses) os << ".ssa " << detail::hex(a) << "\n";
  for (auto a : listing.tcs_addresses) os << ".tcs " << detail::hex(a) << "\n";
  if (listing.gs_base) os << ".gsbase " << detail::hex(*listing.gs_base) << "\n";
  std::multimap<std::uint64_t, std::string> headers;
  for (const auto& [name, a] : listing.symbols) headers.emplace(a, name);
  for (const auto& ins : listing.instructions) {
    auto [lo, hi] = headers.equal_range(ins.address);
    for (auto it = lo; it != hi; ++it) {
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ins.address));
      os << "\n" << buf << " <" << it->second << ">:\n";
    }
    os << std::hex << ins.address << std::dec << ":\t";
    for (auto b : ins.bytes) {
      char buf[4];
      std::snprintf(buf, sizeof buf, "%02x ", b);
      os << buf;
    }
    os << format_instruction(ins) << "\n";
  }
  return os.str();
}

}  // namespace sgxpectre
