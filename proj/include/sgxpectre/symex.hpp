#pragma once

// Solver-free symbolic execution of enclave listings from the entry point.
// Registers and memory hold SymValues; conditional branches whose outcome is
// not implied by known bits fork both ways.

#include <array>
#include <bit>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "asm.hpp"
#include "symvalue.hpp"

namespace sgxpectre {

enum class Mode : std::uint8_t { ecall, oret };

inline std::string_view mode_name(Mode m) { return m == Mode::ecall ? "ECall" : "ORet"; }

struct EntryModel {
  std::string entry_symbol = "enclave_entry";
  Reg selector = Reg::rdi;
  // Only the bits in the mask are pinned; the rest of the selector register
  // stays attacker-controlled.
  std::uint64_t ecall_selector_mask = 0x80000000;
  std::uint64_t ecall_selector_value = 0;
  std::uint64_t oret_selector_mask = 0xffffffff;
  std::uint64_t oret_selector_value = 0xfffffffe;
  std::string ocall_symbol = "sgx_ocall";
  std::vector<Reg> attacker_registers = {Reg::rbx, Reg::rcx, Reg::rdx, Reg::rdi, Reg::rsi, Reg::rbp,
                                         Reg::r8,  Reg::r9,  Reg::r10, Reg::r11, Reg::r12, Reg::r13,
                                         Reg::r14, Reg::r15};

  bool is_attacker(Reg r) const {
    return std::find(attacker_registers.begin(), attacker_registers.end(), r) != attacker_registers.end();
  }
};

struct ExploreConfig {
  std::uint64_t max_steps = 50000;
  std::uint32_t max_fork_depth = 64;
  std::uint32_t loop_bound = 8;
  std::uint64_t max_states = 20000;

  bool valid() const { return max_steps > 0 && max_fork_depth > 0 && loop_bound > 0 && max_states > 0; }
};

struct MemoryModel {
  std::uint8_t fill = 0x00;
  std::uint8_t stack_fill = 0xcc;
  std::uint64_t stack_top = 0x7ffff7ff0000;
  std::uint64_t stack_size = 0x100000;
  std::uint64_t sentinel = 0x7fffdead0000;
  std::uint64_t gs_base = 0;
  std::uint64_t fs_base = 0;

  std::uint8_t fill_at(std::uint64_t addr) const {
    return addr >= stack_top - stack_size && addr < stack_top + 0x1000 ? stack_fill : fill;
  }
};

// Byte-granular memory. Each byte remembers the value it was cut from so
// aligned re-reads return the original node.
class SymMemory {
 public:
  struct Cell {
    SymValue whole;
    std::uint8_t index = 0;
  };

  void write(std::uint64_t addr, const SymValue& v, unsigned bytes) {
    auto& cells = mutable_cells();
    for (unsigned i = 0; i < bytes; ++i) cells[addr + i] = Cell{v, static_cast<std::uint8_t>(i)};
  }

  SymValue read(std::uint64_t addr, unsigned bytes, const MemoryModel& mm) const {
    const Cell* first = lookup(addr);
    if (first && first->index == 0 && !first->whole->is_concrete()) {
      bool aligned = true;
      for (unsigned i = 1; i < bytes && aligned; ++i) {
        const Cell* c = lookup(addr + i);
        aligned = c && c->whole == first->whole && c->index == i;
      }
      if (aligned) return sym::mask(first->whole, bytes);
    }
    std::uint64_t concrete = 0;
    bool all_concrete = true;
    std::vector<SymValue> parts(bytes);
    for (unsigned i = 0; i < bytes; ++i) {
      const Cell* c = lookup(addr + i);
      if (!c) {
        concrete |= std::uint64_t{mm.fill_at(addr + i)} << (8 * i);
        parts[i] = sym::constant(mm.fill_at(addr + i));
      } else if (c->whole->is_concrete()) {
        std::uint64_t b = (c->whole->value >> (8 * c->index)) & 0xff;
        concrete |= b << (8 * i);
        parts[i] = sym::constant(b);
      } else {
        all_concrete = false;
        parts[i] = sym::mask(sym::shr(c->whole, 8u * c->index), 1);
      }
    }
    if (all_concrete) return sym::constant(concrete);
    SymValue acc = sym::constant(0);
    for (unsigned i = 0; i < bytes; ++i) acc = sym::bor(acc, sym::shl(parts[i], 8 * i));
    return acc;
  }

  void record_symbolic_store(const SymValue& addr, const SymValue& v, unsigned bytes) {
    if (!stores_ || stores_.use_count() > 1)
      stores_ = std::make_shared<std::vector<SymStore>>(stores_ ? *stores_ : std::vector<SymStore>{});
    stores_->push_back({addr, sym::mask(v, bytes), bytes});
  }

  // Value of the newest symbolic store to exactly `addr`, if no other symbolic
  // store came after it.
  SymValue forward(const SymValue& addr, unsigned bytes) const {
    if (!stores_ || stores_->empty()) return nullptr;
    const auto& last = stores_->back();
    if (!sym::same(last.addr, addr) || last.bytes < bytes) return nullptr;
    return sym::mask(last.value, bytes);
  }

  std::size_t symbolic_store_count() const { return stores_ ? stores_->size() : 0; }

 private:
  struct SymStore {
    SymValue addr, value;
    unsigned bytes;
  };
  using CellMap = std::map<std::uint64_t, Cell>;

  const Cell* lookup(std::uint64_t addr) const {
    if (!cells_) return nullptr;
    auto it = cells_->find(addr);
    return it == cells_->end() ? nullptr : &it->second;
  }

  CellMap& mutable_cells() {
    if (!cells_) {
      cells_ = std::make_shared<CellMap>();
    } else if (cells_.use_count() > 1) {
      cells_ = std::make_shared<CellMap>(*cells_);
    }
    return *cells_;
  }

  std::shared_ptr<CellMap> cells_;
  std::shared_ptr<std::vector<SymStore>> stores_;
};

enum FlagBit : std::size_t { kCF, kZF, kSF, kOF, kPF };

// Single flags cell: what is known about each flag, plus the operands of the
// last compare or subtraction for range reasoning.
struct Flags {
  enum class Kind : std::uint8_t { unknown, sub, logic, other } kind = Kind::unknown;
  SymValue a, b, res;
  std::uint8_t width = 8;
  std::array<std::optional<bool>, 5> bits{};
};

namespace detail {

using Tri = std::optional<bool>;

inline Tri tri_not(Tri a) { return a ? Tri(!*a) : std::nullopt; }
inline Tri tri_or(Tri a, Tri b) {
  if ((a && *a) || (b && *b)) return true;
  if (a && b) return false;
  return std::nullopt;
}
inline Tri tri_and(Tri a, Tri b) {
  if ((a && !*a) || (b && !*b)) return false;
  if (a && b) return true;
  return std::nullopt;
}
inline Tri tri_ne(Tri a, Tri b) {
  if (a && b) return *a != *b;
  return std::nullopt;
}

struct Range {
  std::uint64_t umin, umax;
  std::int64_t smin, smax;
};

inline std::int64_t sign_extend(std::uint64_t v, unsigned bytes) {
  unsigned s = 64 - 8 * std::min(bytes, 8u);
  return static_cast<std::int64_t>(v << s) >> s;
}

inline Range value_range(const SymValue& v, unsigned bytes) {
  std::uint64_t m = sym::detail::width_mask(bytes);
  std::uint64_t sign = std::uint64_t{1} << (8 * std::min(bytes, 8u) - 1);
  std::uint64_t lo = v->known_one & m;
  std::uint64_t hi = ~v->known_zero & m;
  Range r{lo, hi, 0, 0};
  if (v->known_zero & sign) {
    r.smin = sign_extend(lo, bytes);
    r.smax = sign_extend(hi, bytes);
  } else if (v->known_one & sign) {
    r.smin = sign_extend(lo, bytes);
    r.smax = sign_extend(hi, bytes);
  } else {
    r.smin = sign_extend(lo | sign, bytes);
    r.smax = sign_extend(hi & ~sign, bytes);
  }
  return r;
}

// Carry and overflow of an operation on concrete operands of `w` bytes. For
// shifts and rotates `b` is the masked count (nonzero).
struct CarryOverflow {
  bool cf, of;
};

inline CarryOverflow concrete_cf_of(std::string_view op, std::uint64_t a, std::uint64_t b, std::uint64_t res,
                                    unsigned w, bool cin) {
  const unsigned bits = 8 * w;
  const std::uint64_t m = sym::detail::width_mask(w);
  a &= m;
  b &= m;
  res &= m;
  auto msb = [&](std::uint64_t v) { return ((v >> (bits - 1)) & 1) != 0; };
  using u128 = unsigned __int128;
  if (op == "add" || op == "adc") {
    u128 full = u128(a) + b + (op == "adc" && cin);
    return {full > m, msb(a) == msb(b) && msb(res) != msb(a)};
  }
  if (op == "sub" || op == "sbb") {
    u128 rhs = u128(b) + (op == "sbb" && cin);
    return {u128(a) < rhs, msb(a) != msb(b) && msb(res) != msb(a)};
  }
  if (op == "inc") return {cin, res == (std::uint64_t{1} << (bits - 1))};
  if (op == "dec") return {cin, a == (std::uint64_t{1} << (bits - 1))};
  if (op == "neg") return {a != 0, a == (std::uint64_t{1} << (bits - 1))};
  if (op == "shl") {
    bool c = b <= bits && ((a >> (bits - b)) & 1);
    return {c, msb(res) != c};
  }
  if (op == "shr") return {b <= 64 && ((a >> (b - 1)) & 1), msb(a)};
  if (op == "sar") return {((sign_extend(a, w) >> std::min<std::uint64_t>(b - 1, 63)) & 1) != 0, false};
  if (op == "rol") return {(res & 1) != 0, msb(res) != ((res & 1) != 0)};
  if (op == "ror") return {msb(res), msb(res) != (((res >> (bits - 2)) & 1) != 0)};
  if (op == "imul") {
    __int128 p = __int128(sign_extend(a, w)) * sign_extend(b, w);
    bool fits = p == __int128(sign_extend(res, w));
    return {!fits, !fits};
  }
  return {false, false};
}

}  // namespace detail

// Three-valued evaluation of a condition code against the flags cell.
inline std::optional<bool> evaluate_condition(std::string_view cc, const Flags& f) {
  using detail::Tri;
  Tri cf = f.bits[kCF], zf = f.bits[kZF], sf = f.bits[kSF], of = f.bits[kOF], pf = f.bits[kPF];
  if (f.kind == Flags::Kind::sub && f.a && f.b && !(f.a->is_concrete() && f.b->is_concrete())) {
    const unsigned w = f.width;
    auto ra = detail::value_range(f.a, w), rb = detail::value_range(f.b, w);
    auto lt = [](auto amin, auto amax, auto bmin, auto bmax) -> Tri {
      if (amax < bmin) return true;
      if (amin >= bmax) return false;
      return std::nullopt;
    };
    auto le = [](auto amin, auto amax, auto bmin, auto bmax) -> Tri {
      if (amax <= bmin) return true;
      if (amin > bmax) return false;
      return std::nullopt;
    };
    Tri ult = lt(ra.umin, ra.umax, rb.umin, rb.umax);
    Tri ule = le(ra.umin, ra.umax, rb.umin, rb.umax);
    Tri slt = lt(ra.smin, ra.smax, rb.smin, rb.smax);
    Tri sle = le(ra.smin, ra.smax, rb.smin, rb.smax);
    if ((ule && !*ule) || (sle && !*sle)) zf = false;
    if (cc == "b" || cc == "c" || cc == "nae") return ult;
    if (cc == "ae" || cc == "nb" || cc == "nc") return detail::tri_not(ult);
    if (cc == "be" || cc == "na") return detail::tri_or(ule, zf);
    if (cc == "a" || cc == "nbe") return detail::tri_and(detail::tri_not(ule), detail::tri_not(zf));
    if (cc == "l" || cc == "nge") return slt;
    if (cc == "ge" || cc == "nl") return detail::tri_not(slt);
    if (cc == "le" || cc == "ng") return detail::tri_or(sle, zf);
    if (cc == "g" || cc == "nle") return detail::tri_and(detail::tri_not(sle), detail::tri_not(zf));
  }
  if (cc == "o") return of;
  if (cc == "no") return detail::tri_not(of);
  if (cc == "b" || cc == "c" || cc == "nae") return cf;
  if (cc == "ae" || cc == "nb" || cc == "nc") return detail::tri_not(cf);
  if (cc == "e" || cc == "z") return zf;
  if (cc == "ne" || cc == "nz") return detail::tri_not(zf);
  if (cc == "be" || cc == "na") return detail::tri_or(cf, zf);
  if (cc == "a" || cc == "nbe") return detail::tri_and(detail::tri_not(cf), detail::tri_not(zf));
  if (cc == "s") return sf;
  if (cc == "ns") return detail::tri_not(sf);
  if (cc == "p" || cc == "pe") return pf;
  if (cc == "np" || cc == "po") return detail::tri_not(pf);
  if (cc == "l" || cc == "nge") return detail::tri_ne(sf, of);
  if (cc == "ge" || cc == "nl") return detail::tri_not(detail::tri_ne(sf, of));
  if (cc == "le" || cc == "ng") return detail::tri_or(zf, detail::tri_ne(sf, of));
  if (cc == "g" || cc == "nle") return detail::tri_and(detail::tri_not(zf), detail::tri_not(detail::tri_ne(sf, of)));
  return std::nullopt;
}

// Condition suffix of jcc/setcc/cmovcc mnemonics.
inline std::string_view condition_code(std::string_view mnemonic) {
  if (mnemonic.starts_with("set")) return mnemonic.substr(3);
  if (mnemonic.starts_with("cmov")) return mnemonic.substr(4);
  if (mnemonic.starts_with("j")) return mnemonic.substr(1);
  return {};
}

struct PathNode {
  std::uint64_t address;
  std::shared_ptr<const PathNode> prev;
};

struct BranchDecision {
  std::uint64_t address;
  bool taken;
  bool forked;
  friend bool operator==(const BranchDecision&, const BranchDecision&) = default;
};

enum class PathStatus : std::uint8_t { running, finished, dead_end, budget };

struct MachineState {
  std::array<SymValue, kNumGprs> regs;
  std::uint64_t rip = 0;
  Flags flags;
  SymMemory memory;
  Mode mode = Mode::ecall;
  std::uint32_t generation = 0;  // number of enclave entries on this path
  std::int32_t call_depth = 0;
  std::uint64_t steps = 0;
  std::uint32_t fork_depth = 0;
  std::uint32_t next_havoc = 0;
  std::shared_ptr<const PathNode> path;
  std::vector<BranchDecision> trail;
  std::shared_ptr<std::map<std::uint64_t, std::uint32_t>> loop_counts;
  PathStatus status = PathStatus::running;
  std::string note;

  const SymValue& reg(Reg r) const { return regs[reg_index(r)]; }

  // Executed instruction addresses, oldest first.
  std::vector<std::uint64_t> path_addresses() const {
    std::vector<std::uint64_t> out;
    for (auto n = path; n; n = n->prev) out.push_back(n->address);
    std::reverse(out.begin(), out.end());
    return out;
  }
};

struct ExploreSummary {
  std::uint64_t steps = 0;
  std::uint64_t states = 0;
  std::uint64_t finished = 0;
  std::uint64_t dead_ends = 0;
  std::uint64_t pruned = 0;
  std::uint64_t visitor_calls = 0;
};

inline constexpr std::uint32_t kSymbolsPerGeneration = 32;
inline constexpr std::uint32_t kFirstHavocSymbol = 1u << 20;

inline std::uint32_t attacker_symbol_id(std::uint32_t generation, Reg r) {
  return generation * kSymbolsPerGeneration + static_cast<std::uint32_t>(reg_index(r));
}

class Engine {
 public:
  using Visitor = std::function<void(const MachineState&, const Instruction&)>;

  Engine(const Listing& listing, EntryModel em = {}, ExploreConfig cfg = {}, MemoryModel mm = {})
      : listing_(listing), em_(std::move(em)), cfg_(cfg), mm_(mm) {
    if (listing_.gs_base) mm_.gs_base = *listing_.gs_base;
    if (!cfg_.valid()) throw std::invalid_argument("exploration bounds must be positive");
  }

  const Listing& listing() const { return listing_; }
  const EntryModel& entry_model() const { return em_; }
  const MemoryModel& memory_model() const { return mm_; }
  const ExploreConfig& config() const { return cfg_; }

  MachineState init_state(Mode mode, std::optional<std::string> start = std::nullopt) const {
    MachineState s;
    s.mode = mode;
    s.loop_counts = std::make_shared<std::map<std::uint64_t, std::uint32_t>>();
    for (const auto& blob : listing_.secrets)
      for (std::size_t i = 0; i < blob.bytes.size(); ++i)
        s.memory.write(blob.address + i, sym::constant(blob.bytes[i]), 1);
    if (mode == Mode::ecall) {
      enter(s, resolve_symbol(listing_, start.value_or(em_.entry_symbol)));
    } else {
      // Before the OCall's EEXIT the registers hold enclave-internal values.
      for (std::size_t i = 0; i < kNumGprs; ++i) s.regs[i] = havoc(s);
      s.regs[reg_index(Reg::rsp)] = sym::constant(mm_.stack_top);
      s.memory.write(mm_.stack_top, sym::constant(mm_.sentinel), 8);
      s.rip = resolve_symbol(listing_, start.value_or(em_.ocall_symbol));
    }
    return s;
  }

  // Executes the instruction at rip; returns one successor, or two for a fork
  // (taken first).
  std::vector<MachineState> step(MachineState s) const {
    const Instruction* ins = listing_.find(s.rip);
    if (!ins) {
      s.status = PathStatus::dead_end;
      s.note = "rip outside listing";
      return {std::move(s)};
    }
    s.path = std::make_shared<const PathNode>(PathNode{s.rip, s.path});
    ++s.steps;
    if (s.steps > cfg_.max_steps) {
      s.status = PathStatus::budget;
      s.note = "step budget";
      return {std::move(s)};
    }
    std::uint64_t next = ins->next_address();
    s.rip = next;
    std::vector<MachineState> out;
    execute(s, *ins, next, out);
    for (auto& o : out) {
      if (o.status == PathStatus::running && !listing_.find(o.rip)) {
        o.status = PathStatus::dead_end;
        o.note = "rip outside listing";
      }
    }
    return out;
  }

  ExploreSummary explore(Mode mode, const Visitor& visitor, std::optional<std::string> start = std::nullopt) const {
    ExploreSummary sum;
    std::vector<MachineState> work;
    work.push_back(init_state(mode, start));
    sum.states = 1;
    while (!work.empty()) {
      MachineState s = std::move(work.back());
      work.pop_back();
      while (s.status == PathStatus::running) {
        const Instruction* ins = listing_.find(s.rip);
        if (ins && is_indirect_branch(ins->cls)) {
          ++sum.visitor_calls;
          if (visitor) visitor(s, *ins);
        }
        auto next = step(std::move(s));
        ++sum.steps;
        if (next.size() == 2) {
          if (sum.states >= cfg_.max_states) {
            ++sum.pruned;
          } else {
            ++sum.states;
            work.push_back(std::move(next[1]));
          }
        }
        s = std::move(next[0]);
      }
      switch (s.status) {
        case PathStatus::finished: ++sum.finished; break;
        case PathStatus::dead_end: ++sum.dead_ends; break;
        case PathStatus::budget: ++sum.pruned; break;
        case PathStatus::running: break;
      }
    }
    return sum;
  }

 private:
  SymValue havoc(MachineState& s) const { return sym::symbol(kFirstHavocSymbol + s.next_havoc++, std::nullopt); }

  // Enclave entry: fresh attacker symbols, pinned selector, CSSA in rax.
  void enter(MachineState& s, std::uint64_t entry) const {
    for (std::size_t i = 0; i < kNumGprs; ++i) {
      auto r = static_cast<Reg>(i);
      s.regs[i] = em_.is_attacker(r) ? sym::symbol(attacker_symbol_id(s.generation, r), r) : sym::constant(0);
    }
    std::uint64_t mask = s.mode == Mode::ecall ? em_.ecall_selector_mask : em_.oret_selector_mask;
    std::uint64_t value = s.mode == Mode::ecall ? em_.ecall_selector_value : em_.oret_selector_value;
    auto& sel = s.regs[reg_index(em_.selector)];
    sel = sym::bor(sym::band(sel, sym::constant(~mask)), sym::constant(value & mask));
    s.regs[reg_index(Reg::rsp)] = sym::constant(mm_.stack_top);
    s.memory.write(mm_.stack_top, sym::constant(mm_.sentinel), 8);
    s.flags = {};
    s.rip = entry;
    ++s.generation;
  }

  // ---- operand access -----------------------------------------------------

  static unsigned view_bytes(const RegView& v) { return v.bits / 8u; }

  SymValue read_reg(const MachineState& s, const RegView& v) const {
    const auto& full = s.regs[reg_index(v.reg)];
    if (v.high8) return sym::mask(sym::shr(full, 8), 1);
    return sym::mask(full, view_bytes(v));
  }

  void write_reg(MachineState& s, const RegView& v, const SymValue& value) const {
    auto& full = s.regs[reg_index(v.reg)];
    SymValue nv;
    if (v.bits == 64) {
      nv = value;
    } else if (v.bits == 32) {
      nv = sym::mask(value, 4);
    } else {
      unsigned shift = v.high8 ? 8 : 0;
      std::uint64_t m = sym::detail::width_mask(view_bytes(v)) << shift;
      nv = sym::bor(sym::band(full, sym::constant(~m)), sym::shl(sym::mask(value, view_bytes(v)), shift));
    }
    if (v.reg == Reg::rsp && !nv->is_concrete()) {
      s.status = PathStatus::dead_end;
      s.note = "symbolic rsp";
    }
    full = nv;
  }

  SymValue address_of(const MachineState& s, const MemRef& m, std::uint64_t next) const {
    SymValue a = sym::constant(static_cast<std::uint64_t>(m.disp));
    if (m.base) a = sym::add(a, *m.base == Reg::rip ? sym::constant(next) : s.regs[reg_index(*m.base)]);
    if (m.index) a = sym::add(a, sym::mul(s.regs[reg_index(*m.index)], sym::constant(m.scale)));
    if (m.segment) a = sym::add(a, sym::constant(*m.segment == Segment::gs ? mm_.gs_base : mm_.fs_base));
    return a;
  }

  SymValue load(const MachineState& s, const SymValue& addr, unsigned bytes) const {
    if (addr->is_concrete()) return s.memory.read(addr->value, bytes, mm_);
    if (auto v = s.memory.forward(addr, bytes)) return v;
    return sym::load(addr, bytes);
  }

  void store(MachineState& s, const SymValue& addr, const SymValue& v, unsigned bytes) const {
    if (addr->is_concrete()) {
      s.memory.write(addr->value, sym::mask(v, bytes), bytes);
    } else {
      s.memory.record_symbolic_store(addr, v, bytes);
    }
  }

  static unsigned operand_bytes(const Operand& op) {
    if (const auto* r = std::get_if<RegView>(&op)) return view_bytes(*r);
    if (const auto* m = std::get_if<MemRef>(&op)) return m->width;
    return 8;
  }

  SymValue read(const MachineState& s, const Operand& op, unsigned bytes, std::uint64_t next) const {
    if (const auto* i = std::get_if<Imm>(&op)) return sym::constant(i->value & sym::detail::width_mask(bytes));
    if (const auto* r = std::get_if<RegView>(&op)) return read_reg(s, *r);
    return load(s, address_of(s, std::get<MemRef>(op), next), std::get<MemRef>(op).width);
  }

  void write(MachineState& s, const Operand& op, const SymValue& v, std::uint64_t next) const {
    if (const auto* r = std::get_if<RegView>(&op)) return write_reg(s, *r, v);
    if (const auto* m = std::get_if<MemRef>(&op)) store(s, address_of(s, *m, next), v, m->width);
  }

  void push(MachineState& s, const SymValue& v) const {
    std::uint64_t rsp = s.regs[reg_index(Reg::rsp)]->value - 8;
    s.regs[reg_index(Reg::rsp)] = sym::constant(rsp);
    s.memory.write(rsp, v, 8);
  }

  SymValue pop(MachineState& s) const {
    std::uint64_t rsp = s.regs[reg_index(Reg::rsp)]->value;
    auto v = s.memory.read(rsp, 8, mm_);
    s.regs[reg_index(Reg::rsp)] = sym::constant(rsp + 8);
    return v;
  }

  using Tri = std::optional<bool>;

  // Flags from a result; ZF, SF and PF follow from what is known about `res`.
  static Flags result_flags(Flags::Kind kind, SymValue a, SymValue b, SymValue res, unsigned w, Tri cf, Tri of) {
    const std::uint64_t m = sym::detail::width_mask(w);
    const std::uint64_t sign = std::uint64_t{1} << (8 * w - 1);
    Tri zf, sf, pf;
    if (res->known_one & m) zf = false;
    if (((res->known_zero | res->known_one) & m) == m) zf = (res->known_one & m) == 0;
    if ((res->known_zero | res->known_one) & sign) sf = (res->known_one & sign) != 0;
    if (((res->known_zero | res->known_one) & 0xff) == 0xff) pf = std::popcount(res->known_one & 0xff) % 2 == 0;
    if (kind == Flags::Kind::sub && a && b &&
        (((a->known_one & b->known_zero) | (a->known_zero & b->known_one)) & m))
      zf = false;
    return Flags{kind, std::move(a), std::move(b), std::move(res), static_cast<std::uint8_t>(w), {cf, zf, sf, of, pf}};
  }

  // Carry and overflow when every input is concrete.
  static std::pair<Tri, Tri> cf_of(std::string_view op, const SymValue& a, const SymValue& b, const SymValue& res,
                                   unsigned w, Tri cin = false) {
    if (!a->is_concrete() || (b && !b->is_concrete()) || !res->is_concrete() || !cin) return {};
    auto r = detail::concrete_cf_of(op, a->value, b ? b->value : 0, res->value, w, *cin);
    return {r.cf, r.of};
  }

  void set_flags(MachineState& s, Flags::Kind kind, SymValue a, SymValue b, SymValue res, unsigned w,
                 std::string_view op) const {
    Tri cf, of;
    if (kind == Flags::Kind::logic) {
      cf = of = false;
    } else {
      std::tie(cf, of) = cf_of(op, a, b, res, w);
    }
    s.flags = result_flags(kind, std::move(a), std::move(b), std::move(res), w, cf, of);
  }

  // Condition an arithmetic instruction consumes, if any.
  static std::string_view consumed_condition(std::string_view m) {
    if (m.starts_with("set") || m.starts_with("cmov")) return condition_code(m);
    if (m == "adc" || m == "sbb") return "c";
    return {};
  }

  // ---- instruction semantics ----------------------------------------------

  void execute(MachineState& s, const Instruction& ins, std::uint64_t next, std::vector<MachineState>& out) const {
    const auto& ops = ins.operands;
    switch (ins.cls) {
      case InstrClass::load:
      case InstrClass::store:
      case InstrClass::reg_arith:
        if (auto cc = consumed_condition(ins.mnemonic); !cc.empty()) {
          auto c = evaluate_condition(cc, s.flags);
          if (!c) {
            if (s.fork_depth + 1 > cfg_.max_fork_depth) {
              s.status = PathStatus::budget;
              s.note = "fork depth";
              break;
            }
            ++s.fork_depth;
            MachineState other = s;
            s.trail.push_back({ins.address, true, true});
            arith(s, ins, next, true);
            other.trail.push_back({ins.address, false, true});
            arith(other, ins, next, false);
            out.push_back(std::move(s));
            out.push_back(std::move(other));
            return;
          }
          s.trail.push_back({ins.address, *c, false});
          arith(s, ins, next, c);
        } else {
          arith(s, ins, next, std::nullopt);
        }
        break;
      case InstrClass::lea: {
        const auto& dst = std::get<RegView>(ops[1]);
        MemRef m = std::get<MemRef>(ops[0]);
        m.segment.reset();
        write_reg(s, dst, sym::mask(address_of(s, m, next), view_bytes(dst)));
        break;
      }
      case InstrClass::compare: {
        unsigned w = std::max(operand_bytes(ops[0]) * !std::holds_alternative<Imm>(ops[0]), operand_bytes(ops[1]));
        auto b = read(s, ops[0], w, next);
        auto a = read(s, ops[1], w, next);
        set_flags(s, Flags::Kind::sub, a, b, sym::mask(sym::sub(a, b), w), w, "sub");
        break;
      }
      case InstrClass::push: {
        SymValue v = read(s, ops[0], 8, next);
        if (std::holds_alternative<Imm>(ops[0])) v = sym::constant(std::get<Imm>(ops[0]).value);
        push(s, v);
        break;
      }
      case InstrClass::pop: {
        auto v = pop(s);
        write(s, ops[0], v, next);
        break;
      }
      case InstrClass::xchg: {
        unsigned w = std::max(operand_bytes(ops[0]), operand_bytes(ops[1]));
        auto a = read(s, ops[0], w, next);
        auto b = read(s, ops[1], w, next);
        write(s, ops[0], b, next);
        if (s.status == PathStatus::running) write(s, ops[1], a, next);
        break;
      }
      case InstrClass::direct_call:
        push(s, sym::constant(next));
        ++s.call_depth;
        s.rip = std::get<Imm>(ops[0]).value;
        break;
      case InstrClass::indirect_call: {
        auto t = read(s, ops[0], 8, next);
        if (!t->is_concrete()) {
          s.status = PathStatus::dead_end;
          s.note = "symbolic call target";
          break;
        }
        push(s, sym::constant(next));
        ++s.call_depth;
        s.rip = t->value;
        break;
      }
      case InstrClass::near_return: {
        auto t = pop(s);
        --s.call_depth;
        if (t->is_concrete() && t->value == mm_.sentinel) {
          s.status = PathStatus::finished;
          s.note = "returned to entry caller";
        } else if (!t->is_concrete()) {
          s.status = PathStatus::dead_end;
          s.note = "symbolic return target";
        } else {
          s.rip = t->value;
        }
        break;
      }
      case InstrClass::indirect_jump: {
        auto t = read(s, ops[0], 8, next);
        if (!t->is_concrete()) {
          s.status = PathStatus::dead_end;
          s.note = "symbolic jump target";
        } else {
          s.rip = t->value;
        }
        break;
      }
      case InstrClass::direct_jump:
        s.rip = std::get<Imm>(ops[0]).value;
        break;
      case InstrClass::cond_branch:
        return branch(std::move(s), ins, next, out);
      case InstrClass::enclu:
        enclu(s);
        break;
      case InstrClass::serialize:
      case InstrClass::cache_flush:
      case InstrClass::nop:
        break;
      case InstrClass::unsupported:
        unsupported(s, ins);
        break;
    }
    out.push_back(std::move(s));
  }

  void branch(MachineState s, const Instruction& ins, std::uint64_t next, std::vector<MachineState>& out) const {
    if (s.loop_counts.use_count() > 1) {
      s.loop_counts = std::make_shared<std::map<std::uint64_t, std::uint32_t>>(*s.loop_counts);
    }
    std::uint32_t visits = ++(*s.loop_counts)[ins.address];
    if (visits > cfg_.loop_bound) {
      s.status = PathStatus::budget;
      s.note = "loop bound";
      out.push_back(std::move(s));
      return;
    }
    std::uint64_t target = std::get<Imm>(ins.operands[0]).value;
    auto cond = evaluate_condition(condition_code(ins.mnemonic), s.flags);
    if (cond) {
      s.trail.push_back({ins.address, *cond, false});
      s.rip = *cond ? target : next;
      out.push_back(std::move(s));
      return;
    }
    if (s.fork_depth + 1 > cfg_.max_fork_depth) {
      s.status = PathStatus::budget;
      s.note = "fork depth";
      out.push_back(std::move(s));
      return;
    }
    ++s.fork_depth;
    MachineState other = s;
    s.trail.push_back({ins.address, true, true});
    s.rip = target;
    other.trail.push_back({ins.address, false, true});
    other.rip = next;
    out.push_back(std::move(s));
    out.push_back(std::move(other));
  }

  void enclu(MachineState& s) const {
    const auto& rax = s.regs[reg_index(Reg::rax)];
    if (rax->is_concrete() && rax->value == 4) {
      if (s.mode == Mode::oret && s.generation == 0) {
        enter(s, resolve_symbol(listing_, em_.entry_symbol));
      } else {
        s.status = PathStatus::finished;
        s.note = "EEXIT";
      }
      return;
    }
    s.regs[reg_index(Reg::rax)] = havoc(s);
  }

  void unsupported(MachineState& s, const Instruction& ins) const {
    static const std::map<std::string, std::vector<Reg>, std::less<>> implicit = {
        {"cpuid", {Reg::rax, Reg::rbx, Reg::rcx, Reg::rdx}},
        {"rdtsc", {Reg::rax, Reg::rdx}},
        {"rdtscp", {Reg::rax, Reg::rcx, Reg::rdx}},
        {"xgetbv", {Reg::rax, Reg::rdx}},
        {"mul", {Reg::rax, Reg::rdx}}, {"mulq", {Reg::rax, Reg::rdx}}, {"mull", {Reg::rax, Reg::rdx}},
        {"div", {Reg::rax, Reg::rdx}}, {"divq", {Reg::rax, Reg::rdx}}, {"divl", {Reg::rax, Reg::rdx}},
        {"idiv", {Reg::rax, Reg::rdx}}, {"idivq", {Reg::rax, Reg::rdx}}, {"idivl", {Reg::rax, Reg::rdx}},
        {"imul", {Reg::rax, Reg::rdx}}, {"imulq", {Reg::rax, Reg::rdx}}, {"imull", {Reg::rax, Reg::rdx}},
        {"stos", {Reg::rdi, Reg::rcx}}, {"movs", {Reg::rdi, Reg::rsi, Reg::rcx}},
    };
    std::vector<Reg> written;
    if (auto it = implicit.find(ins.mnemonic); it != implicit.end()) written = it->second;
    for (std::string_view p : {"stos", "movs", "cmps", "scas", "lods"})
      if (ins.mnemonic.starts_with(p)) written = {Reg::rdi, Reg::rsi, Reg::rcx, Reg::rax};
    // Explicit destination: the last operand when it names a general register.
    auto parts = detail::split_operands(ins.operand_text);
    if (!parts.empty()) {
      std::string_view last = parts.back();
      if (last.starts_with("%"))
        if (auto v = lookup_register(last.substr(1)); v && v->reg != Reg::rip) written.push_back(v->reg);
    }
    for (Reg r : written) {
      if (r == Reg::rsp) {
        s.status = PathStatus::dead_end;
        s.note = "symbolic rsp";
        continue;
      }
      s.regs[reg_index(r)] = havoc(s);
    }
    s.flags = {};
  }

  void arith(MachineState& s, const Instruction& ins, std::uint64_t next, Tri cond) const {
    const auto& ops = ins.operands;
    const std::string& m = ins.mnemonic;
    auto unknown_dest = [&] {
      if (!ops.empty()) write(s, ops.back(), havoc(s), next);
      s.flags = {};
    };
    if (m == "mov") {
      unsigned w = operand_bytes(ops[1]);
      write(s, ops[1], read(s, ops[0], w, next), next);
      return;
    }
    if (m == "movz" || m == "movs") {
      unsigned src = operand_bytes(ops[0]);
      unsigned dst = operand_bytes(ops[1]);
      auto v = read(s, ops[0], src, next);
      if (m == "movs") v = sym::mask(sym::sext(v, src * 8), dst);
      write(s, ops[1], v, next);
      return;
    }
    if (m == "cltq" || m == "cdqe") {
      s.regs[reg_index(Reg::rax)] = sym::sext(sym::mask(s.regs[reg_index(Reg::rax)], 4), 32);
      return;
    }
    if (m == "cwtl") {
      s.regs[reg_index(Reg::rax)] = sym::mask(sym::sext(sym::mask(s.regs[reg_index(Reg::rax)], 2), 16), 4);
      return;
    }
    if (m == "cqto" || m == "cqo") {
      s.regs[reg_index(Reg::rdx)] = sym::binop(SymOp::sar, s.regs[reg_index(Reg::rax)], sym::constant(63));
      return;
    }
    if (m == "cltd" || m == "cdq") {
      auto ext = sym::sext(sym::mask(s.regs[reg_index(Reg::rax)], 4), 32);
      s.regs[reg_index(Reg::rdx)] = sym::mask(sym::binop(SymOp::sar, ext, sym::constant(63)), 4);
      return;
    }
    if (m.starts_with("set")) {
      write(s, ops[0], sym::constant(*cond ? 1 : 0), next);
      return;
    }
    if (m.starts_with("cmov")) {
      unsigned w = operand_bytes(ops[1]);
      auto v = *cond ? read(s, ops[0], w, next) : read(s, ops[1], w, next);
      write(s, ops[1], v, next);
      return;
    }

    unsigned w = operand_bytes(ops.back());
    if (m == "bswap") {
      auto a = read(s, ops[0], w, next);
      SymValue r = sym::constant(0);
      for (unsigned i = 0; i < w; ++i)
        r = sym::bor(r, sym::shl(sym::mask(sym::shr(a, 8 * i), 1), 8 * (w - 1 - i)));
      write(s, ops[0], r, next);
      return;
    }
    if (m == "not") {
      write(s, ops[0], sym::mask(sym::bxor(read(s, ops[0], w, next), sym::constant(~std::uint64_t{0})), w), next);
      return;
    }
    if (m == "neg") {
      auto a = read(s, ops[0], w, next);
      auto r = sym::mask(sym::sub(sym::constant(0), a), w);
      write(s, ops[0], r, next);
      auto [cf, of] = cf_of("neg", a, nullptr, r, w);
      if (!cf && (a->known_one & sym::detail::width_mask(w))) cf = true;
      s.flags = result_flags(Flags::Kind::other, a, nullptr, r, w, cf, of);
      return;
    }
    if (m == "inc" || m == "dec") {
      auto a = read(s, ops[0], w, next);
      auto r = sym::mask(m == "inc" ? sym::add(a, sym::constant(1)) : sym::sub(a, sym::constant(1)), w);
      write(s, ops[0], r, next);
      Tri carry = s.flags.bits[kCF];
      auto [cf, of] = cf_of(m, a, nullptr, r, w);
      s.flags = result_flags(Flags::Kind::other, a, nullptr, r, w, carry, of);
      return;
    }
    if (m == "test") {
      auto a = read(s, ops[1], w, next);
      auto b = read(s, ops[0], w, next);
      set_flags(s, Flags::Kind::logic, a, b, sym::band(a, b), w, "and");
      return;
    }
    if (m == "imul") {
      if (ops.size() == 2 || ops.size() == 3) {
        const Operand& dst = ops.back();
        auto src = read(s, ops[ops.size() - 2], w, next);
        SymValue k = ops.size() == 2 ? read(s, dst, w, next) : read(s, ops[0], w, next);
        if (const auto* imm = std::get_if<Imm>(&ops[0]); imm && ops.size() == 3)
          k = sym::constant(static_cast<std::uint64_t>(detail::sign_extend(imm->value, 4)) & sym::detail::width_mask(w));
        auto r = sym::mask(sym::mul(src, k), w);
        write(s, dst, r, next);
        set_flags(s, Flags::Kind::other, src, k, r, w, "imul");
      } else {
        s.regs[reg_index(Reg::rax)] = havoc(s);
        s.regs[reg_index(Reg::rdx)] = havoc(s);
        s.flags = {};
      }
      return;
    }
    if (m == "shl" || m == "sal" || m == "shr" || m == "sar" || m == "rol" || m == "ror") {
      const Operand& dst = ops.back();
      SymValue count = ops.size() == 2 ? read(s, ops[0], 1, next) : sym::constant(1);
      count = sym::band(count, sym::constant(w == 8 ? 0x3f : 0x1f));
      auto a = read(s, dst, w, next);
      if (count->is_concrete() && count->value == 0) return;
      const unsigned bits = w * 8;
      std::string_view op = m == "sal" ? "shl" : std::string_view(m);
      SymValue r;
      if (op == "shl") {
        r = sym::binop(SymOp::shl, a, count);
      } else if (op == "shr") {
        r = sym::binop(SymOp::shr, a, count);
      } else if (op == "sar") {
        r = sym::binop(SymOp::sar, sym::sext(a, bits), count);
      } else {
        auto c = sym::band(count, sym::constant(bits - 1));
        auto back = sym::sub(sym::constant(bits), c);
        if (op == "rol")
          r = sym::bor(sym::binop(SymOp::shl, a, c), sym::binop(SymOp::shr, a, back));
        else
          r = sym::bor(sym::binop(SymOp::shr, a, c), sym::binop(SymOp::shl, a, back));
      }
      r = sym::mask(r, w);
      write(s, dst, r, next);
      if (!count->is_concrete()) {
        s.flags = {};
        return;
      }
      auto [cf, of] = cf_of(op, a, count, r, w);
      if (op == "rol" || op == "ror") {
        Flags f = s.flags;
        f.kind = Flags::Kind::other;
        f.a = a;
        f.b = count;
        f.res = r;
        f.width = static_cast<std::uint8_t>(w);
        f.bits[kCF] = cf;
        f.bits[kOF] = of;
        s.flags = f;
      } else {
        s.flags = result_flags(Flags::Kind::other, a, count, r, w, cf, of);
      }
      return;
    }
    if (m == "adc" || m == "sbb") {
      auto a = read(s, ops[1], w, next);
      auto b = read(s, ops[0], w, next);
      auto cv = sym::constant(*cond ? 1 : 0);
      auto r = m == "adc" ? sym::add(sym::add(a, b), cv) : sym::sub(sym::sub(a, b), cv);
      r = sym::mask(r, w);
      write(s, ops[1], r, next);
      auto [cf, of] = cf_of(m, a, b, r, w, cond);
      s.flags = result_flags(Flags::Kind::other, a, b, r, w, cf, of);
      return;
    }
    SymOp op;
    Flags::Kind kind;
    if (m == "add") {
      op = SymOp::add;
      kind = Flags::Kind::other;
    } else if (m == "sub") {
      op = SymOp::sub;
      kind = Flags::Kind::sub;
    } else if (m == "and") {
      op = SymOp::and_;
      kind = Flags::Kind::logic;
    } else if (m == "or") {
      op = SymOp::or_;
      kind = Flags::Kind::logic;
    } else if (m == "xor") {
      op = SymOp::xor_;
      kind = Flags::Kind::logic;
    } else {
      return unknown_dest();
    }
    if (ops.size() != 2) return unknown_dest();
    auto a = read(s, ops[1], w, next);
    SymValue b = read(s, ops[0], w, next);
    auto r = sym::mask(sym::binop(op, a, b), w);
    write(s, ops[1], r, next);
    set_flags(s, kind, a, b, r, w, m);
  }

  const Listing& listing_;
  EntryModel em_;
  ExploreConfig cfg_;
  MemoryModel mm_;
};

}  // namespace sgxpectre
