#pragma once

// Deterministic model of a speculating core: BTB, RSB, a three-level cache,
// address translation, enclave transitions and transient execution with
// squash.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "asm.hpp"

namespace sgxpectre::uarch {

class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kLineSize = 64;

inline std::uint64_t page_of(std::uint64_t a) { return a & ~(kPageSize - 1); }
inline std::uint64_t line_of(std::uint64_t a) { return a & ~(kLineSize - 1); }

// ---- configuration -----------------------------------------------------------

struct Latencies {
  unsigned l1 = 4;
  unsigned l2 = 12;
  unsigned llc = 40;
  unsigned memory = 200;
  unsigned tlb_hit = 0;
  unsigned cached_walk = 30;
  unsigned memory_walk = 150;

  bool valid() const { return l1 > 0 && l1 <= l2 && l2 <= llc && llc <= memory && cached_walk <= memory_walk; }

  // Flush-Reload hit/miss threshold: midpoint of L1 hit and memory.
  unsigned reload_threshold() const { return (l1 + memory) / 2; }

  // "key=value" lines; '#' starts a comment.
  static Latencies parse(std::string_view text) {
    Latencies l;
    std::istringstream in{std::string(text)};
    std::string line;
    int no = 0;
    while (std::getline(in, line)) {
      ++no;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto eq = line.find('=');
      std::string key = std::string(sgxpectre::detail::trim(line.substr(0, eq == std::string::npos ? line.size() : eq)));
      if (key.empty() && eq == std::string::npos) continue;
      if (eq == std::string::npos) throw SimError("latency line " + std::to_string(no) + ": expected key=value");
      auto v = sgxpectre::detail::parse_number(sgxpectre::detail::trim(std::string_view(line).substr(eq + 1)));
      if (!v || *v > 1'000'000) throw SimError("latency line " + std::to_string(no) + ": bad value");
      unsigned u = static_cast<unsigned>(*v);
      if (key == "l1") l.l1 = u;
      else if (key == "l2") l.l2 = u;
      else if (key == "llc") l.llc = u;
      else if (key == "memory") l.memory = u;
      else if (key == "tlb-hit") l.tlb_hit = u;
      else if (key == "cached-walk") l.cached_walk = u;
      else if (key == "memory-walk") l.memory_walk = u;
      else throw SimError("latency line " + std::to_string(no) + ": unknown key " + key);
    }
    if (!l.valid()) throw SimError("latencies must satisfy l1 <= l2 <= llc <= memory");
    return l;
  }
};

enum class CpuModel : std::uint8_t { skylake, pre_skylake };

inline std::string_view cpu_model_name(CpuModel m) { return m == CpuModel::skylake ? "skylake" : "pre-skylake"; }

inline std::optional<CpuModel> cpu_model_from_name(std::string_view n) {
  if (n == "skylake") return CpuModel::skylake;
  if (n == "pre-skylake") return CpuModel::pre_skylake;
  return std::nullopt;
}

enum class Transition : std::uint8_t { eenter, eresume, eexit, aex };

inline std::string_view transition_name(Transition t) {
  static constexpr std::array<std::string_view, 4> n = {"eenter", "eresume", "eexit", "aex"};
  return n[static_cast<std::size_t>(t)];
}

inline std::optional<Transition> transition_from_name(std::string_view s) {
  for (std::size_t i = 0; i < 4; ++i)
    if (transition_name(static_cast<Transition>(i)) == s) return static_cast<Transition>(i);
  return std::nullopt;
}

struct Countermeasures {
  bool ibrs = false;
  bool stibp = false;
  std::set<Transition> ibpb_events;
  bool retpoline = false;
  bool rsb_refill_on_entry = false;

  friend bool operator==(const Countermeasures&, const Countermeasures&) = default;
};

struct CoreConfig {
  CpuModel cpu = CpuModel::skylake;
  Latencies latencies;
  Countermeasures countermeasures;
  unsigned btb_index_bits = 12;
  bool ret_poison_requires_exact_match = true;
  unsigned transient_cap = 64;
  bool speculation = true;

  bool rsb_fallback() const { return cpu == CpuModel::skylake; }
};

// ---- memory ------------------------------------------------------------------

class Memory {
 public:
  std::uint8_t read8(std::uint64_t a) const {
    auto it = pages_.find(page_of(a));
    return it == pages_.end() ? 0 : it->second[a & (kPageSize - 1)];
  }
  void write8(std::uint64_t a, std::uint8_t v) { page(a)[a & (kPageSize - 1)] = v; }

  std::uint64_t read(std::uint64_t a, unsigned w) const {
    std::uint64_t v = 0;
    for (unsigned i = 0; i < w; ++i) v |= std::uint64_t{read8(a + i)} << (8 * i);
    return v;
  }
  void write(std::uint64_t a, std::uint64_t v, unsigned w) {
    for (unsigned i = 0; i < w; ++i) write8(a + i, static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes(std::uint64_t a, std::size_t n) const {
    std::vector<std::uint8_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = read8(a + i);
    return out;
  }
  void write_bytes(std::uint64_t a, const std::vector<std::uint8_t>& b) {
    for (std::size_t i = 0; i < b.size(); ++i) write8(a + i, b[i]);
  }

  friend bool operator==(const Memory& x, const Memory& y) {
    auto covers = [](const Memory& p, const Memory& q) {
      for (const auto& [base, bytes] : p.pages_) {
        auto it = q.pages_.find(base);
        for (std::size_t i = 0; i < kPageSize; ++i)
          if (bytes[i] != (it == q.pages_.end() ? 0 : it->second[i])) return false;
      }
      return true;
    };
    return covers(x, y) && covers(y, x);
  }

 private:
  std::array<std::uint8_t, kPageSize>& page(std::uint64_t a) {
    auto [it, fresh] = pages_.try_emplace(page_of(a));
    if (fresh) it->second.fill(0);
    return it->second;
  }
  std::unordered_map<std::uint64_t, std::array<std::uint8_t, kPageSize>> pages_;
};

// ---- caches ------------------------------------------------------------------

struct LevelGeometry {
  unsigned sets;
  unsigned ways;
};

// Inclusive L1/L2/LLC hierarchy with per-set LRU. Level 3 means memory.
class CacheHierarchy {
 public:
  static constexpr std::array<LevelGeometry, 3> kDefaultGeometry = {{{64, 8}, {1024, 4}, {2048, 16}}};

  explicit CacheHierarchy(std::array<LevelGeometry, 3> g = kDefaultGeometry) : geometry_(g) {
    for (std::size_t l = 0; l < 3; ++l) sets_[l].assign(g[l].sets, {});
  }

  const std::array<LevelGeometry, 3>& geometry() const { return geometry_; }

  // Lines congruent to `a` in every level are spaced this far apart.
  std::uint64_t congruence_stride() const { return std::uint64_t{geometry_[2].sets} * kLineSize; }

  unsigned level_of(std::uint64_t a) const {
    std::uint64_t line = a / kLineSize;
    for (unsigned l = 0; l < 3; ++l) {
      const auto& set = sets_[l][line % geometry_[l].sets];
      if (std::find(set.begin(), set.end(), line) != set.end()) return l;
    }
    return 3;
  }
  bool cached(std::uint64_t a) const { return level_of(a) < 3; }

  // Returns the level that served the access and installs the line everywhere.
  unsigned access(std::uint64_t a) {
    unsigned found = level_of(a);
    std::uint64_t line = a / kLineSize;
    for (unsigned l = 3; l-- > 0;) touch(l, line);
    return found;
  }

  void flush(std::uint64_t a) {
    std::uint64_t line = a / kLineSize;
    for (unsigned l = 0; l < 3; ++l) erase(l, line);
  }

  void clear() {
    for (auto& level : sets_)
      for (auto& s : level) s.clear();
  }

 private:
  void touch(unsigned l, std::uint64_t line) {
    auto& set = sets_[l][line % geometry_[l].sets];
    auto it = std::find(set.begin(), set.end(), line);
    if (it != set.end()) set.erase(it);
    set.insert(set.begin(), line);
    if (set.size() > geometry_[l].ways) {
      std::uint64_t victim = set.back();
      set.pop_back();
      if (l == 2) {
        erase(0, victim);
        erase(1, victim);
      }
    }
  }
  void erase(unsigned l, std::uint64_t line) {
    auto& set = sets_[l][line % geometry_[l].sets];
    auto it = std::find(set.begin(), set.end(), line);
    if (it != set.end()) set.erase(it);
  }

  std::array<LevelGeometry, 3> geometry_;
  std::array<std::vector<std::vector<std::uint64_t>>, 3> sets_;
};

// ---- address translation -----------------------------------------------------

class Translation {
 public:
  unsigned cost(std::uint64_t page, const Latencies& l) const {
    if (tlb_.contains(page)) return l.tlb_hit;
    return pte_.contains(page) ? l.cached_walk : l.memory_walk;
  }
  void install(std::uint64_t page) {
    tlb_.insert(page);
    pte_.insert(page);
  }
  bool in_tlb(std::uint64_t page) const { return tlb_.contains(page); }
  bool pte_cached(std::uint64_t page) const { return pte_.contains(page); }
  void flush_tlb(std::uint64_t page) { tlb_.erase(page); }
  void flush_pte(std::uint64_t page) { pte_.erase(page); }
  void set_pte_cached(std::uint64_t page) { pte_.insert(page); }
  void flush_tlb_range(std::uint64_t lo, std::uint64_t hi) {
    std::erase_if(tlb_, [&](std::uint64_t p) { return p >= lo && p < hi; });
  }
  void set_reserved(std::uint64_t page, bool on) {
    if (on) reserved_.insert(page);
    else reserved_.erase(page);
  }
  bool reserved(std::uint64_t page) const { return reserved_.contains(page); }

 private:
  std::unordered_set<std::uint64_t> tlb_, pte_, reserved_;
};

// ---- branch predictors -------------------------------------------------------

enum class CpuMode : std::uint8_t { normal, enclave };

inline std::string_view cpu_mode_name(CpuMode m) { return m == CpuMode::normal ? "normal" : "enclave"; }

struct BtbQuery {
  std::uint8_t core = 0;
  CpuMode mode = CpuMode::normal;
  bool stibp = false;
  bool ibrs = false;
  bool exact = false;  // require the full 48-bit source to match
};

// Direct-mapped BTB indexed and tagged by the low 32 bits of the source.
class Btb {
 public:
  struct Entry {
    bool valid = false;
    std::uint32_t tag = 0;
    std::uint32_t target_low32 = 0;
    std::uint8_t core = 0;
    CpuMode mode = CpuMode::normal;
    std::uint64_t source = 0;
  };

  explicit Btb(unsigned index_bits = 12) : bits_(index_bits), table_(std::size_t{1} << index_bits) {}

  unsigned index_bits() const { return bits_; }
  std::size_t index(std::uint64_t src) const { return src & ((std::uint64_t{1} << bits_) - 1); }
  std::uint32_t tag(std::uint64_t src) const { return static_cast<std::uint32_t>((src & 0xffffffffull) >> bits_); }

  void update(std::uint64_t src, std::uint64_t dst, std::uint8_t core, CpuMode mode) {
    table_[index(src)] = {true, tag(src), static_cast<std::uint32_t>(dst), core, mode, src & kMaxVirtualAddress};
  }

  using Query = BtbQuery;

  std::optional<std::uint64_t> predict(std::uint64_t src) const { return predict(src, Query{}); }
  std::optional<std::uint64_t> predict(std::uint64_t src, const Query& q) const {
    const Entry& e = table_[index(src)];
    if (!e.valid || e.tag != tag(src)) return std::nullopt;
    if (q.stibp && e.core != q.core) return std::nullopt;
    if (q.ibrs && q.mode == CpuMode::enclave && e.mode == CpuMode::normal) return std::nullopt;
    if (q.exact && e.source != (src & kMaxVirtualAddress)) return std::nullopt;
    return (src & 0xffff00000000ull) | e.target_low32;
  }

  const Entry& entry(std::uint64_t src) const { return table_[index(src)]; }
  void clear() { std::fill(table_.begin(), table_.end(), Entry{}); }
  std::size_t occupancy() const {
    return static_cast<std::size_t>(std::count_if(table_.begin(), table_.end(), [](const Entry& e) { return e.valid; }));
  }

 private:
  unsigned bits_;
  std::vector<Entry> table_;
};

// 16-entry return stack; pushes past capacity overwrite the oldest entry.
class Rsb {
 public:
  static constexpr std::size_t kCapacity = 16;

  void push(std::uint64_t a) {
    slots_[top_] = a;
    top_ = (top_ + 1) % kCapacity;
    occupancy_ = std::min(occupancy_ + 1, kCapacity);
  }
  std::optional<std::uint64_t> pop() {
    if (occupancy_ == 0) return std::nullopt;
    top_ = (top_ + kCapacity - 1) % kCapacity;
    --occupancy_;
    return slots_[top_];
  }
  std::size_t occupancy() const { return occupancy_; }
  void clear() { occupancy_ = 0; }

 private:
  std::array<std::uint64_t, kCapacity> slots_{};
  std::size_t top_ = 0;
  std::size_t occupancy_ = 0;
};

// ---- enclave image -----------------------------------------------------------

inline constexpr std::uint64_t kSsaFrameSize = 4096;
inline constexpr std::uint64_t kGprSgxSize = 184;

// Byte offsets inside GPRSGX; general registers occupy 8 * encoding index.
namespace gprsgx {
inline constexpr std::uint64_t rflags = 128;
inline constexpr std::uint64_t rip = 136;
inline constexpr std::uint64_t ursp = 144;
inline constexpr std::uint64_t urbp = 152;
inline constexpr std::uint64_t exitinfo = 160;
inline constexpr std::uint64_t fsbase = 168;
inline constexpr std::uint64_t gsbase = 176;
inline constexpr std::uint64_t reg(Reg r) { return 8 * reg_index(r); }
}  // namespace gprsgx

struct Tcs {
  std::uint64_t address = 0;
  std::uint64_t entry = 0;
  std::uint64_t ssa_base = 0;
  std::uint64_t thread_data = 0;  // gs base while this thread runs
  unsigned nssa = 2;
  unsigned cssa = 0;
};

struct EnclaveImage {
  std::uint64_t lo = 0, hi = 0;
  std::vector<Tcs> tcs;

  bool contains(std::uint64_t a) const { return a >= lo && a < hi; }

  std::uint64_t gpr_address(std::size_t t, unsigned slot) const {
    return tcs.at(t).ssa_base + std::uint64_t{slot} * kSsaFrameSize + kSsaFrameSize - kGprSgxSize;
  }

  // TCS i: `.tcs` page i, entry at the listing's entry symbol, SSA frames at
  // `.ssa` i (default: the two pages after the TCS), thread data in the page
  // after the TCS.
  static EnclaveImage from_listing(const Listing& l) {
    EnclaveImage img;
    if (!l.enclave_range) throw SimError("program has no .enclave range");
    img.lo = l.enclave_range->first;
    img.hi = l.enclave_range->second;
    if (!l.entry_symbol) throw SimError("program has no .entry symbol");
    std::uint64_t entry = resolve_symbol(l, *l.entry_symbol);
    if (l.tcs_addresses.empty()) throw SimError("program declares no .tcs");
    for (std::size_t i = 0; i < l.tcs_addresses.size(); ++i) {
      Tcs t;
      t.address = l.tcs_addresses[i];
      t.entry = entry;
      t.thread_data = t.address + kPageSize;
      t.ssa_base = i < l.ssa_addresses.size() ? l.ssa_addresses[i] : t.address + 2 * kPageSize;
      img.tcs.push_back(t);
    }
    return img;
  }
};

// ---- architectural state and instruction semantics ---------------------------

struct ArchState {
  std::array<std::uint64_t, kNumGprs> regs{};
  std::uint64_t rip = 0;
  bool cf = false, pf = false, zf = false, sf = false, of = false;
  std::uint64_t fs_base = 0, gs_base = 0;

  std::uint64_t& r(Reg x) { return regs[reg_index(x)]; }
  std::uint64_t r(Reg x) const { return regs[reg_index(x)]; }

  std::uint64_t rflags() const {
    return 0x2 | std::uint64_t{cf} | std::uint64_t{pf} << 2 | std::uint64_t{zf} << 6 | std::uint64_t{sf} << 7 |
           std::uint64_t{of} << 11;
  }
  void set_rflags(std::uint64_t f) {
    cf = f & 1;
    pf = (f >> 2) & 1;
    zf = (f >> 6) & 1;
    sf = (f >> 7) & 1;
    of = (f >> 11) & 1;
  }

  friend bool operator==(const ArchState&, const ArchState&) = default;
};

struct MemAccess {
  std::uint64_t address = 0;
  unsigned width = 0;
  bool store = false;
};

// Memory view used while executing one or more instructions: reads see
// buffered stores first, stores stay buffered until committed.
class StoreBuffer {
 public:
  explicit StoreBuffer(const Memory& m) : mem_(&m) {}

  std::uint64_t load(std::uint64_t a, unsigned w) {
    log_.push_back({a, w, false});
    std::uint64_t v = 0;
    for (unsigned i = 0; i < w; ++i) {
      auto it = pending_.find(a + i);
      std::uint8_t b = it == pending_.end() ? mem_->read8(a + i) : it->second;
      v |= std::uint64_t{b} << (8 * i);
    }
    return v;
  }
  void store(std::uint64_t a, std::uint64_t v, unsigned w) {
    log_.push_back({a, w, true});
    for (unsigned i = 0; i < w; ++i) pending_[a + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
  void commit(Memory& m) const {
    for (const auto& [a, b] : pending_) m.write8(a, b);
  }
  std::vector<MemAccess> take_log() { return std::exchange(log_, {}); }

 private:
  const Memory* mem_;
  std::unordered_map<std::uint64_t, std::uint8_t> pending_;
  std::vector<MemAccess> log_;
};

enum class StepKind : std::uint8_t { next, jump, call, ret, indirect_jump, indirect_call, eexit, enclu_other };

struct StepResult {
  StepKind kind = StepKind::next;
  std::uint64_t next_rip = 0;
};

namespace detail {

inline std::uint64_t mask_bytes(unsigned w) { return w >= 8 ? ~0ull : (1ull << (8 * w)) - 1; }

inline std::int64_t sign_extend(std::uint64_t v, unsigned w) {
  unsigned s = 64 - 8 * w;
  return static_cast<std::int64_t>(v << s) >> s;
}

inline bool condition(const ArchState& s, std::string_view cc) {
  if (cc == "o") return s.of;
  if (cc == "no") return !s.of;
  if (cc == "b" || cc == "c" || cc == "nae") return s.cf;
  if (cc == "ae" || cc == "nb" || cc == "nc") return !s.cf;
  if (cc == "e" || cc == "z") return s.zf;
  if (cc == "ne" || cc == "nz") return !s.zf;
  if (cc == "be" || cc == "na") return s.cf || s.zf;
  if (cc == "a" || cc == "nbe") return !s.cf && !s.zf;
  if (cc == "s") return s.sf;
  if (cc == "ns") return !s.sf;
  if (cc == "p" || cc == "pe") return s.pf;
  if (cc == "np" || cc == "po") return !s.pf;
  if (cc == "l" || cc == "nge") return s.sf != s.of;
  if (cc == "ge" || cc == "nl") return s.sf == s.of;
  if (cc == "le" || cc == "ng") return s.zf || s.sf != s.of;
  if (cc == "g" || cc == "nle") return !s.zf && s.sf == s.of;
  throw SimError("unknown condition " + std::string(cc));
}

}  // namespace detail

// Concrete x86-64 semantics for the instruction subset the listings use.
class Executor {
 public:
  static StepResult step(ArchState& s, const Instruction& ins, StoreBuffer& mem) {
    Executor e(s, ins, mem);
    return e.run();
  }

 private:
  Executor(ArchState& s, const Instruction& ins, StoreBuffer& mem) : s_(s), ins_(ins), mem_(mem) {}

  StepResult run() {
    using detail::mask_bytes;
    using detail::sign_extend;
    const auto& ops = ins_.operands;
    const std::string& m = ins_.mnemonic;
    std::uint64_t next = ins_.next_address();
    switch (ins_.cls) {
      case InstrClass::lea: {
        MemRef mr = std::get<MemRef>(ops[0]);
        mr.segment.reset();
        put(ops[1], address(mr));
        return {StepKind::next, next};
      }
      case InstrClass::compare: {
        unsigned w = std::holds_alternative<Imm>(ops[0]) ? width(ops[1]) : std::max(width(ops[0]), width(ops[1]));
        std::uint64_t a = get(ops[1], w), b = get(ops[0], w);
        sub_flags(a, b, w);
        return {StepKind::next, next};
      }
      case InstrClass::push: {
        std::uint64_t v = std::holds_alternative<Imm>(ops[0]) ? std::get<Imm>(ops[0]).value : get(ops[0], 8);
        s_.r(Reg::rsp) -= 8;
        mem_.store(s_.r(Reg::rsp), v, 8);
        return {StepKind::next, next};
      }
      case InstrClass::pop: {
        std::uint64_t v = mem_.load(s_.r(Reg::rsp), 8);
        s_.r(Reg::rsp) += 8;
        put(ops[0], v);
        return {StepKind::next, next};
      }
      case InstrClass::xchg: {
        unsigned w = std::max(width(ops[0]), width(ops[1]));
        std::uint64_t a = get(ops[0], w), b = get(ops[1], w);
        put(ops[0], b);
        put(ops[1], a);
        return {StepKind::next, next};
      }
      case InstrClass::direct_call:
        s_.r(Reg::rsp) -= 8;
        mem_.store(s_.r(Reg::rsp), next, 8);
        return {StepKind::call, std::get<Imm>(ops[0]).value};
      case InstrClass::indirect_call: {
        std::uint64_t t = get(ops[0], 8);
        s_.r(Reg::rsp) -= 8;
        mem_.store(s_.r(Reg::rsp), next, 8);
        return {StepKind::indirect_call, t};
      }
      case InstrClass::near_return: {
        std::uint64_t t = mem_.load(s_.r(Reg::rsp), 8);
        s_.r(Reg::rsp) += 8;
        if (!ops.empty()) s_.r(Reg::rsp) += std::get<Imm>(ops[0]).value;
        return {StepKind::ret, t};
      }
      case InstrClass::indirect_jump:
        return {StepKind::indirect_jump, get(ops[0], 8)};
      case InstrClass::direct_jump:
        return {StepKind::jump, std::get<Imm>(ops[0]).value};
      case InstrClass::cond_branch:
        return {StepKind::jump, detail::condition(s_, std::string_view(m).substr(1)) ? std::get<Imm>(ops[0]).value : next};
      case InstrClass::enclu:
        return {s_.r(Reg::rax) == 4 ? StepKind::eexit : StepKind::enclu_other, next};
      case InstrClass::serialize:
      case InstrClass::cache_flush:
      case InstrClass::nop:
        return {StepKind::next, next};
      case InstrClass::unsupported:
        throw SimError("unsupported instruction at " + sgxpectre::detail::hex(ins_.address) + ": " + ins_.text);
      default:
        alu();
        return {StepKind::next, next};
    }
  }

  static unsigned width(const Operand& op) {
    if (const auto* v = std::get_if<RegView>(&op)) return v->bits / 8u;
    if (const auto* mr = std::get_if<MemRef>(&op)) return mr->width;
    return 8;
  }

  std::uint64_t address(const MemRef& mr) const {
    std::uint64_t a = static_cast<std::uint64_t>(mr.disp);
    if (mr.base) a += *mr.base == Reg::rip ? ins_.next_address() : s_.r(*mr.base);
    if (mr.index) a += s_.r(*mr.index) * mr.scale;
    if (mr.segment) a += *mr.segment == Segment::gs ? s_.gs_base : s_.fs_base;
    return a;
  }

  std::uint64_t get(const Operand& op, unsigned w) {
    if (const auto* i = std::get_if<Imm>(&op)) return i->value & detail::mask_bytes(w);
    if (const auto* v = std::get_if<RegView>(&op)) {
      if (v->reg == Reg::rip) return ins_.next_address();
      std::uint64_t full = s_.r(v->reg);
      if (v->high8) return (full >> 8) & 0xff;
      return full & detail::mask_bytes(v->bits / 8u);
    }
    const auto& mr = std::get<MemRef>(op);
    return mem_.load(address(mr), mr.width);
  }

  void put(const Operand& op, std::uint64_t val) {
    if (const auto* v = std::get_if<RegView>(&op)) {
      std::uint64_t& full = s_.r(v->reg);
      switch (v->bits) {
        case 64: full = val; break;
        case 32: full = val & 0xffffffffull; break;
        case 16: full = (full & ~0xffffull) | (val & 0xffff); break;
        default:
          if (v->high8) full = (full & ~0xff00ull) | ((val & 0xff) << 8);
          else full = (full & ~0xffull) | (val & 0xff);
      }
      return;
    }
    const auto& mr = std::get<MemRef>(op);
    mem_.store(address(mr), val, mr.width);
  }

  void zsp(std::uint64_t res, unsigned w) {
    res &= detail::mask_bytes(w);
    s_.zf = res == 0;
    s_.sf = (res >> (8 * w - 1)) & 1;
    s_.pf = std::popcount(res & 0xff) % 2 == 0;
  }
  void logic_flags(std::uint64_t res, unsigned w) {
    s_.cf = s_.of = false;
    zsp(res, w);
  }
  void sub_flags(std::uint64_t a, std::uint64_t b, unsigned w, bool borrow = false) {
    std::uint64_t res = (a - b - borrow) & detail::mask_bytes(w);
    s_.cf = static_cast<unsigned __int128>(a) < static_cast<unsigned __int128>(b) + borrow;
    bool sa = detail::sign_extend(a, w) < 0, sb = detail::sign_extend(b, w) < 0, sr = detail::sign_extend(res, w) < 0;
    s_.of = sa != sb && sr != sa;
    zsp(res, w);
  }
  void add_flags(std::uint64_t a, std::uint64_t b, unsigned w, bool carry = false) {
    std::uint64_t M = detail::mask_bytes(w);
    std::uint64_t res = (a + b + carry) & M;
    s_.cf = static_cast<unsigned __int128>(a) + b + carry > M;
    bool sa = detail::sign_extend(a, w) < 0, sb = detail::sign_extend(b, w) < 0, sr = detail::sign_extend(res, w) < 0;
    s_.of = sa == sb && sr != sa;
    zsp(res, w);
  }

  void alu() {
    using detail::sign_extend;
    const auto& ops = ins_.operands;
    const std::string& m = ins_.mnemonic;
    if (m == "mov") return put(ops[1], get(ops[0], width(ops[1])));
    if (m == "movz") return put(ops[1], get(ops[0], width(ops[0])));
    if (m == "movs") {
      unsigned sw = width(ops[0]);
      return put(ops[1], static_cast<std::uint64_t>(sign_extend(get(ops[0], sw), sw)) & detail::mask_bytes(width(ops[1])));
    }
    if (m == "cltq" || m == "cdqe") {
      s_.r(Reg::rax) = static_cast<std::uint64_t>(sign_extend(s_.r(Reg::rax) & 0xffffffff, 4));
      return;
    }
    if (m == "cwtl") {
      s_.r(Reg::rax) = static_cast<std::uint64_t>(sign_extend(s_.r(Reg::rax) & 0xffff, 2)) & 0xffffffff;
      return;
    }
    if (m == "cqto" || m == "cqo") {
      s_.r(Reg::rdx) = (s_.r(Reg::rax) >> 63) ? ~0ull : 0;
      return;
    }
    if (m == "cltd" || m == "cdq") {
      s_.r(Reg::rdx) = ((s_.r(Reg::rax) >> 31) & 1) ? 0xffffffffull : 0;
      return;
    }
    if (m.starts_with("set")) return put(ops[0], detail::condition(s_, std::string_view(m).substr(3)) ? 1 : 0);
    if (m.starts_with("cmov")) {
      unsigned w = width(ops[1]);
      std::uint64_t src = get(ops[0], w);
      return put(ops[1], detail::condition(s_, std::string_view(m).substr(4)) ? src : get(ops[1], w));
    }
    unsigned w = width(ops.back());
    std::uint64_t M = detail::mask_bytes(w);
    unsigned bits = 8 * w;
    auto msb = [&](std::uint64_t v) { return ((v >> (bits - 1)) & 1) != 0; };
    if (m == "bswap") {
      std::uint64_t a = get(ops[0], w), res = 0;
      for (unsigned i = 0; i < w; ++i) res = (res << 8) | ((a >> (8 * i)) & 0xff);
      return put(ops[0], res);
    }
    if (m == "test") return logic_flags(get(ops[1], w) & get(ops[0], w), w);
    if (m == "not") return put(ops[0], ~get(ops[0], w) & M);
    if (m == "neg") {
      std::uint64_t a = get(ops[0], w);
      sub_flags(0, a, w);
      return put(ops[0], (0 - a) & M);
    }
    if (m == "inc" || m == "dec") {
      std::uint64_t a = get(ops[0], w);
      bool cf = s_.cf;
      if (m == "inc") add_flags(a, 1, w);
      else sub_flags(a, 1, w);
      s_.cf = cf;
      return put(ops[0], (m == "inc" ? a + 1 : a - 1) & M);
    }
    if (m == "imul") {
      if (ops.size() != 2 && ops.size() != 3) throw SimError("one-operand imul is not modelled");
      std::int64_t x = sign_extend(get(ops[ops.size() - 2], w), w);
      std::int64_t y = ops.size() == 3 ? sign_extend(std::get<Imm>(ops[0]).value, 4) : sign_extend(get(ops[1], w), w);
      __int128 full = static_cast<__int128>(x) * y;
      std::uint64_t res = static_cast<std::uint64_t>(full) & M;
      s_.cf = s_.of = full != static_cast<__int128>(sign_extend(res, w));
      zsp(res, w);
      return put(ops.back(), res);
    }
    if (m == "shl" || m == "sal" || m == "shr" || m == "sar" || m == "rol" || m == "ror") {
      std::uint64_t c = (ops.size() == 2 ? get(ops[0], 1) : 1) & (w == 8 ? 63 : 31);
      if (c == 0) return;
      std::uint64_t a = get(ops.back(), w);
      std::uint64_t res;
      if (m == "rol" || m == "ror") {
        unsigned k = static_cast<unsigned>(c % bits);
        res = k == 0 ? a : m == "rol" ? (a << k) | (a >> (bits - k)) : (a >> k) | (a << (bits - k));
        res &= M;
        s_.cf = m == "rol" ? (res & 1) : msb(res);
        s_.of = m == "rol" ? msb(res) != s_.cf : msb(res) != (((res >> (bits - 2)) & 1) != 0);
        return put(ops.back(), res);
      }
      if (m == "shr") {
        res = a >> c;
        s_.cf = (a >> (c - 1)) & 1;
        s_.of = msb(a);
      } else if (m == "sar") {
        std::int64_t sa = sign_extend(a, w);
        res = static_cast<std::uint64_t>(sa >> c);
        s_.cf = (sa >> (c - 1)) & 1;
        s_.of = false;
      } else {
        res = c >= 64 ? 0 : a << c;
        s_.cf = c <= bits && ((a >> (bits - c)) & 1);
        s_.of = msb(res & M) != s_.cf;
      }
      res &= M;
      zsp(res, w);
      return put(ops.back(), res);
    }
    std::uint64_t a = get(ops[1], w), b = get(ops[0], w), res;
    if (m == "add" || m == "adc") {
      bool carry = m == "adc" && s_.cf;
      res = (a + b + carry) & M;
      add_flags(a, b, w, carry);
    } else if (m == "sub" || m == "sbb") {
      bool borrow = m == "sbb" && s_.cf;
      res = (a - b - borrow) & M;
      sub_flags(a, b, w, borrow);
    } else if (m == "and") {
      res = a & b;
      logic_flags(res, w);
    } else if (m == "or") {
      res = a | b;
      logic_flags(res, w);
    } else if (m == "xor") {
      res = a ^ b;
      logic_flags(res, w);
    } else {
      throw SimError("unmodelled instruction at " + sgxpectre::detail::hex(ins_.address) + ": " + ins_.text);
    }
    put(ops[1], res);
  }

  ArchState& s_;
  const Instruction& ins_;
  StoreBuffer& mem_;
};

// ---- trace -------------------------------------------------------------------

enum class EventKind : std::uint8_t { predict, fill, squash, retire, fault, mode_switch, stall, truncated };

inline std::string_view event_kind_name(EventKind k) {
  static constexpr std::array<std::string_view, 8> n = {"predict", "fill",  "squash", "retire",
                                                        "fault",   "mode-switch", "stall", "truncated"};
  return n[static_cast<std::size_t>(k)];
}

struct TraceEvent {
  std::uint64_t cycle = 0;
  EventKind kind = EventKind::retire;
  std::uint64_t address = 0;
  std::string detail;
};

inline std::string format_trace(const std::vector<TraceEvent>& events) {
  std::ostringstream os;
  for (const auto& e : events) {
    os << e.cycle << ' ' << event_kind_name(e.kind) << ' ' << sgxpectre::detail::hex(e.address);
    if (!e.detail.empty()) os << ' ' << e.detail;
    os << '\n';
  }
  return os.str();
}

// ---- race profile ------------------------------------------------------------

// D1: branch-target load. I1: transient fetch. D2: transient in-enclave data
// access. D3: transient access outside the enclave.
enum class AccessClass : std::uint8_t { d1, i1, d2, d3 };

inline std::string_view access_class_name(AccessClass c) {
  static constexpr std::array<std::string_view, 4> n = {"D1", "I1", "D2", "D3"};
  return n[static_cast<std::size_t>(c)];
}

struct TimedAccess {
  AccessClass cls = AccessClass::d1;
  std::uint64_t address = 0;
  std::uint64_t issue = 0;
  std::uint64_t complete = 0;
  bool performed = false;
};

struct Speculation {
  std::uint64_t branch = 0;
  std::uint64_t predicted = 0;
  std::uint64_t actual = 0;
  std::string source;  // "rsb" or "btb"
  std::uint64_t dispatch = 0;
  std::uint64_t resolve = 0;  // completion of D1
  std::vector<TimedAccess> accesses;
  unsigned transient_instructions = 0;

  // True when the D3 fill raced ahead of branch resolution.
  std::optional<bool> d3_won() const {
    for (const auto& a : accesses)
      if (a.cls == AccessClass::d3) return resolve > a.complete;
    return std::nullopt;
  }
};

// ---- core --------------------------------------------------------------------

enum class StopReason : std::uint8_t { exited, paused, left_program, budget, fault_unhandled };

inline std::string_view stop_reason_name(StopReason r) {
  static constexpr std::array<std::string_view, 5> n = {"exited", "paused", "left-program", "budget",
                                                        "fault-unhandled"};
  return n[static_cast<std::size_t>(r)];
}

struct RunResult {
  StopReason reason = StopReason::exited;
  std::string diagnostic;
};

enum class AccessKind : std::uint8_t { load, store, fetch };

struct Fault {
  std::uint64_t address = 0;  // faulting linear address
  std::uint64_t rip = 0;
  bool fetch = false;
};

class Core;
// Runs in normal mode after the AEX; returning true resumes the enclave.
using FaultHandler = std::function<bool(Core&, const Fault&)>;

inline constexpr std::uint64_t kDefaultAep = 0x7ff000001000ull;
inline constexpr std::uint64_t kRsbFillTarget = 0x7ff000002000ull;

class Core {
 public:
  explicit Core(const Listing& program, CoreConfig cfg = {}, std::shared_ptr<Btb> btb = nullptr, std::uint8_t id = 0)
      : program_(std::make_shared<const Listing>(cfg.countermeasures.retpoline ? apply_retpoline_impl(program)
                                                                                 : program)),
        cfg_(cfg),
        btb_(btb ? std::move(btb) : std::make_shared<Btb>(cfg.btb_index_bits)),
        id_(id) {
    if (!cfg_.latencies.valid()) throw SimError("invalid latency configuration");
    if (program_->enclave_range && program_->entry_symbol && !program_->tcs_addresses.empty())
      image_ = EnclaveImage::from_listing(*program_);
    for (const auto& blob : program_->secrets) memory_.write_bytes(blob.address, blob.bytes);
  }

  static Listing apply_retpoline_impl(const Listing& l);

  const Listing& program() const { return *program_; }
  const CoreConfig& config() const { return cfg_; }
  CoreConfig& config() { return cfg_; }
  std::uint8_t id() const { return id_; }
  ArchState& state() { return state_; }
  const ArchState& state() const { return state_; }
  Memory& memory() { return memory_; }
  const Memory& memory() const { return memory_; }
  CacheHierarchy& cache() { return cache_; }
  const CacheHierarchy& cache() const { return cache_; }
  Translation& translation() { return translation_; }
  Btb& btb() { return *btb_; }
  std::shared_ptr<Btb> shared_btb() const { return btb_; }
  Rsb& rsb() { return rsb_; }
  CpuMode mode() const { return mode_; }
  std::uint64_t cycle() const { return cycle_; }
  const std::optional<EnclaveImage>& enclave() const { return image_; }
  std::optional<EnclaveImage>& enclave() { return image_; }
  std::size_t current_tcs() const { return tcs_; }
  const std::vector<TraceEvent>& trace() const { return trace_; }
  const std::vector<Speculation>& speculations() const { return speculations_; }
  void clear_trace() {
    trace_.clear();
    speculations_.clear();
  }
  void set_aep(std::uint64_t a) { aep_ = a; }

  // ---- predictors ----

  Btb::Query query(bool exact = false) const {
    return {id_, mode_, cfg_.countermeasures.stibp, cfg_.countermeasures.ibrs, exact};
  }
  void btb_update(std::uint64_t src, std::uint64_t dst) { btb_->update(src, dst, id_, mode_); }
  std::optional<std::uint64_t> btb_predict(std::uint64_t src) const { return btb_->predict(src, query()); }

  void rsb_push(std::uint64_t a) { rsb_.push(a); }
  // Return prediction: RSB top, else the BTB entry for the return site when
  // the CPU model falls back on underflow.
  std::optional<std::pair<std::uint64_t, std::string>> predict_return(std::uint64_t site) {
    if (auto a = rsb_.pop()) return std::pair{*a, std::string("rsb")};
    if (!cfg_.rsb_fallback()) return std::nullopt;
    if (auto t = btb_->predict(site, query(cfg_.ret_poison_requires_exact_match))) return std::pair{*t, std::string("btb")};
    return std::nullopt;
  }

  // ---- memory hierarchy ----

  unsigned peek_latency(std::uint64_t a) const {
    static constexpr std::array<unsigned Latencies::*, 4> level = {&Latencies::l1, &Latencies::l2, &Latencies::llc,
                                                                   &Latencies::memory};
    const Latencies& l = cfg_.latencies;
    return translation_.cost(page_of(a), l) + l.*level[cache_.level_of(a)];
  }

  unsigned mem_access(std::uint64_t a, AccessKind = AccessKind::load) {
    unsigned lat = peek_latency(a);
    translation_.install(page_of(a));
    cache_.access(a);
    return lat;
  }

  void clflush(std::uint64_t a) { cache_.flush(a); }
  void set_reserved_bit(std::uint64_t page, bool on) { translation_.set_reserved(page_of(page), on); }
  void on_fault(FaultHandler h) { handler_ = std::move(h); }
  void interrupt_at(std::optional<std::uint64_t> rip) { interrupt_ = rip; }
  void interrupt_at_cycle(std::optional<std::uint64_t> c) { interrupt_cycle_ = c; }

  // ---- enclave transitions ----

  void eenter(std::size_t t) {
    const Tcs& tc = tcs_at(t);
    if (mode_ != CpuMode::normal) throw SimError("EENTER outside normal mode");
    if (tc.cssa >= tc.nssa) throw SimError("EENTER with every SSA frame in use");
    tcs_ = t;
    ursp_ = state_.r(Reg::rsp);
    urbp_ = state_.r(Reg::rbp);
    state_.r(Reg::rax) = tc.cssa;
    state_.r(Reg::rcx) = aep_;
    state_.gs_base = tc.thread_data;
    state_.rip = tc.entry;
    mode_ = CpuMode::enclave;
    if (cfg_.countermeasures.rsb_refill_on_entry)
      for (std::size_t i = 0; i < Rsb::kCapacity; ++i) rsb_.push(kRsbFillTarget);
    transition(Transition::eenter, tc.entry, "eenter tcs=" + std::to_string(t));
  }

  void eexit() {
    if (mode_ != CpuMode::enclave) throw SimError("EEXIT outside enclave mode");
    leave_enclave();
    state_.rip = state_.r(Reg::rbx);
    transition(Transition::eexit, state_.rip, "eexit");
  }

  void aex(std::string_view reason = "interrupt") {
    if (mode_ != CpuMode::enclave) throw SimError("AEX outside enclave mode");
    Tcs& tc = image_->tcs[tcs_];
    if (tc.cssa >= tc.nssa) throw SimError("AEX with no free SSA frame");
    std::uint64_t g = image_->gpr_address(tcs_, tc.cssa);
    for (std::size_t r = 0; r < kNumGprs; ++r) memory_.write(g + 8 * r, state_.regs[r], 8);
    memory_.write(g + gprsgx::rflags, state_.rflags(), 8);
    memory_.write(g + gprsgx::rip, state_.rip, 8);
    memory_.write(g + gprsgx::ursp, ursp_, 8);
    memory_.write(g + gprsgx::urbp, urbp_, 8);
    memory_.write(g + gprsgx::exitinfo, 0, 8);
    memory_.write(g + gprsgx::fsbase, state_.fs_base, 8);
    memory_.write(g + gprsgx::gsbase, state_.gs_base, 8);
    memory_.write(g - 4, 0, 4);
    for (std::uint64_t a = line_of(g - 4); a < g + kGprSgxSize; a += kLineSize) cache_.access(a);
    translation_.set_pte_cached(page_of(g));
    ++tc.cssa;
    std::uint64_t at = state_.rip;
    leave_enclave();
    state_.regs.fill(0);
    state_.r(Reg::rsp) = ursp_;
    state_.r(Reg::rbp) = urbp_;
    state_.r(Reg::rax) = 3;
    state_.r(Reg::rbx) = tc.address;
    state_.r(Reg::rcx) = aep_;
    state_.set_rflags(0);
    state_.rip = aep_;
    transition(Transition::aex, at, "aex " + std::string(reason));
  }

  void eresume(std::size_t t) {
    Tcs& tc = tcs_at(t);
    if (mode_ != CpuMode::normal) throw SimError("ERESUME outside normal mode");
    if (tc.cssa == 0) throw SimError("ERESUME with no saved SSA frame");
    --tc.cssa;
    tcs_ = t;
    std::uint64_t g = image_->gpr_address(t, tc.cssa);
    for (std::size_t r = 0; r < kNumGprs; ++r) state_.regs[r] = memory_.read(g + 8 * r, 8);
    state_.set_rflags(memory_.read(g + gprsgx::rflags, 8));
    state_.rip = memory_.read(g + gprsgx::rip, 8);
    ursp_ = memory_.read(g + gprsgx::ursp, 8);
    urbp_ = memory_.read(g + gprsgx::urbp, 8);
    state_.fs_base = memory_.read(g + gprsgx::fsbase, 8);
    state_.gs_base = memory_.read(g + gprsgx::gsbase, 8);
    mode_ = CpuMode::enclave;
    transition(Transition::eresume, state_.rip, "eresume tcs=" + std::to_string(t));
  }

  // Starts executing at `rip` in the current mode without a transition.
  void begin(std::uint64_t rip) { state_.rip = rip; }

  // ---- execution ----

  RunResult run(std::uint64_t budget = 1'000'000) {
    if (budget == 0) throw SimError("run budget must be positive");
    std::uint64_t start = cycle_;
    for (;;) {
      if (cycle_ - start >= budget) {
        event(EventKind::truncated, state_.rip, "budget exhausted");
        return {StopReason::budget, "cycle budget exhausted"};
      }
      std::uint64_t rip = state_.rip;
      if (mode_ == CpuMode::enclave && interrupt_ && *interrupt_ == rip) {
        interrupt_.reset();
        aex("interrupt");
        return {StopReason::paused, "interrupted at " + sgxpectre::detail::hex(rip)};
      }
      if (mode_ == CpuMode::enclave && interrupt_cycle_ && cycle_ >= *interrupt_cycle_) {
        interrupt_cycle_.reset();
        aex("interrupt");
        return {StopReason::paused, "interrupted at cycle " + std::to_string(cycle_)};
      }
      const Instruction* ins = program_->find(rip);
      if (!ins) return {StopReason::left_program, "no instruction at " + sgxpectre::detail::hex(rip)};

      ArchState next = state_;
      StoreBuffer buf(memory_);
      std::optional<Fault> fault;
      if (faults_on(rip)) fault = Fault{rip, rip, true};
      StepResult r{};
      std::vector<MemAccess> log;
      if (!fault) {
        translation_.install(page_of(rip));
        cache_.access(rip);
        r = Executor::step(next, *ins, buf);
        log = buf.take_log();
        for (const auto& a : log)
          if (faults_on(a.address) || faults_on(a.address + a.width - 1)) {
            fault = Fault{a.address, rip, false};
            break;
          }
      }
      if (fault) {
        event(EventKind::fault, fault->address, std::string(fault->fetch ? "fetch" : "data") + " rip=" +
                                                    sgxpectre::detail::hex(rip));
        aex("fault");
        if (!handler_) return {StopReason::fault_unhandled, "page fault at " + sgxpectre::detail::hex(fault->address) +
                                                                " with no handler"};
        if (!handler_(*this, *fault)) return {StopReason::paused, "paused at fault"};
        eresume(tcs_);
        continue;
      }

      bool target_load = r.kind == StepKind::ret ||
                         ((r.kind == StepKind::indirect_jump || r.kind == StepKind::indirect_call) &&
                          std::holds_alternative<MemRef>(ins->operands[0]));
      std::uint64_t t = cycle_;
      unsigned d1 = 0, rest = 0;
      for (std::size_t i = 0; i < log.size(); ++i) {
        unsigned lat = mem_access(log[i].address, log[i].store ? AccessKind::store : AccessKind::load);
        if (i == 0 && target_load) d1 = lat;
        else rest += lat;
      }
      buf.commit(memory_);
      state_ = next;
      state_.rip = r.next_rip;

      switch (r.kind) {
        case StepKind::ret:
        case StepKind::indirect_jump:
        case StepKind::indirect_call:
          indirect(*ins, r, t, d1);
          break;
        case StepKind::call:
          if (r.next_rip != ins->next_address()) rsb_.push(ins->next_address());
          cycle_ = t + 1 + rest;
          break;
        case StepKind::enclu_other:
          throw SimError("unsupported ENCLU leaf at " + sgxpectre::detail::hex(rip));
        default:
          cycle_ = t + 1 + rest;
      }
      event(EventKind::retire, rip, format_mnemonic(*ins));
      if (r.kind == StepKind::eexit) {
        eexit();
        return {StopReason::exited, ""};
      }
    }
  }

 private:
  Tcs& tcs_at(std::size_t t) {
    if (!image_) throw SimError("program has no enclave image");
    if (t >= image_->tcs.size()) throw SimError("no TCS " + std::to_string(t));
    return image_->tcs[t];
  }

  bool faults_on(std::uint64_t a) const { return mode_ == CpuMode::enclave && translation_.reserved(page_of(a)); }

  void leave_enclave() {
    mode_ = CpuMode::normal;
    if (image_) translation_.flush_tlb_range(image_->lo, image_->hi);
  }

  void transition(Transition t, std::uint64_t addr, std::string detail) {
    if (cfg_.countermeasures.ibpb_events.contains(t)) {
      btb_->clear();
      detail += " ibpb";
    }
    event(EventKind::mode_switch, addr, std::move(detail));
  }

  void event(EventKind k, std::uint64_t addr, std::string detail = {}, std::optional<std::uint64_t> at = {}) {
    trace_.push_back({at.value_or(cycle_), k, addr, std::move(detail)});
  }

  void indirect(const Instruction& ins, const StepResult& r, std::uint64_t t, unsigned d1) {
    std::uint64_t actual = r.next_rip;
    std::uint64_t resolve = t + std::max(1u, d1);
    std::optional<std::pair<std::uint64_t, std::string>> pred;
    if (r.kind == StepKind::ret) {
      pred = predict_return(ins.address);
    } else {
      if (auto p = btb_->predict(ins.address, query())) pred = std::pair{*p, std::string("btb")};
      if (r.kind == StepKind::indirect_call) rsb_.push(ins.next_address());
    }
    if (!cfg_.speculation) pred.reset();
    if (!pred) {
      event(EventKind::stall, ins.address, "until " + std::to_string(resolve), t);
      cycle_ = resolve;
    } else {
      event(EventKind::predict, ins.address, pred->second + " " + sgxpectre::detail::hex(pred->first), t);
      if (pred->first == actual) {
        cycle_ = t + 1;
      } else {
        transient(ins, pred->first, pred->second, actual, t, resolve);
        cycle_ = resolve;
      }
    }
    if (r.kind != StepKind::ret) btb_->update(ins.address, actual, id_, mode_);
  }

  AccessClass classify(std::uint64_t a) const {
    return image_ && image_->contains(a) ? AccessClass::d2 : AccessClass::d3;
  }

  void transient(const Instruction& branch, std::uint64_t pc, const std::string& source, std::uint64_t actual,
                 std::uint64_t t0, std::uint64_t resolve) {
    Speculation sp;
    sp.branch = branch.address;
    sp.predicted = pc;
    sp.actual = actual;
    sp.source = source;
    sp.dispatch = t0;
    sp.resolve = resolve;
    std::uint64_t clock = t0 + 1;
    auto attempt = [&](std::uint64_t a, AccessClass cls) {
      if (faults_on(a)) return false;
      unsigned walk = translation_.cost(page_of(a), cfg_.latencies);
      std::uint64_t done = clock + peek_latency(a);
      bool performed = done < resolve;
      sp.accesses.push_back({cls, a, clock, done, performed});
      // A walk that finishes before the squash still leaves its translation.
      if (clock + walk < resolve) translation_.install(page_of(a));
      if (!performed) return false;
      cache_.access(a);
      event(EventKind::fill, a, "transient " + std::string(access_class_name(cls)), done);
      clock = done;
      return true;
    };

    if (attempt(pc, AccessClass::i1)) {
      ArchState ts = state_;
      ts.rip = pc;
      StoreBuffer buf(memory_);
      std::uint64_t dispatch = clock;
      while (sp.transient_instructions < cfg_.transient_cap && dispatch < resolve) {
        const Instruction* ins = program_->find(ts.rip);
        if (!ins || faults_on(ts.rip)) break;
        if (ins->cls == InstrClass::serialize || ins->cls == InstrClass::enclu || is_indirect_branch(ins->cls)) break;
        StepResult r;
        try {
          r = Executor::step(ts, *ins, buf);
        } catch (const SimError&) {
          break;
        }
        clock = dispatch;
        bool ok = true;
        for (const auto& a : buf.take_log())
          if (!attempt(a.address, classify(a.address))) {
            ok = false;
            break;
          }
        if (!ok) break;
        ++sp.transient_instructions;
        dispatch = std::max(dispatch + 1, clock);
        ts.rip = r.next_rip;
      }
    }
    event(EventKind::squash, branch.address,
          std::to_string(sp.transient_instructions) + " transient, retire at " + sgxpectre::detail::hex(actual), resolve);
    speculations_.push_back(std::move(sp));
  }

  std::shared_ptr<const Listing> program_;
  CoreConfig cfg_;
  std::shared_ptr<Btb> btb_;
  std::uint8_t id_;
  ArchState state_;
  Memory memory_;
  CacheHierarchy cache_;
  Translation translation_;
  Rsb rsb_;
  CpuMode mode_ = CpuMode::normal;
  std::uint64_t cycle_ = 0;
  std::optional<EnclaveImage> image_;
  std::size_t tcs_ = 0;
  std::uint64_t ursp_ = 0, urbp_ = 0;
  std::uint64_t aep_ = kDefaultAep;
  std::optional<std::uint64_t> interrupt_;
  std::optional<std::uint64_t> interrupt_cycle_;
  FaultHandler handler_;
  std::vector<TraceEvent> trace_;
  std::vector<Speculation> speculations_;
};

// ---- retpoline ---------------------------------------------------------------

namespace detail {

inline Instruction assemble(std::uint64_t address, std::uint32_t size, const std::string& text) {
  std::ostringstream os;
  os << std::hex << address << ": " << text << "\n";
  Listing l = parse_listing(os.str());
  Instruction ins = l.instructions.at(0);
  ins.size = size;
  ins.bytes.clear();
  return ins;
}

}  // namespace detail

// Rewrites every indirect jump/call into a jump/call to a return trampoline
// appended after the program: the trampoline's call parks speculation in a
// pause/lfence loop and its ret consumes the real target from the stack.
inline Listing Core::apply_retpoline_impl(const Listing& in) {
  Listing out = in;
  std::uint64_t end = 0;
  for (const auto& ins : in.instructions) end = std::max(end, ins.next_address());
  std::uint64_t next = (end + 0x3f) & ~0x3full;
  std::map<Reg, std::uint64_t> by_reg;
  std::vector<Instruction> extra;

  auto thunk = [&](const std::string& body_a, const std::string& body_b) {
    std::uint64_t t = next;
    next += 0x40;
    auto hex = [](std::uint64_t v) { return sgxpectre::detail::hex(v).substr(2); };
    extra.push_back(detail::assemble(t, 5, "callq " + hex(t + 0x10)));
    extra.push_back(detail::assemble(t + 5, 2, "pause"));
    extra.push_back(detail::assemble(t + 7, 3, "lfence"));
    extra.push_back(detail::assemble(t + 10, 6, "jmp " + hex(t + 5)));
    if (body_b.empty()) {
      extra.push_back(detail::assemble(t + 0x10, 4, body_a));
      extra.push_back(detail::assemble(t + 0x14, 1, "retq"));
    } else {
      extra.push_back(detail::assemble(t + 0x10, 7, body_a));
      extra.push_back(detail::assemble(t + 0x17, 4, body_b));
      extra.push_back(detail::assemble(t + 0x1b, 1, "retq"));
    }
    out.symbols["__retpoline_" + sgxpectre::detail::hex(t).substr(2)] = t;
    return t;
  };

  for (auto& ins : out.instructions) {
    if (ins.cls != InstrClass::indirect_jump && ins.cls != InstrClass::indirect_call) continue;
    bool call = ins.cls == InstrClass::indirect_call;
    std::uint64_t t;
    if (const auto* v = std::get_if<RegView>(&ins.operands[0])) {
      auto it = by_reg.find(v->reg);
      t = it != by_reg.end() ? it->second
                             : (by_reg[v->reg] = thunk("mov %" + std::string(reg_name(v->reg)) + ",(%rsp)", ""));
    } else {
      MemRef m = std::get<MemRef>(ins.operands[0]);
      m.width = 8;
      std::uint64_t push_at = next + 0x10;
      if (m.base == Reg::rsp) m.disp += call ? 16 : 8;
      if (m.base == Reg::rip) {
        std::uint64_t target = ins.next_address() + static_cast<std::uint64_t>(m.disp);
        m.disp = static_cast<std::int64_t>(target - (push_at + 7));
      }
      t = thunk("pushq " + format_operand(m), "popq (%rsp)");
    }
    std::string text = std::string(call ? "callq " : "jmpq ") + sgxpectre::detail::hex(t).substr(2);
    ins = detail::assemble(ins.address, ins.size, text);
  }
  out.instructions.insert(out.instructions.end(), extra.begin(), extra.end());
  if (out.enclave_range && next > out.enclave_range->second) out.enclave_range->second = next;
  out.reindex();
  return out;
}

inline Listing apply_retpoline(const Listing& in) { return Core::apply_retpoline_impl(in); }

}  // namespace sgxpectre::uarch
