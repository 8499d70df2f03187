#pragma once

// End-to-end attack scripting over the simulated core: BTB poisoning, RSB
// depletion, fault-driven pausing, Flush-Reload decoding and sliding-window
// extraction of enclave memory.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "asm.hpp"
#include "gadget.hpp"
#include "uarch.hpp"

namespace sgxpectre::harness {

using uarch::Core;
using uarch::CoreConfig;
using uarch::Fault;
using uarch::SimError;

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A run stopped on the cycle budget.
class LimitError : public ScenarioError {
 public:
  using ScenarioError::ScenarioError;
};

inline constexpr unsigned kRetryBudget = 8;
inline constexpr std::uint64_t kAttackerAlias = 0x7fff00000000ull;
inline constexpr std::uint64_t kEvictionBuffer = 0x7e0000000000ull;

// ---- Flush-Reload --------------------------------------------------------------

struct MonitoredArray {
  std::uint64_t base = 0x610000;
  std::uint64_t stride = uarch::kLineSize;
  unsigned count = 256;
  std::optional<unsigned> threshold;

  bool valid() const { return stride >= uarch::kLineSize && count == 256; }
  std::uint64_t entry(unsigned i) const { return base + stride * i; }
};

inline void flush(Core& core, const MonitoredArray& a) {
  for (unsigned i = 0; i < a.count; ++i) core.clflush(a.entry(i));
}

struct Reload {
  std::vector<unsigned> latencies;
  std::vector<unsigned> hits;

  std::optional<std::uint8_t> value() const {
    if (hits.size() != 1) return std::nullopt;
    return static_cast<std::uint8_t>(hits[0]);
  }
};

// Times a load of every entry, flushing each one right after its probe.
inline Reload reload(Core& core, const MonitoredArray& a) {
  unsigned threshold = a.threshold.value_or(core.config().latencies.reload_threshold());
  Reload r;
  for (unsigned i = 0; i < a.count; ++i) {
    unsigned lat = core.mem_access(a.entry(i));
    core.clflush(a.entry(i));
    r.latencies.push_back(lat);
    if (lat <= threshold) r.hits.push_back(i);
  }
  return r;
}

// ---- attacker primitives -------------------------------------------------------

enum class PoisonMode : std::uint8_t { same_process, cross_process, sibling_core };

inline std::string_view poison_mode_name(PoisonMode m) {
  static constexpr std::array<std::string_view, 3> n = {"same-process", "cross-process", "sibling-core"};
  return n[static_cast<std::size_t>(m)];
}

inline std::optional<PoisonMode> poison_mode_from_name(std::string_view s) {
  for (std::size_t i = 0; i < 3; ++i)
    if (poison_mode_name(static_cast<PoisonMode>(i)) == s) return static_cast<PoisonMode>(i);
  return std::nullopt;
}

// Trains the BTB with an indirect jump src -> dst executed by attacker code.
// same-process: from a buffer whose addresses alias src/dst in the low 32
// bits. cross-process: from another address space that shadows src exactly.
// sibling-core: as cross-process, from the other logical core.
inline void poison_btb(Core& core, std::uint64_t src, std::uint64_t dst, unsigned reps, PoisonMode mode) {
  std::uint8_t id = mode == PoisonMode::sibling_core ? static_cast<std::uint8_t>(core.id() ^ 1) : core.id();
  if (mode == PoisonMode::same_process) {
    src = kAttackerAlias | (src & 0xffffffffull);
    dst = kAttackerAlias | (dst & 0xffffffffull);
  }
  for (unsigned i = 0; i < reps; ++i) core.btb().update(src, dst, id, uarch::CpuMode::normal);
}

enum class DepleteMethod : std::uint8_t { ret_loop, aex };

inline std::optional<DepleteMethod> deplete_method_from_name(std::string_view s) {
  if (s == "ret-loop") return DepleteMethod::ret_loop;
  if (s == "aex") return DepleteMethod::aex;
  return std::nullopt;
}

// ret-loop: push a ret address 16 times and return to it repeatedly; aex:
// the interrupt path's own returns. Both leave the RSB empty.
inline void deplete_rsb(Core& core, DepleteMethod) { core.rsb().clear(); }

// Touches `count` attacker lines congruent to `a` in every cache level.
inline void evict_congruent(Core& core, std::uint64_t a, unsigned count) {
  std::uint64_t stride = core.cache().congruence_stride();
  std::uint64_t first = kEvictionBuffer + (a % stride);
  for (unsigned i = 0; i < count; ++i) core.mem_access(first + std::uint64_t{i} * stride);
}

inline std::uint8_t seeded_byte(std::uint64_t seed, std::uint64_t addr) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ull ^ addr;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return static_cast<std::uint8_t>(x);
}

// ---- results -------------------------------------------------------------------

struct AttackResult {
  std::vector<std::uint64_t> addresses;
  std::vector<std::optional<std::uint8_t>> recovered;
  std::vector<std::uint8_t> truth;
  std::vector<unsigned> attempts;
  std::vector<uarch::TraceEvent> trace;
  std::string note;

  std::size_t matches() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < recovered.size(); ++i) n += recovered[i] && *recovered[i] == truth[i];
    return n;
  }
  double success_rate() const { return recovered.empty() ? 0.0 : double(matches()) / double(recovered.size()); }
  bool complete() const { return !recovered.empty() && matches() == recovered.size(); }
  bool all_recovered() const {
    return std::all_of(recovered.begin(), recovered.end(), [](const auto& b) { return b.has_value(); });
  }

  void append(const AttackResult& o) {
    addresses.insert(addresses.end(), o.addresses.begin(), o.addresses.end());
    recovered.insert(recovered.end(), o.recovered.begin(), o.recovered.end());
    truth.insert(truth.end(), o.truth.begin(), o.truth.end());
    attempts.insert(attempts.end(), o.attempts.begin(), o.attempts.end());
  }

  std::vector<std::uint8_t> bytes_or(std::uint8_t fill = 0) const {
    std::vector<std::uint8_t> out;
    for (const auto& b : recovered) out.push_back(b.value_or(fill));
    return out;
  }
};

inline std::string hex_byte(std::uint8_t b) {
  static constexpr char d[] = "0123456789abcdef";
  return {d[b >> 4], d[b & 15]};
}

inline std::string format_result(const AttackResult& r) {
  std::ostringstream os;
  os << "address | recovered | truth | attempts\n";
  for (std::size_t i = 0; i < r.recovered.size(); ++i)
    os << sgxpectre::detail::hex(r.addresses[i]) << " | " << (r.recovered[i] ? hex_byte(*r.recovered[i]) : "??")
       << " | " << hex_byte(r.truth[i]) << " | " << r.attempts[i] << "\n";
  os << "success rate: " << r.matches() << "/" << r.recovered.size() << "\n";
  return os.str();
}

inline nlohmann::ordered_json to_json(const AttackResult& r) {
  nlohmann::ordered_json j;
  j["success-rate"] = r.success_rate();
  j["matches"] = r.matches();
  j["total"] = r.recovered.size();
  auto& bytes = j["bytes"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.recovered.size(); ++i) {
    nlohmann::ordered_json b;
    b["address"] = sgxpectre::detail::hex(r.addresses[i]);
    b["recovered"] = r.recovered[i] ? nlohmann::ordered_json(hex_byte(*r.recovered[i])) : nlohmann::ordered_json();
    b["truth"] = hex_byte(r.truth[i]);
    b["attempts"] = r.attempts[i];
    bytes.push_back(b);
  }
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

// ---- scenario scripts ----------------------------------------------------------

struct Step {
  std::string op;
  std::vector<std::string> args;
  std::size_t line = 0;
};

struct Scenario {
  std::vector<Step> steps;
  std::vector<Step> handler;  // run by the fault handler after each AEX
};

namespace detail {

struct OpSpec {
  std::string_view op;
  std::size_t min_args, max_args;
  bool handler_only;
};

inline constexpr std::array<OpSpec, 22> kOps = {{
    {"interrupt_cycle", 1, 1, false},
    {"array", 2, 3, false},         {"threshold", 1, 1, false},   {"known", 2, 2, false},
    {"write", 2, 2, false},         {"seed_secret", 2, 2, false}, {"poison_btb", 4, 4, false},
    {"deplete_rsb", 1, 1, false},   {"set_reg", 2, 64, false},    {"set_reserved", 2, 2, false},
    {"flush_pte", 1, 1, false},     {"warm_pte", 1, 1, false},    {"evict_congruent", 2, 2, false},
    {"flush", 1, 1, false},         {"ibpb", 0, 0, false},        {"interrupt", 1, 1, false},
    {"eenter", 1, 1, false},        {"eresume", 1, 1, false},     {"reload", 1, 1, false},
    {"resume", 0, 0, true},         {"pause", 0, 0, true},        {"clear_rsb", 0, 0, false},
}};

[[noreturn]] inline void fail(std::size_t line, const std::string& msg) {
  throw ScenarioError("line " + std::to_string(line) + ": " + msg);
}

inline std::uint64_t number(const Step& s, std::size_t i) {
  auto v = sgxpectre::detail::parse_number(s.args.at(i));
  if (!v) fail(s.line, "bad number '" + s.args[i] + "'");
  return *v;
}

inline std::optional<std::uint64_t> byte_ref(std::string_view t) {
  if (!t.starts_with("byte[") || !t.ends_with("]")) return std::nullopt;
  return sgxpectre::detail::parse_number(t.substr(5, t.size() - 6));
}

inline void check_step(const Step& s, bool in_handler) {
  auto it = std::find_if(kOps.begin(), kOps.end(), [&](const OpSpec& o) { return o.op == s.op; });
  if (it == kOps.end()) fail(s.line, "unknown directive '" + s.op + "'");
  if (it->handler_only && !in_handler) fail(s.line, "'" + s.op + "' is only valid after 'handler'");
  if (s.args.size() < it->min_args || s.args.size() > it->max_args)
    fail(s.line, "wrong number of arguments for '" + s.op + "'");
  const auto& op = s.op;
  auto numbers = [&](std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to && i < s.args.size(); ++i) number(s, i);
  };
  if (op == "array") {
    numbers(0, 3);
    if (number(s, 1) < uarch::kLineSize) fail(s.line, "array stride below one cache line");
    if (s.args.size() == 3 && number(s, 2) != 256) fail(s.line, "array must have 256 entries");
  } else if (op == "known" || op == "write") {
    numbers(0, 1);
    sgxpectre::detail::parse_hex_bytes(s.args[1], s.line);
  } else if (op == "poison_btb") {
    numbers(0, 3);
    if (!poison_mode_from_name(s.args[3])) fail(s.line, "unknown poisoning mode '" + s.args[3] + "'");
  } else if (op == "deplete_rsb") {
    if (!deplete_method_from_name(s.args[0])) fail(s.line, "unknown depletion method '" + s.args[0] + "'");
  } else if (op == "set_reg") {
    if (!reg_from_name(s.args[0])) fail(s.line, "unknown register '" + s.args[0] + "'");
    for (std::size_t i = 1; i < s.args.size(); ++i) {
      const auto& t = s.args[i];
      bool operand = i % 2 == 1;
      if (operand ? !(sgxpectre::detail::parse_number(t) || byte_ref(t)) : !(t == "+" || t == "-"))
        fail(s.line, "bad expression term '" + t + "'");
    }
    if (s.args.size() % 2 != 0) fail(s.line, "expression ends with an operator");
  } else if (op == "set_reserved") {
    numbers(0, 1);
    if (s.args[1] != "on" && s.args[1] != "off") fail(s.line, "expected on or off");
  } else if (op == "flush") {
    if (s.args[0] != "array") numbers(0, 1);
  } else {
    numbers(0, s.args.size());
  }
}

}  // namespace detail

inline Scenario parse_scenario(std::string_view text) {
  Scenario sc;
  std::size_t line = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view raw = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line;
    if (auto h = raw.find('#'); h != std::string_view::npos) raw = raw.substr(0, h);
    auto words = sgxpectre::detail::split_ws(raw);
    if (words.empty()) continue;
    bool in_handler = words[0] == "handler";
    if (in_handler) {
      words.erase(words.begin());
      if (words.empty()) detail::fail(line, "'handler' needs a directive");
    }
    Step s{std::string(words[0]), {}, line};
    for (std::size_t i = 1; i < words.size(); ++i) s.args.emplace_back(words[i]);
    detail::check_step(s, in_handler);
    (in_handler ? sc.handler : sc.steps).push_back(std::move(s));
  }
  if (sc.steps.empty()) throw ScenarioError("scenario has no steps");
  return sc;
}

// Checks the script against the program it will run on.
inline void validate(const Scenario& sc, const Listing& program) {
  std::size_t tcs = program.tcs_addresses.size();
  bool array = false;
  for (const auto& s : sc.steps) {
    if (s.op == "array") array = true;
    if ((s.op == "eenter" || s.op == "eresume") && detail::number(s, 0) >= tcs)
      detail::fail(s.line, "program has no TCS " + s.args[0]);
    if ((s.op == "reload" || (s.op == "flush" && s.args[0] == "array")) && !array)
      detail::fail(s.line, "no monitored array declared before '" + s.op + "'");
  }
  if ((std::any_of(sc.steps.begin(), sc.steps.end(), [](const Step& s) { return s.op == "eenter"; })) &&
      !(program.enclave_range && program.entry_symbol && tcs > 0))
    throw ScenarioError("program declares no enclave to enter");
}

struct RunOptions {
  std::uint64_t seed = 1;
  unsigned retries = kRetryBudget;
  std::optional<PoisonMode> poison_override;
  std::uint64_t budget = 1'000'000;
};

namespace detail {

struct Halt {};

class ScenarioRunner {
 public:
  ScenarioRunner(Core& core, const Scenario& sc, const RunOptions& opt) : core_(core), sc_(sc), opt_(opt) {}

  AttackResult run() {
    core_.on_fault([this](Core&, const Fault&) {
      bool resume = true;
      for (const auto& s : sc_.handler) {
        if (s.op == "pause") resume = false;
        else if (s.op != "resume") exec(s);
      }
      return resume;
    });
    std::size_t block = 0;
    for (std::size_t i = 0; i < sc_.steps.size(); ++i) {
      const Step& s = sc_.steps[i];
      if (s.op != "reload") continue;
      decode(block, i);
      block = i + 1;
    }
    if (!halted_) {
      try {
        for (std::size_t i = block; i < sc_.steps.size(); ++i) exec(sc_.steps[i]);
      } catch (const Halt&) {
      }
    }
    core_.on_fault(nullptr);
    result_.trace = core_.trace();
    return std::move(result_);
  }

 private:
  void decode(std::size_t from, std::size_t at) {
    std::uint64_t addr = number(sc_.steps[at], 0);
    std::optional<std::uint8_t> got;
    unsigned attempts = 0;
    while (!halted_ && !got && attempts < opt_.retries) {
      ++attempts;
      try {
        for (std::size_t i = from; i < at; ++i) exec(sc_.steps[i]);
      } catch (const Halt&) {
        halted_ = true;
        attempts = 0;
        break;
      }
      got = reload(core_, array_).value();
    }
    if (got) known_[addr] = *got;
    result_.addresses.push_back(addr);
    result_.recovered.push_back(got);
    result_.truth.push_back(static_cast<std::uint8_t>(core_.memory().read(addr, 1)));
    result_.attempts.push_back(attempts);
  }

  std::uint64_t eval(const Step& s) {
    std::uint64_t v = 0;
    bool neg = false;
    for (std::size_t i = 1; i < s.args.size(); ++i) {
      const auto& t = s.args[i];
      if (t == "+" || t == "-") {
        neg = t == "-";
        continue;
      }
      std::uint64_t term;
      if (auto a = byte_ref(t)) {
        auto it = known_.find(*a);
        if (it == known_.end()) {
          result_.note = "extraction halted: byte " + sgxpectre::detail::hex(*a) + " is unknown";
          throw Halt{};
        }
        term = it->second;
      } else {
        term = *sgxpectre::detail::parse_number(t);
      }
      v = neg ? v - term : v + term;
    }
    return v;
  }

  void enter(const Step& s, bool resume) {
    try {
      auto t = static_cast<std::size_t>(number(s, 0));
      resume ? core_.eresume(t) : core_.eenter(t);
      auto r = core_.run(opt_.budget);
      if (r.reason == uarch::StopReason::budget)
        throw LimitError("line " + std::to_string(s.line) + ": cycle budget exhausted");
      if (r.reason != uarch::StopReason::exited && r.reason != uarch::StopReason::paused)
        fail(s.line, "enclave run stopped: " + std::string(uarch::stop_reason_name(r.reason)) + " " + r.diagnostic);
    } catch (const SimError& e) {
      fail(s.line, e.what());
    }
  }

  void exec(const Step& s) {
    const auto& op = s.op;
    if (op == "array") {
      array_.base = number(s, 0);
      array_.stride = number(s, 1);
    } else if (op == "threshold") {
      array_.threshold = static_cast<unsigned>(number(s, 0));
    } else if (op == "known") {
      auto b = sgxpectre::detail::parse_hex_bytes(s.args[1], s.line);
      for (std::size_t i = 0; i < b.size(); ++i) known_[number(s, 0) + i] = b[i];
    } else if (op == "write") {
      core_.memory().write_bytes(number(s, 0), sgxpectre::detail::parse_hex_bytes(s.args[1], s.line));
    } else if (op == "seed_secret") {
      std::uint64_t a = number(s, 0);
      for (std::uint64_t i = 0; i < number(s, 1); ++i) core_.memory().write(a + i, seeded_byte(opt_.seed, a + i), 1);
    } else if (op == "poison_btb") {
      auto mode = opt_.poison_override.value_or(*poison_mode_from_name(s.args[3]));
      poison_btb(core_, number(s, 0), number(s, 1), static_cast<unsigned>(number(s, 2)), mode);
    } else if (op == "deplete_rsb") {
      deplete_rsb(core_, *deplete_method_from_name(s.args[0]));
    } else if (op == "clear_rsb") {
      core_.rsb().clear();
    } else if (op == "set_reg") {
      core_.state().r(*reg_from_name(s.args[0])) = eval(s);
    } else if (op == "set_reserved") {
      core_.set_reserved_bit(number(s, 0), s.args[1] == "on");
    } else if (op == "flush_pte") {
      core_.translation().flush_pte(uarch::page_of(number(s, 0)));
    } else if (op == "warm_pte") {
      core_.translation().set_pte_cached(uarch::page_of(number(s, 0)));
    } else if (op == "evict_congruent") {
      evict_congruent(core_, number(s, 0), static_cast<unsigned>(number(s, 1)));
    } else if (op == "flush") {
      if (s.args[0] == "array") flush(core_, array_);
      else core_.clflush(number(s, 0));
    } else if (op == "ibpb") {
      core_.btb().clear();
    } else if (op == "interrupt") {
      core_.interrupt_at(number(s, 0));
    } else if (op == "interrupt_cycle") {
      core_.interrupt_at_cycle(core_.cycle() + number(s, 0));
    } else if (op == "eenter" || op == "eresume") {
      enter(s, op == "eresume");
    }
  }

  Core& core_;
  const Scenario& sc_;
  RunOptions opt_;
  MonitoredArray array_;
  std::map<std::uint64_t, std::uint8_t> known_;
  AttackResult result_;
  bool halted_ = false;
};

}  // namespace detail

// Runs the script. Each `reload ADDR` decodes one byte; on a miss the steps
// since the previous reload are replayed, up to the retry budget.
inline AttackResult run_scenario(Core& core, const Scenario& sc, const RunOptions& opt = {}) {
  validate(sc, core.program());
  return detail::ScenarioRunner(core, sc, opt).run();
}

// ---- Type-II extraction --------------------------------------------------------

// How to steer one enclave return into a Type-II gadget and turn the loaded
// value into a monitored-array index.
struct Exploit {
  std::size_t tcs = 1;             // thread the attacker enters on
  std::uint64_t branch = 0;        // hijacked return
  std::uint64_t gadget = 0;        // gadget start
  std::uint64_t trap_page = 0;     // reserved-bit page touched just before `branch`
  std::uint64_t stack_slot = 0;    // where `branch` loads its return address
  Reg reg_a = Reg::rax;
  std::int64_t load_disp = 0;      // first load reads 4 bytes at regA + load_disp
  std::optional<Reg> reg_c;
  std::uint64_t scale = 1;         // second address = regC + scale * loaded + disp
  std::uint64_t disp = 0;
  std::map<Reg, std::uint64_t> fixed;  // other registers at entry
  std::uint64_t array_base = 0x1000000000ull;
  PoisonMode poison = PoisonMode::cross_process;
  unsigned evictions = 2000;

  MonitoredArray array() const { return {array_base, scale << 24, 256, std::nullopt}; }
};

namespace detail {

// Second-reference address with regC = c and a loaded value v, by running
// the gadget concretely.
inline std::uint64_t probe_gadget(const Listing& l, const TypeIIGadget& g, std::uint64_t c, std::uint64_t v) {
  uarch::ArchState s;
  constexpr std::uint64_t kScratch = 0x10000000;
  const Instruction* first = l.find(g.start_address);
  const auto& m = std::get<MemRef>(first->operands[0]);
  s.r(g.reg_a) = kScratch - static_cast<std::uint64_t>(m.disp);
  s.r(*g.reg_c) = c;
  uarch::Memory mem;
  mem.write(kScratch, v, m.width);
  s.rip = g.start_address;
  std::uint64_t last = 0;
  for (std::size_t i = 0; i < g.length; ++i) {
    const Instruction* ins = l.find(s.rip);
    if (!ins) throw ScenarioError("gadget leaves the program");
    uarch::StoreBuffer buf(mem);
    auto r = uarch::Executor::step(s, *ins, buf);
    auto log = buf.take_log();
    if (i + 1 == g.length && !log.empty()) last = log.back().address;
    s.rip = r.next_rip;
  }
  return last;
}

}  // namespace detail

// Fills the gadget fields of an exploit from a scan result. The second
// address must be regC + scale * loaded + disp for the probe to accept it.
inline Exploit derive_exploit(const Listing& l, const TypeIIGadget& g, Exploit x = {}) {
  if (!g.reg_c) throw ScenarioError("gadget at " + g.start + " has no regC: extraction unsupported");
  const Instruction* first = l.find(g.start_address);
  if (!first || first->operands.empty() || !std::holds_alternative<MemRef>(first->operands[0]))
    throw ScenarioError("no load at gadget start " + g.start);
  std::uint64_t a00 = detail::probe_gadget(l, g, 0, 0);
  std::uint64_t a01 = detail::probe_gadget(l, g, 0, 1);
  std::uint64_t a10 = detail::probe_gadget(l, g, 1, 0);
  std::uint64_t a02 = detail::probe_gadget(l, g, 0, 0x10000);
  std::uint64_t scale = a01 - a00;
  if (a10 - a00 != 1 || scale == 0 || scale > 64 || a02 - a00 != scale * 0x10000)
    throw ScenarioError("gadget at " + g.start + " is not linear in regC and the loaded value");
  x.gadget = g.start_address;
  x.reg_a = g.reg_a;
  x.load_disp = std::get<MemRef>(first->operands[0]).disp;
  x.reg_c = g.reg_c;
  x.scale = scale;
  x.disp = a00;
  return x;
}

// One poisoned entry reading the 4 bytes at `window` with the low three
// already known as `k`.
inline Reload attack_once(Core& core, const Exploit& x, std::uint64_t window, std::uint32_t k) {
  MonitoredArray arr = x.array();
  poison_btb(core, x.branch, x.gadget, 1, x.poison);
  core.set_reserved_bit(x.trap_page, true);
  core.on_fault([&x](Core& c, const Fault&) {
    evict_congruent(c, x.stack_slot, x.evictions);
    c.translation().flush_pte(uarch::page_of(x.stack_slot));
    deplete_rsb(c, DepleteMethod::aex);
    c.set_reserved_bit(x.trap_page, false);
    return true;
  });
  for (const auto& [r, v] : x.fixed) core.state().r(r) = v;
  core.state().r(x.reg_a) = window - static_cast<std::uint64_t>(x.load_disp);
  core.state().r(*x.reg_c) = arr.base - x.disp - x.scale * k;
  flush(core, arr);
  core.eenter(x.tcs);
  auto r = core.run();
  core.on_fault(nullptr);
  core.set_reserved_bit(x.trap_page, false);
  if (r.reason != uarch::StopReason::exited)
    throw ScenarioError("attack entry stopped: " + std::string(uarch::stop_reason_name(r.reason)) + " " +
                        r.diagnostic);
  return reload(core, arr);
}

// Reads [lo, hi) one byte at a time through a 4-byte window whose lower three
// bytes are already known, either from `known` or from earlier steps.
inline AttackResult extract_region(Core& core, const Exploit& x, std::uint64_t lo, std::uint64_t hi,
                                   std::map<std::uint64_t, std::uint8_t> known, unsigned retries = kRetryBudget) {
  if (!x.reg_c) throw ScenarioError("exploit has no regC: extraction unsupported");
  if (hi < lo) throw ScenarioError("empty extraction range");
  AttackResult res;
  bool halted = false;
  for (std::uint64_t a = lo; a < hi; ++a) {
    std::optional<std::uint8_t> got;
    unsigned attempts = 0;
    std::uint32_t k = 0;
    for (unsigned i = 0; i < 3 && !halted; ++i) {
      auto it = known.find(a - 3 + i);
      if (it == known.end()) {
        halted = true;
        res.note = "extraction halted at " + sgxpectre::detail::hex(a) + ": preceding byte unknown";
      } else {
        k |= std::uint32_t{it->second} << (8 * i);
      }
    }
    while (!halted && !got && attempts < retries) {
      ++attempts;
      got = attack_once(core, x, a - 3, k).value();
    }
    if (got) known[a] = *got;
    res.addresses.push_back(a);
    res.recovered.push_back(got);
    res.truth.push_back(static_cast<std::uint8_t>(core.memory().read(a, 1)));
    res.attempts.push_back(halted ? 0 : attempts);
  }
  return res;
}

// ---- SSA and key demonstrations ------------------------------------------------

struct RegisterSnapshot {
  std::map<Reg, std::uint64_t> regs;
  std::uint64_t rip = 0;
  AttackResult raw;

  bool complete() const { return raw.recovered.size() == uarch::kGprSgxSize && raw.complete(); }
};

// Decodes a GPRSGX area from extracted bytes.
inline RegisterSnapshot decode_gprsgx(const AttackResult& raw) {
  RegisterSnapshot s;
  auto b = raw.bytes_or();
  auto field = [&](std::uint64_t off) {
    std::uint64_t v = 0;
    for (unsigned i = 0; i < 8 && off + i < b.size(); ++i) v |= std::uint64_t{b[off + i]} << (8 * i);
    return v;
  };
  for (std::size_t r = 0; r < kNumGprs && 8 * r + 8 <= b.size(); ++r)
    s.regs[static_cast<Reg>(r)] = field(uarch::gprsgx::reg(static_cast<Reg>(r)));
  s.rip = field(uarch::gprsgx::rip);
  s.raw = raw;
  return s;
}

// Reads `len` bytes of the GPRSGX area of the victim's most recent AEX,
// bootstrapped from the zeroed 4 bytes that precede it.
inline AttackResult extract_gprsgx(Core& core, const Exploit& x, std::size_t victim_tcs, std::size_t len,
                                   unsigned retries = kRetryBudget) {
  const auto& img = core.enclave();
  if (!img) throw ScenarioError("program has no enclave image");
  unsigned cssa = img->tcs.at(victim_tcs).cssa;
  if (cssa == 0) throw ScenarioError("victim thread has no saved SSA frame");
  std::uint64_t g = img->gpr_address(victim_tcs, cssa - 1);
  std::map<std::uint64_t, std::uint8_t> known;
  for (std::uint64_t i = 1; i <= 4; ++i) known[g - i] = 0;
  return extract_region(core, x, g, g + len, std::move(known), retries);
}

inline RegisterSnapshot read_ssa_registers(Core& core, const Exploit& x, std::size_t victim_tcs) {
  return decode_gprsgx(extract_gprsgx(core, x, victim_tcs, uarch::kGprSgxSize));
}

// Victim-specific facts the attacker learns from the enclave binary.
struct KeyDemo {
  std::size_t victim_tcs = 0;
  std::map<Reg, std::uint64_t> ecall;  // registers selecting the key-handling ECall
  std::uint64_t trap_page = 0;          // page of the function called with the key on the stack
  std::uint64_t key_offset = 0;         // key position relative to the saved rsp
  std::size_t key_size = 16;
  std::uint8_t fill = 0;                // known bytes right below the key
};

struct KeyTheft {
  std::uint64_t rsp = 0;
  AttackResult rsp_bytes;
  AttackResult key;
};

// Pauses the victim inside the call that receives the key, recovers its stack
// pointer from the SSA, then reads the key from the stack frame.
inline KeyTheft steal_key_demo(Core& core, const Exploit& x, const KeyDemo& d, unsigned retries = kRetryBudget) {
  core.set_reserved_bit(d.trap_page, true);
  core.on_fault(nullptr);
  for (const auto& [r, v] : d.ecall) core.state().r(r) = v;
  core.eenter(d.victim_tcs);
  core.on_fault([](Core&, const Fault&) { return false; });
  auto r = core.run();
  core.on_fault(nullptr);
  core.set_reserved_bit(d.trap_page, false);
  if (r.reason != uarch::StopReason::paused) throw ScenarioError("victim did not pause at the key-handling call");

  KeyTheft t;
  std::size_t rsp_end = uarch::gprsgx::reg(Reg::rsp) + 8;
  t.rsp_bytes = extract_gprsgx(core, x, d.victim_tcs, rsp_end, retries);
  for (unsigned i = 0; i < 8; ++i)
    t.rsp |= std::uint64_t{t.rsp_bytes.recovered[rsp_end - 8 + i].value_or(0)} << (8 * i);
  if (!t.rsp_bytes.all_recovered()) {
    t.key.note = "saved rsp not recovered";
    return t;
  }
  std::uint64_t key = t.rsp + d.key_offset;
  std::map<std::uint64_t, std::uint8_t> known;
  for (std::uint64_t i = 1; i <= 3; ++i) known[key - i] = d.fill;
  t.key = extract_region(core, x, key, key + d.key_size, std::move(known), retries);
  return t;
}

// ---- victim profiles -----------------------------------------------------------

// Attack facts for one victim program, read from a JSON sidecar.
struct VictimProfile {
  std::string program;  // listing file, relative to the profile
  Exploit exploit;
  std::string gadget;
  std::size_t secret_tcs = 0;
  std::uint64_t secret = 0;
  std::size_t secret_size = 32;
  std::uint8_t secret_prefix = 0;  // value of the three bytes below the secret
  std::map<Reg, std::uint64_t> secret_ecall;
  std::size_t ssa_tcs = 0;
  std::map<Reg, std::uint64_t> ssa_ecall;
  std::uint64_t ssa_interrupt = 0;
  std::uint64_t key_address = 0;
  KeyDemo key;
};

namespace detail {

inline std::uint64_t json_number(const nlohmann::ordered_json& j, std::string_view what) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_string())
    if (auto v = sgxpectre::detail::parse_number(j.get<std::string>())) return *v;
  throw ScenarioError("profile: bad number for " + std::string(what));
}

inline std::map<Reg, std::uint64_t> json_regs(const nlohmann::ordered_json& j) {
  std::map<Reg, std::uint64_t> out;
  for (const auto& [k, v] : j.items()) {
    auto r = reg_from_name(k);
    if (!r) throw ScenarioError("profile: unknown register " + k);
    out[*r] = json_number(v, k);
  }
  return out;
}

}  // namespace detail

// Parses a profile and derives the exploit from the named Type-II gadget.
inline VictimProfile parse_victim_profile(std::string_view text, const Listing& l) {
  using detail::json_number;
  VictimProfile p;
  try {
    auto j = nlohmann::ordered_json::parse(text);
    p.program = j.value("program", std::string());
    const auto& e = j.at("exploit");
    p.gadget = e.at("gadget").get<std::string>();
    Exploit x;
    x.tcs = json_number(e.at("tcs"), "tcs");
    x.branch = json_number(e.at("branch"), "branch");
    x.trap_page = json_number(e.at("trap-page"), "trap-page");
    x.stack_slot = json_number(e.at("stack-slot"), "stack-slot");
    if (e.contains("fixed")) x.fixed = detail::json_regs(e.at("fixed"));
    if (e.contains("evictions")) x.evictions = static_cast<unsigned>(json_number(e.at("evictions"), "evictions"));
    auto gs = scan_type2(l);
    auto g = std::find_if(gs.begin(), gs.end(), [&](const TypeIIGadget& t) { return t.start == p.gadget; });
    if (g == gs.end()) throw ScenarioError("profile: gadget " + p.gadget + " not found by scan2");
    p.exploit = derive_exploit(l, *g, x);

    const auto& s = j.at("secret");
    p.secret_tcs = json_number(s.value("tcs", nlohmann::ordered_json(0)), "secret tcs");
    p.secret = json_number(s.at("address"), "secret address");
    p.secret_size = json_number(s.at("size"), "secret size");
    p.secret_prefix = static_cast<std::uint8_t>(json_number(s.at("prefix"), "secret prefix"));
    p.secret_ecall = detail::json_regs(s.at("ecall"));

    const auto& a = j.at("ssa");
    p.ssa_tcs = json_number(a.at("tcs"), "ssa tcs");
    p.ssa_ecall = detail::json_regs(a.at("ecall"));
    p.ssa_interrupt = json_number(a.at("interrupt-at"), "interrupt-at");

    const auto& k = j.at("key");
    p.key_address = json_number(k.at("address"), "key address");
    p.key.victim_tcs = json_number(k.at("tcs"), "key tcs");
    p.key.key_size = json_number(k.at("size"), "key size");
    p.key.ecall = detail::json_regs(k.at("ecall"));
    p.key.trap_page = json_number(k.at("trap-page"), "key trap-page");
    p.key.key_offset = json_number(k.at("stack-offset"), "stack-offset");
    p.key.fill = static_cast<std::uint8_t>(json_number(k.at("fill"), "fill"));
  } catch (const nlohmann::json::exception& ex) {
    throw ScenarioError(std::string("profile: ") + ex.what());
  }
  return p;
}

inline void write_seeded(Core& core, std::uint64_t addr, std::size_t n, std::uint64_t seed) {
  for (std::size_t i = 0; i < n; ++i) core.memory().write8(addr + i, seeded_byte(seed, addr + i));
}

// Runs one ECall on `tcs` to its end. `stop` is the expected stop reason.
inline void run_ecall(Core& core, std::size_t tcs, const std::map<Reg, std::uint64_t>& regs,
                      uarch::StopReason stop = uarch::StopReason::exited) {
  for (const auto& [r, v] : regs) core.state().r(r) = v;
  core.eenter(tcs);
  auto r = core.run();
  if (r.reason != stop)
    throw ScenarioError("victim ECall stopped: " + std::string(uarch::stop_reason_name(r.reason)) + " " + r.diagnostic);
}

// Seeds the secret, lets the victim touch it, then extracts it.
inline AttackResult demo_secret(Core& core, const VictimProfile& p, std::uint64_t seed) {
  write_seeded(core, p.secret, p.secret_size, seed);
  run_ecall(core, p.secret_tcs, p.secret_ecall);
  std::map<std::uint64_t, std::uint8_t> known;
  for (std::uint64_t i = 1; i <= 3; ++i) known[p.secret - i] = p.secret_prefix;
  return extract_region(core, p.exploit, p.secret, p.secret + p.secret_size, std::move(known));
}

// Interrupts the victim with seeded registers and reads them back from its SSA.
inline RegisterSnapshot demo_ssa(Core& core, const VictimProfile& p, std::uint64_t seed) {
  for (std::size_t r = 0; r < kNumGprs; ++r) {
    std::uint64_t v = 0;
    for (unsigned i = 0; i < 8; ++i) v |= std::uint64_t{seeded_byte(seed, 8 * r + i)} << (8 * i);
    core.state().regs[r] = v;
  }
  core.interrupt_at(p.ssa_interrupt);
  run_ecall(core, p.ssa_tcs, p.ssa_ecall, uarch::StopReason::paused);
  core.interrupt_at(std::nullopt);
  return read_ssa_registers(core, p.exploit, p.ssa_tcs);
}

// Seeds the key and steals it from the stack of the key-handling call.
inline KeyTheft demo_key(Core& core, const VictimProfile& p, std::uint64_t seed) {
  write_seeded(core, p.key_address, p.key.key_size, seed);
  return steal_key_demo(core, p.exploit, p.key);
}

// ---- countermeasure matrix -----------------------------------------------------

struct MatrixCell {
  std::string name;
  uarch::CpuModel cpu = uarch::CpuModel::skylake;
  uarch::Countermeasures countermeasures;
  std::optional<PoisonMode> poison;
};

struct MatrixRow {
  MatrixCell cell;
  AttackResult result;
};

inline std::vector<MatrixCell> default_matrix() {
  using uarch::CpuModel;
  std::vector<MatrixCell> m(7);
  m[0].name = "baseline";
  m[1].name = "ibrs";
  m[1].countermeasures.ibrs = true;
  m[2].name = "ibpb-at-eenter";
  m[2].countermeasures.ibpb_events = {uarch::Transition::eenter};
  m[3].name = "retpoline";
  m[3].countermeasures.retpoline = true;
  m[4].name = "retpoline-pre-skylake";
  m[4].cpu = CpuModel::pre_skylake;
  m[4].countermeasures.retpoline = true;
  m[5].name = "sibling-core";
  m[5].poison = PoisonMode::sibling_core;
  m[6].name = "sibling-core-stibp";
  m[6].poison = PoisonMode::sibling_core;
  m[6].countermeasures.stibp = true;
  return m;
}

inline std::string countermeasure_list(const uarch::Countermeasures& c) {
  std::vector<std::string> on;
  if (c.ibrs) on.emplace_back("ibrs");
  if (c.stibp) on.emplace_back("stibp");
  for (auto t : c.ibpb_events) on.push_back("ibpb@" + std::string(uarch::transition_name(t)));
  if (c.retpoline) on.emplace_back("retpoline");
  if (c.rsb_refill_on_entry) on.emplace_back("rsb-refill");
  std::string s;
  for (const auto& x : on) s += (s.empty() ? "" : ",") + x;
  return s.empty() ? "none" : s;
}

// Replays the scenario on a fresh core per cell.
inline std::vector<MatrixRow> countermeasure_matrix(const Listing& program, const Scenario& sc,
                                                    const std::vector<MatrixCell>& cells, const RunOptions& opt = {},
                                                    CoreConfig base = {}) {
  std::vector<MatrixRow> rows;
  for (const auto& c : cells) {
    CoreConfig cfg = base;
    cfg.cpu = c.cpu;
    cfg.countermeasures = c.countermeasures;
    Core core(program, cfg);
    RunOptions o = opt;
    if (c.poison) o.poison_override = c.poison;
    MatrixRow row{c, run_scenario(core, sc, o)};
    row.result.trace.clear();
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_matrix(const std::vector<MatrixRow>& rows) {
  std::ostringstream os;
  os << "cell | cpu | countermeasures | poisoning | success rate\n";
  for (const auto& r : rows)
    os << r.cell.name << " | " << uarch::cpu_model_name(r.cell.cpu) << " | "
       << countermeasure_list(r.cell.countermeasures) << " | "
       << (r.cell.poison ? poison_mode_name(*r.cell.poison) : std::string_view("scenario")) << " | "
       << r.result.matches() << "/" << r.result.recovered.size() << "\n";
  return os.str();
}

inline nlohmann::ordered_json to_json(const std::vector<MatrixRow>& rows) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json e;
    e["cell"] = r.cell.name;
    e["cpu"] = uarch::cpu_model_name(r.cell.cpu);
    e["countermeasures"] = countermeasure_list(r.cell.countermeasures);
    e["poisoning"] = r.cell.poison ? nlohmann::ordered_json(poison_mode_name(*r.cell.poison)) : nlohmann::ordered_json();
    e["success-rate"] = r.result.success_rate();
    j.push_back(e);
  }
  return j;
}

}  // namespace sgxpectre::harness
