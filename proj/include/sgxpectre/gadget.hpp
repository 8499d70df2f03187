#pragma once

// Type-I (branch target injection) and Type-II (secret extraction) gadget
// detection, scoring and reports.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "asm.hpp"
#include "symex.hpp"
#include "symvalue.hpp"

namespace sgxpectre {

inline constexpr std::string_view kToolVersion = "0.1.0";

enum class GadgetCategory : std::uint8_t { indirect_jump, indirect_call, ret };

inline std::string_view category_name(GadgetCategory c) {
  switch (c) {
    case GadgetCategory::indirect_jump: return "indirect-jump";
    case GadgetCategory::indirect_call: return "indirect-call";
    case GadgetCategory::ret: return "return";
  }
  return "?";
}

inline std::optional<GadgetCategory> category_from_name(std::string_view s) {
  if (s == "indirect-jump") return GadgetCategory::indirect_jump;
  if (s == "indirect-call") return GadgetCategory::indirect_call;
  if (s == "return") return GadgetCategory::ret;
  return std::nullopt;
}

inline std::optional<GadgetCategory> category_of(InstrClass c) {
  switch (c) {
    case InstrClass::indirect_jump: return GadgetCategory::indirect_jump;
    case InstrClass::indirect_call: return GadgetCategory::indirect_call;
    case InstrClass::near_return: return GadgetCategory::ret;
    default: return std::nullopt;
  }
}

inline std::optional<Mode> mode_from_name(std::string_view s) {
  if (s == "ECall" || s == "ecall") return Mode::ecall;
  if (s == "ORet" || s == "oret") return Mode::oret;
  return std::nullopt;
}

struct TypeIGadget {
  GadgetCategory category = GadgetCategory::ret;
  std::string end;  // symbol:offset
  std::uint64_t end_address = 0;
  std::vector<Reg> controlled;  // report order
  Mode mode = Mode::ecall;
  std::size_t path_length = 0;
  // Witness path; not serialized.
  std::vector<std::uint64_t> path;
  std::vector<BranchDecision> trail;
};

struct TypeIIGadget {
  std::string start;
  std::uint64_t start_address = 0;
  std::vector<std::string> instructions;
  Reg reg_a = Reg::rax;
  Reg reg_b = Reg::rax;
  std::optional<Reg> reg_c;
  std::size_t length = 0;
};

struct ScanConfig {
  unsigned window = 10;
  // Mnemonic families that count as the second memory reference.
  std::vector<std::string> second_reference = {"mov", "movz", "movs", "cmp", "add"};
  bool require_reg_c = false;
  std::vector<Reg> general_registers = {Reg::rax, Reg::rbx, Reg::rcx, Reg::rdx, Reg::rdi, Reg::rsi,
                                        Reg::rbp, Reg::r8,  Reg::r9,  Reg::r10, Reg::r11, Reg::r12,
                                        Reg::r13, Reg::r14, Reg::r15};

  bool valid() const { return window >= 1; }
  bool is_general(Reg r) const {
    return std::find(general_registers.begin(), general_registers.end(), r) != general_registers.end();
  }
};

// ---- scores ------------------------------------------------------------------

inline int score_type1(const TypeIGadget& g) { return static_cast<int>(g.controlled.size()); }

// Higher is better: a regC base first, then fewer instructions.
struct Type2Score {
  bool has_reg_c = false;
  std::size_t length = 0;

  friend std::strong_ordering operator<=>(const Type2Score& a, const Type2Score& b) {
    if (a.has_reg_c != b.has_reg_c) return a.has_reg_c <=> b.has_reg_c;
    return b.length <=> a.length;
  }
  friend bool operator==(const Type2Score&, const Type2Score&) = default;
};

inline Type2Score score_type2(const TypeIIGadget& g) { return {g.reg_c.has_value(), g.length}; }

// Most exploitable first; ties keep address order.
inline std::vector<TypeIIGadget> rank_type2(std::vector<TypeIIGadget> gs) {
  std::stable_sort(gs.begin(), gs.end(),
                   [](const TypeIIGadget& a, const TypeIIGadget& b) { return score_type2(a) > score_type2(b); });
  return gs;
}

inline std::vector<TypeIGadget> rank_type1(std::vector<TypeIGadget> gs) {
  std::stable_sort(gs.begin(), gs.end(),
                   [](const TypeIGadget& a, const TypeIGadget& b) { return score_type1(a) > score_type1(b); });
  return gs;
}

// ---- Type-I ------------------------------------------------------------------

struct Type1Scan {
  std::vector<TypeIGadget> gadgets;
  ExploreSummary summary;
};

// Registers other than rsp whose value the attacker can still influence.
inline std::vector<Reg> controlled_registers(const MachineState& s) {
  std::vector<Reg> out;
  for (Reg r : kReportOrder) {
    if (r == Reg::rsp) continue;
    if (sym::attacker_controlled(s.reg(r))) out.push_back(r);
  }
  return out;
}

inline Type1Scan scan_type1_full(const Listing& listing, const EntryModel& em, Mode mode,
                                 const ExploreConfig& cfg = {}, const MemoryModel& mm = {},
                                 std::optional<std::string> start = std::nullopt) {
  Engine engine(listing, em, cfg, mm);
  std::map<std::pair<std::uint64_t, GadgetCategory>, TypeIGadget> found;
  Type1Scan out;
  out.summary = engine.explore(
      mode,
      [&](const MachineState& s, const Instruction& ins) {
        auto cat = category_of(ins.cls);
        if (!cat) return;
        auto regs = controlled_registers(s);
        if (regs.empty()) return;
        auto key = std::pair{ins.address, *cat};
        auto it = found.find(key);
        if (it != found.end() && it->second.controlled.size() >= regs.size()) return;
        TypeIGadget g;
        g.category = *cat;
        g.end = listing.symbolize(ins.address);
        g.end_address = ins.address;
        g.controlled = std::move(regs);
        g.mode = mode;
        g.path = s.path_addresses();
        g.path_length = g.path.size() + 1;
        g.trail = s.trail;
        found[key] = std::move(g);
      },
      std::move(start));
  for (auto& [k, g] : found) out.gadgets.push_back(std::move(g));
  return out;
}

inline std::vector<TypeIGadget> scan_type1(const Listing& listing, const EntryModel& em, Mode mode,
                                           const ExploreConfig& cfg = {}, const MemoryModel& mm = {}) {
  return scan_type1_full(listing, em, mode, cfg, mm).gadgets;
}

// ---- Type-II -----------------------------------------------------------------

namespace detail {

inline constexpr std::uint32_t kLoadedValueSymbol = 1u << 19;

inline bool mnemonic_family_in(const std::string& m, const std::vector<std::string>& families) {
  return std::find(families.begin(), families.end(), m) != families.end();
}

inline bool ends_window(InstrClass c) {
  switch (c) {
    case InstrClass::direct_call:
    case InstrClass::indirect_call:
    case InstrClass::near_return:
    case InstrClass::indirect_jump:
    case InstrClass::direct_jump:
    case InstrClass::cond_branch:
    case InstrClass::enclu:
    case InstrClass::serialize:
      return true;
    default:
      return false;
  }
}

inline SymValue effective_address(const MachineState& s, const MemRef& m, std::uint64_t next) {
  SymValue a = sym::constant(static_cast<std::uint64_t>(m.disp));
  if (m.base) a = sym::add(a, *m.base == Reg::rip ? sym::constant(next) : s.reg(*m.base));
  if (m.index) a = sym::add(a, sym::mul(s.reg(*m.index), sym::constant(m.scale)));
  return a;
}

// Value of the register after writing `v` through view `dst`.
inline SymValue merge_into(const SymValue& full, const RegView& dst, const SymValue& v) {
  unsigned bytes = dst.bits / 8u;
  if (dst.bits == 64) return v;
  if (dst.bits == 32) return sym::mask(v, 4);
  unsigned shift = dst.high8 ? 8 : 0;
  std::uint64_t m = sym::detail::width_mask(bytes) << shift;
  return sym::bor(sym::band(full, sym::constant(~m)), sym::shl(sym::mask(v, bytes), shift));
}

}  // namespace detail

inline std::vector<TypeIIGadget> scan_type2(const Listing& listing, const ScanConfig& cfg = {}) {
  std::vector<TypeIIGadget> out;
  EntryModel em;
  em.attacker_registers.clear();
  Engine engine(listing, em);
  MemoryModel mm;
  const auto& ins = listing.instructions;
  for (std::size_t i = 0; i < ins.size(); ++i) {
    const Instruction& first = ins[i];
    if (!(first.mnemonic == "mov" || first.mnemonic == "movz" || first.mnemonic == "movs")) continue;
    if (first.operands.size() != 2) continue;
    const auto* src = std::get_if<MemRef>(&first.operands[0]);
    const auto* dst = std::get_if<RegView>(&first.operands[1]);
    if (!src || !dst || !src->base || src->index || src->segment) continue;
    if (*src->base == Reg::rip || !cfg.is_general(*src->base) || !cfg.is_general(dst->reg)) continue;

    MachineState s;
    s.loop_counts = std::make_shared<std::map<std::uint64_t, std::uint32_t>>();
    for (std::size_t r = 0; r < kNumGprs; ++r) {
      auto reg = static_cast<Reg>(r);
      s.regs[r] = sym::symbol(attacker_symbol_id(0, reg), reg);
    }
    s.regs[reg_index(Reg::rsp)] = sym::constant(mm.stack_top);
    SymValue loaded = sym::mask(sym::symbol(detail::kLoadedValueSymbol, std::nullopt), src->width);
    if (first.mnemonic == "movs") loaded = sym::mask(sym::sext(loaded, src->width * 8u), dst->bits / 8u);
    s.regs[reg_index(dst->reg)] = detail::merge_into(s.reg(dst->reg), *dst, loaded);

    std::uint64_t expect = first.next_address();
    for (unsigned k = 1; k <= cfg.window && i + k < ins.size(); ++k) {
      const Instruction& cur = ins[i + k];
      if (cur.address != expect || detail::ends_window(cur.cls)) break;
      const MemRef* m = cur.memory_operand();
      if (m && cur.cls != InstrClass::lea && detail::mnemonic_family_in(cur.mnemonic, cfg.second_reference)) {
        auto addr = detail::effective_address(s, *m, cur.next_address());
        if (sym::varies_with(addr, detail::kLoadedValueSymbol)) {
          TypeIIGadget g;
          g.start = listing.symbolize(first.address);
          g.start_address = first.address;
          for (std::size_t t = i; t <= i + k; ++t) g.instructions.push_back(format_instruction(ins[t]));
          g.reg_a = *src->base;
          g.reg_b = dst->reg;
          for (Reg r : kReportOrder) {
            if (r == g.reg_b || r == Reg::rsp || !cfg.is_general(r)) continue;
            if (sym::varies_with(addr, attacker_symbol_id(0, r))) {
              g.reg_c = r;
              break;
            }
          }
          g.length = k + 1;
          if (!cfg.require_reg_c || g.reg_c) out.push_back(std::move(g));
          break;
        }
      }
      s.rip = cur.address;
      auto next = engine.step(std::move(s));
      s = std::move(next[0]);
      if (s.status != PathStatus::running) break;
      expect = cur.next_address();
    }
  }
  return out;
}

// ---- reports -----------------------------------------------------------------

struct GadgetReport {
  std::string tool_version = std::string(kToolVersion);
  std::string corpus_id;
  std::vector<TypeIGadget> type1;
  std::vector<TypeIIGadget> type2;
};

enum class ReportFormat : std::uint8_t { text, structured };

namespace detail {

inline std::string join_regs(const std::vector<Reg>& regs) {
  std::string s;
  for (std::size_t i = 0; i < regs.size(); ++i) {
    if (i) s += ", ";
    s += reg_name(regs[i]);
  }
  return s;
}

inline std::string type2_regs(const TypeIIGadget& g) {
  std::vector<Reg> r = {g.reg_a, g.reg_b};
  if (g.reg_c) r.push_back(*g.reg_c);
  return "[" + join_regs(r) + "]";
}

inline Reg reg_from_json(const nlohmann::ordered_json& j) {
  auto r = reg_from_name(j.get<std::string>());
  if (!r) throw std::invalid_argument("bad register name " + j.get<std::string>());
  return *r;
}

}  // namespace detail

inline std::string format_type1_row(const TypeIGadget& g) {
  return std::string(category_name(g.category)) + " | " + g.end + " | " + detail::join_regs(g.controlled);
}

inline std::string format_type2_row(const TypeIIGadget& g) {
  std::string ins;
  for (std::size_t i = 0; i < g.instructions.size(); ++i) {
    if (i) ins += "; ";
    ins += g.instructions[i];
  }
  return g.start + " | " + detail::type2_regs(g) + " | " + ins;
}

inline nlohmann::ordered_json to_json(const GadgetReport& r) {
  nlohmann::ordered_json j;
  j["tool-version"] = r.tool_version;
  j["corpus-id"] = r.corpus_id;
  j["type1"] = nlohmann::ordered_json::array();
  for (const auto& g : r.type1) {
    nlohmann::ordered_json e;
    e["category"] = category_name(g.category);
    e["end"] = g.end;
    e["end-address"] = detail::hex(g.end_address);
    e["controlled-registers"] = nlohmann::ordered_json::array();
    for (Reg x : g.controlled) e["controlled-registers"].push_back(reg_name(x));
    e["mode"] = mode_name(g.mode);
    e["path-length"] = g.path_length;
    e["score"] = score_type1(g);
    j["type1"].push_back(std::move(e));
  }
  j["type2"] = nlohmann::ordered_json::array();
  for (const auto& g : r.type2) {
    nlohmann::ordered_json e;
    e["start"] = g.start;
    e["start-address"] = detail::hex(g.start_address);
    e["instructions"] = g.instructions;
    e["regA"] = reg_name(g.reg_a);
    e["regB"] = reg_name(g.reg_b);
    e["regC"] = g.reg_c ? nlohmann::ordered_json(reg_name(*g.reg_c)) : nlohmann::ordered_json(nullptr);
    e["length"] = g.length;
    e["score"] = {{"regC", g.reg_c.has_value()}, {"length", g.length}};
    j["type2"].push_back(std::move(e));
  }
  return j;
}

inline GadgetReport report_from_json(const nlohmann::ordered_json& j) {
  GadgetReport r;
  r.tool_version = j.at("tool-version").get<std::string>();
  r.corpus_id = j.at("corpus-id").get<std::string>();
  for (const auto& e : j.at("type1")) {
    TypeIGadget g;
    auto cat = category_from_name(e.at("category").get<std::string>());
    auto mode = mode_from_name(e.at("mode").get<std::string>());
    if (!cat || !mode) throw std::invalid_argument("bad type1 entry");
    g.category = *cat;
    g.mode = *mode;
    g.end = e.at("end").get<std::string>();
    g.end_address = std::stoull(e.at("end-address").get<std::string>(), nullptr, 16);
    for (const auto& x : e.at("controlled-registers")) g.controlled.push_back(detail::reg_from_json(x));
    g.path_length = e.at("path-length").get<std::size_t>();
    r.type1.push_back(std::move(g));
  }
  for (const auto& e : j.at("type2")) {
    TypeIIGadget g;
    g.start = e.at("start").get<std::string>();
    g.start_address = std::stoull(e.at("start-address").get<std::string>(), nullptr, 16);
    g.instructions = e.at("instructions").get<std::vector<std::string>>();
    g.reg_a = detail::reg_from_json(e.at("regA"));
    g.reg_b = detail::reg_from_json(e.at("regB"));
    if (!e.at("regC").is_null()) g.reg_c = detail::reg_from_json(e.at("regC"));
    g.length = e.at("length").get<std::size_t>();
    r.type2.push_back(std::move(g));
  }
  return r;
}

inline GadgetReport parse_report(std::string_view text) {
  return report_from_json(nlohmann::ordered_json::parse(text));
}

inline std::string emit_report(const GadgetReport& r, ReportFormat fmt) {
  if (fmt == ReportFormat::structured) return to_json(r).dump(2) + "\n";
  std::ostringstream os;
  os << "Type-I gadgets\n";
  os << "type | end address | controlled registers\n";
  for (Mode m : {Mode::ecall, Mode::oret}) {
    bool header = false;
    for (const auto& g : r.type1) {
      if (g.mode != m) continue;
      if (!header) os << "[" << mode_name(m) << "]\n";
      header = true;
      os << format_type1_row(g) << "\n";
    }
  }
  os << "\nType-II gadgets\n";
  os << "start address | registers | gadget instructions\n";
  for (const auto& g : r.type2) os << format_type2_row(g) << "\n";
  return os.str();
}

}  // namespace sgxpectre
