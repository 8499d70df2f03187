#pragma once

// Differential-liveness oracle: replays a recorded path on the reference
// interpreter twice, flipping one attacker input, and compares a register.

#include <sgxpectre/symex.hpp>

#include "ref_interp.hpp"

namespace oracle {

using namespace sgxpectre;

inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Setup {
  const Listing* listing;
  EntryModel em;
  MemoryModel mm;
  Mode mode = Mode::ecall;
  std::uint64_t seed = 1;
};

inline std::vector<bool> decisions_of(const std::vector<BranchDecision>& trail) {
  std::vector<bool> out;
  for (const auto& d : trail) out.push_back(d.taken);
  return out;
}

// Register file after replaying `path`, with attacker input values from `value`.
inline std::array<std::uint64_t, 16> run(const Setup& s, const std::vector<std::uint64_t>& path,
                                         const std::vector<bool>& decisions,
                                         const std::function<std::uint64_t(Reg)>& value) {
  ref::Config cfg;
  cfg.gs_base = s.listing->gs_base.value_or(s.mm.gs_base);
  cfg.fs_base = s.mm.fs_base;
  MemoryModel mm = s.mm;
  std::uint64_t seed = s.seed;
  // Outside the stack every address holds its own byte, so a value loaded
  // through an attacker-chosen pointer changes with the pointer.
  cfg.fill = [mm, seed](std::uint64_t a) -> std::uint8_t {
    if (mm.fill_at(a) == mm.stack_fill && mm.stack_fill != mm.fill) return mm.stack_fill;
    return static_cast<std::uint8_t>(mix(a ^ (seed << 48)));
  };
  ref::Interp in(cfg);
  in.havoc_seed = seed;
  for (const auto& b : s.listing->secrets)
    for (std::size_t i = 0; i < b.bytes.size(); ++i) in.mem[b.address + i] = b.bytes[i];

  auto enter = [&](ref::Interp& x) {
    for (std::size_t i = 0; i < 16; ++i) {
      auto r = static_cast<Reg>(i);
      x.regs[i] = s.em.is_attacker(r) ? value(r) : 0;
    }
    std::uint64_t mask = s.mode == Mode::ecall ? s.em.ecall_selector_mask : s.em.oret_selector_mask;
    std::uint64_t val = s.mode == Mode::ecall ? s.em.ecall_selector_value : s.em.oret_selector_value;
    auto& sel = x.r(s.em.selector);
    sel = (sel & ~mask) | (val & mask);
    x.r(Reg::rsp) = mm.stack_top;
    x.store(mm.stack_top, mm.sentinel, 8);
  };
  if (s.mode == Mode::ecall) {
    enter(in);
    ref::replay(in, *s.listing, path, decisions);
  } else {
    for (std::size_t i = 0; i < 16; ++i) in.regs[i] = mix(seed * 131 + i);
    in.r(Reg::rsp) = mm.stack_top;
    in.store(mm.stack_top, mm.sentinel, 8);
    bool entered = false;
    ref::replay(in, *s.listing, path, decisions, [&](ref::Interp& x) {
      if (!entered) enter(x);
      entered = true;
    });
  }
  return in.regs;
}

// True when flipping some attacker input register changes `target`.
inline bool confirms(const Setup& s, const std::vector<std::uint64_t>& path, const std::vector<bool>& decisions,
                     Reg target) {
  auto base = [&](Reg r) { return mix(s.seed * 977 + static_cast<std::uint64_t>(r)); };
  auto ref_regs = run(s, path, decisions, base);
  for (Reg a : s.em.attacker_registers) {
    auto flipped = run(s, path, decisions, [&](Reg r) { return r == a ? ~base(r) : base(r); });
    if (flipped[reg_index(target)] != ref_regs[reg_index(target)]) return true;
  }
  return false;
}

}  // namespace oracle
