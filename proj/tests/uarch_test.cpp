#include <sgxpectre/harness.hpp>
#include <sgxpectre/uarch.hpp>

#include <gtest/gtest.h>

#include <random>
#include <regex>
#include <sstream>

#include "support/expect.hpp"
#include "support/progen.hpp"
#include "support/race.hpp"
#include "support/ref_interp.hpp"

using namespace sgxpectre;
using namespace sgxpectre::uarch;

namespace {

std::string scenario_path(const std::string& name) { return std::string(SGXPECTRE_SCENARIO_DIR) + "/" + name; }

const Listing& fig1() {
  static const Listing l = parse_listing(expect::read_file(scenario_path("fig1.prog")));
  return l;
}

constexpr std::uint64_t kSlot = 0x1efff8;
constexpr std::uint64_t kTrap = 0x105000;
constexpr std::uint64_t kSentinel = 0xdead0000;

bool has_event(const std::vector<TraceEvent>& t, EventKind k, std::uint64_t addr) {
  return std::any_of(t.begin(), t.end(), [&](const TraceEvent& e) { return e.kind == k && e.address == addr; });
}

std::size_t count_events(const std::vector<TraceEvent>& t, EventKind k) {
  return static_cast<std::size_t>(std::count_if(t.begin(), t.end(), [&](const TraceEvent& e) { return e.kind == k; }));
}

// One fig1 attempt: poisoned ret, reserved-bit pause, handler as given.
RunResult fig1_attempt(Core& c, std::uint64_t r15, const FaultHandler& h) {
  c.set_reserved_bit(kTrap, true);
  c.on_fault(h);
  c.state().r(Reg::r14) = 0x106500;
  c.state().r(Reg::r15) = r15;
  for (int i = 0; i < 256; ++i) c.clflush(0x610000 + 256 * i);
  c.clear_trace();
  c.eenter(0);
  return c.run();
}

FaultHandler evicting_handler(bool evict = true, bool deplete = true) {
  return [=](Core& k, const Fault&) {
    if (evict) {
      harness::evict_congruent(k, kSlot, 2000);
      k.translation().flush_pte(page_of(kSlot));
    }
    if (deplete) k.rsb().clear();
    k.set_reserved_bit(kTrap, false);
    return true;
  };
}

std::vector<int> reload_hits(Core& c, std::uint64_t base, std::uint64_t stride) {
  std::vector<int> hits;
  for (int i = 0; i < 256; ++i)
    if (c.peek_latency(base + stride * i) < c.config().latencies.reload_threshold()) hits.push_back(i);
  return hits;
}

}  // namespace

// ---- configuration ------------------------------------------------------------

TEST(Latencies, DefaultsAndThreshold) {
  Latencies l;
  EXPECT_EQ(l.l1, 4u);
  EXPECT_EQ(l.l2, 12u);
  EXPECT_EQ(l.llc, 40u);
  EXPECT_EQ(l.memory, 200u);
  EXPECT_EQ(l.cached_walk, 30u);
  EXPECT_EQ(l.memory_walk, 150u);
  EXPECT_EQ(l.reload_threshold(), 102u);
}

TEST(Latencies, ParseOverridesAndComments) {
  auto l = Latencies::parse("# slow memory\nmemory = 300\n\nl1=3  # fast\nmemory-walk=0x100\n");
  EXPECT_EQ(l.memory, 300u);
  EXPECT_EQ(l.l1, 3u);
  EXPECT_EQ(l.memory_walk, 256u);
  EXPECT_EQ(l.llc, 40u);
  EXPECT_EQ(l.reload_threshold(), 151u);
}

TEST(Latencies, RejectsBadInput) {
  EXPECT_THROW(Latencies::parse("l4=3"), SimError);
  EXPECT_THROW(Latencies::parse("l1"), SimError);
  EXPECT_THROW(Latencies::parse("l1=x"), SimError);
  EXPECT_THROW(Latencies::parse("l1=50\nl2=10"), SimError);
}

// ---- BTB ----------------------------------------------------------------------

TEST(Btb, AliasingExample) {
  Btb b;
  b.update(0x7fff00002560, 0x7fff00007642, 0, CpuMode::normal);
  EXPECT_EQ(b.predict(0x02560), 0x07642u);
  EXPECT_EQ(b.predict(0x7fff00002560), 0x7fff00007642u);
}

TEST(Btb, EmptyPredictsNothing) {
  Btb b;
  EXPECT_FALSE(b.predict(0x2560));
  EXPECT_EQ(b.occupancy(), 0u);
}

TEST(Btb, RandomLow32Aliasing) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 20000; ++i) {
    Btb b;
    std::uint64_t a = rng() & kMaxVirtualAddress;
    std::uint64_t alias = (rng() & 0xffff00000000ull) | (a & 0xffffffffull);
    std::uint64_t t = rng() & kMaxVirtualAddress;
    b.update(a, t, 0, CpuMode::normal);
    auto p = b.predict(alias);
    ASSERT_TRUE(p);
    EXPECT_EQ(*p, (alias & 0xffff00000000ull) | (t & 0xffffffffull));
    std::uint64_t other = alias ^ (std::uint64_t{1} << (rng() % 32));
    EXPECT_FALSE(b.predict(other));
  }
}

TEST(Btb, DirectMappedEvictionSmallIndex) {
  Btb b(4);
  // Every pair sharing the low 4 bits collides; the later update wins.
  for (std::uint64_t idx = 0; idx < 16; ++idx)
    for (std::uint64_t t1 = 0; t1 < 8; ++t1)
      for (std::uint64_t t2 = 0; t2 < 8; ++t2) {
        if (t1 == t2) continue;
        std::uint64_t s1 = (t1 << 4) | idx, s2 = (t2 << 4) | idx;
        b.update(s1, 0x1000 + t1, 0, CpuMode::normal);
        b.update(s2, 0x2000 + t2, 0, CpuMode::normal);
        EXPECT_FALSE(b.predict(s1));
        EXPECT_EQ(b.predict(s2), 0x2000 + t2);
      }
  EXPECT_LE(b.occupancy(), 16u);

  std::mt19937_64 rng(3);
  std::map<std::size_t, std::pair<std::uint64_t, std::uint64_t>> ref;
  for (int i = 0; i < 5000; ++i) {
    std::uint64_t s = rng() & 0xffffffffull, t = rng() & 0xffffffffull;
    b.update(s, t, 0, CpuMode::normal);
    ref[s & 15] = {s, t};
    std::uint64_t q = rng() % 4 == 0 ? ref[rng() % 16].first : rng() & 0xffffffffull;
    auto it = ref.find(q & 15);
    auto p = b.predict(q);
    if (it != ref.end() && it->second.first == q) EXPECT_EQ(p, it->second.second);
    else EXPECT_FALSE(p);
  }
}

TEST(Btb, StibpPartitionsByCore) {
  Btb b;
  b.update(0x2560, 0x7642, 1, CpuMode::normal);
  EXPECT_TRUE(b.predict(0x2560, BtbQuery{0, CpuMode::enclave, false, false, false}));
  EXPECT_FALSE(b.predict(0x2560, BtbQuery{0, CpuMode::enclave, true, false, false}));
  EXPECT_TRUE(b.predict(0x2560, BtbQuery{1, CpuMode::enclave, true, false, false}));
}

TEST(Btb, IbrsContainmentRandom) {
  std::mt19937_64 rng(5);
  Btb b(6);
  std::map<std::size_t, CpuMode> inserted;
  for (int i = 0; i < 20000; ++i) {
    std::uint64_t s = rng() & 0xffffull;
    if (rng() % 2) {
      CpuMode m = rng() % 2 ? CpuMode::normal : CpuMode::enclave;
      b.update(s, rng() & 0xffffffffull, static_cast<std::uint8_t>(rng() % 2), m);
      inserted[b.index(s)] = m;
    } else if (b.predict(s, BtbQuery{0, CpuMode::enclave, false, true, false})) {
      EXPECT_EQ(inserted.at(b.index(s)), CpuMode::enclave);
    }
  }
}

TEST(Btb, ExactQueryNeedsFullSource) {
  Btb b;
  b.update(0x7fff00002560, 0x7fff00007642, 0, CpuMode::normal);
  EXPECT_FALSE(b.predict(0x2560, BtbQuery{0, CpuMode::enclave, false, false, true}));
  b.update(0x2560, 0x7642, 0, CpuMode::normal);
  EXPECT_EQ(b.predict(0x2560, BtbQuery{0, CpuMode::enclave, false, false, true}), 0x7642u);
}

// ---- RSB ----------------------------------------------------------------------

TEST(Rsb, PushThenPop) {
  Rsb r;
  r.push(0x1234);
  EXPECT_EQ(r.pop(), 0x1234u);
  EXPECT_FALSE(r.pop());
}

TEST(Rsb, WrapOverwritesOldest) {
  Rsb r;
  for (std::uint64_t i = 0; i < 20; ++i) r.push(i);
  EXPECT_EQ(r.occupancy(), 16u);
  for (std::uint64_t i = 20; i-- > 4;) EXPECT_EQ(r.pop(), i);
  EXPECT_FALSE(r.pop());
}

TEST(Rsb, SeventeenthPopConsultsBtbOnFallbackModel) {
  for (auto cpu : {CpuModel::skylake, CpuModel::pre_skylake}) {
    CoreConfig cfg;
    cfg.cpu = cpu;
    Core c(fig1(), cfg);
    c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
    for (std::uint64_t i = 0; i < 16; ++i) c.rsb_push(0x9000 + i);
    for (std::uint64_t i = 16; i-- > 0;) {
      auto p = c.predict_return(0x2560);
      ASSERT_TRUE(p);
      EXPECT_EQ(p->first, 0x9000 + i);
      EXPECT_EQ(p->second, "rsb");
    }
    auto last = c.predict_return(0x2560);
    if (cpu == CpuModel::skylake) {
      ASSERT_TRUE(last);
      EXPECT_EQ(last->first, 0x7642u);
      EXPECT_EQ(last->second, "btb");
    } else {
      EXPECT_FALSE(last);
    }
  }
}

TEST(Rsb, ZeroDisplacementCallIsNeutral) {
  auto zero = parse_listing("1000: callq 1005\n1005: pop %rax\n");
  auto nonzero = parse_listing("1000: callq 1010\n1005: nop\n1010: pop %rax\n");
  for (auto* l : {&zero, &nonzero}) {
    Core c(*l);
    c.state().r(Reg::rsp) = 0x800000;
    c.begin(0x1000);
    EXPECT_EQ(c.run().reason, StopReason::left_program);
    EXPECT_EQ(c.rsb().occupancy(), l == &zero ? 0u : 1u);
  }
}

TEST(Rsb, BalancedCallsNeverConsultBtb) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    // f_0 .. f_d: each calls the next one or two times, then returns. f_0 sits
    // last so its final nop leaves the program.
    unsigned depth = 1 + static_cast<unsigned>(rng() % 16);
    std::vector<std::string> funcs(depth + 1);
    std::vector<std::uint64_t> rets;
    for (unsigned f = 0; f <= depth; ++f) {
      std::ostringstream os;
      os << std::hex;
      std::uint64_t base = 0x10000 + 0x100 * (depth - f);
      os << base << ": nop\n";
      std::uint64_t a = base + 1;
      if (f < depth) {
        unsigned calls = 1 + static_cast<unsigned>(rng() % 2);
        for (unsigned k = 0; k < calls; ++k, a += 5) os << a << ": callq " << 0x10000 + 0x100 * (depth - f - 1) << "\n";
      }
      if (f == 0) {
        os << a << ": nop\n";
      } else {
        os << a << ": retq\n";
        rets.push_back(a);
      }
      funcs[depth - f] = os.str();
    }
    std::string text;
    for (const auto& s : funcs) text += s;
    Listing l = parse_listing(text);
    Core c(l);
    for (auto r : rets) c.btb().update(r, 0x66666, 0, CpuMode::normal);
    c.state().r(Reg::rsp) = 0x800000;
    c.begin(0x10000 + 0x100 * depth);
    EXPECT_EQ(c.run().reason, StopReason::left_program);
    for (const auto& e : c.trace())
      if (e.kind == EventKind::predict) EXPECT_TRUE(e.detail.starts_with("rsb")) << e.detail;
    EXPECT_EQ(count_events(c.trace(), EventKind::squash), 0u);
    EXPECT_EQ(count_events(c.trace(), EventKind::stall), 0u);
  }
}

// ---- caches and translation ---------------------------------------------------

TEST(Cache, FlushInclusiveFillAndTranslation) {
  Core c(fig1());
  const auto& l = c.config().latencies;
  std::uint64_t a = 0x610040;
  EXPECT_EQ(c.mem_access(a), l.memory_walk + l.memory);
  EXPECT_EQ(c.mem_access(a), l.tlb_hit + l.l1);
  c.clflush(a);
  EXPECT_FALSE(c.cache().cached(a));
  EXPECT_EQ(c.peek_latency(a), l.tlb_hit + l.memory);
  c.translation().flush_tlb(page_of(a));
  EXPECT_EQ(c.peek_latency(a), l.cached_walk + l.memory);
}

TEST(Cache, LruPerSetAndBackInvalidation) {
  CacheHierarchy h;
  const auto& g = h.geometry();
  std::uint64_t l1_stride = std::uint64_t{g[0].sets} * kLineSize;
  std::uint64_t a = 0x40000;
  h.access(a);
  for (unsigned i = 1; i <= g[0].ways; ++i) h.access(a + i * l1_stride);
  EXPECT_EQ(h.level_of(a), 1u);
  // Touching the oldest line keeps it; the next-oldest goes instead.
  CacheHierarchy k;
  k.access(a);
  for (unsigned i = 1; i < g[0].ways; ++i) k.access(a + i * l1_stride);
  k.access(a);
  k.access(a + g[0].ways * l1_stride);
  EXPECT_EQ(k.level_of(a), 0u);
  EXPECT_EQ(k.level_of(a + l1_stride), 1u);

  CacheHierarchy m;
  std::uint64_t llc_stride = m.congruence_stride();
  m.access(a);
  for (unsigned i = 1; i <= g[2].ways; ++i) m.access(a + i * llc_stride);
  EXPECT_EQ(m.level_of(a), 3u);
}

TEST(Cache, TwoThousandCongruentLinesEvictReturnAddress) {
  Core c(fig1());
  c.mem_access(kSlot);
  ASSERT_EQ(c.cache().level_of(kSlot), 0u);
  harness::evict_congruent(c, kSlot, 2000);
  EXPECT_EQ(c.cache().level_of(kSlot), 3u);
  EXPECT_EQ(c.peek_latency(kSlot), c.config().latencies.tlb_hit + c.config().latencies.memory);
}

TEST(Translation, EnclaveTlbFlushedAtExitPteStaysCached) {
  Core c(fig1());
  c.eenter(0);
  ASSERT_EQ(c.run().reason, StopReason::exited);
  const auto& l = c.config().latencies;
  EXPECT_FALSE(c.translation().in_tlb(0x1000));
  EXPECT_TRUE(c.translation().pte_cached(0x1000));
  EXPECT_EQ(c.peek_latency(0x1000), l.cached_walk + l.l1);
  EXPECT_EQ(c.peek_latency(0x610000), l.memory_walk + l.memory);
}

TEST(Translation, ReservedBitFaultsAtTheTrappedLoad) {
  Core c(fig1());
  c.set_reserved_bit(0x105000, true);
  std::optional<Fault> seen;
  bool cached_at_fault = true;
  c.on_fault([&](Core& k, const Fault& f) {
    seen = f;
    cached_at_fault = k.cache().cached(0x105000);
    k.set_reserved_bit(0x105000, false);
    return true;
  });
  c.eenter(0);
  ASSERT_EQ(c.run().reason, StopReason::exited);
  ASSERT_TRUE(seen);
  EXPECT_EQ(seen->rip, 0x254fu);
  EXPECT_EQ(seen->address, 0x105000u);
  EXPECT_FALSE(seen->fetch);
  EXPECT_EQ(format_instruction(*fig1().find(seen->rip)), "mov (%rcx),%eax");
  EXPECT_FALSE(cached_at_fault);
  EXPECT_EQ(c.memory().read(0x105000, 4), 0x3ca5u);
}

TEST(Translation, BitOffNoFault) {
  Core c(fig1());
  bool called = false;
  c.on_fault([&](Core&, const Fault&) { return called = true; });
  c.eenter(0);
  EXPECT_EQ(c.run().reason, StopReason::exited);
  EXPECT_FALSE(called);
  EXPECT_EQ(count_events(c.trace(), EventKind::fault), 0u);
}

TEST(Translation, FaultWithoutHandlerAborts) {
  Core c(fig1());
  c.set_reserved_bit(0x105000, true);
  c.eenter(0);
  auto r = c.run();
  EXPECT_EQ(r.reason, StopReason::fault_unhandled);
  EXPECT_NE(r.diagnostic.find("0x105000"), std::string::npos);
}

TEST(Translation, HandlerEvictionSlowsReturnAddress) {
  Core c(fig1());
  unsigned after = 0;
  c.set_reserved_bit(kTrap, true);
  c.on_fault([&](Core& k, const Fault&) {
    harness::evict_congruent(k, kSlot, 2000);
    k.translation().flush_pte(page_of(kSlot));
    after = k.peek_latency(kSlot);
    k.set_reserved_bit(kTrap, false);
    return true;
  });
  c.eenter(0);
  ASSERT_EQ(c.run().reason, StopReason::exited);
  const auto& l = c.config().latencies;
  EXPECT_EQ(after, l.memory_walk + l.memory);
}

// ---- enclave transitions ------------------------------------------------------

TEST(Enclave, AexWritesSsaAndLoadsSyntheticState) {
  Core c(fig1());
  c.state().r(Reg::r13) = 0x42;
  c.state().r(Reg::rsp) = 0x7ffffff000;
  c.interrupt_at(0x2548);
  c.eenter(0);
  ASSERT_EQ(c.run().reason, StopReason::paused);
  const auto& img = *c.enclave();
  std::uint64_t g = img.gpr_address(0, 0);
  EXPECT_EQ(g, 0x1d0000u + kSsaFrameSize - kGprSgxSize);
  EXPECT_EQ(c.memory().read(g + gprsgx::reg(Reg::r13), 8), 0x42u);
  EXPECT_EQ(c.memory().read(g + gprsgx::reg(Reg::rdx), 8), 0x3ca5u);
  EXPECT_EQ(c.memory().read(g + gprsgx::rip, 8), 0x2548u);
  EXPECT_EQ(c.memory().read(g + gprsgx::ursp, 8), 0x7ffffff000u);
  EXPECT_EQ(c.memory().read(g - 4, 4), 0u);
  EXPECT_EQ(img.tcs[0].cssa, 1u);
  EXPECT_EQ(c.mode(), CpuMode::normal);
  EXPECT_EQ(c.state().rip, kDefaultAep);
  EXPECT_EQ(c.state().r(Reg::rax), 3u);
  EXPECT_EQ(c.state().r(Reg::rbx), 0x1e0000u);
  EXPECT_EQ(c.state().r(Reg::r13), 0u);
  EXPECT_EQ(c.state().r(Reg::rdx), 0u);
  EXPECT_EQ(c.state().r(Reg::rsp), 0x7ffffff000u);
}

TEST(Enclave, EresumeMatchesUninterruptedRun) {
  Core a(fig1()), b(fig1());
  for (Core* c : {&a, &b}) c->state().r(Reg::rbx) = 0x7000000;
  a.eenter(0);
  ASSERT_EQ(a.run().reason, StopReason::exited);
  b.interrupt_at(0x2551);
  b.eenter(0);
  ASSERT_EQ(b.run().reason, StopReason::paused);
  b.eresume(0);
  ASSERT_EQ(b.run().reason, StopReason::exited);
  EXPECT_EQ(a.state(), b.state());
  EXPECT_EQ(a.memory().read(0x105000, 8), b.memory().read(0x105000, 8));
  EXPECT_EQ(b.enclave()->tcs[0].cssa, 0u);
}

TEST(Enclave, EenterKeepsAttackerRegisters) {
  Core c(fig1());
  c.state().r(Reg::r12) = 7;
  c.state().r(Reg::rsi) = 0x1234;
  c.eenter(0);
  EXPECT_EQ(c.mode(), CpuMode::enclave);
  EXPECT_EQ(c.state().r(Reg::r12), 7u);
  EXPECT_EQ(c.state().r(Reg::rsi), 0x1234u);
  EXPECT_EQ(c.state().r(Reg::rax), 0u);
  EXPECT_EQ(c.state().r(Reg::rcx), kDefaultAep);
  EXPECT_EQ(c.state().rip, 0x1000u);
}

TEST(Enclave, SecondSsaAllowsReentryThenExhausts) {
  Core c(fig1());
  c.interrupt_at(0x2548);
  c.eenter(0);
  ASSERT_EQ(c.run().reason, StopReason::paused);
  c.eenter(0);
  EXPECT_EQ(c.state().r(Reg::rax), 1u);
  c.interrupt_at(0x2548);
  ASSERT_EQ(c.run().reason, StopReason::paused);
  EXPECT_EQ(c.enclave()->tcs[0].cssa, 2u);
  EXPECT_THROW(c.eenter(0), SimError);
  c.eresume(0);
  EXPECT_EQ(c.run().reason, StopReason::exited);
}

TEST(Enclave, IllegalTransitions) {
  Core c(fig1());
  EXPECT_THROW(c.eexit(), SimError);
  EXPECT_THROW(c.aex(), SimError);
  EXPECT_THROW(c.eresume(0), SimError);
  EXPECT_THROW(c.eenter(3), SimError);
  c.eenter(0);
  EXPECT_THROW(c.eenter(0), SimError);
  EXPECT_THROW(c.eresume(0), SimError);
  Core plain(parse_listing("1000: nop\n"));
  EXPECT_THROW(plain.eenter(0), SimError);
}

TEST(Enclave, InterruptAtCycle) {
  Core c(fig1());
  c.interrupt_at_cycle(3);
  c.eenter(0);
  auto r = c.run();
  EXPECT_EQ(r.reason, StopReason::paused);
  EXPECT_EQ(c.enclave()->tcs[0].cssa, 1u);
}

TEST(Enclave, IbpbAtEenterClearsBtb) {
  CoreConfig cfg;
  cfg.countermeasures.ibpb_events = {Transition::eenter};
  Core c(fig1(), cfg);
  c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
  c.eenter(0);
  EXPECT_EQ(c.btb().occupancy(), 0u);
}

// ---- execution, speculation and squash ----------------------------------------

TEST(Run, Fig1TraceFillsThenSquashes) {
  Core c(fig1());
  c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
  std::vector<int> hits;
  for (int attempt = 0; attempt < 4 && hits.empty(); ++attempt) {
    ASSERT_EQ(fig1_attempt(c, 0x610000 - 0xa5, evicting_handler()).reason, StopReason::exited);
    hits = reload_hits(c, 0x610000, 256);
  }
  ASSERT_EQ(hits, std::vector<int>{0x3c});
  const auto& t = c.trace();
  auto at = [&](EventKind k, std::uint64_t a) {
    return std::find_if(t.begin(), t.end(), [&](const TraceEvent& e) { return e.kind == k && e.address == a; });
  };
  auto predict = at(EventKind::predict, 0x2560);
  auto fill_secret = at(EventKind::fill, 0x106500);
  auto fill_array = at(EventKind::fill, 0x613c00);
  auto squash = at(EventKind::squash, 0x2560);
  auto retire = at(EventKind::retire, 0x100e);
  ASSERT_NE(predict, t.end());
  ASSERT_NE(fill_secret, t.end());
  ASSERT_NE(fill_array, t.end());
  ASSERT_NE(squash, t.end());
  ASSERT_NE(retire, t.end());
  EXPECT_TRUE(predict->detail.starts_with("btb 0x7642"));
  EXPECT_LT(predict, fill_secret);
  EXPECT_LT(fill_secret, fill_array);
  EXPECT_LT(fill_array, squash);
  EXPECT_LT(squash, retire);
  EXPECT_LE(fill_array->cycle, squash->cycle);
  ASSERT_EQ(c.speculations().size(), 1u);
  EXPECT_EQ(c.speculations()[0].d3_won(), true);
}

TEST(Run, ReturnAddressInL1MeansNoFill) {
  Core c(fig1());
  c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
  for (int attempt = 0; attempt < 4; ++attempt) {
    ASSERT_EQ(fig1_attempt(c, 0x610000 - 0xa5, evicting_handler(false)).reason, StopReason::exited);
    EXPECT_TRUE(reload_hits(c, 0x610000, 256).empty());
    ASSERT_EQ(c.speculations().size(), 1u);
    EXPECT_NE(c.speculations()[0].d3_won(), true);
  }
}

TEST(Run, FreshRsbPredictsTheTrueReturn) {
  Core c(fig1());
  c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
  for (int attempt = 0; attempt < 4; ++attempt) {
    ASSERT_EQ(fig1_attempt(c, 0x610000 - 0xa5, evicting_handler(true, false)).reason, StopReason::exited);
    EXPECT_TRUE(c.speculations().empty());
    EXPECT_TRUE(reload_hits(c, 0x610000, 256).empty());
  }
}

TEST(Run, IbrsStopsTransientExecution) {
  CoreConfig cfg;
  cfg.countermeasures.ibrs = true;
  Core c(fig1(), cfg);
  c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
  for (int attempt = 0; attempt < 4; ++attempt) {
    ASSERT_EQ(fig1_attempt(c, 0x610000 - 0xa5, evicting_handler()).reason, StopReason::exited);
    EXPECT_TRUE(c.speculations().empty());
    EXPECT_TRUE(has_event(c.trace(), EventKind::stall, 0x2560));
    EXPECT_FALSE(has_event(c.trace(), EventKind::predict, 0x2560));
  }
}

TEST(Run, NoBranchProgramHasNoSquash) {
  progen::Options opt;
  opt.calls = false;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Listing l = parse_listing(progen::generate(seed, opt).text);
    Core c(l);
    c.state().r(Reg::rsp) = 0x800000;
    c.memory().write(0x800000, kSentinel, 8);
    c.begin(0x1000);
    ASSERT_EQ(c.run().reason, StopReason::left_program);
    EXPECT_EQ(count_events(c.trace(), EventKind::squash), 0u);
    EXPECT_EQ(count_events(c.trace(), EventKind::predict), 0u);
    EXPECT_TRUE(c.speculations().empty());
  }
}

TEST(Run, BudgetTruncates) {
  Core c(parse_listing("1000: jmp 1000\n"));
  c.begin(0x1000);
  auto r = c.run(50);
  EXPECT_EQ(r.reason, StopReason::budget);
  EXPECT_EQ(c.trace().back().kind, EventKind::truncated);
  EXPECT_THROW(c.run(0), SimError);
}

TEST(Run, TraceFormatIsLineOriented) {
  Core c(fig1());
  c.eenter(0);
  c.run();
  std::istringstream in(format_trace(c.trace()));
  std::regex line(R"(\d+ (predict|fill|squash|retire|fault|mode-switch|stall|truncated) 0x[0-9a-f]+( .*)?)");
  std::string s;
  std::size_t n = 0;
  while (std::getline(in, s)) {
    EXPECT_TRUE(std::regex_match(s, line)) << s;
    ++n;
  }
  EXPECT_EQ(n, c.trace().size());
}

TEST(Run, DeterministicTrace) {
  auto go = [] {
    Core c(fig1());
    c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
    for (int i = 0; i < 3; ++i) fig1_attempt(c, 0x610000, evicting_handler());
    return format_trace(c.trace());
  };
  EXPECT_EQ(go(), go());
}

namespace {

struct Final {
  std::array<std::uint64_t, kNumGprs> regs;
  bool cf, zf, sf, of, pf;
  std::vector<std::uint8_t> data;
};

Final run_core(const Listing& l, const CoreConfig& cfg, std::mt19937_64* poison) {
  Core c(l, cfg);
  c.state().r(Reg::rsp) = 0x800000;
  c.memory().write(0x800000, kSentinel, 8);
  if (poison) {
    std::vector<std::uint64_t> addrs;
    for (const auto& ins : l.instructions) addrs.push_back(ins.address);
    for (const auto& ins : l.instructions) {
      if (!is_indirect_branch(ins.cls) || (*poison)() % 4 == 0) continue;
      std::uint64_t t = addrs[(*poison)() % addrs.size()];
      // Same-process aliases and exact cross-process entries both occur.
      std::uint64_t src = (*poison)() % 2 ? ins.address : (0x7fff00000000ull | ins.address);
      c.btb().update(src, t, 0, CpuMode::normal);
    }
    for (unsigned i = (*poison)() % 17; i > 0; --i) c.rsb_push(addrs[(*poison)() % addrs.size()]);
  }
  c.begin(0x1000);
  auto r = c.run();
  EXPECT_EQ(r.reason, StopReason::left_program) << r.diagnostic;
  EXPECT_EQ(c.state().rip, kSentinel);
  Final f{c.state().regs, c.state().cf, c.state().zf, c.state().sf, c.state().of, c.state().pf,
          c.memory().bytes(0x300000, 0x200)};
  return f;
}

}  // namespace

TEST(Squash, ArchitecturalStateMatchesNoSpeculationAndReference) {
  progen::Options opt;
  opt.indirect = true;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Listing l = parse_listing(progen::generate(seed, opt).text);
    std::mt19937_64 rng(seed * 7 + 1);
    CoreConfig spec, plain;
    plain.speculation = false;
    spec.transient_cap = 1 + static_cast<unsigned>(rng() % 64);
    Final a = run_core(l, spec, &rng);
    Final b = run_core(l, plain, nullptr);

    ref::Interp in(ref::Config{});
    in.r(Reg::rsp) = 0x800000;
    in.store(0x800000, kSentinel, 8);
    std::uint64_t rip = 0x1000;
    for (int steps = 0; rip != kSentinel && steps < 100000; ++steps) rip = in.exec(*l.find(rip));

    ASSERT_EQ(a.regs, b.regs) << "seed " << seed;
    ASSERT_EQ(std::tie(a.cf, a.zf, a.sf, a.of, a.pf), std::tie(b.cf, b.zf, b.sf, b.of, b.pf)) << "seed " << seed;
    ASSERT_EQ(a.data, b.data) << "seed " << seed;
    for (std::size_t r = 0; r < kNumGprs; ++r) ASSERT_EQ(a.regs[r], in.regs[r]) << "seed " << seed << " reg " << r;
    for (std::size_t i = 0; i < a.data.size(); ++i) ASSERT_EQ(a.data[i], in.byte(0x300000 + i)) << "seed " << seed;
    ++checked;
  }
  EXPECT_EQ(checked, 1000u);
}

TEST(Squash, SpeculationActuallyHappensInTheRandomSuite) {
  progen::Options opt;
  opt.indirect = true;
  std::size_t squashes = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Listing l = parse_listing(progen::generate(seed, opt).text);
    Core c(l);
    for (const auto& ins : l.instructions)
      if (is_indirect_branch(ins.cls) && ins.cls != InstrClass::near_return)
        c.btb().update(ins.address, 0x1000, 0, CpuMode::normal);
    c.state().r(Reg::rsp) = 0x800000;
    c.memory().write(0x800000, kSentinel, 8);
    c.begin(0x1000);
    c.run();
    squashes += count_events(c.trace(), EventKind::squash);
  }
  EXPECT_GT(squashes, 100u);
}

TEST(Squash, LeakageExistsInCacheState) {
  CoreConfig plain;
  plain.speculation = false;
  Core spec(fig1()), ref(fig1(), plain);
  for (Core* c : {&spec, &ref}) {
    c->btb().update(0x2560, 0x7642, 0, CpuMode::normal);
    for (int i = 0; i < 4; ++i) ASSERT_EQ(fig1_attempt(*c, 0x610000 - 0xa5, evicting_handler()).reason, StopReason::exited);
  }
  EXPECT_EQ(spec.state(), ref.state());
  EXPECT_TRUE(spec.cache().cached(0x613c00));
  EXPECT_FALSE(ref.cache().cached(0x613c00));
}

// ---- retpoline ----------------------------------------------------------------

TEST(Retpoline, RemovesEveryIndirectJumpAndCall) {
  progen::Options opt;
  opt.indirect = true;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Listing out = apply_retpoline(parse_listing(progen::generate(seed, opt).text));
    for (const auto& ins : out.instructions) {
      EXPECT_NE(ins.cls, InstrClass::indirect_jump) << format_instruction(ins);
      EXPECT_NE(ins.cls, InstrClass::indirect_call) << format_instruction(ins);
    }
  }
  Listing one = apply_retpoline(parse_listing("1000: callq *%rax\n1002: retq\n"));
  EXPECT_EQ(std::count_if(one.instructions.begin(), one.instructions.end(),
                          [](const Instruction& i) { return is_indirect_branch(i.cls) && i.cls != InstrClass::near_return; }),
            0);
  EXPECT_TRUE(std::any_of(one.symbols.begin(), one.symbols.end(),
                          [](const auto& s) { return s.first.starts_with("__retpoline_"); }));
}

TEST(Retpoline, PreservesSemantics) {
  progen::Options opt;
  opt.indirect = true;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Listing l = parse_listing(progen::generate(seed, opt).text);
    CoreConfig plain, rp;
    plain.speculation = false;
    rp.countermeasures.retpoline = true;
    Final a = run_core(l, plain, nullptr);
    Final b = run_core(l, rp, nullptr);
    ASSERT_EQ(a.regs, b.regs) << "seed " << seed;
    ASSERT_EQ(a.data, b.data) << "seed " << seed;
  }
}

TEST(Retpoline, MemoryOperandTargets) {
  const char* text =
      "1000: mov $0x300000,%r15\n"
      "1007: movq $0x1100,0x10(%r15)\n"
      "100f: callq *0x10(%r15)\n"
      "1013: push $0x1200\n"
      "1018: jmpq *(%rsp)\n"
      "1100: mov $0x5,%rbx\n"
      "1107: retq\n"
      "1200: add $0x8,%rsp\n"
      "1204: lea 0x7(%rip),%rax\n"
      "120b: jmpq *%rax\n"
      "1212: mov %rbx,0x20(%r15)\n"
      "1216: retq\n";
  Listing l = parse_listing(text);
  CoreConfig plain, rp;
  plain.speculation = false;
  rp.countermeasures.retpoline = true;
  Final a = run_core(l, plain, nullptr);
  Final b = run_core(l, rp, nullptr);
  EXPECT_EQ(a.regs, b.regs);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.data[0x20], 5);
}

TEST(Retpoline, FallbackStillSpeculatesOnReturns) {
  for (auto cpu : {CpuModel::skylake, CpuModel::pre_skylake}) {
    CoreConfig cfg;
    cfg.cpu = cpu;
    cfg.countermeasures.retpoline = true;
    Core c(fig1(), cfg);
    c.btb().update(0x2560, 0x7642, 0, CpuMode::normal);
    std::vector<int> hits;
    for (int attempt = 0; attempt < 4 && hits.empty(); ++attempt) {
      ASSERT_EQ(fig1_attempt(c, 0x610000 - 0xa5, evicting_handler()).reason, StopReason::exited);
      hits = reload_hits(c, 0x610000, 256);
    }
    if (cpu == CpuModel::skylake) {
      EXPECT_EQ(hits, std::vector<int>{0x3c});
      EXPECT_TRUE(has_event(c.trace(), EventKind::predict, 0x2560));
    } else {
      EXPECT_TRUE(hits.empty());
      EXPECT_TRUE(c.speculations().empty());
      EXPECT_TRUE(has_event(c.trace(), EventKind::stall, 0x2560));
    }
  }
}

// ---- race predicate -------------------------------------------------------------

TEST(Race, GridFillIffResolveAfterD3Completion) {
  std::size_t wins = 0, losses = 0;
  for (const auto& p : race::grid()) {
    auto o = race::run_point(fig1(), p);
    SCOPED_TRACE(std::to_string(int(p.d1)) + std::to_string(int(p.d2)) + std::to_string(int(p.d3)));
    ASSERT_TRUE(o.error.empty()) << o.error;
    EXPECT_EQ(o.resolve, o.expect_resolve);
    if (o.d3_issued) {
      EXPECT_EQ(o.d3_complete, o.expect_d3);
      EXPECT_EQ(o.filled, o.predicate());
    }
    EXPECT_EQ(o.filled, o.analytic());
    (o.filled ? wins : losses)++;
  }
  EXPECT_GT(wins, 0u);
  EXPECT_GT(losses, 0u);
}
