#pragma once

// Random straight-line-ish x86-64 programs in listing syntax, for property
// tests. Programs keep rsp balanced, use r15 as a fixed data-region pointer
// and only branch forward, so they always terminate.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace progen {

struct Options {
  int length = 24;
  bool calls = true;
  bool indirect = false;           // emit indirect jmp/call through a register
  bool init_registers = true;      // start by loading every register with a constant
  std::uint64_t base = 0x1000;
  std::uint64_t helper = 0x2000;
  std::uint64_t data = 0x300000;
};

struct Program {
  std::string text;
  std::vector<std::uint64_t> indirect_sites;
};

inline Program generate(std::uint64_t seed, const Options& opt = {}) {
  std::mt19937_64 rng(seed);
  auto pick = [&](const auto& v) { return v[rng() % v.size()]; };
  auto chance = [&](int pct) { return static_cast<int>(rng() % 100) < pct; };
  static const std::vector<std::string> r64 = {"%rax", "%rbx", "%rcx", "%rdx", "%rsi", "%rdi", "%rbp",
                                               "%r8",  "%r9",  "%r10", "%r11", "%r12", "%r13", "%r14"};
  static const std::vector<std::string> r32 = {"%eax", "%ebx", "%ecx", "%edx", "%esi", "%edi", "%r8d", "%r12d"};
  static const std::vector<std::string> r16 = {"%ax", "%bx", "%si", "%r9w"};
  static const std::vector<std::string> r8 = {"%al", "%bl", "%cl", "%dil", "%ah", "%r10b"};
  static const std::vector<std::string> cc = {"e", "ne", "b", "ae", "be", "a", "l", "ge", "le", "g", "s", "ns"};

  auto hex = [](std::uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
  };
  auto mem = [&](int width_bytes) {
    std::uint64_t disp = (rng() % 32) * 8 + (width_bytes < 8 ? rng() % 4 : 0);
    return hex(disp) + "(%r15)";
  };
  auto reg_any = [&](std::string& w) -> std::string {
    switch (rng() % 6) {
      case 0: w = "l"; return pick(r32);
      case 1: w = "w"; return pick(r16);
      case 2: w = "b"; return pick(r8);
      default: w = "q"; return pick(r64);
    }
  };

  std::vector<std::string> body;
  body.push_back("mov $" + hex(opt.data) + ",%r15");
  if (opt.init_registers)
    for (const auto& r : r64) body.push_back("mov $" + hex(rng()) + "," + r);
  body.push_back("cmp %rax,%rbx");  // flags are undefined on entry
  int pending_pops = 0;
  std::vector<std::string> pushed;
  for (int i = 0; i < opt.length; ++i) {
    std::string w;
    int kind = static_cast<int>(rng() % 16);
    switch (kind) {
      case 0: body.push_back("mov $" + hex(rng() % 0x100000000ull) + "," + pick(r32)); break;
      case 1: {
        std::string a = reg_any(w);
        std::string b;
        if (w == "q") b = pick(r64);
        else if (w == "l") b = pick(r32);
        else if (w == "w") b = pick(r16);
        else b = pick(r8);
        static const std::vector<std::string> ops = {"add", "sub", "and", "or", "xor", "mov", "cmp", "test"};
        body.push_back(pick(ops) + " " + a + "," + b);
        break;
      }
      case 2: {
        static const std::vector<std::string> ops = {"add", "sub", "and", "or", "xor", "cmp"};
        body.push_back(pick(ops) + " $" + hex(rng() % 0x80) + "," + pick(r64));
        break;
      }
      case 3: {
        static const std::vector<std::string> ops = {"shl", "shr", "sar", "rol", "ror"};
        body.push_back(pick(ops) + " $" + hex(1 + rng() % 40) + "," + (chance(50) ? pick(r64) : pick(r32)));
        break;
      }
      case 4: body.push_back("imul " + pick(r64) + "," + pick(r64)); break;
      case 5: {
        static const std::vector<std::string> ops = {"not", "neg", "inc", "dec"};
        body.push_back(pick(ops) + " " + (chance(50) ? pick(r64) : pick(r32)));
        break;
      }
      case 6:
        body.push_back("lea " + hex(rng() % 0x100) + "(" + pick(r64) + "," + pick(r64) + "," +
                       std::to_string(1 << (rng() % 4)) + ")," + pick(r64));
        break;
      case 7: {
        static const std::vector<std::string> ops = {"movzbl", "movzwl", "movsbq", "movslq", "movzbq"};
        std::string op = pick(ops);
        std::string dst = op.back() == 'l' ? pick(r32) : pick(r64);
        body.push_back(op + " " + mem(op[4] == 'b' ? 1 : op[4] == 'w' ? 2 : 4) + "," + dst);
        break;
      }
      case 8: body.push_back("mov " + mem(8) + "," + pick(r64)); break;
      case 9: body.push_back("mov " + (chance(50) ? pick(r64) : pick(r32)) + "," + mem(8)); break;
      case 10: body.push_back("set" + pick(cc) + " " + pick(r8)); break;
      case 11: body.push_back("cmov" + pick(cc) + " " + pick(r64) + "," + pick(r64)); break;
      case 12:
        if (pending_pops < 3) {
          body.push_back("push " + pick(r64));
          ++pending_pops;
        } else {
          body.push_back("pop " + pick(r64));
          --pending_pops;
        }
        break;
      case 13:
        body.push_back("cmp " + pick(r64) + "," + pick(r64));
        body.push_back("j" + pick(cc) + " @+" + std::to_string(1 + rng() % 4));
        break;
      case 14:
        if (opt.calls) body.push_back("call @helper");
        else body.push_back("nop");
        break;
      default:
        if (opt.indirect) {
          body.push_back("lea @+2(%rip),%rax");
          body.push_back(chance(50) ? "jmpq *%rax" : "callq *%rax");
          body.push_back("nop");
          if (body.back() == "nop" && body[body.size() - 2] == "callq *%rax") body.back() = "add $0x8,%rsp";
        } else {
          body.push_back("lfence");
        }
        break;
    }
  }
  while (pending_pops-- > 0) body.push_back("pop " + pick(r64));
  body.push_back("retq");

  // Lay out with 4-byte slots; resolve @+N (N instructions ahead) and @helper.
  Program prog;
  std::ostringstream os;
  os << std::hex;
  os << "0000000000001000 <main>:\n";
  auto addr_of = [&](std::size_t i) { return opt.base + 4 * i; };
  for (std::size_t i = 0; i < body.size(); ++i) {
    std::string line = body[i];
    if (auto p = line.find("@helper"); p != std::string::npos) {
      line.replace(p, 7, hex(opt.helper).substr(2) + " <helper>");
    }
    if (auto p = line.find("@+"); p != std::string::npos) {
      std::size_t end = p + 2;
      while (end < line.size() && std::isdigit(static_cast<unsigned char>(line[end]))) ++end;
      std::size_t n = std::stoul(line.substr(p + 2, end - p - 2));
      std::size_t target = std::min(i + n, body.size() - 1);
      // never skip over stack adjustments or an indirect-branch sequence
      for (std::size_t j = i + 1; j < target; ++j) {
        const std::string& t = body[j];
        if (t.starts_with("push") || t.starts_with("pop") || t.starts_with("lea @")) {
          target = j;
          break;
        }
      }
      if (line.find("(%rip)") != std::string::npos) {
        // rip-relative to the instruction after this one
        std::uint64_t t = addr_of(std::min(i + 2, body.size() - 1));
        std::uint64_t disp = t - addr_of(i + 1);
        line.replace(p, end - p, hex(disp));
      } else {
        line.replace(p, end - p, hex(addr_of(target)).substr(2));
      }
    }
    if (line.starts_with("jmpq *") || line.starts_with("callq *")) prog.indirect_sites.push_back(addr_of(i));
    os << addr_of(i) << ": " << line << "\n";
  }
  os << "\n0000000000002000 <helper>:\n";
  os << "2000: add $0x11,%rax\n2004: xor %rbx,%rcx\n2008: mov %rcx,0x40(%r15)\n200c: retq\n";
  prog.text = os.str();
  return prog;
}

}  // namespace progen
