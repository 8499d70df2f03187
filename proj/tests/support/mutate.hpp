#pragma once

// Random in-place rewrites of a listing: straight-line instructions are
// replaced by register shuffles, clears, immediates and loads. Addresses,
// bytes and control flow are kept, so every branch target stays valid.

#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace mutate {

inline bool rewritable(const std::string& text) {
  static const std::vector<std::string> ok = {"mov ", "mov\t", "add ", "sub ", "xor ", "and ", "or ", "lea ",
                                              "movzbl", "test ", "cmp ", "shl ", "sete"};
  bool known = false;
  for (const auto& m : ok) known |= text.rfind(m, 0) == 0;
  return known && text.find("sp") == std::string::npos && text.find("%gs") == std::string::npos;
}

inline std::string random_instruction(std::mt19937_64& rng) {
  static const std::vector<std::string> r64 = {"%rax", "%rbx", "%rcx", "%rdx", "%rsi", "%rdi", "%rbp",
                                               "%r8",  "%r9",  "%r10", "%r11", "%r12", "%r13", "%r14", "%r15"};
  static const std::vector<std::string> r32 = {"%eax", "%ebx", "%ecx", "%edx", "%esi", "%edi", "%ebp",
                                               "%r8d", "%r9d", "%r10d", "%r11d", "%r12d", "%r13d"};
  auto pick = [&](const auto& v) { return v[rng() % v.size()]; };
  std::ostringstream os;
  os << std::hex;
  switch (rng() % 8) {
    case 0: {
      auto r = pick(r32);
      os << "xor " << r << "," << r;
      break;
    }
    case 1: os << "mov " << pick(r64) << "," << pick(r64); break;
    case 2: os << "mov $0x" << rng() % 0x10000 << "," << pick(r32); break;
    case 3: os << "add " << pick(r64) << "," << pick(r64); break;
    case 4: os << "and $0x" << rng() % 0x100 << "," << pick(r64); break;
    case 5: os << "lea 0x" << rng() % 0x80 << "(" << pick(r64) << "," << pick(r64) << ",2)," << pick(r64); break;
    case 6: os << "mov 0x" << 8 * (rng() % 16) << "(" << pick(r64) << ")," << pick(r64); break;
    default: os << "shl $0x" << 1 + rng() % 7 << "," << pick(r64); break;
  }
  return os.str();
}

// Listing with `count` rewritten instructions.
inline std::string mutate(const std::string& listing, std::uint64_t seed, unsigned count) {
  std::vector<std::string> lines;
  std::istringstream in(listing);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  std::vector<std::size_t> sites;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto t1 = lines[i].find('\t');
    auto t2 = t1 == std::string::npos ? t1 : lines[i].find('\t', t1 + 1);
    if (t2 == std::string::npos || lines[i].find(':') > t1) continue;
    if (rewritable(lines[i].substr(t2 + 1))) sites.push_back(i);
  }
  std::mt19937_64 rng(seed);
  for (unsigned k = 0; k < count && !sites.empty(); ++k) {
    std::size_t i = sites[rng() % sites.size()];
    auto t2 = lines[i].find('\t', lines[i].find('\t') + 1);
    lines[i] = lines[i].substr(0, t2 + 1) + random_instruction(rng);
  }
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

}  // namespace mutate
