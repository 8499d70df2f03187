// Command-line front end: gadget scans, scenario simulation, extraction demos
// and countermeasure matrices.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include <sgxpectre/harness.hpp>

namespace {

using namespace sgxpectre;
using namespace sgxpectre::harness;
using nlohmann::ordered_json;

enum Exit : int { kOk = 0, kFindings = 1, kUsage = 2, kLimit = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string bundled(const std::string& name) { return std::string(SGXPECTRE_SCENARIO_DIR) + "/" + name; }

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot write " + path);
  f << text;
}

Listing load_listing(const std::string& path) {
  try {
    return parse_listing(read_file(path));
  } catch (const ParseError& e) {
    throw UsageError(path + ": " + e.what());
  }
}

struct Output {
  std::string format = "text";
  std::string path;

  bool structured() const { return format == "structured"; }
  void emit(const std::string& text) const {
    if (path.empty())
      std::cout << text;
    else
      write_file(path, text);
  }
  void emit(const ordered_json& j) const { emit(j.dump(2) + "\n"); }
};

void add_output(CLI::App* c, Output& o) {
  c->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"text", "structured"}));
  c->add_option("-o,--output", o.path, "Write output to a file instead of stdout");
}

// ---- simulator configuration ---------------------------------------------------

struct SimFlags {
  std::string cpu = "skylake";
  std::string latency;
  bool ibrs = false;
  bool stibp = false;
  bool retpoline = false;
  bool rsb_refill = false;
  std::vector<std::string> ibpb;
  std::uint64_t seed = 1;
  std::uint64_t budget = 1'000'000;
  std::string trace;
};

void add_sim_flags(CLI::App* c, SimFlags& f) {
  c->add_option("--cpu", f.cpu, "CPU model")->check(CLI::IsMember({"skylake", "pre-skylake"}));
  c->add_option("--latency", f.latency, "Latency file of key=value lines");
  c->add_flag("--ibrs", f.ibrs, "Enable IBRS");
  c->add_flag("--stibp", f.stibp, "Enable STIBP");
  c->add_flag("--retpoline", f.retpoline, "Rewrite indirect branches into retpolines");
  c->add_flag("--rsb-refill", f.rsb_refill, "Refill the RSB on enclave entry");
  c->add_option("--ibpb", f.ibpb, "Issue IBPB at a transition (eenter, eresume, eexit, aex)")
      ->check(CLI::IsMember({"eenter", "eresume", "eexit", "aex"}));
  c->add_option("--seed", f.seed, "Seed for demo secrets");
  c->add_option("--budget", f.budget, "Cycle budget per enclave run")->check(CLI::PositiveNumber);
  c->add_option("--trace", f.trace, "Write the event trace to a file");
}

CoreConfig make_config(const SimFlags& f) {
  CoreConfig cfg;
  cfg.cpu = *uarch::cpu_model_from_name(f.cpu);
  if (!f.latency.empty()) {
    try {
      cfg.latencies = uarch::Latencies::parse(read_file(f.latency));
    } catch (const SimError& e) {
      throw UsageError(f.latency + ": " + e.what());
    }
    if (!cfg.latencies.valid()) throw UsageError(f.latency + ": latencies must grow from l1 to memory");
  }
  cfg.countermeasures.ibrs = f.ibrs;
  cfg.countermeasures.stibp = f.stibp;
  cfg.countermeasures.retpoline = f.retpoline;
  cfg.countermeasures.rsb_refill_on_entry = f.rsb_refill;
  for (const auto& t : f.ibpb) cfg.countermeasures.ibpb_events.insert(*uarch::transition_from_name(t));
  return cfg;
}

void write_trace(const SimFlags& f, const std::vector<uarch::TraceEvent>& trace) {
  if (!f.trace.empty()) write_file(f.trace, uarch::format_trace(trace));
}

// ---- scan ----------------------------------------------------------------------

struct ScanFlags {
  std::string listing;
  std::string mode = "both";
  std::string entry = "enclave_entry";
  std::string ocall = "sgx_ocall";
  ExploreConfig explore;
  bool expect_clean = false;
  Output out;
};

int cmd_scan(const ScanFlags& f) {
  Listing l = load_listing(f.listing);
  EntryModel em;
  em.entry_symbol = f.entry;
  em.ocall_symbol = f.ocall;
  if (!f.explore.valid()) throw UsageError("exploration bounds must be positive");
  GadgetReport r;
  r.corpus_id = std::filesystem::path(f.listing).stem().string();
  std::uint64_t pruned = 0;
  for (Mode m : {Mode::ecall, Mode::oret}) {
    if (f.mode != "both" && mode_from_name(f.mode) != m) continue;
    if (l.instructions.empty()) continue;
    if (!l.symbols.count(em.entry_symbol)) throw UsageError("no entry symbol " + em.entry_symbol);
    if (m == Mode::oret && !l.symbols.count(em.ocall_symbol)) {
      // Without an OCall site there is no ORet entry.
      if (f.mode == "both") continue;
      throw UsageError("no OCall symbol " + em.ocall_symbol);
    }
    auto s = scan_type1_full(l, em, m, f.explore);
    pruned += s.summary.pruned;
    auto ranked = rank_type1(std::move(s.gadgets));
    r.type1.insert(r.type1.end(), ranked.begin(), ranked.end());
  }
  f.out.emit(emit_report(r, f.out.structured() ? ReportFormat::structured : ReportFormat::text));
  if (pruned) {
    std::cerr << "exploration limit hit: " << pruned << " paths pruned\n";
    return kLimit;
  }
  return f.expect_clean && !r.type1.empty() ? kFindings : kOk;
}

struct Scan2Flags {
  std::string listing;
  ScanConfig cfg;
  bool expect_clean = false;
  Output out;
};

int cmd_scan2(const Scan2Flags& f) {
  Listing l = load_listing(f.listing);
  GadgetReport r;
  r.corpus_id = std::filesystem::path(f.listing).stem().string();
  r.type2 = rank_type2(scan_type2(l, f.cfg));
  f.out.emit(emit_report(r, f.out.structured() ? ReportFormat::structured : ReportFormat::text));
  return f.expect_clean && !r.type2.empty() ? kFindings : kOk;
}

// ---- simulate ------------------------------------------------------------------

struct SimulateFlags {
  std::string program = bundled("fig1.prog");
  std::string scenario = bundled("fig1.scn");
  SimFlags sim;
  unsigned retries = kRetryBudget;
  Output out;
};

std::string result_text(const AttackResult& r) {
  std::string s = format_result(r);
  if (!r.note.empty()) s += "note: " + r.note + "\n";
  return s;
}

int cmd_simulate(const SimulateFlags& f) {
  Listing l = load_listing(f.program);
  Scenario sc = parse_scenario(read_file(f.scenario));
  Core core(l, make_config(f.sim));
  RunOptions opt;
  opt.seed = f.sim.seed;
  opt.retries = f.retries;
  opt.budget = f.sim.budget;
  auto r = run_scenario(core, sc, opt);
  write_trace(f.sim, r.trace);
  if (f.out.structured())
    f.out.emit(to_json(r));
  else
    f.out.emit(result_text(r));
  return kOk;
}

// ---- demos ---------------------------------------------------------------------

struct DemoFlags {
  std::string profile = bundled("sdk_victim.json");
  SimFlags sim;
  Output out;
};

struct Victim {
  Listing program;
  VictimProfile profile;
};

Victim load_victim(const std::string& path) {
  std::string text = read_file(path);
  std::string prog;
  try {
    prog = ordered_json::parse(text).at("program").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
  auto dir = std::filesystem::path(path).parent_path();
  Victim v{load_listing((dir / prog).string()), {}};
  v.profile = parse_victim_profile(text, v.program);
  return v;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// A register is known only if all of its bytes were recovered.
bool field_known(const AttackResult& raw, std::uint64_t off) {
  for (std::uint64_t i = off; i < off + 8; ++i)
    if (i >= raw.recovered.size() || !raw.recovered[i]) return false;
  return true;
}

int cmd_demo_ssa(const DemoFlags& f) {
  Victim v = load_victim(f.profile);
  Core core(v.program, make_config(f.sim));
  auto snap = demo_ssa(core, v.profile, f.sim.seed);
  write_trace(f.sim, core.trace());
  std::vector<std::pair<std::string, std::optional<std::uint64_t>>> fields;
  for (Reg r : kReportOrder) {
    auto off = uarch::gprsgx::reg(r);
    fields.emplace_back(std::string(reg_name(r)),
                        field_known(snap.raw, off) ? std::optional(snap.regs.at(r)) : std::nullopt);
  }
  fields.emplace_back("rip", field_known(snap.raw, uarch::gprsgx::rip) ? std::optional(snap.rip) : std::nullopt);
  if (f.out.structured()) {
    ordered_json j;
    j["registers"] = ordered_json::object();
    for (const auto& [n, val] : fields) j["registers"][n] = val ? ordered_json(hex64(*val)) : ordered_json();
    j["result"] = to_json(snap.raw);
    f.out.emit(j);
  } else {
    std::ostringstream os;
    os << "register | value\n";
    for (const auto& [n, val] : fields) os << n << " | " << (val ? hex64(*val) : "??") << "\n";
    os << "\n" << result_text(snap.raw);
    f.out.emit(os.str());
  }
  return kOk;
}

int cmd_demo_key(const DemoFlags& f) {
  Victim v = load_victim(f.profile);
  Core core(v.program, make_config(f.sim));
  auto t = demo_key(core, v.profile, f.sim.seed);
  write_trace(f.sim, core.trace());
  bool rsp_known = t.rsp_bytes.all_recovered();
  if (f.out.structured()) {
    ordered_json j;
    j["rsp"] = rsp_known ? ordered_json(hex64(t.rsp)) : ordered_json();
    j["rsp-extraction"] = to_json(t.rsp_bytes);
    j["key"] = to_json(t.key);
    f.out.emit(j);
  } else {
    std::ostringstream os;
    os << "saved rsp: " << (rsp_known ? hex64(t.rsp) : "??") << "\n\n" << result_text(t.key);
    f.out.emit(os.str());
  }
  return kOk;
}

// ---- eval-mitigations ----------------------------------------------------------

struct EvalFlags {
  std::string program = bundled("fig1.prog");
  std::string scenario = bundled("fig1.scn");
  std::string matrix = "default";
  SimFlags sim;
  Output out;
};

// A matrix file is a JSON array of cells:
// {"name", "cpu", "countermeasures": {"ibrs", "stibp", "retpoline", "rsb-refill", "ibpb": [...]}, "poisoning"}
std::vector<MatrixCell> load_matrix(const std::string& spec) {
  if (spec == "default") return default_matrix();
  std::vector<MatrixCell> cells;
  try {
    for (const auto& e : ordered_json::parse(read_file(spec))) {
      MatrixCell c;
      c.name = e.at("name").get<std::string>();
      auto cpu = uarch::cpu_model_from_name(e.value("cpu", std::string("skylake")));
      if (!cpu) throw UsageError(spec + ": unknown cpu in cell " + c.name);
      c.cpu = *cpu;
      auto cm = e.value("countermeasures", ordered_json::object());
      c.countermeasures.ibrs = cm.value("ibrs", false);
      c.countermeasures.stibp = cm.value("stibp", false);
      c.countermeasures.retpoline = cm.value("retpoline", false);
      c.countermeasures.rsb_refill_on_entry = cm.value("rsb-refill", false);
      for (const auto& t : cm.value("ibpb", ordered_json::array())) {
        auto tr = uarch::transition_from_name(t.get<std::string>());
        if (!tr) throw UsageError(spec + ": unknown transition in cell " + c.name);
        c.countermeasures.ibpb_events.insert(*tr);
      }
      if (e.contains("poisoning") && !e["poisoning"].is_null()) {
        auto m = poison_mode_from_name(e["poisoning"].get<std::string>());
        if (!m) throw UsageError(spec + ": unknown poisoning mode in cell " + c.name);
        c.poison = m;
      }
      cells.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(spec + ": " + e.what());
  }
  return cells;
}

int cmd_eval(const EvalFlags& f) {
  Listing l = load_listing(f.program);
  Scenario sc = parse_scenario(read_file(f.scenario));
  RunOptions opt;
  opt.seed = f.sim.seed;
  opt.budget = f.sim.budget;
  CoreConfig base = make_config(f.sim);
  auto rows = countermeasure_matrix(l, sc, load_matrix(f.matrix), opt, base);
  if (f.out.structured())
    f.out.emit(to_json(rows));
  else
    f.out.emit(format_matrix(rows));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SGX branch-target-injection lab: gadget scanner and microarchitectural simulator"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file (defaults < file < flags)")->envname("SGXPECTRE_CONFIG");

  ScanFlags scan;
  auto* c_scan = app.add_subcommand("scan", "Find Type-I gadgets reachable from the enclave entry");
  c_scan->add_option("listing", scan.listing, "objdump listing")->required();
  c_scan->add_option("--mode", scan.mode, "Entry mode")->check(CLI::IsMember({"ecall", "oret", "both"}));
  c_scan->add_option("--entry", scan.entry, "Entry symbol");
  c_scan->add_option("--ocall", scan.ocall, "OCall symbol");
  c_scan->add_option("--max-steps", scan.explore.max_steps, "Instructions per path");
  c_scan->add_option("--max-states", scan.explore.max_states, "Paths explored");
  c_scan->add_option("--loop-bound", scan.explore.loop_bound, "Visits per branch site and path");
  c_scan->add_option("--max-fork-depth", scan.explore.max_fork_depth, "Forks per path");
  c_scan->add_flag("--expect-clean", scan.expect_clean, "Exit 1 if any gadget is found");
  add_output(c_scan, scan.out);

  Scan2Flags scan2;
  auto* c_scan2 = app.add_subcommand("scan2", "Find Type-II gadgets");
  c_scan2->add_option("listing", scan2.listing, "objdump listing")->required();
  c_scan2->add_option("--window", scan2.cfg.window, "Instructions per gadget")->check(CLI::PositiveNumber);
  c_scan2->add_flag("--require-regC", scan2.cfg.require_reg_c, "Only report [regA,regB,regC] gadgets");
  c_scan2->add_flag("--expect-clean", scan2.expect_clean, "Exit 1 if any gadget is found");
  add_output(c_scan2, scan2.out);

  SimulateFlags sim;
  auto* c_sim = app.add_subcommand("simulate", "Run an attack scenario on the simulated core");
  c_sim->add_option("program", sim.program, "Program listing")->capture_default_str();
  c_sim->add_option("scenario", sim.scenario, "Scenario script")->capture_default_str();
  c_sim->add_option("--retries", sim.retries, "Attempts per byte")->check(CLI::PositiveNumber);
  add_sim_flags(c_sim, sim.sim);
  add_output(c_sim, sim.out);

  DemoFlags ssa;
  auto* c_ssa = app.add_subcommand("demo-ssa", "Interrupt the victim and read its registers from the SSA");
  c_ssa->add_option("--profile", ssa.profile, "Victim profile")->capture_default_str();
  add_sim_flags(c_ssa, ssa.sim);
  add_output(c_ssa, ssa.out);

  DemoFlags key;
  auto* c_key = app.add_subcommand("demo-key", "Pause the victim in its key-handling call and read the key");
  c_key->add_option("--profile", key.profile, "Victim profile")->capture_default_str();
  add_sim_flags(c_key, key.sim);
  add_output(c_key, key.out);

  EvalFlags eval;
  auto* c_eval = app.add_subcommand("eval-mitigations", "Replay a scenario under a countermeasure matrix");
  c_eval->add_option("program", eval.program, "Program listing")->capture_default_str();
  c_eval->add_option("scenario", eval.scenario, "Scenario script")->capture_default_str();
  c_eval->add_option("--matrix", eval.matrix, "'default' or a JSON cell list");
  add_sim_flags(c_eval, eval.sim);
  add_output(c_eval, eval.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*c_scan) return cmd_scan(scan);
    if (*c_scan2) return cmd_scan2(scan2);
    if (*c_sim) return cmd_simulate(sim);
    if (*c_ssa) return cmd_demo_ssa(ssa);
    if (*c_key) return cmd_demo_key(key);
    if (*c_eval) return cmd_eval(eval);
  } catch (const LimitError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kLimit;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ScenarioError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const SimError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
