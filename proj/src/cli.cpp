#include "uvgpu/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "uvgpu/assembler.hpp"
#include "uvgpu/kernels.hpp"
#include "uvgpu/litmus.hpp"
#include "uvgpu/machcfg.hpp"
#include "uvgpu/vm.hpp"

namespace uvgpu {
namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError(fmt::format("cannot open '{}'", path));
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Writes to a file, or to `out` when the path is "-".
void write_output(const std::string& path, const std::string& data, std::ostream& out) {
  if (path == "-") {
    out << data;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UsageError(fmt::format("cannot write '{}'", path));
  f << data;
}

std::uint64_t parse_number(std::string_view s, std::string_view what) {
  std::string_view digits = s;
  int base = 10;
  if (digits.size() > 2 && digits[0] == '0' && (digits[1] == 'x' || digits[1] == 'X')) {
    digits.remove_prefix(2);
    base = 16;
  }
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, base);
  if (ec != std::errc() || ptr != digits.data() + digits.size() || digits.empty())
    throw UsageError(fmt::format("invalid {} '{}'", what, s));
  return v;
}

std::uint32_t parse_word(std::string_view s) {
  if (!s.empty() && s[0] == '-') {
    const std::uint64_t v = parse_number(s.substr(1), "argument");
    if (v > 0x80000000ull) throw UsageError(fmt::format("argument '{}' out of range", s));
    return static_cast<std::uint32_t>(0u - static_cast<std::uint32_t>(v));
  }
  const std::uint64_t v = parse_number(s, "argument");
  if (v > 0xffffffffull) throw UsageError(fmt::format("argument '{}' out of range", s));
  return static_cast<std::uint32_t>(v);
}

/// "64", "32,32" or "32x32x1".
Dim3 parse_dim(const std::string& s, std::string_view what) {
  std::vector<std::uint32_t> parts;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = s.find_first_of(",x", start);
    const std::string piece = s.substr(start, end == std::string::npos ? std::string::npos : end - start);
    const std::uint64_t v = parse_number(piece, what);
    if (v == 0 || v > 0xffffffffull) throw UsageError(fmt::format("{} components must be positive", what));
    parts.push_back(static_cast<std::uint32_t>(v));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  if (parts.empty() || parts.size() > 3) throw UsageError(fmt::format("invalid {} '{}'", what, s));
  Dim3 d;
  d.x = parts[0];
  if (parts.size() > 1) d.y = parts[1];
  if (parts.size() > 2) d.z = parts[2];
  return d;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

MachineDescriptor pick_machine(const std::string& flag) {
  std::string name = flag;
  if (name.empty()) {
    const char* env = std::getenv("UVGPU_MACHINE");
    name = env && *env ? env : "nvidia";
  }
  return resolve_machine(name);
}

/// Parses a source file, printing diagnostics. Returns nullopt on errors.
std::optional<Program> assemble(const std::string& path, std::ostream& err) {
  const std::string text = read_file(path);
  auto result = parse_program(text);
  for (const auto& d : result.diagnostics) err << path << ":" << to_string(d) << "\n";
  return std::move(result.program);
}

bool report_validation(const Program& p, const MachineDescriptor& m, const std::string& path, std::ostream& err) {
  const auto report = validate_program(p, m);
  for (const auto& d : report.diagnostics)
    err << fmt::format("{}: {}[{}]: error: [{}] {}\n", path, d.function, d.index, d.rule, d.message);
  return report.ok();
}

std::string hex_dump(const std::vector<std::uint8_t>& bytes, std::uint64_t base) {
  std::string out;
  for (std::size_t i = 0; i < bytes.size(); i += 16) {
    out += fmt::format("{:08x}:", base + i);
    for (std::size_t j = i; j < std::min(bytes.size(), i + 16); ++j) out += fmt::format(" {:02x}", bytes[j]);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

struct RunCommand {
  std::string file;
  std::string machine;
  std::string wg = "32";
  std::string grid = "1";
  std::vector<std::string> args;
  std::uint64_t seed = 0;
  std::string trace;
  std::string stats;
  std::string dump;
  std::string dump_format = "raw";
  std::string dump_range;
  std::vector<std::string> loads;
  bool interleave = false;
  bool check_races = false;
  std::uint64_t max_steps = 200'000'000;
};

int cmd_run(const RunCommand& o, std::ostream& out, std::ostream& err) {
  const MachineDescriptor m = pick_machine(o.machine);
  auto p = assemble(o.file, err);
  if (!p) return kExitFailure;
  if (!report_validation(*p, m, o.file, err)) return kExitFailure;

  LaunchConfig cfg;
  cfg.machine = m;
  cfg.workgroup = parse_dim(o.wg, "workgroup size");
  cfg.grid = parse_dim(o.grid, "grid");
  for (const auto& a : o.args) cfg.args.push_back(parse_word(a));
  cfg.seed = o.seed;
  cfg.trace = !o.trace.empty();
  cfg.interleave_workgroups = o.interleave;
  cfg.check_races = o.check_races;
  cfg.max_steps = o.max_steps;
  for (const auto& spec : o.loads) {
    const auto at = spec.rfind('@');
    const std::string path = spec.substr(0, at);
    const std::uint64_t offset = at == std::string::npos ? 0 : parse_number(spec.substr(at + 1), "load offset");
    const std::string data = read_file(path);
    if (!cfg.device.in_bounds(offset, data.size()))
      throw UsageError(fmt::format("'{}' does not fit device memory at offset {}", path, offset));
    cfg.device.write(offset, std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
  }

  const ExecResult r = launch(*p, cfg);

  if (!o.stats.empty()) write_output(o.stats, stats_to_json(r.stats), out);
  if (!o.trace.empty()) {
    std::string text;
    for (const auto& t : r.trace) text += t.to_string() + "\n";
    write_output(o.trace, text, out);
  }
  if (!o.dump.empty()) {
    std::uint64_t offset = 0;
    std::uint64_t length = r.device.high_water();
    if (!o.dump_range.empty()) {
      const auto colon = o.dump_range.find(':');
      if (colon == std::string::npos) throw UsageError("--dump-range expects OFFSET:LENGTH");
      offset = parse_number(o.dump_range.substr(0, colon), "dump offset");
      length = parse_number(o.dump_range.substr(colon + 1), "dump length");
      if (!r.device.in_bounds(offset, length)) throw UsageError("--dump-range outside device memory");
    }
    const auto bytes = r.device.read(offset, length);
    if (o.dump_format == "hex") write_output(o.dump, hex_dump(bytes, offset), out);
    else write_output(o.dump, std::string(bytes.begin(), bytes.end()), out);
  }
  for (const auto& race : r.races) err << "race: " << race.describe() << "\n";
  if (r.trap) {
    err << r.trap->describe() << "\n";
    return kExitTrap;
  }
  return kExitOk;
}

int cmd_validate(const std::string& file, const std::string& machine, std::ostream& out, std::ostream& err) {
  const MachineDescriptor m = pick_machine(machine);
  auto p = assemble(file, err);
  if (!p) return kExitFailure;
  if (!report_validation(*p, m, file, err)) return kExitFailure;
  out << fmt::format("{}: ok on {} (regs {}, scratch {})\n", file, m.name, p->regs_used, p->scratch_used);
  return kExitOk;
}

std::string limiting_label(const OccupancyResult& r) {
  return r.limiting == LimitingResource::none ? "registers and scratchpad" : std::string(to_string(r.limiting));
}

int cmd_occupancy(const std::string& machine, std::optional<std::uint32_t> regs, std::uint32_t scratch,
                  std::optional<std::uint32_t> wg, const std::string& sweep, std::ostream& out, std::ostream& err) {
  const MachineDescriptor m = pick_machine(machine);
  const std::uint32_t threads = wg.value_or(m.wave_width);
  if (!sweep.empty()) {
    const std::string prefix = "regs=";
    const auto dots = sweep.find("..");
    if (sweep.rfind(prefix, 0) != 0 || dots == std::string::npos)
      throw UsageError("--sweep expects regs=LO..HI");
    const auto lo = parse_number(sweep.substr(prefix.size(), dots - prefix.size()), "sweep bound");
    const auto hi = parse_number(sweep.substr(dots + 2), "sweep bound");
    if (lo < 1 || lo > hi) throw UsageError("--sweep needs 1 <= LO <= HI");
    if (hi > m.max_regs) {
      err << fmt::format("error: kernel exceeds register budget ({} > R={})\n", hi, m.max_regs);
      return kExitFailure;
    }
    out << "regs,O,limiting\n";
    for (auto r = lo; r <= hi; ++r) {
      const auto res = occupancy(m, static_cast<std::uint32_t>(r), scratch, threads);
      out << fmt::format("{},{},{}\n", r, res.resident_waves, limiting_label(res));
    }
    return kExitOk;
  }
  if (!regs) throw UsageError("occupancy needs --regs or --sweep");
  try {
    const auto res = occupancy(m, *regs, scratch, threads);
    out << fmt::format("O={} ({})\n", res.resident_waves, limiting_label(res));
  } catch (const MachineError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

struct BenchOptions {
  std::string machines = "all";
  std::string kernels = "all";
  std::uint64_t seeds = 1;
  std::string format = "csv";
  std::string output = "-";
};

int cmd_bench(const BenchOptions& o, std::ostream& out, std::ostream& err) {
  if (o.seeds < 1) {
    err << "error: seeds must be ≥ 1\n";
    return kExitFailure;
  }
  if (o.format != "csv" && o.format != "json") throw UsageError("--out must be csv or json");
  std::vector<MachineDescriptor> machines;
  for (const auto& name : o.machines == "all" ? preset_names() : split_list(o.machines))
    machines.push_back(resolve_machine(name));
  std::vector<KernelName> kernels;
  if (o.kernels == "all") {
    kernels = {KernelName::gemm, KernelName::reduction, KernelName::histogram};
  } else {
    for (const auto& name : split_list(o.kernels)) {
      auto k = parse_kernel_name(name);
      if (!k) throw UsageError(fmt::format("unknown kernel '{}' (expected gemm, reduction or histogram)", name));
      kernels.push_back(*k);
    }
  }

  std::vector<BenchReport> rows;
  for (auto k : kernels)
    for (const auto& m : machines)
      for (auto v : {Variant::abstract, Variant::native_style})
        for (std::uint64_t seed = 1; seed <= o.seeds; ++seed) rows.push_back(run_benchmark(default_spec(k, v), m, seed));

  const auto checks = identity_checks(rows);
  bool ok = std::all_of(rows.begin(), rows.end(), [](const BenchReport& r) { return r.pass; }) &&
            std::all_of(checks.begin(), checks.end(), [](const IdentityCheck& c) { return c.ok; });

  std::string text;
  if (o.format == "csv") {
    text = std::string(kBenchCsvHeader) + "\n";
    for (const auto& r : rows) text += bench_csv_row(r) + "\n";
    for (const auto& c : checks) text += fmt::format("# identity {}: {}\n", c.ok ? "ok" : "FAILED", c.text);
  } else {
    text = bench_json(rows);
  }
  write_output(o.output, text, out);
  for (const auto& r : rows)
    if (!r.pass) err << fmt::format("{} {} {} seed {}: {}\n", r.kernel, r.variant, r.preset, r.seed, r.error);
  if (o.format == "json")
    for (const auto& c : checks)
      if (!c.ok) err << "identity failed: " << c.text << "\n";
  return ok ? kExitOk : kExitFailure;
}

int cmd_litmus(const std::string& machine, std::uint64_t seeds, bool unfenced, std::ostream& out, std::ostream& err) {
  if (seeds < 1) {
    err << "error: seeds must be ≥ 1\n";
    return kExitFailure;
  }
  const MachineDescriptor m = pick_machine(machine);
  const bool fenced = !unfenced;
  std::uint64_t racy_seeds = 0;
  std::uint64_t reports = 0;
  std::optional<RaceReport> first;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    auto r = run_message_passing(m, seed, fenced);
    if (r.trap) {
      err << r.trap->describe() << "\n";
      return kExitTrap;
    }
    if (!r.races.empty()) {
      ++racy_seeds;
      reports += r.races.size();
      if (!first) first = r.races.front();
    }
  }
  const std::string label = fenced ? "fenced" : "unfenced";
  if (reports == 0) {
    out << fmt::format("0 races ({} message passing, {} seeds on {})\n", label, seeds, m.name);
  } else {
    out << fmt::format("races detected ({} message passing: {} of {} seeds on {})\n", label, racy_seeds, seeds, m.name);
    out << "  " << first->describe() << "\n";
  }
  return (fenced ? reports == 0 : reports > 0) ? kExitOk : kExitFailure;
}

int cmd_fmt(const std::string& file, bool in_place, std::ostream& out, std::ostream& err) {
  auto p = assemble(file, err);
  if (!p) return kExitFailure;
  const std::string text = format_program(*p);
  write_output(in_place ? file : "-", text, out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Functional simulator and toolchain for a portable GPU instruction set"};
  app.name("uvgpu");
  app.require_subcommand(1);

  RunCommand run;
  auto* run_cmd = app.add_subcommand("run", "Assemble, validate and execute a program");
  run_cmd->add_option("file", run.file, ".uva source")->required();
  run_cmd->add_option("--machine", run.machine, "Preset name or .mcfg file (default: $UVGPU_MACHINE or nvidia)");
  run_cmd->add_option("--wg", run.wg, "Workgroup size: X, X,Y or X,Y,Z");
  run_cmd->add_option("--grid", run.grid, "Grid size in workgroups: X, X,Y or X,Y,Z");
  run_cmd->add_option("--arg", run.args, "Argument word (repeatable, decimal or 0x hex)");
  run_cmd->add_option("--seed", run.seed, "Scheduler seed");
  run_cmd->add_option("--trace", run.trace, "Write the execution trace to this path ('-' for stdout)");
  run_cmd->add_option("--stats", run.stats, "Write counters as JSON to this path ('-' for stdout)");
  run_cmd->add_option("--dump", run.dump, "Write device memory to this path ('-' for stdout)");
  run_cmd->add_option("--dump-format", run.dump_format, "raw or hex")->check(CLI::IsMember({"raw", "hex"}));
  run_cmd->add_option("--dump-range", run.dump_range, "OFFSET:LENGTH (default: every byte up to the highest write)");
  run_cmd->add_option("--load", run.loads, "FILE@OFFSET: preload device memory (repeatable)");
  run_cmd->add_flag("--interleave", run.interleave, "Co-schedule workgroups up to the occupancy bound");
  run_cmd->add_flag("--check-races", run.check_races, "Report unordered conflicting accesses");
  run_cmd->add_option("--max-steps", run.max_steps, "Scheduler step limit");

  std::string validate_file, validate_machine;
  auto* validate_cmd = app.add_subcommand("validate", "Check a program against a machine");
  validate_cmd->add_option("file", validate_file, ".uva source")->required();
  validate_cmd->add_option("--machine", validate_machine, "Preset name or .mcfg file");

  std::string occ_machine, occ_sweep;
  std::optional<std::uint32_t> occ_regs, occ_wg;
  std::uint32_t occ_scratch = 0;
  auto* occ_cmd = app.add_subcommand("occupancy", "Resident waves per core for a register and scratch budget");
  occ_cmd->add_option("--machine", occ_machine, "Preset name or .mcfg file");
  occ_cmd->add_option("--regs", occ_regs, "Registers per thread");
  occ_cmd->add_option("--scratch", occ_scratch, "Scratch bytes per workgroup");
  occ_cmd->add_option("--wg", occ_wg, "Threads per workgroup (default: one wave)");
  occ_cmd->add_option("--sweep", occ_sweep, "regs=LO..HI: one row per register count");

  BenchOptions bench;
  auto* bench_cmd = app.add_subcommand("bench", "Run the benchmark kernels and check them against their oracles");
  bench_cmd->add_option("--machines", bench.machines, "Comma-separated presets or .mcfg files, or 'all'");
  bench_cmd->add_option("--kernels", bench.kernels, "Comma-separated gemm, reduction, histogram, or 'all'");
  bench_cmd->add_option("--seeds", bench.seeds, "Input seeds per row (1..N)");
  bench_cmd->add_option("--out", bench.format, "csv or json");
  bench_cmd->add_option("--output", bench.output, "Report path ('-' for stdout)");

  std::string lit_machine;
  std::uint64_t lit_seeds = 100;
  bool lit_fenced = false, lit_unfenced = false;
  auto* lit_cmd = app.add_subcommand("litmus", "Message-passing litmus test under the race detector");
  lit_cmd->add_option("--machine", lit_machine, "Preset name or .mcfg file");
  lit_cmd->add_option("--seeds", lit_seeds, "Number of scheduler seeds");
  auto* f1 = lit_cmd->add_flag("--fenced", lit_fenced, "Release/acquire fences around the flag (default)");
  auto* f2 = lit_cmd->add_flag("--unfenced", lit_unfenced, "No fences: expect a race");
  f1->excludes(f2);

  std::string fmt_file;
  bool fmt_in_place = false;
  auto* fmt_cmd = app.add_subcommand("fmt", "Print a program in canonical form");
  fmt_cmd->add_option("file", fmt_file, ".uva source")->required();
  fmt_cmd->add_flag("-i,--in-place", fmt_in_place, "Rewrite the file");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitFailure;
  }

  try {
    if (*run_cmd) return cmd_run(run, out, err);
    if (*validate_cmd) return cmd_validate(validate_file, validate_machine, out, err);
    if (*occ_cmd) return cmd_occupancy(occ_machine, occ_regs, occ_scratch, occ_wg, occ_sweep, out, err);
    if (*bench_cmd) return cmd_bench(bench, out, err);
    if (*lit_cmd) return cmd_litmus(lit_machine, lit_seeds, lit_unfenced, out, err);
    if (*fmt_cmd) return cmd_fmt(fmt_file, fmt_in_place, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const MachineError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const ValidationError& e) {
    err << e.what();
  }
  return kExitFailure;
}

}  // namespace uvgpu
