#include "uvgpu/machcfg.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <fmt/format.h>

namespace uvgpu {

namespace {

constexpr std::uint32_t kKiB = 1024;

MachineDescriptor make_preset(std::string name, std::uint32_t wave, std::uint32_t regs,
                              std::uint32_t scratch, std::uint32_t regfile,
                              std::uint32_t barriers, bool fp64, bool bf16, bool matrix,
                              bool cluster) {
  MachineDescriptor d;
  d.name = std::move(name);
  d.wave_width = wave;
  d.max_regs = regs;
  d.scratchpad = scratch;
  d.regfile = regfile;
  d.reg_width = 4;
  d.max_workgroup = 1024;
  d.named_barriers = barriers;
  d.has_fp64 = fp64;
  d.has_bf16 = bf16;
  if (matrix) d.matrix_tiles.push_back({8, 8, 8});
  d.has_cluster = cluster;
  d.bank_count = wave;
  d.bank_width = 4;
  return d;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::optional<std::uint32_t> parse_u32(std::string_view s) {
  std::uint32_t v = 0;
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    s.remove_prefix(2);
    base = 16;
  }
  if (s.empty()) return std::nullopt;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(std::string_view s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  return std::nullopt;
}

std::optional<std::vector<MatrixTile>> parse_tiles(std::string_view s) {
  std::vector<MatrixTile> tiles;
  if (trim(s).empty() || trim(s) == "none") return tiles;
  while (!s.empty()) {
    const auto comma = s.find(',');
    const auto item = trim(s.substr(0, comma));
    s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
    const auto x1 = item.find('x');
    const auto x2 = x1 == std::string_view::npos ? x1 : item.find('x', x1 + 1);
    if (x2 == std::string_view::npos) return std::nullopt;
    auto m = parse_u32(item.substr(0, x1));
    auto n = parse_u32(item.substr(x1 + 1, x2 - x1 - 1));
    auto k = parse_u32(item.substr(x2 + 1));
    if (!m || !n || !k || *m == 0 || *n == 0 || *k == 0) return std::nullopt;
    tiles.push_back({*m, *n, *k});
  }
  return tiles;
}

}  // namespace

bool MachineDescriptor::supports_tile(const MatrixTile& t) const {
  return std::find(matrix_tiles.begin(), matrix_tiles.end(), t) != matrix_tiles.end();
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "nvidia", "amd-rdna", "amd-cdna", "intel-xehpg", "intel-xehpc", "apple"};
  return names;
}

MachineDescriptor preset(std::string_view name) {
  if (name == "nvidia")
    return make_preset("nvidia", 32, 255, 228 * kKiB, 256 * kKiB, 16, true, true, true, true);
  if (name == "amd-rdna")
    return make_preset("amd-rdna", 32, 256, 128 * kKiB, 256 * kKiB, 1, true, true, true, false);
  if (name == "amd-cdna")
    return make_preset("amd-cdna", 64, 256, 128 * kKiB, 512 * kKiB, 32, true, true, true, false);
  if (name == "intel-xehpg")
    return make_preset("intel-xehpg", 16, 128, 512 * kKiB, 512 * kKiB, 1, false, true, true, false);
  if (name == "intel-xehpc")
    return make_preset("intel-xehpc", 16, 256, 512 * kKiB, 512 * kKiB, 1, true, true, true, false);
  if (name == "apple")
    return make_preset("apple", 32, 128, 61440, 208 * kKiB, 1, false, false, false, false);

  std::string valid;
  for (const auto& n : preset_names()) {
    if (!valid.empty()) valid += ", ";
    valid += n;
  }
  throw MachineError(fmt::format("unknown machine preset '{}' (valid presets: {})", name, valid));
}

void check_descriptor(const MachineDescriptor& d) {
  if (d.wave_width < 8 || d.wave_width > 64 || !std::has_single_bit(d.wave_width))
    throw MachineError("wave width must be a power of two in [8,64]");
  if (d.reg_width != 4) throw MachineError("register width must be 4 bytes");
  if (d.max_regs < 1) throw MachineError("max_regs must be at least 1");
  if (d.max_workgroup < d.wave_width || d.max_workgroup > 1024)
    throw MachineError("max_workgroup must lie in [wave_width, 1024]");
  if (d.named_barriers < 1) throw MachineError("named_barriers must be at least 1");
  if (d.bank_count != d.wave_width) throw MachineError("bank_count must equal wave_width");
  if (d.bank_width != d.reg_width) throw MachineError("bank_width must equal reg_width");
  for (const auto& t : d.matrix_tiles)
    if (t.m == 0 || t.n == 0 || t.k == 0) throw MachineError("matrix tile dimensions must be nonzero");
}

MachineDescriptor load_descriptor(std::string_view source) {
  MachineDescriptor d;
  d.name = "custom";
  std::map<std::string, int, std::less<>> seen;
  bool bank_count_set = false;
  bool bank_width_set = false;

  int line_no = 0;
  std::istringstream in{std::string(source)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw MachineError(fmt::format("line {}: expected key=value", line_no));
    const std::string key{trim(line.substr(0, eq))};
    const auto value = trim(line.substr(eq + 1));
    if (seen.count(key))
      throw MachineError(fmt::format("line {}: duplicate key '{}' (first set on line {})", line_no, key,
                                     seen[key]));
    seen[key] = line_no;

    auto bad_value = [&](std::string_view what) {
      return MachineError(fmt::format("line {}: {} expected for '{}', got '{}'", line_no, what, key, value));
    };
    auto as_u32 = [&]() {
      auto v = parse_u32(value);
      if (!v) throw bad_value("unsigned integer");
      return *v;
    };
    auto as_bool = [&]() {
      auto v = parse_bool(value);
      if (!v) throw bad_value("boolean");
      return *v;
    };

    if (key == "name") {
      if (value.empty()) throw bad_value("identifier");
      d.name = std::string(value);
    } else if (key == "wave_width") {
      d.wave_width = as_u32();
    } else if (key == "max_regs") {
      d.max_regs = as_u32();
    } else if (key == "scratchpad") {
      d.scratchpad = as_u32();
    } else if (key == "regfile") {
      d.regfile = as_u32();
    } else if (key == "reg_width") {
      d.reg_width = as_u32();
    } else if (key == "max_workgroup") {
      d.max_workgroup = as_u32();
    } else if (key == "named_barriers") {
      d.named_barriers = as_u32();
    } else if (key == "has_fp64") {
      d.has_fp64 = as_bool();
    } else if (key == "has_bf16") {
      d.has_bf16 = as_bool();
    } else if (key == "matrix_tiles") {
      auto tiles = parse_tiles(value);
      if (!tiles) throw bad_value("tile list like 8x8x8,16x16x16");
      d.matrix_tiles = std::move(*tiles);
    } else if (key == "has_cluster") {
      d.has_cluster = as_bool();
    } else if (key == "bank_count") {
      d.bank_count = as_u32();
      bank_count_set = true;
    } else if (key == "bank_width") {
      d.bank_width = as_u32();
      bank_width_set = true;
    } else {
      throw MachineError(fmt::format("line {}: unknown key '{}'", line_no, key));
    }
  }

  for (const char* required : {"wave_width", "max_regs", "scratchpad", "regfile"})
    if (!seen.count(required)) throw MachineError(fmt::format("missing required key '{}'", required));

  if (!bank_count_set) d.bank_count = d.wave_width;
  if (!bank_width_set) d.bank_width = d.reg_width;
  check_descriptor(d);
  return d;
}

std::string serialize_descriptor(const MachineDescriptor& d) {
  std::string tiles;
  for (const auto& t : d.matrix_tiles) {
    if (!tiles.empty()) tiles += ",";
    tiles += fmt::format("{}x{}x{}", t.m, t.n, t.k);
  }
  auto b = [](bool v) { return v ? "true" : "false"; };
  return fmt::format(
      "name = {}\n"
      "wave_width = {}\n"
      "max_regs = {}\n"
      "scratchpad = {}\n"
      "regfile = {}\n"
      "reg_width = {}\n"
      "max_workgroup = {}\n"
      "named_barriers = {}\n"
      "has_fp64 = {}\n"
      "has_bf16 = {}\n"
      "matrix_tiles = {}\n"
      "has_cluster = {}\n"
      "bank_count = {}\n"
      "bank_width = {}\n",
      d.name, d.wave_width, d.max_regs, d.scratchpad, d.regfile, d.reg_width, d.max_workgroup,
      d.named_barriers, b(d.has_fp64), b(d.has_bf16), tiles.empty() ? "none" : tiles,
      b(d.has_cluster), d.bank_count, d.bank_width);
}

MachineDescriptor resolve_machine(const std::string& name_or_path) {
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end()) return preset(name_or_path);
  std::ifstream in(name_or_path);
  if (!in) {
    // Bare identifiers are almost certainly mistyped preset names.
    if (name_or_path.find_first_of("./") == std::string::npos) return preset(name_or_path);
    throw MachineError(fmt::format("cannot open machine file '{}'", name_or_path));
  }
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return load_descriptor(buf.str());
  } catch (const MachineError& e) {
    throw MachineError(fmt::format("{}: {}", name_or_path, e.what()));
  }
}

std::string_view to_string(LimitingResource r) {
  switch (r) {
    case LimitingResource::registers: return "registers";
    case LimitingResource::scratchpad: return "scratchpad";
    case LimitingResource::none: return "none";
  }
  return "none";
}

OccupancyResult occupancy(const MachineDescriptor& desc, std::uint32_t regs_used_per_thread,
                          std::uint32_t scratch_used_per_workgroup, std::uint32_t workgroup_size) {
  if (regs_used_per_thread < 1) throw MachineError("regs_used_per_thread must be at least 1");
  if (workgroup_size < 1) throw MachineError("workgroup_size must be at least 1");
  if (regs_used_per_thread > desc.max_regs)
    throw MachineError(fmt::format("kernel exceeds register budget ({} > R={})", regs_used_per_thread,
                                   desc.max_regs));

  OccupancyResult r;
  const std::uint64_t per_wave = std::uint64_t{regs_used_per_thread} * desc.wave_width * desc.reg_width;
  r.register_limit = static_cast<std::uint32_t>(desc.regfile / per_wave);
  r.resident_waves = r.register_limit;
  r.limiting = LimitingResource::registers;

  if (scratch_used_per_workgroup > 0) {
    const std::uint64_t waves_per_wg = (workgroup_size + desc.wave_width - 1) / desc.wave_width;
    const std::uint64_t groups = desc.scratchpad / scratch_used_per_workgroup;
    r.scratch_limit = static_cast<std::uint32_t>(std::min<std::uint64_t>(groups * waves_per_wg, UINT32_MAX));
    if (r.scratch_limit < r.register_limit) {
      r.resident_waves = r.scratch_limit;
      r.limiting = LimitingResource::scratchpad;
    } else if (r.scratch_limit == r.register_limit) {
      r.limiting = LimitingResource::none;
    }
  }
  return r;
}

}  // namespace uvgpu
