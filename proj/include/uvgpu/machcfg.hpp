#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uvgpu {

/// Shape of one opaque matrix-multiply-accumulate tile (D = A*B + C with
/// A: MxK, B: KxN, C/D: MxN).
struct MatrixTile {
  std::uint32_t m = 0;
  std::uint32_t n = 0;
  std::uint32_t k = 0;

  bool operator==(const MatrixTile&) const = default;
};

/// The queryable dialect parameters of one target machine.
///
/// Field names double as the keys of the `.mcfg` key=value format.
struct MachineDescriptor {
  std::string name;
  std::uint32_t wave_width = 32;      // W: threads per lockstep group
  std::uint32_t max_regs = 255;       // R: 32-bit registers per thread
  std::uint32_t scratchpad = 0;       // S: scratchpad bytes per core
  std::uint32_t regfile = 0;          // F: register file bytes per core
  std::uint32_t reg_width = 4;        // w: register width in bytes
  std::uint32_t max_workgroup = 1024;
  std::uint32_t named_barriers = 1;
  bool has_fp64 = false;
  bool has_bf16 = false;
  std::vector<MatrixTile> matrix_tiles;
  bool has_cluster = false;
  std::uint32_t bank_count = 32;
  std::uint32_t bank_width = 4;

  bool supports_tile(const MatrixTile& t) const;
  bool has_matrix() const { return !matrix_tiles.empty(); }

  bool operator==(const MachineDescriptor&) const = default;
};

/// Raised for unknown presets, malformed machine files and invariant
/// violations. The message names the offending rule or line.
class MachineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string>& preset_names();

MachineDescriptor preset(std::string_view name);

/// Throws MachineError naming the first violated invariant.
void check_descriptor(const MachineDescriptor& desc);

MachineDescriptor load_descriptor(std::string_view source);

/// Inverse of load_descriptor; every field is written explicitly.
std::string serialize_descriptor(const MachineDescriptor& desc);

/// A preset name or a path to a `.mcfg` file.
MachineDescriptor resolve_machine(const std::string& name_or_path);

enum class LimitingResource { registers, scratchpad, none };

std::string_view to_string(LimitingResource r);

struct OccupancyResult {
  std::uint32_t resident_waves = 0;  // O
  LimitingResource limiting = LimitingResource::registers;
  std::uint32_t register_limit = 0;
  /// Only meaningful when scratch usage is nonzero.
  std::uint32_t scratch_limit = 0;
};

/// Resident waves per core.
///
/// The register bound is floor(F / (regs * W * w)). When the workgroup uses
/// scratchpad, a second bound floor(S / scratch) * waves_per_workgroup is
/// applied and the smaller of the two wins. Equal bounds report `none`
/// (neither resource alone is binding).
OccupancyResult occupancy(const MachineDescriptor& desc,
                          std::uint32_t regs_used_per_thread,
                          std::uint32_t scratch_used_per_workgroup,
                          std::uint32_t workgroup_size);

}  // namespace uvgpu
