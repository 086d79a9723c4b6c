#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvgpu/isa.hpp"
#include "uvgpu/machcfg.hpp"

namespace uvgpu {

using LaneMask = std::uint64_t;

inline LaneMask lanes_below(std::uint32_t n) { return n >= 64 ? ~LaneMask{0} : (LaneMask{1} << n) - 1; }

// ---------------------------------------------------------------------------
// Device memory

/// Flat little-endian byte space, paged lazily so that an untouched 64 MiB
/// image costs almost nothing. Unwritten bytes read as zero.
class DeviceMemory {
 public:
  static constexpr std::uint64_t kDefaultBytes = 64ull << 20;
  static constexpr std::uint64_t kPageBytes = 64ull << 10;

  explicit DeviceMemory(std::uint64_t bytes = kDefaultBytes);

  std::uint64_t size() const { return size_; }
  bool in_bounds(std::uint64_t addr, std::uint64_t n) const { return addr <= size_ && n <= size_ - addr; }

  /// Aligned scalar access (bytes = 1, 2 or 4, addr % bytes == 0).
  std::uint32_t load(std::uint32_t addr, unsigned bytes) const;
  void store(std::uint32_t addr, std::uint32_t value, unsigned bytes);

  void write(std::uint64_t addr, std::span<const std::uint8_t> data);
  std::vector<std::uint8_t> read(std::uint64_t addr, std::uint64_t n) const;
  void write_words(std::uint64_t addr, std::span<const std::uint32_t> words);
  std::vector<std::uint32_t> read_words(std::uint64_t addr, std::uint64_t count) const;

  /// One past the highest byte ever written.
  std::uint64_t high_water() const { return high_water_; }

  /// FNV-1a over bytes [0, size) treating unallocated pages as zeros
  /// (allocated and untouched-zero pages hash identically).
  std::uint64_t digest() const;

  bool operator==(const DeviceMemory& other) const;

 private:
  std::uint8_t* page_for_write(std::uint64_t addr);

  std::uint64_t size_;
  std::uint64_t high_water_ = 0;
  std::vector<std::vector<std::uint8_t>> pages_;
};

// ---------------------------------------------------------------------------
// Launch description

struct Dim3 {
  std::uint32_t x = 1;
  std::uint32_t y = 1;
  std::uint32_t z = 1;

  std::uint64_t count() const { return std::uint64_t{x} * y * z; }
  bool operator==(const Dim3&) const = default;
};

enum class ControlKind { if_, else_, endif, loop, break_, endloop };

/// Observation of one executed structured-control marker.
struct ControlEvent {
  ControlKind kind;
  std::uint32_t workgroup;
  std::uint32_t wave;
  std::uint32_t function;
  std::uint32_t pc;
  LaneMask mask_before;
  LaneMask mask_after;
  LaneMask cond;  // lanes whose condition register was nonzero (if/break)
};

struct LaunchConfig {
  Dim3 grid;
  Dim3 workgroup{32, 1, 1};
  /// Argument space: scalar words and buffer base offsets, read with ld.arg.
  std::vector<std::uint32_t> args;
  MachineDescriptor machine;
  std::uint64_t seed = 0;
  bool interleave_workgroups = false;
  bool check_races = false;
  bool trace = false;
  /// Initial device image; the result carries the final one.
  DeviceMemory device;
  std::uint64_t max_steps = 200'000'000;
  std::uint32_t max_divergence_depth = 32;
  std::uint32_t max_call_depth = 64;
  std::function<void(const ControlEvent&)> control_observer;
};

// ---------------------------------------------------------------------------
// Per-wave state

enum class WaveStatus { ready, at_barrier, halted };

struct DivergenceEntry {
  enum class Kind { if_, else_, loop } kind = Kind::if_;
  LaneMask saved = 0;      // mask restored at the closing marker
  LaneMask else_mask = 0;  // if/else only
  std::uint32_t function = 0;
  std::uint32_t open_pc = 0;  // pc of the If or Loop marker
  std::uint32_t call_depth = 0;
};

struct CallFrame {
  std::uint32_t function = 0;
  std::uint32_t return_pc = 0;
};

struct WaveContext {
  std::uint32_t id = 0;  // wave index within the workgroup
  std::uint32_t function = 0;
  std::uint32_t pc = 0;
  LaneMask launch_mask = 0;
  LaneMask exited = 0;  // lanes that executed halt
  LaneMask active = 0;
  std::vector<DivergenceEntry> divergence_stack;
  std::vector<CallFrame> call_stack;
  std::uint32_t async_outstanding = 0;
  /// Register-major: value of register i in lane l is regs[i * W + l].
  std::vector<std::uint32_t> regs;
  WaveStatus status = WaveStatus::ready;
  std::uint32_t barrier_id = 0;

  LaneMask live() const { return launch_mask & ~exited; }
};

// ---------------------------------------------------------------------------
// Results

enum class TrapKind {
  divergent_barrier,
  barrier_id,
  scratch_out_of_bounds,
  device_out_of_bounds,
  arg_out_of_bounds,
  misaligned_access,
  call_stack_overflow,
  divergence_stack_overflow,
  control_stack_underflow,
  deadlock,
  divide_by_zero,
  divergent_mma,
  step_limit,
  occupancy,
  invalid_launch,
};

std::string_view to_string(TrapKind k);

struct Trap {
  TrapKind kind = TrapKind::invalid_launch;
  std::uint32_t workgroup = 0;
  std::uint32_t wave = 0;
  std::string function;
  std::uint32_t pc = 0;
  std::string message;

  /// "trap: barrier under divergence (wg 0, wave 1, main:7)"
  std::string describe() const;
};

/// Thrown by the primitive evaluators below; launch() converts it into a
/// positioned Trap.
class TrapError : public std::runtime_error {
 public:
  TrapError(TrapKind kind, std::string message) : std::runtime_error(std::move(message)), kind_(kind) {}
  TrapKind kind() const { return kind_; }

 private:
  TrapKind kind_;
};

/// launch() precondition failure: the program does not validate for the
/// configured machine.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(ValidationReport report)
      : std::runtime_error(report.to_string()), report_(std::move(report)) {}
  const ValidationReport& report() const { return report_; }

 private:
  ValidationReport report_;
};

enum class InstrClass : std::uint8_t {
  arith,
  convert,
  compare,
  memory,
  atomic,
  shuffle,
  barrier,
  fence,
  async,
  special,
  control,
  call,
  matrix,
  halt,
  count_
};

std::string_view to_string(InstrClass c);
InstrClass classify(const Instruction& inst);

struct ExecStats {
  std::array<std::uint64_t, static_cast<std::size_t>(InstrClass::count_)> dynamic_instructions{};
  std::uint64_t barrier_rounds = 0;
  std::uint64_t shuffle_steps = 0;
  std::uint64_t bank_conflict_extra_cycles = 0;
  std::uint64_t atomic_serializations = 0;
  std::uint64_t scratch_bytes = 0;
  std::uint64_t device_bytes = 0;
  std::uint64_t scheduler_steps = 0;
  std::uint64_t workgroups_completed = 0;
  std::uint64_t peak_resident_waves = 0;
  std::uint64_t trace_hash = 0xcbf29ce484222325ull;

  std::uint64_t total_instructions() const;
  std::uint64_t instructions(InstrClass c) const { return dynamic_instructions[static_cast<std::size_t>(c)]; }
  bool operator==(const ExecStats&) const = default;
};

/// Every counter as a JSON object (pretty-printed, stable key order).
std::string stats_to_json(const ExecStats& s);

struct TraceRecord {
  std::uint64_t step = 0;
  std::uint32_t workgroup = 0;
  std::uint32_t wave = 0;
  std::uint32_t pc = 0;  // flattened across functions in source order
  std::string mnemonic;
  LaneMask mask = 0;

  /// "step,wg,wave,pc,mnemonic,mask-hex"
  std::string to_string() const;
};

struct AccessSite {
  std::uint32_t workgroup = 0;
  std::uint32_t wave = 0;
  std::string function;
  std::uint32_t pc = 0;
  std::uint32_t lane = 0;
  bool write = false;
  bool atomic = false;
};

struct RaceReport {
  MemSpace space = MemSpace::device;
  std::uint32_t address = 0;  // byte address of the conflicting word
  AccessSite earlier;
  AccessSite later;
  Scope fix_scope = Scope::device;  // narrowest scope whose release/acquire pair would order them
  std::string note;

  std::string describe() const;
};

struct ExecResult {
  std::optional<Trap> trap;
  DeviceMemory device;
  ExecStats stats;
  std::vector<RaceReport> races;
  std::vector<TraceRecord> trace;

  bool completed() const { return !trap.has_value(); }
};

/// Runs the grid to completion or trap. Throws ValidationError when the
/// program is not valid for cfg.machine. Deterministic in (p, cfg).
ExecResult launch(const Program& p, const LaunchConfig& cfg);

// ---------------------------------------------------------------------------
// Primitive semantics, exposed for direct testing.

/// Value each lane receives. Source lanes are read whether or not they are
/// active; up/down clamp to the lane's own value when out of range.
std::vector<std::uint32_t> eval_shuffle(ShflMode mode, std::span<const std::uint32_t> lanes, std::uint32_t operand,
                                        LaneMask active);

/// Source lane for one destination lane.
std::uint32_t shuffle_source(ShflMode mode, std::uint32_t lane, std::uint32_t operand, std::uint32_t wave_width);

struct AtomicOutcome {
  std::uint32_t new_value;
  std::uint32_t old_value;
};

AtomicOutcome eval_atomic(AtomicOp op, ScalarType type, std::uint32_t cell, std::uint32_t operand,
                          std::uint32_t compare = 0);

/// Extra serialized cycles for one wave-wide scratch access:
/// sum over banks of max(0, distinct words in the bank - 1).
std::uint32_t count_bank_conflicts(std::span<const std::uint32_t> addresses, LaneMask active,
                                   std::uint32_t bank_count, std::uint32_t bank_width);

/// Structural information apply_control needs about every function.
struct ControlContext {
  std::span<const BlockTable> blocks;  // indexed by function
  std::uint32_t max_divergence_depth = 32;
};

/// Applies one structured control marker (If/Else/EndIf/Loop/Break/EndLoop)
/// to the wave, `cond` holding the lanes whose condition is nonzero. When
/// the active mask empties, pc moves to the innermost pending closing
/// marker. Throws TrapError on stack overflow/underflow.
void apply_control(WaveContext& wave, const Instruction& marker, LaneMask cond, const ControlContext& ctx);

/// After the active mask of a wave empties: redirect pc to the innermost
/// pending closing marker, or mark the wave halted when no lanes are live.
void settle_empty_mask(WaveContext& wave, const ControlContext& ctx);

struct BarrierOutcome {
  bool released = false;
};

/// Wave `wave` arrives at barrier `id`. Releases everyone once every
/// non-halted wave of the workgroup waits on the same id.
BarrierOutcome barrier_rendezvous(std::span<WaveContext> waves, std::size_t wave, std::uint32_t id,
                                  std::uint32_t named_barriers);

/// Re-checks the release condition, e.g. after a wave halted.
BarrierOutcome try_release_barrier(std::span<WaveContext> waves);

}  // namespace uvgpu
