#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "uvgpu/isa.hpp"
#include "uvgpu/machcfg.hpp"
#include "uvgpu/vm.hpp"

namespace uvgpu {

enum class KernelName { gemm, reduction, histogram };
enum class Variant { abstract, native_style };

std::string_view to_string(KernelName k);
std::string_view to_string(Variant v);
std::optional<KernelName> parse_kernel_name(std::string_view s);

struct KernelSpec {
  KernelName name = KernelName::reduction;
  Variant variant = Variant::abstract;
  std::uint32_t n = 0;                  // gemm: matrix side; others: element count
  std::uint32_t tile = 32;              // gemm only
  std::uint32_t workgroup_size = 256;   // reduction and histogram
  ScalarType element = ScalarType::I32; // reduction: I32 or F32
  std::uint32_t items_per_thread = 16;  // histogram
};

/// Desk-scale defaults: gemm N=128 (tile 32), reduction N=2^16 (wg 256),
/// histogram N=2^16 (wg 256).
KernelSpec default_spec(KernelName name, Variant variant);

class KernelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Assembly text of the kernel for machine m.
std::string kernel_source(const KernelSpec& spec, const MachineDescriptor& m);

/// Parsed and validated kernel. Throws KernelError when the kernel shape does not
/// fit the machine.
Program build_kernel(const KernelSpec& spec, const MachineDescriptor& m);

struct KernelInputs {
  std::vector<std::uint32_t> a;      // gemm A (f32 bits), reduction input
  std::vector<std::uint32_t> b;      // gemm B (f32 bits)
  std::vector<std::uint8_t> bytes;   // histogram input
};

KernelInputs gen_inputs(const KernelSpec& spec, std::uint64_t seed);

/// Brute-force host reference. gemm: N*N f32 bits (k-ascending fma chain);
/// reduction: one word (exact I32 sum, or the f32 rounding of the exact
/// double sum); histogram: 256 bin counts.
std::vector<std::uint32_t> oracle(const KernelSpec& spec, const KernelInputs& in);

struct RunOptions {
  std::uint64_t seed = 0;
  bool interleave_workgroups = false;
  bool check_races = false;
};

struct KernelRun {
  std::vector<std::uint32_t> output;
  ExecStats stats;  // summed over every launch of the kernel
  std::uint64_t workgroups = 0;
  std::uint64_t launches = 0;
  std::uint64_t device_digest = 0;
  std::optional<Trap> trap;
  std::vector<RaceReport> races;
};

/// Lays out buffers, launches (several passes for reduction) and reads back
/// the output.
KernelRun run_kernel(const KernelSpec& spec, const Program& p, const MachineDescriptor& m, const KernelInputs& in,
                     const RunOptions& opt = {});

struct BenchReport {
  std::string kernel;
  std::string variant;
  std::string preset;
  std::uint32_t wave_width = 0;
  std::uint64_t seed = 0;
  bool pass = false;
  double max_rel_err = 0;
  double barriers = 0;   // barrier rounds per workgroup
  double shuffles = 0;   // shuffle steps per workgroup
  std::uint64_t bank_conflicts = 0;
  std::uint64_t atomics = 0;  // atomic serializations
  std::uint64_t instructions = 0;
  std::uint64_t workgroups = 0;
  std::uint64_t output_digest = 0;
  std::string error;
  ExecStats stats;
};

BenchReport run_benchmark(const KernelSpec& spec, const MachineDescriptor& m, std::uint64_t seed);

/// Max relative error of got against expected, both f32 bit patterns.
double max_relative_error(const std::vector<std::uint32_t>& got, const std::vector<std::uint32_t>& expected);

inline constexpr std::string_view kBenchCsvHeader =
    "kernel,variant,preset,pass,max_rel_err,barriers,shuffles,bank_conflicts,atomics,instructions";

std::string bench_csv_row(const BenchReport& r);
std::string bench_json(const std::vector<BenchReport>& rows);

struct IdentityCheck {
  std::string text;
  bool ok = false;
};

/// Counter identities over a set of rows: reduction barrier delta equals
/// log2(W), native shuffle tail equals log2(W), histograms agree across
/// variants, padded gemm has fewer bank conflicts than the flat one.
std::vector<IdentityCheck> identity_checks(const std::vector<BenchReport>& rows);

}  // namespace uvgpu
