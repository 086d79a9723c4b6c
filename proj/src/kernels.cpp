#include "uvgpu/kernels.hpp"

#include <bit>
#include <cfloat>
#include <cmath>
#include <map>

#include <fmt/format.h>
#include <json.hpp>

#include "uvgpu/assembler.hpp"
#include "uvgpu/numeric.hpp"

namespace uvgpu {

std::string_view to_string(KernelName k) {
  switch (k) {
    case KernelName::gemm: return "gemm";
    case KernelName::reduction: return "reduction";
    case KernelName::histogram: return "histogram";
  }
  return "?";
}

std::string_view to_string(Variant v) { return v == Variant::abstract ? "abstract" : "native_style"; }

std::optional<KernelName> parse_kernel_name(std::string_view s) {
  for (auto k : {KernelName::gemm, KernelName::reduction, KernelName::histogram})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

KernelSpec default_spec(KernelName name, Variant variant) {
  KernelSpec s;
  s.name = name;
  s.variant = variant;
  s.n = name == KernelName::gemm ? 128 : 1u << 16;
  return s;
}

namespace {

bool pow2(std::uint32_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::string reduction_source(const KernelSpec& spec, const MachineDescriptor& m) {
  const std::uint32_t W = m.wave_width;
  const std::uint32_t wg = spec.workgroup_size;
  const bool native = spec.variant == Variant::native_style;
  if (!pow2(wg) || wg < 2) throw KernelError(fmt::format("reduction workgroup size {} is not a power of two >= 2", wg));
  if (native && wg < 2 * W)
    throw KernelError(fmt::format("shuffle-tail reduction needs a workgroup of at least 2W = {} threads", 2 * W));
  if (spec.element != ScalarType::I32 && spec.element != ScalarType::F32)
    throw KernelError("reduction element type must be i32 or f32");
  const auto t = to_string(spec.element);

  std::string s = fmt::format(
      "; Tree reduction, one partial sum per workgroup.\n"
      "; args: input, output, element count\n"
      ".scratch {}\n\n"
      ".kernel reduce\n"
      "  rdsr r0, tid_x\n"
      "  rdsr r1, wgid_x\n"
      "  rdsr r2, wgdim_x\n"
      "  mul.u32 r3, r1, r2\n"
      "  add.u32 r3, r3, r0\n"
      "  ld.arg.b32 r4, [0]\n"
      "  ld.arg.b32 r5, [4]\n"
      "  ld.arg.b32 r6, [8]\n"
      "  mov.u32 r7, 0\n"
      "  cmp.lt.u32 r8, r3, r6\n"
      "  if r8\n"
      "    shl.u32 r9, r3, 2\n"
      "    add.u32 r9, r9, r4\n"
      "    ld.device.b32 r7, [r9]\n"
      "  endif\n"
      "  shl.u32 r10, r0, 2\n"
      "  st.scratch.b32 [r10], r7\n"
      "  bar\n"
      "  shr.u32 r11, r2, 1\n",
      wg * 4);
  if (native)
    s += "  rdsr r12, wave_width\n"
         "  shl.u32 r12, r12, 1\n";
  else
    s += "  mov.u32 r12, 2\n";
  s += fmt::format(
      "  loop\n"
      "    cmp.lt.u32 r8, r11, r12\n"
      "    break r8\n"
      "    cmp.lt.u32 r8, r0, r11\n"
      "    if r8\n"
      "      add.u32 r9, r0, r11\n"
      "      shl.u32 r9, r9, 2\n"
      "      ld.scratch.b32 r13, [r9]\n"
      "      ld.scratch.b32 r14, [r10]\n"
      "      add.{0} r14, r14, r13\n"
      "      st.scratch.b32 [r10], r14\n"
      "    endif\n"
      "    bar\n"
      "    shr.u32 r11, r11, 1\n"
      "  endloop\n",
      t);
  if (native) {
    // r11 == W here: wave 0 folds the last 2W values in registers.
    s += fmt::format(
        "  cmp.lt.u32 r8, r0, r11\n"
        "  if r8\n"
        "    ld.scratch.b32 r14, [r10]\n"
        "    add.u32 r9, r0, r11\n"
        "    shl.u32 r9, r9, 2\n"
        "    ld.scratch.b32 r13, [r9]\n"
        "    add.{0} r14, r14, r13\n",
        t);
    for (std::uint32_t d = W / 2; d >= 1; d /= 2)
      s += fmt::format("    shfl.down.b32 r13, r14, {}\n    add.{} r14, r14, r13\n", d, t);
    s += "    cmp.eq.u32 r8, r0, 0\n"
         "    if r8\n"
         "      shl.u32 r9, r1, 2\n"
         "      add.u32 r9, r9, r5\n"
         "      st.device.b32 [r9], r14\n"
         "    endif\n"
         "  endif\n"
         "  halt\n";
  } else {
    s += fmt::format(
        "  cmp.eq.u32 r8, r0, 0\n"
        "  if r8\n"
        "    ld.scratch.b32 r14, [0]\n"
        "    ld.scratch.b32 r13, [4]\n"
        "    add.{} r14, r14, r13\n"
        "    shl.u32 r9, r1, 2\n"
        "    add.u32 r9, r9, r5\n"
        "    st.device.b32 [r9], r14\n"
        "  endif\n"
        "  halt\n",
        t);
  }
  return s;
}

std::string gemm_source(const KernelSpec& spec, const MachineDescriptor& m) {
  const std::uint32_t T = spec.tile;
  if (T == 0 || spec.n == 0 || spec.n % T != 0)
    throw KernelError(fmt::format("gemm tile {} must divide N = {}", T, spec.n));
  if (std::uint64_t{T} * T > m.max_workgroup)
    throw KernelError(fmt::format("gemm tile {}x{} exceeds the workgroup limit {}", T, T, m.max_workgroup));
  const std::uint32_t stride = spec.variant == Variant::native_style ? T + 1 : T;
  const std::uint32_t tile_bytes = T * stride * 4;
  return fmt::format(
      "; C = A * B, {0}x{0} tiles staged in scratch (row stride {1} words).\n"
      "; args: A, B, C, N. Thread (x, y) of workgroup (i, j) computes C[{0}i + x][{0}j + y].\n"
      ".scratch {2}\n\n"
      ".kernel gemm\n"
      "  rdsr r0, tid_x\n"
      "  rdsr r1, tid_y\n"
      "  rdsr r2, wgid_x\n"
      "  rdsr r3, wgid_y\n"
      "  ld.arg.b32 r4, [0]\n"
      "  ld.arg.b32 r5, [4]\n"
      "  ld.arg.b32 r6, [8]\n"
      "  ld.arg.b32 r7, [12]\n"
      "  mul.u32 r2, r2, {0}\n"
      "  mul.u32 r3, r3, {0}\n"
      "  mov.u32 r8, 0\n"
      "  mov.u32 r9, 0\n"
      "  ; tile slot written by this thread\n"
      "  mul.u32 r10, r1, {1}\n"
      "  add.u32 r10, r10, r0\n"
      "  shl.u32 r10, r10, 2\n"
      "  ; &A[row0 + y][x]\n"
      "  add.u32 r11, r2, r1\n"
      "  mul.u32 r11, r11, r7\n"
      "  add.u32 r11, r11, r0\n"
      "  shl.u32 r11, r11, 2\n"
      "  add.u32 r11, r11, r4\n"
      "  ; &B[y][col0 + x]\n"
      "  mul.u32 r12, r1, r7\n"
      "  add.u32 r12, r12, r3\n"
      "  add.u32 r12, r12, r0\n"
      "  shl.u32 r12, r12, 2\n"
      "  add.u32 r12, r12, r5\n"
      "  mul.u32 r13, r7, {4}\n"
      "  ; row x of the A tile, column y of the B tile\n"
      "  mul.u32 r14, r0, {5}\n"
      "  shl.u32 r15, r1, 2\n"
      "  add.u32 r15, r15, {3}\n"
      "  loop\n"
      "    cmp.ge.u32 r16, r9, r7\n"
      "    break r16\n"
      "    ld.device.b32 r17, [r11]\n"
      "    st.scratch.b32 [r10], r17\n"
      "    ld.device.b32 r17, [r12]\n"
      "    st.scratch.b32 [r10+{3}], r17\n"
      "    bar\n"
      "    mov.u32 r18, r14\n"
      "    mov.u32 r19, r15\n"
      "    mov.u32 r20, 0\n"
      "    loop\n"
      "      cmp.ge.u32 r16, r20, {0}\n"
      "      break r16\n"
      "      ld.scratch.b32 r21, [r18]\n"
      "      ld.scratch.b32 r22, [r19]\n"
      "      fma.f32 r8, r21, r22, r8\n"
      "      add.u32 r18, r18, 4\n"
      "      add.u32 r19, r19, {5}\n"
      "      add.u32 r20, r20, 1\n"
      "    endloop\n"
      "    bar\n"
      "    add.u32 r9, r9, {0}\n"
      "    add.u32 r11, r11, {6}\n"
      "    add.u32 r12, r12, r13\n"
      "  endloop\n"
      "  add.u32 r16, r2, r0\n"
      "  mul.u32 r16, r16, r7\n"
      "  add.u32 r16, r16, r3\n"
      "  add.u32 r16, r16, r1\n"
      "  shl.u32 r16, r16, 2\n"
      "  add.u32 r16, r16, r6\n"
      "  st.device.b32 [r16], r8\n"
      "  halt\n",
      T, stride, 2 * tile_bytes, tile_bytes, T * 4, stride * 4, T * 4);
}

std::string histogram_source(const KernelSpec& spec, const MachineDescriptor& m) {
  const std::uint32_t wg = spec.workgroup_size;
  if (wg == 0 || wg > m.max_workgroup)
    throw KernelError(fmt::format("histogram workgroup size {} outside [1, {}]", wg, m.max_workgroup));
  const bool native = spec.variant == Variant::native_style;
  const std::uint32_t waves = (wg + m.wave_width - 1) / m.wave_width;
  const std::uint32_t scratch = native ? waves * 256 * 4 : 256 * 4;

  std::string s = fmt::format(
      "; 256-bin byte histogram: count in scratch, then merge into device bins.\n"
      "; args: input bytes, output bins, element count\n"
      ".scratch {}\n\n"
      ".kernel histogram\n"
      "  rdsr r0, tid_x\n"
      "  rdsr r1, wgid_x\n"
      "  rdsr r2, wgdim_x\n"
      "  rdsr r3, griddim_x\n"
      "  ld.arg.b32 r4, [0]\n"
      "  ld.arg.b32 r5, [4]\n"
      "  ld.arg.b32 r6, [8]\n"
      "  mul.u32 r7, r1, r2\n"
      "  add.u32 r7, r7, r0\n"
      "  mul.u32 r8, r2, r3\n"
      "  mov.u32 r15, 0\n",
      scratch);
  if (native)
    s += "  ; one private copy per wave\n"
         "  rdsr r9, wave_id\n"
         "  shl.u32 r9, r9, 10\n"
         "  rdsr r10, wave_width\n"
         "  add.u32 r11, r2, r10\n"
         "  sub.u32 r11, r11, 1\n"
         "  div.u32 r11, r11, r10\n"
         "  shl.u32 r11, r11, 8\n";
  else
    s += "  mov.u32 r9, 0\n"
         "  mov.u32 r11, 256\n";
  s += "  mov.u32 r12, r0\n"
       "  loop\n"
       "    cmp.ge.u32 r13, r12, r11\n"
       "    break r13\n"
       "    shl.u32 r14, r12, 2\n"
       "    st.scratch.b32 [r14], r15\n"
       "    add.u32 r12, r12, r2\n"
       "  endloop\n"
       "  bar\n"
       "  mov.u32 r12, r7\n"
       "  loop\n"
       "    cmp.ge.u32 r13, r12, r6\n"
       "    break r13\n"
       "    add.u32 r14, r4, r12\n"
       "    ld.device.b8 r16, [r14]\n"
       "    shl.u32 r16, r16, 2\n"
       "    add.u32 r16, r16, r9\n"
       "    atom.scratch.add.u32 r17, [r16], 1\n"
       "    add.u32 r12, r12, r8\n"
       "  endloop\n"
       "  bar\n"
       "  mov.u32 r12, r0\n";
  if (native)
    s += "  shr.u32 r18, r11, 8\n"
         "  loop\n"
         "    cmp.ge.u32 r13, r12, 256\n"
         "    break r13\n"
         "    mov.u32 r17, 0\n"
         "    shl.u32 r14, r12, 2\n"
         "    mov.u32 r19, 0\n"
         "    loop\n"
         "      cmp.ge.u32 r13, r19, r18\n"
         "      break r13\n"
         "      ld.scratch.b32 r16, [r14]\n"
         "      add.u32 r17, r17, r16\n"
         "      add.u32 r14, r14, 1024\n"
         "      add.u32 r19, r19, 1\n"
         "    endloop\n"
         "    shl.u32 r14, r12, 2\n"
         "    add.u32 r14, r14, r5\n"
         "    atom.device.add.u32 r16, [r14], r17\n"
         "    add.u32 r12, r12, r2\n"
         "  endloop\n"
         "  halt\n";
  else
    s += "  loop\n"
         "    cmp.ge.u32 r13, r12, 256\n"
         "    break r13\n"
         "    shl.u32 r14, r12, 2\n"
         "    ld.scratch.b32 r17, [r14]\n"
         "    add.u32 r14, r14, r5\n"
         "    atom.device.add.u32 r16, [r14], r17\n"
         "    add.u32 r12, r12, r2\n"
         "  endloop\n"
         "  halt\n";
  return s;
}

std::uint32_t align_up(std::uint32_t v, std::uint32_t a) { return (v + a - 1) / a * a; }

void accumulate(ExecStats& into, const ExecStats& s) {
  for (std::size_t i = 0; i < into.dynamic_instructions.size(); ++i)
    into.dynamic_instructions[i] += s.dynamic_instructions[i];
  into.barrier_rounds += s.barrier_rounds;
  into.shuffle_steps += s.shuffle_steps;
  into.bank_conflict_extra_cycles += s.bank_conflict_extra_cycles;
  into.atomic_serializations += s.atomic_serializations;
  into.scratch_bytes += s.scratch_bytes;
  into.device_bytes += s.device_bytes;
  into.scheduler_steps += s.scheduler_steps;
  into.workgroups_completed += s.workgroups_completed;
  into.peak_resident_waves = std::max(into.peak_resident_waves, s.peak_resident_waves);
  Fnv1a h;
  h.add(&into.trace_hash, sizeof into.trace_hash);
  h.add(&s.trace_hash, sizeof s.trace_hash);
  into.trace_hash = h.value();
}

std::uint64_t words_digest(const std::vector<std::uint32_t>& w) {
  Fnv1a h;
  for (auto v : w) h.add_u32(v);
  return h.value();
}

}  // namespace

std::string kernel_source(const KernelSpec& spec, const MachineDescriptor& m) {
  switch (spec.name) {
    case KernelName::gemm: return gemm_source(spec, m);
    case KernelName::reduction: return reduction_source(spec, m);
    case KernelName::histogram: return histogram_source(spec, m);
  }
  throw KernelError("unknown kernel");
}

Program build_kernel(const KernelSpec& spec, const MachineDescriptor& m) {
  const std::string src = kernel_source(spec, m);
  auto parsed = parse_program(src);
  if (!parsed.ok()) {
    std::string msg = fmt::format("{} kernel does not assemble:", to_string(spec.name));
    for (const auto& d : parsed.diagnostics) msg += "\n  " + to_string(d);
    throw KernelError(msg);
  }
  Program p = std::move(*parsed.program);
  const auto report = validate_program(p, m);
  if (!report.ok())
    throw KernelError(fmt::format("{} kernel does not fit machine {}:\n{}", to_string(spec.name), m.name,
                                  report.to_string()));
  return p;
}

KernelInputs gen_inputs(const KernelSpec& spec, std::uint64_t seed) {
  SplitMix64 rng(seed);
  KernelInputs in;
  auto unit = [&rng]() { return static_cast<float>(rng.next() >> 40) * 0x1p-24f; };
  switch (spec.name) {
    case KernelName::gemm: {
      const std::size_t count = std::size_t{spec.n} * spec.n;
      in.a.resize(count);
      in.b.resize(count);
      for (auto& v : in.a) v = bits(unit() * 2.0f - 1.0f);
      for (auto& v : in.b) v = bits(unit() * 2.0f - 1.0f);
      break;
    }
    case KernelName::reduction:
      in.a.resize(spec.n);
      for (auto& v : in.a) v = spec.element == ScalarType::F32 ? bits(unit()) : static_cast<std::uint32_t>(rng.below(1u << 15));
      break;
    case KernelName::histogram:
      in.bytes.resize(spec.n);
      for (auto& v : in.bytes) v = static_cast<std::uint8_t>(rng.next() & 0xffu);
      break;
  }
  return in;
}

std::vector<std::uint32_t> oracle(const KernelSpec& spec, const KernelInputs& in) {
  switch (spec.name) {
    case KernelName::gemm: {
      const std::uint32_t n = spec.n;
      std::vector<std::uint32_t> c(std::size_t{n} * n);
      for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = 0; j < n; ++j) {
          float acc = 0.0f;
          for (std::uint32_t k = 0; k < n; ++k) acc = std::fmaf(f32(in.a[i * n + k]), f32(in.b[k * n + j]), acc);
          c[std::size_t{i} * n + j] = bits(acc);
        }
      return c;
    }
    case KernelName::reduction: {
      if (spec.element == ScalarType::F32) {
        double sum = 0;
        for (auto v : in.a) sum += f32(v);
        return {bits(static_cast<float>(sum))};
      }
      std::int64_t sum = 0;
      for (auto v : in.a) sum += static_cast<std::int32_t>(v);
      return {static_cast<std::uint32_t>(sum)};
    }
    case KernelName::histogram: {
      std::vector<std::uint32_t> bins(256, 0);
      for (auto b : in.bytes) ++bins[b];
      return bins;
    }
  }
  return {};
}

KernelRun run_kernel(const KernelSpec& spec, const Program& p, const MachineDescriptor& m, const KernelInputs& in,
                     const RunOptions& opt) {
  KernelRun run;
  auto launch_once = [&](LaunchConfig& cfg) {
    cfg.machine = m;
    cfg.seed = opt.seed + run.launches;
    cfg.interleave_workgroups = opt.interleave_workgroups;
    cfg.check_races = opt.check_races;
    ExecResult r = launch(p, cfg);
    accumulate(run.stats, r.stats);
    run.workgroups += cfg.grid.count();
    ++run.launches;
    for (auto& race : r.races) run.races.push_back(std::move(race));
    run.trap = std::move(r.trap);
    return std::move(r.device);
  };
  auto memory_for = [](std::uint64_t bytes) {
    return DeviceMemory(std::max<std::uint64_t>(DeviceMemory::kPageBytes,
                                                (bytes + DeviceMemory::kPageBytes - 1) / DeviceMemory::kPageBytes *
                                                    DeviceMemory::kPageBytes));
  };

  switch (spec.name) {
    case KernelName::gemm: {
      const std::uint32_t n = spec.n;
      const std::uint32_t bytes = n * n * 4;
      const std::uint32_t a = 0, b = align_up(bytes, 256), c = b + align_up(bytes, 256);
      LaunchConfig cfg;
      cfg.device = memory_for(c + bytes);
      cfg.device.write_words(a, in.a);
      cfg.device.write_words(b, in.b);
      cfg.args = {a, b, c, n};
      cfg.workgroup = {spec.tile, spec.tile, 1};
      cfg.grid = {n / spec.tile, n / spec.tile, 1};
      DeviceMemory out = launch_once(cfg);
      run.output = out.read_words(c, std::size_t{n} * n);
      run.device_digest = out.digest();
      break;
    }
    case KernelName::reduction: {
      const std::uint32_t wg = spec.workgroup_size;
      std::uint32_t total = align_up(spec.n * 4, 256);
      for (std::uint32_t count = spec.n; count > 1;) {
        count = (count + wg - 1) / wg;
        total += align_up(count * 4, 256);
      }
      DeviceMemory mem = memory_for(total + 256);
      mem.write_words(0, in.a);
      std::uint32_t src = 0, count = spec.n, dst = align_up(spec.n * 4, 256);
      do {
        const std::uint32_t groups = (count + wg - 1) / wg;
        LaunchConfig cfg;
        cfg.device = std::move(mem);
        cfg.args = {src, dst, count};
        cfg.workgroup = {wg, 1, 1};
        cfg.grid = {groups, 1, 1};
        mem = launch_once(cfg);
        if (run.trap) break;
        src = dst;
        dst += align_up(groups * 4, 256);
        count = groups;
      } while (count > 1);
      run.output = mem.read_words(src, 1);
      run.device_digest = mem.digest();
      break;
    }
    case KernelName::histogram: {
      const std::uint32_t wg = spec.workgroup_size;
      const std::uint32_t out = align_up(spec.n, 256);
      LaunchConfig cfg;
      cfg.device = memory_for(out + 1024);
      cfg.device.write(0, in.bytes);
      cfg.args = {0, out, spec.n};
      cfg.workgroup = {wg, 1, 1};
      const std::uint32_t per_group = wg * std::max(1u, spec.items_per_thread);
      cfg.grid = {std::max(1u, (spec.n + per_group - 1) / per_group), 1, 1};
      DeviceMemory mem = launch_once(cfg);
      run.output = mem.read_words(out, 256);
      run.device_digest = mem.digest();
      break;
    }
  }
  return run;
}

double max_relative_error(const std::vector<std::uint32_t>& got, const std::vector<std::uint32_t>& expected) {
  if (got.size() != expected.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double g = f32(got[i]);
    const double e = f32(expected[i]);
    if (got[i] == expected[i]) continue;
    if (std::isnan(g) || std::isnan(e)) return INFINITY;
    const double denom = std::max(std::fabs(e), static_cast<double>(FLT_MIN));
    worst = std::max(worst, std::fabs(g - e) / denom);
  }
  return worst;
}

BenchReport run_benchmark(const KernelSpec& spec, const MachineDescriptor& m, std::uint64_t seed) {
  BenchReport r;
  r.kernel = std::string(to_string(spec.name));
  r.variant = std::string(to_string(spec.variant));
  r.preset = m.name;
  r.wave_width = m.wave_width;
  r.seed = seed;
  try {
    const Program p = build_kernel(spec, m);
    const KernelInputs in = gen_inputs(spec, seed);
    const KernelRun run = run_kernel(spec, p, m, in, {seed, false, false});
    r.stats = run.stats;
    r.workgroups = run.workgroups;
    if (run.workgroups > 0) {
      r.barriers = static_cast<double>(run.stats.barrier_rounds) / static_cast<double>(run.workgroups);
      r.shuffles = static_cast<double>(run.stats.shuffle_steps) / static_cast<double>(run.workgroups);
    }
    r.bank_conflicts = run.stats.bank_conflict_extra_cycles;
    r.atomics = run.stats.atomic_serializations;
    r.instructions = run.stats.total_instructions();
    r.output_digest = words_digest(run.output);
    if (run.trap) {
      r.error = run.trap->describe();
      return r;
    }
    const auto expected = oracle(spec, in);
    const bool fp = spec.name == KernelName::gemm || spec.element == ScalarType::F32;
    if (fp) {
      r.max_rel_err = max_relative_error(run.output, expected);
      r.pass = r.max_rel_err <= 1e-4;
    } else {
      r.pass = run.output == expected;
      if (!r.pass) r.max_rel_err = 1;
    }
    if (spec.name == KernelName::histogram) {
      std::uint64_t total = 0;
      for (auto v : run.output) total += v;
      if (total != spec.n) r.pass = false;
    }
    if (!r.pass) r.error = "output does not match the oracle";
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

std::string bench_csv_row(const BenchReport& r) {
  return fmt::format("{},{},{},{},{:.3g},{},{},{},{},{}", r.kernel, r.variant, r.preset, r.pass ? "pass" : "FAIL",
                     r.max_rel_err, r.barriers, r.shuffles, r.bank_conflicts, r.atomics, r.instructions);
}

std::string bench_json(const std::vector<BenchReport>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["kernel"] = r.kernel;
    j["variant"] = r.variant;
    j["preset"] = r.preset;
    j["wave_width"] = r.wave_width;
    j["seed"] = r.seed;
    j["pass"] = r.pass;
    j["max_rel_err"] = r.max_rel_err;
    j["barriers_per_workgroup"] = r.barriers;
    j["shuffles_per_workgroup"] = r.shuffles;
    j["bank_conflicts"] = r.bank_conflicts;
    j["atomic_serializations"] = r.atomics;
    j["instructions"] = r.instructions;
    j["workgroups"] = r.workgroups;
    j["output_digest"] = fmt::format("{:016x}", r.output_digest);
    if (!r.error.empty()) j["error"] = r.error;
    j["stats"] = nlohmann::ordered_json::parse(stats_to_json(r.stats));
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<IdentityCheck> identity_checks(const std::vector<BenchReport>& rows) {
  // (kernel, preset) -> rows of each variant, in input order.
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<const BenchReport*>, std::vector<const BenchReport*>>>
      groups;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.kernel, r.preset);
    if (!groups.count(key)) order.push_back(key);
    auto& g = groups[key];
    (r.variant == "abstract" ? g.first : g.second).push_back(&r);
  }
  std::vector<IdentityCheck> out;
  for (const auto& key : order) {
    const auto& [abs_rows, nat_rows] = groups[key];
    if (abs_rows.empty() || nat_rows.empty()) continue;
    const auto& [kernel, preset] = key;
    const std::size_t pairs = std::min(abs_rows.size(), nat_rows.size());
    const std::uint32_t W = abs_rows[0]->wave_width;
    const int log2w = std::countr_zero(W);
    bool ok = true;
    if (kernel == "reduction") {
      for (std::size_t i = 0; i < pairs; ++i)
        ok = ok && abs_rows[i]->barriers - nat_rows[i]->barriers == log2w && nat_rows[i]->shuffles == log2w;
      out.push_back({fmt::format("reduction {} W={}: barriers {} - {} = {} per workgroup, shuffle tail {}, log2(W) = {}",
                                 preset, W, abs_rows[0]->barriers, nat_rows[0]->barriers,
                                 abs_rows[0]->barriers - nat_rows[0]->barriers, nat_rows[0]->shuffles, log2w),
                     ok});
    } else if (kernel == "histogram") {
      for (std::size_t i = 0; i < pairs; ++i)
        ok = ok && abs_rows[i]->output_digest == nat_rows[i]->output_digest && abs_rows[i]->pass && nat_rows[i]->pass;
      out.push_back({fmt::format("histogram {} W={}: shared and privatized bins identical", preset, W), ok});
    } else if (kernel == "gemm") {
      for (std::size_t i = 0; i < pairs; ++i) ok = ok && nat_rows[i]->bank_conflicts < abs_rows[i]->bank_conflicts;
      out.push_back({fmt::format("gemm {} W={}: bank conflicts padded {} < flat {}", preset, W,
                                 nat_rows[0]->bank_conflicts, abs_rows[0]->bank_conflicts),
                     ok});
    }
  }
  return out;
}

}  // namespace uvgpu
