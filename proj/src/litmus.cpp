#include "uvgpu/litmus.hpp"

#include <fmt/format.h>

#include "uvgpu/assembler.hpp"

namespace uvgpu {

std::string message_passing_source(bool fenced) {
  return fmt::format(
      "; Message passing. args: data, flag, result\n"
      ".kernel mp\n"
      "  rdsr r0, wgid_x\n"
      "  ld.arg.b32 r1, [0]\n"
      "  ld.arg.b32 r2, [4]\n"
      "  ld.arg.b32 r3, [8]\n"
      "  cmp.eq.u32 r4, r0, 0\n"
      "  if r4\n"
      "    mov.u32 r5, {}\n"
      "    st.device.b32 [r1], r5\n"
      "{}"
      "    mov.u32 r5, 1\n"
      "    atom.device.exch.u32 r6, [r2], r5\n"
      "  else\n"
      "    loop\n"
      "      atom.device.or.u32 r6, [r2], 0\n"
      "      cmp.ne.u32 r7, r6, 0\n"
      "      break r7\n"
      "    endloop\n"
      "{}"
      "    ld.device.b32 r8, [r1]\n"
      "    st.device.b32 [r3], r8\n"
      "  endif\n"
      "  halt\n",
      kLitmusData, fenced ? "    fence.release.device\n" : "", fenced ? "    fence.acquire.device\n" : "");
}

LitmusOutcome run_message_passing(const MachineDescriptor& m, std::uint64_t seed, bool fenced) {
  static const Program fenced_program = *parse_program(message_passing_source(true)).program;
  static const Program plain_program = *parse_program(message_passing_source(false)).program;
  LaunchConfig cfg;
  cfg.machine = m;
  cfg.seed = seed;
  cfg.grid = {2, 1, 1};
  cfg.workgroup = {1, 1, 1};
  cfg.args = {0, 64, 128};
  cfg.interleave_workgroups = true;
  cfg.check_races = true;
  cfg.device = DeviceMemory(DeviceMemory::kPageBytes);
  ExecResult r = launch(fenced ? fenced_program : plain_program, cfg);
  LitmusOutcome out;
  out.races = std::move(r.races);
  out.trap = std::move(r.trap);
  out.observed = r.device.load(128, 4);
  return out;
}

}  // namespace uvgpu
