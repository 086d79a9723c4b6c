#include <doctest.h>

#include <bit>
#include <cmath>
#include <limits>

#include "support/gen.hpp"
#include "uvgpu/assembler.hpp"
#include "uvgpu/numeric.hpp"
#include "uvgpu/vm.hpp"

using namespace uvgpu;

namespace {

Program parse(std::string_view src) {
  auto r = parse_program(src);
  REQUIRE_MESSAGE(r.ok(), (r.diagnostics.empty() ? std::string() : to_string(r.diagnostics[0])));
  return *r.program;
}

LaunchConfig config(const MachineDescriptor& m, std::uint32_t wg, std::uint32_t grid = 1) {
  LaunchConfig c;
  c.machine = m;
  c.workgroup = {wg, 1, 1};
  c.grid = {grid, 1, 1};
  c.device = DeviceMemory(1 << 20);
  return c;
}

ExecResult run(std::string_view src, const LaunchConfig& cfg) { return launch(parse(src), cfg); }

ExecResult run(std::string_view src, std::uint32_t wg, std::uint32_t grid = 1,
               const MachineDescriptor& m = preset("nvidia")) {
  return run(src, config(m, wg, grid));
}

constexpr std::string_view kStoreTid =
    "  rdsr r10, tid_x\n"
    "  shl.u32 r10, r10, 2\n"
    "  st.device.b32 [r10], r1\n";

}  // namespace

// ---------------------------------------------------------------------------
// Number formats

TEST_CASE("half and bfloat16 conversions") {
  CHECK(float_to_half(1.0f) == 0x3c00);
  CHECK(float_to_half(-2.0f) == 0xc000);
  CHECK(float_to_half(65504.0f) == 0x7bff);
  CHECK(float_to_half(1e6f) == 0x7c00);
  CHECK(half_to_float(0x3555) == doctest::Approx(0.333251953125));
  CHECK(half_to_float(0x0001) == std::ldexp(1.0f, -24));
  CHECK(std::isnan(half_to_float(float_to_half(std::numeric_limits<float>::quiet_NaN()))));
  // 1 + 2^-11 is halfway between two halves: ties to even.
  CHECK(float_to_half(1.0f + std::ldexp(1.0f, -11)) == 0x3c00);
  CHECK(float_to_half(1.0f + 3 * std::ldexp(1.0f, -11)) == 0x3c02);
  for (std::uint32_t h = 0; h < 0x7c00; ++h) CHECK(float_to_half(half_to_float(static_cast<std::uint16_t>(h))) == h);
  CHECK(float_to_bf16(1.0f) == 0x3f80);
  CHECK(bf16_to_float(0x4049) == doctest::Approx(3.140625));
}

// ---------------------------------------------------------------------------
// Divergence primitive

TEST_CASE("if/else/endif masks on a four-lane wave") {
  Function f{"k", true, {If{RegRef{0}}, Halt{}, Else{}, Halt{}, EndIf{}, Halt{}}};
  std::vector<BlockTable> blocks{match_blocks(f)};
  ControlContext ctx{blocks, 32};
  WaveContext w;
  w.launch_mask = w.active = 0b1111;

  apply_control(w, f.body[0], 0b0101, ctx);
  CHECK(w.active == 0b0101);
  CHECK(w.pc == 1);
  w.pc = 2;
  apply_control(w, f.body[2], 0, ctx);
  CHECK(w.active == 0b1010);
  CHECK(w.pc == 3);
  w.pc = 4;
  apply_control(w, f.body[4], 0, ctx);
  CHECK(w.active == 0b1111);
  CHECK(w.pc == 5);
  CHECK(w.divergence_stack.empty());

  SUBCASE("an empty then-branch jumps to the else marker") {
    w.pc = 0;
    apply_control(w, f.body[0], 0, ctx);
    CHECK(w.active == 0);
    CHECK(w.pc == 2);
    apply_control(w, f.body[2], 0, ctx);
    CHECK(w.active == 0b1111);
    CHECK(w.pc == 3);
  }
  SUBCASE("an empty else-branch jumps to the endif") {
    w.pc = 0;
    apply_control(w, f.body[0], 0b1111, ctx);
    w.pc = 2;
    apply_control(w, f.body[2], 0, ctx);
    CHECK(w.pc == 4);
    apply_control(w, f.body[4], 0, ctx);
    CHECK(w.active == 0b1111);
  }
}

TEST_CASE("loop keeps iterating until every lane has broken out") {
  Function f{"k", true, {Loop{}, Break{RegRef{0}}, EndLoop{}, Halt{}}};
  std::vector<BlockTable> blocks{match_blocks(f)};
  ControlContext ctx{blocks, 32};
  WaveContext w;
  w.launch_mask = w.active = 0b1111;
  apply_control(w, f.body[0], 0, ctx);
  int endloops = 0;
  // Lane i breaks on iteration i + 1.
  for (int iter = 0; iter < 4; ++iter) {
    REQUIRE(w.pc == 1);
    apply_control(w, f.body[1], LaneMask{1} << iter, ctx);
    REQUIRE(w.pc == 2);
    apply_control(w, f.body[2], 0, ctx);
    ++endloops;
  }
  CHECK(endloops == 4);
  CHECK(w.pc == 3);
  CHECK(w.active == 0b1111);
  CHECK(w.divergence_stack.empty());
}

TEST_CASE("control stack errors trap") {
  Function f{"k", true, {EndIf{}, Halt{}}};
  std::vector<BlockTable> blocks{match_blocks(f)};
  ControlContext ctx{blocks, 2};
  WaveContext w;
  w.launch_mask = w.active = 1;
  try {
    apply_control(w, f.body[0], 0, ctx);
    FAIL("no trap");
  } catch (const TrapError& e) {
    CHECK(e.kind() == TrapKind::control_stack_underflow);
  }
  Function g{"k", true, {If{}, If{}, If{}, EndIf{}, EndIf{}, EndIf{}, Halt{}}};
  std::vector<BlockTable> gb{match_blocks(g)};
  ControlContext shallow{gb, 2};
  WaveContext v;
  v.launch_mask = v.active = 1;
  apply_control(v, g.body[0], 1, shallow);
  apply_control(v, g.body[1], 1, shallow);
  try {
    apply_control(v, g.body[2], 1, shallow);
    FAIL("no trap");
  } catch (const TrapError& e) {
    CHECK(e.kind() == TrapKind::divergence_stack_overflow);
  }
}

TEST_CASE("generated mask programs agree with the per-lane reference") {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    testgen::MaskProgramGen gen(seed);
    const auto p = gen.program();
    const std::uint32_t widths[] = {8, 16, 32, 64};
    const auto m = testgen::custom_machine(widths[seed % 4]);
    const std::uint32_t wg = 1 + static_cast<std::uint32_t>((seed * 37) % (2 * m.wave_width));
    auto cfg = config(m, wg);
    testgen::MaskChecker checker;
    cfg.control_observer = std::ref(checker);
    const auto r = launch(p, cfg);
    REQUIRE_MESSAGE(r.completed(), r.trap->describe());
    CHECK(checker.failures.empty());
    CHECK(checker.balanced());
    testgen::LaneReference ref(p.functions[0]);
    const auto out = r.device.read_words(0, wg);
    for (std::uint32_t t = 0; t < wg; ++t) CHECK(out[t] == ref.run(t % m.wave_width, t));
  }
}

// ---------------------------------------------------------------------------
// Shuffles, atomics, banks

TEST_CASE("shuffle modes") {
  std::vector<std::uint32_t> v(32);
  for (std::uint32_t i = 0; i < 32; ++i) v[i] = i * 10;
  const LaneMask all = lanes_below(32);
  const auto down = eval_shuffle(ShflMode::down, v, 1, all);
  CHECK(down[0] == 10);
  CHECK(down[30] == 310);
  CHECK(down[31] == 310);
  const auto up = eval_shuffle(ShflMode::up, v, 2, all);
  CHECK(up[0] == 0);
  CHECK(up[1] == 10);
  CHECK(up[2] == 0);
  CHECK(up[5] == 30);
  const auto x = eval_shuffle(ShflMode::xor_, v, 1, all);
  CHECK(x[0] == 10);
  CHECK(x[1] == 0);
  const auto idx = eval_shuffle(ShflMode::idx, v, 5, all);
  for (auto e : idx) CHECK(e == 50);
  CHECK(shuffle_source(ShflMode::xor_, 3, 16, 32) == 19);
  CHECK(shuffle_source(ShflMode::down, 20, 16, 32) == 20);
}

TEST_CASE("shuffle reads inactive source lanes") {
  const auto r = run(
      ".kernel k\n"
      "  rdsr r0, lane_id\n"
      "  cmp.lt.u32 r2, r0, 16\n"
      "  mov.u32 r1, 0\n"
      "  if r2\n"
      "    shfl.down.b32 r1, r0, 16\n"
      "  endif\n"
      "  rdsr r10, tid_x\n"
      "  shl.u32 r10, r10, 2\n"
      "  st.device.b32 [r10], r1\n"
      "  halt\n",
      32);
  REQUIRE(r.completed());
  const auto out = r.device.read_words(0, 32);
  CHECK(out[0] == 16);
  CHECK(out[15] == 31);
  CHECK(out[16] == 0);
  CHECK(r.stats.shuffle_steps == 1);
}

TEST_CASE("atomic operations") {
  CHECK(eval_atomic(AtomicOp::add, ScalarType::U32, 5, 3).new_value == 8);
  CHECK(eval_atomic(AtomicOp::add, ScalarType::U32, 5, 3).old_value == 5);
  CHECK(eval_atomic(AtomicOp::min, ScalarType::I32, 5, 0xffffffffu).new_value == 0xffffffffu);
  CHECK(eval_atomic(AtomicOp::min, ScalarType::U32, 5, 0xffffffffu).new_value == 5);
  CHECK(eval_atomic(AtomicOp::max, ScalarType::I32, 0x80000000u, 1).new_value == 1);
  CHECK(eval_atomic(AtomicOp::exch, ScalarType::U32, 5, 9).new_value == 9);
  CHECK(eval_atomic(AtomicOp::cmpxch, ScalarType::U32, 5, 9, 5).new_value == 9);
  CHECK(eval_atomic(AtomicOp::cmpxch, ScalarType::U32, 5, 9, 4).new_value == 5);
  CHECK(eval_atomic(AtomicOp::sub, ScalarType::U32, 0, 1).new_value == 0xffffffffu);
}

TEST_CASE("same-address atomics serialize") {
  const auto r = run(
      ".kernel k\n"
      "  mov.u32 r1, 1\n"
      "  atom.device.add.u32 r2, [0], r1\n"
      "  halt\n",
      32);
  REQUIRE(r.completed());
  CHECK(r.device.load(0, 4) == 32);
  CHECK(r.stats.atomic_serializations == 31);
}

TEST_CASE("atomic old values follow ascending lane order") {
  const auto r = run(
      ".kernel k\n"
      "  mov.u32 r0, 1\n"
      "  atom.device.add.u32 r1, [512], r0\n" +
          std::string(kStoreTid) + "  halt\n",
      32);
  REQUIRE(r.completed());
  const auto out = r.device.read_words(0, 32);
  for (std::uint32_t i = 0; i < 32; ++i) CHECK(out[i] == i);
}

TEST_CASE("bank conflict counting") {
  std::vector<std::uint32_t> a(32);
  const LaneMask all = lanes_below(32);
  for (std::uint32_t i = 0; i < 32; ++i) a[i] = i * 4;
  CHECK(count_bank_conflicts(a, all, 32, 4) == 0);
  for (std::uint32_t i = 0; i < 32; ++i) a[i] = i * 32 * 4;
  CHECK(count_bank_conflicts(a, all, 32, 4) == 31);
  for (std::uint32_t i = 0; i < 32; ++i) a[i] = i * 33 * 4;
  CHECK(count_bank_conflicts(a, all, 32, 4) == 0);
  for (std::uint32_t i = 0; i < 32; ++i) a[i] = 64;
  CHECK(count_bank_conflicts(a, all, 32, 4) == 0);
  for (std::uint32_t i = 0; i < 32; ++i) a[i] = i * 2 * 4;
  CHECK(count_bank_conflicts(a, all, 32, 4) == 16);
  CHECK(count_bank_conflicts(a, 0b11, 32, 4) == 0);
}

// ---------------------------------------------------------------------------
// Barriers

TEST_CASE("barrier releases once every live wave arrives") {
  std::vector<WaveContext> waves(8);
  for (auto& w : waves) w.launch_mask = w.active = lanes_below(32);
  for (std::size_t i = 0; i < 7; ++i) CHECK_FALSE(barrier_rendezvous(waves, i, 0, 1).released);
  CHECK(barrier_rendezvous(waves, 7, 0, 1).released);
  for (auto& w : waves) CHECK(w.status == WaveStatus::ready);
}

TEST_CASE("a halted wave does not block the barrier") {
  std::vector<WaveContext> waves(8);
  for (auto& w : waves) w.launch_mask = w.active = lanes_below(32);
  waves[3].status = WaveStatus::halted;
  for (std::size_t i = 0; i < 8; ++i)
    if (i != 3 && i != 7) CHECK_FALSE(barrier_rendezvous(waves, i, 0, 1).released);
  CHECK(barrier_rendezvous(waves, 7, 0, 1).released);
}

TEST_CASE("barrier under divergence traps") {
  std::vector<WaveContext> waves(1);
  waves[0].launch_mask = lanes_below(32);
  waves[0].active = 0xffff;
  try {
    barrier_rendezvous(waves, 0, 0, 1);
    FAIL("no trap");
  } catch (const TrapError& e) {
    CHECK(e.kind() == TrapKind::divergent_barrier);
  }
  CHECK_THROWS_AS(barrier_rendezvous(waves, 0, 3, 2), TrapError);
}

TEST_CASE("workgroup tree sum through scratch and barriers") {
  const auto r = run(
      ".scratch 1024\n"
      ".kernel k\n"
      "  rdsr r0, tid_x\n"
      "  shl.u32 r3, r0, 2\n"
      "  add.u32 r1, r0, 1\n"
      "  st.scratch.b32 [r3], r1\n"
      "  bar\n"
      "  mov.u32 r4, 128\n"
      "  loop\n"
      "    cmp.eq.u32 r5, r4, 0\n"
      "    break r5\n"
      "    cmp.lt.u32 r5, r0, r4\n"
      "    if r5\n"
      "      shl.u32 r6, r4, 2\n"
      "      add.u32 r6, r6, r3\n"
      "      ld.scratch.b32 r7, [r6]\n"
      "      ld.scratch.b32 r8, [r3]\n"
      "      add.u32 r8, r8, r7\n"
      "      st.scratch.b32 [r3], r8\n"
      "    endif\n"
      "    bar\n"
      "    shr.u32 r4, r4, 1\n"
      "  endloop\n"
      "  cmp.eq.u32 r5, r0, 0\n"
      "  if r5\n"
      "    ld.scratch.b32 r1, [0]\n"
      "    st.device.b32 [0], r1\n"
      "  endif\n"
      "  halt\n",
      256);
  REQUIRE_MESSAGE(r.completed(), r.trap->describe());
  CHECK(r.device.load(0, 4) == 256 * 257 / 2);
  CHECK(r.stats.barrier_rounds == 9);
  CHECK(r.races.empty());
}

TEST_CASE("lanes that halt early do not make a later barrier divergent") {
  const auto r = run(
      ".kernel k\n"
      "  rdsr r0, lane_id\n"
      "  cmp.ge.u32 r1, r0, 16\n"
      "  if r1\n"
      "    halt\n"
      "  endif\n"
      "  bar\n"
      "  mov.u32 r1, 7\n" +
          std::string(kStoreTid) + "  halt\n",
      64);
  REQUIRE_MESSAGE(r.completed(), r.trap->describe());
  CHECK(r.device.load(0, 4) == 7);
  CHECK(r.device.load(60, 4) == 7);
  CHECK(r.device.load(64, 4) == 0);
  CHECK(r.device.load(32 * 4 + 15 * 4, 4) == 7);
}

// ---------------------------------------------------------------------------
// Traps

TEST_CASE("runtime traps carry kind and position") {
  SUBCASE("divergent barrier") {
    const auto r = run(".kernel k\n rdsr r0, lane_id\n and.u32 r1, r0, 1\n if r1\n bar\n endif\n halt\n", 32);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::divergent_barrier);
    CHECK(r.trap->pc == 3);
    CHECK(r.trap->describe().find("barrier under divergence") != std::string::npos);
  }
  SUBCASE("device out of bounds") {
    const auto r = run(".kernel k\n mov.u32 r0, 0x7ffffff0\n st.device.b32 [r0], r0\n halt\n", 32);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::device_out_of_bounds);
    CHECK(r.trap->pc == 1);
  }
  SUBCASE("scratch out of bounds") {
    const auto r = run(".scratch 64\n.kernel k\n ld.scratch.b32 r0, [64]\n halt\n", 32);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::scratch_out_of_bounds);
  }
  SUBCASE("misaligned") {
    const auto r = run(".kernel k\n ld.device.b32 r0, [2]\n halt\n", 32);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::misaligned_access);
  }
  SUBCASE("divide by zero") {
    const auto r = run(".kernel k\n rdsr r0, lane_id\n div.u32 r1, r0, r0\n halt\n", 32);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::divide_by_zero);
  }
  SUBCASE("deadlock on mismatched named barriers") {
    const auto r = run(
        ".kernel k\n rdsr r0, wave_id\n if r0\n bar 1\n else\n bar 2\n endif\n halt\n", 64);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::deadlock);
  }
  SUBCASE("step limit") {
    auto cfg = config(preset("nvidia"), 32);
    cfg.max_steps = 1000;
    const auto r = run(".kernel k\n loop\n endloop\n halt\n", cfg);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::step_limit);
  }
  SUBCASE("recursion") {
    const auto r = run(".kernel k\n call f\n halt\n.func f\n call f\n ret\n", 32);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::call_stack_overflow);
  }
  SUBCASE("divergent matrix op") {
    const auto r = run(
        ".kernel k\n rdsr r0, lane_id\n cmp.lt.u32 r1, r0, 3\n if r1\n mma.8x8x8.f32 r8, r10, r12, r14\n endif\n halt\n",
        32);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::divergent_mma);
  }
  SUBCASE("workgroup larger than occupancy admits") {
    const auto r = run(".regs 255\n.kernel k\n halt\n", 1024);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::occupancy);
  }
  SUBCASE("invalid launch") {
    const auto r = run(".kernel k\n halt\n", 2048);
    REQUIRE(r.trap);
    CHECK(r.trap->kind == TrapKind::invalid_launch);
  }
}

TEST_CASE("launch rejects programs that do not validate") {
  CHECK_THROWS_AS(run(".kernel k\n bar 3\n halt\n", 32, 1, preset("apple")), ValidationError);
}

// ---------------------------------------------------------------------------
// Arithmetic and conversions

TEST_CASE("integer and float arithmetic") {
  const auto r = run(
      ".kernel k\n"
      "  mov.u32 r0, 0x80000000\n"
      "  div.i32 r1, r0, -1\n"
      "  st.device.b32 [0], r1\n"
      "  mov.u32 r2, -7\n"
      "  shr.i32 r3, r2, 1\n"
      "  st.device.b32 [4], r3\n"
      "  shr.u32 r3, r2, 28\n"
      "  st.device.b32 [8], r3\n"
      "  mov.f32 r4, 0x3fc00000\n"       // 1.5
      "  fma.f32 r5, r4, r4, 0x3f800000\n"  // 1.5*1.5+1
      "  st.device.b32 [12], r5\n"
      "  cvt.i32.f32 r6, 0x4f800000\n"   // 2^32 saturates
      "  st.device.b32 [16], r6\n"
      "  cvt.u32.f32 r6, 0xbf800000\n"   // -1 saturates to 0
      "  st.device.b32 [20], r6\n"
      "  cvt.i32.f32 r6, 0x7fc00000\n"   // NaN
      "  st.device.b32 [24], r6\n"
      "  cvt.f16.f32 r7.l, 0x3f800000\n"
      "  st.device.b16 [28], r7.l\n"
      "  cvt.f32.i32 r8, -3\n"
      "  st.device.b32 [32], r8\n"
      "  min.i32 r9, r2, 1\n"
      "  st.device.b32 [36], r9\n"
      "  halt\n",
      1);
  REQUIRE_MESSAGE(r.completed(), r.trap->describe());
  const auto w = r.device.read_words(0, 10);
  CHECK(w[0] == 0x80000000u);
  CHECK(w[1] == static_cast<std::uint32_t>(-4));
  CHECK(w[2] == 0xf);
  CHECK(f32(w[3]) == 3.25f);
  CHECK(w[4] == 0x7fffffffu);
  CHECK(w[5] == 0);
  CHECK(w[6] == 0);
  CHECK((w[7] & 0xffff) == 0x3c00);
  CHECK(f32(w[8]) == -3.0f);
  CHECK(w[9] == static_cast<std::uint32_t>(-7));
}

TEST_CASE("f64 arithmetic uses register pairs") {
  const auto r = run(
      ".kernel k\n"
      "  cvt.f64.i32 r0, 3\n"
      "  cvt.f64.i32 r2, 10\n"
      "  div.f64 r4, r0, r2\n"
      "  st.device.b32 [0], r4\n"
      "  st.device.b32 [4], r5\n"
      "  halt\n",
      1);
  REQUIRE(r.completed());
  const std::uint64_t lo = r.device.load(0, 4);
  const std::uint64_t hi = r.device.load(4, 4);
  CHECK(std::bit_cast<double>(lo | (hi << 32)) == 0.3);
}

TEST_CASE("matrix multiply accumulate") {
  // A = I (8x8), B[e] = e, C = 1. D = B + 1. At W=32 each operand spans 2 regs.
  const auto r = run(
      ".kernel k\n"
      "  rdsr r0, lane_id\n"
      "  add.u32 r1, r0, 32\n"
      // A: element e is 1 when e % 9 == 0
      "  mov.u32 r10, 0\n"
      "  mov.u32 r11, 0\n"
      "  div.u32 r2, r0, 9\n"
      "  mul.u32 r2, r2, 9\n"
      "  cmp.eq.u32 r3, r2, r0\n"
      "  if r3\n"
      "    mov.u32 r10, 0x3f800000\n"
      "  endif\n"
      "  div.u32 r2, r1, 9\n"
      "  mul.u32 r2, r2, 9\n"
      "  cmp.eq.u32 r3, r2, r1\n"
      "  if r3\n"
      "    mov.u32 r11, 0x3f800000\n"
      "  endif\n"
      "  cvt.f32.u32 r12, r0\n"
      "  cvt.f32.u32 r13, r1\n"
      "  mov.u32 r14, 0x3f800000\n"
      "  mov.u32 r15, 0x3f800000\n"
      "  mma.8x8x8.f32 r16, r10, r12, r14\n"
      "  shl.u32 r4, r0, 2\n"
      "  st.device.b32 [r4], r16\n"
      "  st.device.b32 [r4+128], r17\n"
      "  halt\n",
      32);
  REQUIRE_MESSAGE(r.completed(), r.trap->describe());
  const auto out = r.device.read_words(0, 64);
  for (std::uint32_t e = 0; e < 64; ++e) CHECK(f32(out[e]) == static_cast<float>(e) + 1.0f);
}

// ---------------------------------------------------------------------------
// Async copies and races

TEST_CASE("async copy lands after wait") {
  auto cfg = config(preset("nvidia"), 32);
  std::vector<std::uint32_t> src(32);
  for (std::uint32_t i = 0; i < 32; ++i) src[i] = 1000 + i;
  cfg.device.write_words(4096, src);
  cfg.check_races = true;
  const auto r = run(
      ".scratch 128\n"
      ".kernel k\n"
      "  rdsr r0, lane_id\n"
      "  shl.u32 r1, r0, 2\n"
      "  add.u32 r2, r1, 4096\n"
      "  cp.async r1, r2, 4\n"
      "  wait.async 0\n"
      "  ld.scratch.b32 r3, [r1]\n"
      "  st.device.b32 [r1], r3\n"
      "  halt\n",
      cfg);
  REQUIRE_MESSAGE(r.completed(), r.trap->describe());
  CHECK(r.device.read_words(0, 32) == src);
  CHECK(r.races.empty());
}

TEST_CASE("reading an async destination before waiting is a race") {
  auto cfg = config(preset("nvidia"), 32);
  cfg.check_races = true;
  const auto r = run(
      ".scratch 128\n"
      ".kernel k\n"
      "  rdsr r0, lane_id\n"
      "  shl.u32 r1, r0, 2\n"
      "  add.u32 r2, r1, 4096\n"
      "  cp.async r1, r2, 4\n"
      "  ld.scratch.b32 r3, [r1]\n"
      "  wait.async 0\n"
      "  halt\n",
      cfg);
  REQUIRE(r.completed());
  REQUIRE_FALSE(r.races.empty());
  CHECK(r.races[0].note.find("async") != std::string::npos);
}

TEST_CASE("race detection on scratch with and without a barrier") {
  const std::string body =
      ".scratch 64\n"
      ".kernel k\n"
      "  rdsr r0, wave_id\n"
      "  cmp.eq.u32 r1, r0, 0\n"
      "  if r1\n"
      "    st.scratch.b32 [0], r0\n"
      "  endif\n"
      "BARRIER"
      "  cmp.eq.u32 r1, r0, 1\n"
      "  if r1\n"
      "    ld.scratch.b32 r2, [0]\n"
      "  endif\n"
      "  halt\n";
  auto cfg = config(preset("nvidia"), 64);
  cfg.check_races = true;
  auto racy = body;
  racy.replace(racy.find("BARRIER"), 7, "");
  auto r = run(racy, cfg);
  REQUIRE(r.completed());
  REQUIRE_FALSE(r.races.empty());
  CHECK(r.races[0].space == MemSpace::scratch);
  CHECK(r.races[0].fix_scope == Scope::workgroup);
  CHECK(r.races[0].describe().find("race on scratch") != std::string::npos);

  auto ordered = body;
  ordered.replace(ordered.find("BARRIER"), 7, "  bar\n");
  r = run(ordered, cfg);
  REQUIRE(r.completed());
  CHECK(r.races.empty());
}

TEST_CASE("same-wave accesses never race") {
  auto cfg = config(preset("nvidia"), 32);
  cfg.check_races = true;
  const auto r = run(".kernel k\n st.device.b32 [0], r0\n ld.device.b32 r1, [0]\n st.device.b32 [0], r1\n halt\n", cfg);
  CHECK(r.races.empty());
}

// ---------------------------------------------------------------------------
// Scheduling and determinism

TEST_CASE("same seed gives the same trace hash; other seeds the same memory") {
  const auto p = parse(
      ".kernel k\n"
      "  rdsr r0, tid_x\n"
      "  rdsr r1, wgid_x\n"
      "  mov.u32 r2, 1\n"
      "  atom.device.add.u32 r3, [0], r2\n"
      "  shl.u32 r4, r1, 2\n"
      "  atom.device.add.u32 r3, [r4+4], r0\n"
      "  halt\n");
  auto cfg = config(preset("nvidia"), 128, 6);
  cfg.interleave_workgroups = true;
  cfg.seed = 3;
  const auto a = launch(p, cfg);
  const auto b = launch(p, cfg);
  REQUIRE(a.completed());
  CHECK(a.stats.trace_hash == b.stats.trace_hash);
  CHECK(a.device == b.device);
  bool hash_varies = false;
  for (std::uint64_t s = 0; s < 20; ++s) {
    cfg.seed = s;
    const auto c = launch(p, cfg);
    CHECK(c.device == a.device);
    hash_varies |= c.stats.trace_hash != a.stats.trace_hash;
  }
  CHECK(hash_varies);
  CHECK(a.device.load(0, 4) == 768);
}

TEST_CASE("trace records every scheduled step") {
  auto cfg = config(preset("nvidia"), 32);
  cfg.trace = true;
  const auto r = run(".kernel k\n rdsr r0, lane_id\n halt\n", cfg);
  REQUIRE(r.trace.size() == 2);
  CHECK(r.trace[0].mnemonic == "rdsr");
  CHECK(r.trace[0].step == 1);
  CHECK(r.trace[1].to_string() == "2,0,0,1,halt,ffffffff");
}

TEST_CASE("statistics json lists every counter") {
  const auto r = run(".kernel k\n bar\n halt\n", 64);
  const auto j = stats_to_json(r.stats);
  for (const char* key : {"barrier_rounds", "shuffle_steps", "bank_conflict_extra_cycles", "atomic_serializations",
                          "trace_hash", "dynamic_instructions"})
    CHECK(j.find(key) != std::string::npos);
  CHECK(r.stats.barrier_rounds == 1);
  CHECK(r.stats.instructions(InstrClass::barrier) == 2);
}

TEST_CASE("device memory paging and digest") {
  DeviceMemory a(1 << 20);
  DeviceMemory b(1 << 20);
  CHECK(a.digest() == b.digest());
  a.store(70000, 0, 4);
  CHECK(a == b);
  CHECK(a.digest() == b.digest());
  a.store(70000, 0xdeadbeef, 4);
  CHECK(a.load(70000, 4) == 0xdeadbeef);
  CHECK(a.load(70001, 1) == 0xbe);
  CHECK_FALSE(a == b);
  CHECK(a.high_water() == 70004);
  CHECK(a.in_bounds((1 << 20) - 4, 4));
  CHECK_FALSE(a.in_bounds((1 << 20) - 2, 4));
}
