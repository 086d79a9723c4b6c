#include <algorithm>
#include <bit>

#include <fmt/format.h>
#include <json.hpp>

#include "uvgpu/vm.hpp"

namespace uvgpu {

std::string_view to_string(TrapKind k) {
  switch (k) {
    case TrapKind::divergent_barrier: return "barrier under divergence";
    case TrapKind::barrier_id: return "barrier id out of range";
    case TrapKind::scratch_out_of_bounds: return "scratchpad access out of bounds";
    case TrapKind::device_out_of_bounds: return "device access out of bounds";
    case TrapKind::arg_out_of_bounds: return "argument access out of bounds";
    case TrapKind::misaligned_access: return "misaligned access";
    case TrapKind::call_stack_overflow: return "call stack overflow";
    case TrapKind::divergence_stack_overflow: return "divergence stack overflow";
    case TrapKind::control_stack_underflow: return "control stack underflow";
    case TrapKind::deadlock: return "deadlock";
    case TrapKind::divide_by_zero: return "integer division by zero";
    case TrapKind::divergent_mma: return "matrix operation under divergence";
    case TrapKind::step_limit: return "step limit exceeded";
    case TrapKind::occupancy: return "workgroup exceeds occupancy";
    case TrapKind::invalid_launch: return "invalid launch";
  }
  return "unknown trap";
}

std::string Trap::describe() const {
  std::string s = fmt::format("trap: {} (wg {}, wave {}, {}:{})", to_string(kind), workgroup, wave,
                              function.empty() ? "?" : function, pc);
  if (!message.empty()) s += ": " + message;
  return s;
}

std::string_view to_string(InstrClass c) {
  switch (c) {
    case InstrClass::arith: return "arith";
    case InstrClass::convert: return "convert";
    case InstrClass::compare: return "compare";
    case InstrClass::memory: return "memory";
    case InstrClass::atomic: return "atomic";
    case InstrClass::shuffle: return "shuffle";
    case InstrClass::barrier: return "barrier";
    case InstrClass::fence: return "fence";
    case InstrClass::async: return "async";
    case InstrClass::special: return "special";
    case InstrClass::control: return "control";
    case InstrClass::call: return "call";
    case InstrClass::matrix: return "matrix";
    case InstrClass::halt: return "halt";
    case InstrClass::count_: break;
  }
  return "?";
}

InstrClass classify(const Instruction& inst) {
  switch (inst.index()) {
    case 0: return InstrClass::arith;    // Arith
    case 1: return InstrClass::convert;  // Cvt
    case 2: return InstrClass::compare;  // Cmp
    case 3:                              // Ld
    case 4: return InstrClass::memory;   // St
    case 5: return InstrClass::atomic;
    case 6: return InstrClass::shuffle;
    case 7: return InstrClass::barrier;
    case 8: return InstrClass::fence;
    case 9:
    case 10: return InstrClass::async;
    case 11: return InstrClass::special;
    case 18:
    case 19: return InstrClass::call;  // Call, Ret
    case 20: return InstrClass::matrix;
    case 21: return InstrClass::halt;
    default: return InstrClass::control;
  }
}

std::uint64_t ExecStats::total_instructions() const {
  std::uint64_t t = 0;
  for (auto v : dynamic_instructions) t += v;
  return t;
}

std::string stats_to_json(const ExecStats& s) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json per_class;
  for (std::size_t i = 0; i < s.dynamic_instructions.size(); ++i)
    per_class[std::string(to_string(static_cast<InstrClass>(i)))] = s.dynamic_instructions[i];
  j["dynamic_instructions"] = per_class;
  j["total_instructions"] = s.total_instructions();
  j["barrier_rounds"] = s.barrier_rounds;
  j["shuffle_steps"] = s.shuffle_steps;
  j["bank_conflict_extra_cycles"] = s.bank_conflict_extra_cycles;
  j["atomic_serializations"] = s.atomic_serializations;
  j["scratch_bytes"] = s.scratch_bytes;
  j["device_bytes"] = s.device_bytes;
  j["scheduler_steps"] = s.scheduler_steps;
  j["workgroups_completed"] = s.workgroups_completed;
  j["peak_resident_waves"] = s.peak_resident_waves;
  j["trace_hash"] = fmt::format("{:016x}", s.trace_hash);
  return j.dump(2) + "\n";
}

std::string TraceRecord::to_string() const {
  return fmt::format("{},{},{},{},{},{:x}", step, workgroup, wave, pc, mnemonic, mask);
}

std::string RaceReport::describe() const {
  auto site = [](const AccessSite& a) {
    return fmt::format("{}{} by wg {} wave {} lane {} at {}:{}", a.atomic ? "atomic " : "", a.write ? "write" : "read",
                       a.workgroup, a.wave, a.lane, a.function, a.pc);
  };
  std::string s = fmt::format("race on {} address 0x{:x}: {} vs {}; order with {}-scope release/acquire",
                              uvgpu::to_string(space), address, site(earlier), site(later), uvgpu::to_string(fix_scope));
  if (!note.empty()) s += " (" + note + ")";
  return s;
}

std::uint32_t shuffle_source(ShflMode mode, std::uint32_t lane, std::uint32_t operand, std::uint32_t wave_width) {
  switch (mode) {
    case ShflMode::idx: return operand % wave_width;
    case ShflMode::down: return lane + operand < wave_width ? lane + operand : lane;
    case ShflMode::up: return lane >= operand ? lane - operand : lane;
    case ShflMode::xor_: return (lane ^ operand) % wave_width;
  }
  return lane;
}

std::vector<std::uint32_t> eval_shuffle(ShflMode mode, std::span<const std::uint32_t> lanes, std::uint32_t operand,
                                        LaneMask active) {
  const auto W = static_cast<std::uint32_t>(lanes.size());
  std::vector<std::uint32_t> out(lanes.begin(), lanes.end());
  for (std::uint32_t i = 0; i < W; ++i)
    if (active >> i & 1u) out[i] = lanes[shuffle_source(mode, i, operand, W)];
  return out;
}

AtomicOutcome eval_atomic(AtomicOp op, ScalarType type, std::uint32_t cell, std::uint32_t operand,
                          std::uint32_t compare) {
  const bool is_signed = type == ScalarType::I32;
  std::uint32_t next = cell;
  switch (op) {
    case AtomicOp::add: next = cell + operand; break;
    case AtomicOp::sub: next = cell - operand; break;
    case AtomicOp::min:
      next = is_signed ? static_cast<std::uint32_t>(std::min(static_cast<std::int32_t>(cell), static_cast<std::int32_t>(operand)))
                       : std::min(cell, operand);
      break;
    case AtomicOp::max:
      next = is_signed ? static_cast<std::uint32_t>(std::max(static_cast<std::int32_t>(cell), static_cast<std::int32_t>(operand)))
                       : std::max(cell, operand);
      break;
    case AtomicOp::and_: next = cell & operand; break;
    case AtomicOp::or_: next = cell | operand; break;
    case AtomicOp::xor_: next = cell ^ operand; break;
    case AtomicOp::exch: next = operand; break;
    case AtomicOp::cmpxch: next = cell == compare ? operand : cell; break;
  }
  return {next, cell};
}

std::uint32_t count_bank_conflicts(std::span<const std::uint32_t> addresses, LaneMask active,
                                   std::uint32_t bank_count, std::uint32_t bank_width) {
  std::array<std::uint64_t, 64> keys{};  // (bank << 32) | word
  std::size_t n = 0;
  for (std::size_t lane = 0; lane < addresses.size() && lane < 64; ++lane) {
    if (!(active >> lane & 1u)) continue;
    const std::uint32_t word = addresses[lane] / bank_width;
    keys[n++] = (std::uint64_t{word % bank_count} << 32) | word;
  }
  std::sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n));
  const auto end = std::unique(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n));
  // Each bank serves one distinct word per cycle; every further word costs one cycle.
  std::uint32_t extra = 0;
  for (auto it = keys.begin(); it != end; ++it)
    if (it != keys.begin() && (*it >> 32) == (*(it - 1) >> 32)) ++extra;
  return extra;
}

namespace {

DivergenceEntry& top_entry(WaveContext& w, const char* marker) {
  if (w.divergence_stack.empty())
    throw TrapError(TrapKind::control_stack_underflow, fmt::format("{} with empty divergence stack", marker));
  return w.divergence_stack.back();
}

void push_entry(WaveContext& w, DivergenceEntry e, const ControlContext& ctx) {
  if (w.divergence_stack.size() >= ctx.max_divergence_depth)
    throw TrapError(TrapKind::divergence_stack_overflow,
                    fmt::format("divergence stack deeper than {}", ctx.max_divergence_depth));
  w.divergence_stack.push_back(e);
}

}  // namespace

void settle_empty_mask(WaveContext& w, const ControlContext& ctx) {
  if (w.active != 0) return;
  if (w.live() == 0) {
    w.status = WaveStatus::halted;
    return;
  }
  if (w.divergence_stack.empty())
    throw TrapError(TrapKind::control_stack_underflow, "live lanes are parked but no block is pending");
  const DivergenceEntry& top = w.divergence_stack.back();
  // Lanes parked in a caller's block: abandon the callee frames.
  while (w.call_stack.size() > top.call_depth) w.call_stack.pop_back();
  w.function = top.function;
  const BlockInfo& info = ctx.blocks[top.function].info[top.open_pc];
  switch (top.kind) {
    case DivergenceEntry::Kind::if_: w.pc = static_cast<std::uint32_t>(info.partner); break;
    case DivergenceEntry::Kind::else_:
    case DivergenceEntry::Kind::loop: w.pc = static_cast<std::uint32_t>(info.end); break;
  }
}

void apply_control(WaveContext& w, const Instruction& marker, LaneMask cond, const ControlContext& ctx) {
  using Kind = DivergenceEntry::Kind;
  if (std::holds_alternative<If>(marker)) {
    push_entry(w,
               {Kind::if_, w.active, w.active & ~cond, w.function, w.pc,
                static_cast<std::uint32_t>(w.call_stack.size())},
               ctx);
    w.active &= cond;
    ++w.pc;
  } else if (std::holds_alternative<Else>(marker)) {
    auto& top = top_entry(w, "else");
    top.kind = Kind::else_;
    w.active = top.else_mask;
    ++w.pc;
  } else if (std::holds_alternative<EndIf>(marker)) {
    auto& top = top_entry(w, "endif");
    if (top.kind == Kind::loop) throw TrapError(TrapKind::control_stack_underflow, "endif closes a loop");
    w.active = top.saved;
    w.divergence_stack.pop_back();
    ++w.pc;
  } else if (std::holds_alternative<Loop>(marker)) {
    push_entry(w, {Kind::loop, w.active, 0, w.function, w.pc, static_cast<std::uint32_t>(w.call_stack.size())}, ctx);
    ++w.pc;
  } else if (std::holds_alternative<Break>(marker)) {
    const LaneMask leaving = w.active & cond;
    w.active &= ~leaving;
    bool found_loop = false;
    for (auto it = w.divergence_stack.rbegin(); it != w.divergence_stack.rend(); ++it) {
      if (it->kind == Kind::loop) {
        found_loop = true;
        break;
      }
      it->saved &= ~leaving;
      it->else_mask &= ~leaving;
    }
    if (!found_loop) throw TrapError(TrapKind::control_stack_underflow, "break outside of a loop");
    ++w.pc;
  } else if (std::holds_alternative<EndLoop>(marker)) {
    auto& top = top_entry(w, "endloop");
    if (top.kind != Kind::loop) throw TrapError(TrapKind::control_stack_underflow, "endloop closes an if");
    if (w.active != 0) {
      w.pc = top.open_pc + 1;
    } else {
      w.active = top.saved;
      w.divergence_stack.pop_back();
      ++w.pc;
    }
  } else {
    throw std::logic_error("apply_control called with a non-control instruction");
  }
  if (w.active == 0) settle_empty_mask(w, ctx);
}

BarrierOutcome try_release_barrier(std::span<WaveContext> waves) {
  std::optional<std::uint32_t> id;
  bool any_waiting = false;
  for (const auto& w : waves) {
    if (w.status == WaveStatus::halted) continue;
    if (w.status != WaveStatus::at_barrier) return {};
    if (id && *id != w.barrier_id) return {};
    id = w.barrier_id;
    any_waiting = true;
  }
  if (!any_waiting) return {};
  for (auto& w : waves)
    if (w.status == WaveStatus::at_barrier) w.status = WaveStatus::ready;
  return {true};
}

BarrierOutcome barrier_rendezvous(std::span<WaveContext> waves, std::size_t wave, std::uint32_t id,
                                  std::uint32_t named_barriers) {
  auto& w = waves[wave];
  if (id >= named_barriers)
    throw TrapError(TrapKind::barrier_id, fmt::format("barrier {} with {} named barriers", id, named_barriers));
  if (w.active != w.live())
    throw TrapError(TrapKind::divergent_barrier,
                    fmt::format("active mask {:x} differs from live mask {:x}", w.active, w.live()));
  w.status = WaveStatus::at_barrier;
  w.barrier_id = id;
  return try_release_barrier(waves);
}

}  // namespace uvgpu
