#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <limits>
#include <unordered_map>

#include <fmt/format.h>

#include "races.hpp"
#include "uvgpu/numeric.hpp"
#include "uvgpu/vm.hpp"

namespace uvgpu {
namespace {

struct CopyItem {
  std::uint32_t scratch;
  std::uint32_t device;
  std::uint32_t lane;
};

struct AsyncGroup {
  std::uint32_t bytes = 0;
  std::vector<CopyItem> items;
  std::uint32_t function = 0;
  std::uint32_t pc = 0;
};

struct Workgroup {
  std::uint32_t linear = 0;
  std::uint32_t gx = 0, gy = 0, gz = 0;
  std::vector<WaveContext> waves;
  std::vector<std::uint32_t> agents;
  std::vector<std::deque<AsyncGroup>> async;
  std::vector<std::uint8_t> scratch;

  bool done() const {
    return std::all_of(waves.begin(), waves.end(), [](const WaveContext& w) { return w.status == WaveStatus::halted; });
  }
};

template <typename F>
inline void for_lanes(LaneMask m, F&& f) {
  while (m) {
    const auto l = static_cast<std::uint32_t>(std::countr_zero(m));
    f(l);
    m &= m - 1;
  }
}

double saturate_to(double v, double lo, double hi) {
  if (std::isnan(v)) return 0;
  v = std::trunc(v);
  return std::clamp(v, lo, hi);
}

class Engine {
 public:
  Engine(const Program& p, const LaunchConfig& cfg) : p_(p), cfg_(cfg), m_(cfg.machine), W_(m_.wave_width),
                                                        device_(cfg.device), rng_(cfg.seed) {
    std::uint32_t offset = 0;
    for (std::size_t i = 0; i < p.functions.size(); ++i) {
      const auto& f = p.functions[i];
      index_[f.name] = static_cast<std::uint32_t>(i);
      blocks_.push_back(match_blocks(f));
      flat_offset_.push_back(offset);
      offset += static_cast<std::uint32_t>(f.body.size());
    }
    for (const auto& f : p.functions) {
      std::vector<std::uint32_t> targets(f.body.size(), 0);
      for (std::size_t pc = 0; pc < f.body.size(); ++pc)
        if (const auto* c = std::get_if<Call>(&f.body[pc])) targets[pc] = index_.at(c->function);
      call_target_.push_back(std::move(targets));
    }
    ctl_.blocks = blocks_;
    ctl_.max_divergence_depth = cfg.max_divergence_depth;
  }

  ExecResult run();

 private:
  // -- registers -----------------------------------------------------------
  std::uint32_t& reg(WaveContext& w, std::uint32_t index, std::uint32_t lane) { return w.regs[index * W_ + lane]; }

  std::uint32_t read_raw(WaveContext& w, RegRef r, std::uint32_t lane) {
    const std::uint32_t v = reg(w, r.index, lane);
    switch (r.part) {
      case RegPart::full32: return v;
      case RegPart::low16: return v & 0xffffu;
      case RegPart::high16: return v >> 16;
    }
    return v;
  }

  void write_raw(WaveContext& w, RegRef r, std::uint32_t lane, std::uint32_t v) {
    std::uint32_t& cell = reg(w, r.index, lane);
    switch (r.part) {
      case RegPart::full32: cell = v; break;
      case RegPart::low16: cell = (cell & 0xffff0000u) | (v & 0xffffu); break;
      case RegPart::high16: cell = (cell & 0xffffu) | (v << 16); break;
    }
  }

  std::uint32_t read_operand(WaveContext& w, const Operand& op, std::uint32_t lane) {
    if (const auto* r = std::get_if<RegRef>(&op)) return read_raw(w, *r, lane);
    return std::get<Imm>(op).bits;
  }

  std::uint32_t read_int(WaveContext& w, const Operand& op, ScalarType t, std::uint32_t lane) {
    std::uint32_t v = read_operand(w, op, lane);
    if (const auto* r = std::get_if<RegRef>(&op); r && r->part != RegPart::full32 && t == ScalarType::I32)
      v = static_cast<std::uint32_t>(static_cast<std::int32_t>(static_cast<std::int16_t>(v)));
    return v;
  }

  double read_float(WaveContext& w, const Operand& op, ScalarType t, std::uint32_t lane) {
    switch (t) {
      case ScalarType::F64: {
        const auto& r = std::get<RegRef>(op);
        const std::uint64_t lo = reg(w, r.index, lane);
        const std::uint64_t hi = reg(w, r.index + 1, lane);
        return std::bit_cast<double>(lo | (hi << 32));
      }
      case ScalarType::F16: return half_to_float(static_cast<std::uint16_t>(read_operand(w, op, lane)));
      case ScalarType::BF16: return bf16_to_float(static_cast<std::uint16_t>(read_operand(w, op, lane)));
      default: return f32(read_operand(w, op, lane));
    }
  }

  void write_float(WaveContext& w, RegRef dst, ScalarType t, std::uint32_t lane, double v) {
    switch (t) {
      case ScalarType::F64: {
        const auto b = std::bit_cast<std::uint64_t>(v);
        reg(w, dst.index, lane) = static_cast<std::uint32_t>(b);
        reg(w, dst.index + 1, lane) = static_cast<std::uint32_t>(b >> 32);
        break;
      }
      case ScalarType::F16: write_raw(w, dst, lane, float_to_half(static_cast<float>(v))); break;
      case ScalarType::BF16: write_raw(w, dst, lane, float_to_bf16(static_cast<float>(v))); break;
      default: write_raw(w, dst, lane, bits(static_cast<float>(v))); break;
    }
  }

  // -- memory --------------------------------------------------------------
  std::uint32_t effective(WaveContext& w, const Address& a, std::uint32_t lane) {
    const std::uint32_t base = a.base ? read_raw(w, *a.base, lane) : 0;
    return base + static_cast<std::uint32_t>(a.offset);
  }

  void check_access(Workgroup& g, MemSpace space, std::uint32_t addr, unsigned bytes) {
    if (addr % bytes != 0)
      throw TrapError(TrapKind::misaligned_access,
                      fmt::format("{} address 0x{:x} not aligned to {} bytes", to_string(space), addr, bytes));
    switch (space) {
      case MemSpace::scratch:
        if (std::uint64_t{addr} + bytes > g.scratch.size())
          throw TrapError(TrapKind::scratch_out_of_bounds,
                          fmt::format("scratch address 0x{:x} (+{}) outside [0, {})", addr, bytes, g.scratch.size()));
        break;
      case MemSpace::device:
        if (!device_.in_bounds(addr, bytes))
          throw TrapError(TrapKind::device_out_of_bounds,
                          fmt::format("device address 0x{:x} (+{}) outside [0, 0x{:x})", addr, bytes, device_.size()));
        break;
      case MemSpace::arg:
        if (std::uint64_t{addr} + bytes > cfg_.args.size() * 4)
          throw TrapError(TrapKind::arg_out_of_bounds,
                          fmt::format("argument address {} (+{}) outside [0, {})", addr, bytes, cfg_.args.size() * 4));
        break;
    }
  }

  std::uint32_t mem_load(Workgroup& g, MemSpace space, std::uint32_t addr, unsigned bytes) {
    switch (space) {
      case MemSpace::scratch: {
        std::uint32_t v = 0;
        for (unsigned i = 0; i < bytes; ++i) v |= std::uint32_t{g.scratch[addr + i]} << (8 * i);
        stats_.scratch_bytes += bytes;
        return v;
      }
      case MemSpace::device: stats_.device_bytes += bytes; return device_.load(addr, bytes);
      case MemSpace::arg: {
        const std::uint32_t word = cfg_.args[addr / 4];
        const std::uint32_t shifted = word >> (8 * (addr % 4));
        return bytes == 4 ? shifted : shifted & ((1u << (8 * bytes)) - 1);
      }
    }
    return 0;
  }

  void mem_store(Workgroup& g, MemSpace space, std::uint32_t addr, std::uint32_t v, unsigned bytes) {
    if (space == MemSpace::scratch) {
      for (unsigned i = 0; i < bytes; ++i) g.scratch[addr + i] = static_cast<std::uint8_t>(v >> (8 * i));
      stats_.scratch_bytes += bytes;
    } else {
      device_.store(addr, v, bytes);
      stats_.device_bytes += bytes;
    }
  }

  AccessSite site(const Workgroup& g, const WaveContext& w, std::uint32_t lane, bool write, bool atomic) const {
    return {g.linear, w.id, p_.functions[w.function].name, w.pc, lane, write, atomic};
  }

  void race_access(Workgroup& g, WaveContext& w, MemSpace space, std::uint32_t addr, std::uint32_t lane, bool write,
                   bool atomic) {
    if (!races_) return;
    races_->access(space, g.linear, addr / 4, g.agents[w.id], site(g, w, lane, write, atomic));
  }

  void charge_banks(std::span<const std::uint32_t> addrs, LaneMask mask) {
    stats_.bank_conflict_extra_cycles += count_bank_conflicts(addrs, mask, m_.bank_count, m_.bank_width);
  }

  // -- instructions --------------------------------------------------------
  void exec(Workgroup& g, std::size_t wi);
  void exec_arith(WaveContext& w, const Arith& i);
  void exec_cvt(WaveContext& w, const Cvt& i);
  void exec_cmp(WaveContext& w, const Cmp& i);
  void exec_ld(Workgroup& g, WaveContext& w, const Ld& i);
  void exec_st(Workgroup& g, WaveContext& w, const St& i);
  void exec_atomic(Workgroup& g, WaveContext& w, const Atomic& i);
  void exec_shfl(WaveContext& w, const Shfl& i);
  void exec_mma(WaveContext& w, const Mma& i);
  void exec_async(Workgroup& g, WaveContext& w, const AsyncCopy& i);
  void complete_async(Workgroup& g, WaveContext& w, std::uint32_t keep);
  std::uint32_t special(const Workgroup& g, const WaveContext& w, Special s, std::uint32_t lane) const;
  void control(Workgroup& g, WaveContext& w, const Instruction& inst);
  void on_halted(Workgroup& g, WaveContext& w);
  void barrier_released(Workgroup& g);

  void admit(std::uint32_t linear);

  const Program& p_;
  const LaunchConfig& cfg_;
  const MachineDescriptor& m_;
  const std::uint32_t W_;
  DeviceMemory device_;
  SplitMix64 rng_;
  ExecStats stats_;
  std::vector<TraceRecord> trace_;
  std::unordered_map<std::string, std::uint32_t> index_;
  std::vector<BlockTable> blocks_;
  std::vector<std::uint32_t> flat_offset_;
  std::vector<std::vector<std::uint32_t>> call_target_;
  ControlContext ctl_;
  std::optional<detail::RaceDetector> races_;
  std::uint32_t entry_ = 0;
  std::uint32_t threads_ = 0;
  std::uint32_t waves_per_wg_ = 0;
  std::vector<Workgroup> resident_;
};

void Engine::exec_arith(WaveContext& w, const Arith& i) {
  const LaneMask A = w.active;
  if (i.op == ArithOp::mov) {
    if (i.type == ScalarType::F64) {
      const auto& src = i.srcs[0];
      for_lanes(A, [&](std::uint32_t l) { write_float(w, i.dst, i.type, l, read_float(w, src, i.type, l)); });
    } else {
      // Gather first: dst may alias the source.
      std::array<std::uint32_t, 64> v{};
      for_lanes(A, [&](std::uint32_t l) { v[l] = read_int(w, i.srcs[0], i.type, l); });
      for_lanes(A, [&](std::uint32_t l) { write_raw(w, i.dst, l, v[l]); });
    }
    return;
  }
  const auto n = i.srcs.size();
  if (is_integer(i.type)) {
    const bool s = i.type == ScalarType::I32;
    std::array<std::uint32_t, 64> out{};
    for_lanes(A, [&](std::uint32_t l) {
      const std::uint32_t a = read_int(w, i.srcs[0], i.type, l);
      const std::uint32_t b = n > 1 ? read_int(w, i.srcs[1], i.type, l) : 0;
      const std::uint32_t c = n > 2 ? read_int(w, i.srcs[2], i.type, l) : 0;
      const auto sa = static_cast<std::int32_t>(a);
      const auto sb = static_cast<std::int32_t>(b);
      std::uint32_t r = 0;
      switch (i.op) {
        case ArithOp::add: r = a + b; break;
        case ArithOp::sub: r = a - b; break;
        case ArithOp::mul: r = a * b; break;
        case ArithOp::div:
          if (b == 0) throw TrapError(TrapKind::divide_by_zero, fmt::format("lane {} divides by zero", l));
          if (s) r = (sa == std::numeric_limits<std::int32_t>::min() && sb == -1) ? a : static_cast<std::uint32_t>(sa / sb);
          else r = a / b;
          break;
        case ArithOp::min: r = s ? static_cast<std::uint32_t>(std::min(sa, sb)) : std::min(a, b); break;
        case ArithOp::max: r = s ? static_cast<std::uint32_t>(std::max(sa, sb)) : std::max(a, b); break;
        case ArithOp::fma: r = a * b + c; break;
        case ArithOp::and_: r = a & b; break;
        case ArithOp::or_: r = a | b; break;
        case ArithOp::xor_: r = a ^ b; break;
        case ArithOp::shl: r = a << (b & 31u); break;
        case ArithOp::shr: r = s ? static_cast<std::uint32_t>(sa >> (b & 31u)) : a >> (b & 31u); break;
        case ArithOp::not_: r = ~a; break;
        case ArithOp::neg: r = 0u - a; break;
        case ArithOp::mov: r = a; break;
      }
      out[l] = r;
    });
    for_lanes(A, [&](std::uint32_t l) { write_raw(w, i.dst, l, out[l]); });
    return;
  }

  std::array<double, 64> out{};
  const bool wide = i.type == ScalarType::F64;
  for_lanes(A, [&](std::uint32_t l) {
    const double a = read_float(w, i.srcs[0], i.type, l);
    const double b = n > 1 ? read_float(w, i.srcs[1], i.type, l) : 0;
    const double c = n > 2 ? read_float(w, i.srcs[2], i.type, l) : 0;
    double r = 0;
    switch (i.op) {
      case ArithOp::add: r = a + b; break;
      case ArithOp::sub: r = a - b; break;
      case ArithOp::mul: r = a * b; break;
      case ArithOp::div: r = a / b; break;
      case ArithOp::min: r = std::fmin(a, b); break;
      case ArithOp::max: r = std::fmax(a, b); break;
      case ArithOp::fma:
        r = wide ? std::fma(a, b, c)
                 : static_cast<double>(std::fmaf(static_cast<float>(a), static_cast<float>(b), static_cast<float>(c)));
        break;
      case ArithOp::neg: r = -a; break;
      default: r = a; break;
    }
    out[l] = r;
  });
  for_lanes(A, [&](std::uint32_t l) { write_float(w, i.dst, i.type, l, out[l]); });
}

void Engine::exec_cvt(WaveContext& w, const Cvt& i) {
  std::array<std::uint32_t, 64> lo{};
  std::array<double, 64> fv{};
  for_lanes(w.active, [&](std::uint32_t l) {
    if (is_integer(i.from)) {
      const std::uint32_t v = read_int(w, i.src, i.from, l);
      if (is_integer(i.to)) lo[l] = v;
      else fv[l] = i.from == ScalarType::I32 ? static_cast<double>(static_cast<std::int32_t>(v)) : static_cast<double>(v);
    } else {
      const double v = read_float(w, i.src, i.from, l);
      if (i.to == ScalarType::I32)
        lo[l] = static_cast<std::uint32_t>(static_cast<std::int32_t>(saturate_to(v, -2147483648.0, 2147483647.0)));
      else if (i.to == ScalarType::U32)
        lo[l] = static_cast<std::uint32_t>(saturate_to(v, 0.0, 4294967295.0));
      else fv[l] = v;
    }
  });
  for_lanes(w.active, [&](std::uint32_t l) {
    if (is_integer(i.to)) {
      write_raw(w, i.dst, l, lo[l]);
    } else {
      write_float(w, i.dst, i.to, l, fv[l]);
    }
  });
}

void Engine::exec_cmp(WaveContext& w, const Cmp& i) {
  std::array<std::uint32_t, 64> out{};
  auto rel = [&](auto a, auto b) {
    switch (i.rel) {
      case CmpRel::eq: return a == b;
      case CmpRel::ne: return a != b;
      case CmpRel::lt: return a < b;
      case CmpRel::le: return a <= b;
      case CmpRel::gt: return a > b;
      case CmpRel::ge: return a >= b;
    }
    return false;
  };
  for_lanes(w.active, [&](std::uint32_t l) {
    bool r;
    if (i.type == ScalarType::I32)
      r = rel(static_cast<std::int32_t>(read_int(w, i.a, i.type, l)), static_cast<std::int32_t>(read_int(w, i.b, i.type, l)));
    else if (i.type == ScalarType::U32)
      r = rel(read_int(w, i.a, i.type, l), read_int(w, i.b, i.type, l));
    else
      r = rel(read_float(w, i.a, i.type, l), read_float(w, i.b, i.type, l));
    out[l] = r ? 1u : 0u;
  });
  for_lanes(w.active, [&](std::uint32_t l) { write_raw(w, i.dst, l, out[l]); });
}

void Engine::exec_ld(Workgroup& g, WaveContext& w, const Ld& i) {
  const unsigned bytes = i.width / 8u;
  std::array<std::uint32_t, 64> addr{};
  std::array<std::uint32_t, 64> val{};
  for_lanes(w.active, [&](std::uint32_t l) {
    addr[l] = effective(w, i.addr, l);
    check_access(g, i.space, addr[l], bytes);
  });
  if (i.space == MemSpace::scratch) charge_banks(std::span(addr.data(), W_), w.active);
  for_lanes(w.active, [&](std::uint32_t l) {
    val[l] = mem_load(g, i.space, addr[l], bytes);
    race_access(g, w, i.space, addr[l], l, false, false);
  });
  for_lanes(w.active, [&](std::uint32_t l) { write_raw(w, i.dst, l, val[l]); });
}

void Engine::exec_st(Workgroup& g, WaveContext& w, const St& i) {
  const unsigned bytes = i.width / 8u;
  std::array<std::uint32_t, 64> addr{};
  for_lanes(w.active, [&](std::uint32_t l) {
    addr[l] = effective(w, i.addr, l);
    check_access(g, i.space, addr[l], bytes);
  });
  if (i.space == MemSpace::scratch) charge_banks(std::span(addr.data(), W_), w.active);
  for_lanes(w.active, [&](std::uint32_t l) {
    race_access(g, w, i.space, addr[l], l, true, false);
    mem_store(g, i.space, addr[l], read_raw(w, i.src, l), bytes);
  });
}

void Engine::exec_atomic(Workgroup& g, WaveContext& w, const Atomic& i) {
  std::array<std::uint32_t, 64> addr{};
  std::array<std::uint32_t, 64> operand{};
  std::array<std::uint32_t, 64> compare{};
  std::array<std::uint32_t, 64> old{};
  for_lanes(w.active, [&](std::uint32_t l) {
    addr[l] = effective(w, i.addr, l);
    check_access(g, i.space, addr[l], 4);
    operand[l] = read_int(w, i.value, i.type, l);
    if (i.compare) compare[l] = read_int(w, *i.compare, i.type, l);
  });
  if (i.space == MemSpace::scratch) charge_banks(std::span(addr.data(), W_), w.active);
  std::array<std::uint32_t, 64> distinct{};
  std::size_t n_distinct = 0;
  std::uint32_t lanes = 0;
  for_lanes(w.active, [&](std::uint32_t l) {
    ++lanes;
    if (std::find(distinct.begin(), distinct.begin() + static_cast<std::ptrdiff_t>(n_distinct), addr[l]) ==
        distinct.begin() + static_cast<std::ptrdiff_t>(n_distinct))
      distinct[n_distinct++] = addr[l];
    race_access(g, w, i.space, addr[l], l, true, true);
    if (races_) races_->atomic_sync(i.space, g.linear, addr[l] / 4, g.agents[w.id]);
    const std::uint32_t cell = mem_load(g, i.space, addr[l], 4);
    const auto out = eval_atomic(i.op, i.type, cell, operand[l], compare[l]);
    mem_store(g, i.space, addr[l], out.new_value, 4);
    old[l] = out.old_value;
  });
  stats_.atomic_serializations += lanes - n_distinct;
  for_lanes(w.active, [&](std::uint32_t l) { write_raw(w, i.dst, l, old[l]); });
}

void Engine::exec_shfl(WaveContext& w, const Shfl& i) {
  std::array<std::uint32_t, 64> src{};
  std::array<std::uint32_t, 64> out{};
  for (std::uint32_t l = 0; l < W_; ++l) src[l] = read_raw(w, i.src, l);
  for_lanes(w.active, [&](std::uint32_t l) {
    const std::uint32_t operand = read_operand(w, i.lane, l) % W_;
    out[l] = src[shuffle_source(i.mode, l, operand, W_)];
  });
  for_lanes(w.active, [&](std::uint32_t l) { write_raw(w, i.dst, l, out[l]); });
  ++stats_.shuffle_steps;
}

void Engine::exec_mma(WaveContext& w, const Mma& i) {
  if (w.active != w.live())
    throw TrapError(TrapKind::divergent_mma,
                    fmt::format("active mask {:x} differs from live mask {:x}", w.active, w.live()));
  const auto [M, N, K] = i.tile;
  auto element = [&](RegRef base, std::uint32_t e) -> std::uint32_t& { return reg(w, base.index + e / W_, e % W_); };
  std::vector<float> a(M * K), b(K * N), c(M * N);
  for (std::uint32_t e = 0; e < M * K; ++e) a[e] = f32(element(i.a, e));
  for (std::uint32_t e = 0; e < K * N; ++e) b[e] = f32(element(i.b, e));
  for (std::uint32_t e = 0; e < M * N; ++e) c[e] = f32(element(i.c, e));
  for (std::uint32_t r = 0; r < M; ++r)
    for (std::uint32_t col = 0; col < N; ++col) {
      float acc = c[r * N + col];
      for (std::uint32_t k = 0; k < K; ++k) acc = std::fmaf(a[r * K + k], b[k * N + col], acc);
      element(i.d, r * N + col) = bits(acc);
    }
}

void Engine::exec_async(Workgroup& g, WaveContext& w, const AsyncCopy& i) {
  AsyncGroup group;
  group.bytes = i.bytes;
  group.function = w.function;
  group.pc = w.pc;
  for_lanes(w.active, [&](std::uint32_t l) {
    const std::uint32_t s = read_raw(w, i.dst_scratch, l);
    const std::uint32_t d = read_raw(w, i.src_device, l);
    if (s % 4 != 0 || d % 4 != 0)
      throw TrapError(TrapKind::misaligned_access, "async copy addresses must be 4-byte aligned");
    if (std::uint64_t{s} + i.bytes > g.scratch.size())
      throw TrapError(TrapKind::scratch_out_of_bounds,
                      fmt::format("async copy to scratch 0x{:x} (+{}) outside [0, {})", s, i.bytes, g.scratch.size()));
    if (!device_.in_bounds(d, i.bytes))
      throw TrapError(TrapKind::device_out_of_bounds,
                      fmt::format("async copy from device 0x{:x} (+{}) out of bounds", d, i.bytes));
    group.items.push_back({s, d, l});
    if (races_) races_->async_issue(g.linear, g.agents[w.id], s, s + i.bytes, site(g, w, l, true, false));
  });
  g.async[w.id].push_back(std::move(group));
  ++w.async_outstanding;
}

void Engine::complete_async(Workgroup& g, WaveContext& w, std::uint32_t keep) {
  auto& queue = g.async[w.id];
  while (w.async_outstanding > keep && !queue.empty()) {
    AsyncGroup group = std::move(queue.front());
    queue.pop_front();
    --w.async_outstanding;
    for (const auto& item : group.items) {
      AccessSite s{g.linear, w.id, p_.functions[group.function].name, group.pc, item.lane, false, false};
      if (races_) races_->async_complete(g.linear, g.agents[w.id], item.scratch, item.scratch + group.bytes);
      for (std::uint32_t off = 0; off < group.bytes; off += 4) {
        const std::uint32_t v = device_.load(item.device + off, 4);
        std::memcpy(g.scratch.data() + item.scratch + off, &v, 4);
        if (races_) {
          s.write = false;
          races_->access(MemSpace::device, g.linear, (item.device + off) / 4, g.agents[w.id], s);
          s.write = true;
          races_->access(MemSpace::scratch, g.linear, (item.scratch + off) / 4, g.agents[w.id], s);
        }
      }
      stats_.device_bytes += group.bytes;
      stats_.scratch_bytes += group.bytes;
    }
  }
}

std::uint32_t Engine::special(const Workgroup& g, const WaveContext& w, Special s, std::uint32_t lane) const {
  const auto& wg = cfg_.workgroup;
  const std::uint32_t t = w.id * W_ + lane;
  switch (s) {
    case Special::lane_id: return lane;
    case Special::wave_id: return w.id;
    case Special::tid_x: return t % wg.x;
    case Special::tid_y: return (t / wg.x) % wg.y;
    case Special::tid_z: return t / (wg.x * wg.y);
    case Special::wgid_x: return g.gx;
    case Special::wgid_y: return g.gy;
    case Special::wgid_z: return g.gz;
    case Special::wgdim_x: return wg.x;
    case Special::wgdim_y: return wg.y;
    case Special::wgdim_z: return wg.z;
    case Special::griddim_x: return cfg_.grid.x;
    case Special::griddim_y: return cfg_.grid.y;
    case Special::griddim_z: return cfg_.grid.z;
    case Special::wave_width: return W_;
  }
  return 0;
}

void Engine::control(Workgroup& g, WaveContext& w, const Instruction& inst) {
  LaneMask cond = 0;
  ControlKind kind = ControlKind::if_;
  if (const auto* i = std::get_if<If>(&inst)) {
    for_lanes(w.active, [&](std::uint32_t l) {
      if (read_raw(w, i->cond, l) != 0) cond |= LaneMask{1} << l;
    });
  } else if (const auto* b = std::get_if<Break>(&inst)) {
    kind = ControlKind::break_;
    if (b->cond) {
      for_lanes(w.active, [&](std::uint32_t l) {
        if (read_raw(w, *b->cond, l) != 0) cond |= LaneMask{1} << l;
      });
    } else {
      cond = w.active;
    }
  } else if (std::holds_alternative<Else>(inst)) {
    kind = ControlKind::else_;
  } else if (std::holds_alternative<EndIf>(inst)) {
    kind = ControlKind::endif;
  } else if (std::holds_alternative<Loop>(inst)) {
    kind = ControlKind::loop;
  } else {
    kind = ControlKind::endloop;
  }
  const LaneMask before = w.active;
  const std::uint32_t fn = w.function;
  const std::uint32_t pc = w.pc;
  apply_control(w, inst, cond, ctl_);
  if (cfg_.control_observer) cfg_.control_observer({kind, g.linear, w.id, fn, pc, before, w.active, cond});
  if (w.status == WaveStatus::halted) on_halted(g, w);
}

void Engine::barrier_released(Workgroup& g) {
  ++stats_.barrier_rounds;
  if (!races_) return;
  std::vector<std::uint32_t> agents;
  for (const auto& w : g.waves)
    if (w.status != WaveStatus::halted) agents.push_back(g.agents[w.id]);
  races_->barrier(agents);
}

void Engine::on_halted(Workgroup& g, WaveContext& w) {
  complete_async(g, w, 0);
  if (try_release_barrier(g.waves).released) barrier_released(g);
}

void Engine::exec(Workgroup& g, std::size_t wi) {
  WaveContext& w = g.waves[wi];
  const Instruction& inst = p_.functions[w.function].body[w.pc];
  const std::uint32_t flat = flat_offset_[w.function] + w.pc;

  const std::uint32_t global_wave = g.linear * waves_per_wg_ + w.id;
  {
    // Continue the running digest over (wave id, pc).
    std::uint64_t state = stats_.trace_hash;
    const std::uint32_t words[2] = {global_wave, flat};
    for (std::uint32_t v : words)
      for (int b = 0; b < 4; ++b) {
        state ^= (v >> (8 * b)) & 0xffu;
        state *= 0x100000001b3ull;
      }
    stats_.trace_hash = state;
  }
  ++stats_.dynamic_instructions[static_cast<std::size_t>(classify(inst))];
  if (cfg_.trace) trace_.push_back({stats_.scheduler_steps, g.linear, w.id, flat, mnemonic(inst), w.active});

  std::visit(
      [&](const auto& i) {
        using T = std::decay_t<decltype(i)>;
        if constexpr (std::is_same_v<T, Arith>) {
          exec_arith(w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Cvt>) {
          exec_cvt(w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Cmp>) {
          exec_cmp(w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Ld>) {
          exec_ld(g, w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, St>) {
          exec_st(g, w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Atomic>) {
          exec_atomic(g, w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Shfl>) {
          exec_shfl(w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Bar>) {
          const auto out = barrier_rendezvous(g.waves, wi, i.id, m_.named_barriers);
          ++w.pc;
          if (out.released) barrier_released(g);
        } else if constexpr (std::is_same_v<T, Fence>) {
          if (races_) races_->fence(g.agents[w.id], i.order, i.scope);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, AsyncCopy>) {
          exec_async(g, w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, WaitAsync>) {
          complete_async(g, w, i.max_outstanding);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, ReadSpecial>) {
          for_lanes(w.active, [&](std::uint32_t l) { write_raw(w, i.dst, l, special(g, w, i.which, l)); });
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Call>) {
          if (w.call_stack.size() >= cfg_.max_call_depth)
            throw TrapError(TrapKind::call_stack_overflow,
                            fmt::format("call depth exceeds {}", cfg_.max_call_depth));
          w.call_stack.push_back({w.function, w.pc + 1});
          w.function = call_target_[w.function][w.pc];
          w.pc = 0;
        } else if constexpr (std::is_same_v<T, Ret>) {
          if (w.call_stack.empty()) throw TrapError(TrapKind::control_stack_underflow, "ret with empty call stack");
          const CallFrame f = w.call_stack.back();
          w.call_stack.pop_back();
          w.function = f.function;
          w.pc = f.return_pc;
        } else if constexpr (std::is_same_v<T, Mma>) {
          exec_mma(w, i);
          ++w.pc;
        } else if constexpr (std::is_same_v<T, Halt>) {
          w.exited |= w.active;
          for (auto& e : w.divergence_stack) {
            e.saved &= ~w.exited;
            e.else_mask &= ~w.exited;
          }
          w.active = 0;
          settle_empty_mask(w, ctl_);
          if (w.status == WaveStatus::halted) on_halted(g, w);
        } else {
          control(g, w, inst);
        }
      },
      inst);
}

void Engine::admit(std::uint32_t linear) {
  Workgroup g;
  g.linear = linear;
  g.gx = linear % cfg_.grid.x;
  g.gy = (linear / cfg_.grid.x) % cfg_.grid.y;
  g.gz = linear / (cfg_.grid.x * cfg_.grid.y);
  g.scratch.assign(p_.scratch_used, 0);
  g.async.resize(waves_per_wg_);
  for (std::uint32_t i = 0; i < waves_per_wg_; ++i) {
    WaveContext w;
    w.id = i;
    w.function = entry_;
    w.launch_mask = lanes_below(std::min(W_, threads_ - i * W_));
    w.active = w.launch_mask;
    w.regs.assign(std::size_t{p_.regs_used} * W_, 0);
    g.waves.push_back(std::move(w));
    if (races_) g.agents.push_back(races_->add_agent(linear));
  }
  resident_.push_back(std::move(g));
}

ExecResult Engine::run() {
  ExecResult result;
  auto finish = [&]() {
    result.device = std::move(device_);
    result.stats = stats_;
    result.trace = std::move(trace_);
    if (races_) result.races = races_->take_reports();
    return std::move(result);
  };
  auto launch_trap = [&](TrapKind k, std::string msg) {
    result.trap = Trap{k, 0, 0, p_.entry, 0, std::move(msg)};
    return finish();
  };

  entry_ = index_.at(p_.entry);
  threads_ = static_cast<std::uint32_t>(cfg_.workgroup.count());
  const std::uint64_t groups = cfg_.grid.count();
  if (threads_ == 0 || cfg_.workgroup.count() > m_.max_workgroup)
    return launch_trap(TrapKind::invalid_launch,
                       fmt::format("workgroup size {} outside [1, {}]", cfg_.workgroup.count(), m_.max_workgroup));
  if (groups == 0 || groups > 0xffffffffull)
    return launch_trap(TrapKind::invalid_launch, "grid must hold between 1 and 2^32-1 workgroups");
  waves_per_wg_ = (threads_ + W_ - 1) / W_;
  const auto occ = occupancy(m_, p_.regs_used, p_.scratch_used, threads_);
  if (occ.resident_waves < waves_per_wg_)
    return launch_trap(TrapKind::occupancy,
                       fmt::format("workgroup needs {} resident waves but occupancy allows {} ({}-limited)",
                                   waves_per_wg_, occ.resident_waves, to_string(occ.limiting)));
  const std::uint64_t capacity =
      cfg_.interleave_workgroups ? std::min<std::uint64_t>(occ.resident_waves / waves_per_wg_, groups) : 1;
  if (cfg_.check_races) races_.emplace();

  std::uint64_t next_group = 0;
  std::size_t cursor = 0;
  std::uint32_t quantum = 0;
  std::uint32_t trap_wg = 0, trap_wave = 0;
  try {
    while (true) {
      while (resident_.size() < capacity && next_group < groups) admit(static_cast<std::uint32_t>(next_group++));
      if (resident_.empty()) break;
      stats_.peak_resident_waves =
          std::max<std::uint64_t>(stats_.peak_resident_waves, resident_.size() * std::uint64_t{waves_per_wg_});

      const std::size_t slots = resident_.size() * waves_per_wg_;
      auto ready = [&](std::size_t s) {
        return resident_[s / waves_per_wg_].waves[s % waves_per_wg_].status == WaveStatus::ready;
      };
      cursor %= slots;
      if (quantum == 0 || !ready(cursor)) {
        std::size_t probe = cursor;
        bool found = false;
        for (std::size_t n = 0; n < slots; ++n) {
          probe = (probe + 1) % slots;
          if (ready(probe)) {
            found = true;
            break;
          }
        }
        if (!found) {
          for (const auto& g : resident_)
            if (!g.done()) {
              trap_wg = g.linear;
              throw TrapError(TrapKind::deadlock, "every remaining wave is blocked at a barrier");
            }
        }
        cursor = probe;
        quantum = 1 + static_cast<std::uint32_t>(rng_.below(4));
      }
      Workgroup& g = resident_[cursor / waves_per_wg_];
      const std::size_t wi = cursor % waves_per_wg_;
      trap_wg = g.linear;
      trap_wave = static_cast<std::uint32_t>(wi);
      if (++stats_.scheduler_steps > cfg_.max_steps) {
        --stats_.scheduler_steps;
        throw TrapError(TrapKind::step_limit, fmt::format("more than {} scheduler steps", cfg_.max_steps));
      }
      exec(g, wi);
      --quantum;
      if (g.done()) {
        ++stats_.workgroups_completed;
        if (races_) races_->retire_workgroup(g.linear);
        resident_.erase(resident_.begin() + static_cast<std::ptrdiff_t>(cursor / waves_per_wg_));
        quantum = 0;
        cursor = resident_.empty() ? 0 : (cursor / waves_per_wg_) * waves_per_wg_;
        if (cursor > 0) --cursor;  // the probe starts after the cursor
      }
    }
  } catch (const TrapError& e) {
    Trap t;
    t.kind = e.kind();
    t.workgroup = trap_wg;
    t.wave = trap_wave;
    t.message = e.what();
    for (const auto& g : resident_)
      if (g.linear == trap_wg && trap_wave < g.waves.size()) {
        const auto& w = g.waves[trap_wave];
        t.function = p_.functions[w.function].name;
        t.pc = w.pc;
      }
    result.trap = std::move(t);
  }
  return finish();
}

}  // namespace

ExecResult launch(const Program& p, const LaunchConfig& cfg) {
  auto report = validate_program(p, cfg.machine);
  if (!report.ok()) throw ValidationError(std::move(report));
  Engine engine(p, cfg);
  return engine.run();
}

}  // namespace uvgpu
