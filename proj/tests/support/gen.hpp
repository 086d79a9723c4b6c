#pragma once

// Test-side generators and reference models. Nothing here calls into the
// library's semantics; the VM is checked against these, not the reverse.

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvgpu/isa.hpp"
#include "uvgpu/machcfg.hpp"
#include "uvgpu/vm.hpp"

namespace testgen {

using Rng = std::mt19937_64;

inline std::uint32_t pick(Rng& rng, std::uint32_t n) {
  return static_cast<std::uint32_t>(std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng));
}

inline bool chance(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

/// A preset-shaped machine with an arbitrary wave width.
inline uvgpu::MachineDescriptor custom_machine(std::uint32_t wave_width) {
  auto m = uvgpu::preset("nvidia");
  m.name = "custom-w" + std::to_string(wave_width);
  m.wave_width = wave_width;
  m.bank_count = wave_width;
  return m;
}

// ---------------------------------------------------------------------------
// Syntactic program generator (round-trip and fuzzing)

class ProgramGen {
 public:
  explicit ProgramGen(std::uint64_t seed) : rng_(seed) {}

  uvgpu::Program program() {
    using namespace uvgpu;
    Program p;
    const std::uint32_t funcs = pick(rng_, 4);
    const std::uint32_t kernel_at = pick(rng_, funcs + 1);
    for (std::uint32_t i = 0; i <= funcs; ++i) {
      const bool kernel = i == kernel_at;
      names_.push_back(kernel ? "main_" + std::to_string(pick(rng_, 1000)) : "fn" + std::to_string(i));
    }
    for (std::uint32_t i = 0; i <= funcs; ++i) {
      Function f;
      f.name = names_[i];
      f.is_kernel = i == kernel_at;
      block(f.body, 0, false);
      f.body.push_back(f.is_kernel ? Instruction{Halt{}} : Instruction{Ret{}});
      p.functions.push_back(std::move(f));
    }
    p.entry = names_[kernel_at];
    p.regs_used = 1 + pick(rng_, 512);
    p.scratch_used = chance(rng_, 0.5) ? 0 : static_cast<std::uint32_t>(rng_());
    names_.clear();
    return p;
  }

 private:
  Rng rng_;
  std::vector<std::string> names_;

  uvgpu::RegRef reg() {
    uvgpu::RegRef r;
    r.index = static_cast<std::uint16_t>(chance(rng_, 0.9) ? pick(rng_, 32) : pick(rng_, 65536));
    const auto part = pick(rng_, 6);
    r.part = part == 0 ? uvgpu::RegPart::low16 : part == 1 ? uvgpu::RegPart::high16 : uvgpu::RegPart::full32;
    return r;
  }

  std::uint32_t imm_bits() {
    switch (pick(rng_, 4)) {
      case 0: return pick(rng_, 16);
      case 1: return static_cast<std::uint32_t>(-static_cast<std::int32_t>(pick(rng_, 100000)));
      default: return static_cast<std::uint32_t>(rng_());
    }
  }

  uvgpu::Operand operand() {
    if (chance(rng_, 0.5)) return reg();
    return uvgpu::Imm{imm_bits()};
  }

  uvgpu::Address address() {
    uvgpu::Address a;
    if (chance(rng_, 0.8)) a.base = reg();
    a.offset = chance(rng_, 0.5) ? static_cast<std::int32_t>(pick(rng_, 256)) - 128
                                 : static_cast<std::int32_t>(static_cast<std::uint32_t>(rng_()));
    return a;
  }

  template <class E>
  E any(std::uint32_t count) {
    return static_cast<E>(pick(rng_, count));
  }

  std::uint8_t width() {
    const std::uint8_t w[] = {8, 16, 32};
    return w[pick(rng_, 3)];
  }

  uvgpu::Instruction plain() {
    using namespace uvgpu;
    switch (pick(rng_, 15)) {
      case 0: {
        Arith a;
        a.op = any<ArithOp>(15);
        a.type = any<ScalarType>(6);
        a.dst = reg();
        for (int i = 0; i < arity(a.op); ++i) a.srcs.push_back(operand());
        return a;
      }
      case 1: return Cvt{any<ScalarType>(6), any<ScalarType>(6), reg(), operand()};
      case 2: return Cmp{any<CmpRel>(6), any<ScalarType>(6), reg(), operand(), operand()};
      case 3: return Ld{any<MemSpace>(3), width(), reg(), address()};
      case 4: return St{any<MemSpace>(3), width(), reg(), address()};
      case 5: {
        Atomic a;
        a.op = any<AtomicOp>(9);
        a.type = chance(rng_, 0.5) ? ScalarType::I32 : ScalarType::U32;
        a.space = any<MemSpace>(3);
        a.dst = reg();
        a.addr = address();
        a.value = operand();
        if (a.op == AtomicOp::cmpxch) a.compare = operand();
        return a;
      }
      case 6: return Shfl{any<ShflMode>(4), reg(), reg(), operand()};
      case 7: return Bar{chance(rng_, 0.5) ? 0 : static_cast<std::uint32_t>(rng_())};
      case 8: return Fence{any<Scope>(4), any<MemOrder>(3)};
      case 9: return AsyncCopy{reg(), reg(), static_cast<std::uint32_t>(rng_())};
      case 10: return WaitAsync{pick(rng_, 8)};
      case 11: return ReadSpecial{reg(), any<Special>(15)};
      case 12: return Call{names_[pick(rng_, static_cast<std::uint32_t>(names_.size()))]};
      case 13: {
        Mma m;
        m.tile = {1 + pick(rng_, 64), 1 + pick(rng_, 64), 1 + pick(rng_, 64)};
        m.d = reg();
        m.a = reg();
        m.b = reg();
        m.c = reg();
        return m;
      }
      default: return Halt{};
    }
  }

  void block(std::vector<uvgpu::Instruction>& body, int depth, bool in_loop) {
    using namespace uvgpu;
    const std::uint32_t n = pick(rng_, depth == 0 ? 12 : 5);
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto kind = depth < 4 ? pick(rng_, 10) : 9;
      if (kind == 0) {
        body.push_back(If{reg()});
        block(body, depth + 1, in_loop);
        if (chance(rng_, 0.5)) {
          body.push_back(Else{});
          block(body, depth + 1, in_loop);
        }
        body.push_back(EndIf{});
      } else if (kind == 1) {
        body.push_back(Loop{});
        block(body, depth + 1, true);
        body.push_back(EndLoop{});
      } else if (kind == 2 && in_loop) {
        Break b;
        if (chance(rng_, 0.7)) b.cond = reg();
        body.push_back(b);
      } else {
        body.push_back(plain());
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Divergence programs and a per-lane scalar reference

/// Register roles in generated mask programs.
inline constexpr std::uint16_t kLaneReg = 0;
inline constexpr std::uint16_t kAccReg = 1;
inline constexpr std::uint16_t kCondReg = 2;
inline constexpr std::uint16_t kCounterBase = 3;  // one counter per loop depth
inline constexpr int kMaxLoopDepth = 4;

class MaskProgramGen {
 public:
  explicit MaskProgramGen(std::uint64_t seed) : rng_(seed) {}

  /// Each lane starts from its lane id, walks a random well-nested mix of
  /// if/else and counted loops with data-dependent breaks, and stores its
  /// accumulator to device word `linear thread id`.
  uvgpu::Program program() {
    using namespace uvgpu;
    Function f;
    f.name = "mask";
    f.is_kernel = true;
    f.body.push_back(ReadSpecial{r(kLaneReg), Special::lane_id});
    f.body.push_back(arith(ArithOp::mul, r(kAccReg), r(kLaneReg), Imm{2654435761u}));
    block(f.body, 0, 0, false);
    f.body.push_back(ReadSpecial{r(kCondReg), Special::tid_x});
    f.body.push_back(arith(ArithOp::shl, r(kCondReg), r(kCondReg), Imm{2}));
    f.body.push_back(St{MemSpace::device, 32, r(kAccReg), Address{r(kCondReg), 0}});
    f.body.push_back(Halt{});
    Program p;
    p.functions.push_back(std::move(f));
    p.entry = "mask";
    p.regs_used = kCounterBase + kMaxLoopDepth;
    return p;
  }

 private:
  Rng rng_;

  static uvgpu::RegRef r(std::uint16_t i) { return {i, uvgpu::RegPart::full32}; }

  static uvgpu::Arith arith(uvgpu::ArithOp op, uvgpu::RegRef dst, uvgpu::Operand a, uvgpu::Operand b) {
    return uvgpu::Arith{op, uvgpu::ScalarType::U32, dst, {a, b}};
  }

  void update(std::vector<uvgpu::Instruction>& body, int loop_depth) {
    using namespace uvgpu;
    switch (pick(rng_, loop_depth > 0 ? 5 : 4)) {
      case 0: body.push_back(arith(ArithOp::mul, r(kAccReg), r(kAccReg), Imm{31})); break;
      case 1: body.push_back(arith(ArithOp::add, r(kAccReg), r(kAccReg), Imm{1 + pick(rng_, 1000)})); break;
      case 2: body.push_back(arith(ArithOp::xor_, r(kAccReg), r(kAccReg), r(kLaneReg))); break;
      case 3: body.push_back(arith(ArithOp::shr, r(kAccReg), r(kAccReg), Imm{1 + pick(rng_, 3)})); break;
      default:
        body.push_back(arith(ArithOp::add, r(kAccReg), r(kAccReg),
                             r(static_cast<std::uint16_t>(kCounterBase + pick(rng_, loop_depth)))));
    }
  }

  /// Leaves a 0/1 lane predicate in the condition register.
  void condition(std::vector<uvgpu::Instruction>& body) {
    using namespace uvgpu;
    switch (pick(rng_, 5)) {
      case 0:
        body.push_back(Cmp{CmpRel::lt, ScalarType::U32, r(kCondReg), r(kLaneReg), Imm{pick(rng_, 66)}});
        break;
      case 1:
        body.push_back(arith(ArithOp::and_, r(kCondReg), r(kLaneReg), Imm{1u << pick(rng_, 6)}));
        body.push_back(Cmp{CmpRel::ne, ScalarType::U32, r(kCondReg), r(kCondReg), Imm{0}});
        break;
      case 2:
        body.push_back(arith(ArithOp::and_, r(kCondReg), r(kAccReg), Imm{1u << pick(rng_, 4)}));
        break;
      case 3:
        body.push_back(Arith{ArithOp::mov, ScalarType::U32, r(kCondReg), {Imm{pick(rng_, 2)}}});
        break;
      default:
        body.push_back(Cmp{CmpRel::gt, ScalarType::U32, r(kCondReg), r(kAccReg), Imm{static_cast<std::uint32_t>(rng_())}});
    }
  }

  void block(std::vector<uvgpu::Instruction>& body, int depth, int loop_depth, bool in_loop) {
    using namespace uvgpu;
    const std::uint32_t n = 1 + pick(rng_, 4);
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto kind = depth < 5 ? pick(rng_, 8) : 7;
      if (kind <= 1) {
        condition(body);
        body.push_back(If{r(kCondReg)});
        block(body, depth + 1, loop_depth, in_loop);
        if (chance(rng_, 0.5)) {
          body.push_back(Else{});
          block(body, depth + 1, loop_depth, in_loop);
        }
        body.push_back(EndIf{});
      } else if (kind == 2 && loop_depth < kMaxLoopDepth) {
        const auto counter = r(static_cast<std::uint16_t>(kCounterBase + loop_depth));
        body.push_back(Arith{ArithOp::mov, ScalarType::U32, counter, {Imm{0}}});
        body.push_back(Loop{});
        body.push_back(arith(ArithOp::add, counter, counter, Imm{1}));
        body.push_back(arith(ArithOp::and_, r(kCondReg), r(kLaneReg), Imm{3}));
        body.push_back(arith(ArithOp::add, r(kCondReg), r(kCondReg), Imm{pick(rng_, 3)}));
        body.push_back(Cmp{CmpRel::gt, ScalarType::U32, r(kCondReg), counter, r(kCondReg)});
        body.push_back(Break{r(kCondReg)});
        block(body, depth + 1, loop_depth + 1, true);
        body.push_back(EndLoop{});
      } else if (kind == 3 && in_loop) {
        if (chance(rng_, 0.2)) {
          body.push_back(Break{});
          return;  // anything after an unconditional break is dead
        }
        condition(body);
        body.push_back(Break{r(kCondReg)});
      } else {
        update(body, loop_depth);
      }
    }
  }
};

/// Executes one lane of a mask program on its own: plain scalar control
/// flow, no masks, no stack of saved masks.
class LaneReference {
 public:
  explicit LaneReference(const uvgpu::Function& f) : f_(f) {
    std::vector<std::size_t> open;
    std::vector<std::size_t> loops;
    partner_.assign(f.body.size(), 0);
    end_.assign(f.body.size(), 0);
    std::vector<std::vector<std::size_t>> breaks;
    for (std::size_t i = 0; i < f.body.size(); ++i) {
      const auto& inst = f.body[i];
      if (std::holds_alternative<uvgpu::If>(inst)) {
        open.push_back(i);
        partner_[i] = 0;
      } else if (std::holds_alternative<uvgpu::Else>(inst)) {
        partner_[open.back()] = i;
      } else if (std::holds_alternative<uvgpu::EndIf>(inst)) {
        const auto at = open.back();
        open.pop_back();
        end_[at] = i;
        if (partner_[at]) end_[partner_[at]] = i;
      } else if (std::holds_alternative<uvgpu::Loop>(inst)) {
        loops.push_back(i);
        breaks.emplace_back();
      } else if (std::holds_alternative<uvgpu::Break>(inst)) {
        breaks.back().push_back(i);
      } else if (std::holds_alternative<uvgpu::EndLoop>(inst)) {
        partner_[i] = loops.back();
        for (auto b : breaks.back()) end_[b] = i;
        loops.pop_back();
        breaks.pop_back();
      }
    }
  }

  /// Final accumulator of one lane. tid is the linear thread id.
  std::uint32_t run(std::uint32_t lane, std::uint32_t tid) const {
    using namespace uvgpu;
    std::uint32_t regs[kCounterBase + kMaxLoopDepth] = {};
    auto val = [&](const Operand& o) {
      if (const auto* i = std::get_if<Imm>(&o)) return i->bits;
      return regs[std::get<RegRef>(o).index];
    };
    std::size_t pc = 0;
    while (true) {
      const auto& inst = f_.body[pc];
      if (const auto* a = std::get_if<Arith>(&inst)) {
        const std::uint32_t x = val(a->srcs[0]);
        const std::uint32_t y = a->srcs.size() > 1 ? val(a->srcs[1]) : 0;
        std::uint32_t out = 0;
        switch (a->op) {
          case ArithOp::add: out = x + y; break;
          case ArithOp::mul: out = x * y; break;
          case ArithOp::xor_: out = x ^ y; break;
          case ArithOp::and_: out = x & y; break;
          case ArithOp::shl: out = x << (y & 31); break;
          case ArithOp::shr: out = x >> (y & 31); break;
          case ArithOp::mov: out = x; break;
          default: throw std::logic_error("reference: unexpected op");
        }
        regs[a->dst.index] = out;
        ++pc;
      } else if (const auto* c = std::get_if<Cmp>(&inst)) {
        const auto x = val(c->a);
        const auto y = val(c->b);
        bool t = false;
        switch (c->rel) {
          case CmpRel::lt: t = x < y; break;
          case CmpRel::gt: t = x > y; break;
          case CmpRel::ne: t = x != y; break;
          default: throw std::logic_error("reference: unexpected compare");
        }
        regs[c->dst.index] = t ? 1 : 0;
        ++pc;
      } else if (const auto* s = std::get_if<ReadSpecial>(&inst)) {
        regs[s->dst.index] = s->which == Special::lane_id ? lane : tid;
        ++pc;
      } else if (const auto* i = std::get_if<If>(&inst)) {
        if (regs[i->cond.index]) ++pc;
        else pc = (partner_[pc] ? partner_[pc] : end_[pc]) + 1;
      } else if (std::holds_alternative<Else>(inst)) {
        pc = end_[pc] + 1;
      } else if (const auto* b = std::get_if<Break>(&inst)) {
        if (!b->cond || regs[b->cond->index]) pc = end_[pc] + 1;
        else ++pc;
      } else if (std::holds_alternative<EndLoop>(inst)) {
        pc = partner_[pc] + 1;
      } else if (std::holds_alternative<St>(inst)) {
        ++pc;
      } else if (std::holds_alternative<Halt>(inst)) {
        return regs[kAccReg];
      } else {
        ++pc;  // EndIf, Loop
      }
    }
  }

 private:
  const uvgpu::Function& f_;
  std::vector<std::size_t> partner_;
  std::vector<std::size_t> end_;
};


/// Observes control events of one launch and checks that every EndIf
/// restores the mask active at its If minus lanes that broke out of an
/// enclosing loop in between, and that a loop exits with its entry mask.
class MaskChecker {
 public:
  void operator()(const uvgpu::ControlEvent& e) {
    auto& stack = frames_[{e.workgroup, e.wave}];
    using K = uvgpu::ControlKind;
    switch (e.kind) {
      case K::if_:
        stack.push_back({false, e.mask_before, 0});
        if (e.mask_after != (e.mask_before & e.cond)) fail("if mask", e);
        break;
      case K::else_:
        break;
      case K::endif: {
        if (stack.empty() || stack.back().loop) return fail("unmatched endif", e);
        const auto f = stack.back();
        stack.pop_back();
        ++restorations;
        if (e.mask_after != (f.entry & ~f.broken)) fail("endif restore", e);
        break;
      }
      case K::loop:
        stack.push_back({true, e.mask_before, 0});
        break;
      case K::break_: {
        const auto leaving = e.mask_before & e.cond;
        if (e.mask_after != (e.mask_before & ~leaving)) fail("break mask", e);
        for (auto it = stack.rbegin(); it != stack.rend() && !it->loop; ++it) it->broken |= leaving;
        break;
      }
      case K::endloop: {
        if (stack.empty() || !stack.back().loop) return fail("unmatched endloop", e);
        if (e.mask_before != 0) {
          if (e.mask_after != e.mask_before) fail("endloop continue", e);
          break;
        }
        const auto f = stack.back();
        stack.pop_back();
        ++restorations;
        if (e.mask_after != f.entry) fail("endloop restore", e);
        break;
      }
    }
  }

  bool balanced() const {
    for (const auto& [k, v] : frames_)
      if (!v.empty()) return false;
    return true;
  }

  std::uint64_t restorations = 0;
  std::vector<std::string> failures;

 private:
  struct Frame {
    bool loop;
    uvgpu::LaneMask entry;
    uvgpu::LaneMask broken;
  };
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<Frame>> frames_;

  void fail(const char* what, const uvgpu::ControlEvent& e) {
    if (failures.size() < 8)
      failures.push_back(std::string(what) + " at pc " + std::to_string(e.pc) + " wave " + std::to_string(e.wave));
  }
};

}  // namespace testgen
