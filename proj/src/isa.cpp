#include "uvgpu/isa.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>

namespace uvgpu {

bool is_float(ScalarType t) {
  return t == ScalarType::F16 || t == ScalarType::F32 || t == ScalarType::F64 || t == ScalarType::BF16;
}

bool is_integer(ScalarType t) { return t == ScalarType::I32 || t == ScalarType::U32; }

int arity(ArithOp op) {
  switch (op) {
    case ArithOp::not_:
    case ArithOp::neg:
    case ArithOp::mov: return 1;
    case ArithOp::fma: return 3;
    default: return 2;
  }
}

bool is_control_marker(const Instruction& inst) {
  return std::holds_alternative<If>(inst) || std::holds_alternative<Else>(inst) ||
         std::holds_alternative<EndIf>(inst) || std::holds_alternative<Loop>(inst) ||
         std::holds_alternative<Break>(inst) || std::holds_alternative<EndLoop>(inst);
}

std::uint32_t mma_regs(std::uint32_t rows, std::uint32_t cols, std::uint32_t wave_width) {
  return (rows * cols + wave_width - 1) / wave_width;
}

const Function* Program::find(std::string_view name) const {
  for (const auto& f : functions)
    if (f.name == name) return &f;
  return nullptr;
}

std::string_view to_string(ScalarType t) {
  switch (t) {
    case ScalarType::I32: return "i32";
    case ScalarType::U32: return "u32";
    case ScalarType::F16: return "f16";
    case ScalarType::F32: return "f32";
    case ScalarType::F64: return "f64";
    case ScalarType::BF16: return "bf16";
  }
  return "?";
}

std::string_view to_string(ArithOp op) {
  switch (op) {
    case ArithOp::add: return "add";
    case ArithOp::sub: return "sub";
    case ArithOp::mul: return "mul";
    case ArithOp::div: return "div";
    case ArithOp::min: return "min";
    case ArithOp::max: return "max";
    case ArithOp::fma: return "fma";
    case ArithOp::and_: return "and";
    case ArithOp::or_: return "or";
    case ArithOp::xor_: return "xor";
    case ArithOp::shl: return "shl";
    case ArithOp::shr: return "shr";
    case ArithOp::not_: return "not";
    case ArithOp::neg: return "neg";
    case ArithOp::mov: return "mov";
  }
  return "?";
}

std::string_view to_string(CmpRel r) {
  switch (r) {
    case CmpRel::eq: return "eq";
    case CmpRel::ne: return "ne";
    case CmpRel::lt: return "lt";
    case CmpRel::le: return "le";
    case CmpRel::gt: return "gt";
    case CmpRel::ge: return "ge";
  }
  return "?";
}

std::string_view to_string(MemSpace s) {
  switch (s) {
    case MemSpace::scratch: return "scratch";
    case MemSpace::device: return "device";
    case MemSpace::arg: return "arg";
  }
  return "?";
}

std::string_view to_string(AtomicOp op) {
  switch (op) {
    case AtomicOp::add: return "add";
    case AtomicOp::sub: return "sub";
    case AtomicOp::min: return "min";
    case AtomicOp::max: return "max";
    case AtomicOp::and_: return "and";
    case AtomicOp::or_: return "or";
    case AtomicOp::xor_: return "xor";
    case AtomicOp::exch: return "exch";
    case AtomicOp::cmpxch: return "cmpxch";
  }
  return "?";
}

std::string_view to_string(ShflMode m) {
  switch (m) {
    case ShflMode::idx: return "idx";
    case ShflMode::up: return "up";
    case ShflMode::down: return "down";
    case ShflMode::xor_: return "xor";
  }
  return "?";
}

std::string_view to_string(Scope s) {
  switch (s) {
    case Scope::wave: return "wave";
    case Scope::workgroup: return "workgroup";
    case Scope::device: return "device";
    case Scope::system: return "system";
  }
  return "?";
}

std::string_view to_string(MemOrder o) {
  switch (o) {
    case MemOrder::acquire: return "acquire";
    case MemOrder::release: return "release";
    case MemOrder::acqrel: return "acqrel";
  }
  return "?";
}

std::string_view to_string(Special s) {
  switch (s) {
    case Special::lane_id: return "lane_id";
    case Special::wave_id: return "wave_id";
    case Special::tid_x: return "tid_x";
    case Special::tid_y: return "tid_y";
    case Special::tid_z: return "tid_z";
    case Special::wgid_x: return "wgid_x";
    case Special::wgid_y: return "wgid_y";
    case Special::wgid_z: return "wgid_z";
    case Special::wgdim_x: return "wgdim_x";
    case Special::wgdim_y: return "wgdim_y";
    case Special::wgdim_z: return "wgdim_z";
    case Special::griddim_x: return "griddim_x";
    case Special::griddim_y: return "griddim_y";
    case Special::griddim_z: return "griddim_z";
    case Special::wave_width: return "wave_width";
  }
  return "?";
}

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace

std::string mnemonic(const Instruction& inst) {
  return std::visit(
      overloaded{
          [](const Arith& i) { return fmt::format("{}.{}", to_string(i.op), to_string(i.type)); },
          [](const Cvt& i) { return fmt::format("cvt.{}.{}", to_string(i.to), to_string(i.from)); },
          [](const Cmp& i) { return fmt::format("cmp.{}.{}", to_string(i.rel), to_string(i.type)); },
          [](const Ld& i) { return fmt::format("ld.{}.b{}", to_string(i.space), i.width); },
          [](const St& i) { return fmt::format("st.{}.b{}", to_string(i.space), i.width); },
          [](const Atomic& i) {
            return fmt::format("atom.{}.{}.{}", to_string(i.space), to_string(i.op), to_string(i.type));
          },
          [](const Shfl& i) { return fmt::format("shfl.{}.b32", to_string(i.mode)); },
          [](const Bar&) { return std::string("bar"); },
          [](const Fence& i) { return fmt::format("fence.{}.{}", to_string(i.order), to_string(i.scope)); },
          [](const AsyncCopy&) { return std::string("cp.async"); },
          [](const WaitAsync&) { return std::string("wait.async"); },
          [](const ReadSpecial&) { return std::string("rdsr"); },
          [](const If&) { return std::string("if"); },
          [](const Else&) { return std::string("else"); },
          [](const EndIf&) { return std::string("endif"); },
          [](const Loop&) { return std::string("loop"); },
          [](const Break&) { return std::string("break"); },
          [](const EndLoop&) { return std::string("endloop"); },
          [](const Call&) { return std::string("call"); },
          [](const Ret&) { return std::string("ret"); },
          [](const Mma& i) { return fmt::format("mma.{}x{}x{}.f32", i.tile.m, i.tile.n, i.tile.k); },
          [](const Halt&) { return std::string("halt"); },
      },
      inst);
}

BlockTable match_blocks(const Function& fn) {
  BlockTable t;
  t.info.resize(fn.body.size());

  struct Open {
    std::size_t index;
    bool is_loop;
    bool seen_else;
  };
  std::vector<Open> stack;

  auto innermost_loop = [&]() -> const Open* {
    for (auto it = stack.rbegin(); it != stack.rend(); ++it)
      if (it->is_loop) return &*it;
    return nullptr;
  };

  std::vector<std::pair<std::size_t, std::size_t>> breaks;  // break index -> loop index

  for (std::size_t i = 0; i < fn.body.size(); ++i) {
    const auto& inst = fn.body[i];
    auto& info = t.info[i];
    info.depth = static_cast<std::int32_t>(stack.size());
    if (std::holds_alternative<If>(inst)) {
      stack.push_back({i, false, false});
    } else if (std::holds_alternative<Else>(inst)) {
      if (stack.empty() || stack.back().is_loop || stack.back().seen_else) {
        t.errors.push_back({i, "nesting", "else without matching if"});
        continue;
      }
      info.depth -= 1;
      stack.back().seen_else = true;
      t.info[stack.back().index].partner = static_cast<std::int32_t>(i);
    } else if (std::holds_alternative<EndIf>(inst)) {
      if (stack.empty() || stack.back().is_loop) {
        t.errors.push_back({i, "nesting", "endif without matching if"});
        continue;
      }
      info.depth -= 1;
      const auto open = stack.back();
      stack.pop_back();
      auto& head = t.info[open.index];
      head.end = static_cast<std::int32_t>(i);
      if (head.partner < 0) head.partner = head.end;
      else t.info[head.partner].end = head.end;
    } else if (std::holds_alternative<Loop>(inst)) {
      stack.push_back({i, true, false});
    } else if (std::holds_alternative<Break>(inst)) {
      const Open* loop = innermost_loop();
      if (!loop) {
        t.errors.push_back({i, "break-outside-loop", "break outside of any loop"});
        continue;
      }
      breaks.emplace_back(i, loop->index);
    } else if (std::holds_alternative<EndLoop>(inst)) {
      if (stack.empty() || !stack.back().is_loop) {
        t.errors.push_back({i, "nesting", "endloop without matching loop"});
        continue;
      }
      info.depth -= 1;
      const auto open = stack.back();
      stack.pop_back();
      t.info[open.index].end = static_cast<std::int32_t>(i);
      info.partner = static_cast<std::int32_t>(open.index);
    }
  }
  for (const auto& open : stack)
    t.errors.push_back({open.index, "nesting", "unclosed structured block"});
  for (auto [b, loop] : breaks) t.info[b].end = t.info[loop].end;
  return t;
}

std::string ValidationReport::to_string() const {
  if (ok()) return "ok\n";
  std::string out;
  for (const auto& d : diagnostics)
    out += fmt::format("{}:{}: [{}] {}\n", d.function, d.index, d.rule, d.message);
  return out;
}

namespace {

struct Validator {
  const Program& prog;
  const MachineDescriptor& m;
  ValidationReport report;
  const Function* fn = nullptr;
  std::size_t index = 0;

  void error(std::string rule, std::string message) {
    report.diagnostics.push_back({fn ? fn->name : std::string("<program>"), index, std::move(rule),
                                  std::move(message)});
  }

  void check_reg(const RegRef& r, std::uint32_t span = 1) {
    const std::uint32_t last = std::uint32_t{r.index} + span - 1;
    if (r.index >= m.max_regs)
      error("reg-range", fmt::format("register index {} exceeds R={}", r.index, m.max_regs));
    else if (last >= m.max_regs)
      error("reg-range", fmt::format("register range r{}..r{} exceeds R={}", r.index, last, m.max_regs));
  }

  void check_type(ScalarType t) {
    if (t == ScalarType::F64 && !m.has_fp64) error("capability-fp64", "f64 requires has_fp64");
    if (t == ScalarType::BF16 && !m.has_bf16) error("capability-bf16", "bf16 requires has_bf16");
  }

  // Typed register operand: f64 values occupy an aligned-free register pair.
  void check_typed_reg(const RegRef& r, ScalarType t) {
    if (t == ScalarType::F64) {
      if (r.part != RegPart::full32) error("operand", "f64 operands cannot use 16-bit halves");
      check_reg(r, 2);
    } else {
      check_reg(r);
    }
  }

  void check_typed_operand(const Operand& op, ScalarType t) {
    if (const auto* r = std::get_if<RegRef>(&op)) check_typed_reg(*r, t);
    else if (t == ScalarType::F64) error("operand", "f64 operands must be registers");
  }

  void check_address(const Address& a) {
    if (a.base) check_reg(*a.base);
  }

  void check_width(std::uint8_t width, const RegRef& r) {
    if (width != 8 && width != 16 && width != 32) error("width", "access width must be 8, 16 or 32");
    if (r.part != RegPart::full32 && width == 32) error("width", "32-bit access through a 16-bit half");
  }

  void visit(const Arith& i) {
    check_type(i.type);
    if (static_cast<int>(i.srcs.size()) != arity(i.op))
      error("operand", fmt::format("{} takes {} source operands", to_string(i.op), arity(i.op)));
    const bool int_only = i.op == ArithOp::and_ || i.op == ArithOp::or_ || i.op == ArithOp::xor_ ||
                          i.op == ArithOp::shl || i.op == ArithOp::shr || i.op == ArithOp::not_;
    if (int_only && !is_integer(i.type))
      error("type", fmt::format("{} requires an integer type", to_string(i.op)));
    check_typed_reg(i.dst, i.type);
    for (const auto& s : i.srcs) check_typed_operand(s, i.type);
  }
  void visit(const Cvt& i) {
    check_type(i.to);
    check_type(i.from);
    check_typed_reg(i.dst, i.to);
    check_typed_operand(i.src, i.from);
  }
  void visit(const Cmp& i) {
    check_type(i.type);
    check_reg(i.dst);
    check_typed_operand(i.a, i.type);
    check_typed_operand(i.b, i.type);
  }
  void visit(const Ld& i) {
    check_width(i.width, i.dst);
    check_reg(i.dst);
    check_address(i.addr);
  }
  void visit(const St& i) {
    if (i.space == MemSpace::arg) error("store-arg", "the argument space is read-only");
    check_width(i.width, i.src);
    check_reg(i.src);
    check_address(i.addr);
  }
  void visit(const Atomic& i) {
    if (!is_integer(i.type)) error("type", "atomics operate on i32 or u32");
    if (i.space == MemSpace::arg) error("store-arg", "the argument space is read-only");
    if ((i.op == AtomicOp::cmpxch) != i.compare.has_value())
      error("operand", "cmpxch takes a compare operand and other atomics do not");
    check_reg(i.dst);
    check_address(i.addr);
    check_typed_operand(i.value, i.type);
    if (i.compare) check_typed_operand(*i.compare, i.type);
  }
  void visit(const Shfl& i) {
    check_reg(i.dst);
    check_reg(i.src);
    if (const auto* imm = std::get_if<Imm>(&i.lane)) {
      if (imm->bits >= m.wave_width)
        error("shfl-operand", fmt::format("shuffle operand {} outside [0, W={})", imm->bits, m.wave_width));
    } else {
      check_reg(std::get<RegRef>(i.lane));
    }
  }
  void visit(const Bar& i) {
    if (i.id >= m.named_barriers)
      error("barrier-id",
            fmt::format("barrier id {} exceeds named barrier count {}", i.id, m.named_barriers));
  }
  void visit(const Fence&) {}
  void visit(const AsyncCopy& i) {
    check_reg(i.dst_scratch);
    check_reg(i.src_device);
    if (i.bytes == 0 || i.bytes % 4 != 0) error("async-size", "async copy size must be a positive multiple of 4");
  }
  void visit(const WaitAsync&) {}
  void visit(const ReadSpecial& i) { check_reg(i.dst); }
  void visit(const If& i) { check_reg(i.cond); }
  void visit(const Else&) {}
  void visit(const EndIf&) {}
  void visit(const Loop&) {}
  void visit(const Break& i) {
    if (i.cond) check_reg(*i.cond);
  }
  void visit(const EndLoop&) {}
  void visit(const Call& i) {
    const Function* target = prog.find(i.function);
    if (!target) error("call-target", fmt::format("call to undefined function '{}'", i.function));
    else if (target->is_kernel) error("call-target", fmt::format("cannot call kernel '{}'", i.function));
  }
  void visit(const Ret&) {
    if (fn->is_kernel) error("ret-in-kernel", "kernels end with halt, not ret");
  }
  void visit(const Mma& i) {
    if (!m.has_matrix()) {
      error("capability-matrix", "matrix capability absent");
      return;
    }
    if (!m.supports_tile(i.tile))
      error("matrix-tile", fmt::format("tile {}x{}x{} not offered by this machine", i.tile.m, i.tile.n, i.tile.k));
    const auto W = m.wave_width;
    check_reg(i.a, mma_regs(i.tile.m, i.tile.k, W));
    check_reg(i.b, mma_regs(i.tile.k, i.tile.n, W));
    check_reg(i.c, mma_regs(i.tile.m, i.tile.n, W));
    check_reg(i.d, mma_regs(i.tile.m, i.tile.n, W));
  }
  void visit(const Halt&) {}

  void run() {
    std::set<std::string> names;
    for (const auto& f : prog.functions)
      if (!names.insert(f.name).second) {
        fn = &f;
        index = 0;
        error("duplicate-function", fmt::format("function '{}' defined twice", f.name));
      }
    fn = nullptr;
    index = 0;

    const Function* entry = prog.find(prog.entry);
    if (!entry || !entry->is_kernel) error("entry", fmt::format("kernel entry '{}' not defined", prog.entry));
    if (prog.regs_used > m.max_regs)
      error("regs-budget", fmt::format("declared .regs {} exceeds R={}", prog.regs_used, m.max_regs));
    if (const auto used = static_register_usage(prog, m.wave_width); used > prog.regs_used)
      error("regs-declared", fmt::format("program uses {} registers but declares .regs {}", used, prog.regs_used));
    if (prog.scratch_used > m.scratchpad)
      error("scratch-budget",
            fmt::format("declared .scratch {} exceeds S={}", prog.scratch_used, m.scratchpad));

    for (const auto& f : prog.functions) {
      fn = &f;
      const auto blocks = match_blocks(f);
      for (const auto& e : blocks.errors) {
        index = e.index;
        error(e.rule, e.message);
      }
      for (index = 0; index < f.body.size(); ++index) {
        const auto& inst = f.body[index];
        std::visit([this](const auto& i) { visit(i); }, inst);
        if (std::holds_alternative<Ret>(inst) && index < blocks.info.size() && blocks.info[index].depth != 0)
          error("ret-nested", "ret must appear outside structured blocks");
      }
      index = f.body.empty() ? 0 : f.body.size() - 1;
      if (f.is_kernel) {
        if (f.body.empty() || !std::holds_alternative<Halt>(f.body.back()))
          error("terminator", "kernel must end with halt");
      } else {
        if (f.body.empty() || !std::holds_alternative<Ret>(f.body.back()))
          error("terminator", "function must end with ret");
      }
    }
  }
};

}  // namespace

std::uint32_t static_register_usage(const Program& p, std::uint32_t wave_width) {
  std::uint32_t top = 0;
  auto reg = [&](const RegRef& r, std::uint32_t span = 1) { top = std::max(top, std::uint32_t{r.index} + span); };
  auto typed = [&](const RegRef& r, ScalarType t) { reg(r, t == ScalarType::F64 ? 2 : 1); };
  auto operand = [&](const Operand& o, ScalarType t) {
    if (const auto* r = std::get_if<RegRef>(&o)) typed(*r, t);
  };
  auto address = [&](const Address& a) {
    if (a.base) reg(*a.base);
  };
  for (const auto& f : p.functions)
    for (const auto& inst : f.body)
      std::visit(overloaded{
                     [&](const Arith& i) {
                       typed(i.dst, i.type);
                       for (const auto& s : i.srcs) operand(s, i.type);
                     },
                     [&](const Cvt& i) {
                       typed(i.dst, i.to);
                       operand(i.src, i.from);
                     },
                     [&](const Cmp& i) {
                       reg(i.dst);
                       operand(i.a, i.type);
                       operand(i.b, i.type);
                     },
                     [&](const Ld& i) {
                       reg(i.dst);
                       address(i.addr);
                     },
                     [&](const St& i) {
                       reg(i.src);
                       address(i.addr);
                     },
                     [&](const Atomic& i) {
                       reg(i.dst);
                       address(i.addr);
                       operand(i.value, i.type);
                       if (i.compare) operand(*i.compare, i.type);
                     },
                     [&](const Shfl& i) {
                       reg(i.dst);
                       reg(i.src);
                       operand(i.lane, ScalarType::U32);
                     },
                     [&](const AsyncCopy& i) {
                       reg(i.dst_scratch);
                       reg(i.src_device);
                     },
                     [&](const ReadSpecial& i) { reg(i.dst); },
                     [&](const If& i) { reg(i.cond); },
                     [&](const Break& i) {
                       if (i.cond) reg(*i.cond);
                     },
                     [&](const Mma& i) {
                       reg(i.a, mma_regs(i.tile.m, i.tile.k, wave_width));
                       reg(i.b, mma_regs(i.tile.k, i.tile.n, wave_width));
                       reg(i.c, mma_regs(i.tile.m, i.tile.n, wave_width));
                       reg(i.d, mma_regs(i.tile.m, i.tile.n, wave_width));
                     },
                     [](const auto&) {},
                 },
                 inst);
  return top;
}

ValidationReport validate_program(const Program& p, const MachineDescriptor& m) {
  Validator v{p, m, {}};
  v.run();
  return std::move(v.report);
}

}  // namespace uvgpu
