#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "uvgpu/machcfg.hpp"

namespace uvgpu {

// ---------------------------------------------------------------------------
// Operands

enum class RegPart : std::uint8_t { full32, low16, high16 };

struct RegRef {
  std::uint16_t index = 0;
  RegPart part = RegPart::full32;

  bool operator==(const RegRef&) const = default;
};

/// Raw 32-bit immediate. Float-typed instructions interpret the bits.
struct Imm {
  std::uint32_t bits = 0;

  bool operator==(const Imm&) const = default;
};

using Operand = std::variant<RegRef, Imm>;

enum class ScalarType : std::uint8_t { I32, U32, F16, F32, F64, BF16 };

bool is_float(ScalarType t);
bool is_integer(ScalarType t);

/// rN + signed byte offset. A missing base register means absolute.
struct Address {
  std::optional<RegRef> base;
  std::int32_t offset = 0;

  bool operator==(const Address&) const = default;
};

// ---------------------------------------------------------------------------
// Instruction forms

enum class ArithOp : std::uint8_t { add, sub, mul, div, min, max, fma, and_, or_, xor_, shl, shr, not_, neg, mov };

/// Number of source operands each ArithOp takes.
int arity(ArithOp op);

struct Arith {
  ArithOp op = ArithOp::add;
  ScalarType type = ScalarType::U32;
  RegRef dst;
  std::vector<Operand> srcs;

  bool operator==(const Arith&) const = default;
};

struct Cvt {
  ScalarType to = ScalarType::F32;
  ScalarType from = ScalarType::I32;
  RegRef dst;
  Operand src;

  bool operator==(const Cvt&) const = default;
};

enum class CmpRel : std::uint8_t { eq, ne, lt, le, gt, ge };

/// Writes 1 (true) or 0 (false) into a general register.
struct Cmp {
  CmpRel rel = CmpRel::eq;
  ScalarType type = ScalarType::U32;
  RegRef dst;
  Operand a;
  Operand b;

  bool operator==(const Cmp&) const = default;
};

enum class MemSpace : std::uint8_t { scratch, device, arg };

struct Ld {
  MemSpace space = MemSpace::device;
  std::uint8_t width = 32;  // bits: 8, 16 or 32; narrower loads zero-extend
  RegRef dst;
  Address addr;

  bool operator==(const Ld&) const = default;
};

struct St {
  MemSpace space = MemSpace::device;
  std::uint8_t width = 32;
  RegRef src;
  Address addr;

  bool operator==(const St&) const = default;
};

enum class AtomicOp : std::uint8_t { add, sub, min, max, and_, or_, xor_, exch, cmpxch };

struct Atomic {
  AtomicOp op = AtomicOp::add;
  ScalarType type = ScalarType::U32;  // I32 or U32
  MemSpace space = MemSpace::device;
  RegRef dst;  // receives the old value
  Address addr;
  Operand value;
  std::optional<Operand> compare;  // cmpxch only

  bool operator==(const Atomic&) const = default;
};

enum class ShflMode : std::uint8_t { idx, up, down, xor_ };

struct Shfl {
  ShflMode mode = ShflMode::idx;
  RegRef dst;
  RegRef src;
  Operand lane;

  bool operator==(const Shfl&) const = default;
};

struct Bar {
  std::uint32_t id = 0;

  bool operator==(const Bar&) const = default;
};

enum class Scope : std::uint8_t { wave, workgroup, device, system };
enum class MemOrder : std::uint8_t { acquire, release, acqrel };

struct Fence {
  Scope scope = Scope::device;
  MemOrder order = MemOrder::acqrel;

  bool operator==(const Fence&) const = default;
};

/// Device -> scratchpad copy completing no later than the covering WaitAsync.
struct AsyncCopy {
  RegRef dst_scratch;
  RegRef src_device;
  std::uint32_t bytes = 0;

  bool operator==(const AsyncCopy&) const = default;
};

struct WaitAsync {
  std::uint32_t max_outstanding = 0;

  bool operator==(const WaitAsync&) const = default;
};

enum class Special : std::uint8_t {
  lane_id,
  wave_id,
  tid_x,
  tid_y,
  tid_z,
  wgid_x,
  wgid_y,
  wgid_z,
  wgdim_x,
  wgdim_y,
  wgdim_z,
  griddim_x,
  griddim_y,
  griddim_z,
  wave_width,
};

struct ReadSpecial {
  RegRef dst;
  Special which = Special::lane_id;

  bool operator==(const ReadSpecial&) const = default;
};

struct If {
  RegRef cond;
  bool operator==(const If&) const = default;
};
struct Else {
  bool operator==(const Else&) const = default;
};
struct EndIf {
  bool operator==(const EndIf&) const = default;
};
struct Loop {
  bool operator==(const Loop&) const = default;
};
struct Break {
  std::optional<RegRef> cond;  // unconditional when absent
  bool operator==(const Break&) const = default;
};
struct EndLoop {
  bool operator==(const EndLoop&) const = default;
};
struct Call {
  std::string function;
  bool operator==(const Call&) const = default;
};
struct Ret {
  bool operator==(const Ret&) const = default;
};

/// Wave-wide F32 matrix multiply-accumulate D = A*B + C.
///
/// Each operand is a register range holding a row-major matrix spread
/// across lanes: element e lives in lane e % W of register base + e / W.
struct Mma {
  MatrixTile tile;
  RegRef d;
  RegRef a;
  RegRef b;
  RegRef c;

  bool operator==(const Mma&) const = default;
};

struct Halt {
  bool operator==(const Halt&) const = default;
};

using Instruction = std::variant<Arith, Cvt, Cmp, Ld, St, Atomic, Shfl, Bar, Fence, AsyncCopy, WaitAsync,
                                 ReadSpecial, If, Else, EndIf, Loop, Break, EndLoop, Call, Ret, Mma, Halt>;

bool is_control_marker(const Instruction& inst);

/// Registers spanned by an Mma operand on a machine of the given wave width.
std::uint32_t mma_regs(std::uint32_t rows, std::uint32_t cols, std::uint32_t wave_width);

// ---------------------------------------------------------------------------
// Program

struct Function {
  std::string name;
  bool is_kernel = false;
  std::vector<Instruction> body;

  bool operator==(const Function&) const = default;
};

struct Program {
  std::vector<Function> functions;
  std::string entry;
  std::uint32_t regs_used = 1;
  std::uint32_t scratch_used = 0;

  const Function* find(std::string_view name) const;
  bool operator==(const Program&) const = default;
};

/// Matching positions of structured control markers inside one function.
///
/// For an If: `partner` is the Else (or EndIf when there is none) and
/// `end` the EndIf. For an Else: `end` is the EndIf. For a Loop: `end` is
/// the EndLoop. For an EndLoop: `partner` is the Loop. For a Break: `end`
/// is the EndLoop of the innermost enclosing loop.
struct BlockInfo {
  std::int32_t partner = -1;
  std::int32_t end = -1;
  std::int32_t depth = 0;  // nesting depth of the instruction itself
};

struct NestingError {
  std::size_t index = 0;
  std::string rule;
  std::string message;
};

struct BlockTable {
  std::vector<BlockInfo> info;
  std::vector<NestingError> errors;
};

BlockTable match_blocks(const Function& fn);

// ---------------------------------------------------------------------------
// Validation

struct ValidationDiagnostic {
  std::string function;
  std::size_t index = 0;
  std::string rule;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationDiagnostic> diagnostics;

  bool ok() const { return diagnostics.empty(); }
  std::string to_string() const;
};

ValidationReport validate_program(const Program& p, const MachineDescriptor& m);

/// 1 + the highest register index referenced anywhere (register pairs and
/// Mma ranges included, the latter sized for the given wave width).
std::uint32_t static_register_usage(const Program& p, std::uint32_t wave_width);

// ---------------------------------------------------------------------------
// Names shared by the assembler, the trace writer and diagnostics.

std::string_view to_string(ScalarType t);
std::string_view to_string(ArithOp op);
std::string_view to_string(CmpRel r);
std::string_view to_string(MemSpace s);
std::string_view to_string(AtomicOp op);
std::string_view to_string(ShflMode m);
std::string_view to_string(Scope s);
std::string_view to_string(MemOrder o);
std::string_view to_string(Special s);

/// Mnemonic including type and mode suffixes, e.g. "shfl.down.b32".
std::string mnemonic(const Instruction& inst);

}  // namespace uvgpu
