#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "uvgpu/isa.hpp"

namespace uvgpu {

enum class Severity { error, warning };

/// Positioned assembler message. Lines and columns are 1-based; columns
/// count bytes.
struct Diagnostic {
  int line = 1;
  int column = 1;
  std::string message;
  Severity severity = Severity::error;
};

std::string to_string(const Diagnostic& d);

struct ParseResult {
  std::optional<Program> program;  // present iff there are no errors
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return program.has_value(); }
};

/// Parses `.uva` source. Never throws on malformed input.
///
///   .regs 16              ; registers per thread (default: static usage)
///   .scratch 1024         ; scratchpad bytes per workgroup (default 0)
///   .kernel main          ; exactly one kernel, any number of .func
///   rdsr r0, tid_x
///   shl.u32 r1, r0, 2
///   st.device.b32 [r1+0], r0
///   halt
ParseResult parse_program(std::string_view source);

/// Canonical text: directives first, one instruction per line, two-space
/// indentation per structured nesting level.
std::string format_program(const Program& p);

std::string format_instruction(const Instruction& inst);

std::string format_operand(const Operand& op);

}  // namespace uvgpu
