#include "uvgpu/assembler.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <set>

#include <fmt/format.h>

namespace uvgpu {

std::string to_string(const Diagnostic& d) {
  return fmt::format("{}:{}: {}: {}", d.line, d.column, d.severity == Severity::error ? "error" : "warning",
                     d.message);
}

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

/// Thrown inside the line parser; caught per line and turned into a Diagnostic.
struct LineError {
  int column;
  std::string message;
};

template <class E, std::size_t N>
std::optional<E> lookup(std::string_view s, const std::array<E, N>& values) {
  for (E v : values)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

constexpr std::array kScalarTypes = {ScalarType::I32, ScalarType::U32, ScalarType::F16,
                                     ScalarType::F32, ScalarType::F64, ScalarType::BF16};
constexpr std::array kArithOps = {ArithOp::add,  ArithOp::sub, ArithOp::mul,  ArithOp::div, ArithOp::min,
                                  ArithOp::max,  ArithOp::fma, ArithOp::and_, ArithOp::or_, ArithOp::xor_,
                                  ArithOp::shl,  ArithOp::shr, ArithOp::not_, ArithOp::neg, ArithOp::mov};
constexpr std::array kCmpRels = {CmpRel::eq, CmpRel::ne, CmpRel::lt, CmpRel::le, CmpRel::gt, CmpRel::ge};
constexpr std::array kSpaces = {MemSpace::scratch, MemSpace::device, MemSpace::arg};
constexpr std::array kAtomicOps = {AtomicOp::add, AtomicOp::sub,  AtomicOp::min,  AtomicOp::max,   AtomicOp::and_,
                                   AtomicOp::or_, AtomicOp::xor_, AtomicOp::exch, AtomicOp::cmpxch};
constexpr std::array kShflModes = {ShflMode::idx, ShflMode::up, ShflMode::down, ShflMode::xor_};
constexpr std::array kScopes = {Scope::wave, Scope::workgroup, Scope::device, Scope::system};
constexpr std::array kOrders = {MemOrder::acquire, MemOrder::release, MemOrder::acqrel};
constexpr std::array kSpecials = {Special::lane_id,   Special::wave_id,   Special::tid_x,     Special::tid_y,
                                  Special::tid_z,     Special::wgid_x,    Special::wgid_y,    Special::wgid_z,
                                  Special::wgdim_x,   Special::wgdim_y,   Special::wgdim_z,   Special::griddim_x,
                                  Special::griddim_y, Special::griddim_z, Special::wave_width};

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

/// Cursor over one source line (comment already stripped).
class LineParser {
 public:
  explicit LineParser(std::string_view text) : text_(text) {}

  int column() const { return static_cast<int>(pos_) + 1; }

  void skip_ws() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\r')) ++pos_;
  }

  bool at_end() {
    skip_ws();
    return pos_ >= text_.size();
  }

  [[noreturn]] void fail(std::string message) const { throw LineError{column(), std::move(message)}; }

  std::string describe_here() {
    skip_ws();
    if (pos_ >= text_.size()) return "end of line";
    const char c = text_[pos_];
    if (static_cast<unsigned char>(c) < 0x20 || static_cast<unsigned char>(c) >= 0x7f)
      return fmt::format("byte 0x{:02x}", static_cast<unsigned char>(c));
    return fmt::format("'{}'", c);
  }

  /// Word made of identifier characters and dots (mnemonics, directives).
  std::string_view word() {
    skip_ws();
    const auto start = pos_;
    while (pos_ < text_.size() && (ident_char(text_[pos_]) || text_[pos_] == '.')) ++pos_;
    return text_.substr(start, pos_ - start);
  }

  std::string_view identifier(std::string_view what) {
    skip_ws();
    if (pos_ >= text_.size() || !ident_start(text_[pos_])) fail(fmt::format("expected {}", what));
    const auto start = pos_;
    while (pos_ < text_.size() && ident_char(text_[pos_])) ++pos_;
    return text_.substr(start, pos_ - start);
  }

  void expect(char c) {
    skip_ws();
    if (pos_ >= text_.size() || text_[pos_] != c) fail(fmt::format("expected '{}'", c));
    ++pos_;
  }

  void comma() { expect(','); }

  bool peek(char c) {
    skip_ws();
    return pos_ < text_.size() && text_[pos_] == c;
  }

  bool peek_register() {
    skip_ws();
    return pos_ + 1 < text_.size() && text_[pos_] == 'r' && std::isdigit(static_cast<unsigned char>(text_[pos_ + 1]));
  }

  RegRef reg() {
    skip_ws();
    if (!peek_register()) fail(fmt::format("expected register, found {}", describe_here()));
    const int col = column();
    ++pos_;
    const auto start = pos_;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    std::uint32_t index = 0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, index);
    if (ec != std::errc() || index > 0xffff) throw LineError{col, "register index too large"};
    RegRef r{static_cast<std::uint16_t>(index), RegPart::full32};
    if (pos_ < text_.size() && text_[pos_] == '.') {
      if (pos_ + 1 < text_.size() && (text_[pos_ + 1] == 'l' || text_[pos_ + 1] == 'h') &&
          (pos_ + 2 >= text_.size() || !ident_char(text_[pos_ + 2]))) {
        r.part = text_[pos_ + 1] == 'l' ? RegPart::low16 : RegPart::high16;
        pos_ += 2;
      } else {
        throw LineError{col, "bad register syntax (halves are .l or .h)"};
      }
    }
    if (pos_ < text_.size() && ident_char(text_[pos_])) throw LineError{col, "bad register syntax"};
    return r;
  }

  /// Decimal (optionally negative) or 0x-hex; yields the 32-bit pattern.
  std::uint32_t imm_bits() {
    skip_ws();
    const int col = column();
    bool negative = false;
    if (pos_ < text_.size() && (text_[pos_] == '-' || text_[pos_] == '+')) {
      negative = text_[pos_] == '-';
      ++pos_;
    }
    if (pos_ >= text_.size() || !std::isdigit(static_cast<unsigned char>(text_[pos_])))
      throw LineError{col, fmt::format("expected immediate, found {}", describe_here())};
    int base = 10;
    if (text_[pos_] == '0' && pos_ + 1 < text_.size() && (text_[pos_ + 1] == 'x' || text_[pos_ + 1] == 'X')) {
      base = 16;
      pos_ += 2;
    }
    const auto start = pos_;
    while (pos_ < text_.size() && ident_char(text_[pos_])) ++pos_;
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, v, base);
    if (ec == std::errc::result_out_of_range) throw LineError{col, "immediate out of range"};
    if (ec != std::errc() || ptr != text_.data() + pos_ || start == pos_)
      throw LineError{col, "malformed immediate"};
    if (negative) {
      if (v > 0x80000000ull) throw LineError{col, "immediate out of range"};
      return static_cast<std::uint32_t>(-static_cast<std::int64_t>(v));
    }
    if (v > 0xffffffffull) throw LineError{col, "immediate out of range"};
    return static_cast<std::uint32_t>(v);
  }

  std::uint32_t unsigned_imm() {
    skip_ws();
    const int col = column();
    if (peek('-')) throw LineError{col, "expected non-negative immediate"};
    return imm_bits();
  }

  Operand operand() {
    if (peek_register()) return reg();
    skip_ws();
    if (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '-' ||
                                text_[pos_] == '+'))
      return Imm{imm_bits()};
    fail(fmt::format("malformed operand: expected register or immediate, found {}", describe_here()));
  }

  Address address() {
    expect('[');
    Address a;
    if (peek_register()) {
      a.base = reg();
      skip_ws();
      if (peek('+') || peek('-')) {
        const bool neg = text_[pos_] == '-';
        ++pos_;
        skip_ws();
        const int col = column();
        const auto v = unsigned_imm();
        if (neg ? v > 0x80000000u : v > 0x7fffffffu) throw LineError{col, "address offset out of range"};
        a.offset = neg ? static_cast<std::int32_t>(-static_cast<std::int64_t>(v)) : static_cast<std::int32_t>(v);
      }
    } else {
      a.offset = static_cast<std::int32_t>(imm_bits());
    }
    expect(']');
    return a;
  }

  std::string_view rest() {
    skip_ws();
    return text_.substr(pos_);
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

std::vector<std::string_view> split_dots(std::string_view s) {
  std::vector<std::string_view> parts;
  while (true) {
    const auto dot = s.find('.');
    parts.push_back(s.substr(0, dot));
    if (dot == std::string_view::npos) break;
    s.remove_prefix(dot + 1);
  }
  return parts;
}

std::optional<MatrixTile> parse_tile(std::string_view s) {
  MatrixTile t;
  std::array<std::uint32_t*, 3> dims = {&t.m, &t.n, &t.k};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto x = s.find('x');
    const auto part = s.substr(0, x);
    if (part.empty()) return std::nullopt;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), *dims[i]);
    if (ec != std::errc() || ptr != part.data() + part.size() || *dims[i] == 0) return std::nullopt;
    if (i < 2) {
      if (x == std::string_view::npos) return std::nullopt;
      s.remove_prefix(x + 1);
    } else if (x != std::string_view::npos) {
      return std::nullopt;
    }
  }
  return t;
}

class Assembler {
 public:
  ParseResult run(std::string_view source) {
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= source.size()) {
      auto nl = source.find('\n', pos);
      if (nl == std::string_view::npos) nl = source.size();
      ++line_no;
      std::string_view line = source.substr(pos, nl - pos);
      if (const auto semi = line.find(';'); semi != std::string_view::npos) line = line.substr(0, semi);
      try {
        parse_line(line, line_no);
      } catch (const LineError& e) {
        error(line_no, e.column, e.message);
      }
      if (nl == source.size()) break;
      pos = nl + 1;
    }
    last_line_ = std::max(1, line_no);
    return finish();
  }

 private:
  Program prog_;
  bool in_function_ = false;
  std::vector<Diagnostic> diags_;
  std::optional<std::uint32_t> regs_;
  std::optional<std::uint32_t> scratch_;
  int regs_line_ = 0;
  int kernel_line_ = 0;
  int last_line_ = 1;

  void error(int line, int column, std::string message) {
    diags_.push_back({line, column, std::move(message), Severity::error});
  }

  void parse_line(std::string_view text, int line_no) {
    LineParser p(text);
    if (p.at_end()) return;
    const int col = p.column();
    if (p.peek('.')) {
      directive(p, line_no);
    } else {
      const auto word = p.word();
      if (word.empty()) p.fail(fmt::format("unexpected {}", p.describe_here()));
      if (!in_function_) throw LineError{col, "instruction outside of a .kernel or .func"};
      auto inst = instruction(word, col, p);
      prog_.functions.back().body.push_back(std::move(inst));
    }
    if (!p.at_end()) p.fail(fmt::format("unexpected {} after operands", p.describe_here()));
  }

  void directive(LineParser& p, int line_no) {
    const int col = p.column();
    const auto word = p.word();
    if (word == ".kernel" || word == ".func") {
      const int name_col = (p.skip_ws(), p.column());
      const std::string name{p.identifier("function name")};
      if (prog_.find(name)) throw LineError{name_col, fmt::format("function '{}' already defined", name)};
      const bool kernel = word == ".kernel";
      if (kernel) {
        if (!prog_.entry.empty())
          throw LineError{col, fmt::format("second .kernel (entry '{}' defined on line {})", prog_.entry, kernel_line_)};
        prog_.entry = name;
        kernel_line_ = line_no;
      }
      prog_.functions.push_back({name, kernel, {}});
      in_function_ = true;
    } else if (word == ".regs" || word == ".scratch") {
      auto& slot = word == ".regs" ? regs_ : scratch_;
      if (slot) throw LineError{col, fmt::format("duplicate {} directive", word)};
      slot = p.unsigned_imm();
      if (word == ".regs") {
        regs_line_ = line_no;
        if (*slot == 0) throw LineError{col, ".regs must be at least 1"};
      }
    } else {
      throw LineError{col, fmt::format("unknown directive '{}'", word)};
    }
  }

  template <class E, std::size_t N>
  E suffix(std::string_view s, const std::array<E, N>& values, std::string_view what, int col) {
    if (auto v = lookup(s, values)) return *v;
    throw LineError{col, fmt::format("unknown {} '{}'", what, s)};
  }

  static std::uint8_t width_suffix(std::string_view s, int col) {
    if (s == "b8") return 8;
    if (s == "b16") return 16;
    if (s == "b32") return 32;
    throw LineError{col, fmt::format("unknown access width '{}' (use b8, b16 or b32)", s)};
  }

  Instruction instruction(std::string_view word, int col, LineParser& p) {
    const auto parts = split_dots(word);
    const auto head = parts[0];
    auto need = [&](std::size_t n) {
      if (parts.size() != n)
        throw LineError{col, fmt::format("'{}' expects {} suffix{}", head, n - 1, n == 2 ? "" : "es")};
    };

    if (auto op = lookup(head, kArithOps)) {
      need(2);
      Arith a;
      a.op = *op;
      a.type = suffix(parts[1], kScalarTypes, "type", col);
      a.dst = p.reg();
      for (int i = 0; i < arity(*op); ++i) {
        p.comma();
        a.srcs.push_back(p.operand());
      }
      return a;
    }
    if (head == "cvt") {
      need(3);
      Cvt c;
      c.to = suffix(parts[1], kScalarTypes, "type", col);
      c.from = suffix(parts[2], kScalarTypes, "type", col);
      c.dst = p.reg();
      p.comma();
      c.src = p.operand();
      return c;
    }
    if (head == "cmp") {
      need(3);
      Cmp c;
      c.rel = suffix(parts[1], kCmpRels, "comparison", col);
      c.type = suffix(parts[2], kScalarTypes, "type", col);
      c.dst = p.reg();
      p.comma();
      c.a = p.operand();
      p.comma();
      c.b = p.operand();
      return c;
    }
    if (head == "ld") {
      need(3);
      Ld l;
      l.space = suffix(parts[1], kSpaces, "memory space", col);
      l.width = width_suffix(parts[2], col);
      l.dst = p.reg();
      p.comma();
      l.addr = p.address();
      return l;
    }
    if (head == "st") {
      need(3);
      St s;
      s.space = suffix(parts[1], kSpaces, "memory space", col);
      s.width = width_suffix(parts[2], col);
      s.addr = p.address();
      p.comma();
      s.src = p.reg();
      return s;
    }
    if (head == "atom") {
      need(4);
      Atomic a;
      a.space = suffix(parts[1], kSpaces, "memory space", col);
      a.op = suffix(parts[2], kAtomicOps, "atomic operation", col);
      a.type = suffix(parts[3], kScalarTypes, "type", col);
      a.dst = p.reg();
      p.comma();
      a.addr = p.address();
      p.comma();
      a.value = p.operand();
      if (a.op == AtomicOp::cmpxch) {
        p.comma();
        a.compare = p.operand();
      }
      return a;
    }
    if (head == "shfl") {
      need(3);
      Shfl s;
      s.mode = suffix(parts[1], kShflModes, "shuffle mode", col);
      if (parts[2] != "b32") throw LineError{col, fmt::format("unknown shuffle width '{}' (use b32)", parts[2])};
      s.dst = p.reg();
      p.comma();
      s.src = p.reg();
      p.comma();
      s.lane = p.operand();
      return s;
    }
    if (head == "bar") {
      need(1);
      Bar b;
      if (!p.at_end()) b.id = p.unsigned_imm();
      return b;
    }
    if (head == "fence") {
      need(3);
      Fence f;
      f.order = suffix(parts[1], kOrders, "memory order", col);
      f.scope = suffix(parts[2], kScopes, "scope", col);
      return f;
    }
    if (head == "cp") {
      if (parts.size() != 2 || parts[1] != "async") throw LineError{col, fmt::format("unknown mnemonic '{}'", word)};
      AsyncCopy c;
      c.dst_scratch = p.reg();
      p.comma();
      c.src_device = p.reg();
      p.comma();
      c.bytes = p.unsigned_imm();
      return c;
    }
    if (head == "wait") {
      if (parts.size() != 2 || parts[1] != "async") throw LineError{col, fmt::format("unknown mnemonic '{}'", word)};
      return WaitAsync{p.unsigned_imm()};
    }
    if (head == "rdsr") {
      need(1);
      ReadSpecial r;
      r.dst = p.reg();
      p.comma();
      p.skip_ws();
      const int scol = p.column();
      const auto name = p.identifier("special register name");
      auto which = lookup(name, kSpecials);
      if (!which) throw LineError{scol, fmt::format("unknown special register '{}'", name)};
      r.which = *which;
      return r;
    }
    if (head == "mma") {
      need(3);
      auto tile = parse_tile(parts[1]);
      if (!tile) throw LineError{col, fmt::format("malformed tile shape '{}' (use MxNxK)", parts[1])};
      if (parts[2] != "f32") throw LineError{col, fmt::format("unsupported mma type '{}' (use f32)", parts[2])};
      Mma m;
      m.tile = *tile;
      m.d = p.reg();
      p.comma();
      m.a = p.reg();
      p.comma();
      m.b = p.reg();
      p.comma();
      m.c = p.reg();
      return m;
    }
    if (parts.size() == 1) {
      if (head == "if") return If{p.reg()};
      if (head == "else") return Else{};
      if (head == "endif") return EndIf{};
      if (head == "loop") return Loop{};
      if (head == "endloop") return EndLoop{};
      if (head == "break") {
        Break b;
        if (!p.at_end()) b.cond = p.reg();
        return b;
      }
      if (head == "call") return Call{std::string(p.identifier("function name"))};
      if (head == "ret") return Ret{};
      if (head == "halt") return Halt{};
    }
    throw LineError{col, fmt::format("unknown mnemonic '{}'", word)};
  }

  ParseResult finish() {
    if (prog_.entry.empty()) error(last_line_, 1, "no .kernel defined");
    // Call targets are checked by the validator; nesting too, but an early
    // positioned message is friendlier for the common unclosed-block case.
    const std::uint32_t usage = std::max<std::uint32_t>(1, static_register_usage(prog_, 8));
    prog_.regs_used = regs_.value_or(usage);
    prog_.scratch_used = scratch_.value_or(0);
    if (regs_ && *regs_ < usage)
      diags_.push_back({regs_line_, 1, fmt::format(".regs {} is below the {} registers referenced", *regs_, usage),
                        Severity::warning});

    ParseResult r;
    const bool failed = std::any_of(diags_.begin(), diags_.end(),
                                    [](const Diagnostic& d) { return d.severity == Severity::error; });
    std::stable_sort(diags_.begin(), diags_.end(),
                     [](const Diagnostic& a, const Diagnostic& b) { return a.line < b.line; });
    r.diagnostics = std::move(diags_);
    if (!failed) r.program = std::move(prog_);
    return r;
  }
};

std::string format_imm(std::uint32_t bits) {
  const auto s = static_cast<std::int32_t>(bits);
  if (s >= -65536 && s <= 65536) return fmt::format("{}", s);
  return fmt::format("0x{:x}", bits);
}

std::string format_reg(const RegRef& r) {
  switch (r.part) {
    case RegPart::full32: return fmt::format("r{}", r.index);
    case RegPart::low16: return fmt::format("r{}.l", r.index);
    case RegPart::high16: return fmt::format("r{}.h", r.index);
  }
  return "r?";
}

std::string format_address(const Address& a) {
  if (!a.base) return fmt::format("[{}]", a.offset);
  if (a.offset == 0) return fmt::format("[{}]", format_reg(*a.base));
  if (a.offset < 0)
    return fmt::format("[{}-{}]", format_reg(*a.base), -static_cast<std::int64_t>(a.offset));
  return fmt::format("[{}+{}]", format_reg(*a.base), a.offset);
}

}  // namespace

ParseResult parse_program(std::string_view source) { return Assembler{}.run(source); }

std::string format_operand(const Operand& op) {
  if (const auto* r = std::get_if<RegRef>(&op)) return format_reg(*r);
  return format_imm(std::get<Imm>(op).bits);
}

std::string format_instruction(const Instruction& inst) {
  const std::string m = mnemonic(inst);
  return std::visit(
      overloaded{
          [&](const Arith& i) {
            std::string s = fmt::format("{} {}", m, format_reg(i.dst));
            for (const auto& src : i.srcs) s += ", " + format_operand(src);
            return s;
          },
          [&](const Cvt& i) { return fmt::format("{} {}, {}", m, format_reg(i.dst), format_operand(i.src)); },
          [&](const Cmp& i) {
            return fmt::format("{} {}, {}, {}", m, format_reg(i.dst), format_operand(i.a), format_operand(i.b));
          },
          [&](const Ld& i) { return fmt::format("{} {}, {}", m, format_reg(i.dst), format_address(i.addr)); },
          [&](const St& i) { return fmt::format("{} {}, {}", m, format_address(i.addr), format_reg(i.src)); },
          [&](const Atomic& i) {
            std::string s = fmt::format("{} {}, {}, {}", m, format_reg(i.dst), format_address(i.addr),
                                        format_operand(i.value));
            if (i.compare) s += ", " + format_operand(*i.compare);
            return s;
          },
          [&](const Shfl& i) {
            return fmt::format("{} {}, {}, {}", m, format_reg(i.dst), format_reg(i.src), format_operand(i.lane));
          },
          [&](const Bar& i) { return i.id == 0 ? m : fmt::format("{} {}", m, i.id); },
          [&](const Fence&) { return m; },
          [&](const AsyncCopy& i) {
            return fmt::format("{} {}, {}, {}", m, format_reg(i.dst_scratch), format_reg(i.src_device), i.bytes);
          },
          [&](const WaitAsync& i) { return fmt::format("{} {}", m, i.max_outstanding); },
          [&](const ReadSpecial& i) { return fmt::format("{} {}, {}", m, format_reg(i.dst), to_string(i.which)); },
          [&](const If& i) { return fmt::format("{} {}", m, format_reg(i.cond)); },
          [&](const Break& i) { return i.cond ? fmt::format("{} {}", m, format_reg(*i.cond)) : m; },
          [&](const Call& i) { return fmt::format("{} {}", m, i.function); },
          [&](const Mma& i) {
            return fmt::format("{} {}, {}, {}, {}", m, format_reg(i.d), format_reg(i.a), format_reg(i.b),
                               format_reg(i.c));
          },
          [&](const auto&) { return m; },
      },
      inst);
}

std::string format_program(const Program& p) {
  std::string out = fmt::format(".regs {}\n.scratch {}\n", p.regs_used, p.scratch_used);
  for (const auto& f : p.functions) {
    out += fmt::format("\n{} {}\n", f.is_kernel ? ".kernel" : ".func", f.name);
    const auto blocks = match_blocks(f);
    for (std::size_t i = 0; i < f.body.size(); ++i) {
      const int depth = std::max(0, blocks.info[i].depth);
      out.append(static_cast<std::size_t>(depth) * 2, ' ');
      out += format_instruction(f.body[i]);
      out += '\n';
    }
  }
  return out;
}

}  // namespace uvgpu
