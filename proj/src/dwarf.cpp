#include "unsafespot/dwarf.hpp"

#include <algorithm>
#include <cstring>

#include "unsafespot/error.hpp"

namespace unsafespot::dwarf {

namespace {

constexpr std::uint8_t DW_LNS_copy = 0x01;
constexpr std::uint8_t DW_LNS_advance_pc = 0x02;
constexpr std::uint8_t DW_LNS_advance_line = 0x03;
constexpr std::uint8_t DW_LNS_set_file = 0x04;
constexpr std::uint8_t DW_LNS_set_column = 0x05;
constexpr std::uint8_t DW_LNS_negate_stmt = 0x06;
constexpr std::uint8_t DW_LNS_set_basic_block = 0x07;
constexpr std::uint8_t DW_LNS_const_add_pc = 0x08;
constexpr std::uint8_t DW_LNS_fixed_advance_pc = 0x09;
constexpr std::uint8_t DW_LNS_set_prologue_end = 0x0a;
constexpr std::uint8_t DW_LNS_set_epilogue_begin = 0x0b;
constexpr std::uint8_t DW_LNS_set_isa = 0x0c;

constexpr std::uint8_t DW_LNE_end_sequence = 0x01;
constexpr std::uint8_t DW_LNE_set_address = 0x02;
constexpr std::uint8_t DW_LNE_define_file = 0x03;

constexpr std::uint64_t DW_LNCT_path = 0x1;
constexpr std::uint64_t DW_LNCT_directory_index = 0x2;

constexpr std::uint64_t DW_FORM_block = 0x09;
constexpr std::uint64_t DW_FORM_block1 = 0x0a;
constexpr std::uint64_t DW_FORM_data1 = 0x0b;
constexpr std::uint64_t DW_FORM_data2 = 0x05;
constexpr std::uint64_t DW_FORM_data4 = 0x06;
constexpr std::uint64_t DW_FORM_data8 = 0x07;
constexpr std::uint64_t DW_FORM_data16 = 0x1e;
constexpr std::uint64_t DW_FORM_string = 0x08;
constexpr std::uint64_t DW_FORM_strp = 0x0e;
constexpr std::uint64_t DW_FORM_udata = 0x0f;
constexpr std::uint64_t DW_FORM_line_strp = 0x1f;

constexpr std::uint32_t SHT_RELA = 4;
constexpr std::uint32_t SHT_NOBITS = 8;
constexpr std::uint32_t SHT_REL = 9;

constexpr std::uint16_t EM_386 = 3;
constexpr std::uint16_t EM_X86_64 = 62;
constexpr std::uint16_t EM_AARCH64 = 183;
constexpr std::uint64_t SHF_COMPRESSED = 0x800;

[[noreturn]] void fail(const std::string& what) { throw Error("corpus.DecodeError", what); }

/// Bounds-checked little-endian cursor.
class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> data, std::size_t pos = 0)
      : data_(data), pos_(pos) {}

  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ >= data_.size(); }
  void seek(std::size_t pos) {
    if (pos > data_.size()) fail("offset past end of section");
    pos_ = pos;
  }
  void skip(std::size_t n) { seek(pos_ + n); }

  std::uint64_t fixed(std::size_t width) {
    if (width > 8 || pos_ + width > data_.size()) fail("truncated data");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= std::uint64_t{data_[pos_ + i]} << (8 * i);
    pos_ += width;
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(fixed(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(fixed(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(fixed(4)); }
  std::uint64_t u64() { return fixed(8); }

  std::uint64_t uleb() {
    std::uint64_t v = 0;
    for (unsigned shift = 0;; shift += 7) {
      const std::uint8_t b = u8();
      if (shift < 64) v |= std::uint64_t{b & 0x7fu} << shift;
      if ((b & 0x80) == 0) return v;
    }
  }
  std::int64_t sleb() {
    std::int64_t v = 0;
    unsigned shift = 0;
    std::uint8_t b = 0;
    do {
      b = u8();
      if (shift < 64) v |= std::int64_t{b & 0x7f} << shift;
      shift += 7;
    } while (b & 0x80);
    if (shift < 64 && (b & 0x40)) v |= -(std::int64_t{1} << shift);
    return v;
  }
  std::string cstr() {
    const auto* begin = data_.data() + pos_;
    const auto* end = data_.data() + data_.size();
    const auto* nul = std::find(begin, end, std::uint8_t{0});
    if (nul == end) fail("unterminated string");
    std::string s(reinterpret_cast<const char*>(begin), static_cast<std::size_t>(nul - begin));
    pos_ += s.size() + 1;
    return s;
  }

private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_;
};

std::string string_at(std::span<const std::uint8_t> section, std::uint64_t offset) {
  if (offset >= section.size()) fail("string offset outside string section");
  Reader r(section, offset);
  return r.cstr();
}

std::string join_path(const std::string& dir, const std::string& name) {
  if (dir.empty() || name.starts_with('/')) return name;
  return dir.back() == '/' ? dir + name : dir + "/" + name;
}

struct EntryFormat {
  std::uint64_t content;
  std::uint64_t form;
};

struct Strings {
  std::span<const std::uint8_t> line_str;
  std::span<const std::uint8_t> str;
};

/// Reads one attribute value; returns a string for path-like content or the
/// numeric value for integral forms.
void read_form(Reader& r, std::uint64_t form, bool dwarf64, const Strings& strings,
               std::string* text, std::uint64_t* number) {
  const std::size_t offset_size = dwarf64 ? 8 : 4;
  switch (form) {
    case DW_FORM_string: *text = r.cstr(); return;
    case DW_FORM_line_strp: *text = string_at(strings.line_str, r.fixed(offset_size)); return;
    case DW_FORM_strp: *text = string_at(strings.str, r.fixed(offset_size)); return;
    case DW_FORM_udata: *number = r.uleb(); return;
    case DW_FORM_data1: *number = r.u8(); return;
    case DW_FORM_data2: *number = r.u16(); return;
    case DW_FORM_data4: *number = r.u32(); return;
    case DW_FORM_data8: *number = r.u64(); return;
    case DW_FORM_data16: r.skip(16); return;
    case DW_FORM_block: r.skip(r.uleb()); return;
    case DW_FORM_block1: r.skip(r.u8()); return;
    default: fail("unsupported form 0x" + std::to_string(form) + " in line table header");
  }
}

struct FileEntry {
  std::string name;
  std::uint64_t dir = 0;
};

std::vector<std::string> read_v5_entries(Reader& r, bool dwarf64, const Strings& strings,
                                         const std::vector<std::string>* dirs) {
  const std::uint8_t format_count = r.u8();
  std::vector<EntryFormat> formats(format_count);
  for (auto& f : formats) {
    f.content = r.uleb();
    f.form = r.uleb();
  }
  const std::uint64_t count = r.uleb();
  std::vector<std::string> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    FileEntry entry;
    for (const auto& f : formats) {
      std::string text;
      std::uint64_t number = 0;
      read_form(r, f.form, dwarf64, strings, &text, &number);
      if (f.content == DW_LNCT_path) entry.name = text;
      if (f.content == DW_LNCT_directory_index) entry.dir = number;
    }
    if (dirs != nullptr) {
      const std::string dir = entry.dir < dirs->size() ? (*dirs)[entry.dir] : std::string();
      out.push_back(join_path(dir, entry.name));
    } else {
      out.push_back(entry.name);
    }
  }
  return out;
}

struct LineState {
  std::uint64_t address = 0;
  std::uint64_t file = 1;
  std::int64_t line = 1;
  bool is_stmt = false;
};

void decode_unit(Reader& r, std::size_t unit_end, bool dwarf64, std::uint16_t version,
                 const Strings& strings, std::vector<LineRow>& rows) {
  const std::size_t offset_size = dwarf64 ? 8 : 4;
  if (version >= 5) {
    r.u8();  // address_size
    r.u8();  // segment_selector_size
  }
  const std::uint64_t header_length = r.fixed(offset_size);
  const std::size_t program_start = r.pos() + header_length;
  if (program_start > unit_end) fail("header length exceeds unit");
  const std::uint8_t min_inst_length = r.u8();
  if (version >= 4) r.u8();  // maximum_operations_per_instruction
  const bool default_is_stmt = r.u8() != 0;
  const auto line_base = static_cast<std::int8_t>(r.u8());
  const std::uint8_t line_range = r.u8();
  const std::uint8_t opcode_base = r.u8();
  if (line_range == 0) fail("line_range is zero");
  if (opcode_base == 0) fail("opcode_base is zero");
  std::vector<std::uint8_t> opcode_lengths(opcode_base - 1);
  for (auto& len : opcode_lengths) len = r.u8();

  // File names indexed as the program refers to them: 1-based before v5.
  std::vector<std::string> files;
  if (version >= 5) {
    const auto dirs = read_v5_entries(r, dwarf64, strings, nullptr);
    files = read_v5_entries(r, dwarf64, strings, &dirs);
  } else {
    std::vector<std::string> dirs;
    for (std::string d = r.cstr(); !d.empty(); d = r.cstr()) dirs.push_back(std::move(d));
    files.emplace_back();  // index 0 is unused
    for (std::string name = r.cstr(); !name.empty(); name = r.cstr()) {
      const std::uint64_t dir = r.uleb();
      r.uleb();  // mtime
      r.uleb();  // length
      files.push_back(join_path(dir > 0 && dir <= dirs.size() ? dirs[dir - 1] : "", name));
    }
  }
  r.seek(program_start);

  auto file_name = [&](std::uint64_t index) -> std::string {
    return index < files.size() ? files[index] : std::string();
  };

  LineState state;
  state.is_stmt = default_is_stmt;
  auto emit = [&](bool end_sequence) {
    rows.push_back({state.address, file_name(state.file),
                    static_cast<std::uint32_t>(std::max<std::int64_t>(state.line, 0)),
                    end_sequence});
  };

  while (r.pos() < unit_end) {
    const std::uint8_t opcode = r.u8();
    if (opcode >= opcode_base) {
      const std::uint8_t adjusted = opcode - opcode_base;
      state.address += static_cast<std::uint64_t>(adjusted / line_range) * min_inst_length;
      state.line += line_base + adjusted % line_range;
      emit(false);
      continue;
    }
    switch (opcode) {
      case 0: {
        const std::uint64_t len = r.uleb();
        const std::size_t next = r.pos() + len;
        if (len == 0 || next > unit_end) fail("bad extended opcode length");
        const std::uint8_t sub = r.u8();
        if (sub == DW_LNE_end_sequence) {
          emit(true);
          state = LineState{};
          state.is_stmt = default_is_stmt;
        } else if (sub == DW_LNE_set_address) {
          state.address = r.fixed(len - 1);
        } else if (sub == DW_LNE_define_file && version < 5) {
          std::string name = r.cstr();
          files.push_back(std::move(name));
        }
        r.seek(next);
        break;
      }
      case DW_LNS_copy: emit(false); break;
      case DW_LNS_advance_pc: state.address += r.uleb() * min_inst_length; break;
      case DW_LNS_advance_line: state.line += r.sleb(); break;
      case DW_LNS_set_file: state.file = r.uleb(); break;
      case DW_LNS_set_column: r.uleb(); break;
      case DW_LNS_negate_stmt: state.is_stmt = !state.is_stmt; break;
      case DW_LNS_set_basic_block: break;
      case DW_LNS_const_add_pc:
        state.address += std::uint64_t{(255u - opcode_base) / line_range} * min_inst_length;
        break;
      case DW_LNS_fixed_advance_pc: state.address += r.u16(); break;
      case DW_LNS_set_prologue_end: break;
      case DW_LNS_set_epilogue_begin: break;
      case DW_LNS_set_isa: r.uleb(); break;
      default:
        for (std::uint8_t i = 0; i < opcode_lengths[opcode - 1]; ++i) r.uleb();
        break;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ELF

bool ElfImage::has_elf_magic(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 4 && bytes[0] == 0x7f && bytes[1] == 'E' && bytes[2] == 'L' &&
         bytes[3] == 'F';
}

ElfImage::ElfImage(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {
  if (!has_elf_magic(bytes_) || bytes_.size() < 52) fail("not an ELF file");
  const std::uint8_t elf_class = bytes_[4];
  if (elf_class != 1 && elf_class != 2) fail("unknown ELF class");
  if (bytes_[5] != 1) fail("only little-endian ELF is supported");
  is_64_ = elf_class == 2;

  Reader r(bytes_);
  r.seek(16);
  type_ = r.u16();
  const std::uint16_t machine = r.u16();
  std::uint64_t shoff = 0;
  std::uint16_t shentsize = 0, shnum = 0, shstrndx = 0;
  if (is_64_) {
    r.seek(0x28);
    shoff = r.u64();
    r.seek(0x3a);
  } else {
    r.seek(0x20);
    shoff = r.u32();
    r.seek(0x2e);
  }
  shentsize = r.u16();
  shnum = r.u16();
  shstrndx = r.u16();
  if (shoff == 0 || shnum == 0) return;
  if (shstrndx >= shnum) fail("bad section name table index");

  struct Raw {
    std::uint32_t name;
    std::uint32_t type;
    std::uint64_t flags, offset, size;
    std::uint32_t link, info;
  };
  std::vector<Raw> raw(shnum);
  for (std::uint16_t i = 0; i < shnum; ++i) {
    r.seek(shoff + std::uint64_t{i} * shentsize);
    Raw& s = raw[i];
    s.name = r.u32();
    s.type = r.u32();
    if (is_64_) {
      s.flags = r.u64();
      r.u64();  // addr
      s.offset = r.u64();
      s.size = r.u64();
      s.link = r.u32();
      s.info = r.u32();
    } else {
      s.flags = r.u32();
      r.u32();  // addr
      s.offset = r.u32();
      s.size = r.u32();
      s.link = r.u32();
      s.info = r.u32();
    }
  }
  auto data_of = [&](const Raw& s) -> std::span<const std::uint8_t> {
    if (s.type == SHT_NOBITS) return {};
    if (s.offset > bytes_.size() || s.size > bytes_.size() - s.offset) {
      fail("section extends past end of file");
    }
    return {bytes_.data() + s.offset, static_cast<std::size_t>(s.size)};
  };
  const auto names = data_of(raw[shstrndx]);
  if (is_relocatable()) {
    for (const auto& s : raw) {
      if (s.type != SHT_RELA && s.type != SHT_REL) continue;
      if (s.info >= shnum || s.link >= shnum) fail("bad relocation section links");
      if (!string_at(names, raw[s.info].name).starts_with(".debug")) continue;
      if (data_of(raw[s.info]).size() != raw[s.info].size) continue;  // SHT_NOBITS target
      apply_relocations(machine, s.type == SHT_RELA, data_of(s), data_of(raw[s.link]),
                        raw[s.info].offset, raw[s.info].size);
    }
  }
  for (const auto& s : raw) {
    Section section{string_at(names, s.name), data_of(s)};
    if ((s.flags & SHF_COMPRESSED) && section.name.starts_with(".debug")) {
      fail("compressed debug section " + section.name + " is not supported");
    }
    sections_.push_back(std::move(section));
  }
}

void ElfImage::apply_relocations(std::uint16_t machine, bool rela,
                                 std::span<const std::uint8_t> relocs,
                                 std::span<const std::uint8_t> symtab, std::uint64_t target_offset,
                                 std::uint64_t target_size) {
  const std::size_t entry = is_64_ ? (rela ? 24 : 16) : (rela ? 12 : 8);
  const std::size_t sym_entry = is_64_ ? 24 : 16;
  Reader r(relocs);
  while (r.pos() + entry <= relocs.size()) {
    std::uint64_t offset = 0, sym = 0, type = 0;
    std::int64_t addend = 0;
    if (is_64_) {
      offset = r.u64();
      const std::uint64_t info = r.u64();
      sym = info >> 32;
      type = info & 0xffffffffu;
      if (rela) addend = static_cast<std::int64_t>(r.u64());
    } else {
      offset = r.u32();
      const std::uint32_t info = r.u32();
      sym = info >> 8;
      type = info & 0xffu;
      if (rela) addend = static_cast<std::int32_t>(r.u32());
    }
    std::size_t width = 0;
    if (machine == EM_X86_64 && type == 1) width = 8;                      // R_X86_64_64
    if (machine == EM_X86_64 && (type == 10 || type == 11)) width = 4;     // R_X86_64_32(S)
    if (machine == EM_AARCH64 && type == 257) width = 8;                   // R_AARCH64_ABS64
    if (machine == EM_AARCH64 && type == 258) width = 4;                   // R_AARCH64_ABS32
    if (machine == EM_386 && type == 1) width = 4;                         // R_386_32
    if (width == 0) fail("unsupported relocation type " + std::to_string(type) + " in debug section");
    if (offset + width > target_size) fail("relocation outside its section");

    Reader sr(symtab);
    sr.seek(static_cast<std::size_t>(sym * sym_entry) + (is_64_ ? 8 : 4));
    const std::uint64_t value = is_64_ ? sr.u64() : sr.u32();

    std::uint8_t* place = bytes_.data() + target_offset + offset;
    if (!rela) {
      Reader existing({place, width});
      addend = static_cast<std::int64_t>(existing.fixed(width));
    }
    const std::uint64_t result = value + static_cast<std::uint64_t>(addend);
    for (std::size_t i = 0; i < width; ++i) place[i] = static_cast<std::uint8_t>(result >> (8 * i));
  }
}

std::span<const std::uint8_t> ElfImage::section(std::string_view name) const {
  for (const auto& s : sections_) {
    if (s.name == name) return s.data;
  }
  return {};
}

// ---------------------------------------------------------------------------
// Line programs

std::vector<LineRow> decode_line_programs(std::span<const std::uint8_t> debug_line,
                                          std::span<const std::uint8_t> line_str,
                                          std::span<const std::uint8_t> str) {
  std::vector<LineRow> rows;
  const Strings strings{line_str, str};
  Reader r(debug_line);
  while (!r.done()) {
    std::uint64_t unit_length = r.u32();
    bool dwarf64 = false;
    if (unit_length == 0xffffffffu) {
      dwarf64 = true;
      unit_length = r.u64();
    } else if (unit_length >= 0xfffffff0u) {
      fail("reserved unit length");
    }
    const std::size_t unit_start = r.pos();
    if (unit_length > debug_line.size() - unit_start) fail("unit extends past .debug_line");
    const std::size_t unit_end = unit_start + unit_length;
    const std::uint16_t version = r.u16();
    if (version < 2 || version > 5) fail("unsupported line table version " + std::to_string(version));
    decode_unit(r, unit_end, dwarf64, version, strings, rows);
    r.seek(unit_end);
  }
  return rows;
}

DebugLineMap line_map_from_rows(std::span<const LineRow> rows) {
  std::vector<LineEntry> entries;
  std::vector<LineEntry> sequence;
  for (const auto& row : rows) {
    if (!sequence.empty() && row.address < sequence.back().address) {
      fail("addresses decrease inside a line sequence");
    }
    if (!sequence.empty()) sequence.back().end = row.address;
    if (row.end_sequence) {
      for (auto& e : sequence) {
        if (e.line != 0 && e.address < e.end) entries.push_back(std::move(e));
      }
      sequence.clear();
      continue;
    }
    if (!sequence.empty() && sequence.back().address == row.address) sequence.pop_back();
    sequence.push_back({row.address, row.file, row.line, UINT64_MAX});
  }
  // A trailing sequence without end_sequence keeps its open-ended last row.
  for (auto& e : sequence) {
    if (e.line != 0 && e.address < e.end) entries.push_back(std::move(e));
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const LineEntry& a, const LineEntry& b) { return a.address < b.address; });
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].address < entries[i - 1].end) {
      throw Error("corpus.NonMonotoneAddresses", "overlapping line sequences");
    }
  }
  return DebugLineMap{std::move(entries)};
}

DebugLineMap read_elf_line_map(std::vector<std::uint8_t> elf_bytes) {
  const ElfImage image(std::move(elf_bytes));
  auto rows = decode_line_programs(image.section(".debug_line"), image.section(".debug_line_str"),
                                   image.section(".debug_str"));
  if (!image.is_relocatable()) {
    // Sequences of discarded functions are relocated to address 0 by the linker.
    std::vector<LineRow> kept;
    bool drop = false;
    bool at_start = true;
    for (const auto& row : rows) {
      if (at_start) drop = row.address == 0;
      at_start = row.end_sequence;
      if (!drop) kept.push_back(row);
    }
    rows = std::move(kept);
  }
  return line_map_from_rows(rows);
}

}  // namespace unsafespot::dwarf
