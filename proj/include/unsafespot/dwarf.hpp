#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unsafespot/corpus.hpp"

namespace unsafespot::dwarf {

struct Section {
  std::string name;
  std::span<const std::uint8_t> data;
};

/// Minimal ELF32/ELF64 little-endian section table reader. Debug sections of
/// relocatable objects are returned with their relocations applied.
class ElfImage {
public:
  explicit ElfImage(std::vector<std::uint8_t> bytes);

  static bool has_elf_magic(std::span<const std::uint8_t> bytes);

  bool is_64() const noexcept { return is_64_; }
  bool is_relocatable() const noexcept { return type_ == 1; }
  const std::vector<Section>& sections() const noexcept { return sections_; }
  /// Empty span when absent.
  std::span<const std::uint8_t> section(std::string_view name) const;

private:
  /// Resolves absolute relocations against debug sections of object files.
  void apply_relocations(std::uint16_t machine, bool rela, std::span<const std::uint8_t> relocs,
                         std::span<const std::uint8_t> symtab, std::uint64_t target_offset,
                         std::uint64_t target_size);

  std::vector<std::uint8_t> bytes_;
  std::vector<Section> sections_;
  bool is_64_ = true;
  std::uint16_t type_ = 0;
};

struct LineRow {
  std::uint64_t address = 0;
  std::string file;
  std::uint32_t line = 0;
  bool end_sequence = false;
};

/// Runs every line-number program in `debug_line` (DWARF 2-5) and returns the
/// emitted rows in program order. `line_str` and `str` back DW_FORM_line_strp
/// and DW_FORM_strp file names in version 5 headers.
std::vector<LineRow> decode_line_programs(std::span<const std::uint8_t> debug_line,
                                          std::span<const std::uint8_t> line_str,
                                          std::span<const std::uint8_t> str);

/// Builds a non-overlapping map from decoded rows. Sequences are sorted by
/// start address; rows sharing an address keep the last; rows with line 0
/// carry no source position and are dropped.
DebugLineMap line_map_from_rows(std::span<const LineRow> rows);

DebugLineMap read_elf_line_map(std::vector<std::uint8_t> elf_bytes);

}  // namespace unsafespot::dwarf
