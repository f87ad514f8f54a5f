#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

#include "unsafespot/dwarf.hpp"
#include "unsafespot/error.hpp"

using namespace unsafespot;

namespace {

struct ToolRow {
  std::string file;
  std::uint32_t line = 0;  // 0 for end_sequence
  std::uint64_t address = 0;
  bool end = false;
};

/// Rows printed by `readelf --debug-dump=decodedline`.
std::vector<ToolRow> readelf_rows(const std::string& path) {
  std::vector<ToolRow> rows;
  const std::string cmd = std::string(READELF) + " --debug-dump=decodedline " + path;
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  REQUIRE(pipe != nullptr);
  std::string text;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe.get())) text += buf.data();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::vector<std::string> tok{std::istream_iterator<std::string>(fields), {}};
    if (tok.size() < 3 || !(tok[2].starts_with("0x") || tok[2] == "0")) continue;
    ToolRow row;
    row.file = tok[0];
    row.end = tok[1] == "-";
    row.line = row.end ? 0 : static_cast<std::uint32_t>(std::stoul(tok[1]));
    row.address = std::stoull(tok[2], nullptr, 16);
    rows.push_back(row);
  }
  return rows;
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), {}};
}

void check_against_readelf(const std::string& path) {
  const auto bytes = file_bytes(path);
  const dwarf::ElfImage image(bytes);
  const auto rows = dwarf::decode_line_programs(image.section(".debug_line"),
                                                image.section(".debug_line_str"),
                                                image.section(".debug_str"));
  const auto expected = readelf_rows(path);
  REQUIRE(!expected.empty());
  REQUIRE(rows.size() == expected.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CAPTURE(i);
    CHECK(rows[i].address == expected[i].address);
    CHECK(rows[i].end_sequence == expected[i].end);
    if (!expected[i].end) {
      CHECK(rows[i].line == expected[i].line);
      CHECK(same_source_file(rows[i].file, expected[i].file));
    }
  }

  const auto map = ingest_debug_lines(path);
  REQUIRE(!map.entries.empty());
  for (std::size_t i = 0; i + 1 < expected.size(); ++i) {
    if (expected[i].end || expected[i].address == expected[i + 1].address) continue;
    const auto* hit = map.lookup(expected[i].address);
    REQUIRE(hit != nullptr);
    CHECK(hit->line == expected[i].line);
  }
  for (std::size_t i = 1; i < map.entries.size(); ++i) {
    CHECK(map.entries[i - 1].end <= map.entries[i].address);
  }
}

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back(v >> 8);
}
void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
void put_str(std::vector<std::uint8_t>& b, const char* s) {
  while (*s) b.push_back(static_cast<std::uint8_t>(*s++));
  b.push_back(0);
}

/// A version-3 unit: rows (0x1000, 1), (0x1004, 3), end at 0x1008.
std::vector<std::uint8_t> tiny_v3_unit() {
  std::vector<std::uint8_t> header;
  header.push_back(1);                          // minimum_instruction_length
  header.push_back(1);                          // default_is_stmt
  header.push_back(static_cast<std::uint8_t>(-5));  // line_base
  header.push_back(14);                         // line_range
  header.push_back(13);                         // opcode_base
  for (std::uint8_t n : {0, 1, 1, 1, 1, 0, 0, 0, 1, 0, 0, 1}) header.push_back(n);
  put_str(header, "src");
  header.push_back(0);
  put_str(header, "a.c");
  header.push_back(1);  // directory index
  header.push_back(0);  // mtime
  header.push_back(0);  // length
  header.push_back(0);

  std::vector<std::uint8_t> program = {0x00, 9, 0x02};
  put_u64(program, 0x1000);
  program.push_back(0x01);                    // copy
  program.push_back(13 + (2 + 5) + 14 * 4);   // special: +4 bytes, +2 lines
  program.push_back(0x02);                    // advance_pc
  program.push_back(4);
  for (std::uint8_t b : {0x00, 0x01, 0x01}) program.push_back(b);  // end_sequence

  std::vector<std::uint8_t> unit;
  put_u16(unit, 3);
  put_u32(unit, static_cast<std::uint32_t>(header.size()));
  unit.insert(unit.end(), header.begin(), header.end());
  unit.insert(unit.end(), program.begin(), program.end());

  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(unit.size()));
  out.insert(out.end(), unit.begin(), unit.end());
  return out;
}

}  // namespace

TEST_CASE("hand-assembled line program") {
  const auto bytes = tiny_v3_unit();
  const auto rows = dwarf::decode_line_programs(bytes, {}, {});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].address == 0x1000);
  CHECK(rows[0].line == 1);
  CHECK(rows[0].file == "src/a.c");
  CHECK(rows[1].address == 0x1004);
  CHECK(rows[1].line == 3);
  CHECK(rows[2].end_sequence);
  CHECK(rows[2].address == 0x1008);

  const auto map = dwarf::line_map_from_rows(rows);
  REQUIRE(map.entries.size() == 2);
  CHECK(map.entries[0].end == 0x1004);
  CHECK(map.entries[1].end == 0x1008);
  CHECK(map.lookup(0x1007)->line == 3);
  CHECK(map.lookup(0x1008) == nullptr);
}

TEST_CASE("truncated and malformed line programs are decode errors") {
  auto bytes = tiny_v3_unit();
  for (std::size_t cut : {std::size_t{2}, std::size_t{9}, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(dwarf::decode_line_programs(part, {}, {}), Error);
  }
  bytes[4] = 9;  // version 9
  try {
    dwarf::decode_line_programs(bytes, {}, {});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == "corpus.DecodeError");
  }
}

TEST_CASE("overlapping sequences are rejected") {
  const std::vector<dwarf::LineRow> rows = {{0x10, "a.c", 1, false}, {0x20, "a.c", 1, true},
                                            {0x18, "a.c", 2, false}, {0x30, "a.c", 2, true}};
  try {
    dwarf::line_map_from_rows(rows);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == "corpus.NonMonotoneAddresses");
  }
}

TEST_CASE("non-ELF input is not an ELF image") {
  const std::vector<std::uint8_t> text = {'1', '0', ' ', 'a'};
  CHECK_FALSE(dwarf::ElfImage::has_elf_magic(text));
  const std::vector<std::uint8_t> stub = {0x7f, 'E', 'L', 'F', 2, 1, 1};
  CHECK(dwarf::ElfImage::has_elf_magic(stub));
  CHECK_THROWS_AS(dwarf::ElfImage{stub}, Error);
}

#ifdef READELF
TEST_CASE("DWARF 4 executable agrees with readelf") { check_against_readelf(DWARF4_FIXTURE); }
TEST_CASE("DWARF 5 executable agrees with readelf") { check_against_readelf(DWARF5_FIXTURE); }
TEST_CASE("DWARF 5 object file agrees with readelf") { check_against_readelf(DWARF5_OBJECT); }
#endif
