#pragma once

// H x W integer label grids and their 16-bit PGM encoding (value = id + 1,
// 0 = ignore).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "embseg/errors.hpp"

namespace embseg {

inline constexpr int kIgnore = -1;

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> ids;  // row-major, kIgnore or a label id

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = kIgnore) : height(h), width(w), ids(h * w, fill) {}

  int& at(std::size_t r, std::size_t c) { return ids[r * width + c]; }
  int at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
  std::size_t size() const { return ids.size(); }
  bool operator==(const LabelMap&) const = default;
};

inline void write_pgm16(std::ostream& os, const LabelMap& map) {
  os << "P5\n" << map.width << ' ' << map.height << "\n65535\n";
  for (int id : map.ids) {
    if (id < kIgnore || id >= 65535) throw DomainError("pgm: label id out of range");
    const auto v = static_cast<std::uint16_t>(id + 1);
    const char b[2] = {static_cast<char>(v >> 8), static_cast<char>(v & 0xff)};
    os.write(b, 2);
  }
}

inline LabelMap read_pgm16(std::istream& is) {
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  if (!(is >> magic >> w >> h >> maxval) || magic != "P5" || maxval != 65535) {
    throw ParseError("pgm: expected a 16-bit P5 header");
  }
  is.get();  // single whitespace before the raster
  LabelMap map(h, w);
  for (auto& id : map.ids) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw ParseError("pgm: truncated raster");
    id = ((static_cast<int>(b[0]) << 8) | b[1]) - 1;
  }
  return map;
}

inline void save_pgm16(const std::filesystem::path& path, const LabelMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_pgm16(os, map);
}

inline LabelMap load_pgm16(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  return read_pgm16(is);
}

}  // namespace embseg
