#pragma once

// On-disk sample archive, one directory per sample:
//   sample.json    tier and dataset id
//   features.tnsr  H x W x F features
//   truth.pgm      ground-truth ids
//   payload.pgm    supervision mask (HD, LD)
//   boxes.jsonl    {"box": [row0, col0, row1, col1], "teacher": [...]} per line (WD)

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "embseg/errors.hpp"
#include "embseg/label_map.hpp"
#include "embseg/synth_data.hpp"
#include "embseg/tensor_io.hpp"

namespace embseg {

inline void save_sample(const std::filesystem::path& dir, const AnnotatedSample& s) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "sample.json");
    if (!os) throw IoError("cannot write " + (dir / "sample.json").string());
    os << nlohmann::json{{"tier", to_string(s.tier)}, {"dataset_id", s.dataset_id}}.dump() << '\n';
  }
  save_tensor(dir / "features.tnsr", s.features);
  save_pgm16(dir / "truth.pgm", s.truth);
  if (s.tier == Tier::kWD) {
    std::ofstream os(dir / "boxes.jsonl");
    if (!os) throw IoError("cannot write " + (dir / "boxes.jsonl").string());
    for (std::size_t r = 0; r < s.boxes.count(); ++r) {
      const Box& b = s.boxes.boxes[r];
      os << nlohmann::json{{"box", {b.row0, b.col0, b.row1, b.col1}},
                           {"teacher", s.boxes.teachers[r]}}
                .dump()
         << '\n';
    }
  } else {
    save_pgm16(dir / "payload.pgm", s.pixels.labels);
  }
}

inline AnnotatedSample load_sample(const std::filesystem::path& dir) {
  AnnotatedSample s;
  std::ifstream meta(dir / "sample.json");
  if (!meta) throw IoError("cannot read " + (dir / "sample.json").string());
  try {
    const auto j = nlohmann::json::parse(meta);
    s.tier = parse_tier(j.at("tier").get<std::string>());
    s.dataset_id = j.at("dataset_id").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "sample.json").string() + ": " + e.what());
  }
  s.features = load_tensor(dir / "features.tnsr");
  s.truth = load_pgm16(dir / "truth.pgm");
  if (s.tier == Tier::kWD) {
    std::ifstream is(dir / "boxes.jsonl");
    if (!is) throw IoError("cannot read " + (dir / "boxes.jsonl").string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        const auto b = j.at("box").get<std::vector<std::size_t>>();
        if (b.size() != 4) throw ParseError("box needs 4 coordinates", lineno);
        const Box box{b[0], b[1], b[2], b[3]};
        validate_box(box, s.truth.height, s.truth.width);
        s.boxes.boxes.push_back(box);
        s.boxes.teachers.push_back(j.at("teacher").get<std::vector<double>>());
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(e.what(), lineno);
      }
    }
  } else {
    s.pixels.labels = load_pgm16(dir / "payload.pgm");
  }
  return s;
}

}  // namespace embseg
