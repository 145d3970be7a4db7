#pragma once

#include <filesystem>
#include <string>

#include "organseg/grid.hpp"

namespace organseg {

// Raw little-endian array file (float32 for Volume, uint16 for LabelMap) in
// C-order (z major) plus a JSON sidecar:
//   { "shape": [z,y,x], "spacing_mm": [z,y,x], "origin_mm": [z,y,x], "dtype": "f32"|"u16" }
// base_path names the file stem: writes <base>.raw and <base>.json.

void write_volume(const std::filesystem::path& base_path, const Volume& v);
void write_labelmap(const std::filesystem::path& base_path, const LabelMap& l);

Volume read_volume(const std::filesystem::path& base_path);
LabelMap read_labelmap(const std::filesystem::path& base_path);

}  // namespace organseg
