#pragma once

#include <string>

#include "loraedge/data.hpp"
#include "loraedge/nn.hpp"

namespace loraedge::io {

/// Model bundle: directory with manifest.json (layers, slot table with shapes,
/// offsets and freeze flags, adapter records) + params.bin (concatenated raw
/// little-endian 64-bit floats in slot-table order). Round trip is bit-exact.
void save_model(const nn::Model& m, const std::string& dir);
nn::Model load_model(const std::string& dir);

/// Dataset directory: meta.json + data.bin (f64 LE) + labels.bin (i32 LE).
void save_dataset(const data::WindowDataset& d, const std::string& dir);
data::WindowDataset load_dataset(const std::string& dir);

} // namespace loraedge::io
