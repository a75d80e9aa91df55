#pragma once

#include <filesystem>

#include "stagekit/volume.hpp"

namespace stagekit {

// On-disk layout of a VolumePack directory:
//   header.json  shape [z,y,x], spacing_mm [z,y,x], byte_order "LE",
//                image_dtype "float32", label_dtype "uint8", label_bits
//                (name -> bit index, only when labels are present),
//                stage "UNDER_T2"|"OVER_T3"|null, role, id
//   image.raw    float32 little-endian, z-major
//   labels.raw   uint8 bitmask, optional
// File lengths must equal product(shape) * sizeof(dtype).

Case load_volume_pack(const std::filesystem::path& dir);
void save_volume_pack(const Case& c, const std::filesystem::path& dir);

}  // namespace stagekit
