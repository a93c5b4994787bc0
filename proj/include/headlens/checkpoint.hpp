#pragma once

#include <string>

#include "headlens/model.hpp"

namespace headlens::nn {

// Binary checkpoint: magic "HLNS", u32 format version, ModelConfig as
// little-endian u32 fields, then each weight tensor as (name length, name
// bytes, rank, dims, row-major little-endian f32 data). Round-trips bit
// exactly.
void save_checkpoint(const ModelF &m, const std::string &path);
ModelF load_checkpoint(const std::string &path);

std::string file_fingerprint(const std::string &path);

}  // namespace headlens::nn
