#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "samediff/render.hpp"

namespace samediff {

// RGBA PNG encoding via libpng. Throws std::runtime_error on failure.
std::vector<std::uint8_t> encode_png(const Image& img);
void write_png(const std::string& path, const Image& img);
Image decode_png(const std::vector<std::uint8_t>& bytes);

}  // namespace samediff
