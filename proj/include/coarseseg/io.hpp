#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace coarseseg::io {

struct RawImage {
  int height = 0;
  int width = 0;
  int channels = 1;  // 1 = gray, 3 = RGB
  std::vector<std::uint8_t> data;
};

/// 8-bit PNG, gray or RGB. Written via a temp file and rename.
void write_png(const std::filesystem::path& path, const RawImage& img);

/// Accepts 8-bit gray or RGB PNGs; anything else is an IoError.
RawImage read_png(const std::filesystem::path& path);

void write_text_atomic(const std::filesystem::path& path,
                       std::string_view text);
void write_bytes_atomic(const std::filesystem::path& path,
                        const std::vector<std::uint8_t>& bytes);

std::string read_text(const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

/// Reads a file, inflating it when it is gzip-compressed.
std::string read_maybe_gzip(const std::filesystem::path& path);

}  // namespace coarseseg::io
