#ifndef CHILI_IMAGE_IO_H_
#define CHILI_IMAGE_IO_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace chili {

// 8-bit interleaved raster: 1 channel (graymap) or 3 channels (pixmap).
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch = 0) const {
    return pixels[(y * width + x) * channels + ch];
  }
};

// Reads binary P5 / P6 with maxval 255. '#' comments in the header are
// accepted.
Raster ReadPnm(const std::filesystem::path& path);
Raster DecodePnm(const std::string& bytes, const std::string& source);
std::string EncodePnm(const Raster& raster);
void WritePnm(const std::filesystem::path& path, const Raster& raster);

}  // namespace chili

#endif  // CHILI_IMAGE_IO_H_
