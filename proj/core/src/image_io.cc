#include "chili/image_io.h"

#include <cctype>

#include "chili/error.h"
#include "chili/tensor_file.h"

namespace chili {
namespace {

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}

  void SkipSpaceAndComments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t ReadNumber(const char* what) {
    SkipSpaceAndComments();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() &&
           std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      ++pos_;
      if (++digits > 9) throw Fail(std::string(what) + " too large");
    }
    if (digits == 0) throw Fail(std::string("missing ") + what);
    return value;
  }

  ValidationError Fail(const std::string& what) const {
    return ValidationError(source_ + ": malformed header: " + what);
  }

  std::size_t pos() const { return pos_; }
  void Advance() { ++pos_; }

 private:
  const std::string& bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

Raster DecodePnm(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ValidationError(source + ": wrong magic (expected P5 or P6)");
  }
  Raster r;
  r.channels = bytes[1] == '6' ? 3 : 1;
  HeaderReader header(bytes, source);
  header.Advance();
  header.Advance();
  r.width = header.ReadNumber("width");
  r.height = header.ReadNumber("height");
  const std::size_t maxval = header.ReadNumber("maxval");
  if (r.width == 0 || r.height == 0) throw header.Fail("zero dimension");
  if (maxval != 255) throw header.Fail("maxval must be 255");
  if (header.pos() >= bytes.size() ||
      !std::isspace(static_cast<unsigned char>(bytes[header.pos()]))) {
    throw header.Fail("missing separator before raster");
  }
  const std::size_t start = header.pos() + 1;
  const std::size_t count = r.width * r.height * r.channels;
  if (bytes.size() - start < count) {
    throw ValidationError(source + ": truncated raster");
  }
  r.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                  bytes.begin() + static_cast<std::ptrdiff_t>(start + count));
  return r;
}

Raster ReadPnm(const std::filesystem::path& path) {
  return DecodePnm(ReadFileBytes(path), path.string());
}

std::string EncodePnm(const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3) {
    throw ValidationError("raster must have 1 or 3 channels");
  }
  if (raster.pixels.size() != raster.width * raster.height * raster.channels) {
    throw ValidationError("raster size mismatch");
  }
  std::string out = raster.channels == 3 ? "P6\n" : "P5\n";
  out += std::to_string(raster.width) + " " + std::to_string(raster.height) +
         "\n255\n";
  out.append(reinterpret_cast<const char*>(raster.pixels.data()),
             raster.pixels.size());
  return out;
}

void WritePnm(const std::filesystem::path& path, const Raster& raster) {
  WriteFileBytes(path, EncodePnm(raster));
}

}  // namespace chili
