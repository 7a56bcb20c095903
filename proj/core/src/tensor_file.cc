#include "chili/tensor_file.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "chili/error.h"
#include "json.hpp"

namespace chili {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts unsupported");

using nlohmann::json;

std::string EncodeTensorFile(const TensorFile& file) {
  json header = json::object();
  if (!file.metadata.empty()) {
    json meta = json::object();
    for (const auto& [k, v] : file.metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : file.tensors) {
    if (name == "__metadata__") {
      throw ValidationError("tensor name __metadata__ is reserved");
    }
    const std::uint64_t bytes = tensor.size() * sizeof(float);
    header[name] = {{"dtype", "F32"},
                    {"shape", tensor.shape()},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header_text = header.dump();
  while (header_text.size() % 8 != 0) header_text.push_back(' ');

  std::string out;
  out.reserve(8 + header_text.size() + offset);
  const std::uint64_t header_len = header_text.size();
  out.append(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out += header_text;
  for (const auto& [name, tensor] : file.tensors) {
    const auto data = tensor.data();
    out.append(reinterpret_cast<const char*>(data.data()),
               data.size() * sizeof(float));
  }
  return out;
}

TensorFile DecodeTensorFile(std::string_view bytes, const std::string& source) {
  auto fail = [&](const std::string& what) -> ValidationError {
    return ValidationError(source + ": " + what);
  };
  if (bytes.size() < 8) throw fail("truncated header length");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), sizeof(header_len));
  if (header_len > bytes.size() - 8) throw fail("header length exceeds file");
  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::exception& e) {
    throw fail(std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw fail("header is not a JSON object");
  const std::string_view payload = bytes.substr(8 + header_len);

  TensorFile file;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) throw fail("__metadata__ must be an object");
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw fail("metadata value for " + k + " not a string");
        file.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    try {
      const std::string dtype = entry.at("dtype").get<std::string>();
      if (dtype != "F32") {
        throw fail("tensor " + name + ": unsupported dtype " + dtype);
      }
      const Shape shape = entry.at("shape").get<Shape>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1] ||
          offsets[1] > payload.size()) {
        throw fail("tensor " + name + ": data_offsets out of range");
      }
      const std::uint64_t count = ShapeProduct(shape);
      if (offsets[1] - offsets[0] != count * sizeof(float)) {
        throw fail("tensor " + name + ": byte range does not match shape " +
                   ShapeToString(shape));
      }
      std::vector<float> data(count);
      std::memcpy(data.data(), payload.data() + offsets[0],
                  count * sizeof(float));
      try {
        file.tensors.emplace(name, Tensor(shape, std::move(data)));
      } catch (const ValidationError& e) {
        throw fail("tensor " + name + ": " + e.what());
      }
    } catch (const json::exception& e) {
      throw fail("tensor " + name + ": malformed entry (" + e.what() + ")");
    }
  }
  return file;
}

std::string ReadFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return bytes;
}

void WriteFileBytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

TensorFile ReadTensorFile(const std::filesystem::path& path) {
  return DecodeTensorFile(ReadFileBytes(path), path.string());
}

void WriteTensorFile(const std::filesystem::path& path, const TensorFile& file) {
  WriteFileBytes(path, EncodeTensorFile(file));
}

}  // namespace chili
