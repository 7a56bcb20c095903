#ifndef CHILI_TENSOR_FILE_H_
#define CHILI_TENSOR_FILE_H_

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "chili/tensor.h"

namespace chili {

// Named-tensor container laid out like safetensors: an 8-byte little-endian
// header length, a JSON header
//   {"__metadata__": {key: string}, name: {"dtype": "F32", "shape": [...],
//    "data_offsets": [begin, end]}}
// padded with spaces to a multiple of 8, then the raw little-endian payload.
// Only F32 tensors are supported.
struct TensorFile {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

std::string EncodeTensorFile(const TensorFile& file);
// `source` names the input in error messages.
TensorFile DecodeTensorFile(std::string_view bytes, const std::string& source);

TensorFile ReadTensorFile(const std::filesystem::path& path);
void WriteTensorFile(const std::filesystem::path& path, const TensorFile& file);

// Whole-file helpers shared by the loaders.
std::string ReadFileBytes(const std::filesystem::path& path);
void WriteFileBytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace chili

#endif  // CHILI_TENSOR_FILE_H_
