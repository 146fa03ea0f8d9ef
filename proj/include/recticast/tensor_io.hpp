#pragma once

#include <filesystem>
#include <string>

#include "recticast/tensor.hpp"

namespace recticast {

/// Tensor container layout:
///   bytes 0..7   magic "RTEN0001"
///   bytes 8..11  little-endian uint32 header length L
///   next L bytes UTF-8 JSON {"dtype":"f32"|"f64","order":"rowmajor","shape":[...]}
///   remainder    little-endian payload, product(shape) elements
inline constexpr char kTensorMagic[9] = "RTEN0001";

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& tensor);

/// Loads a container whose dtype matches T; throws FormatError otherwise.
template <typename T>
BasicTensor<T> load_tensor(const std::filesystem::path& path);

/// Reads just the dtype tag ("f32" or "f64") of a container.
std::string peek_tensor_dtype(const std::filesystem::path& path);

/// Raw bytes of a file (used for reproducibility hashing).
std::string read_file_bytes(const std::filesystem::path& path);

/// FNV-1a 64-bit digest rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace recticast
