#pragma once

#include "maskprune/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskprune {

// On-disk layout (all integers little-endian u64):
//   magic "PKTENSOR" (8 bytes) | dtype (1 byte) | ndim | dims[ndim] | payload
// Payload is row-major, little-endian IEEE-754 of the given dtype.

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::size_t element_size(DType dtype);

enum class TensorErrc {
  io_error,
  bad_magic,
  bad_dtype,
  dtype_mismatch,
  truncated,
  invalid_argument,
};

const char* to_string(TensorErrc code);

class TensorError : public std::runtime_error {
 public:
  TensorError(TensorErrc code, const std::string& what);
  TensorErrc code() const noexcept { return code_; }

 private:
  TensorErrc code_;
};

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
  DType dtype = DType::f64;
};

/// Writes atomically via a temporary file renamed into place.
void write_tensor(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
                  std::span<const double> values, DType dtype = DType::f64);

Tensor read_tensor(const std::filesystem::path& path,
                   std::optional<DType> expected = std::nullopt);

std::uintmax_t tensor_file_size(std::span<const std::uint64_t> dims, DType dtype);

// Matrix/vector helpers; matrices are stored row-major with dims [rows, cols].
void write_matrix(const std::filesystem::path& path, const Matrix& m);
void write_vector(const std::filesystem::path& path, const Vector& v);
Matrix read_matrix(const std::filesystem::path& path);
Vector read_vector(const std::filesystem::path& path);

/// Writes `contents` to `path` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace maskprune
