#include "maskprune/tensor_io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace maskprune {

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'K', 'T', 'E', 'N', 'S', 'O', 'R'};
constexpr std::size_t kHeaderFixed = 8 + 1 + 8;

static_assert(std::endian::native == std::endian::little,
              "tensor_io assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

bool get_u64(std::istream& in, std::uint64_t& v) {
  char buf[8];
  if (!in.read(buf, 8)) return false;
  std::memcpy(&v, buf, 8);
  return true;
}

std::uint64_t element_count(std::span<const std::uint64_t> dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

std::size_t element_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

const char* to_string(TensorErrc code) {
  switch (code) {
    case TensorErrc::io_error: return "io_error";
    case TensorErrc::bad_magic: return "bad_magic";
    case TensorErrc::bad_dtype: return "bad_dtype";
    case TensorErrc::dtype_mismatch: return "dtype_mismatch";
    case TensorErrc::truncated: return "truncated";
    case TensorErrc::invalid_argument: return "invalid_argument";
  }
  return "unknown";
}

TensorError::TensorError(TensorErrc code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

std::uintmax_t tensor_file_size(std::span<const std::uint64_t> dims, DType dtype) {
  return kHeaderFixed + 8 * dims.size() + element_size(dtype) * element_count(dims);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw TensorError(TensorErrc::io_error, "cannot open " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw TensorError(TensorErrc::io_error, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw TensorError(TensorErrc::io_error, "rename failed for " + path.string());
}

void write_tensor(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
                  std::span<const double> values, DType dtype) {
  if (dims.empty()) throw TensorError(TensorErrc::invalid_argument, "dims must be nonempty");
  if (element_count(dims) != values.size())
    throw TensorError(TensorErrc::invalid_argument, "value count does not match dims");
  for (double v : values)
    if (!std::isfinite(v)) throw TensorError(TensorErrc::invalid_argument, "non-finite value");

  std::string out;
  out.reserve(tensor_file_size(dims, dtype));
  out.append(kMagic.data(), kMagic.size());
  out.push_back(static_cast<char>(dtype));
  put_u64(out, dims.size());
  for (auto d : dims) put_u64(out, d);
  if (dtype == DType::f64) {
    out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  } else {
    for (double v : values) {
      const float f = static_cast<float>(v);
      char buf[4];
      std::memcpy(buf, &f, 4);
      out.append(buf, 4);
    }
  }
  write_file_atomic(path, out);
}

Tensor read_tensor(const std::filesystem::path& path, std::optional<DType> expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError(TensorErrc::io_error, "cannot open " + path.string());

  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size())) throw TensorError(TensorErrc::truncated, "short header");
  if (magic != kMagic) throw TensorError(TensorErrc::bad_magic, path.string());

  char dtype_byte = 0;
  if (!in.get(dtype_byte)) throw TensorError(TensorErrc::truncated, "missing dtype");
  if (dtype_byte != 0 && dtype_byte != 1)
    throw TensorError(TensorErrc::bad_dtype, "unknown dtype code " + std::to_string(int(dtype_byte)));
  Tensor t;
  t.dtype = static_cast<DType>(dtype_byte);
  if (expected && *expected != t.dtype) throw TensorError(TensorErrc::dtype_mismatch, path.string());

  std::uint64_t ndim = 0;
  if (!get_u64(in, ndim)) throw TensorError(TensorErrc::truncated, "missing ndim");
  const auto file_size = std::filesystem::file_size(path);
  if (ndim == 0 || kHeaderFixed + 8 * ndim > file_size)
    throw TensorError(TensorErrc::truncated, "bad ndim");
  t.dims.resize(ndim);
  for (auto& d : t.dims)
    if (!get_u64(in, d)) throw TensorError(TensorErrc::truncated, "missing dims");

  if (tensor_file_size(t.dims, t.dtype) != file_size)
    throw TensorError(TensorErrc::truncated, "payload size does not match header");

  const auto n = element_count(t.dims);
  t.values.resize(n);
  if (t.dtype == DType::f64) {
    if (!in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * 8)))
      throw TensorError(TensorErrc::truncated, "short payload");
  } else {
    std::vector<float> buf(n);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4)))
      throw TensorError(TensorErrc::truncated, "short payload");
    std::copy(buf.begin(), buf.end(), t.values.begin());
  }
  return t;
}

void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  const std::array<std::uint64_t, 2> dims = {static_cast<std::uint64_t>(m.rows()),
                                             static_cast<std::uint64_t>(m.cols())};
  std::vector<double> values(m.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), m.rows(), m.cols()) = m;
  write_tensor(path, dims, values);
}

void write_vector(const std::filesystem::path& path, const Vector& v) {
  const std::array<std::uint64_t, 1> dims = {static_cast<std::uint64_t>(v.size())};
  write_tensor(path, dims, std::span<const double>(v.data(), v.size()));
}

Matrix read_matrix(const std::filesystem::path& path) {
  auto t = read_tensor(path);
  if (t.dims.size() != 2) throw TensorError(TensorErrc::invalid_argument, "expected 2-d tensor in " + path.string());
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.values.data(), static_cast<Index>(t.dims[0]), static_cast<Index>(t.dims[1]));
}

Vector read_vector(const std::filesystem::path& path) {
  auto t = read_tensor(path);
  if (t.dims.size() != 1) throw TensorError(TensorErrc::invalid_argument, "expected 1-d tensor in " + path.string());
  return Eigen::Map<const Vector>(t.values.data(), static_cast<Index>(t.values.size()));
}

}  // namespace maskprune
