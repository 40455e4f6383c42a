#pragma once

// Binary tensor container: "AFQT", u32 version, u64 header length, JSON
// manifest, then little-endian row-major payload buffers.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "afq/errors.hpp"
#include "afq/linalg.hpp"

namespace afq {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType { F32, F64, U8, U16 };

std::string_view to_string(DType d);
DType parse_dtype(std::string_view s);
std::size_t dtype_size(DType d);

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::U8;
  else {
    static_assert(std::is_same_v<T, std::uint16_t>, "unsupported tensor element type");
    return DType::U16;
  }
}

/// A named tensor; `data` holds the elements in host byte order, row-major.
struct Tensor {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> data;

  std::uint64_t numel() const;
  bool operator==(const Tensor&) const = default;
};

template <typename T>
Tensor make_tensor(std::string name, std::vector<std::uint64_t> shape, const T* values) {
  Tensor t;
  t.name = std::move(name);
  t.dtype = dtype_of<T>();
  t.shape = std::move(shape);
  t.data.resize(t.numel() * sizeof(T));
  if (!t.data.empty()) std::memcpy(t.data.data(), values, t.data.size());
  return t;
}

template <typename Derived>
Tensor matrix_tensor(std::string name, const Eigen::MatrixBase<Derived>& m) {
  using T = typename Derived::Scalar;
  const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  return make_tensor<T>(std::move(name), {static_cast<std::uint64_t>(rm.rows()), static_cast<std::uint64_t>(rm.cols())},
                        rm.data());
}

/// Elements of a tensor converted to T (f32 and f64 convert freely, integers only to themselves or floats).
template <typename T>
std::vector<T> tensor_values(const Tensor& t) {
  const std::size_t n = static_cast<std::size_t>(t.numel());
  std::vector<T> out(n);
  auto convert = [&](auto tag) {
    using S = decltype(tag);
    for (std::size_t i = 0; i < n; ++i) {
      S v;
      std::memcpy(&v, t.data.data() + i * sizeof(S), sizeof(S));
      out[i] = static_cast<T>(v);
    }
  };
  switch (t.dtype) {
    case DType::F32: convert(float{}); break;
    case DType::F64: convert(double{}); break;
    case DType::U8: convert(std::uint8_t{}); break;
    case DType::U16: convert(std::uint16_t{}); break;
  }
  return out;
}

/// Rank-2 tensor (or rank-1 as a single row) as a matrix.
template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tensor_matrix(const Tensor& t) {
  Index rows = 1, cols = 1;
  if (t.shape.size() == 2) {
    rows = static_cast<Index>(t.shape[0]);
    cols = static_cast<Index>(t.shape[1]);
  } else if (t.shape.size() == 1) {
    cols = static_cast<Index>(t.shape[0]);
  } else if (!t.shape.empty()) {
    throw ShapeError("tensor '" + t.name + "' is not a matrix");
  }
  const auto v = tensor_values<T>(t);
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = v[static_cast<std::size_t>(i)];
  return m;
}

/// Base of all container read/write failures.
class ContainerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public ContainerError {
 public:
  BadMagicError() : ContainerError("bad magic: not an AFQT container") {}
};
class VersionMismatchError : public ContainerError {
 public:
  explicit VersionMismatchError(std::uint32_t found)
      : ContainerError("version mismatch: found " + std::to_string(found) + ", expected " +
                       std::to_string(kContainerVersion)) {}
};
class OverlappingOffsetsError : public ContainerError {
 public:
  using ContainerError::ContainerError;
};
class TruncatedError : public ContainerError {
 public:
  using ContainerError::ContainerError;
};
class ManifestError : public ContainerError {
 public:
  using ContainerError::ContainerError;
};
class DuplicateNameError : public ContainerError {
 public:
  using ContainerError::ContainerError;
};
class IoError : public ContainerError {
 public:
  using ContainerError::ContainerError;
};

std::vector<std::uint8_t> encode_container(const std::vector<Tensor>& tensors);
std::vector<Tensor> decode_container(const std::vector<std::uint8_t>& bytes);

void save_container(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> load_container(const std::filesystem::path& path);

const Tensor& find_tensor(const std::vector<Tensor>& tensors, std::string_view name);
const Tensor* try_find_tensor(const std::vector<Tensor>& tensors, std::string_view name);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace afq
