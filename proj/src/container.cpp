#include "afq/container.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

namespace afq {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'Q', 'T'};
constexpr std::size_t kPreamble = 4 + 4 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
  return v;
}

/// Host-order element bytes to little-endian (and back: the swap is an involution).
void to_little_endian(std::uint8_t* data, std::size_t bytes, std::size_t elem) {
  if constexpr (std::endian::native == std::endian::little) return;
  for (std::size_t off = 0; off + elem <= bytes; off += elem) std::reverse(data + off, data + off + elem);
}

}  // namespace

std::string_view to_string(DType d) {
  switch (d) {
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::U8: return "u8";
    case DType::U16: return "u16";
  }
  return "?";
}

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  if (s == "u8") return DType::U8;
  if (s == "u16") return DType::U16;
  throw ManifestError("manifest: unknown dtype '" + std::string(s) + "'");
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
    case DType::U16: return 2;
  }
  return 0;
}

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::vector<std::uint8_t> encode_container(const std::vector<Tensor>& tensors) {
  std::set<std::string> names;
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) throw DuplicateNameError("duplicate tensor name '" + t.name + "'");
    const std::uint64_t len = t.numel() * dtype_size(t.dtype);
    if (len != t.data.size()) throw ShapeError("tensor '" + t.name + "': data size does not match its shape");
    manifest.push_back({{"name", t.name},
                        {"dtype", std::string(to_string(t.dtype))},
                        {"shape", t.shape},
                        {"byte_offset", offset},
                        {"byte_len", len}});
    offset += len;
  }
  const std::string header = manifest.dump();
  std::vector<std::uint8_t> out;
  out.reserve(kPreamble + header.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint64_t>(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& t : tensors) {
    const std::size_t start = out.size();
    out.insert(out.end(), t.data.begin(), t.data.end());
    to_little_endian(out.data() + start, t.data.size(), dtype_size(t.dtype));
  }
  return out;
}

std::vector<Tensor> decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw TruncatedError("truncated: file shorter than the magic");
  if (!std::equal(kMagic, kMagic + 4, bytes.begin())) throw BadMagicError();
  if (bytes.size() < kPreamble) throw TruncatedError("truncated: incomplete preamble");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kContainerVersion) throw VersionMismatchError(version);
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - kPreamble) throw TruncatedError("truncated: header extends past end of file");
  const std::size_t payload_start = kPreamble + static_cast<std::size_t>(header_len);
  const std::uint64_t payload_size = bytes.size() - payload_start;

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("manifest: invalid JSON: ") + e.what());
  }
  if (!manifest.is_array()) throw ManifestError("manifest: expected a JSON array");

  std::vector<Tensor> out;
  std::set<std::string> names;
  std::uint64_t prev_end = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& e = manifest[i];
    Tensor t;
    std::uint64_t offset = 0, len = 0;
    try {
      t.name = e.at("name").get<std::string>();
      t.dtype = parse_dtype(e.at("dtype").get<std::string>());
      t.shape = e.at("shape").get<std::vector<std::uint64_t>>();
      offset = e.at("byte_offset").get<std::uint64_t>();
      len = e.at("byte_len").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw ManifestError("manifest entry " + std::to_string(i) + ": " + ex.what());
    }
    if (!names.insert(t.name).second) throw DuplicateNameError("duplicate tensor name '" + t.name + "'");
    if (t.numel() * dtype_size(t.dtype) != len) {
      throw ManifestError("manifest entry '" + t.name + "': byte_len does not match dtype and shape");
    }
    if (offset < prev_end) throw OverlappingOffsetsError("overlapping offsets at tensor '" + t.name + "'");
    if (offset > payload_size || len > payload_size - offset) {
      throw TruncatedError("truncated: tensor '" + t.name + "' extends past end of payload");
    }
    prev_end = offset + len;
    const auto* src = bytes.data() + payload_start + offset;
    t.data.assign(src, src + len);
    to_little_endian(t.data.data(), t.data.size(), dtype_size(t.dtype));
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read error on '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write error on '" + path.string() + "'");
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write error on '" + path.string() + "'");
}

void save_container(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  write_file(path, encode_container(tensors));
}

std::vector<Tensor> load_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

const Tensor* try_find_tensor(const std::vector<Tensor>& tensors, std::string_view name) {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const Tensor& find_tensor(const std::vector<Tensor>& tensors, std::string_view name) {
  if (const Tensor* t = try_find_tensor(tensors, name)) return *t;
  throw ManifestError("container has no tensor named '" + std::string(name) + "'");
}

}  // namespace afq
