#pragma once

// Binary artifact formats.
//
// Tensor record (little-endian):
//   u32 dtype (1 = float64) | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
// Tensor file: "TLTN" | u32 version | tensor record
// Checkpoint container:
//   "TLCK" | u32 version | u64 config_len | config JSON bytes | u32 count |
//   count x (u32 name_len | name bytes | tensor record) | u64 FNV-1a of all
//   preceding bytes

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/tensor.hpp"

namespace textless {

static_assert(std::endian::native == std::endian::little, "artifact formats assume a little-endian host");

inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeFloat64 = 1;

/// A file that exists but cannot be decoded. offset is the byte position at
/// which decoding failed.
class CorruptArtifact : public std::runtime_error {
 public:
  CorruptArtifact(const std::string& path, std::uint64_t offset, const std::string& what)
      : std::runtime_error(path + ": corrupt at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string tensor_hash(const Tensor& t) {
  std::uint64_t h = fnv1a(t.shape().data(), t.shape().size() * sizeof(std::size_t));
  return hex64(fnv1a(t.data().data(), t.size() * sizeof(double), h));
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return hex64(h);
}

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_tensor(const Tensor& t) {
    put<std::uint32_t>(kDtypeFloat64);
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(d);
    put_bytes(t.data().data(), t.size() * sizeof(double));
  }
  const std::vector<char>& bytes() const { return bytes_; }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  Tensor get_tensor() {
    const auto at = pos_;
    const auto dtype = get<std::uint32_t>("dtype");
    if (dtype != kDtypeFloat64) fail(at, "unsupported dtype " + std::to_string(dtype));
    const auto rank = get<std::uint32_t>("rank");
    if (rank > 8) fail(at + 4, "implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(get<std::uint64_t>("dimension"));
      numel *= d;
    }
    if (numel > (bytes_.size() - pos_) / sizeof(double)) fail(pos_, "tensor data truncated");
    std::vector<double> values(numel);
    std::memcpy(values.data(), bytes_.data() + pos_, numel * sizeof(double));
    pos_ += numel * sizeof(double);
    return Tensor(std::move(shape), std::move(values));
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }
  const std::vector<char>& bytes() const { return bytes_; }
  [[noreturn]] void fail(std::size_t at, const std::string& what) const { throw CorruptArtifact(path_, at, what); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) fail(pos_, std::string("unexpected end of file reading ") + what);
  }
  std::vector<char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

/// Writes bytes under a temporary name and renames into place, so readers
/// never observe a partially written file.
inline void write_atomic(const std::filesystem::path& path, const void* data, std::size_t n) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_atomic(const std::filesystem::path& path, const std::string& text) {
  write_atomic(path, text.data(), text.size());
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  detail::ByteWriter w;
  w.put_bytes("TLTN", 4);
  w.put<std::uint32_t>(kTensorFileVersion);
  w.put_tensor(t);
  write_atomic(path, w.bytes().data(), w.bytes().size());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_all(path), path.string());
  if (r.get_string(4, "magic") != "TLTN") r.fail(0, "bad magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kTensorFileVersion) r.fail(4, "unsupported version " + std::to_string(version));
  Tensor t = r.get_tensor();
  if (r.pos() != r.size()) r.fail(r.pos(), "trailing bytes");
  return t;
}

/// Named tensors plus a JSON config blob.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("checkpoint has no tensor '" + name + "'");
    return it->second;
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_bytes("TLCK", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto cfg = ck.config.dump();
  w.put<std::uint64_t>(cfg.size());
  w.put_bytes(cfg.data(), cfg.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put_tensor(t);
  }
  const auto sum = fnv1a(w.bytes().data(), w.bytes().size());
  w.put<std::uint64_t>(sum);
  write_atomic(path, w.bytes().data(), w.bytes().size());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_all(path), path.string());
  Checkpoint ck;
  if (r.get_string(4, "magic") != "TLCK") r.fail(0, "bad magic");
  ck.version = r.get<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion) r.fail(4, "unsupported version " + std::to_string(ck.version));
  const auto cfg_len = r.get<std::uint64_t>("config length");
  if (cfg_len > r.size()) r.fail(8, "config length exceeds file size");
  const auto cfg_at = r.pos();
  const auto cfg = r.get_string(static_cast<std::size_t>(cfg_len), "config");
  try {
    ck.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    r.fail(cfg_at, std::string("config is not JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length");
    auto name = r.get_string(len, "tensor name");
    ck.tensors.emplace(std::move(name), r.get_tensor());
  }
  const auto body = r.pos();
  const auto stored = r.get<std::uint64_t>("checksum");
  if (stored != fnv1a(r.bytes().data(), body)) r.fail(body, "checksum mismatch");
  if (r.pos() != r.size()) r.fail(r.pos(), "trailing bytes");
  return ck;
}

}  // namespace textless
