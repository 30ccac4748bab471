#pragma once

// Chunked little-endian container:
//   "SLGS" | u32 version | { u32 name_len | name | u64 byte_len | payload }*

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slgs/errors.hpp"
#include "slgs/tensor.hpp"

namespace slgs::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'S', 'L', 'G', 'S'};
inline constexpr std::uint32_t kVersion = 1;

/// Append-only payload builder.
class Payload {
 public:
  template <class T>
  Payload& put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const char* p = reinterpret_cast<const char*>(&v);
    bytes_.append(p, sizeof(T));
    return *this;
  }
  Payload& put_tensor(const ad::Tensor& t) {
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put<std::int32_t>(d);
    bytes_.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(float));
    return *this;
  }
  Payload& put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes_.append(s);
    return *this;
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

/// Bounds-checked payload reader; overruns raise MalformedFile.
class Cursor {
 public:
  Cursor(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  ad::Tensor get_tensor() {
    const auto rank = get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw MalformedFile(what_ + ": bad tensor rank " + std::to_string(rank));
    ad::Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = get<std::int32_t>();
      if (d < 0) throw MalformedFile(what_ + ": negative tensor dimension");
      shape.push_back(d);
      count *= static_cast<std::uint64_t>(d);
    }
    if (count > (bytes_.size() - pos_) / sizeof(float)) throw MalformedFile(what_ + ": truncated tensor data");
    std::vector<float> values(count);
    std::memcpy(values.data(), bytes_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
    return ad::Tensor(std::move(shape), std::move(values));
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw MalformedFile(what_ + ": truncated chunk");
  }
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// Ordered chunk list; names are unique.
struct Container {
  std::vector<std::pair<std::string, std::string>> chunks;

  void add(const std::string& name, std::string payload) {
    if (find(name)) throw StateError("checkpoint: duplicate chunk " + name);
    chunks.emplace_back(name, std::move(payload));
  }
  const std::string* find(const std::string& name) const {
    for (const auto& [n, p] : chunks)
      if (n == name) return &p;
    return nullptr;
  }
  const std::string& at(const std::string& name) const {
    if (const std::string* p = find(name)) return *p;
    throw MalformedFile("checkpoint: missing chunk " + name);
  }

  std::string serialize() const {
    Payload out;
    for (char ch : kMagic) out.put(ch);
    out.put<std::uint32_t>(kVersion);
    for (const auto& [name, payload] : chunks) {
      out.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
      for (char ch : name) out.put(ch);
      out.put_string(payload);
    }
    return out.bytes();
  }

  static Container parse(const std::string& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
      throw MalformedFile("checkpoint: missing SLGS magic");
    const std::string body = bytes.substr(4);
    Cursor c(body, "checkpoint");
    const auto version = c.get<std::uint32_t>();
    if (version != kVersion)
      throw MalformedFile("checkpoint: unsupported version " + std::to_string(version));
    Container out;
    while (!c.at_end()) {
      const auto name_len = c.get<std::uint32_t>();
      if (name_len > 4096) throw MalformedFile("checkpoint: chunk name too long");
      std::string name;
      for (std::uint32_t i = 0; i < name_len; ++i) name.push_back(c.get<char>());
      out.add(name, c.get_string());
    }
    return out;
  }

  void write(const std::filesystem::path& path) const {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) throw IoError("cannot write " + tmp.string());
      const std::string bytes = serialize();
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  static Container read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }
};

}  // namespace slgs::checkpoint
