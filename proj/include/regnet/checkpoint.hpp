#pragma once
// RGNT checkpoint container. All integers and floats are little-endian.
//
//   offset  size  field
//   0       4     magic "RGNT"
//   4       2     u16 format version (kCheckpointVersion)
//   6       4     u32 metadata length M
//   10      M     metadata, UTF-8 JSON
//   10+M    8     u64 FNV-1a hash of every byte that follows this field
//   18+M    4     u32 tensor count N
//           ...   N table entries:
//                   u16 name length L, L bytes UTF-8 name,
//                   u8 dtype (0 = f32), u8 rank R, R x u32 dims,
//                   u64 byte offset into the data section
//           ...   data section: raw f32 values, tensors back to back
//
// The hash also covers the metadata, so any edit to the header or payload
// after writing is detected at load time.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "regnet/adam.hpp"
#include "regnet/image.hpp"
#include "regnet/layers.hpp"
#include "regnet/random.hpp"

namespace regnet {

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'R', 'G', 'N', 'T'};

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  void add(std::string name, const Tensor& t) {
    tensors.push_back({std::move(name), t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
  void put_f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put(u);
  }
  void put_bytes(const std::string& s) { bytes_ += s; }
  void put_f32s(const std::vector<float>& values) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes_.append(reinterpret_cast<const char*>(values.data()), 4 * values.size());
    } else {
      for (float v : values) put_f32(v);
    }
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::size_t pos, std::string path)
      : bytes_(bytes), pos_(pos), path_(std::move(path)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(U);
    return value;
  }
  float get_f32() {
    const auto u = get<std::uint32_t>();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  void get_f32s(std::vector<float>& values) {
    if constexpr (std::endian::native == std::endian::little) {
      need(4 * values.size());
      std::memcpy(values.data(), bytes_.data() + pos_, 4 * values.size());
      pos_ += 4 * values.size();
    } else {
      for (auto& v : values) v = get_f32();
    }
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t pos) { pos_ = pos; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint '" + path_ + "' is truncated");
  }
  const std::string& bytes_;
  std::size_t pos_;
  std::string path_;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter payload;
  payload.put(static_cast<std::uint32_t>(c.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (t.name.size() > 0xffff) throw std::invalid_argument("checkpoint tensor name too long");
    if (static_cast<Index>(t.values.size()) != numel(t.shape)) {
      throw DimensionError("checkpoint tensor '" + t.name + "' data does not match its shape");
    }
    payload.put(static_cast<std::uint16_t>(t.name.size()));
    payload.put_bytes(t.name);
    payload.put(std::uint8_t{0});
    payload.put(static_cast<std::uint8_t>(t.shape.size()));
    for (Index d : t.shape) payload.put(static_cast<std::uint32_t>(d));
    payload.put(offset);
    offset += 4 * t.values.size();
  }
  for (const auto& t : c.tensors) {
    payload.put_f32s(t.values);
  }
  const std::string meta = c.metadata.dump();
  detail::ByteWriter head;
  head.put_bytes(std::string(kCheckpointMagic, 4));
  head.put(kCheckpointVersion);
  head.put(static_cast<std::uint32_t>(meta.size()));
  head.put_bytes(meta);
  head.put(fnv1a64(payload.bytes(), fnv1a64(meta)));
  return head.bytes() + payload.bytes();
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::ByteReader r(bytes, 0, path);
  if (r.get_bytes(4) != std::string(kCheckpointMagic, 4)) {
    throw CheckpointError("'" + path + "' is not an RGNT checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint '" + path + "' has format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::string meta = r.get_bytes(r.get<std::uint32_t>());
  const auto stored_hash = r.get<std::uint64_t>();
  const std::string_view payload(bytes.data() + r.pos(), bytes.size() - r.pos());
  if (fnv1a64(payload, fnv1a64(meta)) != stored_hash) {
    throw CheckpointError("checkpoint '" + path + "' failed its hash check (corrupt or modified)");
  }
  Checkpoint c;
  try {
    c.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint '" + path + "' has malformed metadata: " + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.get_bytes(r.get<std::uint16_t>());
    if (r.get<std::uint8_t>() != 0) throw CheckpointError("checkpoint '" + path + "': unsupported dtype");
    const auto rank = r.get<std::uint8_t>();
    for (int k = 0; k < rank; ++k) t.shape.push_back(static_cast<Index>(r.get<std::uint32_t>()));
    offsets.push_back(r.get<std::uint64_t>());
    c.tensors.push_back(std::move(t));
  }
  const std::size_t data_start = r.pos();
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    auto& t = c.tensors[i];
    r.seek(data_start + offsets[i]);
    t.values.resize(static_cast<std::size_t>(numel(t.shape)));
    r.get_f32s(t.values);
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = encode_checkpoint(c);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const IoError&) {
    throw IoError("cannot read checkpoint '" + path.string() + "'");
  }
  return decode_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Parameter and optimizer state transfer

inline void store_parameters(Checkpoint& c, const std::vector<NamedTensor>& params) {
  for (const auto& [name, t] : params) c.add(name, t);
}

/// Copies stored values into `params`; every parameter must be present with
/// the same shape.
inline void load_parameters(const Checkpoint& c, const std::vector<NamedTensor>& params) {
  for (const auto& [name, t] : params) {
    const auto* stored = c.find(name);
    if (!stored) throw ConfigError("checkpoint has no tensor '" + name + "'");
    if (stored->shape != t.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + to_string(stored->shape) +
                        ", network expects " + to_string(t.shape()));
    }
    Tensor target = t;
    std::copy(stored->values.begin(), stored->values.end(), target.mutable_data().begin());
  }
}

inline void store_adam_state(Checkpoint& c, const std::vector<NamedTensor>& params, const AdamState<float>& s) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Shape& shape = params[k].second.shape();
    c.tensors.push_back({"adam.m." + params[k].first, shape, s.m[k]});
    c.tensors.push_back({"adam.v." + params[k].first, shape, s.v[k]});
  }
  c.metadata["adam_step"] = s.step;
}

inline AdamState<float> load_adam_state(const Checkpoint& c, const std::vector<NamedTensor>& params) {
  AdamState<float> s;
  for (const auto& [name, t] : params) {
    const auto* m = c.find("adam.m." + name);
    const auto* v = c.find("adam.v." + name);
    if (!m || !v) throw ConfigError("checkpoint has no optimizer state for '" + name + "'");
    s.m.push_back(m->values);
    s.v.push_back(v->values);
  }
  s.step = c.metadata.at("adam_step").get<long>();
  return s;
}

}  // namespace regnet
