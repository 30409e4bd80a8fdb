#pragma once

// Binary checkpoint, all integers little-endian:
//   "SFCK" | u32 version | u32 config_len | config text (UTF-8)
//   | u32 tensor_count | tensors... | u32 crc32(all preceding bytes)
// tensor := u32 name_len | name | u32 rank | u64 dims[rank] | f32 data[]
// Head gates travel as the tensor named "gates".

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cfair/errors.hpp"
#include "cfair/model.hpp"

namespace cfair {

inline constexpr char kCheckpointMagic[4] = {'S', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  std::size_t offset() const { return off_; }
  std::size_t remaining() const { return n_ - off_; }

  void need(std::size_t k, const char* what) {
    if (remaining() < k) throw DataError(std::string("checkpoint truncated while reading ") + what + " at byte offset " + std::to_string(off_));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[off_ + i]) << (8 * i);
    off_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[off_ + i]) << (8 * i);
    off_ += 8;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(p_ + off_), n);
    off_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32("tensor data")); }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
};

inline std::string heads_to_text(const std::vector<std::vector<int>>& block_heads) {
  std::string s;
  for (std::size_t b = 0; b < block_heads.size(); ++b) {
    if (b) s += ';';
    for (std::size_t i = 0; i < block_heads[b].size(); ++i) {
      if (i) s += ',';
      s += std::to_string(block_heads[b][i]);
    }
  }
  return s;
}

inline std::vector<std::vector<int>> heads_from_text(const std::string& s, std::size_t n_blocks) {
  std::vector<std::vector<int>> out(1);
  std::string h;
  auto flush = [&] {
    if (h.empty()) return;
    std::size_t used = 0;
    try {
      out.back().push_back(std::stoi(h, &used));
    } catch (const std::exception&) {
    }
    if (used != h.size()) throw SchemaError("checkpoint: bad block_heads entry '" + h + "'", "block_heads");
    h.clear();
  };
  for (char c : s) {
    if (c == ';') {
      flush();
      out.emplace_back();
    } else if (c == ',') {
      flush();
    } else {
      h += c;
    }
  }
  flush();
  if (out.size() != n_blocks) throw SchemaError("checkpoint: block_heads lists " + std::to_string(out.size()) + " blocks", "block_heads");
  return out;
}

}  // namespace detail

// Config text stored in a checkpoint: the model config plus block_heads when
// the model has been structurally compacted.
template <typename T>
std::string checkpoint_config_text(const TransformerLM<T>& m) {
  std::string text = to_text(m.config);
  if (m.compacted()) text += "block_heads=" + detail::heads_to_text(m.block_heads) + "\n";
  return text;
}

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const TransformerLM<T>& m) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string cfg = checkpoint_config_text(m);
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.u32(static_cast<std::uint32_t>(m.params.size() + 1));
  auto put = [&](const std::string& name, const Tensor<T>& t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) w.u64(d);
    for (T x : t.data) w.f32(static_cast<float>(x));
  };
  for (const auto& [name, t] : m.params) put(name, t);
  put("gates", m.gates);
  auto& buf = w.buffer();
  w.u32(crc32_of(buf.data(), buf.size()));
  return std::move(buf);
}

template <typename T>
TransformerLM<T> deserialize_checkpoint(const std::uint8_t* data, std::size_t n) {
  if (n < 4 || std::memcmp(data, kCheckpointMagic, 4) != 0) throw DataError("checkpoint: bad magic (expected SFCK)");
  if (n < 12) throw ChecksumError("checkpoint: file too short for header and checksum", n);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(data[n - 4 + i]) << (8 * i);
  if (crc32_of(data, n - 4) != stored) throw ChecksumError("checkpoint: CRC32 mismatch", n - 4);

  detail::ByteReader r(data, n - 4);
  r.str(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t cfg_len = r.u32("config length");
  std::map<std::string, std::string> extra;
  TransformerLM<T> m;
  m.config = config_from_text(r.str(cfg_len, "config"), &extra);
  try {
    m.config.validate();
  } catch (const std::invalid_argument& e) {
    throw SchemaError(std::string("checkpoint: ") + e.what(), "config");
  }
  m.block_heads.assign(m.config.n_blocks, {});
  if (auto it = extra.find("block_heads"); it != extra.end()) {
    m.block_heads = detail::heads_from_text(it->second, m.config.n_blocks);
  } else {
    for (auto& hs : m.block_heads)
      for (std::size_t h = 0; h < m.config.n_heads; ++h) hs.push_back(static_cast<int>(h));
  }
  const std::uint32_t count = r.u32("tensor count");
  bool have_gates = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("tensor name length");
    std::string name = r.str(name_len, "tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > 8) throw DataError("checkpoint: tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t elems = 1;
    for (auto& d : shape) {
      d = r.u64("tensor dims");
      if (d != 0 && elems > r.remaining() / d) throw DataError("checkpoint: tensor '" + name + "' larger than file");
      elems *= d;
    }
    r.need(elems * 4, "tensor data");
    Tensor<T> t(shape);
    for (auto& x : t.data) x = static_cast<T>(r.f32());
    if (name == "gates") {
      m.gates = std::move(t);
      have_gates = true;
    } else {
      m.params.insert_or_assign(std::move(name), std::move(t));
    }
  }
  if (r.remaining() != 0) throw DataError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes before checksum");
  if (!have_gates) throw SchemaError("checkpoint: missing gates tensor", "gates");
  if (m.gates.shape != Shape{m.config.n_blocks, m.config.n_heads}) throw SchemaError("checkpoint: gates tensor has wrong shape", "gates");
  for (const auto& hs : m.block_heads)
    for (std::size_t i = 0; i < hs.size(); ++i)
      if (hs[i] < 0 || static_cast<std::size_t>(hs[i]) >= m.config.n_heads || (i && hs[i] <= hs[i - 1]))
        throw SchemaError("checkpoint: block_heads entries must be increasing head ids", "block_heads");
  const auto shapes = expected_param_shapes(m.config, m.block_heads);
  if (shapes.size() != m.params.size()) throw SchemaError("checkpoint: expected " + std::to_string(shapes.size()) + " parameter tensors, found " + std::to_string(m.params.size()), "tensors");
  for (const auto& [name, shape] : shapes) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw SchemaError("checkpoint: missing tensor '" + name + "'", name);
    if (it->second.shape != shape) throw SchemaError("checkpoint: tensor '" + name + "' has the wrong shape", name);
  }
  return m;
}

// Written to a temporary sibling and renamed into place.
template <typename T>
void save_checkpoint(const TransformerLM<T>& m, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(m);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

template <typename T = float>
TransformerLM<T> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize_checkpoint<T>(bytes.data(), bytes.size());
}

// CRC32 over parameter names and their in-memory values at full precision.
template <typename T>
std::uint32_t model_checksum(const TransformerLM<T>& m) {
  uLong crc = crc32(0L, Z_NULL, 0);
  auto feed = [&](const std::string& name, const Tensor<T>& t) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.data.data()), static_cast<uInt>(t.data.size() * sizeof(T)));
  };
  for (const auto& [name, t] : m.params) feed(name, t);
  feed("gates", m.gates);
  return static_cast<std::uint32_t>(crc);
}

}  // namespace cfair
