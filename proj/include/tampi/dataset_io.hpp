#pragma once

// Versioned binary episode container ("OPTD"). Little-endian throughout, an
// index table for O(1) random episode access, a streaming writer so large
// collections never sit in memory, byte-exact episode copies (filters move
// episodes without re-encoding them), deterministic train/val splitting, and
// a human-readable manifest side-file.
//
// File layout:
//   magic "OPTD" | version u16 | episode count u32 | index offset u64
//   episode records, back to back
//   index: count x (offset u64, length u64)
// Episode record:
//   meta length u64, meta bytes, block count u32, blocks
//   meta:  task str | seed u64 | success u8 | cost f64 | plan_wall_ms f64 |
//          action_mode u8 | stall_steps u32 | steps u32 | init_state str |
//          plan_trace str                                (str = u32 len + bytes)
//   block: name str | dtype u8 | rank u8 | shape u32 x rank | nbytes u64 | bytes

#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "tampi/common.hpp"
#include "tampi/rng.hpp"

namespace tampi {

inline constexpr char kContainerMagic[4] = {'O', 'P', 'T', 'D'};
inline constexpr uint16_t kContainerVersion = 1;
inline constexpr size_t kContainerHeaderSize = 4 + 2 + 4 + 8;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class DatasetError : public std::runtime_error {
public:
  explicit DatasetError(const std::string& msg) : std::runtime_error(msg) {}
};

class BadMagic final : public DatasetError {
public:
  explicit BadMagic(const std::string& msg) : DatasetError(msg) {}
};

class UnsupportedVersion final : public DatasetError {
public:
  explicit UnsupportedVersion(const std::string& msg) : DatasetError(msg) {}
};

/// A declared length runs past the bytes that actually exist.
class TruncatedBlock final : public DatasetError {
public:
  explicit TruncatedBlock(const std::string& msg) : DatasetError(msg) {}
};

/// Declared shape, dtype, and byte length disagree.
class ShapeMismatch final : public DatasetError {
public:
  explicit ShapeMismatch(const std::string& msg) : DatasetError(msg) {}
};

// ---------------------------------------------------------------------------
// Episode model
// ---------------------------------------------------------------------------

enum class DType : uint8_t { u8 = 1, f32 = 2 };

inline size_t dtype_size(DType t) { return t == DType::u8 ? 1 : 4; }

struct TensorBlock {
  std::string name;
  DType dtype = DType::u8;
  std::vector<uint32_t> shape;
  std::vector<uint8_t> bytes;

  size_t elems() const {
    size_t n = 1;
    for (uint32_t d : shape) n *= d;
    return n;
  }

  static TensorBlock f32(std::string name, std::vector<uint32_t> shape,
                         const std::vector<float>& data) {
    TensorBlock b{std::move(name), DType::f32, std::move(shape), {}};
    if (b.elems() != data.size())
      throw ContractError(str_printf("block %s: %zu values for shape of %zu", b.name.c_str(),
                                     data.size(), b.elems()));
    b.bytes.resize(data.size() * 4);
    std::memcpy(b.bytes.data(), data.data(), b.bytes.size());
    return b;
  }

  static TensorBlock u8(std::string name, std::vector<uint32_t> shape, std::vector<uint8_t> data) {
    TensorBlock b{std::move(name), DType::u8, std::move(shape), std::move(data)};
    if (b.elems() != b.bytes.size())
      throw ContractError(str_printf("block %s: %zu bytes for shape of %zu", b.name.c_str(),
                                     b.bytes.size(), b.elems()));
    return b;
  }

  std::vector<float> as_f32() const {
    if (dtype != DType::f32) throw ContractError("block " + name + " is not f32");
    std::vector<float> out(bytes.size() / 4);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
  }
};

struct EpisodeMeta {
  std::string task;
  uint64_t seed = 0;
  bool success = false;
  double cost = 0.0;
  double plan_wall_ms = 0.0;
  uint8_t action_mode = 0;  // matches ActionMode's enumerator order
  uint32_t stall_steps = 0;
  uint32_t steps = 0;
  std::string init_state;  // serialized world snapshot at t = 0
  std::string plan_trace;  // planner provenance, JSON
};

struct Episode {
  EpisodeMeta meta;
  std::vector<TensorBlock> blocks;

  const TensorBlock* find(const std::string& name) const {
    for (auto& b : blocks)
      if (b.name == name) return &b;
    return nullptr;
  }
  const TensorBlock& block(const std::string& name) const {
    if (const TensorBlock* b = find(name)) return *b;
    throw DatasetError("episode has no block named " + name);
  }
};

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

namespace detail {

inline void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}
template <typename T>
inline void put_scalar(std::string& out, T v) {
  put_bytes(out, &v, sizeof v);
}
inline void put_str(std::string& out, const std::string& s) {
  if (s.size() > std::numeric_limits<uint32_t>::max()) throw ContractError("string too long");
  put_scalar<uint32_t>(out, static_cast<uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

/// Bounded reader over one episode's bytes; every take is length-checked so a
/// corrupt length field throws instead of over-reading or over-allocating.
struct Cursor {
  const uint8_t* p;
  size_t n;
  size_t off = 0;
  std::string where;  // "episode 12" or "episode 12 block 'actions'"

  void need(size_t k) const {
    if (k > n - off)  // off <= n always; phrased to dodge overflow on corrupt k
      throw TruncatedBlock(str_printf("%s: needs %zu bytes at offset %zu but only %zu exist",
                                      where.c_str(), k, off, n));
  }
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p + off, sizeof v);
    off += sizeof v;
    return v;
  }
  std::string take_str() {
    auto len = take<uint32_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(p + off), len);
    off += len;
    return s;
  }
  std::vector<uint8_t> take_bytes(size_t k) {
    need(k);
    std::vector<uint8_t> v(p + off, p + off + k);
    off += k;
    return v;
  }
};

}  // namespace detail

inline std::string encode_episode(const Episode& e) {
  std::string meta;
  detail::put_str(meta, e.meta.task);
  detail::put_scalar<uint64_t>(meta, e.meta.seed);
  detail::put_scalar<uint8_t>(meta, e.meta.success ? 1 : 0);
  detail::put_scalar<double>(meta, e.meta.cost);
  detail::put_scalar<double>(meta, e.meta.plan_wall_ms);
  detail::put_scalar<uint8_t>(meta, e.meta.action_mode);
  detail::put_scalar<uint32_t>(meta, e.meta.stall_steps);
  detail::put_scalar<uint32_t>(meta, e.meta.steps);
  detail::put_str(meta, e.meta.init_state);
  detail::put_str(meta, e.meta.plan_trace);

  std::string out;
  detail::put_scalar<uint64_t>(out, meta.size());
  out += meta;
  detail::put_scalar<uint32_t>(out, static_cast<uint32_t>(e.blocks.size()));
  for (auto& b : e.blocks) {
    if (b.bytes.size() != b.elems() * dtype_size(b.dtype))
      throw ContractError(str_printf("block %s: %zu bytes, shape wants %zu", b.name.c_str(),
                                     b.bytes.size(), b.elems() * dtype_size(b.dtype)));
    detail::put_str(out, b.name);
    detail::put_scalar<uint8_t>(out, static_cast<uint8_t>(b.dtype));
    detail::put_scalar<uint8_t>(out, static_cast<uint8_t>(b.shape.size()));
    for (uint32_t d : b.shape) detail::put_scalar<uint32_t>(out, d);
    detail::put_scalar<uint64_t>(out, b.bytes.size());
    detail::put_bytes(out, b.bytes.data(), b.bytes.size());
  }
  return out;
}

inline EpisodeMeta decode_meta(detail::Cursor& c) {
  EpisodeMeta m;
  m.task = c.take_str();
  m.seed = c.take<uint64_t>();
  m.success = c.take<uint8_t>() != 0;
  m.cost = c.take<double>();
  m.plan_wall_ms = c.take<double>();
  m.action_mode = c.take<uint8_t>();
  m.stall_steps = c.take<uint32_t>();
  m.steps = c.take<uint32_t>();
  m.init_state = c.take_str();
  m.plan_trace = c.take_str();
  return m;
}

inline Episode decode_episode(const uint8_t* data, size_t n, uint32_t index) {
  detail::Cursor c{data, n, 0, str_printf("episode %u", index)};
  auto meta_len = c.take<uint64_t>();
  c.need(meta_len);
  detail::Cursor mc{data + c.off, static_cast<size_t>(meta_len), 0, c.where + " meta"};
  Episode e;
  e.meta = decode_meta(mc);
  c.off += meta_len;

  auto n_blocks = c.take<uint32_t>();
  for (uint32_t bi = 0; bi < n_blocks; ++bi) {
    TensorBlock b;
    b.name = c.take_str();
    c.where = str_printf("episode %u block '%s'", index, b.name.c_str());
    auto dt = c.take<uint8_t>();
    if (dt != 1 && dt != 2)
      throw ShapeMismatch(c.where + str_printf(": unknown dtype tag %u", dt));
    b.dtype = static_cast<DType>(dt);
    auto rank = c.take<uint8_t>();
    for (uint8_t r = 0; r < rank; ++r) b.shape.push_back(c.take<uint32_t>());
    auto nbytes = c.take<uint64_t>();
    c.need(nbytes);
    if (nbytes != b.elems() * dtype_size(b.dtype))
      throw ShapeMismatch(c.where + str_printf(": %llu bytes for a shape of %zu elements",
                                               static_cast<unsigned long long>(nbytes),
                                               b.elems()));
    b.bytes = c.take_bytes(nbytes);
    e.blocks.push_back(std::move(b));
  }
  if (c.off != n)
    throw ShapeMismatch(str_printf("episode %u: %zu trailing bytes", index, n - c.off));
  return e;
}

/// Semantic invariants beyond structure: every rank>=1 block spans the same
/// number of steps as the meta block declares.
inline void validate_episode(const Episode& e, uint32_t index) {
  for (auto& b : e.blocks) {
    if (b.shape.empty()) continue;
    if (b.shape[0] != e.meta.steps)
      throw ShapeMismatch(str_printf("episode %u block '%s': leading dim %u, meta declares %u steps",
                                     index, b.name.c_str(), b.shape[0], e.meta.steps));
  }
}

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

class DatasetWriter {
public:
  explicit DatasetWriter(const std::string& path) : path_(path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    f_.open(path, std::ios::binary | std::ios::trunc);
    if (!f_) throw DatasetError("cannot open for writing: " + path);
    std::string header(kContainerHeaderSize, '\0');
    std::memcpy(header.data(), kContainerMagic, 4);
    f_.write(header.data(), static_cast<std::streamsize>(header.size()));
    at_ = kContainerHeaderSize;
  }

  void add(const Episode& e) { add_raw(encode_episode(e)); }

  /// Appends an already-encoded record byte-for-byte (filters use this to
  /// keep surviving episodes identical to their inputs).
  void add_raw(const std::string& bytes) {
    if (finalized_) throw ContractError("writer already finalized");
    index_.emplace_back(at_, bytes.size());
    f_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    at_ += bytes.size();
  }

  uint32_t count() const { return static_cast<uint32_t>(index_.size()); }

  void finalize() {
    if (finalized_) return;
    uint64_t index_off = at_;
    std::string tail;
    for (auto& [off, len] : index_) {
      detail::put_scalar<uint64_t>(tail, off);
      detail::put_scalar<uint64_t>(tail, len);
    }
    f_.write(tail.data(), static_cast<std::streamsize>(tail.size()));
    f_.seekp(4);
    std::string patch;
    detail::put_scalar<uint16_t>(patch, kContainerVersion);
    detail::put_scalar<uint32_t>(patch, count());
    detail::put_scalar<uint64_t>(patch, index_off);
    f_.write(patch.data(), static_cast<std::streamsize>(patch.size()));
    f_.flush();
    if (!f_) throw DatasetError("write failed: " + path_);
    f_.close();
    finalized_ = true;
  }

private:
  std::string path_;
  std::ofstream f_;
  uint64_t at_ = 0;
  std::vector<std::pair<uint64_t, uint64_t>> index_;
  bool finalized_ = false;
};

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

class DatasetReader {
public:
  explicit DatasetReader(const std::string& path) : path_(path) {
    f_.open(path, std::ios::binary);
    if (!f_) throw DatasetError("cannot open: " + path);
    f_.seekg(0, std::ios::end);
    file_size_ = static_cast<uint64_t>(f_.tellg());

    std::string header = read_at(0, kContainerHeaderSize, "header");
    if (std::memcmp(header.data(), kContainerMagic, 4) != 0)
      throw BadMagic(path + ": not an OPTD container");
    uint16_t version;
    std::memcpy(&version, header.data() + 4, 2);
    if (version != kContainerVersion)
      throw UnsupportedVersion(str_printf("%s: version %u, supported %u", path.c_str(), version,
                                          kContainerVersion));
    uint32_t count;
    std::memcpy(&count, header.data() + 6, 4);
    uint64_t index_off;
    std::memcpy(&index_off, header.data() + 10, 8);

    uint64_t index_bytes = static_cast<uint64_t>(count) * 16;
    if (index_off < kContainerHeaderSize || index_off > file_size_ ||
        index_bytes > file_size_ - index_off)
      throw TruncatedBlock(str_printf("%s: index (%u entries at %llu) runs past %llu file bytes",
                                      path.c_str(), count,
                                      static_cast<unsigned long long>(index_off),
                                      static_cast<unsigned long long>(file_size_)));
    std::string raw_index = read_at(index_off, index_bytes, "index");
    index_.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
      uint64_t off, len;
      std::memcpy(&off, raw_index.data() + i * 16, 8);
      std::memcpy(&len, raw_index.data() + i * 16 + 8, 8);
      if (off < kContainerHeaderSize || off > index_off || len > index_off - off)
        throw TruncatedBlock(str_printf("%s: episode %u range [%llu, +%llu) outside data section",
                                        path.c_str(), i, static_cast<unsigned long long>(off),
                                        static_cast<unsigned long long>(len)));
      index_[i] = {off, len};
    }
  }

  uint32_t count() const { return static_cast<uint32_t>(index_.size()); }
  uint64_t bytes_read() const { return bytes_read_; }
  const std::string& path() const { return path_; }

  /// Byte-exact record copy, straight from the file.
  std::string raw(uint32_t i) const {
    check_index(i);
    return read_at(index_[i].first, index_[i].second, "episode");
  }

  Episode episode(uint32_t i) const {
    std::string bytes = raw(i);
    Episode e = decode_episode(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size(), i);
    validate_episode(e, i);
    return e;
  }

  /// Decodes only the meta section: reads the meta length and that many bytes,
  /// never the tensor payload.
  EpisodeMeta meta(uint32_t i) const {
    check_index(i);
    auto [off, len] = index_[i];
    if (len < 8) throw TruncatedBlock(str_printf("episode %u: %llu-byte record", i,
                                                 static_cast<unsigned long long>(len)));
    std::string head = read_at(off, 8, "meta length");
    uint64_t meta_len;
    std::memcpy(&meta_len, head.data(), 8);
    if (meta_len > len - 8)
      throw TruncatedBlock(str_printf("episode %u: meta of %llu bytes in a %llu-byte record", i,
                                      static_cast<unsigned long long>(meta_len),
                                      static_cast<unsigned long long>(len)));
    std::string meta_bytes = read_at(off + 8, meta_len, "meta");
    detail::Cursor c{reinterpret_cast<const uint8_t*>(meta_bytes.data()), meta_bytes.size(), 0,
                     str_printf("episode %u meta", i)};
    return decode_meta(c);
  }

private:
  void check_index(uint32_t i) const {
    if (i >= count()) throw ContractError(str_printf("episode %u of %u", i, count()));
  }

  std::string read_at(uint64_t off, uint64_t len, const char* what) const {
    if (off > file_size_ || len > file_size_ - off)
      throw TruncatedBlock(str_printf("%s: %s at %llu (+%llu) past end of file", path_.c_str(),
                                      what, static_cast<unsigned long long>(off),
                                      static_cast<unsigned long long>(len)));
    std::string out(len, '\0');
    f_.seekg(static_cast<std::streamoff>(off));
    f_.read(out.data(), static_cast<std::streamsize>(len));
    if (!f_) throw DatasetError(path_ + ": read failed");
    bytes_read_ += len;
    return out;
  }

  std::string path_;
  mutable std::ifstream f_;
  mutable uint64_t bytes_read_ = 0;
  uint64_t file_size_ = 0;
  std::vector<std::pair<uint64_t, uint64_t>> index_;
};

/// Full scan: every episode decodes and satisfies the per-episode invariants.
inline void validate_container(const std::string& path) {
  DatasetReader r(path);
  for (uint32_t i = 0; i < r.count(); ++i) r.episode(i);
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitResult {
  std::vector<uint32_t> train_ids;
  std::vector<uint32_t> val_ids;
  std::vector<std::string> val_states;  // initial world snapshots, one per val id
};

/// Seeded shuffle then partition. The validation episodes' initial states are
/// returned so evaluation can reset a fresh world to exactly those problems.
inline SplitResult split_dataset(const DatasetReader& r, double ratio, uint64_t seed) {
  if (r.count() < 10) throw ContractError("split needs at least 10 episodes");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("split ratio must be in (0, 1)");
  std::vector<uint32_t> ids(r.count());
  for (uint32_t i = 0; i < r.count(); ++i) ids[i] = i;
  Rng rng(seed, 4000);
  for (size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[rng.below(static_cast<uint32_t>(i))]);

  size_t n_train = static_cast<size_t>(ratio * static_cast<double>(ids.size()) + 0.5);
  n_train = std::min(std::max<size_t>(n_train, 1), ids.size() - 1);
  SplitResult s;
  s.train_ids.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
  s.val_ids.assign(ids.begin() + static_cast<long>(n_train), ids.end());
  for (uint32_t id : s.val_ids) s.val_states.push_back(r.meta(id).init_state);
  return s;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline std::string manifest_path(const std::string& container_path) {
  return container_path + ".manifest.txt";
}

/// Human-readable sidecar: one line per episode plus any provenance notes
/// (curation thresholds, split membership) the caller appends.
inline std::string manifest_text(const DatasetReader& r, const std::vector<std::string>& notes = {},
                                 const SplitResult* split = nullptr) {
  std::vector<char> role;
  if (split) {
    role.assign(r.count(), '?');
    for (uint32_t id : split->train_ids) role[id] = 't';
    for (uint32_t id : split->val_ids) role[id] = 'v';
  }
  std::ostringstream out;
  out << "container " << r.path() << "\n";
  out << "episodes " << r.count() << "\n";
  for (auto& note : notes) out << "note " << note << "\n";
  for (uint32_t i = 0; i < r.count(); ++i) {
    EpisodeMeta m = r.meta(i);
    out << str_printf("episode %u task=%s seed=%llu success=%d steps=%u cost=%s", i,
                      m.task.c_str(), static_cast<unsigned long long>(m.seed), m.success ? 1 : 0,
                      m.steps, fmt_double(m.cost).c_str());
    if (split) out << " split=" << (role[i] == 't' ? "train" : role[i] == 'v' ? "val" : "none");
    out << "\n";
  }
  return out.str();
}

}  // namespace tampi
