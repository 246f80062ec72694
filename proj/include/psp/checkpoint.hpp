#pragma once

// Binary checkpoints. Layout, all integers little-endian:
//
//   "PSPC"  u32 version  u64 iteration  u64 architecture hash  u32 entry count
//   entry*: u32 name length, name bytes (UTF-8), u8 dtype (1 = f32, 2 = f64),
//           u8 rank, u64 dims[rank], raw little-endian values
//   u32 CRC-32 (zlib polynomial) of every preceding byte
//
// Entries are sorted by name: model tensors under their layer names, momentum
// buffers under "optim/".

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "psp/error.hpp"
#include "psp/model.hpp"
#include "psp/optim.hpp"

namespace psp {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'P', 'S', 'P', 'C'};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t architecture_hash(const ModelConfig& cfg) { return fnv1a64(cfg.architecture()); }

template <typename T>
struct Checkpoint {
  std::uint64_t iter = 0;
  std::uint64_t arch_hash = 0;
  NamedTensors<T> entries;  // sorted by name
};

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                  std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
  auto b = std::bit_cast<Bits>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(b >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size, std::string what) : p_(data), end_(data + size), what_(std::move(what)) {}

  template <typename U>
  U get() {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
    need(sizeof(U));
    Bits b = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) b |= static_cast<Bits>(static_cast<Bits>(p_[i]) << (8 * i));
    p_ += sizeof(U);
    return std::bit_cast<U>(b);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }

  bool done() const { return p_ == end_; }

 private:
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw FormatError(what_ + ": unexpected end of data");
  }

  const std::uint8_t* p_;
  const std::uint8_t* end_;
  std::string what_;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces
  while (n > 0) {
    auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& ck) {
  auto entries = ck.entries;
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].name == entries[i - 1].name) throw std::invalid_argument("checkpoint: duplicate entry " + entries[i].name);
  }
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, ck.iter);
  detail::put_le(out, ck.arch_hash);
  detail::put_le(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_le(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(detail::dtype_tag<T>());
    const auto& shape = e.tensor.shape();
    if (shape.size() > 255) throw std::invalid_argument("checkpoint: rank too large for " + e.name);
    out.push_back(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) detail::put_le(out, static_cast<std::uint64_t>(d));
    for (T v : e.tensor.data()) detail::put_le(out, v);
  }
  detail::put_le(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 4 + 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(what + ": not a checkpoint (bad magic)");
  }
  const auto body = bytes.size() - 4;
  detail::Reader tail(bytes.data() + body, 4, what);
  if (tail.get<std::uint32_t>() != detail::crc32_of(bytes.data(), body)) {
    throw FormatError(what + ": CRC mismatch (file truncated or corrupted)");
  }
  detail::Reader r(bytes.data() + 4, body - 4, what);
  auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": unknown format version " + std::to_string(version));
  }
  Checkpoint<T> ck;
  ck.iter = r.get<std::uint64_t>();
  ck.arch_hash = r.get<std::uint64_t>();
  auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.bytes(r.get<std::uint32_t>());
    auto dtype = r.get<std::uint8_t>();
    if (dtype != detail::dtype_tag<T>()) throw FormatError(what + ": entry " + name + " has unexpected dtype");
    Shape shape(r.get<std::uint8_t>());
    for (auto& d : shape) d = static_cast<std::int64_t>(r.get<std::uint64_t>());
    std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) v = r.get<T>();
    if (!ck.entries.empty() && !(ck.entries.back().name < name)) {
      throw FormatError(what + ": entries not sorted or not unique at " + name);
    }
    ck.entries.push_back({name, Tensor<T>::from_data(std::move(shape), std::move(values)), EntryKind::Buffer});
  }
  if (!r.done()) throw FormatError(what + ": trailing bytes after the last entry");
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const PSPNet<T>& model, const SGD<T>& optim, std::uint64_t iter) {
  Checkpoint<T> ck;
  ck.iter = iter;
  ck.arch_hash = architecture_hash(model.config());
  ck.entries = model.named_tensors();
  auto st = optim.state();
  ck.entries.insert(ck.entries.end(), st.begin(), st.end());
  auto bytes = encode_checkpoint(ck);
  // write beside the target, then rename, so a crash never leaves a half file under the real name
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint<T>(bytes, path.string());
}

struct LoadOptions {
  bool allow_prune = false;  // drop aux/ entries when the target model has no auxiliary head
};

/// Copies a checkpoint into `model` (and `optim` when given) after checking
/// that its tensor census matches the model's exactly. Nothing is modified
/// unless every check passes. Returns the stored iteration.
template <typename T>
std::uint64_t apply_checkpoint(const Checkpoint<T>& ck, PSPNet<T>& model, SGD<T>* optim, const LoadOptions& opts = {}) {
  std::map<std::string, const Tensor<T>*> model_part, optim_part;
  std::vector<std::string> pruned;
  for (const auto& e : ck.entries) {
    const bool aux = e.name.starts_with("aux/") || e.name.starts_with(kOptimPrefix + "aux/");
    if (aux && !model.config().aux_enabled && opts.allow_prune) {
      pruned.push_back(e.name);
      continue;
    }
    (e.name.starts_with(kOptimPrefix) ? optim_part : model_part)[e.name] = &e.tensor;
  }

  std::vector<std::string> missing, unexpected, mismatched;
  const auto targets = model.named_tensors();
  std::set<std::string> expected;
  for (const auto& t : targets) {
    expected.insert(t.name);
    auto it = model_part.find(t.name);
    if (it == model_part.end()) {
      missing.push_back(t.name);
    } else if (it->second->shape() != t.tensor.shape()) {
      mismatched.push_back(t.name + " " + shape_str(it->second->shape()) + " vs " + shape_str(t.tensor.shape()));
    }
  }
  for (const auto& [name, _] : model_part) {
    if (!expected.count(name)) unexpected.push_back(name);
  }
  for (const auto& [name, _] : optim_part) {
    if (!expected.count(name.substr(kOptimPrefix.size()))) unexpected.push_back(name);
  }
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    std::string msg = "checkpoint does not match the model configuration:";
    auto list = [&](const char* label, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string("\n  ") + label + " (" + std::to_string(v.size()) + "):";
      for (std::size_t i = 0; i < std::min<std::size_t>(v.size(), 8); ++i) msg += " " + v[i];
      if (v.size() > 8) msg += " ...";
    };
    list("missing", missing);
    list("unexpected", unexpected);
    list("shape mismatch", mismatched);
    bool aux_only = missing.empty() && mismatched.empty() &&
                    std::all_of(unexpected.begin(), unexpected.end(), [](const std::string& n) {
                      return n.starts_with("aux/") || n.starts_with(kOptimPrefix + "aux/");
                    });
    if (aux_only) msg += "\n  (auxiliary-head entries only; pass --allow-prune to drop them)";
    throw ConfigError(msg);
  }
  if (ck.arch_hash != architecture_hash(model.config())) {
    throw ConfigError("checkpoint architecture hash differs from the model configuration (same tensor census, "
                      "different layer settings)");
  }

  for (const auto& t : targets) {
    auto dst = t.tensor;
    const auto src = model_part.at(t.name)->data();
    std::copy(src.begin(), src.end(), dst.data().begin());
  }
  if (optim) {
    NamedTensors<T> state;
    for (const auto& [name, tensor] : optim_part) state.push_back({name, *tensor, EntryKind::Buffer});
    optim->load_state(state);
  }
  return ck.iter;
}

template <typename T>
std::uint64_t load_checkpoint(const std::filesystem::path& path, PSPNet<T>& model, SGD<T>* optim,
                              const LoadOptions& opts = {}) {
  return apply_checkpoint(read_checkpoint<T>(path), model, optim, opts);
}

}  // namespace psp
