// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "kgfuse/error.hpp"
#include "kgfuse/io.hpp"
#include "kgfuse/kgbert.hpp"

namespace kgfuse {

namespace {

constexpr char kMagic[8] = {'K', 'G', 'F', 'C', 'K', 'P', 'T', '\0'};

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& buf, std::size_t end, std::string source)
      : buf_(buf), end_(end), source_(std::move(source)) {}

  void need(std::size_t n, const char* what) {
    if (end_ - pos_ < n) {
      throw Error(ErrorKind::kFormat, source_ + ": truncated checkpoint (reading " + what + ")");
    }
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::string str(const char* what) {
    const auto n = le<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* raw(std::size_t n, const char* what) {
    need(n, what);
    const auto* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string source_;
};

std::map<std::string, std::string> header_for(const TransformerModel& m) { return m.config().to_map(); }

void expect_kind(const Checkpoint& ckpt, CheckpointKind kind) {
  if (ckpt.kind != kind) {
    throw Error(ErrorKind::kFormat, "checkpoint holds a " + std::string(to_string(ckpt.kind)) + " model, expected " +
                                        std::string(to_string(kind)));
  }
}

std::size_t header_size(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.header.find(key);
  if (it == ckpt.header.end()) throw Error(ErrorKind::kFormat, "checkpoint header is missing '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw Error(ErrorKind::kFormat, "checkpoint header key '" + key + "' is not a count");
  }
}

}  // namespace

std::string_view to_string(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::kLm:
      return "lm";
    case CheckpointKind::kScorer:
      return "scorer";
    case CheckpointKind::kFused:
      return "fused";
  }
  return "unknown";
}

Checkpoint make_checkpoint(CheckpointKind kind, std::map<std::string, std::string> header, const ParamSet& params,
                           std::uint64_t step, std::uint64_t seed) {
  Checkpoint c;
  c.kind = kind;
  c.header = std::move(header);
  c.step = step;
  c.seed = seed;
  for (const auto& [name, t] : params.items()) {
    StoredTensor s;
    s.shape = t.shape();
    s.values.reserve(t.numel());
    for (double v : t.values()) s.values.push_back(static_cast<float>(v));
    c.params.emplace(name, std::move(s));
  }
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le(kCheckpointVersion);
  w.le(static_cast<std::uint32_t>(ckpt.kind));
  w.le(ckpt.step);
  w.le(ckpt.seed);
  w.le(static_cast<std::uint32_t>(ckpt.header.size()));
  for (const auto& [k, v] : ckpt.header) {
    w.str(k);
    w.str(v);
  }
  w.le(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    if (shape_numel(t.shape) != t.values.size()) {
      throw Error(ErrorKind::kShape, "checkpoint tensor '" + name + "' does not match its shape");
    }
    w.str(name);
    w.le(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.le(static_cast<std::uint64_t>(d));
    for (float f : t.values) w.le(std::bit_cast<std::uint32_t>(f));
  }
  auto& buf = w.buffer();
  w.le(fnv1a(buf.data(), buf.size()));
  write_file_atomic(
      path, [&](std::ostream& out) { out.write(reinterpret_cast<const char*>(buf.data()), buf.size()); }, true);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string src = path.string();
  if (buf.size() < sizeof kMagic || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorKind::kFormat, src + ": not a checkpoint (bad magic)");
  }
  if (buf.size() < sizeof kMagic + 4 + 8) throw Error(ErrorKind::kFormat, src + ": truncated checkpoint");
  {
    Reader tail(buf, buf.size(), src);
    tail.raw(buf.size() - 8, "body");
    const auto stored = tail.le<std::uint64_t>("checksum");
    if (stored != fnv1a(buf.data(), buf.size() - 8)) {
      // a short file fails here too, so check the layout first for a precise message
      Reader probe(buf, buf.size(), src);
      probe.raw(sizeof kMagic, "magic");
      const auto version = probe.le<std::uint32_t>("version");
      if (version != kCheckpointVersion) {
        throw Error(ErrorKind::kFormat, src + ": unsupported checkpoint version " + std::to_string(version));
      }
      throw Error(ErrorKind::kFormat, src + ": checksum mismatch (corrupt or truncated checkpoint)");
    }
  }
  Reader r(buf, buf.size() - 8, src);
  r.raw(sizeof kMagic, "magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, src + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto kind = r.le<std::uint32_t>("kind");
  if (kind < 1 || kind > 3) throw Error(ErrorKind::kFormat, src + ": unknown model kind " + std::to_string(kind));
  c.kind = static_cast<CheckpointKind>(kind);
  c.step = r.le<std::uint64_t>("step");
  c.seed = r.le<std::uint64_t>("seed");
  const auto headers = r.le<std::uint32_t>("header count");
  for (std::uint32_t i = 0; i < headers; ++i) {
    auto k = r.str("header key");
    c.header[k] = r.str("header value");
  }
  const auto count = r.le<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str("parameter name");
    StoredTensor t;
    const auto rank = r.le<std::uint32_t>("rank");
    if (rank > 8) throw Error(ErrorKind::kFormat, src + ": implausible rank for '" + name + "'");
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>("dim")));
    const auto n = shape_numel(t.shape);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.values[k] = std::bit_cast<float>(r.le<std::uint32_t>("values"));
    c.params.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw Error(ErrorKind::kFormat, src + ": trailing bytes after the parameters");
  return c;
}

void load_params(const Checkpoint& ckpt, ParamSet& params) {
  const auto& want = params.items();
  for (const auto& [name, t] : want) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) {
      throw Error(ErrorKind::kFormat, "checkpoint manifest mismatch: missing parameter '" + name + "'");
    }
    if (it->second.shape != t.shape()) {
      throw Error(ErrorKind::kFormat, "checkpoint manifest mismatch: '" + name + "' has shape " +
                                          shape_str(it->second.shape) + ", expected " + shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : ckpt.params) {
    if (want.find(name) == want.end()) {
      throw Error(ErrorKind::kFormat, "checkpoint manifest mismatch: unexpected parameter '" + name + "'");
    }
  }
  for (const auto& [name, stored] : ckpt.params) {
    auto dst = params.get(name).mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(stored.values[i]);
  }
}

void save_model(const std::filesystem::path& path, const TransformerModel& m, std::uint64_t step,
                std::uint64_t seed) {
  const auto kind = m.config().mode == AttentionMode::kBidirectional ? CheckpointKind::kScorer : CheckpointKind::kLm;
  write_checkpoint(path, make_checkpoint(kind, header_for(m), m.params(), step, seed));
}

void save_model(const std::filesystem::path& path, const FusedModel& m, std::uint64_t step, std::uint64_t seed) {
  auto header = m.config().to_map();
  for (auto& [k, v] : m.fusion_config().to_map()) header[k] = v;
  header["fusion.d_kg"] = std::to_string(m.d_kg());
  header["fusion.table_rows"] = std::to_string(m.table_rows());
  write_checkpoint(path, make_checkpoint(CheckpointKind::kFused, std::move(header), m.params(), step, seed));
}

TransformerModel load_lm(const Checkpoint& ckpt) {
  expect_kind(ckpt, CheckpointKind::kLm);
  TransformerModel m(ModelConfig::from_map(ckpt.header));
  load_params(ckpt, m.params());
  return m;
}

TransformerModel load_scorer(const Checkpoint& ckpt) {
  expect_kind(ckpt, CheckpointKind::kScorer);
  auto m = make_scorer(ModelConfig::from_map(ckpt.header));
  load_params(ckpt, m.params());
  return m;
}

FusedModel load_fused(const Checkpoint& ckpt) {
  expect_kind(ckpt, CheckpointKind::kFused);
  FusedModel m(TransformerModel(ModelConfig::from_map(ckpt.header)), FusionConfig::from_map(ckpt.header),
               header_size(ckpt, "fusion.d_kg"), header_size(ckpt, "fusion.table_rows"));
  load_params(ckpt, m.params());
  return m;
}

}  // namespace kgfuse
