#include "matl/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace matl {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'T', 'L'};
constexpr std::size_t kHeaderSize = 4 + 2 + 8;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
      out_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename T>
  T le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n)
      throw CheckpointError(CheckpointErrorKind::kMalformed, "checkpoint record overruns its body");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::string encode_metadata(const Metadata& metadata) {
  std::string out;
  for (const auto& [k, v] : metadata) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw UsageError("checkpoint metadata entry '" + k + "' is not representable");
    out += k + "=" + v + "\n";
  }
  return out;
}

Metadata decode_metadata(const std::string& text) {
  Metadata out;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t end = text.find('\n', start);
    if (end == std::string::npos)
      throw CheckpointError(CheckpointErrorKind::kMalformed, "metadata line without terminator");
    const std::string line = text.substr(start, end - start);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw CheckpointError(CheckpointErrorKind::kMalformed, "metadata line without '=': " + line);
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    start = end + 1;
  }
  return out;
}

template <typename Named>
Checkpoint checkpoint_of(const Named& named, Metadata metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  for (const auto& [name, t] : named) ckpt.tensors.emplace_back(name, *t);
  return ckpt;
}

const Tensor& tensor_or_throw(const Checkpoint& ckpt, const std::string& name) {
  if (const Tensor* t = ckpt.find(name)) return *t;
  throw CheckpointError(CheckpointErrorKind::kMalformed, "checkpoint lacks tensor '" + name + "'");
}

Mlp mlp_from(const Checkpoint& ckpt, const std::string& prefix) {
  Mlp mlp;
  for (std::size_t i = 0;; ++i) {
    const Tensor* w = ckpt.find(prefix + std::to_string(i) + ".weight");
    if (!w) break;
    mlp.layers.push_back(Dense{*w, tensor_or_throw(ckpt, prefix + std::to_string(i) + ".bias")});
  }
  if (mlp.layers.empty())
    throw CheckpointError(CheckpointErrorKind::kMalformed, "checkpoint lacks tensors under '" + prefix + "'");
  return mlp;
}

GraphConvParams conv_from(const Checkpoint& ckpt, const std::string& prefix) {
  GraphConvParams p;
  p.query = tensor_or_throw(ckpt, prefix + "query");
  p.key = tensor_or_throw(ckpt, prefix + "key");
  p.value = tensor_or_throw(ckpt, prefix + "value");
  p.sigma = Dense{tensor_or_throw(ckpt, prefix + "sigma.weight"), tensor_or_throw(ckpt, prefix + "sigma.bias")};
  p.key_dim = p.query.cols();
  return p;
}

}  // namespace

std::optional<std::string> Checkpoint::get(const std::string& key) const {
  for (const auto& [k, v] : metadata)
    if (k == key) return v;
  return std::nullopt;
}

const std::string& Checkpoint::require(const std::string& key) const {
  for (const auto& [k, v] : metadata)
    if (k == key) return v;
  throw CheckpointError(CheckpointErrorKind::kMalformed, "checkpoint metadata lacks '" + key + "'");
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer body;
  const std::string meta = encode_metadata(ckpt.metadata);
  body.le(static_cast<std::uint32_t>(meta.size()));
  body.bytes(meta.data(), meta.size());
  body.le(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xFFFF) throw UsageError("tensor name too long: " + name);
    body.le(static_cast<std::uint16_t>(name.size()));
    body.bytes(name.data(), name.size());
    body.le(static_cast<std::uint8_t>(t.rank()));
    for (Index d : t.shape()) body.le(static_cast<std::uint64_t>(d));
    for (double v : t.data()) body.f64(v);
  }

  Writer out;
  out.bytes(kMagic, sizeof(kMagic));
  out.le(kCheckpointVersion);
  out.le(static_cast<std::uint64_t>(body.buffer().size()));
  out.bytes(body.buffer().data(), body.buffer().size());
  out.le(crc32_of(out.buffer()));
  return std::move(out.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(CheckpointErrorKind::kBadMagic, "not a checkpoint: magic bytes differ from 'MATL'");
  if (bytes.size() < kHeaderSize)
    throw CheckpointError(CheckpointErrorKind::kTruncated, "checkpoint truncated inside its header");
  Reader header(bytes.subspan(4, kHeaderSize - 4));
  const auto version = header.le<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::kVersionMismatch,
                          "checkpoint format version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  const auto body_size = header.le<std::uint64_t>();
  if (bytes.size() - kHeaderSize < 4 || bytes.size() - kHeaderSize - 4 < body_size)
    throw CheckpointError(CheckpointErrorKind::kTruncated,
                          "checkpoint truncated: body declares " + std::to_string(body_size) + " bytes, file has " +
                              std::to_string(bytes.size()));
  const std::size_t crc_at = kHeaderSize + body_size;
  Reader crc_reader(bytes.subspan(crc_at, 4));
  const auto stored = crc_reader.le<std::uint32_t>();
  if (stored != crc32_of(bytes.first(crc_at)))
    throw CheckpointError(CheckpointErrorKind::kChecksumMismatch, "checkpoint CRC32 mismatch");
  if (bytes.size() != crc_at + 4)
    throw CheckpointError(CheckpointErrorKind::kMalformed, "trailing bytes after checkpoint CRC");

  Reader r(bytes.subspan(kHeaderSize, body_size));
  Checkpoint ckpt;
  ckpt.metadata = decode_metadata(r.str(r.le<std::uint32_t>()));
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.le<std::uint16_t>());
    const auto rank = r.le<std::uint8_t>();
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.le<std::uint64_t>()));
    const Index n = shape_size(shape);
    if (rank == 0 || rank > 3 || n < 0 || static_cast<std::size_t>(n) * 8 > r.remaining())
      throw CheckpointError(CheckpointErrorKind::kMalformed, "bad tensor record '" + name + "'");
    std::vector<double> data(static_cast<std::size_t>(n));
    for (double& v : data) v = r.f64();
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0)
    throw CheckpointError(CheckpointErrorKind::kMalformed, "unparsed bytes inside checkpoint body");
  return ckpt;
}

std::vector<std::uint8_t> serialize_params(const ActorParams& params, const Metadata& metadata) {
  return encode_checkpoint(checkpoint_of(named_tensors(params), metadata));
}

std::vector<std::uint8_t> serialize_params(const CriticParams& params, const Metadata& metadata) {
  return encode_checkpoint(checkpoint_of(named_tensors(params), metadata));
}

Checkpoint make_checkpoint(const ActorParams& actor, const CriticParams& critic, Metadata metadata) {
  Checkpoint ckpt = checkpoint_of(named_tensors(actor), std::move(metadata));
  for (const auto& [name, t] : named_tensors(critic)) ckpt.tensors.emplace_back(name, *t);
  return ckpt;
}

ActorParams actor_from_checkpoint(const Checkpoint& ckpt) { return ActorParams{mlp_from(ckpt, "actor.mlp.")}; }

CriticParams critic_from_checkpoint(const Checkpoint& ckpt) {
  CriticParams p;
  p.embed = mlp_from(ckpt, "critic.embed.");
  p.gc1 = conv_from(ckpt, "critic.gc1.");
  p.gc2 = conv_from(ckpt, "critic.gc2.");
  p.head = mlp_from(ckpt, "critic.head.");
  return p;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace matl
