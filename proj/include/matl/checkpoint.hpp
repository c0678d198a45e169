#pragma once

#include "matl/networks.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace matl {

// Binary layout (all integers little-endian):
//
//   "MATL"                 4 bytes
//   version                u16
//   body length            u64   bytes between this field and the CRC
//   metadata length        u32
//   metadata               UTF-8 "key=value\n" lines
//   tensor count           u32
//   per tensor:            u16 name length, name, u8 rank, rank x u64 dims,
//                          f64 payload
//   crc32                  u32   over every preceding byte
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { kBadMagic, kVersionMismatch, kTruncated, kChecksumMismatch, kMalformed };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

using Metadata = std::vector<std::pair<std::string, std::string>>;

struct Checkpoint {
  Metadata metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;

  std::optional<std::string> get(const std::string& key) const;
  const std::string& require(const std::string& key) const;
  const Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize_params(const ActorParams& params, const Metadata& metadata = {});
std::vector<std::uint8_t> serialize_params(const CriticParams& params, const Metadata& metadata = {});

Checkpoint make_checkpoint(const ActorParams& actor, const CriticParams& critic, Metadata metadata);

// Rebuild parameter sets from tensor records. Layer structure is inferred
// from the stored shapes.
ActorParams actor_from_checkpoint(const Checkpoint& ckpt);
CriticParams critic_from_checkpoint(const Checkpoint& ckpt);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

// Writes to `<path>.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace matl
