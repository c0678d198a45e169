#include "matl/checkpoint.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace matl {
namespace {

NetworkConfig small_net() {
  NetworkConfig c;
  c.actor_hidden = {6, 6};
  c.critic_dim = 4;
  c.embed_hidden = {5};
  c.head_hidden = {3};
  return c;
}

Checkpoint sample_checkpoint() {
  const ActorParams actor = make_actor(9, 5, small_net(), 3);
  const CriticParams critic = make_critic(9, small_net(), 3);
  return make_checkpoint(actor, critic, {{"env", "predator_prey"}, {"train_agents", "2"}, {"seed", "3"}});
}

CheckpointErrorKind decode_error(std::span<const std::uint8_t> bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode accepted corrupted bytes";
  return CheckpointErrorKind::kMalformed;
}

class CheckpointFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("matl_ckpt_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointFiles, SaveLoadSaveIsByteIdentical) {
  const Checkpoint ckpt = sample_checkpoint();
  save_checkpoint(dir_ / "a.ckpt", ckpt);
  const Checkpoint loaded = load_checkpoint(dir_ / "a.ckpt");
  save_checkpoint(dir_ / "b.ckpt", loaded);
  EXPECT_EQ(read_file(dir_ / "a.ckpt"), read_file(dir_ / "b.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir_ / "a.ckpt.tmp"));
  EXPECT_EQ(loaded.require("train_agents"), "2");
  EXPECT_FALSE(loaded.get("missing").has_value());
}

TEST(Checkpoint, ParametersSurviveTheRoundTrip) {
  const ActorParams actor = make_actor(9, 5, small_net(), 3);
  const CriticParams critic = make_critic(9, small_net(), 3);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(make_checkpoint(actor, critic, {})));
  const ActorParams a2 = actor_from_checkpoint(back);
  const CriticParams c2 = critic_from_checkpoint(back);
  const auto n1 = named_tensors(actor), n2 = named_tensors(a2);
  ASSERT_EQ(n1.size(), n2.size());
  for (std::size_t i = 0; i < n1.size(); ++i) EXPECT_EQ(*n1[i].second, *n2[i].second) << n1[i].first;
  const auto m1 = named_tensors(critic), m2 = named_tensors(c2);
  ASSERT_EQ(m1.size(), m2.size());
  for (std::size_t i = 0; i < m1.size(); ++i) EXPECT_EQ(*m1[i].second, *m2[i].second) << m1[i].first;
}

TEST(Checkpoint, BadMagicIsReported) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes[0] = 'X';
  EXPECT_EQ(decode_error(bytes), CheckpointErrorKind::kBadMagic);
}

TEST(Checkpoint, VersionMismatchIsReported) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
  EXPECT_EQ(decode_error(bytes), CheckpointErrorKind::kVersionMismatch);
}

TEST(Checkpoint, TruncationIsReported) {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t keep : {std::size_t{8}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_EQ(decode_error(std::span(bytes).first(keep)), CheckpointErrorKind::kTruncated) << keep;
}

TEST(Checkpoint, EverySingleBitFlipIsDetected) {
  const ActorParams actor = make_actor(3, 2, NetworkConfig{{2}, 2, {2}, {2}}, 1);
  const auto bytes = serialize_params(actor, {{"k", "v"}});
  for (std::size_t i = 0; i < bytes.size(); ++i)
    for (int bit = 0; bit < 8; ++bit) {
      auto corrupted = bytes;
      corrupted[i] ^= static_cast<std::uint8_t>(1u << bit);
      EXPECT_THROW(decode_checkpoint(corrupted), CheckpointError) << "byte " << i << " bit " << bit;
    }
  auto payload_flip = bytes;
  payload_flip[bytes.size() - 10] ^= 0x10;
  EXPECT_EQ(decode_error(payload_flip), CheckpointErrorKind::kChecksumMismatch);
}

TEST(Checkpoint, Crc32MatchesTheStandardCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}

TEST_F(CheckpointFiles, LoadedParametersRunAtEveryAgentCount) {
  save_checkpoint(dir_ / "m.ckpt", sample_checkpoint());
  const Checkpoint ckpt = load_checkpoint(dir_ / "m.ckpt");
  const ActorParams actor = actor_from_checkpoint(ckpt);
  const CriticParams critic = critic_from_checkpoint(ckpt);
  Rng rng(1);
  for (Index n = 1; n <= 80; ++n) {
    const Tensor obs = testing::random_tensor({n, 9}, rng);
    EXPECT_EQ(actor_forward(actor, obs).rows(), n);
    EXPECT_EQ(critic_forward(critic, obs).values.size(), n);
  }
}

TEST_F(CheckpointFiles, MissingFileIsARuntimeError) {
  EXPECT_THROW(load_checkpoint(dir_ / "nope.ckpt"), std::runtime_error);
}

}  // namespace
}  // namespace matl
