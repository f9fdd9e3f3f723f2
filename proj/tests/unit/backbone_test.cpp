#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"
#include "uniicl/backbone.hpp"
#include "uniicl/errors.hpp"
#include "uniicl/io.hpp"

namespace uniicl {
namespace {

using testing::Gen;
using testing::TempDir;
using testing::tiny_config;

TEST(Backbone, HiddenShapeWithoutPrefix) {
  Backbone bb(tiny_config());
  std::vector<TokenId> ids{14, 15, 16};
  auto h = bb.forward_hidden(ids);
  EXPECT_EQ(h.shape(), (Shape{3, bb.embed_dim()}));
}

TEST(Backbone, PrefixRowsTakeSequentialPositions) {
  // A prefix made of plain token embeddings must give exactly the hidden
  // states of the same tokens fed as ids, which holds only if the prefix
  // occupies positions 0..P-1 and the ids continue at P.
  Backbone bb(tiny_config());
  std::vector<TokenId> all{20, 21, 22, 23};
  std::vector<TokenId> head{20, 21}, tail{22, 23};
  auto prefix = bb.embed_tokens(head);
  auto mixed = bb.forward_hidden(prefix, tail);
  EXPECT_EQ(mixed.shape(), (Shape{4, bb.embed_dim()}));
  EXPECT_TRUE(bitwise_equal(mixed, bb.forward_hidden(all)));
}

TEST(Backbone, CausalityOverRandomSequences) {
  Backbone bb(tiny_config(3));
  Gen g(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto n = g.size(2, 20);
    auto ids = g.tokens(n, bb.config().vocab_size);
    auto cut = g.size(1, n - 1);
    auto changed = ids;
    for (std::size_t i = cut; i < n; ++i) changed[i] = g.integer(14, 63);
    auto a = bb.forward_hidden(ids), b = bb.forward_hidden(changed);
    const auto d = bb.embed_dim();
    for (std::size_t i = 0; i < cut * d; ++i) ASSERT_EQ(a.at(i), b.at(i)) << trial;
  }
}

TEST(Backbone, LogitsShape) {
  Backbone bb(tiny_config());
  std::vector<TokenId> ids{14, 15};
  EXPECT_EQ(bb.logits(bb.forward_hidden(ids)).shape(), (Shape{2, bb.config().vocab_size}));
}

TEST(Backbone, WindowOverflowIsLengthError) {
  auto cfg = tiny_config();
  cfg.max_positions = 8;
  Backbone bb(cfg);
  std::vector<TokenId> ids(6, 14);
  EXPECT_NO_THROW(bb.forward_hidden(bb.embed_tokens(std::vector<TokenId>{15, 16}), ids));
  EXPECT_THROW(bb.forward_hidden(bb.embed_tokens(std::vector<TokenId>{15, 16, 17}), ids), LengthError);
  std::vector<TokenId> long_ids(9, 14);
  EXPECT_THROW(bb.forward_hidden(long_ids), LengthError);
}

TEST(SequenceNll, RiggedPerfectPredictionHasPplOne) {
  Backbone bb(tiny_config());
  testing::rig_constant_prediction(bb, 30, 1e4);
  std::vector<TokenId> ctx{14, 15}, cont{30, 30, 30};
  double nll = bb.sequence_nll({}, ctx, cont).item();
  EXPECT_EQ(nll, 0.0);
  EXPECT_EQ(std::exp(nll), 1.0);
}

TEST(SequenceNll, UniformLogitsGivePplEqualToVocab) {
  auto cfg = tiny_config();
  cfg.vocab_size = 16;
  Backbone bb(cfg);
  testing::set_parameter(bb, "lm_head", std::vector<double>(cfg.embed_dim * 16, 0.0));
  Gen g(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto ctx = g.tokens(g.size(1, 5), 16);
    auto cont = g.tokens(g.size(1, 5), 16);
    EXPECT_NEAR(std::exp(bb.sequence_nll({}, ctx, cont).item()), 16.0, 1e-4);
  }
}

TEST(SequenceNll, PrefixOnlyContextIsAllowed) {
  Backbone bb(tiny_config());
  auto prefix = bb.embed_tokens(std::vector<TokenId>{14, 15});
  std::vector<TokenId> cont{16, 17};
  EXPECT_TRUE(std::isfinite(bb.sequence_nll(prefix, {}, cont).item()));
  EXPECT_THROW(bb.sequence_nll({}, {}, cont), ContractError);
}

TEST(Backbone, FrozenParametersReceiveNoGradient) {
  Backbone bb(tiny_config());
  ASSERT_FALSE(bb.trainable());
  auto prefix = Tensor::from({1, bb.embed_dim()}, std::vector<double>(bb.embed_dim(), 0.1), true);
  std::vector<TokenId> ctx{14}, cont{15, 16};
  auto grads = backward(bb.sequence_nll(prefix, ctx, cont));
  EXPECT_TRUE(grads.contains(prefix));
  EXPECT_EQ(grads.size(), 1u);
}

TEST(Backbone, SameSeedSameDigest) {
  EXPECT_EQ(Backbone(tiny_config(5)).digest(), Backbone(tiny_config(5)).digest());
  EXPECT_NE(Backbone(tiny_config(5)).digest(), Backbone(tiny_config(6)).digest());
}

TEST(Backbone, CheckpointRoundTrip) {
  TempDir dir("backbone");
  Backbone bb(tiny_config(9));
  bb.save(dir / "bb.ckpt");
  auto loaded = Backbone::load(dir / "bb.ckpt");
  EXPECT_EQ(loaded.digest(), bb.digest());
  std::vector<TokenId> ids{14, 20, 33};
  EXPECT_TRUE(bitwise_equal(loaded.forward_hidden(ids), bb.forward_hidden(ids)));
}

TEST(Backbone, DamagedCheckpointIsFormatError) {
  TempDir dir("backbone_bad");
  Backbone bb(tiny_config(9));
  bb.save(dir / "bb.ckpt");
  auto bytes = io::read_file(dir / "bb.ckpt");

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  io::write_file_atomic(dir / "short.ckpt", truncated);
  EXPECT_THROW(Backbone::load(dir / "short.ckpt"), FormatError);

  auto flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  io::write_file_atomic(dir / "flip.ckpt", flipped);
  EXPECT_THROW(Backbone::load(dir / "flip.ckpt"), FormatError);

  EXPECT_THROW(Backbone::load(dir / "missing.ckpt"), IoError);
}

TEST(Backbone, StatsCountForwardsAndPositions) {
  Backbone bb(tiny_config());
  auto before = bb.stats().snapshot();
  std::vector<TokenId> ids{14, 15, 16, 17};
  bb.forward_hidden(ids);
  bb.forward_hidden(bb.embed_tokens(std::vector<TokenId>{14}), ids);
  auto delta = bb.stats().snapshot() - before;
  EXPECT_EQ(delta.forward_calls, 2u);
  EXPECT_EQ(delta.token_positions, 9u);
  EXPECT_GT(delta.flops, 0u);
}

TEST(BackboneConfig, InvalidFieldsAreNamed) {
  auto cfg = tiny_config();
  cfg.n_heads = 3;
  try {
    Backbone bb(cfg);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("n_heads"), std::string::npos);
  }
  cfg = tiny_config();
  cfg.vocab_size = 4;
  EXPECT_THROW(Backbone{cfg}, ConfigError);
}

}  // namespace
}  // namespace uniicl
