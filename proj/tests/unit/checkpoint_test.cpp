#include <gtest/gtest.h>

#include <cstring>

#include "mlma/checkpoint.hpp"
#include "test_util.hpp"

using namespace mlma;
using testing_util::random_tensor;
using testing_util::TempDir;

namespace {

NamedTensors sample_tensors() {
  Rng rng(7);
  return {{"embedding.en", random_tensor({5, 3}, rng)},
          {"bias", random_tensor({4}, rng)},
          {"scalar", Tensor::scalar(-0.125)},
          {"\xc3\xa9t\xc3\xa9", random_tensor({2, 2}, rng)}};
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

}  // namespace

TEST(Checkpoint, HeaderLayout) {
  NamedTensors one{{"ab", Tensor::from({1, 2}, {1.0, 2.0})}};
  const auto bytes = encode_checkpoint(one);
  ASSERT_EQ(std::memcmp(bytes.data(), "MLMA", 4), 0);
  EXPECT_EQ(read_u32(bytes, 4), 1u);
  EXPECT_EQ(read_u32(bytes, 8), 1u);
  EXPECT_EQ(bytes[12], 2);  // u16 name length, little-endian
  EXPECT_EQ(bytes[13], 0);
  EXPECT_EQ(bytes[14], 'a');
  EXPECT_EQ(bytes[15], 'b');
  EXPECT_EQ(bytes[16], sizeof(Real) == 8 ? 1 : 0);
  EXPECT_EQ(bytes[17], 2);  // rank
  EXPECT_EQ(bytes[18], 1);  // first extent, u64 LE
  EXPECT_EQ(bytes[26], 2);
  EXPECT_EQ(bytes.size(), 34 + 2 * sizeof(Real));
  double first;
  std::memcpy(&first, bytes.data() + 34, sizeof first);
  EXPECT_EQ(first, 1.0);
}

TEST(Checkpoint, RoundTripIsByteExact) {
  TempDir dir;
  const auto tensors = sample_tensors();
  save_checkpoint(dir / "a.ckpt", tensors);
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  ASSERT_EQ(loaded.size(), tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    EXPECT_EQ(loaded[i].first, tensors[i].first);
    EXPECT_EQ(loaded[i].second.shape(), tensors[i].second.shape());
    EXPECT_EQ(testing_util::values(loaded[i].second), testing_util::values(tensors[i].second));
  }
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(read_file_bytes(dir / "a.ckpt"), read_file_bytes(dir / "b.ckpt"));
}

TEST(Checkpoint, CorruptInputIsParseError) {
  auto bytes = encode_checkpoint(sample_tensors());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), ParseError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), ParseError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), ParseError);
  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(decode_checkpoint(version), ParseError);
}

TEST(Checkpoint, AssignByNameChecksNamesAndShapes) {
  const auto source = sample_tensors();
  NamedTensors target{{"bias", Tensor::zeros({4})}};
  assign_by_name(target, source);
  EXPECT_EQ(testing_util::values(target[0].second), testing_util::values(source[1].second));
  NamedTensors missing{{"nope", Tensor::zeros({4})}};
  EXPECT_THROW(assign_by_name(missing, source), ParseError);
  NamedTensors wrong{{"bias", Tensor::zeros({5})}};
  EXPECT_THROW(assign_by_name(wrong, source), DimensionError);
}

TEST(Checkpoint, HashTracksValues) {
  auto tensors = sample_tensors();
  const auto h = parameter_hash(tensors);
  EXPECT_EQ(h, parameter_hash(sample_tensors()));
  tensors[1].second.mutable_data()[0] += 1e-9;
  EXPECT_NE(h, parameter_hash(tensors));
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}

TEST(KeyValues, ParseFormatRoundTrip) {
  const auto kv = parse_key_values("# comment\n\na = 1\nname=caf\xc3\xa9\npath=x=y\n");
  EXPECT_EQ(kv.at("a"), "1");
  EXPECT_EQ(kv.at("name"), "caf\xc3\xa9");
  EXPECT_EQ(kv.at("path"), "x=y");
  EXPECT_EQ(parse_key_values(format_key_values(kv)), kv);
  EXPECT_THROW(parse_key_values("no equals sign\n"), ParseError);
  EXPECT_THROW(parse_key_values("=value\n"), ParseError);
}
