#include <fstream>

#include <gtest/gtest.h>

#include "step/blob_io.hpp"
#include "step/errors.hpp"
#include "step/hashing.hpp"
#include "support.hpp"

using namespace step;
using step::testing::TempDir;

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Sha256, IncrementalEqualsOneShot) {
  Sha256 h;
  h.update("ab").update("c");
  EXPECT_EQ(h.hex_digest(), sha256_hex("abc"));
}

TEST(Sha256, TensorHashCoversDtypeAndShape) {
  auto a = torch::zeros({2, 2});
  Sha256 h1, h2, h3;
  h1.update(a);
  h2.update(a.reshape({4}));
  h3.update(a.to(torch::kFloat64));
  const auto d1 = h1.hex_digest();
  EXPECT_NE(d1, h2.hex_digest());
  EXPECT_NE(d1, h3.hex_digest());
}

TEST(BlobIo, RoundTripIsBitExact) {
  TempDir dir("blob");
  NamedTensors t{{"a", torch::randn({3, 4})},
                 {"b", torch::randn({2}, torch::kFloat64)},
                 {"c", torch::tensor(std::int64_t{42})},
                 {"empty", torch::zeros({0, 8})}};
  write_blob(dir / "x.bin", t);
  auto back = read_blob(dir / "x.bin");
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[i].first, t[i].first);
    EXPECT_EQ(back[i].second.scalar_type(), t[i].second.scalar_type());
    EXPECT_TRUE(torch::equal(back[i].second, t[i].second));
  }
}

TEST(BlobIo, TruncatedFileIsFormatError) {
  TempDir dir("blob");
  write_blob(dir / "x.bin", {{"a", torch::randn({16})}});
  std::filesystem::resize_file(dir / "x.bin", std::filesystem::file_size(dir / "x.bin") - 5);
  EXPECT_THROW(read_blob(dir / "x.bin"), FormatError);
}

TEST(BlobIo, VersionMismatchIsMigrationError) {
  TempDir dir("blob");
  write_blob(dir / "x.bin", {{"a", torch::randn({4})}});
  {
    std::fstream f(dir / "x.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const char v = 9;
    f.write(&v, 1);
  }
  EXPECT_THROW(read_blob(dir / "x.bin"), MigrationError);
}

TEST(BlobIo, ModuleStateLoadValidatesBeforeCopy) {
  torch::nn::Linear a(4, 3), b(4, 3), c(5, 3);
  load_module_state(*b, module_state(*a), "linear");
  EXPECT_EQ(parameter_hash(*a), parameter_hash(*b));
  const auto before = parameter_hash(*c);
  EXPECT_THROW(load_module_state(*c, module_state(*a), "linear"), ShapeError);
  EXPECT_EQ(parameter_hash(*c), before);
}
