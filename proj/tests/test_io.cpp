#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "moex/error.hpp"
#include "moex/io.hpp"

using namespace moex;

TEST(Sha1, KnownDigests) {
  EXPECT_EQ(io::sha1_hex("abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
  EXPECT_EQ(io::sha1_hex(""), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
}

TEST(Sha1, GitBlobDigestsMatchHashObject) {
  EXPECT_EQ(io::git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(io::git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Binary, RoundTripIsLittleEndian) {
  io::BinaryWriter w;
  w.u16(0x0102);
  w.u32(0xdeadbeef);
  w.u64(42);
  w.f32(1.5f);
  w.f64(-std::numeric_limits<double>::infinity());
  w.str("name");
  EXPECT_EQ(static_cast<unsigned char>(w.data()[0]), 0x02);
  EXPECT_EQ(static_cast<unsigned char>(w.data()[1]), 0x01);
  io::BinaryReader r(w.data(), "mem");
  EXPECT_EQ(r.u16(), 0x0102);
  EXPECT_EQ(r.u32(), 0xdeadbeefu);
  EXPECT_EQ(r.u64(), 42u);
  EXPECT_EQ(r.f32(), 1.5f);
  EXPECT_TRUE(std::isinf(r.f64()));
  EXPECT_EQ(r.str(), "name");
  EXPECT_TRUE(r.done());
  EXPECT_THROW(r.u8(), FormatError);
}

TEST(Binary, MagicAndTruncationNameTheSource) {
  io::BinaryReader r("MOEY", "some/file.bin");
  try {
    r.expect_magic("MOEX");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("some/file.bin"), std::string::npos);
  }
  io::BinaryReader t("\x05\x00\x00\x00ab", "t.bin");
  EXPECT_THROW(t.str(), FormatError);
}

TEST(Files, WriteCreatesParentsAndReadsBack) {
  const auto dir = std::filesystem::temp_directory_path() / "moex_io_test";
  const std::string path = (dir / "a" / "b.bin").string();
  io::write_file(path, std::string("x\0y", 3));
  EXPECT_EQ(io::read_file(path), std::string("x\0y", 3));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(io::read_file(path), Error);
}
