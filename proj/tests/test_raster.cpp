#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "sdtseg/raster.hpp"
#include "sdtseg/rng.hpp"
#include "test_support.hpp"

using namespace sdtseg;
using testsup::TempDir;

namespace {

std::string pgm_bytes(int w, int h, const std::vector<std::uint8_t>& pixels,
                      const std::string& maxval = "255") {
  std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + maxval + "\n";
  s.append(pixels.begin(), pixels.end());
  return s;
}

LabelMask random_mask(Rng& rng, int w, int h, int classes, double void_prob = 0.0) {
  LabelMask m(w, h, classes);
  for (auto& v : m.data) {
    if (void_prob > 0.0 && rng.bernoulli(void_prob))
      v = kVoidIndex;
    else
      v = static_cast<std::uint8_t>(rng.uniform_int(classes));
  }
  return m;
}

}  // namespace

TEST_CASE("read_mask maps bytes to class indices") {
  TempDir tmp("read_mask");
  testsup::write_bytes(tmp.path("m.pgm"), pgm_bytes(2, 2, {0, 1, 1, 0}));
  LabelMask m = read_mask(tmp.path("m.pgm"));
  CHECK(m.width == 2);
  CHECK(m.height == 2);
  CHECK(m.classes == 2);
  CHECK(m.data == std::vector<std::uint8_t>{0, 1, 1, 0});
}

TEST_CASE("read_mask treats 255 as void") {
  TempDir tmp("void");
  testsup::write_bytes(tmp.path("m.pgm"), pgm_bytes(2, 1, {0, 255}));
  LabelMask m = read_mask(tmp.path("m.pgm"));
  REQUIRE(m.void_index.has_value());
  CHECK(m.is_void(m.data[1]));
  CHECK(m.classes == 2);  // clamped to the minimum valid class count
}

TEST_CASE("read_mask rejects unsupported maxval") {
  TempDir tmp("maxval");
  testsup::write_bytes(tmp.path("m.pgm"), pgm_bytes(1, 1, {0}, "65535"));
  CHECK_THROWS_WITH(read_mask(tmp.path("m.pgm")),
                    Catch::Matchers::ContainsSubstring("unsupported maxval"));
}

TEST_CASE("read_mask error paths") {
  TempDir tmp("mask_err");

  SECTION("bad magic") {
    testsup::write_bytes(tmp.path("m.pgm"), "P6\n1 1\n255\n\0");
    CHECK_THROWS_AS(read_mask(tmp.path("m.pgm")), io_error);
  }
  SECTION("truncated payload") {
    testsup::write_bytes(tmp.path("m.pgm"), "P5\n2 2\n255\n\0\1");
    CHECK_THROWS_WITH(read_mask(tmp.path("m.pgm")),
                      Catch::Matchers::ContainsSubstring("truncated payload"));
  }
  SECTION("pixel value above declared class count") {
    testsup::write_bytes(tmp.path("m.pgm"), pgm_bytes(2, 1, {0, 5}));
    CHECK_THROWS_AS(read_mask(tmp.path("m.pgm"), 3), io_error);
  }
  SECTION("missing file") { CHECK_THROWS_AS(read_mask(tmp.path("nope.pgm")), io_error); }
}

TEST_CASE("mask round-trip is the identity") {
  TempDir tmp("mask_rt");
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const int w = 1 + static_cast<int>(rng.uniform_int(17));
    const int h = 1 + static_cast<int>(rng.uniform_int(17));
    const int c = 2 + static_cast<int>(rng.uniform_int(5));
    LabelMask m = random_mask(rng, w, h, c, 0.1);
    write_mask(m, tmp.path("rt.pgm"));
    LabelMask back = read_mask(tmp.path("rt.pgm"), c);
    CHECK(back.data == m.data);
    CHECK(back.width == m.width);
    CHECK(back.height == m.height);
  }
}

TEST_CASE("mask serialization is deterministic") {
  TempDir tmp("mask_det");
  Rng rng(3);
  LabelMask m = random_mask(rng, 9, 5, 4);
  write_mask(m, tmp.path("a.pgm"));
  write_mask(m, tmp.path("b.pgm"));
  CHECK(testsup::read_bytes(tmp.path("a.pgm")) == testsup::read_bytes(tmp.path("b.pgm")));
}

TEST_CASE("SDTF layout for a 1x1 single-channel stack") {
  TempDir tmp("sdtf_layout");
  FieldStack stack;
  stack.fields.push_back(ScalarField(1, 1, 0.5));
  write_field_stack(stack, tmp.path("one.sdtf"));
  const std::string bytes = testsup::read_bytes(tmp.path("one.sdtf"));

  // magic(4) + version(4) + ndim(4) + 3 dims(12) = 24 header bytes, 4 payload
  REQUIRE(bytes.size() == 28);
  CHECK(bytes.substr(0, 4) == "SDTF");
  const unsigned char* b = reinterpret_cast<const unsigned char*>(bytes.data());
  CHECK(b[4] == 1);                      // version, little-endian
  CHECK(b[8] == 3);                      // ndim
  CHECK(b[12] == 1);                     // channels
  CHECK(b[16] == 1);                     // height
  CHECK(b[20] == 1);                     // width
  const unsigned char payload[4] = {b[24], b[25], b[26], b[27]};
  const unsigned char expected[4] = {0x00, 0x00, 0x00, 0x3f};  // 0.5f LE
  CHECK(std::memcmp(payload, expected, 4) == 0);
}

TEST_CASE("SDTF round-trip preserves values") {
  TempDir tmp("sdtf_rt");
  Rng rng(11);
  for (int i = 0; i < 10; ++i) {
    const int c = 1 + static_cast<int>(rng.uniform_int(4));
    const int w = 1 + static_cast<int>(rng.uniform_int(9));
    const int h = 1 + static_cast<int>(rng.uniform_int(9));
    FieldStack stack;
    for (int k = 0; k < c; ++k) {
      ScalarField f(w, h);
      // float32-valued, as everything on disk is
      for (auto& v : f.data) v = static_cast<float>(rng.normal());
      stack.fields.push_back(std::move(f));
    }
    write_field_stack(stack, tmp.path("rt.sdtf"));
    FieldStack back = read_field_stack(tmp.path("rt.sdtf"));
    REQUIRE(back.channels() == c);
    for (int k = 0; k < c; ++k) CHECK(back.fields[k].data == stack.fields[k].data);
  }
}

TEST_CASE("SDTF write is deterministic") {
  TempDir tmp("sdtf_det");
  FieldStack stack;
  ScalarField f(3, 2);
  for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = 0.25 * static_cast<double>(i);
  stack.fields.push_back(f);
  write_field_stack(stack, tmp.path("a.sdtf"));
  write_field_stack(stack, tmp.path("b.sdtf"));
  CHECK(testsup::read_bytes(tmp.path("a.sdtf")) == testsup::read_bytes(tmp.path("b.sdtf")));
}

TEST_CASE("SDTF error paths") {
  TempDir tmp("sdtf_err");

  SECTION("empty stack") {
    FieldStack stack;
    CHECK_THROWS_AS(write_field_stack(stack, tmp.path("x.sdtf")), std::invalid_argument);
  }
  SECTION("bad magic") {
    testsup::write_bytes(tmp.path("x.sdtf"), "NOPE\x01\x00\x00\x00");
    CHECK_THROWS_WITH(read_field_stack(tmp.path("x.sdtf")),
                      Catch::Matchers::ContainsSubstring("bad magic"));
  }
  SECTION("truncated payload") {
    // declared 1x4x4 but only 15 floats present
    FieldStack stack;
    ScalarField f(4, 4, 1.0);
    stack.fields.push_back(f);
    write_field_stack(stack, tmp.path("x.sdtf"));
    std::string bytes = testsup::read_bytes(tmp.path("x.sdtf"));
    bytes.resize(bytes.size() - 4);
    testsup::write_bytes(tmp.path("x.sdtf"), bytes);
    CHECK_THROWS_WITH(read_field_stack(tmp.path("x.sdtf")),
                      Catch::Matchers::ContainsSubstring("truncated payload"));
  }
  SECTION("dimension overflow") {
    std::string bytes = "SDTF";
    auto u32 = [&](std::uint32_t v) {
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    u32(1);           // version
    u32(3);           // ndim
    u32(0xffffffff);  // channels
    u32(0xffffffff);  // height
    u32(0xffffffff);  // width
    testsup::write_bytes(tmp.path("x.sdtf"), bytes);
    CHECK_THROWS_WITH(read_field_stack(tmp.path("x.sdtf")),
                      Catch::Matchers::ContainsSubstring("dimension overflow"));
  }
}

TEST_CASE("SDTW named arrays round-trip") {
  TempDir tmp("sdtw");
  std::vector<NamedArray> arrays;
  arrays.push_back({"trunk.0.w", {2, 3, 3, 3}, std::vector<double>(54, 0.0)});
  arrays.push_back({"trunk.0.b", {2}, {0.5, -1.25}});
  Rng rng(5);
  for (auto& v : arrays[0].values) v = static_cast<float>(rng.normal());

  write_weights(arrays, tmp.path("w.sdtw"));
  const auto back = read_weights(tmp.path("w.sdtw"));
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "trunk.0.w");
  CHECK(back[0].dims == arrays[0].dims);
  CHECK(back[0].values == arrays[0].values);
  CHECK(back[1].name == "trunk.0.b");
  CHECK(back[1].values == arrays[1].values);

  SECTION("bad magic") {
    std::string bytes = testsup::read_bytes(tmp.path("w.sdtw"));
    bytes[0] = 'X';
    testsup::write_bytes(tmp.path("w.sdtw"), bytes);
    CHECK_THROWS_WITH(read_weights(tmp.path("w.sdtw")),
                      Catch::Matchers::ContainsSubstring("bad magic"));
  }
}
