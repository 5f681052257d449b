#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>

#include "sssm/io.hpp"
#include "test_util.hpp"

using namespace sssm;

TEST_SUITE("io") {
  TEST_CASE("f64le round trip is bit exact") {
    const std::vector<double> v{0.0, -0.0, 1.0, -2.5, 1e-300, std::numeric_limits<double>::infinity(),
                                std::numeric_limits<double>::denorm_min()};
    const auto bytes = io::encode_f64le(v);
    REQUIRE(bytes.size() == 8 * v.size());
    CHECK(bytes[8 * 2 + 7] == 0x3f);  // 1.0 = 0x3ff0000000000000, little-endian
    CHECK(bytes[8 * 2 + 6] == 0xf0);
    const auto back = io::decode_f64le(bytes);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::signbit(back[i]) == std::signbit(v[i]));
    CHECK(back == v);
    const std::vector<std::uint8_t> odd(7);
    CHECK_THROWS_AS(io::decode_f64le(odd), io::FormatError);
  }

  TEST_CASE("crc32 of a known string") {
    const std::string s = "123456789";
    CHECK(io::crc32_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) ==
          "cbf43926");
  }

  TEST_CASE("real formatting keeps 17 significant digits") {
    const double x = 0.1;
    CHECK(std::stod(io::format_real(x)) == x);
    CHECK(io::format_real(1.0) == "1.0000000000000000e+00");
  }

  TEST_CASE("tensor container round trip") {
    Rng rng(5);
    io::TensorContainer c;
    c.kind = "unit";
    c.meta_json = R"({"answer":42})";
    c.add("a", rng.normal_matrix(3, 4));
    c.add("b", Matrix::Zero(0, 2));
    const auto dir = std::filesystem::temp_directory_path() / "sssm_test_container";
    std::filesystem::remove_all(dir);
    c.save(dir);
    const auto back = io::TensorContainer::load(dir);
    CHECK(back.kind == "unit");
    CHECK(back.has("a"));
    CHECK_FALSE(back.has("c"));
    CHECK(testutil::max_abs_diff(back.get("a"), c.get("a")) == 0.0);
    CHECK(back.get("b").cols() == 2);
    CHECK(back.meta_json.find("42") != std::string::npos);
    CHECK_THROWS(back.get("missing"));
    std::filesystem::remove_all(dir);
  }
}
