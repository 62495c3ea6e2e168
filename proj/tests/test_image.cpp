#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "vise/errors.hpp"
#include "vise/image.hpp"

using namespace vise;

TEST_CASE("png round trip") {
    Image img(7, 3, {10, 20, 30});
    img.put(6, 2, {255, 0, 1});
    const auto bytes = encode_png(img);
    const Image back = decode_png(bytes);
    CHECK(back.width == 7);
    CHECK(back.height == 3);
    CHECK(back.rgb == img.rgb);

    testing::TempDir dir;
    write_png(dir / "a.png", img);
    CHECK(read_png(dir / "a.png").rgb == img.rgb);
}

TEST_CASE("png rejects garbage") {
    const std::vector<std::uint8_t> junk{1, 2, 3, 4, 5};
    CHECK_THROWS_AS(decode_png(junk), CodecError);
    auto bytes = encode_png(Image(4, 4));
    bytes.resize(bytes.size() / 2);
    CHECK_THROWS_AS(decode_png(bytes), CodecError);
}

TEST_CASE("base64") {
    const std::string s = "any carnal pleas";
    const std::vector<std::uint8_t> raw(s.begin(), s.end());
    CHECK(base64_encode(raw) == "YW55IGNhcm5hbCBwbGVhcw==");
    CHECK(base64_decode("YW55IGNhcm5hbCBwbGVhcw==") == raw);
    for (std::size_t n = 0; n < 10; ++n) {
        std::vector<std::uint8_t> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::uint8_t>(i * 37);
        CHECK(base64_decode(base64_encode(v)) == v);
    }
    CHECK_THROWS_AS(base64_decode("!!!!"), CodecError);
}

TEST_CASE("sha256") {
    CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("atomic file writes") {
    testing::TempDir dir;
    write_file_atomic(dir / "sub/x.txt", "hello");
    CHECK(read_text_file(dir / "sub/x.txt") == "hello");
    write_file_atomic(dir / "sub/x.txt", "bye");
    CHECK(read_text_file(dir / "sub/x.txt") == "bye");
    CHECK_THROWS_AS(read_text_file(dir / "missing"), IoError);
}
