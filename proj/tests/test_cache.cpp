#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <thread>

#include "support.hpp"
#include "vise/backends.hpp"

using namespace vise;
using testing::TempDir;

namespace {

class CountingTransport final : public HttpTransport {
public:
    std::optional<HttpReply> post(const std::string&, const std::string&, const std::string&) override {
        ++calls;
        return HttpReply{200, R"({"text": "ANSWER: {}"})"};
    }
    std::string describe() const override { return "counting://"; }
    std::atomic<int> calls{0};
};

}  // namespace

TEST_CASE("put then get returns identical bytes") {
    TempDir dir;
    ResponseCache cache(dir.path());
    const std::string payload("binary\0payload\n\xff", 16);
    const auto key = ResponseCache::key_for("/v1/chat", "{\"a\":1}");
    CHECK(key.size() == 64);
    CHECK(key != ResponseCache::key_for("/v1/detect", "{\"a\":1}"));
    CHECK(!cache.get(key));
    cache.put(key, payload);
    CHECK(cache.get(key) == payload);
    CHECK(cache.hits() == 1);
    CHECK(cache.misses() == 1);

    ResponseCache reopened(dir.path());
    CHECK(reopened.get(key) == payload);
}

TEST_CASE("fetch_through only fetches once") {
    TempDir dir;
    ResponseCache cache(dir.path());
    int fetches = 0;
    for (int i = 0; i < 3; ++i)
        CHECK(cache.fetch_through("k1", [&] { ++fetches; return std::string("v"); }) == "v");
    CHECK(fetches == 1);
}

TEST_CASE("damaged entries are evicted and re-fetched") {
    TempDir dir;
    ResponseCache cache(dir.path());
    const auto key = ResponseCache::key_for("/v1/chat", "x");
    cache.put(key, "a fairly long cached response body");
    const auto path = cache.entry_path(key);

    SUBCASE("truncated") {
        std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
    }
    SUBCASE("flipped byte") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-3, std::ios::end);
        f.put('#');
    }
    SUBCASE("garbage header") {
        std::ofstream(path, std::ios::trunc) << "hello";
    }
    SUBCASE("empty file") {
        std::ofstream(path, std::ios::trunc);
    }
    int fetches = 0;
    CHECK(cache.fetch_through(key, [&] { ++fetches; return std::string("fresh"); }) == "fresh");
    CHECK(fetches == 1);
    CHECK(cache.evictions() == 1);
    CHECK(cache.get(key) == "fresh");
}

TEST_CASE("concurrent writers and readers agree") {
    TempDir dir;
    ResponseCache cache(dir.path());
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t)
        threads.emplace_back([&, t] {
            for (int i = 0; i < 50; ++i) {
                const auto key = ResponseCache::key_for("e", std::to_string(i % 10));
                const auto v = cache.fetch_through(key, [&] { return "value" + std::to_string(i % 10); });
                CHECK(v == "value" + std::to_string(i % 10));
            }
            (void)t;
        });
    for (auto& th : threads) th.join();
    CHECK(cache.misses() >= 10);
}

TEST_CASE("identical prompts make a single remote call") {
    TempDir dir;
    const auto idx = testing::make_dataset(dir / "data", testing::scenes(20, 2, 1, 1));
    auto transport = std::make_shared<CountingTransport>();
    auto cache = std::make_shared<ResponseCache>(dir / "cache");
    auto client = std::make_shared<RemoteClient>(transport, RetryPolicy{1, 1}, 4, "", cache);
    RemoteVlm vlm(client, nlohmann::json::object());

    const auto ep = sample_episode(idx, 0, 1, 1, 1, 0);
    for (int i = 0; i < 2; ++i) {
        // Two separate episode objects with the same content.
        const Episode copy = ep;
        QueryContext q(copy);
        DetectionResult none;
        const auto prompt = build_prompt(copy, none, default_template());
        CHECK(vlm.chat({prompt, q, none, nullptr}).text == "ANSWER: {}");
    }
    CHECK(transport->calls == 1);
    CHECK(client->requests_sent() == 1);
    CHECK(cache->hits() == 1);
}
