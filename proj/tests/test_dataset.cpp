#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>

#include "json.hpp"
#include "support.hpp"
#include "vise/dataset.hpp"
#include "vise/errors.hpp"
#include "vise/image.hpp"
#include "vise/synth.hpp"

using namespace vise;
using nlohmann::json;
using testing::TempDir;

namespace {

json minimal_manifest() {
    return json::parse(R"({
      "name": "tiny",
      "classes": [{"id": 1, "label": "bus"}],
      "folds": [[1]],
      "images": [{"image_id": "a", "path": "a.png", "width": 2, "height": 2,
                  "instances": [{"class_id": 1, "box": [0, 0, 1, 1],
                                 "mask": {"size": [2, 2], "counts": [0, 1, 3]}}]}]
    })");
}

bool support_subset_of_fold(const Episode& ep, const DatasetIndex& idx) {
    const auto& f = idx.folds[static_cast<std::size_t>(ep.fold)];
    return std::all_of(ep.class_ids.begin(), ep.class_ids.end(),
                       [&](int c) { return std::find(f.begin(), f.end(), c) != f.end(); });
}

}  // namespace

TEST_CASE("minimal manifest loads") {
    const auto idx = parse_manifest(minimal_manifest().dump(), "/data");
    CHECK(idx.classes.size() == 1);
    CHECK(idx.folds.size() == 1);
    CHECK(idx.images.size() == 1);
    CHECK(idx.image_path(idx.images[0]) == std::filesystem::path("/data/a.png"));
}

TEST_CASE("fold referencing an unknown class is rejected with the record named") {
    auto m = minimal_manifest();
    m["folds"] = json::array({json::array({1, 99})});
    try {
        parse_manifest(m.dump(), ".");
        FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
        CHECK(std::string(e.what()).find("99") != std::string::npos);
        CHECK(std::string(e.what()).find("fold 0") != std::string::npos);
    }
}

TEST_CASE("manifest invariants") {
    SUBCASE("instance of unknown class") {
        auto m = minimal_manifest();
        m["images"][0]["instances"][0]["class_id"] = 7;
        CHECK_THROWS_AS(parse_manifest(m.dump(), "."), ManifestError);
    }
    SUBCASE("box out of bounds") {
        auto m = minimal_manifest();
        m["images"][0]["instances"][0]["box"] = {0, 0, 3, 1};
        CHECK_THROWS_AS(parse_manifest(m.dump(), "."), ManifestError);
    }
    SUBCASE("mask size differs from the image") {
        auto m = minimal_manifest();
        m["images"][0]["instances"][0]["mask"] = {{"size", {1, 4}}, {"counts", {0, 1, 3}}};
        CHECK_THROWS_AS(parse_manifest(m.dump(), "."), ManifestError);
    }
    SUBCASE("empty instance mask") {
        auto m = minimal_manifest();
        m["images"][0]["instances"][0]["mask"] = {{"size", {2, 2}}, {"counts", {4}}};
        CHECK_THROWS_AS(parse_manifest(m.dump(), "."), ManifestError);
    }
    SUBCASE("overlapping folds") {
        auto m = minimal_manifest();
        m["folds"] = json::array({json::array({1}), json::array({1})});
        CHECK_THROWS_AS(parse_manifest(m.dump(), "."), ManifestError);
    }
    SUBCASE("duplicate class ids") {
        auto m = minimal_manifest();
        m["classes"].push_back({{"id", 1}, {"label", "car"}});
        CHECK_THROWS_AS(parse_manifest(m.dump(), "."), ManifestError);
    }
    SUBCASE("not json") { CHECK_THROWS_AS(parse_manifest("[1,", "."), ManifestError); }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.json"), ManifestError); }
}

TEST_CASE("built-in fold schemes") {
    std::vector<int> ids;
    for (int i = 1; i <= 20; ++i) ids.push_back(i);
    const auto pascal = default_folds(FoldScheme::pascal, ids);
    REQUIRE(pascal.size() == 4);
    for (const auto& f : pascal) CHECK(f.size() == 5);
    CHECK(pascal[0] == std::vector<int>{1, 2, 3, 4, 5});
    CHECK(pascal[3] == std::vector<int>{16, 17, 18, 19, 20});

    std::vector<int> coco_ids;
    for (int i = 1; i <= 80; ++i) coco_ids.push_back(i);
    const auto coco = default_folds(FoldScheme::coco, coco_ids);
    REQUIRE(coco.size() == 4);
    for (const auto& f : coco) CHECK(f.size() == 20);
    CHECK(coco[0][0] == 1);
    CHECK(coco[0][1] == 5);
    CHECK(coco[1][0] == 2);

    auto m = minimal_manifest();
    m.erase("folds");
    // One class cannot fill four folds; empty folds are not created.
    CHECK(parse_manifest(m.dump(), ".").folds.size() == 1);
    for (int i = 2; i <= 20; ++i) m["classes"].push_back({{"id", i}, {"label", "c" + std::to_string(i)}});
    CHECK(parse_manifest(m.dump(), ".").folds.size() == 4);
    m["folds"] = "coco";
    CHECK(parse_manifest(m.dump(), ".").folds[0] == std::vector<int>{1, 5, 9, 13, 17});
    m["folds"] = "lvis";
    CHECK_THROWS_AS(parse_manifest(m.dump(), "."), ManifestError);
}

TEST_CASE("manifest serialization round trip") {
    TempDir dir;
    const auto idx = testing::make_dataset(dir.path(), testing::scenes(12, 4, 2, 2));
    const auto again = parse_manifest(manifest_to_json(idx), idx.root);
    CHECK(manifest_to_json(again) == manifest_to_json(idx));
}

TEST_CASE("synthetic generator") {
    TempDir a, b;
    SceneSpec spec = testing::scenes(20, 2, 1, 1);
    spec.min_instances = 1;
    spec.max_instances = 2;
    spec.classes_per_image = 0;
    const auto ma = generate_synthetic_dataset(spec, 9, a.path());
    const auto mb = generate_synthetic_dataset(spec, 9, b.path());
    CHECK(read_text_file(ma) == read_text_file(mb));

    const auto idx = load_manifest(ma);
    CHECK(idx.images.size() == 20);
    for (const auto& im : idx.images) {
        CHECK(im.instances.size() >= 1);
        CHECK(im.instances.size() <= 2);
        const Image pixels = read_png(idx.image_path(im));
        REQUIRE(pixels.width == im.width);
        std::map<int, BinaryMask> per_class;
        std::map<int, std::size_t> sum;
        for (const auto& inst : im.instances) {
            const auto m = rle_decode(inst.mask);
            CHECK(m.popcount() > 0);
            CHECK(m.bounds() == inst.box);
            const auto color = *idx.class_by_id(inst.class_id).color;
            for (int y = 0; y < m.height(); ++y)
                for (int x = 0; x < m.width(); ++x)
                    if (m.test(x, y)) REQUIRE(pixels.at(x, y) == color);
            auto [it, fresh] = per_class.try_emplace(inst.class_id, im.width, im.height);
            it->second = mask_union(it->second, m);
            sum[inst.class_id] += m.popcount();
        }
        // Non-overlapping scenes: the class union is a disjoint sum.
        for (const auto& [cls, m] : per_class) CHECK(m.popcount() == sum[cls]);
    }
    CHECK_THROWS_AS(generate_synthetic_dataset(SceneSpec{}, 1, a / "x"), ConfigError);
}

TEST_CASE("synthetic scenes with a fixed class count per image") {
    TempDir dir;
    const auto idx = testing::make_dataset(dir.path(), testing::scenes(30, 6, 3, 2));
    CHECK(idx.folds.size() == 3);
    for (const auto& im : idx.images) {
        std::set<int> cls;
        for (const auto& inst : im.instances) cls.insert(inst.class_id);
        CHECK(cls.size() == 2);
    }
}

TEST_CASE("occluding scenes keep boxes tight on the visible mask") {
    TempDir dir;
    auto spec = testing::scenes(20, 3, 1, 3);
    spec.allow_overlap = true;
    spec.max_instances = 5;
    const auto idx = testing::make_dataset(dir.path(), spec);
    for (const auto& im : idx.images)
        for (const auto& inst : im.instances) CHECK(rle_decode(inst.mask).bounds() == inst.box);
}

TEST_CASE("scene spec parsing") {
    const auto s = parse_scene_spec(R"({
      // comment
      "images": 5, "classes": [{"label": "bus", "shape": "diamond", "color": [1, 2, 3]}, {}]
    })");
    CHECK(s.images == 5);
    REQUIRE(s.classes.size() == 2);
    CHECK(s.classes[0].label == "bus");
    CHECK(s.classes[0].shape == Shape::diamond);
    CHECK(s.classes[0].color == Rgb{1, 2, 3});
    CHECK_THROWS_AS(parse_scene_spec("{\"classes\": [{\"shape\": \"blob\"}]}"), ConfigError);
    CHECK_THROWS_AS(parse_scene_spec("nope"), ConfigError);
}

TEST_CASE("episode sampling") {
    TempDir dir;
    const auto idx = testing::make_dataset(dir.path(), testing::scenes(60, 8, 2, 2));

    SUBCASE("cardinality and invariants") {
        for (int k : {1, 2, 3})
            for (std::uint64_t e = 0; e < 40; ++e) {
                const auto ep = sample_episode(idx, static_cast<int>(e % 2), 2, k, 5, e);
                REQUIRE(ep.support.size() == static_cast<std::size_t>(2 * k));
                REQUIRE(ep.class_ids.size() == 2);
                REQUIRE(ep.class_ids[0] != ep.class_ids[1]);
                REQUIRE(support_subset_of_fold(ep, idx));
                std::set<std::string> imgs;
                for (const auto& s : ep.support) {
                    REQUIRE(s.image_id != ep.query.image_id);
                    REQUIRE(imgs.insert(s.image_id).second);
                    const auto& rec = *std::find_if(idx.images.begin(), idx.images.end(),
                                                    [&](const ImageRecord& r) { return r.image_id == s.image_id; });
                    REQUIRE(rec.contains_class(ep.class_ids[static_cast<std::size_t>(s.class_position - 1)]));
                    REQUIRE(s.label == ep.labels[static_cast<std::size_t>(s.class_position - 1)]);
                }
                std::vector<int> expected;
                for (int n = 1; n <= 2; ++n)
                    if (!ep.query.class_masks[static_cast<std::size_t>(n - 1)].empty()) expected.push_back(n);
                REQUIRE(ep.query.labels == expected);
                REQUIRE(!ep.query.labels.empty());
            }
    }
    SUBCASE("determinism") {
        CHECK(sample_episode(idx, 1, 2, 1, 77, 12) == sample_episode(idx, 1, 2, 1, 77, 12));
        CHECK(!(sample_episode(idx, 1, 2, 1, 77, 12) == sample_episode(idx, 1, 2, 1, 78, 12)));
    }
    SUBCASE("different episode indices give independent draws") {
        std::vector<std::multiset<std::string>> supports;
        for (std::uint64_t e = 0; e < 60; ++e) {
            const auto ep = sample_episode(idx, 0, 2, 2, 3, e);
            std::multiset<std::string> s;
            for (const auto& x : ep.support) s.insert(x.image_id);
            supports.push_back(s);
        }
        int pairs = 0, differ = 0;
        for (std::size_t i = 0; i < supports.size(); ++i)
            for (std::size_t j = i + 1; j < supports.size(); ++j) {
                ++pairs;
                differ += supports[i] != supports[j];
            }
        CHECK(static_cast<double>(differ) / pairs >= 0.99);
    }
    SUBCASE("capacity errors") {
        CHECK_THROWS_AS(sample_episode(idx, 0, 5, 1, 1, 0), SamplingError);
        CHECK_THROWS_AS(sample_episode(idx, 0, 2, 100, 1, 0), SamplingError);
        CHECK_THROWS_AS(sample_episode(idx, 3, 1, 1, 1, 0), SamplingError);
    }
    SUBCASE("negative queries") {
        int negatives = 0;
        for (std::uint64_t e = 0; e < 200; ++e) {
            const auto ep = sample_episode(idx, 0, 1, 1, 4, e, SamplerOptions{0.5});
            negatives += ep.query.labels.empty();
        }
        CHECK(negatives > 60);
        CHECK(negatives < 140);
    }
}

TEST_CASE("one-way one-shot queries always contain the class") {
    TempDir dir;
    auto spec = testing::scenes(10, 2, 1, 1);
    const auto idx = testing::make_dataset(dir.path(), spec);
    for (std::uint64_t e = 0; e < 100; ++e) {
        const auto ep = sample_episode(idx, 0, 1, 1, 2, e);
        CHECK(ep.query.labels == std::vector<int>{1});
    }
}

TEST_CASE("support masks describe the support class") {
    TempDir dir;
    const auto idx = testing::make_dataset(dir.path(), testing::scenes(30, 4, 1, 2));
    const auto ep = sample_episode(idx, 0, 2, 2, 1, 0);
    for (const auto& s : ep.support) {
        REQUIRE(s.mask);
        CHECK(rle_decode(*s.mask).popcount() > 0);
    }
}

TEST_CASE("rebuild_scored_truth drops annotations") {
    TempDir dir;
    const auto idx = testing::make_dataset(dir.path(), testing::scenes(30, 4, 1, 2));
    auto ep = sample_episode(idx, 0, 2, 1, 1, 0);
    const auto before = ep.query.labels;
    rebuild_scored_truth(ep.query, std::vector<bool>(ep.query.instances.size(), true));
    CHECK(ep.query.labels.empty());
    rebuild_scored_truth(ep.query, {});
    CHECK(ep.query.labels == before);
}
