#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "vise/backends.hpp"
#include "vise/errors.hpp"

using namespace vise;
using testing::TempDir;

namespace {

struct Fixture {
    TempDir dir;
    DatasetIndex idx = testing::make_dataset(dir.path(), testing::scenes(80, 4, 1, 2));
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

Episode episode(std::uint64_t e, int n_ways = 2) { return sample_episode(fixture().idx, 0, n_ways, 1, 3, e); }

Assignment ask(VlmBackend& vlm, const Episode& ep, const DetectionResult& det) {
    QueryContext q(ep);
    const auto prompt = build_prompt(ep, det, default_template());
    const auto raw = vlm.chat({prompt, q, det, nullptr});
    return parse_answer(raw, static_cast<int>(det.boxes.size()), ep.labels, true);
}

int true_position_of(const Episode& ep, const BoundingBox& box) {
    for (const auto& inst : ep.query.instances)
        if (inst.box == box) return inst.class_position;
    return -1;
}

}  // namespace

TEST_CASE("noise profile validation") {
    NoiseProfile p;
    CHECK_NOTHROW(p.validate(2));
    CHECK(p.is_zero());
    p.p_miss = 1.5;
    CHECK_THROWS_AS(p.validate(2), ConfigError);
    p = {};
    p.boundary_noise = -1;
    CHECK_THROWS_AS(p.validate(2), ConfigError);
    p = {};
    p.confusion = {{0.5, 0.4, 0.0}, {0.0, 1.0, 0.0}};
    CHECK_THROWS_AS(p.validate(2), ConfigError);
    p.confusion = {{0.5, 0.5, 0.0}};
    CHECK_THROWS_AS(p.validate(2), ConfigError);
    p = {};
    p.confusion_offdiag = 0.3;
    p.confusion_none = 0.1;
    const auto row = p.confusion_row(1, 3);
    REQUIRE(row.size() == 4);
    CHECK(row[0] == doctest::Approx(0.6));
    CHECK(row[1] == doctest::Approx(0.15));
    CHECK(row[3] == doctest::Approx(0.1));
    CHECK(!p.is_zero());

    const auto j = noise_profile_to_json(p);
    const auto back = parse_noise_profile(j);
    CHECK(noise_profile_to_json(back) == j);
}

TEST_CASE("oracle detector returns one box per instance") {
    for (std::uint64_t e = 0; e < 20; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        const auto det = SimulatedDetector{}.detect(q);
        REQUIRE(det.boxes.size() == ep.query.instances.size());
        for (std::size_t i = 0; i < det.boxes.size(); ++i) {
            CHECK(det.boxes[i].box == ep.query.instances[i].box);
            CHECK(det.boxes[i].score == 1.0);
            CHECK(det.boxes[i].display_id == static_cast<int>(i) + 1);
        }
    }
}

TEST_CASE("p_miss = 1 leaves only spurious boxes") {
    NoiseProfile p;
    p.p_miss = 1.0;
    p.p_spurious = 2.0;
    int spurious = 0;
    for (std::uint64_t e = 0; e < 30; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        for (const auto& b : SimulatedDetector(p).detect(q).boxes) {
            CHECK(true_position_of(ep, b.box) == -1);
            CHECK(b.box.fits(ep.query.width, ep.query.height));
            ++spurious;
        }
    }
    CHECK(spurious > 30);
}

TEST_CASE("p_miss = 0.2 keeps 80% of instances") {
    NoiseProfile p;
    p.p_miss = 0.2;
    p.seed = 17;
    int total = 0, kept = 0;
    for (std::uint64_t e = 0; total < 1000; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        const auto det = SimulatedDetector(p).detect(q);
        total += static_cast<int>(ep.query.instances.size());
        kept += static_cast<int>(det.boxes.size());
    }
    const double recall = static_cast<double>(kept) / total;
    CHECK(recall == doctest::Approx(0.8).epsilon(0.05));
    CHECK(std::abs(recall - 0.8) <= 0.04);
}

TEST_CASE("box jitter stays in bounds and moves edges") {
    NoiseProfile p;
    p.box_jitter = 0.3;
    int moved = 0;
    for (std::uint64_t e = 0; e < 30; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        const auto det = SimulatedDetector(p).detect(q);
        REQUIRE(det.boxes.size() == ep.query.instances.size());
        for (std::size_t i = 0; i < det.boxes.size(); ++i) {
            CHECK(det.boxes[i].box.fits(ep.query.width, ep.query.height));
            moved += det.boxes[i].box != ep.query.instances[i].box;
        }
    }
    CHECK(moved > 0);
}

TEST_CASE("simulated tools are deterministic") {
    NoiseProfile p;
    p.p_miss = 0.3;
    p.box_jitter = 0.1;
    p.p_spurious = 1.0;
    p.seed = 5;
    const auto ep = episode(4);
    QueryContext q1(ep), q2(ep);
    CHECK(SimulatedDetector(p).detect(q1) == SimulatedDetector(p).detect(q2));
    p.seed = 6;
    bool differs = false;
    for (std::uint64_t e = 0; e < 10 && !differs; ++e) {
        const auto ep2 = episode(e);
        QueryContext a(ep2), b(ep2);
        NoiseProfile p5 = p;
        p5.seed = 5;
        differs = SimulatedDetector(p).detect(a) != SimulatedDetector(p5).detect(b);
    }
    CHECK(differs);
}

TEST_CASE("oracle VLM with identity confusion names every true class") {
    OracleVlm vlm;
    for (std::uint64_t e = 0; e < 30; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        const auto det = SimulatedDetector{}.detect(q);
        const auto a = ask(vlm, ep, det);
        for (const auto& b : det.boxes) {
            const int truth = true_position_of(ep, b.box);
            if (truth > 0) CHECK(a.verdicts.at(b.display_id) == truth);
            else CHECK(!a.verdicts.at(b.display_id));
        }
    }
}

TEST_CASE("oracle VLM maps unmatched boxes to none") {
    OracleVlm vlm;
    const auto ep = episode(1);
    DetectionResult det;
    det.boxes.push_back({1, {0, 0, 1, 1}, 1.0, ""});
    CHECK(!ask(vlm, ep, det).verdicts.at(1));
}

TEST_CASE("confusion row with all mass on none") {
    NoiseProfile p;
    p.confusion = {{0.0, 0.0, 1.0}, {0.0, 1.0, 0.0}};
    OracleVlm vlm(p);
    int class1 = 0;
    for (std::uint64_t e = 0; e < 30; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        const auto det = SimulatedDetector{}.detect(q);
        const auto a = ask(vlm, ep, det);
        for (const auto& b : det.boxes) {
            const int truth = true_position_of(ep, b.box);
            if (truth == 1) {
                ++class1;
                CHECK(!a.verdicts.at(b.display_id));
            } else if (truth == 2) {
                CHECK(a.verdicts.at(b.display_id) == 2);
            }
        }
    }
    CHECK(class1 > 0);
}

TEST_CASE("0.8/0.2 confusion gives about 20% cross assignments") {
    NoiseProfile p;
    p.confusion = {{0.8, 0.2, 0.0}, {0.2, 0.8, 0.0}};
    p.seed = 23;
    OracleVlm vlm(p);
    int boxes = 0, crossed = 0;
    for (std::uint64_t e = 0; boxes < 500; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        const auto det = SimulatedDetector{}.detect(q);
        const auto a = ask(vlm, ep, det);
        for (const auto& b : det.boxes) {
            const int truth = true_position_of(ep, b.box);
            if (truth <= 0) continue;
            ++boxes;
            REQUIRE(a.verdicts.at(b.display_id).has_value());
            crossed += *a.verdicts.at(b.display_id) != truth;
        }
    }
    CHECK(std::abs(static_cast<double>(crossed) / boxes - 0.2) <= 0.04);
}

TEST_CASE("oracle segmenter returns the instance mask") {
    SimulatedSegmenter seg;
    for (std::uint64_t e = 0; e < 20; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        for (const auto& inst : ep.query.instances) {
            const auto m = seg.segment(q, inst.box);
            CHECK(iou(m, inst.mask) == 1.0);
        }
    }
    const auto ep = episode(0);
    QueryContext q(ep);
    CHECK_THROWS_AS(seg.segment(q, {0, 0, ep.query.width + 1, 4}), BoundsError);
}

TEST_CASE("segmenter with no overlapping instance returns an empty mask") {
    // Corner box on a scene with a single centred instance.
    Episode ep;
    ep.n_ways = 1;
    ep.labels = {"a"};
    ep.query.width = ep.query.height = 20;
    BinaryMask m(20, 20);
    for (int y = 8; y < 12; ++y)
        for (int x = 8; x < 12; ++x) m.set(x, y);
    ep.query.instances.push_back({1, 1, {8, 8, 12, 12}, m});
    QueryContext q(ep);
    CHECK(SimulatedSegmenter{}.segment(q, {0, 0, 3, 3}).empty());
}

TEST_CASE("box fill segmenter") {
    Episode ep;
    ep.query.width = ep.query.height = 4;
    QueryContext q(ep);
    const auto m = BoxFillSegmenter{}.segment(q, {1, 1, 3, 3});
    CHECK(m.popcount() == 4);
    CHECK(m.width() == 4);
}

TEST_CASE("boundary noise radius 0 is the identity") {
    NoiseProfile zero;
    zero.seed = 9;
    zero.boundary_noise = 0;
    NoiseProfile one = zero;
    one.boundary_noise = 1;
    int changed = 0;
    for (std::uint64_t e = 0; e < 20; ++e) {
        const auto ep = episode(e);
        QueryContext q(ep);
        for (const auto& inst : ep.query.instances) {
            CHECK(SimulatedSegmenter(zero).segment(q, inst.box) == SimulatedSegmenter{}.segment(q, inst.box));
            changed += SimulatedSegmenter(one).segment(q, inst.box) != inst.mask;
        }
    }
    CHECK(changed > 0);
}

TEST_CASE("label noise only touches the scored truth") {
    NoiseProfile p;
    p.p_label_noise = 1.0;
    auto ep = episode(2);
    const auto instances = ep.query.instances;
    apply_label_noise(ep, p);
    CHECK(ep.query.labels.empty());
    CHECK(ep.query.instances == instances);
}

TEST_CASE("scripted VLM") {
    const auto ep = episode(0);
    QueryContext q(ep);
    const auto det = SimulatedDetector{}.detect(q);
    const auto prompt = build_prompt(ep, det, default_template());
    ScriptedVlm vlm({{prompt_hash(prompt), "reasoning\nANSWER: {}"}});
    CHECK(vlm.chat({prompt, q, det, nullptr}).final_segment == " {}");

    const auto other = build_prompt(episode(1), det, default_template());
    CHECK_THROWS_AS(vlm.chat({other, q, det, nullptr}), FixtureError);

    TempDir dir;
    write_file_atomic(dir / "s.json", nlohmann::json{{prompt_hash(prompt), "ANSWER: {}"}}.dump());
    CHECK(ScriptedVlm::from_file(dir / "s.json").chat({prompt, q, det, nullptr}).text == "ANSWER: {}");
    write_file_atomic(dir / "bad.json", "{\"x\": 1}");
    CHECK_THROWS_AS(ScriptedVlm::from_file(dir / "bad.json"), FixtureError);
}

TEST_CASE("oracle triple scores perfectly") {
    const auto s = testing::evaluate(fixture().idx, oracle_backends(), 2, 1, 60, 1);
    CHECK(s.er == 1.0);
    CHECK(s.miou == 1.0);
}

TEST_CASE("mIoU is non-increasing in each noise knob") {
    auto run = [](auto set) {
        NoiseProfile p;
        p.seed = 31;
        set(p);
        return testing::evaluate(fixture().idx, noisy_backends(p), 2, 1, 120, 8).miou;
    };
    SUBCASE("p_miss") {
        const double a = run([](NoiseProfile& p) { p.p_miss = 0.0; });
        const double b = run([](NoiseProfile& p) { p.p_miss = 0.2; });
        const double c = run([](NoiseProfile& p) { p.p_miss = 0.4; });
        CHECK(a >= b);
        CHECK(b >= c);
        CHECK(a > c);
    }
    SUBCASE("boundary_noise") {
        const double a = run([](NoiseProfile& p) { p.boundary_noise = 0; });
        const double b = run([](NoiseProfile& p) { p.boundary_noise = 1; });
        const double c = run([](NoiseProfile& p) { p.boundary_noise = 3; });
        CHECK(a >= b);
        CHECK(b >= c);
        CHECK(a > c);
    }
    SUBCASE("off-diagonal confusion") {
        const double a = run([](NoiseProfile& p) { p.confusion_offdiag = 0.0; });
        const double b = run([](NoiseProfile& p) { p.confusion_offdiag = 0.2; });
        const double c = run([](NoiseProfile& p) { p.confusion_offdiag = 0.4; });
        CHECK(a >= b);
        CHECK(b >= c);
        CHECK(a > c);
    }
}
