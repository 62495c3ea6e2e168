#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "vise/dataset.hpp"
#include "vise/mask.hpp"
#include "vise/rng.hpp"
#include "vise/synth.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "vise") {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& p) const { return path_ / p; }

private:
    fs::path path_;
};

inline vise::BinaryMask random_mask(vise::Rng& rng, int w, int h, double density) {
    vise::BinaryMask m(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (rng.uniform() < density) m.set(x, y);
    return m;
}

/// Random size in [1, max] and density from a spread that includes empty and full.
inline vise::BinaryMask random_mask(vise::Rng& rng, int max_side) {
    const int w = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_side)));
    const int h = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_side)));
    static constexpr double kDensities[] = {0.0, 0.01, 0.1, 0.5, 0.9, 1.0};
    return random_mask(rng, w, h, kDensities[rng.below(6)]);
}

inline vise::BinaryMask rows_mask(int w, int h, std::initializer_list<int> rows) {
    vise::BinaryMask m(w, h);
    for (int r : rows)
        for (int x = 0; x < w; ++x) m.set(x, r);
    return m;
}

inline vise::BinaryMask cols_mask(int w, int h, std::initializer_list<int> cols) {
    vise::BinaryMask m(w, h);
    for (int c : cols)
        for (int y = 0; y < h; ++y) m.set(c, y);
    return m;
}

/// The synthetic scenes used across suites: `classes` classes in `folds` folds,
/// `per_image` classes per scene.
inline vise::SceneSpec scenes(int images, int classes, int folds, int per_image, int size = 96) {
    vise::SceneSpec s;
    s.name = "test";
    s.width = size;
    s.height = size;
    s.images = images;
    s.min_instances = per_image;
    s.max_instances = per_image + 1;
    s.classes_per_image = per_image;
    s.min_size = 10;
    s.max_size = 30;
    s.folds = folds;
    s.classes = vise::default_synth_classes(classes);
    return s;
}

inline vise::DatasetIndex make_dataset(const fs::path& dir, const vise::SceneSpec& spec, std::uint64_t seed = 1) {
    return vise::load_manifest(vise::generate_synthetic_dataset(spec, seed, dir));
}

}  // namespace testing

#include "vise/metrics.hpp"
#include "vise/pipeline.hpp"

namespace testing {

struct Score {
    double er = 0.0;
    double miou = 0.0;
};

/// Runs `episodes` episodes of fold 0 through the pipeline and scores them.
inline Score evaluate(const vise::DatasetIndex& idx, vise::BackendSet backends, int n_ways, int k_shots,
                      int episodes, std::uint64_t seed, const vise::PipelineConfig& config = {}) {
    std::vector<vise::LabelSetPair> sets;
    vise::IoUAccumulator acc(n_ways);
    for (int e = 0; e < episodes; ++e) {
        const auto ep = vise::sample_episode(idx, 0, n_ways, k_shots, seed, static_cast<std::uint64_t>(e));
        const auto r = vise::run_episode(ep, backends, config);
        sets.emplace_back(r.y_pred, r.y_true);
        acc.accumulate(r.per_class);
    }
    return {vise::exact_ratio(sets), vise::miou(acc, n_ways)};
}

}  // namespace testing
