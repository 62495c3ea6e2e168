#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vise/image.hpp"

namespace vise {

enum class Shape { rectangle, diamond, cross };

struct SynthClass {
    std::string label;
    Shape shape = Shape::rectangle;
    Rgb color{};
};

struct SceneSpec {
    std::string name = "synthetic";
    int width = 128;
    int height = 128;
    int images = 20;
    int min_instances = 1;
    int max_instances = 2;
    /// When > 0, every scene shows exactly this many distinct classes.
    int classes_per_image = 0;
    int min_size = 12;
    int max_size = 40;
    int folds = 1;
    bool allow_overlap = false;
    Rgb background{96, 96, 96};
    std::vector<SynthClass> classes;
};

SceneSpec parse_scene_spec(std::string_view json_text);
SceneSpec load_scene_spec(const std::filesystem::path& path);

/// `n` classes cycling through the three shapes with distinct fill colors.
std::vector<SynthClass> default_synth_classes(int n);

/// Writes PNG scenes under out_dir/images and out_dir/manifest.json; returns the
/// manifest path. Masks and boxes are exact by construction.
std::filesystem::path generate_synthetic_dataset(const SceneSpec& spec, std::uint64_t seed,
                                                 const std::filesystem::path& out_dir);

}  // namespace vise
