#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vise/image.hpp"
#include "vise/mask.hpp"

namespace vise {

struct ClassRecord {
    int id = 0;
    std::string label;
    /// Fill color when the dataset is synthetic; lets the stub tools recognise classes.
    std::optional<Rgb> color;
};

struct InstanceRecord {
    int class_id = 0;
    BoundingBox box;
    RleMask mask;
};

struct ImageRecord {
    std::string image_id;
    std::string path;  // as written in the manifest, relative to it
    int width = 0;
    int height = 0;
    std::vector<InstanceRecord> instances;

    bool contains_class(int class_id) const;
};

struct DatasetIndex {
    std::string name;
    std::vector<ClassRecord> classes;
    std::vector<std::vector<int>> folds;
    std::vector<ImageRecord> images;
    std::filesystem::path root;  // directory image paths resolve against

    const ClassRecord& class_by_id(int id) const;
    std::filesystem::path image_path(const ImageRecord& image) const { return root / image.path; }
    /// Indices into `images` of every image holding at least one instance of the class.
    const std::vector<std::size_t>& images_with_class(int class_id) const;

    /// Rebuilds lookup tables; call after mutating classes/images by hand.
    void reindex();

private:
    std::map<int, std::size_t> class_pos_;
    std::map<int, std::vector<std::size_t>> by_class_;
};

enum class FoldScheme { pascal, coco };

/// pascal: contiguous blocks; coco: class ids interleaved by (position mod folds).
std::vector<std::vector<int>> default_folds(FoldScheme scheme, const std::vector<int>& class_ids,
                                            int n_folds = 4);

/// Parses and fully validates. Throws ManifestError naming the offending record.
DatasetIndex load_manifest(const std::filesystem::path& path);
DatasetIndex parse_manifest(std::string_view json_text, const std::filesystem::path& root);
std::string manifest_to_json(const DatasetIndex& index);
void validate(const DatasetIndex& index);

struct SupportExample {
    int class_position = 0;  // 1-based
    std::string image_id;
    std::filesystem::path image_path;
    std::string label;
    std::optional<RleMask> mask;

    friend bool operator==(const SupportExample&, const SupportExample&) = default;
};

struct GroundTruthInstance {
    int class_position = 0;  // 0 when the instance is not one of the episode classes
    int class_id = 0;
    BoundingBox box;
    BinaryMask mask;

    friend bool operator==(const GroundTruthInstance&, const GroundTruthInstance&) = default;
};

struct QueryRecord {
    std::string image_id;
    std::filesystem::path image_path;
    int width = 0;
    int height = 0;
    /// Episode positions with a non-empty scored mask, ascending.
    std::vector<int> labels;
    /// Scored ground truth, index n-1 for class position n.
    std::vector<BinaryMask> class_masks;
    /// Every annotated object in the scene, episode class or not. Simulated tools read this.
    std::vector<GroundTruthInstance> instances;

    friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

struct Episode {
    int fold = 0;
    std::uint64_t episode_index = 0;
    int n_ways = 0;
    int k_shots = 0;
    std::vector<int> class_ids;
    std::vector<std::string> labels;  // labels[n-1] for class position n
    std::vector<SupportExample> support;
    QueryRecord query;

    friend bool operator==(const Episode&, const Episode&) = default;
};

struct SamplerOptions {
    double negative_query_rate = 0.0;
};

/// Deterministic in (index, fold, n_ways, k_shots, seed, episode_index, options).
Episode sample_episode(const DatasetIndex& index, int fold, int n_ways, int k_shots,
                       std::uint64_t seed, std::uint64_t episode_index,
                       const SamplerOptions& options = {});

/// Recomputes labels/class_masks from instances, excluding the given instance indices.
void rebuild_scored_truth(QueryRecord& query, const std::vector<bool>& dropped);

}  // namespace vise
