#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vise/mask.hpp"

namespace vise {

struct DetectedBox {
    int display_id = 0;  // 1-based after filtering
    BoundingBox box;
    double score = 1.0;
    std::string hint;  // detector's own label, informational only

    friend bool operator==(const DetectedBox&, const DetectedBox&) = default;
};

struct DetectionResult {
    std::vector<DetectedBox> boxes;
    std::string source;

    friend bool operator==(const DetectionResult&, const DetectionResult&) = default;
};

/// The VLM's verdict per box: class position (1..N) or nullopt for "none".
struct Assignment {
    std::map<int, std::optional<int>> verdicts;
    std::vector<std::string> flags;

    friend bool operator==(const Assignment&, const Assignment&) = default;
};

}  // namespace vise
