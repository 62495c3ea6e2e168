#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vise/backends.hpp"
#include "vise/dataset.hpp"
#include "vise/detections.hpp"
#include "vise/mask.hpp"
#include "vise/vqa.hpp"

namespace vise {

enum class Variant {
    full,       // detector + VLM + segmenter
    vlm_boxes,  // VLM proposes the boxes, segmenter as usual
    box_fill,   // segmenter replaced by the filled box
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct PipelineConfig {
    double confidence_threshold = 0.5;
    Variant variant = Variant::full;
    int max_boxes = 20;
    bool strict_parse = false;
    bool reask_on_parse_failure = false;
    /// Support masks stay out of every tool call unless this is set.
    bool expose_support_masks = false;
    int overlay_line_width = 2;

    void validate() const;
};

/// Keeps score >= threshold, sorts by descending score (stable), caps at max_boxes
/// and renumbers ids 1..M.
DetectionResult filter_detections(const DetectionResult& raw, double threshold, int max_boxes);

struct Prediction {
    std::vector<int> labels;                 // predicted positions, ascending
    std::vector<BinaryMask> class_masks;     // index n-1
    std::map<int, BinaryMask> box_masks;     // per assigned box, for audit
};

/// M_n is the union of the masks of every box assigned class n.
Prediction aggregate_masks(const Assignment& assignment, const std::map<int, BinaryMask>& box_masks,
                           int n_ways, int width, int height);

struct EpisodeTranscript {
    std::vector<std::string> prompts;
    std::vector<std::string> responses;
    DetectionResult raw_detections;
    DetectionResult detections;  // after filtering; what the VLM saw
    Assignment assignment;
    std::vector<std::string> diagnostics;
};

struct EpisodeResult {
    int fold = 0;
    std::uint64_t episode = 0;
    int n_ways = 0;
    int k_shots = 0;
    std::vector<int> y_true;
    std::vector<int> y_pred;
    std::vector<PixelTally> per_class;  // index n-1
    bool ok = true;
    Prediction prediction;
    std::vector<BinaryMask> truth_masks;
    EpisodeTranscript transcript;
};

/// Runs detect -> filter -> prompt -> chat -> parse -> segment -> aggregate -> score.
/// Protocol and strict-mode parse failures mark the episode failed and score it as an
/// empty prediction; TransportError propagates.
EpisodeResult run_episode(const Episode& episode, BackendSet& backends, const PipelineConfig& config,
                          const PromptTemplate& tmpl = default_template());

/// Results-file line: {"episode","fold","n","k","y_true","y_pred","per_class","status","transcript"}.
std::string result_line(const EpisodeResult& r, const std::string& transcript_path);

struct ResultRecord {
    std::uint64_t episode = 0;
    int fold = 0;
    int n_ways = 0;
    int k_shots = 0;
    std::vector<int> y_true;
    std::vector<int> y_pred;
    std::vector<PixelTally> per_class;
    bool ok = true;
    std::string transcript;
};

ResultRecord parse_result_line(std::string_view line);

/// Full audit record: prompts, responses, boxes, assignment, masks.
nlohmann::ordered_json transcript_json(const Episode& episode, const EpisodeResult& r);

}  // namespace vise
