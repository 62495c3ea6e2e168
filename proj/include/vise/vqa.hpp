#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vise/dataset.hpp"
#include "vise/detections.hpp"
#include "vise/image.hpp"

namespace vise {

/// Plain text with `{{preamble}} {{exemplars}} {{choices}} {{schema}}` placeholders and
/// an optional `{{worked_example}}`.
struct PromptTemplate {
    std::string text;
    /// Substituted for {{worked_example}}; empty disables the block.
    std::string worked_example;
};

PromptTemplate default_template();
PromptTemplate load_template(const std::filesystem::path& path);

enum class PromptKind { classify, propose_boxes };

struct Exemplar {
    int class_position = 0;
    std::string image_id;
    std::filesystem::path image;
    std::string label;
};

struct ChoiceLine {
    int display_id = 0;
    std::string text;  // "Box <id>: <locator>"
};

struct VqaPrompt {
    PromptKind kind = PromptKind::classify;
    std::string preamble;
    std::vector<Exemplar> exemplars;
    std::vector<ChoiceLine> choices;
    std::string schema;
    std::vector<std::string> labels;  // episode labels, position order
    std::filesystem::path query_image;
    std::string text;  // fully rendered
};

VqaPrompt build_prompt(const Episode& episode, const DetectionResult& detections,
                       const PromptTemplate& tmpl);
/// Prompt for the ablation where the VLM proposes the boxes itself.
VqaPrompt build_box_proposal_prompt(const Episode& episode, const PromptTemplate& tmpl);

/// Hash of the rendered text; keys scripted responses and the response cache.
std::string prompt_hash(const VqaPrompt& prompt);

struct OverlayItem {
    int display_id = 0;
    BoundingBox box;
    int color_index = 0;
    std::string label;  // stamped inside the top-left corner; empty for none
};

struct OverlaySpec {
    std::vector<OverlayItem> items;
};

inline constexpr int kPaletteSize = 8;
Rgb palette_color(int color_index);
OverlaySpec overlay_for(const DetectionResult& detections);

/// Draws each box outline over the closed rectangle [x_min, x_max] x [y_min, y_max],
/// `line_width` pixels thick, in ascending id order; later ids paint over earlier ones.
Image render_overlay(const Image& image, const OverlaySpec& spec, int line_width = 2);

struct RawAnswer {
    std::string text;
    std::string final_segment;  // text after the last "ANSWER:" marker, empty if none
};

RawAnswer make_raw_answer(std::string text);

/// Throws ParseError in strict mode. In lenient mode never throws: offending entries
/// become none and a flag is recorded.
Assignment parse_answer(const RawAnswer& raw, int m_boxes, const std::vector<std::string>& labels,
                        bool strict);

/// `ANSWER: {"1": "bus", "2": "none"}` with every id 1..M in order.
std::string serialize_answer(const Assignment& assignment, int m_boxes,
                             const std::vector<std::string>& labels);

struct BoxProposals {
    std::vector<BoundingBox> boxes;
    std::vector<std::string> flags;
};

/// Parses `ANSWER: {"boxes": [[x_min,y_min,x_max,y_max], ...]}`. Coordinates round
/// outward and clamp to the image; degenerate boxes are dropped with a flag.
BoxProposals parse_box_proposals(const RawAnswer& raw, int width, int height, bool strict);

}  // namespace vise
