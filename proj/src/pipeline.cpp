#include "vise/pipeline.hpp"

#include <algorithm>
#include <stdexcept>

#include "vise/errors.hpp"

namespace vise {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::vlm_boxes: return "vlm_boxes";
        case Variant::box_fill: return "box_fill";
    }
    return "full";
}

Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "vlm_boxes") return Variant::vlm_boxes;
    if (s == "box_fill") return Variant::box_fill;
    throw ConfigError("unknown pipeline variant '" + s + "' (full | vlm_boxes | box_fill)");
}

void PipelineConfig::validate() const {
    if (!(confidence_threshold >= 0.0 && confidence_threshold <= 1.0))
        throw ConfigError("pipeline: confidence_threshold must be in [0,1]");
    if (max_boxes < 1) throw ConfigError("pipeline: max_boxes must be >= 1");
    if (overlay_line_width < 1) throw ConfigError("pipeline: overlay_line_width must be >= 1");
}

DetectionResult filter_detections(const DetectionResult& raw, double threshold, int max_boxes) {
    DetectionResult out;
    out.source = raw.source;
    for (const auto& b : raw.boxes)
        if (b.score >= threshold) out.boxes.push_back(b);
    std::stable_sort(out.boxes.begin(), out.boxes.end(),
                     [](const DetectedBox& a, const DetectedBox& b) { return a.score > b.score; });
    if (static_cast<int>(out.boxes.size()) > max_boxes) out.boxes.resize(static_cast<std::size_t>(max_boxes));
    int id = 0;
    for (auto& b : out.boxes) b.display_id = ++id;
    return out;
}

Prediction aggregate_masks(const Assignment& assignment, const std::map<int, BinaryMask>& box_masks,
                           int n_ways, int width, int height) {
    Prediction p;
    p.class_masks.assign(static_cast<std::size_t>(n_ways), BinaryMask(width, height));
    std::vector<bool> seen(static_cast<std::size_t>(n_ways), false);
    for (const auto& [id, verdict] : assignment.verdicts) {
        if (!verdict) continue;
        if (*verdict < 1 || *verdict > n_ways)
            throw BoundsError("aggregate: class " + std::to_string(*verdict) + " outside 1.." + std::to_string(n_ways));
        auto it = box_masks.find(id);
        if (it == box_masks.end()) throw ShapeError("aggregate: no mask for assigned box " + std::to_string(id));
        const BinaryMask& m = it->second;
        if (m.width() != width || m.height() != height)
            throw ShapeError("aggregate: mask of box " + std::to_string(id) + " is " + std::to_string(m.width()) +
                             "x" + std::to_string(m.height()) + ", query is " + std::to_string(width) + "x" +
                             std::to_string(height));
        auto& target = p.class_masks[static_cast<std::size_t>(*verdict - 1)];
        target = mask_union(target, m);
        seen[static_cast<std::size_t>(*verdict - 1)] = true;
        p.box_masks.emplace(id, m);
    }
    for (int n = 1; n <= n_ways; ++n)
        if (seen[static_cast<std::size_t>(n - 1)]) p.labels.push_back(n);
    return p;
}

namespace {

bool parse_failed(const Assignment& a) { return !a.flags.empty(); }

constexpr const char* kReask =
    "\n\nYour previous reply did not end with a valid final line. Reply again and finish with the "
    "ANSWER line exactly as specified.";

void score(EpisodeResult& r, const Episode& ep) {
    r.y_pred = r.prediction.labels;
    r.per_class.clear();
    for (int n = 0; n < ep.n_ways; ++n)
        r.per_class.push_back(pixel_tally(r.prediction.class_masks[static_cast<std::size_t>(n)],
                                          ep.query.class_masks[static_cast<std::size_t>(n)]));
}

}  // namespace

EpisodeResult run_episode(const Episode& ep, BackendSet& backends, const PipelineConfig& config,
                          const PromptTemplate& tmpl) {
    config.validate();
    EpisodeResult r;
    r.fold = ep.fold;
    r.episode = ep.episode_index;
    r.n_ways = ep.n_ways;
    r.k_shots = ep.k_shots;
    r.y_true = ep.query.labels;
    r.truth_masks = ep.query.class_masks;
    const int w = ep.query.width, h = ep.query.height;
    r.prediction.class_masks.assign(static_cast<std::size_t>(ep.n_ways), BinaryMask(w, h));

    Episode shown = ep;
    if (!config.expose_support_masks)
        for (auto& s : shown.support) s.mask.reset();

    QueryContext query(shown);
    auto& tr = r.transcript;
    auto fail = [&](const std::string& why) {
        r.ok = false;
        tr.diagnostics.push_back(why);
        r.prediction = Prediction{};
        r.prediction.class_masks.assign(static_cast<std::size_t>(ep.n_ways), BinaryMask(w, h));
    };

    auto chat = [&](const VqaPrompt& prompt, const DetectionResult& dets) {
        std::optional<Image> rendered;
        if (backends.vlm->needs_pixels()) {
            const Image& base = query.image();
            rendered = prompt.kind == PromptKind::classify
                           ? render_overlay(base, overlay_for(dets), config.overlay_line_width)
                           : base;
        }
        ChatRequest req{prompt, query, dets, rendered ? &*rendered : nullptr};
        tr.prompts.push_back(prompt.text);
        RawAnswer ans = backends.vlm->chat(req);
        tr.responses.push_back(ans.text);
        return ans;
    };

    try {
        // Detection.
        if (config.variant == Variant::vlm_boxes) {
            const VqaPrompt proposal = build_box_proposal_prompt(shown, tmpl);
            const DetectionResult none;
            const RawAnswer ans = chat(proposal, none);
            BoxProposals boxes;
            try {
                boxes = parse_box_proposals(ans, w, h, config.strict_parse);
            } catch (const ParseError& e) {
                fail(std::string("box proposal: ") + e.what());
                score(r, ep);
                return r;
            }
            tr.diagnostics.insert(tr.diagnostics.end(), boxes.flags.begin(), boxes.flags.end());
            tr.raw_detections.source = "vlm";
            int id = 0;
            for (const auto& b : boxes.boxes) tr.raw_detections.boxes.push_back({++id, b, 1.0, ""});
        } else {
            tr.raw_detections = backends.detector->detect(query);
        }
        for (const auto& b : tr.raw_detections.boxes)
            if (!b.box.fits(w, h))
                throw ProtocolError("detector produced box " + to_string(b.box) + " outside the image");
        tr.detections = filter_detections(tr.raw_detections, config.confidence_threshold, config.max_boxes);
        const int m = static_cast<int>(tr.detections.boxes.size());

        // Classification.
        const VqaPrompt prompt = build_prompt(shown, tr.detections, tmpl);
        auto ask = [&](const VqaPrompt& p) {
            return parse_answer(chat(p, tr.detections), m, ep.labels, config.strict_parse);
        };
        Assignment assignment;
        try {
            assignment = ask(prompt);
            if (config.reask_on_parse_failure && parse_failed(assignment)) {
                tr.diagnostics.insert(tr.diagnostics.end(), assignment.flags.begin(), assignment.flags.end());
                VqaPrompt again = prompt;
                again.text += kReask;
                assignment = ask(again);
            }
        } catch (const ParseError& e) {
            if (!config.reask_on_parse_failure) throw;
            tr.diagnostics.push_back(e.what());
            VqaPrompt again = prompt;
            again.text += kReask;
            assignment = ask(again);
        }
        tr.assignment = assignment;
        tr.diagnostics.insert(tr.diagnostics.end(), assignment.flags.begin(), assignment.flags.end());

        // Segmentation of every assigned box.
        std::map<int, BinaryMask> masks;
        BoxFillSegmenter box_fill;
        SegmenterBackend& seg = config.variant == Variant::box_fill ? box_fill : *backends.segmenter;
        for (const auto& [id, verdict] : assignment.verdicts) {
            if (!verdict) continue;
            const auto& box = tr.detections.boxes[static_cast<std::size_t>(id - 1)].box;
            BinaryMask mk = seg.segment(query, box);
            if (mk.width() != w || mk.height() != h)
                throw ProtocolError("segmenter returned a " + std::to_string(mk.width()) + "x" +
                                    std::to_string(mk.height()) + " mask for a " + std::to_string(w) + "x" +
                                    std::to_string(h) + " query");
            masks.emplace(id, std::move(mk));
        }
        r.prediction = aggregate_masks(assignment, masks, ep.n_ways, w, h);
    } catch (const ParseError& e) {
        fail(std::string("parse: ") + e.what());
    } catch (const ProtocolError& e) {
        fail(std::string("protocol: ") + e.what());
    }
    score(r, ep);
    return r;
}

std::string result_line(const EpisodeResult& r, const std::string& transcript_path) {
    ordered_json j;
    j["episode"] = r.episode;
    j["fold"] = r.fold;
    j["n"] = r.n_ways;
    j["k"] = r.k_shots;
    j["y_true"] = r.y_true;
    j["y_pred"] = r.y_pred;
    j["per_class"] = ordered_json::array();
    for (std::size_t n = 0; n < r.per_class.size(); ++n) {
        ordered_json c;
        c["class"] = n + 1;
        c["tp"] = r.per_class[n].tp;
        c["fp"] = r.per_class[n].fp;
        c["fn"] = r.per_class[n].fn;
        j["per_class"].push_back(c);
    }
    j["status"] = r.ok ? "ok" : "failed";
    j["transcript"] = transcript_path;
    return j.dump();
}

ResultRecord parse_result_line(std::string_view line) {
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ParseError("results line is not a JSON object");
    ResultRecord r;
    try {
        r.episode = j.at("episode").get<std::uint64_t>();
        r.fold = j.at("fold").get<int>();
        r.n_ways = j.at("n").get<int>();
        r.k_shots = j.at("k").get<int>();
        r.y_true = j.at("y_true").get<std::vector<int>>();
        r.y_pred = j.at("y_pred").get<std::vector<int>>();
        for (const auto& c : j.at("per_class"))
            r.per_class.push_back({c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(),
                                   c.at("fn").get<std::uint64_t>()});
        const auto status = j.at("status").get<std::string>();
        if (status != "ok" && status != "failed") throw ParseError("results line: bad status '" + status + "'");
        r.ok = status == "ok";
        r.transcript = j.at("transcript").get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("results line: ") + e.what());
    }
    return r;
}

namespace {

ordered_json boxes_json(const DetectionResult& d) {
    ordered_json out = ordered_json::array();
    for (const auto& b : d.boxes) {
        ordered_json o;
        o["id"] = b.display_id;
        o["box"] = {b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max};
        o["score"] = b.score;
        if (!b.hint.empty()) o["label"] = b.hint;
        out.push_back(o);
    }
    return out;
}

ordered_json rle_json(const BinaryMask& m) { return ordered_json::parse(rle_to_text(rle_encode(m))); }

}  // namespace

ordered_json transcript_json(const Episode& ep, const EpisodeResult& r) {
    ordered_json j;
    j["schema"] = 1;
    j["episode"] = r.episode;
    j["fold"] = r.fold;
    j["n"] = r.n_ways;
    j["k"] = r.k_shots;
    j["labels"] = ep.labels;
    j["class_ids"] = ep.class_ids;
    j["query"] = {{"image_id", ep.query.image_id}, {"path", ep.query.image_path.string()},
                  {"width", ep.query.width}, {"height", ep.query.height}};
    ordered_json support = ordered_json::array();
    for (const auto& s : ep.support)
        support.push_back({{"class", s.class_position}, {"image_id", s.image_id}, {"label", s.label}});
    j["support"] = support;
    j["status"] = r.ok ? "ok" : "failed";
    j["prompts"] = r.transcript.prompts;
    j["responses"] = r.transcript.responses;
    j["raw_detections"] = boxes_json(r.transcript.raw_detections);
    j["detections"] = boxes_json(r.transcript.detections);
    ordered_json assignment = ordered_json::object();
    for (const auto& [id, v] : r.transcript.assignment.verdicts)
        assignment[std::to_string(id)] = v ? ordered_json(*v) : ordered_json(nullptr);
    j["assignment"] = assignment;
    j["diagnostics"] = r.transcript.diagnostics;
    ordered_json box_masks = ordered_json::object();
    for (const auto& [id, m] : r.prediction.box_masks) box_masks[std::to_string(id)] = rle_json(m);
    j["box_masks"] = box_masks;
    ordered_json pred = ordered_json::array(), truth = ordered_json::array();
    for (const auto& m : r.prediction.class_masks) pred.push_back(rle_json(m));
    for (const auto& m : r.truth_masks) truth.push_back(rle_json(m));
    j["predicted_masks"] = pred;
    j["truth_masks"] = truth;
    ordered_json ious = ordered_json::array();
    for (const auto& t : r.per_class) {
        const auto denom = t.tp + t.fp + t.fn;
        ious.push_back(denom ? ordered_json(static_cast<double>(t.tp) / static_cast<double>(denom))
                             : ordered_json(nullptr));
    }
    j["per_class_iou"] = ious;
    j["y_true"] = r.y_true;
    j["y_pred"] = r.y_pred;
    return j;
}

}  // namespace vise
