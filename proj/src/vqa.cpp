#include "vise/vqa.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "json.hpp"
#include "vise/errors.hpp"

namespace vise {

using nlohmann::json;

namespace {

constexpr const char* kDefaultTemplate =
    "{{preamble}}\n"
    "\n"
    "Support set:\n"
    "{{exemplars}}\n"
    "{{worked_example}}\n"
    "Query:\n"
    "{{choices}}\n"
    "\n"
    "{{schema}}\n";

const std::set<std::string> kRequired{"preamble", "exemplars", "choices", "schema"};
const std::set<std::string> kKnown{"preamble", "exemplars", "choices", "schema", "worked_example"};

void check_template(const std::string& text) {
    std::set<std::string> seen;
    std::size_t pos = 0;
    while ((pos = text.find("{{", pos)) != std::string::npos) {
        const auto end = text.find("}}", pos + 2);
        if (end == std::string::npos) throw TemplateError("template: unterminated placeholder");
        const auto name = text.substr(pos + 2, end - pos - 2);
        if (!kKnown.count(name)) throw TemplateError("template: unknown placeholder {{" + name + "}}");
        seen.insert(name);
        pos = end + 2;
    }
    for (const auto& r : kRequired)
        if (!seen.count(r)) throw TemplateError("template: missing placeholder {{" + r + "}}");
}

std::string substitute(const std::string& text, const std::map<std::string, std::string>& values) {
    std::string out;
    std::size_t pos = 0;
    while (true) {
        const auto open = text.find("{{", pos);
        if (open == std::string::npos) {
            out.append(text, pos, std::string::npos);
            return out;
        }
        const auto close = text.find("}}", open + 2);
        out.append(text, pos, open - pos);
        out += values.at(text.substr(open + 2, close - open - 2));
        pos = close + 2;
    }
}

std::string json_quote(const std::string& s) { return json(s).dump(); }

std::string locator(const BoundingBox& b, int width, int height) {
    const double cx = (b.x_min + b.x_max) / 2.0 / width;
    const double cy = (b.y_min + b.y_max) / 2.0 / height;
    const char* vert = cy < 1.0 / 3 ? "upper" : (cy < 2.0 / 3 ? "middle" : "lower");
    const char* horiz = cx < 1.0 / 3 ? "left" : (cx < 2.0 / 3 ? "center" : "right");
    std::string where = std::string(vert) + " " + horiz;
    if (where == "middle center") where = "center";
    return "x=[" + std::to_string(b.x_min) + "," + std::to_string(b.x_max) + ") y=[" +
           std::to_string(b.y_min) + "," + std::to_string(b.y_max) + "), " + where;
}

std::vector<Exemplar> exemplars_of(const Episode& ep) {
    std::vector<Exemplar> out;
    for (const auto& s : ep.support) out.push_back({s.class_position, s.image_id, s.image_path, s.label});
    return out;
}

std::string exemplar_block(const std::vector<Exemplar>& exemplars) {
    std::string out;
    for (std::size_t i = 0; i < exemplars.size(); ++i) {
        out += "Exemplar " + std::to_string(i + 1) + " (image " + std::to_string(i + 1) +
               "): " + exemplars[i].label;
        if (i + 1 < exemplars.size()) out += '\n';
    }
    return out;
}

std::string options_list(const std::vector<std::string>& labels) {
    std::string out;
    for (const auto& l : labels) out += json_quote(l) + ", ";
    return out + "or \"none\"";
}

VqaPrompt finish(VqaPrompt p, const Episode& ep, const PromptTemplate& tmpl, const std::string& choices) {
    check_template(tmpl.text);
    p.labels = ep.labels;
    p.query_image = ep.query.image_path;
    std::map<std::string, std::string> values{
        {"preamble", p.preamble},
        {"exemplars", exemplar_block(p.exemplars)},
        {"choices", choices},
        {"schema", p.schema},
        {"worked_example", tmpl.worked_example},
    };
    p.text = substitute(tmpl.text, values);
    return p;
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

/// First balanced {...} in `s`, respecting JSON string literals. Empty if none.
std::string_view extract_object(std::string_view s) {
    const auto start = s.find('{');
    if (start == std::string_view::npos) return {};
    int depth = 0;
    bool in_str = false, esc = false;
    for (std::size_t i = start; i < s.size(); ++i) {
        const char c = s[i];
        if (in_str) {
            if (esc) esc = false;
            else if (c == '\\') esc = true;
            else if (c == '"') in_str = false;
            continue;
        }
        if (c == '"') in_str = true;
        else if (c == '{') ++depth;
        else if (c == '}' && --depth == 0) return s.substr(start, i - start + 1);
    }
    return {};
}

// 3x5 digit glyphs, one row per 3-bit mask, most significant bit leftmost.
constexpr std::uint8_t kDigits[10][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
};

constexpr Rgb kPalette[kPaletteSize] = {
    {255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {255, 255, 0},
    {255, 0, 255}, {0, 255, 255}, {255, 128, 0}, {255, 255, 255},
};

}  // namespace

PromptTemplate default_template() { return {kDefaultTemplate, ""}; }

PromptTemplate load_template(const std::filesystem::path& path) {
    PromptTemplate t{read_text_file(path), ""};
    check_template(t.text);
    return t;
}

VqaPrompt build_prompt(const Episode& ep, const DetectionResult& det, const PromptTemplate& tmpl) {
    VqaPrompt p;
    p.kind = PromptKind::classify;
    p.exemplars = exemplars_of(ep);
    p.preamble =
        "You are shown " + std::to_string(p.exemplars.size()) +
        " labelled example images (the support set) and then one query image. "
        "Numbered boxes are drawn on the query image; each number is printed inside the top-left "
        "corner of its box. For each class in the support set, identify the boxes that enclose an "
        "object of that class.";
    std::string choices;
    const int m = static_cast<int>(det.boxes.size());
    const int q_img = static_cast<int>(p.exemplars.size()) + 1;
    if (m == 0) {
        choices = "Query image (image " + std::to_string(q_img) + "): no boxes were proposed.";
        p.schema =
            "No boxes were proposed for this query image, so no box can be selected. "
            "Reply with the final line:\nANSWER: {}";
    } else {
        choices = "Query image (image " + std::to_string(q_img) + ") with " + std::to_string(m) + " numbered boxes:";
        for (const auto& b : det.boxes) {
            ChoiceLine line{b.display_id, "Box " + std::to_string(b.display_id) + ": " +
                                              locator(b.box, ep.query.width, ep.query.height)};
            choices += "\n" + line.text;
            p.choices.push_back(std::move(line));
        }
        p.schema =
            "Question: which of these boxes contain objects of the same class as the exemplars? "
            "Options for every box: " + options_list(ep.labels) + ".\n"
            "Reason step by step: first describe the object inside each box (shape, color, texture), "
            "compare it with the exemplars, then emit the final line.\n"
            "The final line must be exactly one line of the form:\n"
            "ANSWER: {\"<box id>\": \"<class label or none>\", ...}";
    }
    return finish(std::move(p), ep, tmpl, choices);
}

VqaPrompt build_box_proposal_prompt(const Episode& ep, const PromptTemplate& tmpl) {
    VqaPrompt p;
    p.kind = PromptKind::propose_boxes;
    p.exemplars = exemplars_of(ep);
    p.preamble = "You are shown " + std::to_string(p.exemplars.size()) +
                 " labelled example images (the support set) and then one query image of " +
                 std::to_string(ep.query.width) + "x" + std::to_string(ep.query.height) +
                 " pixels. Locate every object in the query image.";
    const std::string choices = "Query image (image " + std::to_string(p.exemplars.size() + 1) +
                                "): no boxes are drawn; propose them yourself.";
    p.schema =
        "Describe the objects you see, then emit the final line with one pixel box per object:\n"
        "ANSWER: {\"boxes\": [[x_min, y_min, x_max, y_max], ...]}";
    return finish(std::move(p), ep, tmpl, choices);
}

std::string prompt_hash(const VqaPrompt& prompt) { return sha256_hex(prompt.text); }

Rgb palette_color(int color_index) {
    return kPalette[((color_index % kPaletteSize) + kPaletteSize) % kPaletteSize];
}

OverlaySpec overlay_for(const DetectionResult& det) {
    OverlaySpec spec;
    for (const auto& b : det.boxes)
        spec.items.push_back({b.display_id, b.box, (b.display_id - 1) % kPaletteSize,
                              std::to_string(b.display_id)});
    return spec;
}

Image render_overlay(const Image& image, const OverlaySpec& spec, int line_width) {
    if (image.empty()) throw BoundsError("render_overlay: zero-size image");
    if (line_width < 1) throw BoundsError("render_overlay: line width must be >= 1");
    for (const auto& it : spec.items)
        if (!it.box.fits(image.width, image.height))
            throw BoundsError("render_overlay: box " + to_string(it.box) + " outside the image");
    std::vector<const OverlayItem*> order;
    for (const auto& it : spec.items) order.push_back(&it);
    std::stable_sort(order.begin(), order.end(),
                     [](const OverlayItem* a, const OverlayItem* b) { return a->display_id < b->display_id; });

    Image out = image;
    for (const OverlayItem* it : order) {
        const Rgb color = palette_color(it->color_index);
        const BoundingBox& b = it->box;
        // Closed extent, clipped to the image.
        const int x_hi = std::min(b.x_max, image.width - 1);
        const int y_hi = std::min(b.y_max, image.height - 1);
        for (int y = b.y_min; y <= y_hi; ++y) {
            for (int x = b.x_min; x <= x_hi; ++x) {
                const bool edge = x < b.x_min + line_width || x > b.x_max - line_width ||
                                  y < b.y_min + line_width || y > b.y_max - line_width;
                if (edge) out.put(x, y, color);
            }
        }
        int gx = b.x_min + line_width + 1;
        const int gy = b.y_min + line_width + 1;
        for (char ch : it->label) {
            if (ch >= '0' && ch <= '9') {
                const auto& glyph = kDigits[ch - '0'];
                for (int r = 0; r < 5; ++r)
                    for (int c = 0; c < 3; ++c)
                        if ((glyph[r] >> (2 - c)) & 1) {
                            const int x = gx + c, y = gy + r;
                            if (x <= x_hi && y <= y_hi) out.put(x, y, color);
                        }
            }
            gx += 4;
        }
    }
    return out;
}

RawAnswer make_raw_answer(std::string text) {
    RawAnswer raw;
    raw.text = std::move(text);
    const auto pos = raw.text.rfind("ANSWER:");
    if (pos != std::string::npos) raw.final_segment = raw.text.substr(pos + 7);
    return raw;
}

Assignment parse_answer(const RawAnswer& raw, int m_boxes, const std::vector<std::string>& labels,
                        bool strict) {
    Assignment a;
    for (int id = 1; id <= m_boxes; ++id) a.verdicts[id] = std::nullopt;

    auto fail = [&](const std::string& what) {
        if (strict) throw ParseError(what);
        a.flags.push_back(what);
    };

    const auto pos = raw.text.rfind("ANSWER:");
    if (pos == std::string::npos) {
        fail("no ANSWER line in response");
        return a;
    }
    const auto obj = extract_object(std::string_view(raw.text).substr(pos + 7));
    const json doc = obj.empty() ? json() : json::parse(obj, nullptr, false);
    if (obj.empty() || doc.is_discarded() || !doc.is_object()) {
        fail("malformed ANSWER map");
        return a;
    }

    std::vector<std::string> folded;
    for (const auto& l : labels) folded.push_back(lower(trim(l)));

    for (const auto& [key, value] : doc.items()) {
        const std::string k = trim(key);
        int id = 0;
        bool numeric = !k.empty() && k.size() <= 9 &&
                       std::all_of(k.begin(), k.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
        if (numeric) id = std::stoi(k);
        if (!numeric || id < 1 || id > m_boxes) {
            fail("box id '" + key + "' not in 1.." + std::to_string(m_boxes));
            continue;
        }
        if (!value.is_string()) {
            fail("box " + k + ": label is not a string");
            continue;
        }
        const std::string label = lower(trim(value.get<std::string>()));
        if (label == "none") continue;
        const auto it = std::find(folded.begin(), folded.end(), label);
        if (it == folded.end()) {
            fail("box " + k + ": unknown label '" + value.get<std::string>() + "'");
            continue;
        }
        a.verdicts[id] = static_cast<int>(it - folded.begin()) + 1;
    }
    return a;
}

std::string serialize_answer(const Assignment& assignment, int m_boxes,
                             const std::vector<std::string>& labels) {
    std::string out = "ANSWER: {";
    for (int id = 1; id <= m_boxes; ++id) {
        if (id > 1) out += ", ";
        std::string label = "none";
        if (auto it = assignment.verdicts.find(id); it != assignment.verdicts.end() && it->second)
            label = labels.at(static_cast<std::size_t>(*it->second - 1));
        out += "\"" + std::to_string(id) + "\": " + json_quote(label);
    }
    return out + "}";
}

BoxProposals parse_box_proposals(const RawAnswer& raw, int width, int height, bool strict) {
    BoxProposals out;
    auto fail = [&](const std::string& what) {
        if (strict) throw ParseError(what);
        out.flags.push_back(what);
    };
    const auto pos = raw.text.rfind("ANSWER:");
    if (pos == std::string::npos) {
        fail("no ANSWER line in box proposal");
        return out;
    }
    const auto obj = extract_object(std::string_view(raw.text).substr(pos + 7));
    const json doc = obj.empty() ? json() : json::parse(obj, nullptr, false);
    if (obj.empty() || doc.is_discarded() || !doc.is_object() || !doc.contains("boxes") ||
        !doc["boxes"].is_array()) {
        fail("malformed box proposal map");
        return out;
    }
    for (const auto& b : doc["boxes"]) {
        if (!b.is_array() || b.size() != 4 ||
            !std::all_of(b.begin(), b.end(), [](const json& v) { return v.is_number(); })) {
            fail("box proposal entry is not [x_min,y_min,x_max,y_max]");
            continue;
        }
        double c[4];
        for (int i = 0; i < 4; ++i) c[i] = b[i].get<double>();
        if (!std::all_of(std::begin(c), std::end(c), [](double v) { return std::isfinite(v); })) {
            fail("box proposal has non-finite coordinates");
            continue;
        }
        auto clampd = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
        BoundingBox box = box_from_real(clampd(c[0], width), clampd(c[1], height),
                                        clampd(c[2], width), clampd(c[3], height));
        if (!box.fits(width, height)) {
            out.flags.push_back("dropped degenerate proposed box " + to_string(box));
            continue;
        }
        out.boxes.push_back(box);
    }
    return out;
}

}  // namespace vise
