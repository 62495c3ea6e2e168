#include "vise/stub_server.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <regex>
#include <set>

#include "httplib.h"
#include "json.hpp"
#include "vise/errors.hpp"
#include "vise/vqa.hpp"

namespace vise {

using nlohmann::json;

namespace {

std::uint32_t pack(Rgb c) { return (std::uint32_t{c[0]} << 16) | (std::uint32_t{c[1]} << 8) | c[2]; }

std::pair<int, std::string> error_reply(int status, const std::string& what) {
    return {status, json{{"error", what}}.dump()};
}

Image image_from_field(const json& j) {
    if (!j.is_string()) throw ParseError("image must be a base64 PNG string");
    try {
        return decode_png(base64_decode(j.get<std::string>()));
    } catch (const CodecError& e) {
        throw ParseError(std::string("image: ") + e.what());
    }
}

std::uint32_t background_of(const Image& img) {
    std::map<std::uint32_t, std::size_t> freq;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) ++freq[pack(img.at(x, y))];
    return std::max_element(freq.begin(), freq.end(),
                            [](const auto& a, const auto& b) { return a.second < b.second; })->first;
}

bool is_palette(std::uint32_t c) {
    for (int i = 0; i < kPaletteSize; ++i)
        if (pack(palette_color(i)) == c) return true;
    return false;
}

struct Component {
    std::uint32_t color;
    BoundingBox box;
};

// 8-connected components of equal, non-background color.
std::vector<Component> components(const Image& img, std::uint32_t bg) {
    std::vector<Component> out;
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(img.width) * img.height, 0);
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const auto idx = static_cast<std::size_t>(y) * img.width + x;
            const auto color = pack(img.at(x, y));
            if (seen[idx] || color == bg) continue;
            BoundingBox box{x, y, x + 1, y + 1};
            seen[idx] = 1;
            stack.assign(1, {x, y});
            while (!stack.empty()) {
                auto [cx, cy] = stack.back();
                stack.pop_back();
                box.x_min = std::min(box.x_min, cx);
                box.y_min = std::min(box.y_min, cy);
                box.x_max = std::max(box.x_max, cx + 1);
                box.y_max = std::max(box.y_max, cy + 1);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = cx + dx, ny = cy + dy;
                        if (nx < 0 || ny < 0 || nx >= img.width || ny >= img.height) continue;
                        const auto n = static_cast<std::size_t>(ny) * img.width + nx;
                        if (seen[n] || pack(img.at(nx, ny)) != color) continue;
                        seen[n] = 1;
                        stack.emplace_back(nx, ny);
                    }
            }
            out.push_back({color, box});
        }
    }
    return out;
}

std::optional<std::uint32_t> dominant_color(const Image& img, const BoundingBox& box, std::uint32_t bg,
                                            bool skip_palette) {
    std::map<std::uint32_t, std::size_t> freq;
    for (int y = box.y_min; y < box.y_max; ++y)
        for (int x = box.x_min; x < box.x_max; ++x) {
            const auto c = pack(img.at(x, y));
            if (c == bg || (skip_palette && is_palette(c))) continue;
            ++freq[c];
        }
    if (freq.empty()) return std::nullopt;
    return std::max_element(freq.begin(), freq.end(),
                            [](const auto& a, const auto& b) { return a.second < b.second; })->first;
}

}  // namespace

StubServer::StubServer(std::map<std::string, Rgb> class_colors, StubFaults faults)
    : colors_(std::move(class_colors)),
      faults_(faults),
      mu_(std::make_unique<std::mutex>()),
      failures_left_(faults.fail_first) {}

StubServer StubServer::for_dataset(const DatasetIndex& index, StubFaults faults) {
    std::map<std::string, Rgb> colors;
    for (const auto& c : index.classes)
        if (c.color) colors[c.label] = *c.color;
    return StubServer(std::move(colors), faults);
}

StubServer::StubServer(StubServer&& other) noexcept
    : colors_(std::move(other.colors_)),
      faults_(other.faults_),
      server_(std::move(other.server_)),
      thread_(std::move(other.thread_)),
      host_(std::move(other.host_)),
      port_(other.port_),
      mu_(std::move(other.mu_)),
      failures_left_(other.failures_left_) {}

StubServer::~StubServer() { stop(); }

bool StubServer::take_failure() {
    std::lock_guard lock(*mu_);
    if (failures_left_ <= 0) return false;
    --failures_left_;
    return true;
}

std::pair<int, std::string> StubServer::handle_detect(const std::string& body) {
    if (take_failure()) return error_reply(503, "injected failure");
    try {
        const json j = json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.is_object()) return error_reply(400, "body is not a JSON object");
        if (!j.contains("image")) return error_reply(400, "missing 'image'");
        const Image img = image_from_field(j["image"]);
        if (faults_.malformed_json) return {200, "{\"boxes\": [oops"};
        const auto bg = background_of(img);
        std::map<std::uint32_t, std::string> labels;
        for (const auto& [label, color] : colors_) labels[pack(color)] = label;
        json boxes = json::array();
        for (const auto& comp : components(img, bg)) {
            BoundingBox b = comp.box;
            if (faults_.out_of_bounds_boxes) b.x_max = img.width + 5;
            json entry{{"box", {b.x_min, b.y_min, b.x_max, b.y_max}}, {"score", 1.0}};
            if (auto it = labels.find(comp.color); it != labels.end()) entry["label"] = it->second;
            boxes.push_back(entry);
        }
        return {200, json{{"boxes", boxes}}.dump()};
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
}

std::pair<int, std::string> StubServer::handle_segment(const std::string& body) {
    if (take_failure()) return error_reply(503, "injected failure");
    try {
        const json j = json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.is_object()) return error_reply(400, "body is not a JSON object");
        if (!j.contains("image") || !j.contains("box")) return error_reply(400, "missing 'image' or 'box'");
        const Image img = image_from_field(j["image"]);
        const auto& b = j["box"];
        if (!b.is_array() || b.size() != 4 ||
            !std::all_of(b.begin(), b.end(), [](const json& v) { return v.is_number(); }))
            return error_reply(400, "box must be [x_min,y_min,x_max,y_max]");
        const BoundingBox box = box_from_real(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                              b[3].get<double>());
        if (!box.fits(img.width, img.height)) return error_reply(400, "box outside the image");
        if (faults_.malformed_json) return {200, "{\"mask\": "};
        const int h = faults_.wrong_mask_size ? img.height + 1 : img.height;
        BinaryMask mask(img.width, h);
        if (auto color = dominant_color(img, box, background_of(img), false)) {
            for (int y = box.y_min; y < box.y_max; ++y)
                for (int x = box.x_min; x < box.x_max; ++x)
                    if (pack(img.at(x, y)) == *color) mask.set(x, y);
        }
        return {200, "{\"mask\": " + rle_to_text(rle_encode(mask)) + "}"};
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
}

std::pair<int, std::string> StubServer::handle_chat(const std::string& body) {
    if (take_failure()) return error_reply(503, "injected failure");
    try {
        const json j = json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.is_object()) return error_reply(400, "body is not a JSON object");
        if (!j.contains("messages") || !j["messages"].is_array() || j["messages"].empty())
            return error_reply(400, "missing non-empty 'messages' array");
        std::string text;
        std::vector<const json*> images;
        for (const auto& msg : j["messages"]) {
            if (!msg.is_object() || !msg.contains("role") || !msg["role"].is_string() || !msg.contains("parts") ||
                !msg["parts"].is_array())
                return error_reply(400, "each message needs a string 'role' and a 'parts' array");
            for (const auto& part : msg["parts"]) {
                if (!part.is_object() || part.size() != 1) return error_reply(400, "each part holds exactly one of text/image");
                if (part.contains("text") && part["text"].is_string())
                    text += part["text"].get<std::string>() + "\n";
                else if (part.contains("image") && part["image"].is_string())
                    images.push_back(&part["image"]);
                else
                    return error_reply(400, "part must be {\"text\": string} or {\"image\": string}");
            }
        }
        if (images.empty()) return error_reply(400, "chat needs at least one image");
        const Image query = image_from_field(*images.back());
        if (faults_.malformed_json) return {200, "{\"text\": 12"};
        const auto bg = background_of(query);

        if (text.find("{\"boxes\":") != std::string::npos) {
            json boxes = json::array();
            for (const auto& comp : components(query, bg)) {
                if (is_palette(comp.color)) continue;
                boxes.push_back({comp.box.x_min, comp.box.y_min, comp.box.x_max, comp.box.y_max});
            }
            return {200, json{{"text", "Objects located.\nANSWER: " + json{{"boxes", boxes}}.dump()}}.dump()};
        }

        static const std::regex box_re(R"(Box (\d+): x=\[(\d+),(\d+)\) y=\[(\d+),(\d+)\))");
        static const std::regex ex_re(R"(Exemplar \d+ \(image \d+\): ([^\n]*))");
        std::vector<std::string> labels;
        for (std::sregex_iterator it(text.begin(), text.end(), ex_re), end; it != end; ++it) {
            const std::string l = (*it)[1].str();
            if (std::find(labels.begin(), labels.end(), l) == labels.end()) labels.push_back(l);
        }
        std::map<std::uint32_t, std::string> by_color;
        for (const auto& [label, color] : colors_) by_color[pack(color)] = label;

        std::string reasoning;
        json answer = json::object();
        for (std::sregex_iterator it(text.begin(), text.end(), box_re), end; it != end; ++it) {
            const auto id = (*it)[1].str();
            const BoundingBox box{std::stoi((*it)[2].str()), std::stoi((*it)[4].str()),
                                  std::stoi((*it)[3].str()), std::stoi((*it)[5].str())};
            std::string verdict = "none";
            if (box.fits(query.width, query.height)) {
                if (auto color = dominant_color(query, box, bg, true)) {
                    auto found = by_color.find(*color);
                    if (found != by_color.end() &&
                        std::find(labels.begin(), labels.end(), found->second) != labels.end())
                        verdict = found->second;
                }
            }
            reasoning += "Box " + id + " looks like " + verdict + ".\n";
            answer[id] = verdict;
        }
        return {200, json{{"text", reasoning + "ANSWER: " + answer.dump()}}.dump()};
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
}

void StubServer::install_routes() {
    server_ = std::make_unique<httplib::Server>();
    auto bind = [this](const char* path, std::pair<int, std::string> (StubServer::*fn)(const std::string&)) {
        server_->Post(path, [this, fn](const httplib::Request& req, httplib::Response& res) {
            auto [status, body] = (this->*fn)(req.body);
            res.status = status;
            res.set_content(body, "application/json");
        });
    };
    bind("/v1/detect", &StubServer::handle_detect);
    bind("/v1/segment", &StubServer::handle_segment);
    bind("/v1/chat", &StubServer::handle_chat);
}

int StubServer::start(const std::string& host, int port) {
    install_routes();
    host_ = host;
    port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw IoError("stub server: cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port_;
}

void StubServer::listen(const std::string& host, int port) {
    install_routes();
    host_ = host;
    port_ = port;
    if (!server_->listen(host, port)) throw IoError("stub server: cannot listen on " + host + ":" + std::to_string(port));
}

void StubServer::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

std::string StubServer::base_url() const { return "http://" + host_ + ":" + std::to_string(port_); }

}  // namespace vise
