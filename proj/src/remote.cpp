#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "vise/backends.hpp"
#include "vise/errors.hpp"

namespace vise {

using nlohmann::json;

namespace {

class HttplibTransport final : public HttpTransport {
public:
    HttplibTransport(std::string base_url, double timeout_s)
        : base_url_(std::move(base_url)), timeout_s_(timeout_s) {}

    std::optional<HttpReply> post(const std::string& path, const std::string& body,
                                  const std::string& bearer_token) override {
        httplib::Client client(base_url_);
        const auto secs = static_cast<time_t>(timeout_s_);
        const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);
        httplib::Headers headers;
        if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + bearer_token);
        auto res = client.Post(path, headers, body, "application/json");
        if (!res) return std::nullopt;
        return HttpReply{res->status, res->body};
    }

    std::string describe() const override { return base_url_; }

private:
    std::string base_url_;
    double timeout_s_;
};

std::string image_field(std::span<const std::uint8_t> png) { return base64_encode(png); }

std::string hashed_image(std::span<const std::uint8_t> png) { return "sha256:" + sha256_hex(png); }

}  // namespace

std::shared_ptr<HttpTransport> make_http_transport(const std::string& base_url, double timeout_s) {
    return std::make_shared<HttplibTransport>(base_url, timeout_s);
}

RemoteClient::RemoteClient(std::shared_ptr<HttpTransport> transport, RetryPolicy retry,
                           int max_in_flight, std::string token_env,
                           std::shared_ptr<ResponseCache> cache)
    : transport_(std::move(transport)),
      retry_(retry),
      token_env_(std::move(token_env)),
      cache_(std::move(cache)),
      endpoint_(transport_->describe()),
      max_in_flight_(std::max(1, max_in_flight)) {}

std::string RemoteClient::post(const std::string& path, const std::string& body,
                               const std::string& cache_key_body) {
    if (!cache_) return call(path, body);
    const auto key = ResponseCache::key_for(endpoint_ + path, cache_key_body.empty() ? body : cache_key_body);
    return cache_->fetch_through(key, [&] { return call(path, body); });
}

std::string RemoteClient::call(const std::string& path, const std::string& body) {
    {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return in_flight_ < max_in_flight_; });
        ++in_flight_;
    }
    struct Release {
        RemoteClient* self;
        ~Release() {
            {
                std::lock_guard lock(self->mu_);
                --self->in_flight_;
            }
            self->cv_.notify_one();
        }
    } release{this};

    std::string token;
    if (!token_env_.empty())
        if (const char* v = std::getenv(token_env_.c_str())) token = v;

    std::string last_error;
    int backoff = retry_.initial_backoff_ms;
    for (int attempt = 1; attempt <= std::max(1, retry_.attempts); ++attempt) {
        ++sent_;
        auto reply = transport_->post(path, body, token);
        if (reply && reply->status >= 200 && reply->status < 300) return reply->body;
        if (reply && reply->status < 500)
            throw ProtocolError(endpoint_ + path + " answered HTTP " + std::to_string(reply->status) +
                                ": " + reply->body.substr(0, 200));
        last_error = reply ? "HTTP " + std::to_string(reply->status) : "connection failed";
        if (attempt < retry_.attempts) {
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff *= 2;
        }
    }
    throw TransportError(endpoint_, "backend " + endpoint_ + path + " unreachable after " +
                                        std::to_string(retry_.attempts) + " attempts (" + last_error + ")");
}

namespace {

BoundingBox decode_box(const json& b, int width, int height, const char* what) {
    if (!b.is_array() || b.size() != 4) throw ProtocolError(std::string(what) + ": box must be [x_min,y_min,x_max,y_max]");
    double c[4];
    for (int i = 0; i < 4; ++i) {
        if (!b[i].is_number()) throw ProtocolError(std::string(what) + ": box coordinates must be numbers");
        c[i] = b[i].get<double>();
        if (!std::isfinite(c[i]) || std::abs(c[i]) > 1e9)
            throw ProtocolError(std::string(what) + ": box coordinate out of range");
    }
    const BoundingBox box = box_from_real(c[0], c[1], c[2], c[3]);
    if (!box.fits(width, height))
        throw ProtocolError(std::string(what) + ": box " + to_string(box) + " outside the " +
                            std::to_string(width) + "x" + std::to_string(height) + " image");
    return box;
}

json parse_object(std::string_view body, const char* what) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ProtocolError(std::string(what) + ": reply is not a JSON object");
    return j;
}

}  // namespace

DetectionResult decode_detect_reply(std::string_view body, int width, int height) {
    const json j = parse_object(body, "detect");
    if (!j.contains("boxes") || !j["boxes"].is_array()) throw ProtocolError("detect: missing 'boxes' array");
    DetectionResult out;
    out.source = "remote";
    int id = 0;
    for (const auto& item : j["boxes"]) {
        if (!item.is_object() || !item.contains("box")) throw ProtocolError("detect: entry without 'box'");
        DetectedBox d;
        d.display_id = ++id;
        d.box = decode_box(item["box"], width, height, "detect");
        if (!item.contains("score") || !item["score"].is_number()) throw ProtocolError("detect: entry without numeric 'score'");
        d.score = item["score"].get<double>();
        if (!(d.score >= 0.0 && d.score <= 1.0)) throw ProtocolError("detect: score outside [0,1]");
        if (item.contains("label")) {
            if (!item["label"].is_string()) throw ProtocolError("detect: label must be a string");
            d.hint = item["label"].get<std::string>();
        }
        out.boxes.push_back(std::move(d));
    }
    return out;
}

BinaryMask decode_segment_reply(std::string_view body, int width, int height) {
    const json j = parse_object(body, "segment");
    if (!j.contains("mask")) throw ProtocolError("segment: missing 'mask'");
    RleMask rle;
    try {
        rle = rle_from_text(j["mask"].dump());
    } catch (const CodecError& e) {
        throw ProtocolError(std::string("segment: ") + e.what());
    }
    if (rle.width != width || rle.height != height)
        throw ProtocolError("segment: mask size " + std::to_string(rle.height) + "x" + std::to_string(rle.width) +
                            " does not match the " + std::to_string(height) + "x" + std::to_string(width) + " image");
    try {
        return rle_decode(rle);
    } catch (const CodecError& e) {
        throw ProtocolError(std::string("segment: ") + e.what());
    }
}

std::string decode_chat_reply(std::string_view body) {
    const json j = parse_object(body, "chat");
    if (!j.contains("text") || !j["text"].is_string()) throw ProtocolError("chat: missing string 'text'");
    return j["text"].get<std::string>();
}

DetectionResult RemoteDetector::detect(QueryContext& query) {
    const auto& png = query.png_bytes();
    json body{{"image", image_field(png)}};
    json key{{"image", hashed_image(png)}};
    return decode_detect_reply(client_->post("/v1/detect", body.dump(), key.dump()), query.width(), query.height());
}

BinaryMask RemoteSegmenter::segment(QueryContext& query, const BoundingBox& box) {
    const auto& png = query.png_bytes();
    const json b = {box.x_min, box.y_min, box.x_max, box.y_max};
    json body{{"image", image_field(png)}, {"box", b}};
    json key{{"image", hashed_image(png)}, {"box", b}};
    return decode_segment_reply(client_->post("/v1/segment", body.dump(), key.dump()), query.width(), query.height());
}

RawAnswer RemoteVlm::chat(const ChatRequest& req) {
    json parts = json::array();
    json key_parts = json::array();
    parts.push_back({{"text", req.prompt.text}});
    key_parts.push_back({{"text", req.prompt.text}});
    for (const auto& ex : req.prompt.exemplars) {
        const auto png = read_file_bytes(ex.image);
        parts.push_back({{"image", image_field(png)}});
        key_parts.push_back({{"image", hashed_image(png)}});
    }
    std::vector<std::uint8_t> shown;
    if (req.shown_query)
        shown = encode_png(*req.shown_query);
    else
        shown = req.query.png_bytes();
    parts.push_back({{"image", image_field(shown)}});
    key_parts.push_back({{"image", hashed_image(shown)}});

    json params = params_.is_object() ? params_ : json::object();
    if (!params.contains("temperature")) params["temperature"] = 0;
    json body{{"messages", json::array({{{"role", "user"}, {"parts", parts}}})}, {"params", params}};
    json key{{"messages", json::array({{{"role", "user"}, {"parts", key_parts}}})}, {"params", params}};
    return make_raw_answer(decode_chat_reply(client_->post("/v1/chat", body.dump(), key.dump())));
}

const Image& QueryContext::image() {
    if (!image_) image_ = decode_png(png_bytes());
    return *image_;
}

const std::vector<std::uint8_t>& QueryContext::png_bytes() {
    if (!png_) png_ = read_file_bytes(episode_.query.image_path);
    return *png_;
}

}  // namespace vise
