#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vise/dataset.hpp"
#include "vise/detections.hpp"
#include "vise/image.hpp"
#include "vise/vqa.hpp"

namespace vise {

/// What a tool may see about the current query. Simulated tools read the ground
/// truth; remote tools only ever get pixels. Not shared between threads.
class QueryContext {
public:
    explicit QueryContext(const Episode& episode) : episode_(episode) {}

    const Episode& episode() const { return episode_; }
    int width() const { return episode_.query.width; }
    int height() const { return episode_.query.height; }

    /// Decoded query image, loaded on first use.
    const Image& image();
    /// Encoded PNG of the query image as stored on disk.
    const std::vector<std::uint8_t>& png_bytes();

private:
    const Episode& episode_;
    std::optional<Image> image_;
    std::optional<std::vector<std::uint8_t>> png_;
};

struct ChatRequest {
    const VqaPrompt& prompt;
    QueryContext& query;
    /// Boxes referenced by the prompt's choice lines (empty for box proposals).
    const DetectionResult& detections;
    /// Query image as shown to the model (overlay for classification). Null when the
    /// backend does not need pixels.
    const Image* shown_query = nullptr;
};

class DetectorBackend {
public:
    virtual ~DetectorBackend() = default;
    virtual DetectionResult detect(QueryContext& query) = 0;
    virtual std::string name() const = 0;
};

class SegmenterBackend {
public:
    virtual ~SegmenterBackend() = default;
    virtual BinaryMask segment(QueryContext& query, const BoundingBox& box) = 0;
    virtual std::string name() const = 0;
};

class VlmBackend {
public:
    virtual ~VlmBackend() = default;
    virtual RawAnswer chat(const ChatRequest& request) = 0;
    virtual std::string name() const = 0;
    /// Whether chat() consumes rendered images; lets the pipeline skip rendering.
    virtual bool needs_pixels() const { return false; }
};

/// Content-addressed on-disk store. Each entry is a file holding a header with the
/// payload length and SHA-256 followed by the payload; damaged entries are evicted.
class ResponseCache {
public:
    explicit ResponseCache(std::filesystem::path root);

    static std::string key_for(std::string_view endpoint, std::string_view canonical_body);

    std::optional<std::string> get(const std::string& key);
    void put(const std::string& key, std::string_view value);

    /// Returns the cached value or runs `fetch` and stores its result.
    std::string fetch_through(const std::string& key, const std::function<std::string()>& fetch);

    std::uint64_t hits() const { return hits_; }
    std::uint64_t misses() const { return misses_; }
    std::uint64_t evictions() const { return evictions_; }
    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path entry_path(const std::string& key) const;

private:
    std::mutex& stripe(const std::string& key);

    std::filesystem::path root_;
    std::atomic<std::uint64_t> hits_{0}, misses_{0}, evictions_{0};
    std::array<std::mutex, 64> stripes_;
};

struct BackendSet {
    std::shared_ptr<DetectorBackend> detector;
    std::shared_ptr<VlmBackend> vlm;
    std::shared_ptr<SegmenterBackend> segmenter;
    std::shared_ptr<ResponseCache> cache;
};

// ---------------------------------------------------------------------------
// Simulated tools

struct NoiseProfile {
    double p_miss = 0.0;
    double box_jitter = 0.0;
    double p_spurious = 0.0;  // expected spurious boxes per image
    /// Explicit N x (N+1) matrix, last column "none". Empty means use the
    /// parametric form below.
    std::vector<std::vector<double>> confusion;
    double confusion_offdiag = 0.0;  // mass spread evenly over the other classes
    double confusion_none = 0.0;     // mass sent to "none"
    int boundary_noise = 0;          // erode/dilate radius in pixels
    double p_label_noise = 0.0;      // chance an annotation is missing from the scored truth
    double box_proposal_noise = 0.10;  // fraction of image size, VLM-proposed boxes
    std::uint64_t seed = 0;

    /// Throws ConfigError on any out-of-range value.
    void validate(int n_ways) const;
    /// Row for a true class position (1-based): N class columns then "none".
    std::vector<double> confusion_row(int true_position, int n_ways) const;
    bool is_zero() const;
};

NoiseProfile parse_noise_profile(const nlohmann::json& j);
nlohmann::json noise_profile_to_json(const NoiseProfile& p);

/// Drops annotations from the scored truth with probability p_label_noise. The scene
/// instances the simulated tools see are untouched.
void apply_label_noise(Episode& episode, const NoiseProfile& noise);

/// One box per scene instance; with noise: misses, edge jitter, spurious boxes.
class SimulatedDetector final : public DetectorBackend {
public:
    explicit SimulatedDetector(NoiseProfile noise = {}) : noise_(std::move(noise)) {}
    DetectionResult detect(QueryContext& query) override;
    std::string name() const override { return noise_.is_zero() ? "oracle" : "noisy"; }

private:
    NoiseProfile noise_;
};

/// Classifier that answers from ground truth: each box takes the class of the
/// best-IoU instance (IoU >= 0.5, else none), then passes through the confusion row.
class OracleVlm final : public VlmBackend {
public:
    explicit OracleVlm(NoiseProfile noise = {}) : noise_(std::move(noise)) {}
    RawAnswer chat(const ChatRequest& request) override;
    std::string name() const override { return noise_.is_zero() ? "oracle" : "noisy"; }

    static constexpr double kMatchIou = 0.5;

private:
    NoiseProfile noise_;
};

/// Canned responses keyed by prompt_hash().
class ScriptedVlm final : public VlmBackend {
public:
    explicit ScriptedVlm(std::map<std::string, std::string> responses)
        : responses_(std::move(responses)) {}
    static ScriptedVlm from_file(const std::filesystem::path& path);
    RawAnswer chat(const ChatRequest& request) override;
    std::string name() const override { return "scripted"; }

private:
    std::map<std::string, std::string> responses_;
};

/// Returns the best-IoU instance mask clipped to the box; boundary_noise > 0 then
/// erodes or dilates it.
class SimulatedSegmenter final : public SegmenterBackend {
public:
    explicit SimulatedSegmenter(NoiseProfile noise = {}) : noise_(std::move(noise)) {}
    BinaryMask segment(QueryContext& query, const BoundingBox& box) override;
    std::string name() const override { return noise_.is_zero() ? "oracle" : "noisy"; }

private:
    NoiseProfile noise_;
};

class BoxFillSegmenter final : public SegmenterBackend {
public:
    BinaryMask segment(QueryContext& query, const BoundingBox& box) override;
    std::string name() const override { return "box_fill"; }
};

BackendSet oracle_backends();
BackendSet noisy_backends(const NoiseProfile& noise);

// ---------------------------------------------------------------------------
// Remote tools over HTTP

struct HttpReply {
    int status = 0;
    std::string body;
};

/// POST transport. Returns nullopt when no HTTP exchange happened (connect/read failure).
class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual std::optional<HttpReply> post(const std::string& path, const std::string& body,
                                          const std::string& bearer_token) = 0;
    virtual std::string describe() const = 0;
};

/// cpp-httplib backed transport for "http://host:port" base URLs.
std::shared_ptr<HttpTransport> make_http_transport(const std::string& base_url, double timeout_s);

struct RetryPolicy {
    int attempts = 3;
    int initial_backoff_ms = 1000;  // doubles each retry
};

/// Retries transport failures and 5xx replies; 4xx replies are protocol errors.
/// Bounds in-flight requests with a counting limit.
class RemoteClient {
public:
    RemoteClient(std::shared_ptr<HttpTransport> transport, RetryPolicy retry, int max_in_flight,
                 std::string token_env = {}, std::shared_ptr<ResponseCache> cache = nullptr);

    /// Returns the reply body of a 2xx response.
    std::string post(const std::string& path, const std::string& body,
                     const std::string& cache_key_body = {});

    std::uint64_t requests_sent() const { return sent_; }
    const std::string& endpoint() const { return endpoint_; }

private:
    std::string call(const std::string& path, const std::string& body);

    std::shared_ptr<HttpTransport> transport_;
    RetryPolicy retry_;
    std::string token_env_;
    std::shared_ptr<ResponseCache> cache_;
    std::string endpoint_;
    std::mutex mu_;
    std::condition_variable cv_;
    int in_flight_ = 0;
    int max_in_flight_;
    std::atomic<std::uint64_t> sent_{0};
};

class RemoteDetector final : public DetectorBackend {
public:
    explicit RemoteDetector(std::shared_ptr<RemoteClient> client) : client_(std::move(client)) {}
    DetectionResult detect(QueryContext& query) override;
    std::string name() const override { return "remote"; }

private:
    std::shared_ptr<RemoteClient> client_;
};

class RemoteSegmenter final : public SegmenterBackend {
public:
    explicit RemoteSegmenter(std::shared_ptr<RemoteClient> client) : client_(std::move(client)) {}
    BinaryMask segment(QueryContext& query, const BoundingBox& box) override;
    std::string name() const override { return "remote"; }

private:
    std::shared_ptr<RemoteClient> client_;
};

class RemoteVlm final : public VlmBackend {
public:
    RemoteVlm(std::shared_ptr<RemoteClient> client, nlohmann::json params)
        : client_(std::move(client)), params_(std::move(params)) {}
    RawAnswer chat(const ChatRequest& request) override;
    std::string name() const override { return "remote"; }
    bool needs_pixels() const override { return true; }

private:
    std::shared_ptr<RemoteClient> client_;
    nlohmann::json params_;
};

/// Validates a /v1/detect reply into in-bounds boxes; throws ProtocolError.
DetectionResult decode_detect_reply(std::string_view body, int width, int height);
/// Validates a /v1/segment reply into a full-size mask; throws ProtocolError.
BinaryMask decode_segment_reply(std::string_view body, int width, int height);
/// Extracts the text of a /v1/chat reply; throws ProtocolError.
std::string decode_chat_reply(std::string_view body);

}  // namespace vise
