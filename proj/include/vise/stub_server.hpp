#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

#include "vise/dataset.hpp"
#include "vise/image.hpp"

namespace httplib {
class Server;
}

namespace vise {

/// Fault injection for contract tests.
struct StubFaults {
    bool out_of_bounds_boxes = false;
    bool wrong_mask_size = false;
    bool malformed_json = false;
    /// Every endpoint answers 503 to this many requests before behaving.
    int fail_first = 0;
};

/// Reference implementation of the three tool endpoints for synthetic scenes. It
/// recognises objects by fill color: connected components of a non-background color
/// are detections, same-color pixels inside a box are the segment, and a class color
/// table answers the multi-choice question.
class StubServer {
public:
    /// Class label -> fill color. Classes without a color are never recognised.
    explicit StubServer(std::map<std::string, Rgb> class_colors, StubFaults faults = {});
    static StubServer for_dataset(const DatasetIndex& index, StubFaults faults = {});
    ~StubServer();
    StubServer(const StubServer&) = delete;
    StubServer& operator=(const StubServer&) = delete;
    StubServer(StubServer&&) noexcept;

    /// Binds to host:port (port 0 picks a free one) and serves on a background thread.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    /// Serves on the calling thread until stop().
    void listen(const std::string& host, int port);
    void stop();
    std::string base_url() const;

    /// Handlers, exposed for in-process tests. Return (status, body).
    std::pair<int, std::string> handle_detect(const std::string& body);
    std::pair<int, std::string> handle_segment(const std::string& body);
    std::pair<int, std::string> handle_chat(const std::string& body);

private:
    bool take_failure();
    void install_routes();

    std::map<std::string, Rgb> colors_;
    StubFaults faults_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    std::string host_;
    int port_ = 0;
    std::unique_ptr<std::mutex> mu_;
    int failures_left_ = 0;
};

}  // namespace vise
