#include <fstream>
#include <iostream>
#include <sstream>

#include "vise/backends.hpp"
#include "vise/errors.hpp"

namespace vise {

namespace {
constexpr std::string_view kMagic = "VISECACHE1";
}

ResponseCache::ResponseCache(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) throw IoError("cache: cannot create " + root_.string() + ": " + ec.message());
}

std::string ResponseCache::key_for(std::string_view endpoint, std::string_view canonical_body) {
    std::string material(endpoint);
    material += '\n';
    material += canonical_body;
    return sha256_hex(material);
}

std::filesystem::path ResponseCache::entry_path(const std::string& key) const {
    return root_ / key.substr(0, 2) / (key + ".entry");
}

std::mutex& ResponseCache::stripe(const std::string& key) {
    return stripes_[std::hash<std::string>{}(key) % stripes_.size()];
}

std::optional<std::string> ResponseCache::get(const std::string& key) {
    const auto path = entry_path(key);
    std::string raw;
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            ++misses_;
            return std::nullopt;
        }
        std::ostringstream ss;
        ss << in.rdbuf();
        raw = ss.str();
    }
    // magic \n length \n sha256 \n payload
    std::istringstream hdr(raw);
    std::string magic, len_text, digest;
    std::getline(hdr, magic);
    std::getline(hdr, len_text);
    std::getline(hdr, digest);
    const auto header_len = magic.size() + len_text.size() + digest.size() + 3;
    bool ok = magic == kMagic && !len_text.empty() && raw.size() >= header_len;
    std::string payload;
    if (ok) {
        payload = raw.substr(header_len);
        ok = len_text == std::to_string(payload.size()) && sha256_hex(payload) == digest;
    }
    if (!ok) {
        std::lock_guard lock(stripe(key));
        std::error_code ec;
        std::filesystem::remove(path, ec);
        ++evictions_;
        ++misses_;
        std::cerr << "warning: evicted corrupt cache entry " << path.string() << "\n";
        return std::nullopt;
    }
    ++hits_;
    return payload;
}

void ResponseCache::put(const std::string& key, std::string_view value) {
    const auto path = entry_path(key);
    std::string content(kMagic);
    content += '\n' + std::to_string(value.size()) + '\n' + sha256_hex(value) + '\n';
    content += value;
    std::lock_guard lock(stripe(key));
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    write_file_atomic(path, content);
}

std::string ResponseCache::fetch_through(const std::string& key,
                                         const std::function<std::string()>& fetch) {
    if (auto hit = get(key)) return *hit;
    std::string value = fetch();
    put(key, value);
    return value;
}

}  // namespace vise
