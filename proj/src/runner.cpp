#include "vise/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "vise/errors.hpp"
#include "vise/image.hpp"

namespace vise {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(BackendProfile p) {
    switch (p) {
        case BackendProfile::oracle: return "oracle";
        case BackendProfile::noisy: return "noisy";
        case BackendProfile::remote: return "remote";
    }
    return "oracle";
}

namespace {

constexpr int kRunSchema = 1;
constexpr const char* kResults = "results.jsonl";
constexpr const char* kLedger = "ledger.jsonl";

template <typename T>
T field(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j[key].is_null()) return fallback;
    try {
        return j[key].get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError(where + ": unknown field '" + k + "'");
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    return (p.is_absolute() ? p : base / p).lexically_normal();
}

}  // namespace

json read_config_json(const fs::path& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const Error& e) {
        throw ConfigError("cannot read config " + path.string() + ": " + e.what());
    }
    json j = json::parse(text, nullptr, false, true);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("config " + path.string() + " is not a JSON object");
    return j;
}

void apply_override(json& j, const std::string& dotted_key, const std::string& value) {
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted_key.find('.', start);
        const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("bad override key '" + dotted_key + "'");
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            json v = json::parse(value, nullptr, false);
            (*node)[part] = v.is_discarded() ? json(value) : v;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    check_keys(j,
               {"manifest", "folds", "n_ways", "k_shots", "episodes", "seed", "backend", "pipeline", "sampler",
                "template", "report", "failure_tolerance", "output_dir", "parallelism", "cache_dir"},
               "config");
    RunConfig c;
    if (!j.contains("manifest")) throw ConfigError("config: 'manifest' is required");
    c.manifest = resolve(field<std::string>(j, "manifest", ""), base_dir);
    c.folds = field<std::vector<int>>(j, "folds", {});
    c.n_ways = field<int>(j, "n_ways", 1);
    c.k_shots = field<int>(j, "k_shots", 1);
    c.episodes = field<int>(j, "episodes", 1);
    c.seed = field<std::uint64_t>(j, "seed", 0);
    c.failure_tolerance = field<int>(j, "failure_tolerance", 0);
    c.output_dir = resolve(field<std::string>(j, "output_dir", "runs/latest"), base_dir);
    c.parallelism = field<int>(j, "parallelism", 4);
    if (j.contains("cache_dir") && !j["cache_dir"].is_null())
        c.cache_dir = resolve(field<std::string>(j, "cache_dir", ""), base_dir);
    if (j.contains("template") && !j["template"].is_null())
        c.prompt_template = resolve(field<std::string>(j, "template", ""), base_dir);

    if (c.n_ways < 1) throw ConfigError("config: n_ways must be >= 1");
    if (c.k_shots < 1) throw ConfigError("config: k_shots must be >= 1");
    if (c.episodes < 1) throw ConfigError("config: episodes must be >= 1");
    if (c.parallelism < 1) throw ConfigError("config: parallelism must be >= 1");
    if (c.failure_tolerance < 0) throw ConfigError("config: failure_tolerance must be >= 0");

    const json backend = j.value("backend", json::object());
    if (!backend.is_object()) throw ConfigError("config: 'backend' must be an object");
    check_keys(backend,
               {"profile", "noise", "detector_url", "segmenter_url", "vlm_url", "token_env", "max_in_flight",
                "timeout_s", "params", "retry", "cache_tools"},
               "backend");
    const auto profile = field<std::string>(backend, "profile", "oracle");
    if (profile == "oracle") c.profile = BackendProfile::oracle;
    else if (profile == "noisy") c.profile = BackendProfile::noisy;
    else if (profile == "remote") c.profile = BackendProfile::remote;
    else throw ConfigError("backend: unknown profile '" + profile + "' (oracle | noisy | remote)");
    if (c.profile == BackendProfile::noisy) c.noise = parse_noise_profile(backend.value("noise", json::object()));
    if (c.profile == BackendProfile::remote) {
        auto& r = c.remote;
        r.detector_url = field<std::string>(backend, "detector_url", "");
        r.segmenter_url = field<std::string>(backend, "segmenter_url", "");
        r.vlm_url = field<std::string>(backend, "vlm_url", "");
        if (r.detector_url.empty() || r.segmenter_url.empty() || r.vlm_url.empty())
            throw ConfigError("backend: remote profile needs detector_url, segmenter_url and vlm_url");
        r.token_env = field<std::string>(backend, "token_env", "VISE_VLM_TOKEN");
        r.max_in_flight = field<int>(backend, "max_in_flight", 4);
        r.timeout_s = field<double>(backend, "timeout_s", 60.0);
        r.cache_tools = field<bool>(backend, "cache_tools", false);
        if (r.max_in_flight < 1) throw ConfigError("backend: max_in_flight must be >= 1");
        if (!(r.timeout_s > 0)) throw ConfigError("backend: timeout_s must be > 0");
        r.params = backend.value("params", json::object());
        if (!r.params.is_object()) throw ConfigError("backend: params must be an object");
        if (!r.params.contains("temperature")) r.params["temperature"] = 0;
        const json retry = backend.value("retry", json::object());
        r.retry.attempts = field<int>(retry, "attempts", 3);
        r.retry.initial_backoff_ms = field<int>(retry, "initial_backoff_ms", 1000);
        if (r.retry.attempts < 1 || r.retry.initial_backoff_ms < 0) throw ConfigError("backend: bad retry policy");
    }

    const json pipe = j.value("pipeline", json::object());
    if (!pipe.is_object()) throw ConfigError("config: 'pipeline' must be an object");
    check_keys(pipe,
               {"confidence_threshold", "variant", "max_boxes", "strict_parse", "reask_on_parse_failure",
                "expose_support_masks", "overlay_line_width"},
               "pipeline");
    auto& p = c.pipeline;
    p.confidence_threshold = field<double>(pipe, "confidence_threshold", 0.5);
    p.variant = variant_from_string(field<std::string>(pipe, "variant", "full"));
    p.max_boxes = field<int>(pipe, "max_boxes", 20);
    p.strict_parse = field<bool>(pipe, "strict_parse", false);
    p.reask_on_parse_failure = field<bool>(pipe, "reask_on_parse_failure", false);
    p.expose_support_masks = field<bool>(pipe, "expose_support_masks", false);
    p.overlay_line_width = field<int>(pipe, "overlay_line_width", 2);
    p.validate();

    const json sampler = j.value("sampler", json::object());
    check_keys(sampler, {"negative_query_rate"}, "sampler");
    c.sampler.negative_query_rate = field<double>(sampler, "negative_query_rate", 0.0);
    if (!(c.sampler.negative_query_rate >= 0.0 && c.sampler.negative_query_rate <= 1.0))
        throw ConfigError("sampler: negative_query_rate must be in [0,1]");

    const json report = j.value("report", json::object());
    check_keys(report, {"miou_mode", "include_failed"}, "report");
    c.report.miou_mode = miou_mode_from_string(field<std::string>(report, "miou_mode", "pixel"));
    c.report.include_failed = field<bool>(report, "include_failed", true);

    if (c.profile == BackendProfile::noisy) c.noise.validate(c.n_ways);
    return c;
}

ordered_json RunConfig::canonical() const {
    ordered_json j;
    j["manifest"] = manifest.string();
    j["folds"] = folds;
    j["n_ways"] = n_ways;
    j["k_shots"] = k_shots;
    j["episodes"] = episodes;
    j["seed"] = seed;
    ordered_json b;
    b["profile"] = to_string(profile);
    if (profile == BackendProfile::noisy) b["noise"] = ordered_json(noise_profile_to_json(noise));
    if (profile == BackendProfile::remote) {
        b["detector_url"] = remote.detector_url;
        b["segmenter_url"] = remote.segmenter_url;
        b["vlm_url"] = remote.vlm_url;
        b["token_env"] = remote.token_env;
        b["params"] = ordered_json(remote.params);
    }
    j["backend"] = b;
    ordered_json p;
    p["confidence_threshold"] = pipeline.confidence_threshold;
    p["variant"] = to_string(pipeline.variant);
    p["max_boxes"] = pipeline.max_boxes;
    p["strict_parse"] = pipeline.strict_parse;
    p["reask_on_parse_failure"] = pipeline.reask_on_parse_failure;
    p["expose_support_masks"] = pipeline.expose_support_masks;
    p["overlay_line_width"] = pipeline.overlay_line_width;
    j["pipeline"] = p;
    j["sampler"] = {{"negative_query_rate", sampler.negative_query_rate}};
    j["template"] = prompt_template ? ordered_json(prompt_template->string()) : ordered_json();
    j["report"] = {{"miou_mode", to_string(report.miou_mode)}, {"include_failed", report.include_failed}};
    j["failure_tolerance"] = failure_tolerance;
    return j;
}

std::string RunConfig::hash() const { return sha256_hex(canonical().dump()); }

DatasetIndex prepare_run(RunConfig& config) {
    if (!fs::exists(config.manifest)) throw ConfigError("manifest not found: " + config.manifest.string());
    if (config.prompt_template && !fs::exists(*config.prompt_template))
        throw ConfigError("prompt template not found: " + config.prompt_template->string());
    DatasetIndex index = load_manifest(config.manifest);
    if (config.folds.empty())
        for (int f = 0; f < static_cast<int>(index.folds.size()); ++f) config.folds.push_back(f);
    std::set<int> seen;
    for (int f : config.folds) {
        if (f < 0 || f >= static_cast<int>(index.folds.size()))
            throw ConfigError("config: fold " + std::to_string(f) + " does not exist (manifest has " +
                              std::to_string(index.folds.size()) + ")");
        if (!seen.insert(f).second) throw ConfigError("config: fold " + std::to_string(f) + " listed twice");
        try {
            sample_episode(index, f, config.n_ways, config.k_shots, config.seed, 0, config.sampler);
        } catch (const SamplingError& e) {
            throw ConfigError("fold " + std::to_string(f) + " cannot produce episodes: " + e.what());
        }
    }
    return index;
}

BackendSet make_backends(const RunConfig& config) {
    switch (config.profile) {
        case BackendProfile::oracle: return oracle_backends();
        case BackendProfile::noisy: return noisy_backends(config.noise);
        case BackendProfile::remote: break;
    }
    BackendSet set;
    fs::path cache_dir = config.cache_dir ? *config.cache_dir : config.output_dir / "cache";
    if (const char* env = std::getenv("VISE_CACHE_DIR"); env && *env) cache_dir = fs::path(env);
    set.cache = std::make_shared<ResponseCache>(cache_dir);
    const auto& r = config.remote;
    auto client = [&](const std::string& url, const std::string& token_env, bool cached) {
        return std::make_shared<RemoteClient>(make_http_transport(url, r.timeout_s), r.retry, r.max_in_flight,
                                              token_env, cached ? set.cache : nullptr);
    };
    set.detector = std::make_shared<RemoteDetector>(client(r.detector_url, "", r.cache_tools));
    set.segmenter = std::make_shared<RemoteSegmenter>(client(r.segmenter_url, "", r.cache_tools));
    set.vlm = std::make_shared<RemoteVlm>(client(r.vlm_url, r.token_env, true), r.params);
    return set;
}

namespace {

void flatten(const json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
    if (j.is_object() && !j.empty()) {
        for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
        return;
    }
    out[prefix] = j.dump();
}

}  // namespace

std::vector<std::string> config_diff(const json& before, const json& after) {
    std::map<std::string, std::string> a, b;
    flatten(before, "", a);
    flatten(after, "", b);
    std::vector<std::string> out;
    for (const auto& [k, v] : a) {
        auto it = b.find(k);
        if (it == b.end()) out.push_back(k + ": " + v + " -> (absent)");
        else if (it->second != v) out.push_back(k + ": " + v + " -> " + it->second);
    }
    for (const auto& [k, v] : b)
        if (!a.count(k)) out.push_back(k + ": (absent) -> " + v);
    return out;
}

namespace {

struct EpisodeKey {
    int fold = 0;
    std::uint64_t index = 0;
    auto operator<=>(const EpisodeKey&) const = default;
};

std::string transcript_rel(const EpisodeKey& k) {
    return "transcripts/f" + std::to_string(k.fold) + "_e" + std::to_string(k.index) + ".json";
}

struct LedgerEntry {
    EpisodeKey key;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

std::string ledger_header(const RunConfig& c) {
    ordered_json j;
    j["config_hash"] = c.hash();
    j["config"] = c.canonical();
    return j.dump() + "\n";
}

std::string ledger_line(const LedgerEntry& e) {
    ordered_json j;
    j["fold"] = e.key.fold;
    j["episode"] = e.key.index;
    j["offset"] = e.offset;
    j["length"] = e.length;
    return j.dump() + "\n";
}

std::string iso_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct Completed {
    EpisodeKey key;
    std::optional<EpisodeResult> result;
    std::string transcript;
    double ms = 0.0;
    std::optional<std::string> transport_error;
    std::optional<std::string> fatal_error;
};

class Appender {
public:
    Appender(const fs::path& dir) : dir_(dir) {
        results_.open(dir / kResults, std::ios::binary | std::ios::app);
        ledger_.open(dir / kLedger, std::ios::binary | std::ios::app);
        if (!results_ || !ledger_) throw IoError("cannot open results in " + dir.string());
        offset_ = fs::file_size(dir / kResults);
    }

    void write(const EpisodeKey& key, const EpisodeResult& r, const std::string& transcript) {
        write_file_atomic(dir_ / transcript_rel(key), transcript);
        const std::string line = result_line(r, transcript_rel(key)) + "\n";
        results_ << line;
        results_.flush();
        ledger_ << ledger_line({key, offset_, line.size()});
        ledger_.flush();
        if (!results_ || !ledger_) throw IoError("write failed in " + dir_.string());
        offset_ += line.size();
    }

private:
    fs::path dir_;
    std::ofstream results_, ledger_;
    std::uint64_t offset_ = 0;
};

struct Execution {
    std::uint64_t executed = 0;
    std::optional<std::string> transport_error;
    std::optional<std::string> fatal_error;
    bool interrupted = false;
    ordered_json timings = ordered_json::array();
};

Execution execute(const RunConfig& config, const DatasetIndex& index, const std::vector<EpisodeKey>& todo,
                  const RunHooks& hooks) {
    Execution out;
    std::size_t limit = todo.size();
    if (hooks.max_episodes && *hooks.max_episodes < limit) {
        limit = static_cast<std::size_t>(*hooks.max_episodes);
        out.interrupted = true;
    }
    if (limit == 0) return out;

    BackendSet backends = hooks.backends ? hooks.backends() : make_backends(config);
    const PromptTemplate tmpl = config.prompt_template ? load_template(*config.prompt_template) : default_template();
    Appender appender(config.output_dir);

    std::mutex mu;
    std::condition_variable cv;
    std::map<std::size_t, Completed> done;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};

    auto worker = [&] {
        while (!stop) {
            const std::size_t pos = next++;
            if (pos >= limit) return;
            Completed c;
            c.key = todo[pos];
            const auto t0 = std::chrono::steady_clock::now();
            try {
                Episode ep = sample_episode(index, c.key.fold, config.n_ways, config.k_shots, config.seed,
                                            c.key.index, config.sampler);
                if (config.profile == BackendProfile::noisy) apply_label_noise(ep, config.noise);
                EpisodeResult r = run_episode(ep, backends, config.pipeline, tmpl);
                c.transcript = transcript_json(ep, r).dump(1, ' ', false, json::error_handler_t::replace) + "\n";
                c.result = std::move(r);
            } catch (const TransportError& e) {
                c.transport_error = "episode " + std::to_string(c.key.index) + " of fold " +
                                    std::to_string(c.key.fold) + ": " + e.what();
            } catch (const std::exception& e) {
                c.fatal_error = "episode " + std::to_string(c.key.index) + " of fold " + std::to_string(c.key.fold) +
                                ": " + e.what();
            }
            c.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            {
                std::lock_guard lock(mu);
                done.emplace(pos, std::move(c));
            }
            cv.notify_all();
        }
    };

    const int n_workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(config.parallelism), limit));
    std::vector<std::thread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);

    for (std::size_t pos = 0; pos < limit; ++pos) {
        Completed c;
        {
            std::unique_lock lock(mu);
            cv.wait(lock, [&] { return done.count(pos) > 0; });
            c = std::move(done.at(pos));
            done.erase(pos);
        }
        if (c.transport_error || c.fatal_error) {
            out.transport_error = c.transport_error;
            out.fatal_error = c.fatal_error;
            stop = true;
            break;
        }
        appender.write(c.key, *c.result, c.transcript);
        ++out.executed;
        out.timings.push_back({{"fold", c.key.fold}, {"episode", c.key.index}, {"ms", c.ms}});
    }
    stop = true;
    for (auto& t : pool) t.join();
    return out;
}

std::vector<EpisodeKey> all_keys(const RunConfig& c) {
    std::vector<int> folds = c.folds;
    std::sort(folds.begin(), folds.end());
    std::vector<EpisodeKey> keys;
    for (int f : folds)
        for (int i = 0; i < c.episodes; ++i) keys.push_back({f, static_cast<std::uint64_t>(i)});
    return keys;
}

void write_run_files(const RunConfig& config, const Execution& ex, const std::string& started,
                     const std::string& invocation, RunOutcome& outcome) {
    const fs::path dir = config.output_dir;
    const auto records = read_results(dir / kResults);
    outcome.total = records.size();
    outcome.failed = static_cast<std::uint64_t>(
        std::count_if(records.begin(), records.end(), [](const ResultRecord& r) { return !r.ok; }));
    outcome.complete = records.size() == all_keys(config).size();

    ordered_json run;
    run["schema"] = kRunSchema;
    run["config_hash"] = config.hash();
    run["config"] = config.canonical();
    run["method"] = to_string(config.profile);
    run["variant"] = to_string(config.pipeline.variant);
    run["episodes_expected"] = all_keys(config).size();
    run["episodes_written"] = outcome.total;
    run["failed"] = outcome.failed;
    run["complete"] = outcome.complete;
    write_file_atomic(dir / "run.json", run.dump(2) + "\n");

    ordered_json timing;
    timing["invocation"] = invocation;
    timing["started"] = started;
    timing["finished"] = iso_now();
    timing["executed"] = ex.executed;
    timing["episodes"] = ex.timings;
    write_file_atomic(dir / "timing.json", timing.dump(1) + "\n");

    if (records.empty()) return;
    try {
        const std::vector<RunReport> reports{load_run_report(dir)};
        emit_report(reports, ReportFormat::text, dir / "report.txt");
        emit_report(reports, ReportFormat::csv, dir / "report.csv");
        emit_report(reports, ReportFormat::json, dir / "report.json");
    } catch (const MetricError& e) {
        outcome.message += std::string(outcome.message.empty() ? "" : "; ") + "report not written: " + e.what();
    }
}

RunOutcome finish(const RunConfig& config, const Execution& ex, const std::string& started,
                  const std::string& invocation) {
    RunOutcome outcome;
    outcome.executed = ex.executed;
    write_run_files(config, ex, started, invocation, outcome);
    if (ex.transport_error) {
        outcome.exit_code = kExitUnreachable;
        outcome.message = *ex.transport_error;
    } else if (ex.fatal_error) {
        outcome.exit_code = kExitPartial;
        outcome.message = *ex.fatal_error;
    } else if (!outcome.complete) {
        outcome.exit_code = kExitPartial;
        outcome.message = "run stopped after " + std::to_string(outcome.total) + " episodes";
    } else if (outcome.failed > static_cast<std::uint64_t>(config.failure_tolerance)) {
        outcome.exit_code = kExitPartial;
        outcome.message = std::to_string(outcome.failed) + " episodes failed (tolerance " +
                          std::to_string(config.failure_tolerance) + ")";
    }
    return outcome;
}

}  // namespace

RunOutcome run_experiment(RunConfig config, const RunHooks& hooks) {
    const std::string started = iso_now();
    const DatasetIndex index = prepare_run(config);
    const fs::path dir = config.output_dir;
    fs::create_directories(dir / "transcripts");
    for (const char* f : {kResults, kLedger, "run.json", "report.txt", "report.csv", "report.json"})
        fs::remove(dir / f);
    for (const auto& e : fs::directory_iterator(dir / "transcripts")) fs::remove(e.path());
    write_file_atomic(dir / kResults, "");
    write_file_atomic(dir / kLedger, ledger_header(config));
    const Execution ex = execute(config, index, all_keys(config), hooks);
    return finish(config, ex, started, "run");
}

RunOutcome resume_experiment(RunConfig config, const RunHooks& hooks) {
    const std::string started = iso_now();
    const DatasetIndex index = prepare_run(config);
    const fs::path dir = config.output_dir;
    const fs::path ledger_path = dir / kLedger, results_path = dir / kResults;
    if (!fs::exists(ledger_path)) throw ConfigError("nothing to resume: no ledger in " + dir.string());

    std::istringstream ledger(read_text_file(ledger_path));
    std::string line;
    if (!std::getline(ledger, line)) throw ConfigError("ledger " + ledger_path.string() + " is empty");
    const json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("config_hash"))
        throw ConfigError("ledger " + ledger_path.string() + " has no config header");
    if (header["config_hash"] != config.hash()) {
        std::string msg = "config changed since the run started; refusing to resume:";
        for (const auto& d : config_diff(header.value("config", json::object()), json::parse(config.canonical().dump())))
            msg += "\n  " + d;
        throw ConfigError(msg);
    }

    // Keep the longest consistent prefix of ledger entries.
    const std::uint64_t results_size = fs::exists(results_path) ? fs::file_size(results_path) : 0;
    std::vector<LedgerEntry> entries;
    std::set<EpisodeKey> completed;
    std::uint64_t end = 0;
    while (std::getline(ledger, line)) {
        const json e = json::parse(line, nullptr, false);
        if (e.is_discarded() || !e.is_object() || !e.contains("offset")) break;
        LedgerEntry le{{e.value("fold", 0), e.value("episode", std::uint64_t{0})},
                       e.value("offset", std::uint64_t{0}), e.value("length", std::uint64_t{0})};
        if (le.offset != end || le.offset + le.length > results_size || completed.count(le.key)) break;
        end = le.offset + le.length;
        entries.push_back(le);
        completed.insert(le.key);
    }
    fs::resize_file(results_path, end);
    {
        std::string rewritten = ledger_header(config);
        for (const auto& e : entries) rewritten += ledger_line(e);
        write_file_atomic(ledger_path, rewritten);
    }

    const auto keys = all_keys(config);
    std::vector<EpisodeKey> todo;
    for (const auto& k : keys)
        if (!completed.count(k)) todo.push_back(k);
    fs::create_directories(dir / "transcripts");
    const Execution ex = execute(config, index, todo, hooks);

    // Results stay in canonical order; only an out-of-order ledger needs a rewrite.
    const auto records = read_results(results_path);
    bool ordered = true;
    for (std::size_t i = 1; i < records.size(); ++i)
        if (EpisodeKey{records[i - 1].fold, records[i - 1].episode} > EpisodeKey{records[i].fold, records[i].episode})
            ordered = false;
    if (!ordered) {
        std::istringstream in(read_text_file(results_path));
        std::map<EpisodeKey, std::string> lines;
        while (std::getline(in, line)) {
            const auto r = parse_result_line(line);
            lines[{r.fold, r.episode}] = line + "\n";
        }
        std::string results, ledger_text = ledger_header(config);
        for (const auto& [k, l] : lines) {
            ledger_text += ledger_line({k, results.size(), l.size()});
            results += l;
        }
        write_file_atomic(results_path, results);
        write_file_atomic(ledger_path, ledger_text);
    }
    return finish(config, ex, started, "resume");
}

std::vector<ResultRecord> read_results(const fs::path& results_file) {
    std::vector<ResultRecord> out;
    if (!fs::exists(results_file)) return out;
    std::istringstream in(read_text_file(results_file));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(parse_result_line(line));
        } catch (const ParseError& e) {
            throw ParseError(results_file.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

namespace {

json read_run_json(const fs::path& run_dir) {
    const fs::path p = run_dir / "run.json";
    const json j = json::parse(read_text_file(p), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw MetricError(p.string() + " is not a JSON object");
    if (!j.contains("schema") || j["schema"] != kRunSchema)
        throw MetricError(p.string() + ": run schema " + (j.contains("schema") ? j["schema"].dump() : "missing") +
                          " is not supported (expected " + std::to_string(kRunSchema) +
                          "); re-run or migrate the results with a matching version");
    return j;
}

}  // namespace

RunReport load_run_report(const fs::path& run_dir) {
    const json run = read_run_json(run_dir);
    const json& cfg = run.at("config");
    const auto records = read_results(run_dir / kResults);
    if (records.empty()) throw MetricError("no results in " + run_dir.string());
    const int episodes = cfg.at("episodes").get<int>();
    std::vector<int> folds = cfg.at("folds").get<std::vector<int>>();
    std::sort(folds.begin(), folds.end());

    std::map<int, std::vector<ScoredEpisode>> by_fold;
    for (const auto& r : records) by_fold[r.fold].push_back({r.fold, r.y_true, r.y_pred, r.per_class, r.ok});
    std::vector<ScoredEpisode> complete;
    for (auto& [fold, eps] : by_fold)
        if (static_cast<int>(eps.size()) == episodes) complete.insert(complete.end(), eps.begin(), eps.end());

    ReportOptions options;
    options.miou_mode = miou_mode_from_string(cfg.at("report").at("miou_mode").get<std::string>());
    options.include_failed = cfg.at("report").at("include_failed").get<bool>();
    return build_run_report(run.at("method").get<std::string>(), run.at("variant").get<std::string>(),
                            cfg.at("n_ways").get<int>(), cfg.at("k_shots").get<int>(), folds, complete, options);
}

std::vector<RunReport> load_reports(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw MetricError("not a directory: " + dir.string());
    if (fs::exists(dir / "run.json")) return {load_run_report(dir)};
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::exists(e.path() / "run.json")) runs.push_back(e.path());
    std::sort(runs.begin(), runs.end());
    if (runs.empty()) throw MetricError("no runs found in " + dir.string());
    std::vector<RunReport> out;
    for (const auto& r : runs) out.push_back(load_run_report(r));
    return out;
}

VerifySummary verify_run(const fs::path& run_dir) {
    VerifySummary s;
    read_run_json(run_dir);
    for (const auto& r : read_results(run_dir / kResults)) {
        ++s.episodes;
        const std::string where = "fold " + std::to_string(r.fold) + " episode " + std::to_string(r.episode);
        json t;
        try {
            t = json::parse(read_text_file(run_dir / r.transcript));
        } catch (const std::exception& e) {
            s.problems.push_back(where + ": transcript unreadable: " + e.what());
            continue;
        }
        try {
            const auto& pred = t.at("predicted_masks");
            const auto& truth = t.at("truth_masks");
            if (pred.size() != r.per_class.size() || truth.size() != r.per_class.size()) {
                s.problems.push_back(where + ": mask count does not match the class count");
                continue;
            }
            for (std::size_t n = 0; n < r.per_class.size(); ++n) {
                const BinaryMask p = rle_decode(rle_from_text(pred[n].dump()));
                const BinaryMask g = rle_decode(rle_from_text(truth[n].dump()));
                const PixelTally tally = pixel_tally(p, g);
                const std::string cls = where + " class " + std::to_string(n + 1);
                if (tally != r.per_class[n])
                    s.problems.push_back(cls + ": stored counts differ from the masks");
                if (tally.tp + tally.fn != g.popcount()) s.problems.push_back(cls + ": TP+FN != |truth|");
                if (tally.tp + tally.fp != p.popcount()) s.problems.push_back(cls + ": TP+FP != |prediction|");
            }
            if (!r.ok) continue;
            std::set<int> assigned;
            for (const auto& [id, v] : t.at("assignment").items())
                if (!v.is_null()) assigned.insert(v.get<int>());
            if (std::vector<int>(assigned.begin(), assigned.end()) != r.y_pred)
                s.problems.push_back(where + ": y_pred does not follow from the assignment");
        } catch (const std::exception& e) {
            s.problems.push_back(where + ": " + e.what());
        }
    }
    return s;
}

}  // namespace vise
