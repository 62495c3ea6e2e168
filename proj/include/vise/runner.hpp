#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vise/backends.hpp"
#include "vise/dataset.hpp"
#include "vise/metrics.hpp"
#include "vise/pipeline.hpp"

namespace vise {

struct RemoteProfile {
    std::string detector_url;
    std::string segmenter_url;
    std::string vlm_url;
    std::string token_env = "VISE_VLM_TOKEN";
    int max_in_flight = 4;
    double timeout_s = 60.0;
    RetryPolicy retry;
    nlohmann::json params = nlohmann::json::object();
    /// Detector and segmenter replies are cached too (the VLM always is).
    bool cache_tools = false;
};

enum class BackendProfile { oracle, noisy, remote };
std::string to_string(BackendProfile p);

struct RunConfig {
    std::filesystem::path manifest;
    std::vector<int> folds;  // empty: every fold of the manifest
    int n_ways = 1;
    int k_shots = 1;
    int episodes = 1;  // per fold
    std::uint64_t seed = 0;
    BackendProfile profile = BackendProfile::oracle;
    NoiseProfile noise;
    RemoteProfile remote;
    PipelineConfig pipeline;
    SamplerOptions sampler;
    std::optional<std::filesystem::path> prompt_template;
    ReportOptions report;
    int failure_tolerance = 0;

    // Not part of the config hash.
    std::filesystem::path output_dir = "runs/latest";
    int parallelism = 4;
    std::optional<std::filesystem::path> cache_dir;  // remote only; default <output_dir>/cache

    /// Canonical form of every result-affecting field.
    nlohmann::ordered_json canonical() const;
    std::string hash() const;
};

/// Relative paths resolve against base_dir. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
/// JSON, with // and /* */ comments accepted.
nlohmann::json read_config_json(const std::filesystem::path& path);
/// Sets a dotted key ("pipeline.variant") from a flag value; the value is read as
/// JSON when it parses, otherwise as a string.
void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value);

/// Loads the manifest and checks every fold can produce episodes. Throws on failure.
DatasetIndex prepare_run(RunConfig& config);

BackendSet make_backends(const RunConfig& config);

/// Lines describing where two canonical configs differ.
std::vector<std::string> config_diff(const nlohmann::json& before, const nlohmann::json& after);

struct RunHooks {
    /// Stop after writing this many episodes (simulated interruption).
    std::optional<std::uint64_t> max_episodes;
    /// Replaces make_backends().
    std::function<BackendSet()> backends;
};

struct RunOutcome {
    int exit_code = 0;
    std::uint64_t executed = 0;  // episodes run by this invocation
    std::uint64_t failed = 0;    // failed episodes in the whole results file
    std::uint64_t total = 0;     // episodes in the results file
    bool complete = false;
    std::string message;
};

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitPartial = 2, kExitUnreachable = 3 };

/// Fresh run: clears previous results in output_dir.
RunOutcome run_experiment(RunConfig config, const RunHooks& hooks = {});
/// Continues from the ledger; refuses when the config hash changed.
RunOutcome resume_experiment(RunConfig config, const RunHooks& hooks = {});

/// Reads one run directory (run.json + results.jsonl) into a report row set.
RunReport load_run_report(const std::filesystem::path& run_dir);
/// A run directory, or a directory whose subdirectories are runs (merged in name order).
std::vector<RunReport> load_reports(const std::filesystem::path& dir);

struct VerifySummary {
    std::uint64_t episodes = 0;
    std::vector<std::string> problems;
    bool ok() const { return problems.empty(); }
};

/// Re-derives TP/FP/FN from every stored transcript and checks pixel bookkeeping.
VerifySummary verify_run(const std::filesystem::path& run_dir);

std::vector<ResultRecord> read_results(const std::filesystem::path& results_file);

}  // namespace vise
