#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vise/mask.hpp"

namespace vise {

using LabelSetPair = std::pair<std::vector<int>, std::vector<int>>;  // (predicted, truth)

/// Fraction of samples whose predicted label set equals the truth set.
double exact_ratio(const std::vector<LabelSetPair>& results);

class IoUAccumulator {
public:
    explicit IoUAccumulator(int n_ways = 0);

    /// Adds signed counts for class position n (1-based); negative counts are rejected.
    void accumulate(int position, std::int64_t tp, std::int64_t fp, std::int64_t fn);
    void accumulate(const std::vector<PixelTally>& episode);
    void merge(const IoUAccumulator& other);

    int n_ways() const { return static_cast<int>(tallies_.size()); }
    const std::vector<PixelTally>& tallies() const { return tallies_; }
    /// TP/(TP+FP+FN) or nullopt when the denominator is zero.
    std::optional<double> class_iou(int position) const;

private:
    std::vector<PixelTally> tallies_;
};

/// Mean of per-class IoU over classes with a non-zero denominator.
double miou(const IoUAccumulator& acc, int n_ways);
/// Alternative protocol: mIoU of each episode, then the mean over episodes that have
/// at least one scoreable class.
double miou_per_episode(const std::vector<std::vector<PixelTally>>& episodes);

double fold_average(const std::vector<double>& per_fold, std::size_t expected_folds);

/// Round half up to one decimal. A tiny nudge absorbs binary representation error so
/// 57.85 renders as 57.9.
double round_half_up_1(double value);
std::string format_1dp(double value);

enum class MiouMode { pixel, episode };
std::string to_string(MiouMode m);
MiouMode miou_mode_from_string(const std::string& s);

struct FoldReport {
    int fold = 0;
    std::uint64_t episodes = 0;
    std::uint64_t failed = 0;
    double er = 0.0;
    double miou = 0.0;
    std::vector<std::optional<double>> per_class_iou;

    friend bool operator==(const FoldReport&, const FoldReport&) = default;
};

struct RunReport {
    std::string method;
    std::string variant;
    int n_ways = 0;
    int k_shots = 0;
    std::vector<int> expected_folds;
    std::vector<FoldReport> folds;  // ascending fold id, subset of expected_folds
    std::string miou_mode = "pixel";

    bool partial() const { return folds.size() != expected_folds.size(); }
    /// Mean over folds, nullopt while partial.
    std::optional<double> average_er() const;
    std::optional<double> average_miou() const;

    friend bool operator==(const RunReport&, const RunReport&) = default;
};

/// One scored episode as read back from a results file.
struct ScoredEpisode {
    int fold = 0;
    std::vector<int> y_true;
    std::vector<int> y_pred;
    std::vector<PixelTally> per_class;
    bool ok = true;
};

struct ReportOptions {
    MiouMode miou_mode = MiouMode::pixel;
    bool include_failed = true;
};

/// Groups by fold and computes every fold row.
RunReport build_run_report(std::string method, std::string variant, int n_ways, int k_shots,
                           std::vector<int> expected_folds, const std::vector<ScoredEpisode>& episodes,
                           const ReportOptions& options = {});

enum class ReportFormat { text, csv, json };
ReportFormat report_format_from_string(const std::string& s);

inline constexpr int kReportSchema = 1;

nlohmann::ordered_json report_to_json(const std::vector<RunReport>& runs);
/// Throws MetricError on a schema mismatch.
std::vector<RunReport> report_from_json(const nlohmann::json& j);

std::string render_report(const std::vector<RunReport>& runs, ReportFormat format);
void emit_report(const std::vector<RunReport>& runs, ReportFormat format, const std::filesystem::path& out);

}  // namespace vise
