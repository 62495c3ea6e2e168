#include "vise/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "vise/errors.hpp"
#include "vise/image.hpp"

namespace vise {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::vector<int> sorted_unique(std::vector<int> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

}  // namespace

double exact_ratio(const std::vector<LabelSetPair>& results) {
    if (results.empty()) throw MetricError("exact ratio of an empty result list is undefined");
    std::size_t hits = 0;
    for (const auto& [pred, truth] : results)
        if (sorted_unique(pred) == sorted_unique(truth)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

IoUAccumulator::IoUAccumulator(int n_ways) {
    if (n_ways < 0) throw MetricError("accumulator: negative class count");
    tallies_.resize(static_cast<std::size_t>(n_ways));
}

void IoUAccumulator::accumulate(int position, std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    if (position < 1 || position > n_ways())
        throw MetricError("accumulator: class " + std::to_string(position) + " outside 1.." + std::to_string(n_ways()));
    if (tp < 0 || fp < 0 || fn < 0)
        throw MetricError("accumulator: negative pixel count for class " + std::to_string(position));
    auto& t = tallies_[static_cast<std::size_t>(position - 1)];
    t.tp += static_cast<std::uint64_t>(tp);
    t.fp += static_cast<std::uint64_t>(fp);
    t.fn += static_cast<std::uint64_t>(fn);
}

void IoUAccumulator::accumulate(const std::vector<PixelTally>& episode) {
    if (static_cast<int>(episode.size()) != n_ways())
        throw MetricError("accumulator: episode has " + std::to_string(episode.size()) + " classes, expected " +
                          std::to_string(n_ways()));
    for (std::size_t i = 0; i < episode.size(); ++i) {
        tallies_[i].tp += episode[i].tp;
        tallies_[i].fp += episode[i].fp;
        tallies_[i].fn += episode[i].fn;
    }
}

void IoUAccumulator::merge(const IoUAccumulator& other) { accumulate(other.tallies_); }

std::optional<double> IoUAccumulator::class_iou(int position) const {
    if (position < 1 || position > n_ways()) throw MetricError("accumulator: class out of range");
    const auto& t = tallies_[static_cast<std::size_t>(position - 1)];
    const auto denom = t.tp + t.fp + t.fn;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(t.tp) / static_cast<double>(denom);
}

double miou(const IoUAccumulator& acc, int n_ways) {
    if (n_ways != acc.n_ways())
        throw MetricError("miou: accumulator holds " + std::to_string(acc.n_ways()) + " classes, asked for " +
                          std::to_string(n_ways));
    double sum = 0.0;
    int valid = 0;
    for (int n = 1; n <= n_ways; ++n) {
        if (auto v = acc.class_iou(n)) {
            sum += *v;
            ++valid;
        }
    }
    if (valid == 0) throw MetricError("miou undefined: no class has a non-zero denominator");
    return sum / valid;
}

double miou_per_episode(const std::vector<std::vector<PixelTally>>& episodes) {
    double sum = 0.0;
    std::size_t valid = 0;
    for (const auto& ep : episodes) {
        IoUAccumulator acc(static_cast<int>(ep.size()));
        acc.accumulate(ep);
        try {
            sum += miou(acc, acc.n_ways());
            ++valid;
        } catch (const MetricError&) {
        }
    }
    if (valid == 0) throw MetricError("miou undefined: no episode has a scoreable class");
    return sum / static_cast<double>(valid);
}

double fold_average(const std::vector<double>& per_fold, std::size_t expected_folds) {
    if (per_fold.size() != expected_folds)
        throw MetricError("fold average: got " + std::to_string(per_fold.size()) + " values, expected " +
                          std::to_string(expected_folds));
    if (per_fold.empty()) throw MetricError("fold average of zero folds");
    double sum = 0.0;
    for (double v : per_fold) sum += v;
    return sum / static_cast<double>(per_fold.size());
}

double round_half_up_1(double value) { return std::floor(value * 10.0 + 0.5 + 1e-9) / 10.0; }

std::string format_1dp(double value) {
    char buf[64];
    double r = round_half_up_1(value);
    if (r == 0.0) r = 0.0;  // no "-0.0"
    std::snprintf(buf, sizeof buf, "%.1f", r);
    return buf;
}

std::string to_string(MiouMode m) { return m == MiouMode::pixel ? "pixel" : "episode"; }

MiouMode miou_mode_from_string(const std::string& s) {
    if (s == "pixel") return MiouMode::pixel;
    if (s == "episode") return MiouMode::episode;
    throw ConfigError("unknown miou mode '" + s + "' (pixel | episode)");
}

namespace {

std::optional<double> average_of(const RunReport& r, double FoldReport::*field) {
    if (r.partial() || r.folds.empty()) return std::nullopt;
    std::vector<double> v;
    for (const auto& f : r.folds) v.push_back(f.*field);
    return fold_average(v, r.expected_folds.size());
}

}  // namespace

std::optional<double> RunReport::average_er() const { return average_of(*this, &FoldReport::er); }
std::optional<double> RunReport::average_miou() const { return average_of(*this, &FoldReport::miou); }

RunReport build_run_report(std::string method, std::string variant, int n_ways, int k_shots,
                           std::vector<int> expected_folds, const std::vector<ScoredEpisode>& episodes,
                           const ReportOptions& options) {
    RunReport r;
    r.method = std::move(method);
    r.variant = std::move(variant);
    r.n_ways = n_ways;
    r.k_shots = k_shots;
    r.expected_folds = std::move(expected_folds);
    r.miou_mode = to_string(options.miou_mode);

    std::map<int, std::vector<const ScoredEpisode*>> by_fold;
    for (const auto& e : episodes) {
        if (std::find(r.expected_folds.begin(), r.expected_folds.end(), e.fold) == r.expected_folds.end())
            throw MetricError("result for fold " + std::to_string(e.fold) + " not in the configured folds");
        by_fold[e.fold].push_back(&e);
    }
    for (const auto& [fold, eps] : by_fold) {
        FoldReport f;
        f.fold = fold;
        f.episodes = eps.size();
        std::vector<LabelSetPair> sets;
        std::vector<std::vector<PixelTally>> tallies;
        IoUAccumulator acc(n_ways);
        for (const auto* e : eps) {
            if (!e->ok) ++f.failed;
            if (!e->ok && !options.include_failed) continue;
            sets.emplace_back(e->y_pred, e->y_true);
            acc.accumulate(e->per_class);
            tallies.push_back(e->per_class);
        }
        if (sets.empty()) throw MetricError("fold " + std::to_string(fold) + ": no scoreable episodes");
        f.er = exact_ratio(sets);
        f.miou = options.miou_mode == MiouMode::pixel ? miou(acc, n_ways) : miou_per_episode(tallies);
        for (int n = 1; n <= n_ways; ++n) f.per_class_iou.push_back(acc.class_iou(n));
        r.folds.push_back(std::move(f));
    }
    return r;
}

ReportFormat report_format_from_string(const std::string& s) {
    if (s == "text") return ReportFormat::text;
    if (s == "csv") return ReportFormat::csv;
    if (s == "json") return ReportFormat::json;
    throw ConfigError("unknown report format '" + s + "' (text | csv | json)");
}

ordered_json report_to_json(const std::vector<RunReport>& runs) {
    ordered_json j;
    j["schema"] = kReportSchema;
    j["runs"] = ordered_json::array();
    for (const auto& r : runs) {
        ordered_json o;
        o["method"] = r.method;
        o["variant"] = r.variant;
        o["n_ways"] = r.n_ways;
        o["k_shots"] = r.k_shots;
        o["miou_mode"] = r.miou_mode;
        o["expected_folds"] = r.expected_folds;
        o["partial"] = r.partial();
        o["folds"] = ordered_json::array();
        for (const auto& f : r.folds) {
            ordered_json fo;
            fo["fold"] = f.fold;
            fo["episodes"] = f.episodes;
            fo["failed"] = f.failed;
            fo["er"] = f.er;
            fo["miou"] = f.miou;
            fo["per_class_iou"] = ordered_json::array();
            for (const auto& v : f.per_class_iou) fo["per_class_iou"].push_back(v ? ordered_json(*v) : ordered_json());
            o["folds"].push_back(fo);
        }
        const auto er = r.average_er(), mi = r.average_miou();
        o["avg_er"] = er ? ordered_json(*er) : ordered_json();
        o["avg_miou"] = mi ? ordered_json(*mi) : ordered_json();
        j["runs"].push_back(o);
    }
    return j;
}

std::vector<RunReport> report_from_json(const json& j) {
    if (!j.is_object() || !j.contains("schema")) throw MetricError("report: missing schema field");
    if (!j["schema"].is_number_integer() || j["schema"].get<int>() != kReportSchema)
        throw MetricError("report schema " + j["schema"].dump() + " is not supported (expected " +
                          std::to_string(kReportSchema) + "); regenerate the report with this version");
    std::vector<RunReport> out;
    try {
        for (const auto& o : j.at("runs")) {
            RunReport r;
            r.method = o.at("method").get<std::string>();
            r.variant = o.at("variant").get<std::string>();
            r.n_ways = o.at("n_ways").get<int>();
            r.k_shots = o.at("k_shots").get<int>();
            r.miou_mode = o.at("miou_mode").get<std::string>();
            r.expected_folds = o.at("expected_folds").get<std::vector<int>>();
            for (const auto& fo : o.at("folds")) {
                FoldReport f;
                f.fold = fo.at("fold").get<int>();
                f.episodes = fo.at("episodes").get<std::uint64_t>();
                f.failed = fo.at("failed").get<std::uint64_t>();
                f.er = fo.at("er").get<double>();
                f.miou = fo.at("miou").get<double>();
                for (const auto& v : fo.at("per_class_iou"))
                    f.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
                r.folds.push_back(std::move(f));
            }
            out.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw MetricError(std::string("report: ") + e.what());
    }
    return out;
}

namespace {

constexpr const char* kDash = "—";

std::string pad(const std::string& s, std::size_t width, bool left = false) {
    // Counts code points so the dash occupies one column.
    std::size_t cols = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++cols;
    if (cols >= width) return s;
    return left ? s + std::string(width - cols, ' ') : std::string(width - cols, ' ') + s;
}

std::string fold_header(int fold) { return "5^" + std::to_string(fold); }

std::string render_text(const std::vector<RunReport>& runs) {
    std::vector<int> folds;
    for (const auto& r : runs) folds.insert(folds.end(), r.expected_folds.begin(), r.expected_folds.end());
    folds = sorted_unique(folds);

    std::size_t mw = 6, sw = 7;
    for (const auto& r : runs) {
        mw = std::max(mw, (r.method + "/" + r.variant).size());
        sw = std::max(sw, (std::to_string(r.n_ways) + "-way " + std::to_string(r.k_shots) + "-shot").size());
    }
    std::ostringstream os;
    os << pad("Method", mw, true) << "  " << pad("Setting", sw, true) << "  " << pad("Metric", 6, true);
    for (int f : folds) os << "  " << pad(fold_header(f), 6);
    os << "  " << pad("avg.", 6) << '\n';

    bool any_partial = false;
    for (const auto& r : runs) {
        const std::string method = r.method + "/" + r.variant;
        const std::string setting = std::to_string(r.n_ways) + "-way " + std::to_string(r.k_shots) + "-shot";
        for (int metric = 0; metric < 2; ++metric) {
            os << pad(method, mw, true) << "  " << pad(setting, sw, true) << "  " << pad(metric ? "mIoU" : "ER", 6, true);
            for (int f : folds) {
                std::string cell;
                auto it = std::find_if(r.folds.begin(), r.folds.end(), [&](const FoldReport& x) { return x.fold == f; });
                if (it != r.folds.end()) cell = format_1dp(100.0 * (metric ? it->miou : it->er));
                else if (std::find(r.expected_folds.begin(), r.expected_folds.end(), f) != r.expected_folds.end()) cell = kDash;
                os << "  " << pad(cell, 6);
            }
            const auto avg = metric ? r.average_miou() : r.average_er();
            os << "  " << pad(avg ? format_1dp(100.0 * *avg) : kDash, 6);
            if (r.partial() && metric == 1) os << "  (partial)";
            os << '\n';
        }
        any_partial = any_partial || r.partial();
    }
    if (any_partial) os << "partial: one or more runs are missing folds\n";
    return os.str();
}

std::string csv_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string render_csv(const std::vector<RunReport>& runs) {
    std::ostringstream os;
    os << "method,variant,n_ways,k_shots,fold,metric,value,episodes,failed\n";
    for (const auto& r : runs) {
        std::uint64_t eps = 0, failed = 0;
        for (const auto& f : r.folds) {
            for (int metric = 0; metric < 2; ++metric)
                os << r.method << ',' << r.variant << ',' << r.n_ways << ',' << r.k_shots << ',' << f.fold << ','
                   << (metric ? "miou" : "er") << ',' << csv_number(metric ? f.miou : f.er) << ',' << f.episodes << ','
                   << f.failed << '\n';
            eps += f.episodes;
            failed += f.failed;
        }
        const auto er = r.average_er(), mi = r.average_miou();
        if (er && mi) {
            os << r.method << ',' << r.variant << ',' << r.n_ways << ',' << r.k_shots << ",avg,er," << csv_number(*er)
               << ',' << eps << ',' << failed << '\n';
            os << r.method << ',' << r.variant << ',' << r.n_ways << ',' << r.k_shots << ",avg,miou," << csv_number(*mi)
               << ',' << eps << ',' << failed << '\n';
        }
    }
    return os.str();
}

}  // namespace

std::string render_report(const std::vector<RunReport>& runs, ReportFormat format) {
    switch (format) {
        case ReportFormat::text: return render_text(runs);
        case ReportFormat::csv: return render_csv(runs);
        case ReportFormat::json: return report_to_json(runs).dump(2) + "\n";
    }
    return {};
}

void emit_report(const std::vector<RunReport>& runs, ReportFormat format, const std::filesystem::path& out) {
    write_file_atomic(out, render_report(runs, format));
}

}  // namespace vise
