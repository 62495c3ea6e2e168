#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vise/errors.hpp"
#include "vise/image.hpp"
#include "vise/metrics.hpp"
#include "vise/runner.hpp"
#include "vise/stub_server.hpp"
#include "vise/synth.hpp"
#include "vise/vqa.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunFlags {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::string> output;
    std::optional<int> parallelism;
    std::optional<std::uint64_t> seed;
    std::optional<int> episodes;
    std::optional<std::string> profile;
    std::optional<std::string> variant;
    std::optional<std::string> cache_dir;
    std::optional<std::uint64_t> max_episodes;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("-c,--config", f.config, "run config (JSON, comments allowed)")->required();
    cmd->add_option("--set", f.sets, "override a config field, e.g. --set pipeline.variant=box_fill");
    cmd->add_option("-o,--output", f.output, "output directory");
    cmd->add_option("-j,--parallelism", f.parallelism, "episodes in flight");
    cmd->add_option("--seed", f.seed, "sampling seed");
    cmd->add_option("--episodes", f.episodes, "episodes per fold");
    cmd->add_option("--profile", f.profile, "oracle | noisy | remote");
    cmd->add_option("--variant", f.variant, "full | vlm_boxes | box_fill");
    cmd->add_option("--cache-dir", f.cache_dir, "response cache directory");
    cmd->add_option("--max-episodes", f.max_episodes)->group("");
}

vise::RunConfig load_config(const RunFlags& f) {
    json j = vise::read_config_json(f.config);
    for (const auto& s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw vise::ConfigError("--set expects key=value, got '" + s + "'");
        vise::apply_override(j, s.substr(0, eq), s.substr(eq + 1));
    }
    if (f.output) j["output_dir"] = fs::absolute(*f.output).string();
    if (f.parallelism) j["parallelism"] = *f.parallelism;
    if (f.seed) j["seed"] = *f.seed;
    if (f.episodes) j["episodes"] = *f.episodes;
    if (f.profile) j["backend"]["profile"] = *f.profile;
    if (f.variant) j["pipeline"]["variant"] = *f.variant;
    if (f.cache_dir) j["cache_dir"] = fs::absolute(*f.cache_dir).string();
    return vise::parse_run_config(j, fs::absolute(f.config).parent_path());
}

int report_outcome(const vise::RunConfig& cfg, const vise::RunOutcome& o) {
    std::cout << "episodes run: " << o.executed << ", results: " << o.total << ", failed: " << o.failed << "\n";
    if (!o.message.empty()) std::cerr << "vise: " << o.message << "\n";
    const fs::path report = cfg.output_dir / "report.txt";
    if (o.total > 0 && fs::exists(report)) std::cout << vise::read_text_file(report);
    std::cout << "output: " << cfg.output_dir.string() << "\n";
    return o.exit_code;
}

vise::DetectionResult detections_from(const json& arr) {
    vise::DetectionResult d;
    for (const auto& b : arr) {
        const auto c = b.at("box");
        d.boxes.push_back({b.at("id").get<int>(),
                           {c[0].get<int>(), c[1].get<int>(), c[2].get<int>(), c[3].get<int>()},
                           b.at("score").get<double>(),
                           b.value("label", std::string())});
    }
    return d;
}

vise::Image mask_image(const vise::BinaryMask& m) {
    vise::Image img(m.width(), m.height());
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m.test(x, y)) img.put(x, y, {255, 255, 255});
    return img;
}

int cmd_inspect(const fs::path& path, bool write_images) {
    json t;
    try {
        t = json::parse(vise::read_text_file(path));
    } catch (const json::exception& e) {
        throw vise::ParseError("transcript " + path.string() + " is corrupt: " + e.what());
    }
    try {
        const auto labels = t.at("labels").get<std::vector<std::string>>();
        std::cout << "episode " << t.at("episode") << " of fold " << t.at("fold") << " (" << t.at("n") << "-way "
                  << t.at("k") << "-shot), status " << t.at("status").get<std::string>() << "\n";
        std::cout << "query: " << t.at("query").at("image_id").get<std::string>() << "\n";
        const auto& prompts = t.at("prompts");
        const auto& responses = t.at("responses");
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            std::cout << "\n--- prompt " << i + 1 << " ---\n" << prompts[i].get<std::string>() << "\n";
            if (i < responses.size())
                std::cout << "\n--- raw answer " << i + 1 << " ---\n" << responses[i].get<std::string>() << "\n";
        }
        const auto dets = detections_from(t.at("detections"));
        std::cout << "\n--- assignment ---\n";
        if (dets.boxes.empty()) std::cout << "no boxes proposed\n";
        for (const auto& b : dets.boxes) {
            const std::string id = std::to_string(b.display_id);
            std::string verdict = "none";
            if (t.at("assignment").contains(id) && !t["assignment"][id].is_null())
                verdict = labels.at(static_cast<std::size_t>(t["assignment"][id].get<int>() - 1));
            char score[32];
            std::snprintf(score, sizeof score, "%.3f", b.score);
            std::cout << "Box " << id << " " << vise::to_string(b.box) << " score " << score << " -> " << verdict << "\n";
        }
        if (!t.at("diagnostics").empty()) {
            std::cout << "\n--- diagnostics ---\n";
            for (const auto& d : t["diagnostics"]) std::cout << d.get<std::string>() << "\n";
        }
        std::cout << "\n--- per-class IoU ---\n";
        const auto& ious = t.at("per_class_iou");
        for (std::size_t n = 0; n < ious.size(); ++n)
            std::cout << n + 1 << " " << labels.at(n) << ": "
                      << (ious[n].is_null() ? std::string("n/a (absent and not predicted)")
                                            : vise::format_1dp(100.0 * ious[n].get<double>()) + "%")
                      << "\n";
        std::cout << "y_true " << t.at("y_true").dump() << "  y_pred " << t.at("y_pred").dump() << "\n";

        if (!write_images) return 0;
        const fs::path stem = path.parent_path() / path.stem();
        const auto& pred = t.at("predicted_masks");
        for (std::size_t n = 0; n < pred.size(); ++n) {
            const auto out = fs::path(stem.string() + ".pred" + std::to_string(n + 1) + ".png");
            vise::write_png(out, mask_image(vise::rle_decode(vise::rle_from_text(pred[n].dump()))));
            std::cout << "wrote " << out.string() << "\n";
        }
        const fs::path image = t.at("query").at("path").get<std::string>();
        if (fs::exists(image)) {
            const auto out = fs::path(stem.string() + ".overlay.png");
            vise::write_png(out, vise::render_overlay(vise::read_png(image), vise::overlay_for(dets)));
            std::cout << "wrote " << out.string() << "\n";
        } else {
            std::cerr << "vise: query image " << image.string() << " not found; overlay skipped\n";
        }
    } catch (const json::exception& e) {
        throw vise::ParseError("transcript " + path.string() + " is missing fields: " + e.what());
    }
    return 0;
}

vise::StubServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vise: few-shot classification and segmentation evaluation harness"};
    app.require_subcommand(1);

    auto* dataset = app.add_subcommand("dataset", "dataset tools");
    dataset->require_subcommand(1);
    auto* synth = dataset->add_subcommand("synth", "render a synthetic dataset from a scene spec");
    std::string spec_path, synth_out;
    std::uint64_t synth_seed = 0;
    synth->add_option("spec", spec_path, "scene spec JSON")->required();
    synth->add_option("out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_seed, "generator seed");

    RunFlags run_flags, resume_flags;
    auto* run = app.add_subcommand("run", "run an experiment");
    add_run_flags(run, run_flags);
    auto* resume = app.add_subcommand("resume", "continue an interrupted experiment");
    add_run_flags(resume, resume_flags);

    auto* report = app.add_subcommand("report", "render the report of one or more runs");
    std::string report_dir, report_format = "text";
    std::optional<std::string> report_out;
    bool verify = false;
    report->add_option("dir", report_dir, "run directory, or a directory of runs to merge")->required();
    report->add_option("-f,--format", report_format, "text | csv | json");
    report->add_option("--out", report_out, "write to a file instead of stdout");
    report->add_flag("--verify", verify, "re-derive pixel counts from stored masks");

    auto* inspect = app.add_subcommand("inspect", "dump one episode transcript");
    std::string transcript;
    bool no_images = false;
    inspect->add_option("transcript", transcript, "transcript JSON")->required();
    inspect->add_flag("--no-images", no_images, "skip writing overlay and mask PNGs");

    auto* serve = app.add_subcommand("serve", "serve the reference stub tools for a synthetic dataset");
    std::string serve_manifest, serve_host = "127.0.0.1";
    int serve_port = 8080;
    vise::StubFaults faults;
    serve->add_option("--manifest", serve_manifest, "dataset manifest with class colors")->required();
    serve->add_option("--host", serve_host, "bind address")->capture_default_str();
    serve->add_option("--port", serve_port, "port, 0 picks a free one")->capture_default_str();
    serve->add_flag("--fault-out-of-bounds", faults.out_of_bounds_boxes, "detect returns boxes outside the image");
    serve->add_flag("--fault-mask-size", faults.wrong_mask_size, "segment returns masks of the wrong size");
    serve->add_flag("--fault-malformed", faults.malformed_json, "every reply is broken JSON");
    serve->add_option("--fault-fail-first", faults.fail_first, "answer 503 to the first N requests");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : vise::kExitUsage;
    }

    try {
        if (*synth) {
            const auto manifest = vise::generate_synthetic_dataset(vise::load_scene_spec(spec_path), synth_seed, synth_out);
            std::cout << "wrote " << manifest.string() << "\n";
            return 0;
        }
        if (*run || *resume) {
            const RunFlags& f = *run ? run_flags : resume_flags;
            const vise::RunConfig cfg = load_config(f);
            vise::RunHooks hooks;
            hooks.max_episodes = f.max_episodes;
            const auto outcome = *run ? vise::run_experiment(cfg, hooks) : vise::resume_experiment(cfg, hooks);
            return report_outcome(cfg, outcome);
        }
        if (*report) {
            const auto runs = vise::load_reports(report_dir);
            const auto text = vise::render_report(runs, vise::report_format_from_string(report_format));
            if (report_out) vise::write_file_atomic(*report_out, text);
            else std::cout << text;
            if (verify) {
                std::vector<fs::path> dirs;
                if (fs::exists(fs::path(report_dir) / "run.json")) dirs.push_back(report_dir);
                else
                    for (const auto& e : fs::directory_iterator(report_dir))
                        if (fs::exists(e.path() / "run.json")) dirs.push_back(e.path());
                bool ok = true;
                for (const auto& d : dirs) {
                    const auto s = vise::verify_run(d);
                    std::cerr << "verify " << d.string() << ": " << s.episodes << " episodes, " << s.problems.size()
                              << " problems\n";
                    for (const auto& p : s.problems) std::cerr << "  " << p << "\n";
                    ok = ok && s.ok();
                }
                if (!ok) return vise::kExitPartial;
            }
            return 0;
        }
        if (*inspect) return cmd_inspect(transcript, !no_images);
        if (*serve) {
            auto server = vise::StubServer::for_dataset(vise::load_manifest(serve_manifest), faults);
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "serving on http://" << serve_host << ":" << serve_port << "\n" << std::flush;
            server.listen(serve_host, serve_port);
            return 0;
        }
    } catch (const vise::TransportError& e) {
        std::cerr << "vise: " << e.what() << "\n";
        return vise::kExitUnreachable;
    } catch (const vise::Error& e) {
        std::cerr << "vise: " << e.what() << "\n";
        return vise::kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "vise: " << e.what() << "\n";
        return vise::kExitUsage;
    }
    return vise::kExitUsage;
}
