#include <algorithm>
#include <cmath>

#include "vise/backends.hpp"
#include "vise/errors.hpp"
#include "vise/rng.hpp"

namespace vise {

using nlohmann::json;

namespace {

// Stream tags keep the draws of different decisions independent.
enum Stream : std::uint64_t {
    kMiss = 1,
    kJitter,
    kSpurious,
    kConfusion,
    kMorph,
    kLabelNoise,
    kProposal,
};

Rng stream(const NoiseProfile& n, Stream s, const Episode& ep, std::uint64_t item) {
    return Rng{n.seed, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(ep.fold),
               ep.episode_index, item};
}

bool in_unit(double p) { return p >= 0.0 && p <= 1.0 && std::isfinite(p); }

}  // namespace

void NoiseProfile::validate(int n_ways) const {
    if (!in_unit(p_miss)) throw ConfigError("noise: p_miss must be in [0,1]");
    if (!in_unit(box_jitter)) throw ConfigError("noise: box_jitter must be in [0,1]");
    if (!(p_spurious >= 0.0) || !std::isfinite(p_spurious)) throw ConfigError("noise: p_spurious must be >= 0");
    if (!in_unit(confusion_offdiag) || !in_unit(confusion_none) ||
        confusion_offdiag + confusion_none > 1.0 + 1e-9)
        throw ConfigError("noise: confusion_offdiag + confusion_none must be within [0,1]");
    if (boundary_noise < 0) throw ConfigError("noise: boundary_noise must be >= 0");
    if (!in_unit(p_label_noise)) throw ConfigError("noise: p_label_noise must be in [0,1]");
    if (!in_unit(box_proposal_noise)) throw ConfigError("noise: box_proposal_noise must be in [0,1]");
    if (!confusion.empty()) {
        if (static_cast<int>(confusion.size()) != n_ways)
            throw ConfigError("noise: confusion matrix needs " + std::to_string(n_ways) + " rows");
        for (std::size_t r = 0; r < confusion.size(); ++r) {
            const auto& row = confusion[r];
            if (static_cast<int>(row.size()) != n_ways + 1)
                throw ConfigError("noise: confusion row " + std::to_string(r) + " needs " +
                                  std::to_string(n_ways + 1) + " entries");
            double sum = 0.0;
            for (double v : row) {
                if (!in_unit(v)) throw ConfigError("noise: confusion entries must be in [0,1]");
                sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw ConfigError("noise: confusion row " + std::to_string(r) + " sums to " +
                                  std::to_string(sum));
        }
    }
}

std::vector<double> NoiseProfile::confusion_row(int true_position, int n_ways) const {
    if (!confusion.empty()) return confusion.at(static_cast<std::size_t>(true_position - 1));
    std::vector<double> row(static_cast<std::size_t>(n_ways) + 1, 0.0);
    double none = confusion_none;
    if (n_ways > 1) {
        const double each = confusion_offdiag / (n_ways - 1);
        for (int c = 1; c <= n_ways; ++c)
            if (c != true_position) row[static_cast<std::size_t>(c - 1)] = each;
    } else {
        none += confusion_offdiag;
    }
    row[static_cast<std::size_t>(n_ways)] = none;
    row[static_cast<std::size_t>(true_position - 1)] = 1.0 - confusion_offdiag - confusion_none;
    return row;
}

bool NoiseProfile::is_zero() const {
    bool identity = true;
    {
        for (std::size_t r = 0; r < confusion.size(); ++r)
            for (std::size_t c = 0; c < confusion[r].size(); ++c)
                if (confusion[r][c] != (r == c ? 1.0 : 0.0)) identity = false;
    }
    return p_miss == 0.0 && box_jitter == 0.0 && p_spurious == 0.0 && identity &&
           confusion_offdiag == 0.0 && confusion_none == 0.0 && boundary_noise == 0 &&
           p_label_noise == 0.0;
}

NoiseProfile parse_noise_profile(const json& j) {
    NoiseProfile p;
    if (j.is_null()) return p;
    if (!j.is_object()) throw ConfigError("noise profile must be an object");
    try {
        if (j.contains("p_miss")) p.p_miss = j["p_miss"].get<double>();
        if (j.contains("box_jitter")) p.box_jitter = j["box_jitter"].get<double>();
        if (j.contains("p_spurious")) p.p_spurious = j["p_spurious"].get<double>();
        if (j.contains("confusion")) p.confusion = j["confusion"].get<std::vector<std::vector<double>>>();
        if (j.contains("confusion_offdiag")) p.confusion_offdiag = j["confusion_offdiag"].get<double>();
        if (j.contains("confusion_none")) p.confusion_none = j["confusion_none"].get<double>();
        if (j.contains("boundary_noise")) p.boundary_noise = j["boundary_noise"].get<int>();
        if (j.contains("p_label_noise")) p.p_label_noise = j["p_label_noise"].get<double>();
        if (j.contains("box_proposal_noise")) p.box_proposal_noise = j["box_proposal_noise"].get<double>();
        if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("noise profile: ") + e.what());
    }
    return p;
}

json noise_profile_to_json(const NoiseProfile& p) {
    json j;
    j["p_miss"] = p.p_miss;
    j["box_jitter"] = p.box_jitter;
    j["p_spurious"] = p.p_spurious;
    if (!p.confusion.empty()) j["confusion"] = p.confusion;
    j["confusion_offdiag"] = p.confusion_offdiag;
    j["confusion_none"] = p.confusion_none;
    j["boundary_noise"] = p.boundary_noise;
    j["p_label_noise"] = p.p_label_noise;
    j["box_proposal_noise"] = p.box_proposal_noise;
    j["seed"] = p.seed;
    return j;
}

void apply_label_noise(Episode& episode, const NoiseProfile& noise) {
    if (noise.p_label_noise <= 0.0) return;
    std::vector<bool> dropped(episode.query.instances.size(), false);
    for (std::size_t i = 0; i < dropped.size(); ++i)
        dropped[i] = stream(noise, kLabelNoise, episode, i).uniform() < noise.p_label_noise;
    rebuild_scored_truth(episode.query, dropped);
}

DetectionResult SimulatedDetector::detect(QueryContext& query) {
    const Episode& ep = query.episode();
    const int w = query.width(), h = query.height();
    DetectionResult out;
    out.source = name();
    int id = 0;
    for (std::size_t i = 0; i < ep.query.instances.size(); ++i) {
        const auto& inst = ep.query.instances[i];
        if (noise_.p_miss > 0.0 && stream(noise_, kMiss, ep, i).uniform() < noise_.p_miss) continue;
        BoundingBox box = inst.box;
        if (noise_.box_jitter > 0.0) {
            Rng r = stream(noise_, kJitter, ep, i);
            const double bw = box.width(), bh = box.height();
            const double j = noise_.box_jitter;
            const double x0 = std::clamp(box.x_min + r.uniform(-j, j) * bw, 0.0, double(w));
            const double y0 = std::clamp(box.y_min + r.uniform(-j, j) * bh, 0.0, double(h));
            const double x1 = std::clamp(box.x_max + r.uniform(-j, j) * bw, 0.0, double(w));
            const double y1 = std::clamp(box.y_max + r.uniform(-j, j) * bh, 0.0, double(h));
            const BoundingBox jittered = box_from_real(x0, y0, x1, y1);
            if (jittered.fits(w, h)) box = jittered;
        }
        const auto& labels = ep.labels;
        std::string hint;
        if (inst.class_position > 0) hint = labels[static_cast<std::size_t>(inst.class_position - 1)];
        out.boxes.push_back({++id, box, 1.0, hint});
    }
    if (noise_.p_spurious > 0.0) {
        Rng r = stream(noise_, kSpurious, ep, 0);
        // Poisson count by inversion.
        const double limit = std::exp(-noise_.p_spurious);
        int count = 0;
        for (double prod = r.uniform(); prod > limit; prod *= r.uniform()) ++count;
        for (int s = 0; s < count; ++s) {
            const int bw = std::max(1, static_cast<int>(w * r.uniform(0.1, 0.4)));
            const int bh = std::max(1, static_cast<int>(h * r.uniform(0.1, 0.4)));
            const int x = static_cast<int>(r.below(static_cast<std::uint64_t>(w - bw + 1)));
            const int y = static_cast<int>(r.below(static_cast<std::uint64_t>(h - bh + 1)));
            out.boxes.push_back({++id, {x, y, x + bw, y + bh}, r.uniform(), ""});
        }
    }
    return out;
}

RawAnswer OracleVlm::chat(const ChatRequest& req) {
    const Episode& ep = req.query.episode();
    const auto& instances = ep.query.instances;
    std::string text;

    if (req.prompt.kind == PromptKind::propose_boxes) {
        const int w = ep.query.width, h = ep.query.height;
        const double nx = noise_.box_proposal_noise * w, ny = noise_.box_proposal_noise * h;
        json boxes = json::array();
        for (std::size_t i = 0; i < instances.size(); ++i) {
            Rng r = stream(noise_, kProposal, ep, i);
            const auto& b = instances[i].box;
            const double x0 = std::clamp(b.x_min + r.uniform(-nx, nx), 0.0, double(w));
            const double y0 = std::clamp(b.y_min + r.uniform(-ny, ny), 0.0, double(h));
            const double x1 = std::clamp(b.x_max + r.uniform(-nx, nx), 0.0, double(w));
            const double y1 = std::clamp(b.y_max + r.uniform(-ny, ny), 0.0, double(h));
            const BoundingBox box = box_from_real(x0, y0, x1, y1);
            if (!box.fits(w, h)) continue;
            boxes.push_back({box.x_min, box.y_min, box.x_max, box.y_max});
        }
        text = "I can see " + std::to_string(boxes.size()) + " objects.\nANSWER: " +
               json{{"boxes", boxes}}.dump();
        return make_raw_answer(std::move(text));
    }

    Assignment a;
    const int n = ep.n_ways;
    for (const auto& det : req.detections.boxes) {
        double best = 0.0;
        const GroundTruthInstance* match = nullptr;
        for (const auto& inst : instances) {
            const double v = box_iou(det.box, inst.box);
            if (v > best) {
                best = v;
                match = &inst;
            }
        }
        std::optional<int> verdict;
        if (match && best >= kMatchIou && match->class_position > 0) {
            const auto row = noise_.confusion_row(match->class_position, n);
            const double u = stream(noise_, kConfusion, ep, static_cast<std::uint64_t>(det.display_id)).uniform();
            // Diagonal first, then "none", then the other classes; shrinking the
            // diagonal only ever moves draws away from the true class.
            const int truth = match->class_position;
            double acc = row[static_cast<std::size_t>(truth - 1)];
            if (u < acc) {
                verdict = truth;
            } else if (u >= (acc += row[static_cast<std::size_t>(n)])) {
                for (int c = 1; c <= n; ++c) {
                    if (c == truth) continue;
                    verdict = c;  // rounding slack lands on the last other class
                    acc += row[static_cast<std::size_t>(c - 1)];
                    if (u < acc) break;
                }
            }
        }
        a.verdicts[det.display_id] = verdict;
        text += "Box " + std::to_string(det.display_id) + " matches " +
                (verdict ? ep.labels[static_cast<std::size_t>(*verdict - 1)] : std::string("none of the exemplars")) + ".\n";
    }
    text += serialize_answer(a, static_cast<int>(req.detections.boxes.size()), ep.labels);
    return make_raw_answer(std::move(text));
}

ScriptedVlm ScriptedVlm::from_file(const std::filesystem::path& path) {
    const json j = json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw FixtureError("script file is not a JSON object: " + path.string());
    std::map<std::string, std::string> responses;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_string()) throw FixtureError("script entry " + k + " is not a string");
        responses[k] = v.get<std::string>();
    }
    return ScriptedVlm(std::move(responses));
}

RawAnswer ScriptedVlm::chat(const ChatRequest& req) {
    const auto key = prompt_hash(req.prompt);
    auto it = responses_.find(key);
    if (it == responses_.end()) throw FixtureError("no scripted response for prompt " + key);
    return make_raw_answer(it->second);
}

BinaryMask SimulatedSegmenter::segment(QueryContext& query, const BoundingBox& box) {
    const Episode& ep = query.episode();
    const int w = query.width(), h = query.height();
    if (!box.fits(w, h)) throw BoundsError("segment: box " + to_string(box) + " outside the image");
    const GroundTruthInstance* best = nullptr;
    double best_iou = 0.0;
    for (const auto& inst : ep.query.instances) {
        std::uint64_t inside = 0;
        const BoundingBox clip{std::max(box.x_min, inst.box.x_min), std::max(box.y_min, inst.box.y_min),
                               std::min(box.x_max, inst.box.x_max), std::min(box.y_max, inst.box.y_max)};
        if (!clip.valid()) continue;
        for (int y = clip.y_min; y < clip.y_max; ++y)
            for (int x = clip.x_min; x < clip.x_max; ++x) inside += inst.mask.test(x, y);
        if (inside == 0) continue;
        const double u = static_cast<double>(box.area()) + static_cast<double>(inst.mask.popcount()) -
                         static_cast<double>(inside);
        const double v = static_cast<double>(inside) / u;
        if (v > best_iou) {
            best_iou = v;
            best = &inst;
        }
    }
    if (!best) return BinaryMask(w, h);
    BinaryMask m = clip_to_box(best->mask, box);
    if (noise_.boundary_noise > 0) {
        const std::uint64_t item = mix_key({static_cast<std::uint64_t>(box.x_min), static_cast<std::uint64_t>(box.y_min),
                                            static_cast<std::uint64_t>(box.x_max), static_cast<std::uint64_t>(box.y_max)});
        const bool grow = stream(noise_, kMorph, ep, item).bernoulli(0.5);
        m = grow ? dilate(m, noise_.boundary_noise) : erode(m, noise_.boundary_noise);
    }
    return m;
}

BinaryMask BoxFillSegmenter::segment(QueryContext& query, const BoundingBox& box) {
    return mask_from_box(box, query.width(), query.height());
}

BackendSet oracle_backends() {
    return {std::make_shared<SimulatedDetector>(), std::make_shared<OracleVlm>(),
            std::make_shared<SimulatedSegmenter>(), nullptr};
}

BackendSet noisy_backends(const NoiseProfile& noise) {
    return {std::make_shared<SimulatedDetector>(noise), std::make_shared<OracleVlm>(noise),
            std::make_shared<SimulatedSegmenter>(noise), nullptr};
}

}  // namespace vise
