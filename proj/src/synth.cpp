#include "vise/synth.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "vise/dataset.hpp"
#include "vise/errors.hpp"
#include "vise/mask.hpp"
#include "vise/rng.hpp"

namespace vise {

using nlohmann::json;

namespace {

// Mid-tone fills, none of which coincide with the saturated overlay palette.
constexpr Rgb kFills[] = {
    {214, 96, 77},  {72, 160, 110}, {80, 110, 200}, {200, 170, 60}, {150, 90, 180},
    {60, 170, 180}, {180, 120, 80}, {120, 180, 60}, {220, 130, 170}, {110, 110, 40},
    {40, 90, 120},  {170, 60, 110}, {140, 200, 200}, {90, 50, 30},  {200, 200, 140},
    {60, 60, 160},
};

Shape shape_from_name(const std::string& s) {
    if (s == "rectangle") return Shape::rectangle;
    if (s == "diamond") return Shape::diamond;
    if (s == "cross") return Shape::cross;
    throw ConfigError("scene spec: unknown shape '" + s + "'");
}

BinaryMask rasterize(Shape shape, const BoundingBox& b, int width, int height) {
    BinaryMask m(width, height);
    const double cx = (b.x_min + b.x_max - 1) / 2.0;
    const double cy = (b.y_min + b.y_max - 1) / 2.0;
    const double rx = b.width() / 2.0;
    const double ry = b.height() / 2.0;
    const int bar_w = std::max(1, b.width() / 3);
    const int bar_h = std::max(1, b.height() / 3);
    const int bar_x0 = b.x_min + (b.width() - bar_w) / 2;
    const int bar_y0 = b.y_min + (b.height() - bar_h) / 2;
    for (int y = b.y_min; y < b.y_max; ++y) {
        for (int x = b.x_min; x < b.x_max; ++x) {
            bool on = false;
            switch (shape) {
                case Shape::rectangle: on = true; break;
                case Shape::diamond: on = std::abs(x - cx) / rx + std::abs(y - cy) / ry <= 1.0; break;
                case Shape::cross:
                    on = (x >= bar_x0 && x < bar_x0 + bar_w) || (y >= bar_y0 && y < bar_y0 + bar_h);
                    break;
            }
            if (on) m.set(x, y);
        }
    }
    return m;
}

bool boxes_touch(const BoundingBox& a, const BoundingBox& b, int gap) {
    return a.x_min < b.x_max + gap && b.x_min < a.x_max + gap && a.y_min < b.y_max + gap &&
           b.y_min < a.y_max + gap;
}

struct Placed {
    int class_index;
    BoundingBox box;
    BinaryMask shape;
};

}  // namespace

std::vector<SynthClass> default_synth_classes(int n) {
    std::vector<SynthClass> out;
    constexpr Shape shapes[] = {Shape::rectangle, Shape::diamond, Shape::cross};
    for (int i = 0; i < n; ++i) {
        SynthClass c;
        c.label = "class" + std::to_string(i + 1);
        c.shape = shapes[i % 3];
        if (i < static_cast<int>(std::size(kFills))) {
            c.color = kFills[i];
        } else {
            const auto h = splitmix64(static_cast<std::uint64_t>(i));
            c.color = {static_cast<std::uint8_t>(40 + h % 170), static_cast<std::uint8_t>(40 + (h >> 8) % 170),
                       static_cast<std::uint8_t>(40 + (h >> 16) % 170)};
        }
        out.push_back(c);
    }
    return out;
}

SceneSpec parse_scene_spec(std::string_view json_text) {
    const json j = json::parse(json_text, nullptr, false, true);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("scene spec is not a JSON object");
    SceneSpec s;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j[key].get<std::remove_reference_t<decltype(field)>>();
    };
    try {
        get("name", s.name);
        get("width", s.width);
        get("height", s.height);
        get("images", s.images);
        get("min_instances", s.min_instances);
        get("max_instances", s.max_instances);
        get("classes_per_image", s.classes_per_image);
        get("min_size", s.min_size);
        get("max_size", s.max_size);
        get("folds", s.folds);
        get("allow_overlap", s.allow_overlap);
        if (j.contains("background")) {
            auto bg = j["background"].get<std::vector<int>>();
            if (bg.size() != 3) throw ConfigError("scene spec: background must be [r,g,b]");
            s.background = {static_cast<std::uint8_t>(bg[0]), static_cast<std::uint8_t>(bg[1]),
                            static_cast<std::uint8_t>(bg[2])};
        }
        if (j.contains("classes")) {
            const auto& cl = j["classes"];
            if (cl.is_number_integer()) {
                s.classes = default_synth_classes(cl.get<int>());
            } else {
                const auto defaults = default_synth_classes(static_cast<int>(cl.size()));
                for (std::size_t i = 0; i < cl.size(); ++i) {
                    SynthClass c = defaults[i];
                    if (cl[i].contains("label")) c.label = cl[i]["label"].get<std::string>();
                    if (cl[i].contains("shape")) c.shape = shape_from_name(cl[i]["shape"].get<std::string>());
                    if (cl[i].contains("color")) {
                        auto col = cl[i]["color"].get<std::vector<int>>();
                        if (col.size() != 3) throw ConfigError("scene spec: color must be [r,g,b]");
                        c.color = {static_cast<std::uint8_t>(col[0]), static_cast<std::uint8_t>(col[1]),
                                   static_cast<std::uint8_t>(col[2])};
                    }
                    s.classes.push_back(c);
                }
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("scene spec: ") + e.what());
    }
    return s;
}

SceneSpec load_scene_spec(const std::filesystem::path& path) {
    return parse_scene_spec(read_text_file(path));
}

std::filesystem::path generate_synthetic_dataset(const SceneSpec& spec, std::uint64_t seed,
                                                 const std::filesystem::path& out_dir) {
    const int n_classes = static_cast<int>(spec.classes.size());
    if (n_classes == 0) throw ConfigError("scene spec: zero classes");
    if (spec.images <= 0) throw ConfigError("scene spec: zero images");
    if (spec.width <= 0 || spec.height <= 0) throw ConfigError("scene spec: non-positive image size");
    if (spec.min_size < 3 || spec.max_size < spec.min_size ||
        spec.max_size > std::min(spec.width, spec.height))
        throw ConfigError("scene spec: object size range must satisfy 3 <= min <= max <= image side");
    if (spec.min_instances < 1 || spec.max_instances < spec.min_instances)
        throw ConfigError("scene spec: instance range must satisfy 1 <= min <= max");
    if (spec.classes_per_image > n_classes || spec.classes_per_image > spec.max_instances)
        throw ConfigError("scene spec: classes_per_image exceeds classes or max_instances");
    if (spec.folds < 1 || spec.folds > n_classes) throw ConfigError("scene spec: folds must be in 1..classes");

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

    DatasetIndex index;
    index.name = spec.name;
    index.root = out_dir;
    std::vector<int> ids;
    for (int c = 0; c < n_classes; ++c) {
        index.classes.push_back({c + 1, spec.classes[c].label, spec.classes[c].color});
        ids.push_back(c + 1);
    }
    index.folds = default_folds(FoldScheme::pascal, ids, spec.folds);

    constexpr int kMaxSceneAttempts = 64;
    constexpr int kMaxPlacementAttempts = 400;
    for (int img = 0; img < spec.images; ++img) {
        Rng rng{0x53594e54ULL, seed, static_cast<std::uint64_t>(img)};
        std::vector<Placed> placed;
        bool ok = false;
        for (int attempt = 0; attempt < kMaxSceneAttempts && !ok; ++attempt) {
            placed.clear();
            const int lo = std::max(spec.min_instances, spec.classes_per_image);
            const int count = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_instances - lo + 1)));
            std::vector<int> class_plan;
            if (spec.classes_per_image > 0) {
                std::vector<int> pool(static_cast<std::size_t>(n_classes));
                for (int c = 0; c < n_classes; ++c) pool[c] = c;
                for (int i = 0; i < spec.classes_per_image; ++i) {
                    const std::size_t j = static_cast<std::size_t>(i) + rng.below(pool.size() - static_cast<std::size_t>(i));
                    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
                }
                pool.resize(static_cast<std::size_t>(spec.classes_per_image));
                class_plan = pool;
                while (static_cast<int>(class_plan.size()) < count)
                    class_plan.push_back(pool[rng.below(pool.size())]);
            } else {
                for (int i = 0; i < count; ++i) class_plan.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n_classes))));
            }
            bool placed_all = true;
            for (int cls : class_plan) {
                bool done = false;
                for (int t = 0; t < kMaxPlacementAttempts && !done; ++t) {
                    const int span = spec.max_size - spec.min_size + 1;
                    const int w = spec.min_size + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
                    const int h = spec.min_size + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
                    const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.width - w + 1)));
                    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.height - h + 1)));
                    const BoundingBox box{x, y, x + w, y + h};
                    if (!spec.allow_overlap &&
                        std::any_of(placed.begin(), placed.end(),
                                    [&](const Placed& p) { return boxes_touch(p.box, box, 1); }))
                        continue;
                    placed.push_back({cls, box, rasterize(spec.classes[cls].shape, box, spec.width, spec.height)});
                    done = true;
                }
                if (!done) {
                    placed_all = false;
                    break;
                }
            }
            if (!placed_all) continue;
            // Later shapes occlude earlier ones; every visible remainder must be non-empty.
            ok = true;
            for (std::size_t i = 0; i < placed.size() && ok; ++i) {
                for (std::size_t j = i + 1; j < placed.size(); ++j)
                    placed[i].shape = mask_difference(placed[i].shape, placed[j].shape);
                ok = !placed[i].shape.empty();
            }
        }
        if (!ok)
            throw ConfigError("scene spec: cannot place the requested objects in image " +
                              std::to_string(img) + "; relax sizes or counts");

        Image image(spec.width, spec.height, spec.background);
        ImageRecord rec;
        char name[32];
        std::snprintf(name, sizeof name, "img_%05d", img);
        rec.image_id = name;
        rec.path = std::string("images/") + name + ".png";
        rec.width = spec.width;
        rec.height = spec.height;
        for (const auto& p : placed) {
            const Rgb color = spec.classes[p.class_index].color;
            for (int y = p.box.y_min; y < p.box.y_max; ++y)
                for (int x = p.box.x_min; x < p.box.x_max; ++x)
                    if (p.shape.test(x, y)) image.put(x, y, color);
            rec.instances.push_back({p.class_index + 1, p.shape.bounds(), rle_encode(p.shape)});
        }
        write_png(out_dir / rec.path, image);
        index.images.push_back(std::move(rec));
    }

    validate(index);
    const auto manifest = out_dir / "manifest.json";
    write_file_atomic(manifest, manifest_to_json(index));
    return manifest;
}

}  // namespace vise
