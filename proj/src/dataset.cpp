#include "vise/dataset.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"
#include "vise/errors.hpp"
#include "vise/rng.hpp"

namespace vise {

using nlohmann::json;
using nlohmann::ordered_json;

bool ImageRecord::contains_class(int class_id) const {
    return std::any_of(instances.begin(), instances.end(),
                       [&](const InstanceRecord& r) { return r.class_id == class_id; });
}

const ClassRecord& DatasetIndex::class_by_id(int id) const {
    auto it = class_pos_.find(id);
    if (it == class_pos_.end()) throw ManifestError("unknown class id " + std::to_string(id));
    return classes[it->second];
}

const std::vector<std::size_t>& DatasetIndex::images_with_class(int class_id) const {
    static const std::vector<std::size_t> none;
    auto it = by_class_.find(class_id);
    return it == by_class_.end() ? none : it->second;
}

void DatasetIndex::reindex() {
    class_pos_.clear();
    by_class_.clear();
    for (std::size_t i = 0; i < classes.size(); ++i) class_pos_[classes[i].id] = i;
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::set<int> seen;
        for (const auto& inst : images[i].instances)
            if (seen.insert(inst.class_id).second) by_class_[inst.class_id].push_back(i);
    }
}

std::vector<std::vector<int>> default_folds(FoldScheme scheme, const std::vector<int>& class_ids,
                                            int n_folds) {
    if (n_folds <= 0) throw ManifestError("fold count must be positive");
    const int count = static_cast<int>(class_ids.size());
    n_folds = std::min(n_folds, std::max(count, 1));
    std::vector<std::vector<int>> folds(static_cast<std::size_t>(n_folds));
    if (scheme == FoldScheme::coco) {
        for (int i = 0; i < count; ++i) folds[i % n_folds].push_back(class_ids[i]);
        return folds;
    }
    const int base = count / n_folds;
    const int extra = count % n_folds;
    int next = 0;
    for (int f = 0; f < n_folds; ++f) {
        const int size = base + (f < extra ? 1 : 0);
        for (int i = 0; i < size; ++i) folds[f].push_back(class_ids[next++]);
    }
    return folds;
}

namespace {

[[noreturn]] void bad(const std::string& where, const std::string& what) {
    throw ManifestError(where + ": " + what);
}

int get_int(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_number_integer()) bad(where, std::string("missing integer '") + key + "'");
    return j[key].get<int>();
}

std::string get_string(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_string()) bad(where, std::string("missing string '") + key + "'");
    return j[key].get<std::string>();
}

std::string id_text(const json& j) {
    if (j.is_string()) return j.get<std::string>();
    return j.dump();
}

}  // namespace

void validate(const DatasetIndex& index) {
    if (index.classes.empty()) throw ManifestError("manifest declares no classes");
    std::set<int> ids;
    for (const auto& c : index.classes) {
        if (c.id <= 0) bad("class " + std::to_string(c.id), "class ids must be positive");
        if (!ids.insert(c.id).second) bad("class " + std::to_string(c.id), "duplicate class id");
    }
    std::set<int> in_folds;
    for (std::size_t f = 0; f < index.folds.size(); ++f) {
        const std::string where = "fold " + std::to_string(f);
        if (index.folds[f].empty()) bad(where, "empty fold");
        for (int id : index.folds[f]) {
            if (!ids.count(id)) bad(where, "references unknown class id " + std::to_string(id));
            if (!in_folds.insert(id).second)
                bad(where, "class id " + std::to_string(id) + " appears in more than one fold");
        }
    }
    std::set<std::string> image_ids;
    for (const auto& img : index.images) {
        const std::string where = "image '" + img.image_id + "'";
        if (!image_ids.insert(img.image_id).second) bad(where, "duplicate image id");
        if (img.width <= 0 || img.height <= 0) bad(where, "non-positive dimensions");
        for (std::size_t i = 0; i < img.instances.size(); ++i) {
            const auto& inst = img.instances[i];
            const std::string iw = where + " instance " + std::to_string(i);
            if (!ids.count(inst.class_id))
                bad(iw, "references unknown class id " + std::to_string(inst.class_id));
            if (!inst.box.fits(img.width, img.height))
                bad(iw, "box " + to_string(inst.box) + " outside the image");
            if (inst.mask.width != img.width || inst.mask.height != img.height)
                bad(iw, "mask size " + std::to_string(inst.mask.height) + "x" +
                            std::to_string(inst.mask.width) + " differs from the image");
            std::uint64_t sum = 0;
            for (std::size_t c = 0; c < inst.mask.counts.size(); ++c) {
                if (c > 0 && inst.mask.counts[c] == 0) bad(iw, "mask has an interior zero run");
                sum += inst.mask.counts[c];
            }
            if (sum != static_cast<std::uint64_t>(img.width) * static_cast<std::uint64_t>(img.height))
                bad(iw, "mask counts do not cover the image");
            if (inst.mask.counts.size() < 2) bad(iw, "mask has no foreground");
        }
    }
}

DatasetIndex parse_manifest(std::string_view json_text, const std::filesystem::path& root) {
    const json doc = json::parse(json_text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw ManifestError("manifest is not a JSON object");

    DatasetIndex index;
    index.root = root;
    index.name = doc.contains("name") && doc["name"].is_string() ? doc["name"].get<std::string>() : "";

    if (!doc.contains("classes") || !doc["classes"].is_array()) throw ManifestError("manifest: missing 'classes' array");
    for (std::size_t i = 0; i < doc["classes"].size(); ++i) {
        const auto& c = doc["classes"][i];
        const std::string where = "class #" + std::to_string(i);
        if (!c.is_object()) bad(where, "not an object");
        ClassRecord rec{get_int(c, "id", where), get_string(c, "label", where), std::nullopt};
        if (c.contains("color")) {
            const auto& col = c["color"];
            if (!col.is_array() || col.size() != 3) bad(where, "color must be [r,g,b]");
            Rgb rgb{};
            for (int k = 0; k < 3; ++k) {
                if (!col[k].is_number_integer() || col[k].get<int>() < 0 || col[k].get<int>() > 255)
                    bad(where, "color channels must be 0..255");
                rgb[k] = static_cast<std::uint8_t>(col[k].get<int>());
            }
            rec.color = rgb;
        }
        index.classes.push_back(std::move(rec));
    }

    std::vector<int> class_ids;
    for (const auto& c : index.classes) class_ids.push_back(c.id);
    const json folds = doc.contains("folds") ? doc["folds"] : json("pascal");
    if (folds.is_string()) {
        const auto scheme = folds.get<std::string>();
        if (scheme == "pascal")
            index.folds = default_folds(FoldScheme::pascal, class_ids);
        else if (scheme == "coco")
            index.folds = default_folds(FoldScheme::coco, class_ids);
        else
            throw ManifestError("folds: unknown built-in scheme '" + scheme + "'");
    } else if (folds.is_array()) {
        for (std::size_t f = 0; f < folds.size(); ++f) {
            if (!folds[f].is_array()) bad("fold " + std::to_string(f), "must be an array of class ids");
            std::vector<int> ids;
            for (const auto& id : folds[f]) {
                if (!id.is_number_integer()) bad("fold " + std::to_string(f), "class ids must be integers");
                ids.push_back(id.get<int>());
            }
            index.folds.push_back(std::move(ids));
        }
    } else {
        throw ManifestError("folds: expected an array or a built-in scheme name");
    }

    if (!doc.contains("images") || !doc["images"].is_array()) throw ManifestError("manifest: missing 'images' array");
    for (std::size_t i = 0; i < doc["images"].size(); ++i) {
        const auto& im = doc["images"][i];
        std::string where = "image #" + std::to_string(i);
        if (!im.is_object()) bad(where, "not an object");
        ImageRecord rec;
        if (!im.contains("image_id")) bad(where, "missing 'image_id'");
        rec.image_id = id_text(im["image_id"]);
        where = "image '" + rec.image_id + "'";
        rec.path = get_string(im, "path", where);
        rec.width = get_int(im, "width", where);
        rec.height = get_int(im, "height", where);
        if (im.contains("instances")) {
            if (!im["instances"].is_array()) bad(where, "'instances' must be an array");
            for (std::size_t k = 0; k < im["instances"].size(); ++k) {
                const auto& in = im["instances"][k];
                const std::string iw = where + " instance " + std::to_string(k);
                if (!in.is_object()) bad(iw, "not an object");
                InstanceRecord inst;
                inst.class_id = get_int(in, "class_id", iw);
                if (!in.contains("box") || !in["box"].is_array() || in["box"].size() != 4)
                    bad(iw, "box must be [x_min,y_min,x_max,y_max]");
                for (const auto& v : in["box"])
                    if (!v.is_number()) bad(iw, "box coordinates must be numbers");
                inst.box = box_from_real(in["box"][0].get<double>(), in["box"][1].get<double>(),
                                         in["box"][2].get<double>(), in["box"][3].get<double>());
                if (!in.contains("mask")) bad(iw, "missing mask");
                try {
                    inst.mask = rle_from_text(in["mask"].dump());
                } catch (const CodecError& e) {
                    bad(iw, e.what());
                }
                rec.instances.push_back(std::move(inst));
            }
        }
        index.images.push_back(std::move(rec));
    }
    validate(index);
    index.reindex();
    return index;
}

DatasetIndex load_manifest(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const IoError& e) {
        throw ManifestError(e.what());
    }
    return parse_manifest(text, path.parent_path());
}

std::string manifest_to_json(const DatasetIndex& index) {
    ordered_json doc;
    doc["name"] = index.name;
    doc["classes"] = ordered_json::array();
    for (const auto& c : index.classes) {
        ordered_json cj;
        cj["id"] = c.id;
        cj["label"] = c.label;
        if (c.color) cj["color"] = {(*c.color)[0], (*c.color)[1], (*c.color)[2]};
        doc["classes"].push_back(cj);
    }
    doc["folds"] = index.folds;
    doc["images"] = ordered_json::array();
    for (const auto& im : index.images) {
        ordered_json ij;
        ij["image_id"] = im.image_id;
        ij["path"] = im.path;
        ij["width"] = im.width;
        ij["height"] = im.height;
        ij["instances"] = ordered_json::array();
        for (const auto& inst : im.instances) {
            ordered_json o;
            o["class_id"] = inst.class_id;
            o["box"] = {inst.box.x_min, inst.box.y_min, inst.box.x_max, inst.box.y_max};
            o["mask"] = ordered_json::parse(rle_to_text(inst.mask));
            ij["instances"].push_back(o);
        }
        doc["images"].push_back(ij);
    }
    return doc.dump(1) + "\n";
}

void rebuild_scored_truth(QueryRecord& query, const std::vector<bool>& dropped) {
    for (auto& m : query.class_masks) m = BinaryMask(query.width, query.height);
    for (std::size_t i = 0; i < query.instances.size(); ++i) {
        const auto& inst = query.instances[i];
        if (inst.class_position == 0 || (i < dropped.size() && dropped[i])) continue;
        auto& m = query.class_masks[static_cast<std::size_t>(inst.class_position - 1)];
        m = mask_union(m, inst.mask);
    }
    query.labels.clear();
    for (std::size_t n = 0; n < query.class_masks.size(); ++n)
        if (!query.class_masks[n].empty()) query.labels.push_back(static_cast<int>(n + 1));
}

namespace {

constexpr std::uint64_t kSamplerStream = 0x5a4d504c45ULL;

template <class T>
void partial_shuffle(std::vector<T>& v, std::size_t k, Rng& rng) {
    for (std::size_t i = 0; i < k && i < v.size(); ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(v.size() - i));
        std::swap(v[i], v[j]);
    }
}

}  // namespace

Episode sample_episode(const DatasetIndex& index, int fold, int n_ways, int k_shots,
                       std::uint64_t seed, std::uint64_t episode_index,
                       const SamplerOptions& options) {
    if (fold < 0 || fold >= static_cast<int>(index.folds.size()))
        throw SamplingError("fold " + std::to_string(fold) + " does not exist (dataset has " +
                            std::to_string(index.folds.size()) + ")");
    if (n_ways <= 0 || k_shots <= 0) throw SamplingError("n_ways and k_shots must be positive");
    const auto& fold_classes = index.folds[static_cast<std::size_t>(fold)];
    if (static_cast<int>(fold_classes.size()) < n_ways)
        throw SamplingError("fold " + std::to_string(fold) + " has " +
                            std::to_string(fold_classes.size()) + " classes, need " +
                            std::to_string(n_ways));

    Rng rng{kSamplerStream, seed, static_cast<std::uint64_t>(fold),
            static_cast<std::uint64_t>(n_ways), static_cast<std::uint64_t>(k_shots), episode_index};

    std::vector<int> classes = fold_classes;
    partial_shuffle(classes, static_cast<std::size_t>(n_ways), rng);
    classes.resize(static_cast<std::size_t>(n_ways));

    auto holds_episode_class = [&](const ImageRecord& im) {
        return std::any_of(classes.begin(), classes.end(), [&](int c) { return im.contains_class(c); });
    };
    const bool negative = options.negative_query_rate > 0.0 && rng.bernoulli(options.negative_query_rate);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < index.images.size(); ++i)
        if (holds_episode_class(index.images[i]) != negative) candidates.push_back(i);
    if (candidates.empty() && negative) {
        for (std::size_t i = 0; i < index.images.size(); ++i)
            if (holds_episode_class(index.images[i])) candidates.push_back(i);
    }
    if (candidates.empty()) throw SamplingError("no query candidates for the episode classes");

    // A query can starve a class of support images on tiny datasets; redraw a bounded
    // number of times before giving up.
    constexpr int kMaxQueryDraws = 32;
    for (int attempt = 0; attempt < kMaxQueryDraws; ++attempt) {
        const std::size_t query_idx = candidates[rng.below(candidates.size())];
        std::set<std::size_t> used{query_idx};
        std::vector<std::vector<std::size_t>> picks;
        bool feasible = true;
        for (int cls : classes) {
            std::vector<std::size_t> pool;
            for (std::size_t i : index.images_with_class(cls))
                if (!used.count(i)) pool.push_back(i);
            if (static_cast<int>(pool.size()) < k_shots) {
                feasible = false;
                break;
            }
            partial_shuffle(pool, static_cast<std::size_t>(k_shots), rng);
            pool.resize(static_cast<std::size_t>(k_shots));
            used.insert(pool.begin(), pool.end());
            picks.push_back(std::move(pool));
        }
        if (!feasible) continue;

        Episode ep;
        ep.fold = fold;
        ep.episode_index = episode_index;
        ep.n_ways = n_ways;
        ep.k_shots = k_shots;
        ep.class_ids = classes;
        for (int cls : classes) ep.labels.push_back(index.class_by_id(cls).label);
        for (int n = 0; n < n_ways; ++n) {
            for (std::size_t img_idx : picks[n]) {
                const auto& im = index.images[img_idx];
                SupportExample ex;
                ex.class_position = n + 1;
                ex.image_id = im.image_id;
                ex.image_path = index.image_path(im);
                ex.label = ep.labels[n];
                BinaryMask cls_mask(im.width, im.height);
                for (const auto& inst : im.instances)
                    if (inst.class_id == classes[n]) cls_mask = mask_union(cls_mask, rle_decode(inst.mask));
                ex.mask = rle_encode(cls_mask);
                ep.support.push_back(std::move(ex));
            }
        }

        const auto& qi = index.images[query_idx];
        QueryRecord& q = ep.query;
        q.image_id = qi.image_id;
        q.image_path = index.image_path(qi);
        q.width = qi.width;
        q.height = qi.height;
        q.class_masks.assign(static_cast<std::size_t>(n_ways), BinaryMask(qi.width, qi.height));
        for (const auto& inst : qi.instances) {
            GroundTruthInstance g;
            const auto it = std::find(classes.begin(), classes.end(), inst.class_id);
            g.class_position = it == classes.end() ? 0 : static_cast<int>(it - classes.begin()) + 1;
            g.class_id = inst.class_id;
            g.box = inst.box;
            g.mask = rle_decode(inst.mask);
            q.instances.push_back(std::move(g));
        }
        rebuild_scored_truth(q, {});
        return ep;
    }
    throw SamplingError("cannot find " + std::to_string(k_shots) +
                        " support images per class distinct from the query in fold " +
                        std::to_string(fold));
}

}  // namespace vise
