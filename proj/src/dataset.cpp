#include "cprobe/dataset.hpp"

#include <algorithm>
#include <json.hpp>
#include <unordered_set>

#include "cprobe/errors.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/png_io.hpp"
#include "cprobe/rng.hpp"

namespace cprobe {

using nlohmann::json;

std::string to_string(Split split) { return split == Split::probe ? "probe" : "eval"; }

const InstanceMeta& DatasetManifest::find(const std::string& instance_id) const {
    for (const auto& inst : instances)
        if (inst.instance_id == instance_id) return inst;
    throw LookupError("unknown instance '" + instance_id + "'");
}

std::vector<const InstanceMeta*> DatasetManifest::split_instances(Split split) const {
    std::vector<const InstanceMeta*> out;
    for (const auto& inst : instances)
        if (inst.split == split) out.push_back(&inst);
    return out;
}

DatasetManifest parse_manifest(const std::string& json_text, std::filesystem::path root) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("dataset.json: ") + e.what(), e.byte);
    }
    DatasetManifest m;
    m.root = std::move(root);
    try {
        m.class_names = doc.at("class_names").get<std::vector<std::string>>();
        const auto shape = doc.at("image_shape").get<std::vector<std::size_t>>();
        if (shape.size() != 3 || shape[0] == 0 || shape[1] == 0 || (shape[2] != 1 && shape[2] != 3))
            throw ValidationError("dataset.json: image_shape must be [height, width, 1|3]");
        m.image_shape = {shape[0], shape[1], shape[2]};
        std::unordered_set<std::string> ids;
        for (const auto& j : doc.at("instances")) {
            InstanceMeta inst;
            inst.instance_id = j.at("id").get<std::string>();
            inst.path = j.at("path").get<std::string>();
            const auto label = j.at("label").get<long long>();
            const auto split = j.at("split").get<std::string>();
            if (label < 0 || static_cast<std::size_t>(label) >= m.class_names.size())
                throw ValidationError("instance '" + inst.instance_id + "': label " + std::to_string(label) +
                                      " out of range for " + std::to_string(m.class_names.size()) + " classes");
            inst.label = static_cast<std::size_t>(label);
            if (split == "probe")
                inst.split = Split::probe;
            else if (split == "eval")
                inst.split = Split::eval;
            else
                throw ValidationError("instance '" + inst.instance_id + "': split must be probe or eval");
            if (!ids.insert(inst.instance_id).second)
                throw ValidationError("instance '" + inst.instance_id + "': duplicate id");
            m.instances.push_back(std::move(inst));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("dataset.json: ") + e.what());
    }
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    const fs::path file = fs::is_directory(path) ? path / "dataset.json" : path;
    if (!fs::exists(file)) throw IoError("dataset manifest not found: " + file.string());
    return parse_manifest(read_file(file), file.parent_path());
}

std::vector<InstanceMeta> sample_class_images(const DatasetManifest& manifest, std::size_t class_k, std::size_t n,
                                              std::uint64_t seed) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < manifest.instances.size(); ++i) {
        const auto& inst = manifest.instances[i];
        if (inst.label == class_k && inst.split == Split::probe) pool.push_back(i);
    }
    if (pool.empty()) {
        const std::string name =
            class_k < manifest.class_names.size() ? manifest.class_names[class_k] : std::to_string(class_k);
        throw EmptyClassError("class '" + name + "' has no probe-split instances");
    }
    const std::size_t take = std::min(n, pool.size());
    Rng rng(derive_seed(seed, {class_k}));
    // Partial Fisher-Yates: the first `take` slots become the sample.
    for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    pool.resize(take);
    std::sort(pool.begin(), pool.end());
    std::vector<InstanceMeta> out;
    out.reserve(take);
    for (std::size_t i : pool) out.push_back(manifest.instances[i]);
    return out;
}

Tensor load_image(const DatasetManifest& manifest, const InstanceMeta& instance) {
    Tensor img = read_png(manifest.resolve(instance));
    const auto& want = manifest.image_shape;
    if (img.shape()[0] != want[0] || img.shape()[1] != want[1])
        throw ValidationError("instance '" + instance.instance_id + "': image is " + shape_string(img.shape()) +
                              ", dataset expects " + shape_string({want[0], want[1], want[2]}));
    const std::size_t have_c = img.shape()[2];
    if (have_c == want[2]) return img;
    if (have_c == 1) {
        Tensor out({want[0], want[1], want[2]});
        for (std::size_t y = 0; y < want[0]; ++y)
            for (std::size_t x = 0; x < want[1]; ++x)
                for (std::size_t c = 0; c < want[2]; ++c) out.at(y, x, c) = img.at(y, x, 0);
        return out;
    }
    throw ValidationError("instance '" + instance.instance_id + "': has " + std::to_string(have_c) +
                          " channels, dataset expects " + std::to_string(want[2]));
}

std::vector<double> compute_channel_means(const DatasetManifest& manifest) {
    const std::size_t c = manifest.image_shape[2];
    std::vector<double> sum(c, 0.0);
    std::size_t pixels = 0;
    for (const auto* inst : manifest.split_instances(Split::probe)) {
        const Tensor img = load_image(manifest, *inst);
        const auto v = img.values();
        for (std::size_t i = 0; i < v.size(); ++i) sum[i % c] += v[i];
        pixels += img.size() / c;
    }
    if (pixels == 0) return std::vector<double>(c, 0.5);
    for (double& s : sum) s /= static_cast<double>(pixels);
    return sum;
}

}  // namespace cprobe
