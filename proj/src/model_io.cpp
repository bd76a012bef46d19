#include "cprobe/model_io.hpp"

#include <json.hpp>

#include "cprobe/errors.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/tensor_blob.hpp"
#include "cprobe/zip.hpp"

namespace cprobe {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "cprobe-model";
constexpr int kVersion = 1;

template <class T>
T field(const json& obj, const char* key, const std::string& where) {
    if (!obj.contains(key)) throw ValidationError(where + ": missing field '" + key + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(where + ": field '" + key + "' has the wrong type");
    }
}

Tensor tensor_ref(const json& layer, const char* key, const std::vector<TensorEntry>& entries,
                  const std::string& where) {
    const auto idx = field<std::size_t>(layer, key, where);
    if (idx >= entries.size())
        throw ValidationError(where + ": tensor reference " + std::to_string(idx) + " out of range (" +
                              std::to_string(entries.size()) + " entries)");
    return to_tensor(entries[idx]);
}

}  // namespace

ModelGraph parse_model(const std::string& manifest_json, const std::string& tensor_bytes) {
    json doc;
    try {
        doc = json::parse(manifest_json);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("model.json: ") + e.what(), e.byte);
    }
    const auto entries = read_tensor_blob(tensor_bytes);

    if (doc.value("format", std::string{}) != kFormat) throw ValidationError("model.json: not a cprobe model");
    if (doc.value("version", 0) != kVersion)
        throw UnsupportedVersionError("model.json: unsupported version " + doc.value("version", json(0)).dump());

    const auto shape = field<std::vector<std::size_t>>(doc, "input_shape", "model.json");
    if (shape.size() != 3) throw ValidationError("model.json: input_shape must be (height, width, channels)");
    const json norm = doc.value("normalization", json::object());
    auto mean = norm.contains("mean") ? norm["mean"].get<std::vector<double>>() : std::vector<double>(shape[2], 0.0);
    auto std_ = norm.contains("std") ? norm["std"].get<std::vector<double>>() : std::vector<double>(shape[2], 1.0);
    auto classes = field<std::vector<std::string>>(doc, "class_names", "model.json");

    std::vector<LayerSpec> layers;
    const json& jl = doc.at("layers");
    for (std::size_t i = 0; i < jl.size(); ++i) {
        const json& l = jl[i];
        LayerSpec spec;
        spec.name = field<std::string>(l, "name", "layer #" + std::to_string(i));
        const std::string where = "layer '" + spec.name + "'";
        spec.kind = layer_kind_from_string(field<std::string>(l, "kind", where));
        switch (spec.kind) {
            case LayerKind::convolution: {
                ConvParams p;
                const auto kernel = field<std::vector<std::size_t>>(l, "kernel", where);
                if (kernel.size() != 2) throw ValidationError(where + ": kernel must be [h, w]");
                p.kernel_h = kernel[0];
                p.kernel_w = kernel[1];
                p.in_channels = field<std::size_t>(l, "in_channels", where);
                p.out_channels = field<std::size_t>(l, "out_channels", where);
                p.stride = l.value("stride", std::size_t{1});
                p.padding = l.value("padding", std::size_t{0});
                p.weights = tensor_ref(l, "weights", entries, where);
                p.bias = tensor_ref(l, "bias", entries, where);
                spec.params = std::move(p);
                break;
            }
            case LayerKind::maxpool: {
                PoolParams p;
                p.window = field<std::size_t>(l, "window", where);
                p.stride = l.value("stride", p.window);
                spec.params = p;
                break;
            }
            case LayerKind::dense: {
                DenseParams p;
                p.in_features = field<std::size_t>(l, "in_features", where);
                p.out_features = field<std::size_t>(l, "out_features", where);
                p.weights = tensor_ref(l, "weights", entries, where);
                p.bias = tensor_ref(l, "bias", entries, where);
                spec.params = std::move(p);
                break;
            }
            default:
                break;
        }
        layers.push_back(std::move(spec));
    }
    return ModelGraph(std::move(layers), {shape[0], shape[1], shape[2]}, std::move(mean), std::move(std_),
                      std::move(classes));
}

ModelGraph load_model(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) return parse_model(read_file(path / "model.json"), read_file(path / "tensors.bin"));
    if (!fs::exists(path)) throw IoError("model not found: " + path.string());
    const std::string bytes = read_file(path);
    if (!looks_like_zip(bytes)) throw FormatError("model file is neither a directory nor a zip archive", 0);
    auto files = read_zip(bytes);
    if (!files.count("model.json") || !files.count("tensors.bin"))
        throw FormatError("zip archive must contain model.json and tensors.bin", 0);
    return parse_model(files["model.json"], files["tensors.bin"]);
}

void save_model(const ModelGraph& model, const std::filesystem::path& path, ModelContainer container) {
    TensorBlobWriter blob;
    json layers = json::array();
    for (const auto& layer : model.layers()) {
        json l = {{"name", layer.name}, {"kind", std::string(to_string(layer.kind))}};
        if (const auto* p = std::get_if<ConvParams>(&layer.params)) {
            l["kernel"] = {p->kernel_h, p->kernel_w};
            l["in_channels"] = p->in_channels;
            l["out_channels"] = p->out_channels;
            l["stride"] = p->stride;
            l["padding"] = p->padding;
            l["weights"] = blob.add(p->weights);
            l["bias"] = blob.add(p->bias);
        } else if (const auto* p = std::get_if<PoolParams>(&layer.params)) {
            l["window"] = p->window;
            l["stride"] = p->stride;
        } else if (const auto* p = std::get_if<DenseParams>(&layer.params)) {
            l["in_features"] = p->in_features;
            l["out_features"] = p->out_features;
            l["weights"] = blob.add(p->weights);
            l["bias"] = blob.add(p->bias);
        }
        layers.push_back(std::move(l));
    }
    const auto& s = model.input_shape();
    json doc = {{"format", kFormat},
                {"version", kVersion},
                {"input_shape", {s[0], s[1], s[2]}},
                {"normalization", {{"mean", model.norm_mean()}, {"std", model.norm_std()}}},
                {"class_names", model.class_names()},
                {"layers", std::move(layers)}};
    const std::string manifest = doc.dump(2) + "\n";

    if (container == ModelContainer::directory) {
        std::filesystem::create_directories(path);
        write_file_atomic(path / "model.json", manifest);
        write_file_atomic(path / "tensors.bin", blob.bytes());
    } else {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        write_file_atomic(path, write_zip({{"model.json", manifest}, {"tensors.bin", blob.bytes()}}));
    }
}

}  // namespace cprobe
