#include "cprobe/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>

#include "cprobe/errors.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/model_io.hpp"
#include "cprobe/png_io.hpp"
#include "cprobe/rng.hpp"

namespace cprobe::fixture {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kStripeBase[3] = {0.1, 0.3, 0.3};  // thin red lines run across this base
constexpr double kSpotBase[3] = {0.2, 0.2, 0.0};
constexpr double kPlain[3] = {0.6, 0.4, 0.3};
constexpr double kSnow[3] = {0.9, 0.9, 0.9};
constexpr double kGrass[3] = {0.2, 0.7, 0.2};
constexpr double kNoise = 0.03;

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

FixtureImage make_image(std::size_t class_k, std::size_t index, bool majority, const FixtureParams& params) {
    Rng rng(derive_seed(params.seed, {class_k, index}));
    const std::size_t n = params.image_size;
    const bool snow = (class_k == 2) != majority;  // plain lives on grass, the others on snow

    const std::size_t h = 14 + rng.below(9), w = 14 + rng.below(9);
    const std::size_t top = rng.below(n - h + 1), left = rng.below(n - w + 1);
    const std::size_t phase = rng.below(4), dot_y = rng.below(3), dot_x = rng.below(3);

    FixtureImage img;
    img.label = class_k;
    img.pixels = Tensor({n, n, 3});
    img.motifs.assign(n * n, 0);
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const bool inside = y >= top && y < top + h && x >= left && x < left + w;
            double rgb[3];
            Motif motif;
            if (!inside) {
                motif = snow ? Motif::snow : Motif::grass;
                const double* base = snow ? kSnow : kGrass;
                for (int c = 0; c < 3; ++c) rgb[c] = base[c] + rng.uniform(-kNoise, kNoise);
            } else if (class_k == 0) {
                motif = Motif::stripe;
                std::copy(kStripeBase, kStripeBase + 3, rgb);
                if ((x + y + phase) % 4 == 0) rgb[0] = 1.0;
            } else if (class_k == 1) {
                motif = Motif::dot;
                std::copy(kSpotBase, kSpotBase + 3, rgb);
                if ((y + dot_y) % 3 == 1 && (x + dot_x) % 3 == 1) rgb[2] = 1.0;
            } else {
                motif = Motif::plain;
                std::copy(kPlain, kPlain + 3, rgb);
            }
            for (int c = 0; c < 3; ++c) img.pixels.at(y, x, c) = quantize(rgb[c]);
            img.motifs[y * n + x] = static_cast<std::uint8_t>(motif);
        }
    }
    return img;
}

Tensor make_tensor(Shape shape, std::vector<double> values) { return Tensor(std::move(shape), std::move(values)); }

}  // namespace

std::string to_string(Motif m) {
    static const char* names[] = {"stripe", "dot", "plain", "snow", "grass"};
    return names[static_cast<int>(m)];
}

Motif motif_from_string(const std::string& s) {
    for (std::size_t i = 0; i < kMotifCount; ++i)
        if (to_string(static_cast<Motif>(i)) == s) return static_cast<Motif>(i);
    throw ParameterError("unknown motif '" + s + "'");
}

const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names{"striped", "spotted", "plain"};
    return names;
}

std::vector<FixtureImage> generate_images(const FixtureParams& params) {
    if (params.image_size < 24) throw ParameterError("fixture images must be at least 24 pixels wide");
    std::vector<FixtureImage> out;
    const std::size_t per_class = params.probe_per_class + params.eval_per_class;
    for (std::size_t k = 0; k < class_names().size(); ++k) {
        // Majority/minority background split, applied separately to each split.
        auto backgrounds = [&](std::size_t count, std::uint64_t tag) {
            const auto majority = static_cast<std::size_t>(std::llround(params.majority_background * count));
            std::vector<bool> flags(count, false);
            for (std::size_t i = 0; i < majority && i < count; ++i) flags[i] = true;
            Rng rng(derive_seed(params.seed, {k, tag}));
            rng.shuffle(flags);
            return flags;
        };
        const auto probe_bg = backgrounds(params.probe_per_class, 1000);
        const auto eval_bg = backgrounds(params.eval_per_class, 2000);
        for (std::size_t i = 0; i < per_class; ++i) {
            const bool probe = i < params.probe_per_class;
            const bool majority = probe ? probe_bg[i] : eval_bg[i - params.probe_per_class];
            FixtureImage img = make_image(k, i, majority, params);
            char id[64];
            std::snprintf(id, sizeof id, "%s-%03zu", class_names()[k].c_str(), i);
            img.instance_id = id;
            img.split = probe ? Split::probe : Split::eval;
            out.push_back(std::move(img));
        }
    }
    return out;
}

ModelGraph planted_model(std::size_t image_size) {
    // conv1 channels: 0 stripe (red anti-diagonal line), 1 dot (blue
    // center-surround), 2 snow (bright in all channels), 3 grass (green
    // dominant). Each responds with about 1.0 on its motif and 0 elsewhere.
    std::vector<double> w(4 * 3 * 3 * 3, 0.0);
    auto at = [&](std::size_t o, std::size_t ky, std::size_t kx, std::size_t c) -> double& {
        return w[((o * 3 + ky) * 3 + kx) * 3 + c];
    };
    for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
            at(0, ky, kx, 0) = ky + kx == 2 ? 0.8 : -0.4;
            at(1, ky, kx, 2) = (ky == 1 && kx == 1) ? 2.5 : -2.5 / 8.0;
        }
    for (std::size_t c = 0; c < 3; ++c) at(2, 1, 1, c) = 2.0;
    at(3, 1, 1, 0) = -2.5;
    at(3, 1, 1, 1) = 5.0;
    at(3, 1, 1, 2) = -2.5;

    ConvParams conv1{3, 3, 3, 4, 1, 1, make_tensor({4, 3, 3, 3}, w), make_tensor({4}, {-1.2, -1.5, -4.4, -1.5})};
    std::vector<double> identity(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) identity[i * 4 + i] = 1.0;
    ConvParams conv2{1, 1, 4, 4, 1, 0, make_tensor({4, 1, 1, 4}, identity), make_tensor({4}, {0, 0, 0, 0})};
    DenseParams head{4, 3,
                     make_tensor({3, 4}, {4.0, -2.0, 1.0, -1.0,  //
                                          -2.0, 4.0, 1.0, -1.0,  //
                                          -2.0, -2.0, -1.0, 1.0}),
                     make_tensor({3}, {0.0, 0.0, 1.5})};

    std::vector<LayerSpec> layers;
    layers.push_back({"conv1", LayerKind::convolution, conv1});
    layers.push_back({"relu1", LayerKind::relu, std::monostate{}});
    layers.push_back({kCaptureLayer, LayerKind::maxpool, PoolParams{image_size, image_size}});
    layers.push_back({"conv2", LayerKind::convolution, conv2});
    layers.push_back({"gap", LayerKind::global_average_pool, std::monostate{}});
    layers.push_back({"logits", LayerKind::dense, head});
    return ModelGraph(std::move(layers), {image_size, image_size, 3}, {0, 0, 0}, {1, 1, 1}, class_names());
}

std::string segment_motif(const Segment& segment, const std::vector<std::uint8_t>& motifs) {
    if (motifs.size() != segment.mask.size()) throw PreconditionError("motif map and mask sizes differ");
    std::size_t counts[kMotifCount] = {};
    std::size_t total = 0;
    for (std::size_t i = 0; i < motifs.size(); ++i)
        if (segment.mask[i]) {
            ++counts[motifs[i]];
            ++total;
        }
    for (std::size_t m = 0; m < kMotifCount; ++m)
        if (2 * counts[m] > total) return to_string(static_cast<Motif>(m));
    return "mixed";
}

void write_fixture(const fs::path& out_dir, const FixtureParams& params) {
    const fs::path dataset_dir = out_dir / "dataset";
    fs::create_directories(dataset_dir / "images");
    const auto images = generate_images(params);

    const std::vector<int> resolutions{15, 50, 80};
    json instances = json::array(), motif_maps = json::object(), segment_motifs = json::object();
    for (const auto& img : images) {
        const std::string rel = "images/" + img.instance_id + ".png";
        write_png(dataset_dir / rel, img.pixels);
        instances.push_back({{"id", img.instance_id}, {"path", rel}, {"label", img.label}, {"split", to_string(img.split)}});
        json per_motif = json::object();
        for (std::size_t m = 0; m < kMotifCount; ++m) {
            std::vector<std::uint8_t> mask(img.motifs.size());
            for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img.motifs[i] == m;
            per_motif[to_string(static_cast<Motif>(m))] = rle_encode(mask);
        }
        motif_maps[img.instance_id] = per_motif;
        if (img.split == Split::probe) {
            for (const auto& seg : extract_segments(img.pixels, img.instance_id, resolutions, 0))
                segment_motifs[seg.segment_id] = segment_motif(seg, img.motifs);
        }
    }
    const json dataset{{"class_names", class_names()},
                       {"image_shape", {params.image_size, params.image_size, 3}},
                       {"instances", instances}};
    write_file_atomic(dataset_dir / "dataset.json", dataset.dump(2) + "\n");

    save_model(planted_model(params.image_size), out_dir / "model");

    const json oracle{{"image_shape", {params.image_size, params.image_size}},
                      {"resolutions", resolutions},
                      {"motif_masks", motif_maps},
                      {"segment_motifs", segment_motifs}};
    write_file_atomic(out_dir / "oracle.json", oracle.dump() + "\n");

    const json pipeline{{"dataset_path", "dataset"},
                        {"model_path", "model"},
                        {"layer", kCaptureLayer},
                        {"images_per_class", params.probe_per_class},
                        {"segment_resolutions", resolutions},
                        {"concepts_per_class", 10},
                        {"n_cavs", 20},
                        {"alpha", 0.01},
                        {"clustering", {{"method", "kmeans"}, {"n_clusters", "auto"}}},
                        {"tsne_perplexity", 30.0},
                        {"seed", params.seed}};
    write_file_atomic(out_dir / "pipeline.json", pipeline.dump(2) + "\n");
}

Oracle load_oracle(const fs::path& path) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError("oracle.json: " + std::string(e.what()), e.byte);
    }
    Oracle o;
    const auto shape = doc.at("image_shape").get<std::vector<std::size_t>>();
    const std::size_t pixels = shape.at(0) * shape.at(1);
    o.resolutions = doc.at("resolutions").get<std::vector<int>>();
    for (const auto& [id, per_motif] : doc.at("motif_masks").items()) {
        std::vector<std::uint8_t> map(pixels, 0);
        for (const auto& [name, runs] : per_motif.items()) {
            const auto mask = rle_decode(runs.get<std::vector<std::uint32_t>>(), pixels);
            const auto m = static_cast<std::uint8_t>(motif_from_string(name));
            for (std::size_t i = 0; i < pixels; ++i)
                if (mask[i]) map[i] = m;
        }
        o.motif_maps[id] = std::move(map);
    }
    o.segment_motifs = doc.at("segment_motifs").get<std::map<std::string, std::string>>();
    return o;
}

}  // namespace cprobe::fixture
