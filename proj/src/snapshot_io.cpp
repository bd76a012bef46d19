#include "cprobe/snapshot_io.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <set>
#include <unistd.h>

#include "cprobe/dataset.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/png_io.hpp"
#include "cprobe/rng.hpp"
#include "cprobe/tensor_blob.hpp"

namespace cprobe {

using nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 15]);
    }
    return out;
}

// ---- configuration ---------------------------------------------------------

void PipelineConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ParameterError(what);
    };
    require(!dataset_path.empty(), "dataset_path is required");
    require(!model_path.empty(), "model_path is required");
    require(!layer.empty(), "layer is required");
    require(images_per_class >= 1, "images_per_class must be >= 1");
    require(!segment_resolutions.empty(), "segment_resolutions must not be empty");
    for (int r : segment_resolutions) require(r >= 2, "segment resolutions must be >= 2");
    require(concepts_per_class >= 1, "concepts_per_class must be >= 1");
    require(n_cavs >= 2, "n_cavs must be >= 2");
    require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    require(!clustering.n_clusters || *clustering.n_clusters >= 1, "clustering.n_clusters must be >= 1");
    require(tsne_perplexity > 0.0, "tsne_perplexity must be positive");
    require(segmentation.slic.compactness > 0.0, "slic.compactness must be positive");
    require(segmentation.slic.iterations >= 1, "slic.iterations must be >= 1");
    require(discovery.keep_fraction > 0.0 && discovery.keep_fraction <= 1.0, "discovery.keep_fraction must lie in (0, 1]");
    require(discovery.max_iterations >= 1, "discovery.max_iterations must be >= 1");
    require(cav_training.steps >= 1 && cav_training.learning_rate > 0.0 && cav_training.l2 >= 0.0,
            "cav_training parameters out of range");
    require(cav_training.validation_fraction >= 0.0 && cav_training.validation_fraction < 1.0,
            "cav_training.validation_fraction must lie in [0, 1)");
    require(cliques.merge_distance_fraction >= 0.0 && cliques.radius_fraction >= 0.0,
            "clique fractions must be non-negative");
}

namespace {

std::string mode_name(EmbeddingMode m) { return m == EmbeddingMode::flatten ? "flatten" : "global-average"; }

EmbeddingMode mode_from_name(const std::string& s) {
    if (s == "flatten") return EmbeddingMode::flatten;
    if (s == "global-average") return EmbeddingMode::global_average;
    throw ParameterError("embedding_mode must be 'flatten' or 'global-average'");
}

template <class T>
T get_field(const json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ParameterError(std::string("config field '") + key + "' has the wrong type");
    }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ParameterError(where + ": unknown field '" + key + "'");
    }
}

}  // namespace

json config_to_json(const PipelineConfig& c) {
    json clustering{{"method", to_string(c.clustering.method)}, {"seed", c.clustering.seed}};
    clustering["n_clusters"] = c.clustering.n_clusters ? json(*c.clustering.n_clusters) : json("auto");
    return {{"dataset_path", c.dataset_path},
            {"model_path", c.model_path},
            {"layer", c.layer},
            {"images_per_class", c.images_per_class},
            {"segment_resolutions", c.segment_resolutions},
            {"concepts_per_class", c.concepts_per_class},
            {"n_cavs", c.n_cavs},
            {"alpha", c.alpha},
            {"clustering", clustering},
            {"tsne_perplexity", c.tsne_perplexity},
            {"seed", c.seed},
            {"embedding_mode", mode_name(c.embedding_mode)},
            {"slic", {{"compactness", c.segmentation.slic.compactness}, {"iterations", c.segmentation.slic.iterations}}},
            {"min_segment_pixels", c.segmentation.min_segment_pixels},
            {"discovery",
             {{"keep_fraction", c.discovery.keep_fraction},
              {"min_concept_size", c.discovery.min_concept_size},
              {"min_distinct_images", c.discovery.min_distinct_images},
              {"max_iterations", c.discovery.max_iterations}}},
            {"cav_training",
             {{"l2", c.cav_training.l2},
              {"learning_rate", c.cav_training.learning_rate},
              {"steps", c.cav_training.steps},
              {"validation_fraction", c.cav_training.validation_fraction}}},
            {"cliques",
             {{"merge_distance_fraction", c.cliques.merge_distance_fraction},
              {"radius_fraction", c.cliques.radius_fraction}}},
            {"exported_patches_per_concept", c.exported_patches_per_concept}};
}

PipelineConfig config_from_json(const json& doc) {
    if (!doc.is_object()) throw ParameterError("config must be a JSON object");
    reject_unknown(doc,
                   {"dataset_path", "model_path", "layer", "images_per_class", "segment_resolutions",
                    "concepts_per_class", "n_cavs", "alpha", "clustering", "tsne_perplexity", "seed", "embedding_mode",
                    "slic", "min_segment_pixels", "discovery", "cav_training", "cliques",
                    "exported_patches_per_concept"},
                   "config");
    PipelineConfig c;
    c.dataset_path = get_field<std::string>(doc, "dataset_path", "");
    c.model_path = get_field<std::string>(doc, "model_path", "");
    c.layer = get_field<std::string>(doc, "layer", "");
    c.images_per_class = get_field<std::size_t>(doc, "images_per_class", c.images_per_class);
    c.segment_resolutions = get_field<std::vector<int>>(doc, "segment_resolutions", c.segment_resolutions);
    c.concepts_per_class = get_field<std::size_t>(doc, "concepts_per_class", c.concepts_per_class);
    c.n_cavs = get_field<std::size_t>(doc, "n_cavs", c.n_cavs);
    c.alpha = get_field<double>(doc, "alpha", c.alpha);
    c.tsne_perplexity = get_field<double>(doc, "tsne_perplexity", c.tsne_perplexity);
    c.seed = get_field<std::uint64_t>(doc, "seed", c.seed);
    c.embedding_mode = mode_from_name(get_field<std::string>(doc, "embedding_mode", "flatten"));
    c.segmentation.min_segment_pixels = get_field<std::size_t>(doc, "min_segment_pixels", c.segmentation.min_segment_pixels);
    c.exported_patches_per_concept =
        get_field<std::size_t>(doc, "exported_patches_per_concept", c.exported_patches_per_concept);

    if (doc.contains("clustering")) {
        const json& cl = doc["clustering"];
        if (!cl.is_object()) throw ParameterError("config field 'clustering' must be an object");
        reject_unknown(cl, {"method", "n_clusters", "seed"}, "clustering");
        try {
            c.clustering.method = cluster_method_from_string(get_field<std::string>(cl, "method", "kmeans"));
        } catch (const ParameterError&) {
            throw;
        } catch (const Error& e) {
            throw ParameterError(e.what());
        }
        if (cl.contains("n_clusters")) {
            const json& n = cl["n_clusters"];
            if (n.is_string() && n.get<std::string>() == "auto")
                c.clustering.n_clusters.reset();
            else if (n.is_number_integer() && n.get<std::int64_t>() >= 0)
                c.clustering.n_clusters = n.get<std::size_t>();
            else
                throw ParameterError("clustering.n_clusters must be a positive integer or \"auto\"");
        }
        c.clustering.seed = get_field<std::uint64_t>(cl, "seed", c.clustering.seed);
    }
    if (doc.contains("slic")) {
        const json& s = doc["slic"];
        reject_unknown(s, {"compactness", "iterations"}, "slic");
        c.segmentation.slic.compactness = get_field<double>(s, "compactness", c.segmentation.slic.compactness);
        c.segmentation.slic.iterations = get_field<int>(s, "iterations", c.segmentation.slic.iterations);
    }
    if (doc.contains("discovery")) {
        const json& d = doc["discovery"];
        reject_unknown(d, {"keep_fraction", "min_concept_size", "min_distinct_images", "max_iterations"}, "discovery");
        c.discovery.keep_fraction = get_field<double>(d, "keep_fraction", c.discovery.keep_fraction);
        c.discovery.min_concept_size = get_field<std::size_t>(d, "min_concept_size", c.discovery.min_concept_size);
        c.discovery.min_distinct_images =
            get_field<std::size_t>(d, "min_distinct_images", c.discovery.min_distinct_images);
        c.discovery.max_iterations = get_field<int>(d, "max_iterations", c.discovery.max_iterations);
    }
    if (doc.contains("cav_training")) {
        const json& t = doc["cav_training"];
        reject_unknown(t, {"l2", "learning_rate", "steps", "validation_fraction"}, "cav_training");
        c.cav_training.l2 = get_field<double>(t, "l2", c.cav_training.l2);
        c.cav_training.learning_rate = get_field<double>(t, "learning_rate", c.cav_training.learning_rate);
        c.cav_training.steps = get_field<int>(t, "steps", c.cav_training.steps);
        c.cav_training.validation_fraction =
            get_field<double>(t, "validation_fraction", c.cav_training.validation_fraction);
    }
    if (doc.contains("cliques")) {
        const json& q = doc["cliques"];
        reject_unknown(q, {"merge_distance_fraction", "radius_fraction"}, "cliques");
        c.cliques.merge_distance_fraction =
            get_field<double>(q, "merge_distance_fraction", c.cliques.merge_distance_fraction);
        c.cliques.radius_fraction = get_field<double>(q, "radius_fraction", c.cliques.radius_fraction);
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("config not found: " + path.string());
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what(), e.byte);
    }
    PipelineConfig c = config_from_json(doc);
    const fs::path base = path.parent_path();
    auto resolve = [&](std::string& p) {
        if (fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
    };
    resolve(c.dataset_path);
    resolve(c.model_path);
    return c;
}

// ---- value (de)serialization -------------------------------------------------

namespace {

float to_f32(double v) { return static_cast<float>(v); }

void quantize(std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(to_f32(x));
}
void quantize(Matrix& m) { quantize(m.data); }

// Vectors go to the tensor blob when writing a snapshot and inline when
// writing a checkpoint.
class Sink {
public:
    explicit Sink(TensorBlobWriter* blob) : blob_(blob) {}

    json vec(const std::vector<double>& v) {
        if (!blob_ || v.empty()) return v;
        return blob_->add(Shape{v.size()}, std::span<const double>(v));
    }
    json mat(const Matrix& m) {
        json j{{"rows", m.rows}, {"cols", m.cols}};
        if (!blob_ || m.data.empty())
            j["data"] = m.data;
        else
            j["data"] = blob_->add(Shape{m.rows, m.cols}, std::span<const double>(m.data));
        return j;
    }

private:
    TensorBlobWriter* blob_;
};

class Source {
public:
    explicit Source(const std::vector<TensorEntry>* entries) : entries_(entries) {}

    std::vector<double> vec(const json& j) const {
        if (j.is_array()) return j.get<std::vector<double>>();
        const auto idx = j.get<std::size_t>();
        if (!entries_ || idx >= entries_->size())
            throw CorruptionError("tensor reference " + std::to_string(idx) + " out of range");
        const auto& e = (*entries_)[idx];
        return std::vector<double>(e.values.begin(), e.values.end());
    }
    Matrix mat(const json& j) const {
        Matrix m;
        m.rows = j.at("rows").get<std::size_t>();
        m.cols = j.at("cols").get<std::size_t>();
        m.data = vec(j.at("data"));
        if (m.data.size() != m.rows * m.cols) throw CorruptionError("matrix payload does not match its shape");
        return m;
    }

private:
    const std::vector<TensorEntry>* entries_;
};

json point(const Point2& p) { return json::array({p[0], p[1]}); }
Point2 point(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

json entry_to_json(const ConceptEntry& e, Sink& sink) {
    const ConceptRecord& r = e.record;
    json j{{"concept_id", r.concept_id},
           {"class_k", r.class_k},
           {"display_name", r.display_name},
           {"member_segment_ids", r.member_segment_ids},
           {"centroid", sink.vec(r.centroid)},
           {"radius", r.radius},
           {"retained", e.retained},
           {"member_distances", sink.vec(e.member_distances)}};
    j["tcav"] = r.tcav ? json{{"per_cav_scores", r.tcav->per_cav_scores},
                              {"mean_score", r.tcav->mean_score},
                              {"p_value", r.tcav->p_value},
                              {"significant", r.tcav->significant}}
                       : json(nullptr);
    j["cluster_id"] = r.cluster_id ? json(*r.cluster_id) : json(nullptr);
    json cavs = json::array(), scores = json::array();
    for (const auto& cav : e.ensemble.cavs) {
        cavs.push_back(cav ? json{{"weight", sink.vec(cav->weight)},
                                  {"bias", cav->bias},
                                  {"validation_accuracy", cav->validation_accuracy},
                                  {"counterexample_seed", cav->counterexample_seed}}
                           : json(nullptr));
    }
    for (const auto& s : e.ensemble.scores) scores.push_back(s ? json(*s) : json(nullptr));
    j["ensemble"] = {{"cavs", cavs},
                     {"scores", scores},
                     {"untestable", e.ensemble.untestable},
                     {"warnings", e.ensemble.warnings}};
    return j;
}

TcavStats stats_from_json(const json& t) {
    return {t.at("per_cav_scores").get<std::vector<double>>(), t.at("mean_score").get<double>(),
            t.at("p_value").get<double>(), t.at("significant").get<bool>()};
}

ConceptEntry entry_from_json(const json& j, const Source& src) {
    ConceptEntry e;
    ConceptRecord& r = e.record;
    r.concept_id = j.at("concept_id").get<std::string>();
    r.class_k = j.at("class_k").get<std::size_t>();
    r.display_name = j.at("display_name").get<std::string>();
    r.member_segment_ids = j.at("member_segment_ids").get<std::vector<std::string>>();
    r.centroid = src.vec(j.at("centroid"));
    r.radius = j.at("radius").get<double>();
    if (!j.at("tcav").is_null()) r.tcav = stats_from_json(j["tcav"]);
    if (!j.at("cluster_id").is_null()) r.cluster_id = j["cluster_id"].get<std::string>();
    e.retained = j.at("retained").get<bool>();
    e.member_distances = src.vec(j.at("member_distances"));
    const json& ens = j.at("ensemble");
    for (const auto& c : ens.at("cavs")) {
        if (c.is_null()) {
            e.ensemble.cavs.emplace_back();
            continue;
        }
        Cav cav;
        cav.weight = src.vec(c.at("weight"));
        cav.bias = c.at("bias").get<double>();
        cav.validation_accuracy = c.at("validation_accuracy").get<double>();
        cav.counterexample_seed = c.at("counterexample_seed").get<std::uint64_t>();
        e.ensemble.cavs.push_back(std::move(cav));
    }
    for (const auto& s : ens.at("scores"))
        e.ensemble.scores.push_back(s.is_null() ? std::nullopt : std::optional<double>(s.get<double>()));
    e.ensemble.untestable = ens.at("untestable").get<bool>();
    e.ensemble.warnings = ens.at("warnings").get<std::vector<std::string>>();
    e.ensemble.stats = r.tcav;
    return e;
}

json prediction_to_json(const Prediction& p) {
    json j{{"instance_id", p.instance_id},
           {"logits", p.logits},
           {"probabilities", p.probabilities},
           {"predicted_class", p.predicted_class},
           {"confidence", p.confidence}};
    j["label"] = p.label ? json(*p.label) : json(nullptr);
    return j;
}

Prediction prediction_from_json(const json& j) {
    Prediction p;
    p.instance_id = j.at("instance_id").get<std::string>();
    p.logits = j.at("logits").get<std::vector<double>>();
    p.probabilities = j.at("probabilities").get<std::vector<double>>();
    p.predicted_class = j.at("predicted_class").get<std::size_t>();
    p.confidence = j.at("confidence").get<double>();
    if (!j.at("label").is_null()) p.label = j["label"].get<std::size_t>();
    return p;
}

json segment_to_json(const Segment& s) {
    return {{"segment_id", s.segment_id},
            {"instance_id", s.instance_id},
            {"resolution_level", to_string(s.resolution_level)},
            {"resolution", s.resolution},
            {"height", s.height},
            {"width", s.width},
            {"bbox", {s.bbox.top, s.bbox.left, s.bbox.height, s.bbox.width}},
            {"mask_rle", rle_encode(s.mask)}};
}

Segment segment_from_json(const json& j) {
    Segment s;
    s.segment_id = j.at("segment_id").get<std::string>();
    s.instance_id = j.at("instance_id").get<std::string>();
    s.resolution_level = resolution_level_from_string(j.at("resolution_level").get<std::string>());
    s.resolution = j.at("resolution").get<int>();
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    const auto b = j.at("bbox").get<std::vector<std::size_t>>();
    if (b.size() != 4) throw CorruptionError("segment bbox must have 4 entries");
    s.bbox = {b[0], b[1], b[2], b[3]};
    s.mask = rle_decode(j.at("mask_rle").get<std::vector<std::uint32_t>>(), s.height * s.width);
    return s;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Manifest body without snapshot_id and created_at.
json manifest_body(const Snapshot& s, Sink& sink) {
    json j;
    j["schema_version"] = s.schema_version;
    j["config"] = config_to_json(s.config);
    j["class_names"] = s.class_names;
    j["image_shape"] = s.image_shape;
    j["channel_means"] = s.channel_means;

    json preds = json::array();
    for (const auto& p : s.predictions) preds.push_back(prediction_to_json(p));
    j["predictions"] = preds;
    json failures = json::array();
    for (const auto& f : s.prediction_failures) failures.push_back({{"instance_id", f.instance_id}, {"message", f.message}});
    j["prediction_failures"] = failures;

    json classes = json::array();
    for (const auto& c : s.classes)
        classes.push_back({{"class_k", c.class_k},
                           {"name", c.name},
                           {"accuracy",
                            {{"correct", c.accuracy.correct},
                             {"total", c.accuracy.total},
                             {"accuracy", c.accuracy.accuracy}}},
                           {"position", point(c.position)},
                           {"mean_latent", sink.vec(c.mean_latent)}});
    j["classes"] = classes;

    json cliques = json::array();
    for (const auto& q : s.cliques)
        cliques.push_back({{"clique_id", q.clique_id},
                           {"member_classes", q.member_classes},
                           {"center", point(q.center)},
                           {"radius", q.radius},
                           {"mean_accuracy", q.mean_accuracy},
                           {"representative_images", q.representative_images}});
    j["cliques"] = cliques;

    json concepts = json::array();
    for (const auto& e : s.concepts) concepts.push_back(entry_to_json(e, sink));
    j["concepts"] = concepts;

    json clusters = json::array();
    for (const auto& c : s.clusters)
        clusters.push_back({{"cluster_id", c.cluster_id},
                            {"member_concept_ids", c.member_concept_ids},
                            {"medoid_concept_id", c.medoid_concept_id}});
    j["clusters"] = clusters;
    j["n_clusters"] = s.n_clusters;
    json sil = json::object();
    for (const auto& [k, v] : s.silhouette) sil[std::to_string(k)] = v;
    j["silhouette"] = sil;

    json positions = json::object();
    for (const auto& [id, p] : s.concept_positions) positions[id] = point(p);
    j["concept_positions"] = positions;
    json cells = json::object();
    for (const auto& [id, c] : s.hex.cells) cells[id] = {c.col, c.row};
    j["hex"] = {{"grid_cols", s.hex.grid_cols},
                {"grid_rows", s.hex.grid_rows},
                {"total_cost", s.hex.total_cost},
                {"cells", cells}};
    json edges = json::array();
    for (const auto& e : s.boundaries)
        edges.push_back({{"cell", {e.cell.col, e.cell.row}}, {"side", e.side}, {"from", point(e.from)}, {"to", point(e.to)}});
    j["boundaries"] = edges;

    json segments = json::array();
    for (const auto& [id, seg] : s.segments) segments.push_back(segment_to_json(seg));
    j["segments"] = segments;

    json influence = json::array();
    for (const auto& ci : s.influence) {
        json raw = json::array();
        for (const auto& m : ci.raw_s) raw.push_back(sink.mat(m));
        influence.push_back({{"class_k", ci.class_k},
                             {"instance_ids", ci.instance_ids},
                             {"concept_ids", ci.concept_ids},
                             {"influence", sink.mat(ci.influence)},
                             {"raw_s", raw},
                             {"cav_indices", ci.cav_indices}});
    }
    j["influence"] = influence;
    j["warnings"] = s.warnings;
    j["exported_patches"] = s.exported_patches;
    return j;
}

std::string id_from(const std::string& body_dump, const std::string& tensors) {
    return sha256_hex(body_dump + '\n' + tensors).substr(0, 16);
}

}  // namespace

json concept_entries_to_json(const std::vector<ConceptEntry>& entries) {
    Sink sink(nullptr);
    json out = json::array();
    for (const auto& e : entries) out.push_back(entry_to_json(e, sink));
    return out;
}

std::vector<ConceptEntry> concept_entries_from_json(const json& doc) {
    Source src(nullptr);
    std::vector<ConceptEntry> out;
    for (const auto& j : doc) out.push_back(entry_from_json(j, src));
    return out;
}

void quantize_for_storage(Snapshot& s) {
    for (auto& c : s.classes) quantize(c.mean_latent);
    for (auto& e : s.concepts) {
        quantize(e.record.centroid);
        quantize(e.member_distances);
        for (auto& cav : e.ensemble.cavs)
            if (cav) quantize(cav->weight);
    }
    for (auto& ci : s.influence) {
        quantize(ci.influence);
        for (auto& m : ci.raw_s) quantize(m);
    }
}

SerializedSnapshot serialize_snapshot(const Snapshot& snapshot) {
    TensorBlobWriter blob;
    Sink sink(&blob);
    json j = manifest_body(snapshot, sink);
    j["snapshot_id"] = snapshot.snapshot_id;
    j["created_at"] = snapshot.created_at;
    return {j.dump() + "\n", blob.bytes()};
}

std::string compute_snapshot_id(const Snapshot& snapshot) {
    TensorBlobWriter blob;
    Sink sink(&blob);
    const json body = manifest_body(snapshot, sink);
    return id_from(body.dump(), blob.bytes());
}

json snapshot_to_json(const Snapshot& snapshot) {
    Sink sink(nullptr);
    json j = manifest_body(snapshot, sink);
    j["snapshot_id"] = snapshot.snapshot_id;
    j["created_at"] = snapshot.created_at;
    return j;
}

Snapshot parse_snapshot(const std::string& manifest, const std::string& tensors) {
    json j;
    try {
        j = json::parse(manifest);
    } catch (const json::parse_error& e) {
        throw CorruptionError("manifest.json is not valid JSON: " + std::string(e.what()));
    }
    const int version = j.value("schema_version", 0);
    if (version != kSnapshotSchemaVersion)
        throw UnsupportedVersionError("snapshot schema version " + std::to_string(version) + " is not supported (expected " +
                                      std::to_string(kSnapshotSchemaVersion) + ")");
    const std::string stored_id = j.value("snapshot_id", std::string{});
    const std::string created_at = j.value("created_at", std::string{});
    json body = j;
    body.erase("snapshot_id");
    body.erase("created_at");
    if (id_from(body.dump(), tensors) != stored_id)
        throw CorruptionError("snapshot content does not match its id " + stored_id);

    std::vector<TensorEntry> entries;
    try {
        entries = read_tensor_blob(tensors);
    } catch (const FormatError& e) {
        throw CorruptionError(std::string("tensors.bin: ") + e.what());
    }
    const Source src(&entries);
    Snapshot s;
    try {
        s.schema_version = version;
        s.snapshot_id = stored_id;
        s.created_at = created_at;
        s.config = config_from_json(j.at("config"));
        s.class_names = j.at("class_names").get<std::vector<std::string>>();
        s.image_shape = j.at("image_shape").get<std::array<std::size_t, 3>>();
        s.channel_means = j.at("channel_means").get<std::vector<double>>();
        for (const auto& p : j.at("predictions")) s.predictions.push_back(prediction_from_json(p));
        for (const auto& f : j.at("prediction_failures"))
            s.prediction_failures.push_back({f.at("instance_id").get<std::string>(), f.at("message").get<std::string>()});
        for (const auto& c : j.at("classes")) {
            ClassInfo info;
            info.class_k = c.at("class_k").get<std::size_t>();
            info.name = c.at("name").get<std::string>();
            const json& a = c.at("accuracy");
            info.accuracy = {info.class_k, a.at("correct").get<std::size_t>(), a.at("total").get<std::size_t>(),
                             a.at("accuracy").get<double>()};
            info.position = point(c.at("position"));
            info.mean_latent = src.vec(c.at("mean_latent"));
            s.classes.push_back(std::move(info));
        }
        for (const auto& q : j.at("cliques")) {
            Clique c;
            c.clique_id = q.at("clique_id").get<std::string>();
            c.member_classes = q.at("member_classes").get<std::vector<std::size_t>>();
            c.center = point(q.at("center"));
            c.radius = q.at("radius").get<double>();
            c.mean_accuracy = q.at("mean_accuracy").get<double>();
            c.representative_images = q.at("representative_images").get<std::vector<std::string>>();
            s.cliques.push_back(std::move(c));
        }
        for (const auto& c : j.at("concepts")) s.concepts.push_back(entry_from_json(c, src));
        for (const auto& c : j.at("clusters"))
            s.clusters.push_back({c.at("cluster_id").get<std::string>(),
                                  c.at("member_concept_ids").get<std::vector<std::string>>(),
                                  c.at("medoid_concept_id").get<std::string>(),
                                  ""});
        s.n_clusters = j.at("n_clusters").get<std::size_t>();
        for (const auto& [k, v] : j.at("silhouette").items()) s.silhouette[std::stoul(k)] = v.get<double>();
        for (const auto& [id, p] : j.at("concept_positions").items()) s.concept_positions[id] = point(p);
        const json& hex = j.at("hex");
        s.hex.grid_cols = hex.at("grid_cols").get<int>();
        s.hex.grid_rows = hex.at("grid_rows").get<int>();
        s.hex.total_cost = hex.at("total_cost").get<double>();
        for (const auto& [id, c] : hex.at("cells").items()) s.hex.cells[id] = {c.at(0).get<int>(), c.at(1).get<int>()};
        for (const auto& e : j.at("boundaries"))
            s.boundaries.push_back({{e.at("cell").at(0).get<int>(), e.at("cell").at(1).get<int>()},
                                    e.at("side").get<int>(),
                                    point(e.at("from")),
                                    point(e.at("to"))});
        for (const auto& seg : j.at("segments")) {
            Segment g = segment_from_json(seg);
            s.segments.emplace(g.segment_id, std::move(g));
        }
        for (const auto& ci : j.at("influence")) {
            ClassInfluence c;
            c.class_k = ci.at("class_k").get<std::size_t>();
            c.instance_ids = ci.at("instance_ids").get<std::vector<std::string>>();
            c.concept_ids = ci.at("concept_ids").get<std::vector<std::string>>();
            c.influence = src.mat(ci.at("influence"));
            for (const auto& m : ci.at("raw_s")) c.raw_s.push_back(src.mat(m));
            c.cav_indices = ci.at("cav_indices").get<std::vector<std::vector<std::size_t>>>();
            s.influence.push_back(std::move(c));
        }
        s.warnings = j.at("warnings").get<std::vector<std::string>>();
        s.exported_patches = j.at("exported_patches").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("manifest.json: ") + e.what());
    }
    return s;
}

fs::path save_snapshot(Snapshot& snapshot, const fs::path& root) {
    snapshot.snapshot_id = compute_snapshot_id(snapshot);
    if (snapshot.created_at.empty()) snapshot.created_at = utc_now();
    const SerializedSnapshot bytes = serialize_snapshot(snapshot);

    const fs::path final_dir = root / snapshot.snapshot_id;
    if (fs::exists(final_dir / "manifest.json")) return final_dir;  // content-addressed: already stored

    const fs::path tmp = root / (".tmp-" + snapshot.snapshot_id + "-" + std::to_string(::getpid()));
    fs::remove_all(tmp);
    fs::create_directories(tmp / "patches");
    write_file_atomic(tmp / "manifest.json", bytes.manifest);
    write_file_atomic(tmp / "tensors.bin", bytes.tensors);

    if (!snapshot.exported_patches.empty()) {
        DatasetManifest dataset = load_manifest(snapshot.config.dataset_path);
        for (const auto& id : snapshot.exported_patches) {
            const auto it = snapshot.segments.find(id);
            if (it == snapshot.segments.end()) continue;
            const Tensor image = load_image(dataset, dataset.find(it->second.instance_id));
            write_png(tmp / "patches" / (id + ".png"), segment_thumbnail(image, it->second, snapshot.channel_means));
        }
    }
    std::error_code ec;
    fs::rename(tmp, final_dir, ec);
    if (ec) {
        fs::remove_all(tmp);
        if (!fs::exists(final_dir / "manifest.json"))
            throw IoError("cannot move snapshot into place: " + final_dir.string() + ": " + ec.message());
    }
    return final_dir;
}

Snapshot load_snapshot(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) throw IoError("no snapshot manifest in " + dir.string());
    return parse_snapshot(read_file(dir / "manifest.json"), read_file(dir / "tensors.bin"));
}

const ConceptEntry* Snapshot::find_concept(const std::string& concept_id) const {
    for (const auto& e : concepts)
        if (e.record.concept_id == concept_id) return &e;
    return nullptr;
}

const ConceptCluster* Snapshot::find_cluster(const std::string& cluster_id) const {
    for (const auto& c : clusters)
        if (c.cluster_id == cluster_id) return &c;
    return nullptr;
}

const Prediction* Snapshot::find_prediction(const std::string& instance_id) const {
    for (const auto& p : predictions)
        if (p.instance_id == instance_id) return &p;
    return nullptr;
}

std::vector<const ConceptEntry*> Snapshot::retained_concepts() const {
    std::vector<const ConceptEntry*> out;
    for (const auto& e : concepts)
        if (e.retained) out.push_back(&e);
    return out;
}

}  // namespace cprobe
