#include "cprobe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "cprobe/dataset.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/model_io.hpp"
#include "cprobe/rng.hpp"
#include "cprobe/snapshot_io.hpp"

namespace cprobe {

namespace fs = std::filesystem;

std::string to_string(Stage stage) {
    switch (stage) {
        case Stage::queued: return "queued";
        case Stage::segmenting: return "segmenting";
        case Stage::discovering: return "discovering";
        case Stage::scoring: return "scoring";
        case Stage::filtering: return "filtering";
        case Stage::clustering: return "clustering";
        case Stage::layouting: return "layouting";
        case Stage::persisting: return "persisting";
        case Stage::done: return "done";
        case Stage::failed: return "failed";
    }
    return "unknown";
}

namespace {

// Seed stream tags for the independent stages.
enum SeedTag : std::uint64_t { kDiscover = 1, kScore = 2, kCluster = 3, kConceptLayout = 4, kClassLayout = 5 };

struct ClassWork {
    std::vector<InstanceMeta> sample;
    std::vector<Segment> segments;
    std::vector<PatchEmbedding> embeddings;
    std::vector<std::vector<double>> gradients;  // per sampled image, class logit, embedding space
    std::vector<double> mean_latent;
    std::vector<ConceptEntry> concepts;
};

class Runner {
public:
    Runner(PipelineConfig config, const PipelineOptions& options) : config_(std::move(config)), options_(options) {}

    Snapshot run() {
        enter(Stage::queued, 0.0);
        guarded(Stage::queued, [&] { prepare(); });
        enter(Stage::segmenting, 0.02);
        guarded(Stage::segmenting, [&] { segment(); });
        enter(Stage::discovering, 0.3);
        guarded(Stage::discovering, [&] { discover(); });
        enter(Stage::scoring, 0.35);
        guarded(Stage::scoring, [&] { score(); });
        enter(Stage::filtering, 0.8);
        guarded(Stage::filtering, [&] { filter(); });
        enter(Stage::clustering, 0.82);
        guarded(Stage::clustering, [&] { cluster(); });
        enter(Stage::layouting, 0.86);
        guarded(Stage::layouting, [&] { layout(); });
        snap_.warnings = warnings_;
        quantize_for_storage(snap_);
        return std::move(snap_);
    }

private:
    template <class F>
    void guarded(Stage stage, F&& body) {
        try {
            body();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
    }

    void enter(Stage stage, double progress) {
        stage_ = stage;
        report(progress);
    }
    void report(double progress) {
        progress_ = std::max(progress_, progress);
        if (options_.on_progress) options_.on_progress(stage_, progress_);
    }
    void warn(const std::string& message) {
        warnings_.push_back(message);
        if (options_.on_warning) options_.on_warning(message);
    }

    void prepare() {
        config_.validate();
        config_.dataset_path = fs::absolute(config_.dataset_path).lexically_normal().string();
        config_.model_path = fs::absolute(config_.model_path).lexically_normal().string();
        manifest_ = load_manifest(config_.dataset_path);
        manifest_.channel_means = compute_channel_means(manifest_);
        model_.emplace(load_model(config_.model_path));
        const std::size_t layer_idx = model_->layer_index(config_.layer);
        if (layer_idx + 1 >= model_->layers().size())
            throw UnsupportedLayerError("layer '" + config_.layer + "' is terminal; no gradient can flow above it");
        if (model_->class_names() != manifest_.class_names)
            throw ValidationError("model and dataset class names differ");

        setup_.layer = config_.layer;
        setup_.mode = config_.embedding_mode;
        setup_.resolutions = config_.segment_resolutions;
        setup_.segmentation = config_.segmentation;
        setup_.channel_means = manifest_.channel_means;

        snap_.config = config_;
        snap_.class_names = manifest_.class_names;
        snap_.image_shape = manifest_.image_shape;
        snap_.channel_means = manifest_.channel_means;
        work_.resize(manifest_.class_names.size());
    }

    std::vector<double> embed_image(const Tensor& image) const {
        Patch p{"", fit_to_model(*model_, image)};
        return embed_patches(*model_, {p}, config_.layer, config_.embedding_mode).front().vector;
    }

    // Mean activation over the class's eval instances, or over its probe sample
    // when it has no readable eval instance.
    std::vector<double> mean_latent(std::size_t k) const {
        std::vector<const InstanceMeta*> members;
        std::set<std::string> failed;
        for (const auto& f : snap_.prediction_failures) failed.insert(f.instance_id);
        for (const auto* inst : manifest_.split_instances(Split::eval))
            if (inst->label == k && !failed.count(inst->instance_id)) members.push_back(inst);
        if (members.empty())
            for (const auto& inst : work_[k].sample) members.push_back(&inst);
        std::vector<double> mean;
        for (const auto* inst : members) {
            const auto latent = embed_image(load_image(manifest_, *inst));
            if (mean.empty()) mean.assign(latent.size(), 0.0);
            for (std::size_t i = 0; i < latent.size(); ++i) mean[i] += latent[i];
        }
        for (double& v : mean) v /= static_cast<double>(std::max<std::size_t>(1, members.size()));
        return mean;
    }

    void segment() {
        auto predicted = predict_all(*model_, manifest_);
        snap_.predictions = std::move(predicted.predictions);
        snap_.prediction_failures = std::move(predicted.failures);
        for (const auto& f : snap_.prediction_failures) warn("instance " + f.instance_id + ": " + f.message);

        const std::size_t n_classes = work_.size();
        for (std::size_t k = 0; k < n_classes; ++k) {
            ClassWork& w = work_[k];
            w.sample = sample_class_images(manifest_, k, config_.images_per_class, config_.seed);
            for (const auto& inst : w.sample) {
                const Tensor image = load_image(manifest_, inst);
                SegmentedInstance seg = segment_and_embed(*model_, image, inst.instance_id, setup_);
                std::move(seg.segments.begin(), seg.segments.end(), std::back_inserter(w.segments));
                std::move(seg.embeddings.begin(), seg.embeddings.end(), std::back_inserter(w.embeddings));
                const Tensor input = fit_to_model(*model_, image);
                w.gradients.push_back(
                    embedding_gradient(gradient_at_layer(*model_, input, config_.layer, k), config_.embedding_mode));
            }
            w.mean_latent = mean_latent(k);
            report(0.02 + 0.28 * static_cast<double>(k + 1) / static_cast<double>(n_classes));
        }
    }

    void discover() {
        for (std::size_t k = 0; k < work_.size(); ++k) {
            ClassWork& w = work_[k];
            if (w.embeddings.empty()) {
                warn("class " + manifest_.class_names[k] + ": no segments survived");
                continue;
            }
            auto result = discover_concepts(k, manifest_.class_names[k], w.embeddings, config_.concepts_per_class,
                                            derive_seed(config_.seed, {kDiscover, k}), config_.discovery);
            for (const auto& msg : result.warnings) warn("class " + manifest_.class_names[k] + ": " + msg);
            for (auto& rec : result.concepts) w.concepts.push_back({std::move(rec), {}, false, {}});
        }
    }

    fs::path checkpoint_file(std::size_t k) const {
        nlohmann::json key = config_to_json(config_);
        const std::string digest = sha256_hex(key.dump()).substr(0, 16);
        return *options_.checkpoint_dir / digest / ("scoring-" + std::to_string(k) + ".json");
    }

    void score() {
        LabeledEmbeddings pool;
        std::size_t total = 0;
        for (const auto& w : work_) total += w.embeddings.size();
        std::size_t dim = 0;
        for (const auto& w : work_)
            if (!w.embeddings.empty()) {
                dim = w.embeddings[0].vector.size();
                break;
            }
        pool.vectors = Matrix(total, dim);
        std::size_t row = 0;
        for (std::size_t k = 0; k < work_.size(); ++k)
            for (const auto& e : work_[k].embeddings) {
                std::copy(e.vector.begin(), e.vector.end(), pool.vectors.row(row++).begin());
                pool.labels.push_back(k);
            }

        EnsembleParams params;
        params.n_cavs = config_.n_cavs;
        params.alpha = config_.alpha;
        params.training = config_.cav_training;

        std::size_t n_concepts = 0, done = 0;
        for (const auto& w : work_) n_concepts += w.concepts.size();
        for (std::size_t k = 0; k < work_.size(); ++k) {
            ClassWork& w = work_[k];
            if (options_.checkpoint_dir) {
                const fs::path file = checkpoint_file(k);
                if (fs::exists(file)) {
                    w.concepts = concept_entries_from_json(nlohmann::json::parse(read_file(file)));
                    done += w.concepts.size();
                    report(0.35 + 0.45 * static_cast<double>(done) / static_cast<double>(std::max<std::size_t>(1, n_concepts)));
                    continue;
                }
            }
            std::map<std::string, std::size_t> index;
            for (std::size_t i = 0; i < w.embeddings.size(); ++i) index[w.embeddings[i].segment_id] = i;
            for (std::size_t c = 0; c < w.concepts.size(); ++c) {
                ConceptEntry& entry = w.concepts[c];
                const auto& members = entry.record.member_segment_ids;
                Matrix x(members.size(), pool.vectors.cols);
                entry.member_distances.clear();
                for (std::size_t m = 0; m < members.size(); ++m) {
                    const auto& v = w.embeddings[index.at(members[m])].vector;
                    std::copy(v.begin(), v.end(), x.row(m).begin());
                    entry.member_distances.push_back(euclidean_distance(v, entry.record.centroid));
                }
                entry.ensemble =
                    tcav_ensemble(x, pool, k, w.gradients, derive_seed(config_.seed, {kScore, k, c}), params);
                entry.record.tcav = entry.ensemble.stats;
                for (const auto& msg : entry.ensemble.warnings) warn(entry.record.concept_id + ": " + msg);
                ++done;
                report(0.35 + 0.45 * static_cast<double>(done) / static_cast<double>(std::max<std::size_t>(1, n_concepts)));
            }
            if (options_.checkpoint_dir) {
                const fs::path file = checkpoint_file(k);
                fs::create_directories(file.parent_path());
                write_file_atomic(file, concept_entries_to_json(w.concepts).dump());
            }
        }
    }

    void filter() {
        for (auto& w : work_)
            for (auto& entry : w.concepts) {
                entry.retained = entry.record.tcav && entry.record.tcav->p_value < config_.alpha;
                snap_.concepts.push_back(entry);
            }
        for (std::size_t k = 0; k < work_.size(); ++k) {
            std::set<std::string> wanted;
            for (const auto& entry : work_[k].concepts)
                wanted.insert(entry.record.member_segment_ids.begin(), entry.record.member_segment_ids.end());
            for (auto& seg : work_[k].segments)
                if (wanted.count(seg.segment_id)) snap_.segments.emplace(seg.segment_id, std::move(seg));
        }
    }

    void cluster() {
        std::vector<ConceptRecord> retained;
        for (const auto& e : snap_.concepts)
            if (e.retained) retained.push_back(e.record);
        if (retained.empty()) {
            warn("no concept passed the significance filter");
            return;
        }
        if (retained.size() == 1) {
            retained[0].cluster_id = "CC1";
            snap_.clusters.push_back({"CC1", {retained[0].concept_id}, retained[0].concept_id, ""});
            snap_.n_clusters = 1;
        } else {
            ClusteringConfig clustering = config_.clustering;
            clustering.seed = clustering_seed(config_);
            ClusteringResult result = cluster_concepts(retained, clustering);
            snap_.clusters = std::move(result.clusters);
            snap_.n_clusters = result.n_clusters;
            snap_.silhouette = std::move(result.silhouette);
        }
        std::map<std::string, std::string> assigned;
        for (const auto& r : retained) assigned[r.concept_id] = *r.cluster_id;
        for (auto& e : snap_.concepts)
            if (e.retained) e.record.cluster_id = assigned.at(e.record.concept_id);
    }

    void layout() {
        // Concept map.
        std::vector<std::string> ids;
        std::vector<std::vector<double>> centroids;
        for (const auto& e : snap_.concepts)
            if (e.retained) {
                ids.push_back(e.record.concept_id);
                centroids.push_back(e.record.centroid);
            }
        if (!ids.empty()) {
            const auto positions =
                embed_2d(Matrix::from_rows(centroids), config_.tsne_perplexity, derive_seed(config_.seed, {kConceptLayout}));
            for (std::size_t i = 0; i < ids.size(); ++i) snap_.concept_positions[ids[i]] = positions[i];
            snap_.hex = isomatch_layout(ids, positions);
            std::map<std::string, std::string> cluster_of;
            for (const auto& e : snap_.concepts)
                if (e.retained) cluster_of[e.record.concept_id] = *e.record.cluster_id;
            snap_.boundaries = cluster_boundaries(snap_.hex, cluster_of);
        }

        // Class navigation.
        const auto accuracies = class_accuracies(snap_.predictions, work_.size());
        std::vector<ClassPoint> points;
        std::vector<std::vector<double>> latents;
        for (std::size_t k = 0; k < work_.size(); ++k) latents.push_back(work_[k].mean_latent);
        const auto class_positions =
            embed_2d(Matrix::from_rows(latents), config_.tsne_perplexity, derive_seed(config_.seed, {kClassLayout}));
        for (std::size_t k = 0; k < work_.size(); ++k) {
            snap_.classes.push_back({k, manifest_.class_names[k], accuracies[k], class_positions[k], work_[k].mean_latent});
            points.push_back({k, class_positions[k], work_[k].mean_latent});
        }
        snap_.cliques = build_cliques(points, snap_.predictions, config_.cliques);
        report(0.9);

        // Influence matrices over each class's eval instances.
        for (std::size_t k = 0; k < work_.size(); ++k) {
            std::vector<Prediction> of_class;
            for (const auto& p : snap_.predictions)
                if (p.label == k) of_class.push_back(p);
            ClassInfluence ci;
            ci.class_k = k;
            ci.instance_ids = order_instances(of_class);
            std::vector<const ConceptEntry*> concepts;
            for (const auto& e : snap_.concepts)
                if (e.retained && e.record.class_k == k) concepts.push_back(&e);
            for (const auto* e : concepts) ci.concept_ids.push_back(e->record.concept_id);
            ci.influence = Matrix(concepts.size(), ci.instance_ids.size());
            for (const auto* e : concepts) {
                std::vector<std::size_t> trained;
                for (std::size_t i = 0; i < e->ensemble.cavs.size(); ++i)
                    if (e->ensemble.cavs[i]) trained.push_back(i);
                ci.raw_s.emplace_back(trained.size(), ci.instance_ids.size());
                ci.cav_indices.push_back(std::move(trained));
            }
            for (std::size_t j = 0; j < ci.instance_ids.size(); ++j) {
                const InstanceMeta& inst = manifest_.find(ci.instance_ids[j]);
                const Tensor input = fit_to_model(*model_, load_image(manifest_, inst));
                const auto g = embedding_gradient(gradient_at_layer(*model_, input, config_.layer, k), config_.embedding_mode);
                for (std::size_t c = 0; c < concepts.size(); ++c) {
                    const auto row = instance_influence(inst.instance_id, g, concepts[c]->record.concept_id,
                                                        concepts[c]->ensemble);
                    ci.influence(c, j) = row.influence.value_or(0.0);
                    for (std::size_t s = 0; s < row.samples.size(); ++s) ci.raw_s[c](s, j) = row.samples[s].s;
                }
            }
            snap_.influence.push_back(std::move(ci));
        }

        // Thumbnails exported with the snapshot: members nearest each retained centroid.
        std::set<std::string> exported;
        for (const auto& e : snap_.concepts) {
            if (!e.retained) continue;
            std::vector<std::size_t> order(e.member_distances.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return e.member_distances[a] < e.member_distances[b]; });
            for (std::size_t i = 0; i < order.size() && i < config_.exported_patches_per_concept; ++i)
                exported.insert(e.record.member_segment_ids[order[i]]);
        }
        snap_.exported_patches.assign(exported.begin(), exported.end());
        report(0.95);
    }

    PipelineConfig config_;
    const PipelineOptions& options_;
    Stage stage_ = Stage::queued;
    double progress_ = 0.0;
    DatasetManifest manifest_;
    std::optional<ModelGraph> model_;
    EmbeddingSetup setup_;
    std::vector<ClassWork> work_;
    std::vector<std::string> warnings_;
    Snapshot snap_;
};

}  // namespace

std::uint64_t clustering_seed(const PipelineConfig& config) {
    return derive_seed(config.seed, {kCluster, config.clustering.seed});
}

Snapshot run_pipeline(PipelineConfig config, const PipelineOptions& options) {
    return Runner(std::move(config), options).run();
}

}  // namespace cprobe
