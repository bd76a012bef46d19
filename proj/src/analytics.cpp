#include "cprobe/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cprobe/errors.hpp"
#include "cprobe/stats.hpp"

namespace cprobe {

Tensor fit_to_model(const ModelGraph& model, const Tensor& image) {
    const auto& want = model.input_shape();
    if (image.rank() != 3 || image.shape()[2] != want[2])
        throw ValidationError("image " + shape_string(image.shape()) + " does not match the model's channel count");
    if (image.shape()[0] == want[0] && image.shape()[1] == want[1]) return image;
    return resize_bilinear(image, want[0], want[1]);
}

PredictAllResult predict_all(const ModelGraph& model, const DatasetManifest& manifest) {
    PredictAllResult out;
    for (const InstanceMeta* inst : manifest.split_instances(Split::eval)) {
        try {
            Prediction p = make_prediction(logits(model, fit_to_model(model, load_image(manifest, *inst))));
            p.instance_id = inst->instance_id;
            p.label = inst->label;
            out.predictions.push_back(std::move(p));
        } catch (const Error& e) {
            out.failures.push_back({inst->instance_id, e.what()});
        }
    }
    return out;
}

std::vector<ClassAccuracy> class_accuracies(const std::vector<Prediction>& predictions, std::size_t n_classes) {
    std::vector<ClassAccuracy> acc(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k) acc[k].class_k = k;
    for (const auto& p : predictions) {
        if (!p.label || *p.label >= n_classes) continue;
        ++acc[*p.label].total;
        if (p.correct()) ++acc[*p.label].correct;
    }
    for (auto& a : acc)
        a.accuracy = a.total ? static_cast<double>(a.correct) / static_cast<double>(a.total) : 0.0;
    return acc;
}

std::size_t histogram_bin(double value, std::size_t n_bins) {
    const double scaled = std::floor(value * static_cast<double>(n_bins));
    if (scaled <= 0.0) return 0;
    return std::min(n_bins - 1, static_cast<std::size_t>(scaled));
}

AccuracyHistogram accuracy_histogram(const std::vector<Prediction>& predictions, std::size_t n_classes,
                                     std::size_t n_bins) {
    if (n_bins == 0) throw ParameterError("histogram needs at least one bin");
    AccuracyHistogram h;
    h.counts.assign(n_bins, 0);
    for (const auto& a : class_accuracies(predictions, n_classes)) {
        if (a.total == 0) {
            h.excluded_classes.push_back(a.class_k);
            continue;
        }
        const std::size_t bin = histogram_bin(a.accuracy, n_bins);
        ++h.counts[bin];
        h.classes.push_back(a);
        h.bin_of_class.push_back(bin);
    }
    if (h.classes.empty()) throw PreconditionError("no class has eval instances");
    return h;
}

namespace {

bool by_confidence_desc(const Prediction* a, const Prediction* b) {
    if (a->confidence != b->confidence) return a->confidence > b->confidence;
    return a->instance_id < b->instance_id;
}

}  // namespace

ConfusionMatrix confusion(const std::vector<Prediction>& predictions, const std::vector<std::size_t>& class_subset) {
    if (class_subset.empty()) throw ParameterError("confusion needs a non-empty class subset");
    const std::size_t n = class_subset.size();
    std::map<std::size_t, std::size_t> position;
    for (std::size_t i = 0; i < n; ++i) {
        if (!position.emplace(class_subset[i], i).second) throw ParameterError("duplicate class in subset");
    }
    std::vector<std::vector<std::vector<const Prediction*>>> cells(n, std::vector<std::vector<const Prediction*>>(n + 1));
    for (const auto& p : predictions) {
        if (!p.label) continue;
        const auto row = position.find(*p.label);
        if (row == position.end()) continue;
        const auto col = position.find(p.predicted_class);
        cells[row->second][col == position.end() ? n : col->second].push_back(&p);
    }
    ConfusionMatrix m;
    m.class_subset = class_subset;
    m.counts.assign(n, std::vector<std::size_t>(n + 1, 0));
    m.cell_instances.assign(n, std::vector<std::vector<std::string>>(n + 1));
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c <= n; ++c) {
            auto& cell = cells[r][c];
            std::sort(cell.begin(), cell.end(), by_confidence_desc);
            m.counts[r][c] = cell.size();
            for (const Prediction* p : cell) m.cell_instances[r][c].push_back(p->instance_id);
        }
    return m;
}

InstanceInfluenceRow instance_influence(const std::string& instance_id, const std::vector<double>& gradient,
                                        const std::string& concept_id, const CavEnsemble& ensemble) {
    InstanceInfluenceRow row{instance_id, concept_id, std::nullopt, {}};
    if (ensemble.untestable) return row;
    std::size_t votes = 0;
    for (std::size_t i = 0; i < ensemble.cavs.size(); ++i) {
        if (!ensemble.cavs[i]) continue;
        const double s = directional_derivative(gradient, *ensemble.cavs[i]);
        row.samples.push_back({i, s, s > 0.0});
        if (s > 0.0) ++votes;
    }
    if (!row.samples.empty()) row.influence = static_cast<double>(votes) / static_cast<double>(row.samples.size());
    return row;
}

InstanceInfluenceRow instance_influence(const ModelGraph& model, const Tensor& image, const std::string& instance_id,
                                        const ConceptRecord& concept_record, const CavEnsemble& ensemble,
                                        const std::string& layer, EmbeddingMode mode) {
    const Tensor g = gradient_at_layer(model, image, layer, concept_record.class_k);
    return instance_influence(instance_id, embedding_gradient(g, mode), concept_record.concept_id, ensemble);
}

std::vector<std::string> order_instances(const std::vector<Prediction>& predictions_of_class) {
    std::vector<const Prediction*> correct, wrong;
    for (const auto& p : predictions_of_class) (p.correct() ? correct : wrong).push_back(&p);
    std::sort(correct.begin(), correct.end(), by_confidence_desc);
    std::sort(wrong.begin(), wrong.end(), [](const Prediction* a, const Prediction* b) {
        if (a->confidence != b->confidence) return a->confidence < b->confidence;
        return a->instance_id < b->instance_id;
    });
    std::vector<std::string> ids;
    for (const Prediction* p : correct) ids.push_back(p->instance_id);
    for (const Prediction* p : wrong) ids.push_back(p->instance_id);
    return ids;
}

std::vector<ConceptPresence> concept_presence(const std::string& instance_id,
                                              const std::vector<PatchEmbedding>& segment_embeddings,
                                              const std::vector<ConceptRecord>& concepts_of_interest) {
    std::vector<ConceptPresence> out;
    for (const auto& c : concepts_of_interest) {
        ConceptPresence p{instance_id, c.concept_id, {}, false};
        for (const auto& e : segment_embeddings) {
            if (e.vector.size() != c.centroid.size())
                throw PreconditionError("segment embedding and concept centroid differ in dimensionality");
            if (euclidean_distance(e.vector, c.centroid) <= c.radius) p.matching_segment_ids.push_back(e.segment_id);
        }
        p.present = !p.matching_segment_ids.empty();
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<ConceptPresence> concept_presence(const ModelGraph& model, const Tensor& image,
                                              const std::string& instance_id,
                                              const std::vector<ConceptRecord>& concepts_of_interest,
                                              const EmbeddingSetup& setup) {
    if (concepts_of_interest.empty()) return {};
    const SegmentedInstance seg = segment_and_embed(model, image, instance_id, setup);
    return concept_presence(instance_id, seg.embeddings, concepts_of_interest);
}

BoxStats box_stats(std::span<const double> values) {
    if (values.empty()) throw PreconditionError("box statistics need at least one value");
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    return {*lo, quantile(values, 0.25), quantile(values, 0.5), quantile(values, 0.75), *hi};
}

ClassConceptSummary class_concept_summary(std::size_t class_k, const std::vector<ConceptRecord>& concepts,
                                          const std::vector<ConceptCluster>& clusters,
                                          const std::vector<std::size_t>& selected_classes) {
    auto selected = [&](std::size_t k) {
        return selected_classes.empty() ||
               std::find(selected_classes.begin(), selected_classes.end(), k) != selected_classes.end();
    };
    std::map<std::string, std::size_t> cluster_order, frequency;
    for (std::size_t i = 0; i < clusters.size(); ++i) cluster_order[clusters[i].cluster_id] = i;
    for (const auto& c : concepts)
        if (c.cluster_id && selected(c.class_k)) ++frequency[*c.cluster_id];

    ClassConceptSummary out;
    out.class_k = class_k;
    out.histogram.assign(10, 0);
    std::map<std::string, SummaryRow> rows;
    for (const auto& c : concepts) {
        if (c.class_k != class_k || !c.tcav) continue;
        ++out.histogram[histogram_bin(c.tcav->mean_score, 10)];
        const std::string cid = c.cluster_id.value_or("");
        SummaryRow& row = rows[cid];
        row.cluster_id = cid;
        row.concept_ids.push_back(c.concept_id);
        row.scores.push_back(c.tcav->mean_score);
    }
    if (rows.empty()) throw PreconditionError("class has no retained concept");
    for (auto& [cid, row] : rows) {
        row.box = box_stats(row.scores);
        row.frequency = frequency.count(cid) ? frequency[cid] : 0;
        out.rows.push_back(std::move(row));
    }
    auto order_of = [&](const std::string& cid) {
        const auto it = cluster_order.find(cid);
        return it == cluster_order.end() ? clusters.size() : it->second;
    };
    std::sort(out.rows.begin(), out.rows.end(), [&](const SummaryRow& a, const SummaryRow& b) {
        if (a.frequency != b.frequency) return a.frequency > b.frequency;
        return order_of(a.cluster_id) < order_of(b.cluster_id);
    });
    return out;
}

}  // namespace cprobe
