#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "cprobe/analytics.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/fixture.hpp"
#include "cprobe/model_io.hpp"
#include "test_support.hpp"

namespace cprobe {
namespace {

Prediction pred(std::string id, std::size_t label, std::size_t predicted, double conf) {
    Prediction p;
    p.instance_id = std::move(id);
    p.label = label;
    p.predicted_class = predicted;
    p.confidence = conf;
    return p;
}

Cav unit_cav(std::vector<double> w) {
    const double n = std::sqrt(dot(w, w));
    for (double& v : w) v /= n;
    Cav c;
    c.weight = std::move(w);
    return c;
}

TEST(Histogram, BinEdges) {
    EXPECT_EQ(histogram_bin(0.0, 10), 0u);
    EXPECT_EQ(histogram_bin(0.0999, 10), 0u);
    EXPECT_EQ(histogram_bin(0.1, 10), 1u);
    EXPECT_EQ(histogram_bin(0.95, 10), 9u);
    EXPECT_EQ(histogram_bin(1.0, 10), 9u);
    EXPECT_EQ(histogram_bin(0.5, 1), 0u);
    EXPECT_EQ(histogram_bin(-0.1, 4), 0u);
}

TEST(Histogram, CountsClassesAndExcludesEmptyOnes) {
    const std::vector<Prediction> preds{pred("a", 0, 0, .9), pred("b", 0, 1, .8), pred("c", 1, 1, .7),
                                        pred("d", 1, 1, .6)};
    const auto h = accuracy_histogram(preds, 3, 10);
    EXPECT_EQ(h.excluded_classes, (std::vector<std::size_t>{2}));
    ASSERT_EQ(h.classes.size(), 2u);
    EXPECT_EQ(h.bin_of_class, (std::vector<std::size_t>{5, 9}));
    EXPECT_EQ(std::accumulate(h.counts.begin(), h.counts.end(), std::size_t{0}), 2u);
    EXPECT_THROW(accuracy_histogram(preds, 3, 0), ParameterError);
    EXPECT_THROW(accuracy_histogram({}, 3, 10), PreconditionError);
}

TEST(Accuracy, FixtureRecountFromRawLogits) {
    const Snapshot& snap = testing::fixture_snapshot();
    const ModelGraph model = fixture::planted_model();
    const auto manifest = load_manifest(testing::fixture_root() / "dataset");
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> tally;
    std::size_t eval = 0;
    for (const auto& inst : manifest.instances) {
        if (inst.split != Split::eval) continue;
        ++eval;
        const auto z = logits(model, load_image(manifest, inst));
        const auto arg = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
        const Prediction* p = snap.find_prediction(inst.instance_id);
        ASSERT_NE(p, nullptr) << inst.instance_id;
        EXPECT_EQ(p->predicted_class, arg);
        auto& t = tally[inst.label];
        ++t.second;
        t.first += arg == inst.label;
    }
    EXPECT_EQ(snap.predictions.size(), eval);
    const auto acc = class_accuracies(snap.predictions, 3);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(acc[k].correct, tally[k].first);
        EXPECT_EQ(acc[k].total, tally[k].second);
        EXPECT_EQ(snap.classes[k].accuracy, acc[k]);
    }
}

TEST(Confusion, FixtureCellsRecount) {
    const Snapshot& snap = testing::fixture_snapshot();
    const auto m = confusion(snap.predictions, {2, 0});
    ASSERT_EQ(m.counts.size(), 2u);
    for (std::size_t r = 0; r < 2; ++r) {
        const std::size_t truth = m.class_subset[r];
        std::size_t to2 = 0, to0 = 0, other = 0;
        for (const auto& p : snap.predictions) {
            if (*p.label != truth) continue;
            (p.predicted_class == 2 ? to2 : p.predicted_class == 0 ? to0 : other)++;
        }
        EXPECT_EQ(m.counts[r], (std::vector<std::size_t>{to2, to0, other}));
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_EQ(m.cell_instances[r][c].size(), m.counts[r][c]);
            for (std::size_t i = 1; i < m.cell_instances[r][c].size(); ++i)
                EXPECT_GE(snap.find_prediction(m.cell_instances[r][c][i - 1])->confidence,
                          snap.find_prediction(m.cell_instances[r][c][i])->confidence);
        }
    }
    EXPECT_THROW(confusion(snap.predictions, {}), ParameterError);
    EXPECT_THROW(confusion(snap.predictions, {1, 1}), ParameterError);
}

TEST(Influence, AllPositiveVotesGiveOne) {
    CavEnsemble ens;
    ens.cavs = {unit_cav({1, 0}), std::nullopt, unit_cav({1, 1})};
    const auto row = instance_influence("i", {2.0, 0.5}, "c", ens);
    ASSERT_TRUE(row.influence);
    EXPECT_EQ(*row.influence, 1.0);
    ASSERT_EQ(row.samples.size(), 2u);
    EXPECT_EQ(row.samples[1].cav_index, 2u);
    EXPECT_NEAR(row.samples[1].s, 2.5 / std::sqrt(2.0), 1e-12);
    ens.untestable = true;
    EXPECT_FALSE(instance_influence("i", {2.0, 0.5}, "c", ens).influence);
}

TEST(Influence, EnumeratedVotes) {
    // Four instances, one concept, twenty CAVs.
    Rng rng(12);
    CavEnsemble ens;
    for (int i = 0; i < 20; ++i) ens.cavs.push_back(unit_cav({rng.normal(), rng.normal(), rng.normal()}));
    for (int inst = 0; inst < 4; ++inst) {
        const std::vector<double> g{rng.normal(), rng.normal(), rng.normal()};
        std::size_t votes = 0;
        for (const auto& c : ens.cavs) votes += g[0] * c->weight[0] + g[1] * c->weight[1] + g[2] * c->weight[2] > 0;
        const auto row = instance_influence("i" + std::to_string(inst), g, "c", ens);
        EXPECT_EQ(*row.influence, static_cast<double>(votes) / 20.0);
        EXPECT_EQ(row.samples.size(), 20u);
    }
}

TEST(Influence, FixtureMatrixAgreesWithRawDerivatives) {
    const Snapshot& snap = testing::fixture_snapshot();
    ASSERT_EQ(snap.influence.size(), 3u);
    for (const auto& ci : snap.influence) {
        ASSERT_EQ(ci.influence.rows, ci.concept_ids.size());
        ASSERT_EQ(ci.influence.cols, ci.instance_ids.size());
        for (std::size_t c = 0; c < ci.concept_ids.size(); ++c)
            for (std::size_t i = 0; i < ci.instance_ids.size(); ++i) {
                std::size_t pos = 0;
                for (std::size_t r = 0; r < ci.raw_s[c].rows; ++r) pos += ci.raw_s[c](r, i) > 0.0;
                EXPECT_EQ(ci.influence(c, i), static_cast<double>(pos) / static_cast<double>(ci.raw_s[c].rows));
            }
    }
}

TEST(Order, CorrectByConfidenceThenWrongAscending) {
    const std::vector<Prediction> preds{pred("a", 0, 0, .9), pred("b", 0, 1, .7), pred("c", 0, 2, .6),
                                        pred("d", 0, 0, .95)};
    EXPECT_EQ(order_instances(preds), (std::vector<std::string>{"d", "a", "c", "b"}));
}

TEST(Order, TiesBreakByIdAndResultIsPermutation) {
    const std::vector<Prediction> preds{pred("z", 0, 0, .8), pred("y", 0, 0, .8), pred("x", 0, 1, .5),
                                        pred("w", 0, 1, .5)};
    EXPECT_EQ(order_instances(preds), (std::vector<std::string>{"y", "z", "w", "x"}));
    const Snapshot& snap = testing::fixture_snapshot();
    for (const auto& ci : snap.influence) {
        std::vector<Prediction> of_class;
        for (const auto& p : snap.predictions)
            if (*p.label == ci.class_k) of_class.push_back(p);
        const auto order = order_instances(of_class);
        EXPECT_EQ(order, ci.instance_ids);
        auto a = order;
        std::vector<std::string> b;
        for (const auto& p : of_class) b.push_back(p.instance_id);
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        EXPECT_EQ(a, b);
    }
}

TEST(Presence, SyntheticRadiusTest) {
    ConceptRecord near, far;
    near.concept_id = "near";
    near.centroid = {0, 0};
    near.radius = 1.0;
    far.concept_id = "far";
    far.centroid = {10, 10};
    far.radius = 1.0;
    const std::vector<PatchEmbedding> segs{{"s1", "i", {0.6, 0.8}}, {"s2", "i", {0.7, 0.8}}};
    const auto p = concept_presence("i", segs, {near, far});
    ASSERT_EQ(p.size(), 2u);
    EXPECT_TRUE(p[0].present);
    EXPECT_EQ(p[0].matching_segment_ids, (std::vector<std::string>{"s1"}));  // boundary is inclusive
    EXPECT_FALSE(p[1].present);
    EXPECT_TRUE(concept_presence("i", segs, {}).empty());
    EXPECT_THROW(concept_presence("i", {{"s", "i", {1.0}}}, {near}), PreconditionError);
}

TEST(Presence, FixtureMembersAreFoundInTheirImages) {
    const Snapshot& snap = testing::fixture_snapshot();
    // The stored model holds float32 weights, exactly what the pipeline used.
    const ModelGraph model = load_model(testing::fixture_root() / "model");
    const auto manifest = load_manifest(testing::fixture_root() / "dataset");
    EmbeddingSetup setup;
    setup.layer = snap.config.layer;
    setup.mode = snap.config.embedding_mode;
    setup.resolutions = snap.config.segment_resolutions;
    setup.segmentation = snap.config.segmentation;
    setup.channel_means = snap.channel_means;
    int checked = 0;
    for (const ConceptEntry* c : snap.retained_concepts()) {
        if (checked++ >= 6) break;
        const std::string& seg = c->record.member_segment_ids.front();
        const std::string& inst = snap.segments.at(seg).instance_id;
        const auto p = concept_presence(model, load_image(manifest, manifest.find(inst)), inst, {c->record}, setup);
        ASSERT_EQ(p.size(), 1u);
        EXPECT_TRUE(p[0].present) << c->record.concept_id;
        EXPECT_NE(std::find(p[0].matching_segment_ids.begin(), p[0].matching_segment_ids.end(), seg),
                  p[0].matching_segment_ids.end());
    }
    EXPECT_GT(checked, 0);
}

TEST(Box, LinearInterpolationQuantiles) {
    const std::vector<double> v{0.65, 0.35, 0.5};
    const BoxStats b = box_stats(v);
    EXPECT_DOUBLE_EQ(b.min, 0.35);
    EXPECT_DOUBLE_EQ(b.q1, 0.425);
    EXPECT_DOUBLE_EQ(b.median, 0.5);
    EXPECT_DOUBLE_EQ(b.q3, 0.575);
    EXPECT_DOUBLE_EQ(b.max, 0.65);
    const std::vector<double> one{0.7};
    const BoxStats s = box_stats(one);
    EXPECT_EQ(s.min, 0.7);
    EXPECT_EQ(s.q1, 0.7);
    EXPECT_EQ(s.max, 0.7);
    EXPECT_THROW(box_stats(std::vector<double>{}), PreconditionError);
}

ConceptRecord scored(const std::string& id, std::size_t k, const std::string& cluster, double score) {
    ConceptRecord c;
    c.concept_id = id;
    c.class_k = k;
    c.cluster_id = cluster;
    TcavStats s;
    s.mean_score = score;
    c.tcav = s;
    return c;
}

TEST(Summary, RowsByFrequencyWithBoxes) {
    const std::vector<ConceptRecord> concepts{scored("a1", 0, "CC2", 0.35), scored("a2", 0, "CC2", 0.5),
                                              scored("a3", 0, "CC2", 0.65), scored("a4", 0, "CC1", 1.0),
                                              scored("b1", 1, "CC1", 0.9),  scored("b2", 1, "CC1", 0.8),
                                              scored("c1", 2, "CC3", 0.2)};
    std::vector<ConceptCluster> clusters{{"CC1", {}, "", ""}, {"CC2", {}, "", ""}, {"CC3", {}, "", ""}};
    const auto s = class_concept_summary(0, concepts, clusters);
    ASSERT_EQ(s.rows.size(), 2u);
    // CC1 appears 3 times across classes, CC2 three times too; ties follow cluster order.
    EXPECT_EQ(s.rows[0].cluster_id, "CC1");
    EXPECT_EQ(s.rows[0].frequency, 3u);
    EXPECT_EQ(s.rows[1].cluster_id, "CC2");
    EXPECT_EQ(s.rows[1].frequency, 3u);
    EXPECT_DOUBLE_EQ(s.rows[1].box.q1, 0.425);
    EXPECT_DOUBLE_EQ(s.rows[1].box.median, 0.5);
    EXPECT_EQ(s.histogram, (std::vector<std::size_t>{0, 0, 0, 1, 0, 1, 1, 0, 0, 1}));
    // Restricting the scope to class 0 changes the frequencies.
    const auto only0 = class_concept_summary(0, concepts, clusters, {0});
    EXPECT_EQ(only0.rows[0].cluster_id, "CC2");
    EXPECT_EQ(only0.rows[0].frequency, 3u);
    EXPECT_EQ(only0.rows[1].frequency, 1u);
    EXPECT_THROW(class_concept_summary(5, concepts, clusters), PreconditionError);
}

TEST(Summary, SingleConceptClass) {
    const auto s = class_concept_summary(2, {scored("c1", 2, "CC3", 0.2)}, {{"CC3", {}, "", ""}});
    ASSERT_EQ(s.rows.size(), 1u);
    EXPECT_EQ(s.rows[0].box.median, 0.2);
    EXPECT_EQ(s.rows[0].frequency, 1u);
}

TEST(FitToModel, ResizesOnlyWhenNeeded) {
    const ModelGraph model = fixture::planted_model(32);
    const Tensor same({32, 32, 3}, 0.5);
    EXPECT_EQ(fit_to_model(model, same), same);
    EXPECT_EQ(fit_to_model(model, Tensor({16, 16, 3}, 0.5)).shape(), (Shape{32, 32, 3}));
    EXPECT_THROW(fit_to_model(model, Tensor({32, 32, 1})), ValidationError);
}

}  // namespace
}  // namespace cprobe
