#include "cprobe/service.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <numeric>
#include <regex>
#include <set>

#include <httplib.h>

#include "cprobe/analytics.hpp"
#include "cprobe/clustering.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/model_io.hpp"
#include "cprobe/png_io.hpp"
#include "cprobe/snapshot_io.hpp"

namespace cprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto micros =
        std::chrono::duration_cast<std::chrono::microseconds>(now.time_since_epoch()).count() % 1000000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    const std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    std::snprintf(buf + n, sizeof buf - n, ".%06lldZ", static_cast<long long>(micros));
    return buf;
}

}  // namespace

// ---- annotations -------------------------------------------------------------

AnnotationStore::AnnotationStore(fs::path file) : file_(std::move(file)) {}

json AnnotationStore::read() const {
    if (!fs::exists(file_)) return json::object();
    json doc = json::parse(read_file(file_), nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw CorruptionError("annotations file is not a JSON object: " + file_.string());
    return doc;
}

Annotation AnnotationStore::append(const std::string& snapshot_id, const std::string& cluster_id,
                                   const std::string& text) {
    std::lock_guard lock(mutex_);
    json doc = read();
    Annotation a{text, utc_timestamp()};
    doc[snapshot_id][cluster_id].push_back({{"text", a.text}, {"created_at", a.created_at}});
    if (!file_.parent_path().empty()) fs::create_directories(file_.parent_path());
    write_file_atomic(file_, doc.dump(2) + "\n");
    return a;
}

std::vector<Annotation> AnnotationStore::list(const std::string& snapshot_id, const std::string& cluster_id) const {
    std::lock_guard lock(mutex_);
    const json doc = read();
    std::vector<Annotation> out;
    if (!doc.contains(snapshot_id) || !doc[snapshot_id].contains(cluster_id)) return out;
    for (const auto& e : doc[snapshot_id][cluster_id])
        out.push_back({e.at("text").get<std::string>(), e.at("created_at").get<std::string>()});
    return out;
}

// ---- run queue ---------------------------------------------------------------

json to_json(const RunStatus& s) {
    json j{{"run_id", s.run_id},
           {"stage", to_string(s.stage)},
           {"progress", s.progress},
           {"warnings", s.warnings},
           {"snapshot_id", s.snapshot_id ? json(*s.snapshot_id) : json(nullptr)}};
    j["error"] = s.failed_stage ? json{{"stage", to_string(*s.failed_stage)}, {"cause", s.error}} : json(nullptr);
    return j;
}

RunQueue::RunQueue(fs::path snapshot_root, DoneCallback on_done, std::optional<fs::path> checkpoint_dir)
    : root_(std::move(snapshot_root)), on_done_(std::move(on_done)), checkpoint_dir_(std::move(checkpoint_dir)) {
    worker_ = std::thread([this] { work(); });
}

RunQueue::~RunQueue() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
        pending_.clear();
    }
    wake_.notify_all();
    if (worker_.joinable()) worker_.join();
}

std::string RunQueue::submit(PipelineConfig config) {
    std::string id;
    {
        std::lock_guard lock(mutex_);
        id = "run-" + std::to_string(next_id_++);
        RunStatus st;
        st.run_id = id;
        statuses_[id] = st;
        pending_.emplace_back(id, std::move(config));
    }
    wake_.notify_all();
    return id;
}

std::optional<RunStatus> RunQueue::status(const std::string& run_id) const {
    std::lock_guard lock(mutex_);
    const auto it = statuses_.find(run_id);
    if (it == statuses_.end()) return std::nullopt;
    return it->second;
}

std::size_t RunQueue::queue_position(const std::string& run_id) const {
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < pending_.size(); ++i)
        if (pending_[i].first == run_id) return i + (busy_ ? 1 : 0);
    return 0;
}

void RunQueue::wait_idle() {
    std::unique_lock lock(mutex_);
    idle_.wait(lock, [&] { return !busy_ && pending_.empty(); });
}

void RunQueue::work() {
    for (;;) {
        std::unique_lock lock(mutex_);
        wake_.wait(lock, [&] { return stopping_ || !pending_.empty(); });
        if (stopping_) return;
        auto [id, config] = std::move(pending_.front());
        pending_.pop_front();
        busy_ = true;
        lock.unlock();

        auto update = [&](auto&& fn) {
            std::lock_guard guard(mutex_);
            fn(statuses_[id]);
        };
        PipelineOptions options;
        options.checkpoint_dir = checkpoint_dir_;
        options.on_progress = [&](Stage stage, double progress) {
            update([&](RunStatus& st) {
                st.stage = stage;
                st.progress = progress;
            });
        };
        options.on_warning = [&](const std::string& w) { update([&](RunStatus& st) { st.warnings.push_back(w); }); };
        try {
            Snapshot snap = run_pipeline(config, options);
            update([](RunStatus& st) {
                st.stage = Stage::persisting;
                st.progress = 0.97;
            });
            try {
                fs::create_directories(root_);
                const fs::path dir = save_snapshot(snap, root_);
                auto shared = std::make_shared<const Snapshot>(std::move(snap));
                if (on_done_) on_done_(dir, shared);
                update([&](RunStatus& st) {
                    st.stage = Stage::done;
                    st.progress = 1.0;
                    st.snapshot_id = shared->snapshot_id;
                });
            } catch (const std::exception& e) {
                throw StageError(Stage::persisting, e.what());
            }
        } catch (const StageError& e) {
            update([&](RunStatus& st) {
                st.stage = Stage::failed;
                st.failed_stage = e.stage();
                st.error = e.cause();
            });
        } catch (const std::exception& e) {
            update([&](RunStatus& st) {
                st.failed_stage = st.stage;
                st.stage = Stage::failed;
                st.error = e.what();
            });
        }
        lock.lock();
        busy_ = false;
        if (pending_.empty()) idle_.notify_all();
    }
}

// ---- served snapshot ---------------------------------------------------------

std::shared_ptr<const ServedSnapshot> ServedSnapshot::open(const fs::path& dir, std::shared_ptr<const Snapshot> snapshot) {
    auto s = std::make_shared<ServedSnapshot>();
    s->dir = dir;
    s->snapshot = std::move(snapshot);
    try {
        s->dataset = load_manifest(s->snapshot->config.dataset_path);
        s->model.emplace(load_model(s->snapshot->config.model_path));
    } catch (const std::exception& e) {
        s->dataset.reset();
        s->model.reset();
        s->inputs_error = e.what();
    }
    return s;
}

// ---- API ---------------------------------------------------------------------

namespace {

class HttpError : public Error {
public:
    HttpError(int status, const std::string& what) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

ApiResponse json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

ApiResponse error_response(int status, const std::string& kind, const std::string& message) {
    return json_response(status, {{"error", {{"kind", kind}, {"message", message}}}});
}

json point(const Point2& p) { return json::array({p[0], p[1]}); }

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string patch_url(const std::string& segment_id) { return "/assets/patches/" + segment_id + ".png"; }
std::string image_url(const std::string& instance_id) { return "/assets/images/" + instance_id + ".png"; }

json parse_body(const ApiRequest& req) {
    json body = json::parse(req.body.empty() ? std::string("{}") : req.body, nullptr, false);
    if (body.is_discarded()) throw HttpError(400, "request body is not valid JSON");
    if (!body.is_object()) throw HttpError(400, "request body must be a JSON object");
    return body;
}

std::size_t query_size(const ApiRequest& req, const std::string& key, std::size_t fallback) {
    const auto it = req.query.find(key);
    if (it == req.query.end() || it->second.empty()) return fallback;
    const std::string& v = it->second;
    if (!std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; }) || v.size() > 9)
        throw HttpError(400, "query parameter '" + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(std::stoul(v));
}

std::size_t class_index(const Snapshot& s, const std::string& text) {
    if (text.size() > 9) throw HttpError(404, "unknown class " + text);
    const std::size_t k = std::stoul(text);
    if (k >= s.class_names.size()) throw HttpError(404, "unknown class " + text);
    return k;
}

const ConceptEntry& concept_or_404(const Snapshot& s, const std::string& id) {
    const ConceptEntry* e = s.find_concept(id);
    if (!e) throw HttpError(404, "unknown concept " + id);
    return *e;
}

void require_inputs(const ServedSnapshot& sv) {
    if (!sv.model || !sv.dataset)
        throw HttpError(503, "dataset or model of the served snapshot is unavailable: " + sv.inputs_error);
}

std::optional<double> mean_score(const ConceptEntry& e) {
    return e.record.tcav ? std::optional<double>(e.record.tcav->mean_score) : std::nullopt;
}

// Member indices by distance to the centroid, ties by segment id.
std::vector<std::size_t> ranked_members(const ConceptEntry& e) {
    std::vector<std::size_t> order(e.record.member_segment_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double da = a < e.member_distances.size() ? e.member_distances[a] : 0.0;
        const double db = b < e.member_distances.size() ? e.member_distances[b] : 0.0;
        if (da != db) return da < db;
        return e.record.member_segment_ids[a] < e.record.member_segment_ids[b];
    });
    return order;
}

json patches_json(const Snapshot& s, const ConceptEntry& e, std::size_t limit) {
    json out = json::array();
    const auto order = ranked_members(e);
    for (std::size_t i = 0; i < order.size() && i < limit; ++i) {
        const std::string& id = e.record.member_segment_ids[order[i]];
        json p{{"segment_id", id},
               {"distance", order[i] < e.member_distances.size() ? e.member_distances[order[i]] : 0.0},
               {"url", patch_url(id)}};
        const auto seg = s.segments.find(id);
        p["instance_id"] = seg != s.segments.end() ? json(seg->second.instance_id) : json(nullptr);
        p["resolution"] = seg != s.segments.end() ? json(seg->second.resolution) : json(nullptr);
        out.push_back(p);
    }
    return out;
}

json concept_summary(const Snapshot& s, const ConceptEntry& e) {
    const ConceptRecord& r = e.record;
    json j{{"concept_id", r.concept_id},
           {"class_k", r.class_k},
           {"class_name", s.class_names.at(r.class_k)},
           {"display_name", r.display_name},
           {"size", r.member_segment_ids.size()},
           {"retained", e.retained},
           {"mean_score", optional_number(mean_score(e))},
           {"p_value", r.tcav ? json(r.tcav->p_value) : json(nullptr)},
           {"cluster_id", r.cluster_id ? json(*r.cluster_id) : json(nullptr)}};
    json urls = json::array();
    for (const auto& p : patches_json(s, e, 5)) urls.push_back(p["url"]);
    j["patch_urls"] = urls;
    return j;
}

json clique_json(const Snapshot& s, const Clique& q) {
    json reps = json::array();
    for (std::size_t i = 0; i < q.member_classes.size(); ++i) {
        const std::string id = i < q.representative_images.size() ? q.representative_images[i] : "";
        reps.push_back({{"class_k", q.member_classes[i]},
                        {"instance_id", id.empty() ? json(nullptr) : json(id)},
                        {"image_url", id.empty() ? json(nullptr) : json(image_url(id))}});
    }
    json names = json::array();
    for (std::size_t k : q.member_classes) names.push_back(s.class_names.at(k));
    return {{"clique_id", q.clique_id},       {"member_classes", q.member_classes}, {"member_names", names},
            {"center", point(q.center)},      {"radius", q.radius},                 {"mean_accuracy", q.mean_accuracy},
            {"representative_images", reps}};
}

json class_points_json(const Snapshot& s) {
    json out = json::array();
    for (const auto& c : s.classes)
        out.push_back({{"class_k", c.class_k},
                       {"name", c.name},
                       {"position", point(c.position)},
                       {"accuracy", c.accuracy.total ? json(c.accuracy.accuracy) : json(nullptr)},
                       {"correct", c.accuracy.correct},
                       {"total", c.accuracy.total}});
    return out;
}

json cliques_json(const Snapshot& s) {
    json out = json::array();
    for (const auto& q : s.cliques) out.push_back(clique_json(s, q));
    return out;
}

json prediction_json(const Snapshot& s, const Prediction& p) {
    return {{"instance_id", p.instance_id},
            {"label", p.label ? json(*p.label) : json(nullptr)},
            {"label_name", p.label ? json(s.class_names.at(*p.label)) : json(nullptr)},
            {"predicted_class", p.predicted_class},
            {"predicted_name", s.class_names.at(p.predicted_class)},
            {"confidence", p.confidence},
            {"probabilities", p.probabilities},
            {"correct", p.correct()}};
}

std::string latest_annotation(const AnnotationStore& store, const Snapshot& s, const ConceptCluster& c) {
    const auto list = store.list(s.snapshot_id, c.cluster_id);
    return list.empty() ? c.annotation : list.back().text;
}

json cluster_json(const AnnotationStore& store, const Snapshot& s, const ConceptCluster& c) {
    return {{"cluster_id", c.cluster_id},
            {"member_concept_ids", c.member_concept_ids},
            {"medoid_concept_id", c.medoid_concept_id},
            {"size", c.member_concept_ids.size()},
            {"annotation", latest_annotation(store, s, c)}};
}

json influence_row_json(std::size_t class_k, const InstanceInfluenceRow& row) {
    json samples = json::array();
    for (const auto& smp : row.samples)
        samples.push_back({{"cav_index", smp.cav_index}, {"s", smp.s}, {"positive", smp.positive}});
    return {{"concept_id", row.concept_id},
            {"class_k", class_k},
            {"influence", optional_number(row.influence)},
            {"samples", samples}};
}

Tensor load_instance_image(const ServedSnapshot& sv, const std::string& instance_id) {
    require_inputs(sv);
    return load_image(*sv.dataset, sv.dataset->find(instance_id));
}

// Stored matrix values when the snapshot holds them, else computed from the model.
InstanceInfluenceRow influence_of(const ServedSnapshot& sv, const std::string& instance_id, const ConceptEntry& e,
                                  const Tensor* image) {
    const Snapshot& s = *sv.snapshot;
    for (const auto& ci : s.influence) {
        if (ci.class_k != e.record.class_k) continue;
        const auto col = std::find(ci.instance_ids.begin(), ci.instance_ids.end(), instance_id);
        const auto row = std::find(ci.concept_ids.begin(), ci.concept_ids.end(), e.record.concept_id);
        if (col == ci.instance_ids.end() || row == ci.concept_ids.end()) break;
        const std::size_t j = static_cast<std::size_t>(col - ci.instance_ids.begin());
        const std::size_t c = static_cast<std::size_t>(row - ci.concept_ids.begin());
        InstanceInfluenceRow out{instance_id, e.record.concept_id, std::nullopt, {}};
        if (!e.ensemble.untestable) out.influence = ci.influence(c, j);
        for (std::size_t t = 0; t < ci.cav_indices[c].size(); ++t) {
            const double sv_ = ci.raw_s[c](t, j);
            out.samples.push_back({ci.cav_indices[c][t], sv_, sv_ > 0.0});
        }
        return out;
    }
    require_inputs(sv);
    const Tensor input = fit_to_model(*sv.model, *image);
    return instance_influence(*sv.model, input, instance_id, e.record, e.ensemble, s.config.layer, s.config.embedding_mode);
}

EmbeddingSetup embedding_setup(const Snapshot& s) {
    EmbeddingSetup setup;
    setup.layer = s.config.layer;
    setup.mode = s.config.embedding_mode;
    setup.resolutions = s.config.segment_resolutions;
    setup.segmentation = s.config.segmentation;
    setup.channel_means = s.channel_means;
    return setup;
}

json polygons_json(const Segment& seg) {
    json out = json::array();
    for (const auto& ring : mask_outline(seg.mask, seg.height, seg.width)) {
        json r = json::array();
        for (const auto& p : ring) r.push_back({p[0], p[1]});
        out.push_back(r);
    }
    return out;
}

using Handler =
    std::function<ApiResponse(const ApiService&, const ServedSnapshot&, const ApiRequest&, const std::smatch&)>;

struct Route {
    std::string method;
    std::regex pattern;
    Handler handler;
};

}  // namespace

ApiService::ApiService(const fs::path& snapshot_dir, ServiceOptions options)
    : options_(std::move(options)),
      root_(fs::absolute(snapshot_dir).lexically_normal().parent_path()),
      annotations_(root_ / "annotations.json") {
    const fs::path dir = fs::absolute(snapshot_dir).lexically_normal();
    auto snap = std::make_shared<const Snapshot>(load_snapshot(dir));
    served_ = ServedSnapshot::open(dir, std::move(snap));
    runs_ = std::make_unique<RunQueue>(
        root_, [this](const fs::path& dir, std::shared_ptr<const Snapshot> s) { swap(ServedSnapshot::open(dir, std::move(s))); },
        options_.checkpoint_dir);
}

std::shared_ptr<const ServedSnapshot> ApiService::current() const {
    std::lock_guard lock(swap_mutex_);
    return served_;
}

void ApiService::swap(std::shared_ptr<const ServedSnapshot> next) {
    std::lock_guard lock(swap_mutex_);
    served_ = std::move(next);
}

ApiResponse ApiService::handle(const ApiRequest& request) const {
    try {
        return dispatch(request);
    } catch (const HttpError& e) {
        const char* kind = e.status() == 404 ? "not_found" : e.status() == 503 ? "unavailable" : e.status() == 409 ? "conflict" : "bad_request";
        return error_response(e.status(), kind, e.what());
    } catch (const LookupError& e) {
        return error_response(404, "not_found", e.what());
    } catch (const ParameterError& e) {
        return error_response(400, "bad_request", e.what());
    } catch (const ValidationError& e) {
        return error_response(400, "bad_request", e.what());
    } catch (const json::exception& e) {
        return error_response(400, "bad_request", e.what());
    } catch (const PreconditionError& e) {
        return error_response(409, "conflict", e.what());
    } catch (const std::exception& e) {
        return error_response(500, "internal", e.what());
    }
}

ApiResponse ApiService::dispatch(const ApiRequest& req) const {
    static const std::vector<Route> table = {
        {"GET", std::regex("/api/snapshot"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch&) {
             const Snapshot& s = *sv.snapshot;
             return json_response(200, {{"snapshot_id", s.snapshot_id},
                                        {"created_at", s.created_at},
                                        {"schema_version", s.schema_version},
                                        {"class_names", s.class_names},
                                        {"config", config_to_json(s.config)},
                                        {"warnings", s.warnings},
                                        {"inputs_available", sv.model.has_value() && sv.dataset.has_value()}});
         }},
        {"GET", std::regex("/api/classes"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch&) {
             const Snapshot& s = *sv.snapshot;
             json hist = nullptr;
             try {
                 const auto h = accuracy_histogram(s.predictions, s.class_names.size(), 10);
                 json bins = json::object();
                 for (std::size_t i = 0; i < h.classes.size(); ++i) bins[std::to_string(h.classes[i].class_k)] = h.bin_of_class[i];
                 hist = {{"n_bins", 10}, {"counts", h.counts}, {"bin_of_class", bins}, {"excluded_classes", h.excluded_classes}};
             } catch (const PreconditionError&) {
             }
             return json_response(200, {{"snapshot_id", s.snapshot_id},
                                        {"classes", class_points_json(s)},
                                        {"cliques", cliques_json(s)},
                                        {"histogram", hist}});
         }},
        {"GET", std::regex("/api/classes/(\\d+)/concepts"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest& req, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const std::size_t k = class_index(s, m[1]);
             std::vector<std::size_t> selected;
             if (auto it = req.query.find("selected"); it != req.query.end() && !it->second.empty()) {
                 std::stringstream ss(it->second);
                 std::string item;
                 while (std::getline(ss, item, ',')) selected.push_back(class_index(s, item));
             }
             std::vector<const ConceptEntry*> own;
             json discarded = json::array();
             for (const auto& e : s.concepts) {
                 if (e.record.class_k != k) continue;
                 if (e.retained)
                     own.push_back(&e);
                 else
                     discarded.push_back(e.record.concept_id);
             }
             std::stable_sort(own.begin(), own.end(), [](const ConceptEntry* a, const ConceptEntry* b) {
                 const double sa = mean_score(*a).value_or(0.0), sb = mean_score(*b).value_or(0.0);
                 if (sa != sb) return sa > sb;
                 return a->record.concept_id < b->record.concept_id;
             });
             json concepts = json::array();
             for (const auto* e : own) concepts.push_back(concept_summary(s, *e));
             std::vector<ConceptRecord> retained;
             for (const auto* e : s.retained_concepts()) retained.push_back(e->record);
             const auto summary = class_concept_summary(k, retained, s.clusters, selected);
             json rows = json::array();
             for (const auto& r : summary.rows)
                 rows.push_back({{"cluster_id", r.cluster_id},
                                 {"concept_ids", r.concept_ids},
                                 {"scores", r.scores},
                                 {"box", {{"min", r.box.min}, {"q1", r.box.q1}, {"median", r.box.median}, {"q3", r.box.q3}, {"max", r.box.max}}},
                                 {"frequency", r.frequency}});
             return json_response(200, {{"class_k", k},
                                        {"name", s.class_names[k]},
                                        {"concepts", concepts},
                                        {"discarded_concept_ids", discarded},
                                        {"summary", {{"histogram", summary.histogram}, {"rows", rows}}}});
         }},
        {"GET", std::regex("/api/classes/(\\d+)/instances"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest& req, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const std::size_t k = class_index(s, m[1]);
             const auto it = req.query.find("order");
             if (it != req.query.end() && it->second != "influence-matrix")
                 throw HttpError(400, "unsupported order '" + it->second + "'; only influence-matrix is available");
             const ClassInfluence* ci = nullptr;
             for (const auto& c : s.influence)
                 if (c.class_k == k) ci = &c;
             json columns = json::array(), rows = json::array();
             if (ci) {
                 for (const auto& id : ci->instance_ids) {
                     const Prediction* p = s.find_prediction(id);
                     columns.push_back({{"instance_id", id},
                                        {"correct", p ? json(p->correct()) : json(nullptr)},
                                        {"predicted_class", p ? json(p->predicted_class) : json(nullptr)},
                                        {"confidence", p ? json(p->confidence) : json(nullptr)},
                                        {"image_url", image_url(id)}});
                 }
                 for (std::size_t c = 0; c < ci->concept_ids.size(); ++c) {
                     const ConceptEntry* e = s.find_concept(ci->concept_ids[c]);
                     json values = json::array();
                     for (std::size_t j = 0; j < ci->instance_ids.size(); ++j) values.push_back(ci->influence(c, j));
                     rows.push_back({{"concept_id", ci->concept_ids[c]},
                                     {"cluster_id", e && e->record.cluster_id ? json(*e->record.cluster_id) : json(nullptr)},
                                     {"mean_score", e ? optional_number(mean_score(*e)) : json(nullptr)},
                                     {"values", values}});
                 }
             }
             return json_response(200, {{"class_k", k}, {"order", "influence-matrix"}, {"columns", columns}, {"rows", rows}});
         }},
        {"POST", std::regex("/api/confusion"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest& req, const std::smatch&) {
             const Snapshot& s = *sv.snapshot;
             const json body = parse_body(req);
             if (!body.contains("class_ids") || !body["class_ids"].is_array() || body["class_ids"].empty())
                 throw HttpError(400, "class_ids must be a non-empty array");
             std::vector<std::size_t> ids;
             for (const auto& v : body["class_ids"]) {
                 if (!v.is_number_integer() || v.get<long long>() < 0 ||
                     v.get<long long>() >= static_cast<long long>(s.class_names.size()))
                     throw HttpError(400, "class_ids entries must be class indices");
                 ids.push_back(v.get<std::size_t>());
             }
             const auto cm = confusion(s.predictions, ids);
             json names = json::array();
             for (std::size_t k : ids) names.push_back(s.class_names[k]);
             json columns = names;
             columns.push_back("other");
             return json_response(200, {{"class_ids", ids},
                                        {"class_names", names},
                                        {"columns", columns},
                                        {"counts", cm.counts},
                                        {"cells", cm.cell_instances}});
         }},
        {"GET", std::regex("/api/concepts/([^/]+)"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const ConceptEntry& e = concept_or_404(s, m[1]);
             json concept_json = concept_summary(s, e);
             concept_json["centroid"] = e.record.centroid;
             concept_json["radius"] = e.record.radius;
             json tcav = nullptr;
             if (e.record.tcav)
                 tcav = {{"per_cav_scores", e.record.tcav->per_cav_scores},
                         {"mean_score", e.record.tcav->mean_score},
                         {"p_value", e.record.tcav->p_value},
                         {"significant", e.record.tcav->significant}};
             json cavs = json::array();
             for (std::size_t i = 0; i < e.ensemble.cavs.size(); ++i) {
                 const auto& cav = e.ensemble.cavs[i];
                 json score = nullptr;
                 if (i < e.ensemble.scores.size() && e.ensemble.scores[i]) score = *e.ensemble.scores[i];
                 cavs.push_back({{"cav_index", i},
                                 {"trained", cav.has_value()},
                                 {"validation_accuracy", cav ? json(cav->validation_accuracy) : json(nullptr)},
                                 {"score", score}});
             }
             return json_response(200, {{"concept", concept_json},
                                        {"tcav", tcav},
                                        {"cavs", cavs},
                                        {"untestable", e.ensemble.untestable},
                                        {"warnings", e.ensemble.warnings},
                                        {"patches", patches_json(s, e, 5)}});
         }},
        {"GET", std::regex("/api/concepts/([^/]+)/patches"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest& req, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const ConceptEntry& e = concept_or_404(s, m[1]);
             const std::size_t limit = query_size(req, "limit", 5);
             if (limit == 0) throw HttpError(400, "limit must be at least 1");
             return json_response(200, {{"concept_id", e.record.concept_id}, {"patches", patches_json(s, e, limit)}});
         }},
        {"GET", std::regex("/api/clusters"),
         [](const ApiService& api, const ServedSnapshot& sv, const ApiRequest&, const std::smatch&) {
             const Snapshot& s = *sv.snapshot;
             json clusters = json::array();
             for (const auto& c : s.clusters) clusters.push_back(cluster_json(api.annotation_store(), s, c));
             json sil = json::array();
             for (const auto& [k, v] : s.silhouette) sil.push_back({{"k", k}, {"score", v}});
             return json_response(200, {{"n_clusters", s.n_clusters},
                                        {"method", to_string(s.config.clustering.method)},
                                        {"silhouette", sil},
                                        {"clusters", clusters}});
         }},
        {"GET", std::regex("/api/clusters/([^/]+)"),
         [](const ApiService& api, const ServedSnapshot& sv, const ApiRequest&, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const ConceptCluster* c = s.find_cluster(m[1]);
             if (!c) throw HttpError(404, "unknown cluster " + std::string(m[1]));
             std::vector<const ConceptEntry*> members;
             for (const auto& id : c->member_concept_ids) members.push_back(&concept_or_404(s, id));
             std::stable_sort(members.begin(), members.end(), [](const ConceptEntry* a, const ConceptEntry* b) {
                 const double sa = mean_score(*a).value_or(0.0), sb = mean_score(*b).value_or(0.0);
                 if (sa != sb) return sa < sb;
                 return a->record.concept_id < b->record.concept_id;
             });
             json concepts = json::array();
             double total = 0.0;
             std::size_t scored = 0;
             for (const auto* e : members) {
                 concepts.push_back(concept_summary(s, *e));
                 if (const auto v = mean_score(*e)) {
                     total += *v;
                     ++scored;
                 }
             }
             json notes = json::array();
             for (const auto& a : api.annotation_store().list(s.snapshot_id, c->cluster_id))
                 notes.push_back({{"text", a.text}, {"created_at", a.created_at}});
             json out = cluster_json(api.annotation_store(), s, *c);
             out["concepts"] = concepts;
             out["mean_score"] = scored ? json(total / static_cast<double>(scored)) : json(nullptr);
             out["annotations"] = notes;
             return json_response(200, out);
         }},
        {"POST", std::regex("/api/clusters/([^/]+)/annotation"),
         [](const ApiService& api, const ServedSnapshot& sv, const ApiRequest& req, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const ConceptCluster* c = s.find_cluster(m[1]);
             if (!c) throw HttpError(404, "unknown cluster " + std::string(m[1]));
             const json body = parse_body(req);
             if (!body.contains("text") || !body["text"].is_string()) throw HttpError(400, "text must be a string");
             const Annotation a = api.annotation_store().append(s.snapshot_id, c->cluster_id, body["text"]);
             return json_response(201, {{"snapshot_id", s.snapshot_id},
                                        {"cluster_id", c->cluster_id},
                                        {"text", a.text},
                                        {"created_at", a.created_at}});
         }},
        {"GET", std::regex("/api/layout/hex"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch&) {
             const Snapshot& s = *sv.snapshot;
             json cells = json::array();
             for (const auto& [id, cell] : s.hex.cells) {
                 const ConceptEntry* e = s.find_concept(id);
                 json corners = json::array();
                 for (const auto& p : hex_corners(cell)) corners.push_back(point(p));
                 cells.push_back({{"concept_id", id},
                                  {"col", cell.col},
                                  {"row", cell.row},
                                  {"center", point(hex_center(cell))},
                                  {"corners", corners},
                                  {"class_k", e ? json(e->record.class_k) : json(nullptr)},
                                  {"cluster_id", e && e->record.cluster_id ? json(*e->record.cluster_id) : json(nullptr)},
                                  {"mean_score", e ? optional_number(mean_score(*e)) : json(nullptr)}});
             }
             json edges = json::array();
             for (const auto& b : s.boundaries)
                 edges.push_back({{"col", b.cell.col}, {"row", b.cell.row}, {"side", b.side}, {"from", point(b.from)}, {"to", point(b.to)}});
             return json_response(200, {{"grid_cols", s.hex.grid_cols},
                                        {"grid_rows", s.hex.grid_rows},
                                        {"total_cost", s.hex.total_cost},
                                        {"cells", cells},
                                        {"boundaries", edges}});
         }},
        {"GET", std::regex("/api/layout/classes"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch&) {
             const Snapshot& s = *sv.snapshot;
             return json_response(200, {{"points", class_points_json(s)}, {"cliques", cliques_json(s)}});
         }},
        {"GET", std::regex("/api/instances/([^/]+)"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const std::string id = m[1];
             const Prediction* stored = s.find_prediction(id);
             if (!stored && !(sv.dataset && sv.dataset->instances.end() !=
                                                std::find_if(sv.dataset->instances.begin(), sv.dataset->instances.end(),
                                                             [&](const InstanceMeta& i) { return i.instance_id == id; })))
                 throw HttpError(404, "unknown instance " + id);
             const Tensor image = load_instance_image(sv, id);
             Prediction pred;
             if (stored) {
                 pred = *stored;
             } else {
                 pred = make_prediction(logits(*sv.model, fit_to_model(*sv.model, image)));
                 pred.instance_id = id;
                 pred.label = sv.dataset->find(id).label;
             }
             std::set<std::size_t> involved{pred.predicted_class};
             if (pred.label) involved.insert(*pred.label);
             std::vector<const ConceptEntry*> concepts;
             for (const auto* e : s.retained_concepts())
                 if (involved.count(e->record.class_k)) concepts.push_back(e);

             json influence = json::array();
             for (const auto* e : concepts) influence.push_back(influence_row_json(e->record.class_k, influence_of(sv, id, *e, &image)));

             const SegmentedInstance seg = segment_and_embed(*sv.model, image, id, embedding_setup(s));
             std::vector<ConceptRecord> records;
             for (const auto* e : concepts) records.push_back(e->record);
             const auto presence = concept_presence(id, seg.embeddings, records);
             std::map<std::string, const Segment*> by_id;
             for (const auto& sg : seg.segments) by_id[sg.segment_id] = &sg;
             json overlays = json::array();
             for (const auto& p : presence) {
                 json segs = json::array();
                 for (const auto& sid : p.matching_segment_ids)
                     segs.push_back({{"segment_id", sid}, {"polygons", polygons_json(*by_id.at(sid))}});
                 overlays.push_back({{"concept_id", p.concept_id}, {"present", p.present}, {"segments", segs}});
             }
             return json_response(200, {{"instance_id", id},
                                        {"image_url", image_url(id)},
                                        {"prediction", prediction_json(s, pred)},
                                        {"influence", influence},
                                        {"presence", overlays}});
         }},
        {"POST", std::regex("/api/instances/([^/]+)/influence"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest& req, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const std::string id = m[1];
             const json body = parse_body(req);
             if (!body.contains("concept_ids") || !body["concept_ids"].is_array())
                 throw HttpError(400, "concept_ids must be an array");
             std::vector<const ConceptEntry*> concepts;
             for (const auto& v : body["concept_ids"]) {
                 if (!v.is_string()) throw HttpError(400, "concept_ids entries must be strings");
                 concepts.push_back(&concept_or_404(s, v.get<std::string>()));
             }
             require_inputs(sv);
             const Tensor image = load_instance_image(sv, id);
             json rows = json::array();
             for (const auto* e : concepts) rows.push_back(influence_row_json(e->record.class_k, influence_of(sv, id, *e, &image)));
             return json_response(200, {{"instance_id", id}, {"rows", rows}});
         }},
        {"POST", std::regex("/api/pipeline/run"),
         [](const ApiService& api, const ServedSnapshot&, const ApiRequest& req, const std::smatch&) {
             PipelineConfig config = config_from_json(parse_body(req));
             config.dataset_path = fs::absolute(config.dataset_path).lexically_normal().string();
             config.model_path = fs::absolute(config.model_path).lexically_normal().string();
             const std::string id = api.run_queue().submit(std::move(config));
             json st = to_json(*api.run_queue().status(id));
             st["queue_position"] = api.run_queue().queue_position(id);
             return json_response(202, st);
         }},
        {"GET", std::regex("/api/pipeline/status/([^/]+)"),
         [](const ApiService& api, const ServedSnapshot&, const ApiRequest&, const std::smatch& m) {
             const auto st = api.run_queue().status(m[1]);
             if (!st) throw HttpError(404, "unknown run " + std::string(m[1]));
             json j = to_json(*st);
             j["queue_position"] = api.run_queue().queue_position(m[1]);
             return json_response(200, j);
         }},
        {"GET", std::regex("/api/silhouette"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest& req, const std::smatch&) {
             const Snapshot& s = *sv.snapshot;
             ClusterMethod method = s.config.clustering.method;
             if (auto it = req.query.find("method"); it != req.query.end() && !it->second.empty())
                 method = cluster_method_from_string(it->second);
             std::vector<std::vector<double>> centroids;
             for (const auto* e : s.retained_concepts()) centroids.push_back(e->record.centroid);
             const std::size_t n = centroids.size();
             if (n < 3) throw HttpError(409, "silhouette scores need at least 3 retained concepts");
             const std::size_t from = query_size(req, "from", 2);
             const std::size_t to = query_size(req, "to", std::min<std::size_t>(30, n - 1));
             if (from < 2 || to > n - 1 || from > to)
                 throw HttpError(400, "cluster range must satisfy 2 <= from <= to <= " + std::to_string(n - 1));
             std::vector<std::size_t> range;
             for (std::size_t k = from; k <= to; ++k) range.push_back(k);
             const auto sel = select_cluster_count(Matrix::from_rows(centroids), method, range, clustering_seed(s.config));
             json scores = json::array();
             for (const auto& [k, v] : sel.scores) scores.push_back({{"k", k}, {"score", v}});
             return json_response(200, {{"method", to_string(method)}, {"from", from}, {"to", to}, {"best_k", sel.best_k}, {"scores", scores}});
         }},
        {"GET", std::regex("/assets/patches/([^/]+)\\.png"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch& m) {
             const Snapshot& s = *sv.snapshot;
             const std::string id = m[1];
             const fs::path file = sv.dir / "patches" / (id + ".png");
             if (std::binary_search(s.exported_patches.begin(), s.exported_patches.end(), id) && fs::exists(file))
                 return ApiResponse{200, "image/png", read_file(file)};
             const auto seg = s.segments.find(id);
             if (seg == s.segments.end()) throw HttpError(404, "unknown segment " + id);
             const Tensor image = load_instance_image(sv, seg->second.instance_id);
             return ApiResponse{200, "image/png", encode_png(segment_thumbnail(image, seg->second, s.channel_means))};
         }},
        {"GET", std::regex("/assets/images/([^/]+)\\.png"),
         [](const ApiService&, const ServedSnapshot& sv, const ApiRequest&, const std::smatch& m) {
             require_inputs(sv);
             return ApiResponse{200, "image/png", encode_png(load_instance_image(sv, m[1]))};
         }},
    };
    const auto served = current();
    bool path_known = false;
    for (const auto& route : table) {
        std::smatch match;
        if (!std::regex_match(req.path, match, route.pattern)) continue;
        path_known = true;
        if (route.method != req.method) continue;
        return route.handler(*this, *served, req, match);
    }
    if (path_known) return error_response(405, "method_not_allowed", req.method + " not allowed on " + req.path);
    return error_response(404, "not_found", "no endpoint at " + req.path);
}

// ---- HTTP transport ------------------------------------------------------------

struct HttpServer::Impl {
    ApiService& api;
    httplib::Server server;
    explicit Impl(ApiService& a) : api(a) {}
};

HttpServer::HttpServer(ApiService& api) : impl_(std::make_unique<Impl>(api)) {
    auto forward = [this](const httplib::Request& req, httplib::Response& res) {
        ApiRequest r{req.method, req.path, {}, req.body};
        for (const auto& [k, v] : req.params) r.query[k] = v;
        const ApiResponse out = impl_->api.handle(r);
        res.status = out.status;
        res.set_content(out.body, out.content_type);
    };
    // SO_REUSEADDR only: with SO_REUSEPORT a second server could share a busy port.
    impl_->server.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
    });
    const char* pattern = R"((/api/.*|/assets/.*))";
    impl_->server.Get(pattern, forward);
    impl_->server.Post(pattern, forward);
    if (const auto& root = api.options().web_root) {
        if (!impl_->server.set_mount_point("/", root->string()))
            throw IoError("web root is not a directory: " + root->string());
    }
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw IoError("cannot bind " + host);
        return bound;
    }
    if (!impl_->server.bind_to_port(host, port))
        throw IoError("cannot bind " + host + ":" + std::to_string(port) + " (address in use or not permitted)");
    return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_->server.is_running()) impl_->server.stop();
}

std::pair<std::string, int> parse_address(const std::string& address) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos || colon + 1 == address.size())
        throw ParameterError("address must look like HOST:PORT, got '" + address + "'");
    const std::string host = address.substr(0, colon), port = address.substr(colon + 1);
    if (!std::all_of(port.begin(), port.end(), [](char c) { return c >= '0' && c <= '9'; }) || port.size() > 5 ||
        std::stoi(port) > 65535)
        throw ParameterError("invalid port in '" + address + "'");
    return {host.empty() ? "0.0.0.0" : host, std::stoi(port)};
}

}  // namespace cprobe
