#include "cprobe/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>

#include "cprobe/errors.hpp"

namespace cprobe {

namespace {

double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }

double lab_f(double t) {
    constexpr double eps = 216.0 / 24389.0;
    constexpr double kappa = 24389.0 / 27.0;
    return t > eps ? std::cbrt(t) : (kappa * t + 16.0) / 116.0;
}

struct Center {
    double l, a, b, x, y;
};

struct LabImage {
    std::size_t h, w;
    std::vector<std::array<double, 3>> px;
    const std::array<double, 3>& at(std::size_t y, std::size_t x) const { return px[y * w + x]; }
};

LabImage to_lab(const Tensor& image) {
    if (image.rank() != 3 || (image.shape()[2] != 1 && image.shape()[2] != 3))
        throw ParameterError("SLIC expects an (h, w, 1|3) image");
    LabImage lab{image.shape()[0], image.shape()[1], {}};
    lab.px.resize(lab.h * lab.w);
    const bool gray = image.shape()[2] == 1;
    for (std::size_t y = 0; y < lab.h; ++y) {
        for (std::size_t x = 0; x < lab.w; ++x) {
            const double r = image.at(y, x, 0);
            const double g = gray ? r : image.at(y, x, 1);
            const double b = gray ? r : image.at(y, x, 2);
            lab.px[y * lab.w + x] = rgb_to_lab(r, g, b);
        }
    }
    return lab;
}

double color_sq(const std::array<double, 3>& p, const Center& c) {
    const double dl = p[0] - c.l, da = p[1] - c.a, db = p[2] - c.b;
    return dl * dl + da * da + db * db;
}

double gradient_at(const LabImage& lab, std::size_t y, std::size_t x) {
    const std::size_t x0 = x > 0 ? x - 1 : x, x1 = x + 1 < lab.w ? x + 1 : x;
    const std::size_t y0 = y > 0 ? y - 1 : y, y1 = y + 1 < lab.h ? y + 1 : y;
    double g = 0.0;
    for (int k = 0; k < 3; ++k) {
        const double dx = lab.at(y, x1)[k] - lab.at(y, x0)[k];
        const double dy = lab.at(y1, x)[k] - lab.at(y0, x)[k];
        g += dx * dx + dy * dy;
    }
    return g;
}

std::vector<Center> initial_centers(const LabImage& lab, double step) {
    const auto nx = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(lab.w / step)));
    const auto ny = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(lab.h / step)));
    std::vector<Center> centers;
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
            auto cx = static_cast<std::size_t>((i + 0.5) * static_cast<double>(lab.w) / nx);
            auto cy = static_cast<std::size_t>((j + 0.5) * static_cast<double>(lab.h) / ny);
            // Move to the lowest-gradient pixel of the 3x3 neighbourhood; the
            // grid position is kept unless a strictly lower gradient exists.
            std::size_t bx = cx, by = cy;
            double best = gradient_at(lab, cy, cx);
            for (long dy = -1; dy <= 1; ++dy) {
                for (long dx = -1; dx <= 1; ++dx) {
                    const long yy = static_cast<long>(cy) + dy, xx = static_cast<long>(cx) + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(lab.h) || xx >= static_cast<long>(lab.w)) continue;
                    const double g = gradient_at(lab, yy, xx);
                    if (g < best) {
                        best = g;
                        bx = xx;
                        by = yy;
                    }
                }
            }
            const auto& p = lab.at(by, bx);
            centers.push_back({p[0], p[1], p[2], static_cast<double>(bx), static_cast<double>(by)});
        }
    }
    return centers;
}

}  // namespace

std::array<double, 3> rgb_to_lab(double r, double g, double b) {
    const double rl = srgb_to_linear(r), gl = srgb_to_linear(g), bl = srgb_to_linear(b);
    const double X = (0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl) / 0.95047;
    const double Y = (0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl) / 1.0;
    const double Z = (0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl) / 1.08883;
    const double fx = lab_f(X), fy = lab_f(Y), fz = lab_f(Z);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

SlicTrace slic_trace(const Tensor& image, int n_segments, const SlicParams& params) {
    if (n_segments < 2) throw ParameterError("SLIC needs at least 2 segments");
    if (params.iterations < 1) throw ParameterError("SLIC needs at least one iteration");
    const LabImage lab = to_lab(image);
    const std::size_t n = lab.h * lab.w;
    if (static_cast<std::size_t>(n_segments) > n)
        throw ParameterError("requested " + std::to_string(n_segments) + " segments for " + std::to_string(n) +
                             " pixels");

    const double step = std::sqrt(static_cast<double>(n) / n_segments);
    const double spatial_weight = (params.compactness / step) * (params.compactness / step);
    std::vector<Center> centers = initial_centers(lab, step);

    auto dist_sq = [&](std::size_t y, std::size_t x, const Center& c) {
        const double dx = static_cast<double>(x) - c.x, dy = static_cast<double>(y) - c.y;
        return color_sq(lab.at(y, x), c) + spatial_weight * (dx * dx + dy * dy);
    };

    SlicTrace trace;
    trace.grid_interval = step;
    std::vector<int> labels(n, -1);
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());

    for (int iter = 0; iter < params.iterations; ++iter) {
        // A pixel keeps its current center unless another one is strictly
        // closer, so the assignment step never increases the objective.
        for (std::size_t i = 0; i < n; ++i)
            if (labels[i] >= 0) dist[i] = dist_sq(i / lab.w, i % lab.w, centers[labels[i]]);
        for (std::size_t k = 0; k < centers.size(); ++k) {
            const Center& c = centers[k];
            const long y0 = std::max<long>(0, static_cast<long>(std::floor(c.y - step)));
            const long y1 = std::min<long>(static_cast<long>(lab.h) - 1, static_cast<long>(std::ceil(c.y + step)));
            const long x0 = std::max<long>(0, static_cast<long>(std::floor(c.x - step)));
            const long x1 = std::min<long>(static_cast<long>(lab.w) - 1, static_cast<long>(std::ceil(c.x + step)));
            for (long y = y0; y <= y1; ++y) {
                for (long x = x0; x <= x1; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * lab.w + x;
                    const double d = dist_sq(y, x, c);
                    if (d < dist[i]) {
                        dist[i] = d;
                        labels[i] = static_cast<int>(k);
                    }
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (labels[i] >= 0) continue;
            for (std::size_t k = 0; k < centers.size(); ++k) {
                const double d = dist_sq(i / lab.w, i % lab.w, centers[k]);
                if (d < dist[i]) {
                    dist[i] = d;
                    labels[i] = static_cast<int>(k);
                }
            }
        }
        trace.objective.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));

        std::vector<Center> sums(centers.size(), Center{0, 0, 0, 0, 0});
        std::vector<std::size_t> counts(centers.size(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = lab.px[i];
            Center& s = sums[labels[i]];
            s.l += p[0];
            s.a += p[1];
            s.b += p[2];
            s.x += static_cast<double>(i % lab.w);
            s.y += static_cast<double>(i / lab.w);
            ++counts[labels[i]];
        }
        for (std::size_t k = 0; k < centers.size(); ++k) {
            if (counts[k] == 0) continue;
            const double inv = 1.0 / static_cast<double>(counts[k]);
            centers[k] = {sums[k].l * inv, sums[k].a * inv, sums[k].b * inv, sums[k].x * inv, sums[k].y * inv};
        }
    }

    trace.raw = {lab.h, lab.w, labels, static_cast<int>(centers.size())};
    trace.final = enforce_connectivity(trace.raw, step * step / 4.0);
    return trace;
}

LabelRaster slic(const Tensor& image, int n_segments, double compactness, int iterations, std::uint64_t /*seed*/) {
    return slic_trace(image, n_segments, SlicParams{compactness, iterations}).final;
}

LabelRaster enforce_connectivity(const LabelRaster& raw, double min_size) {
    const std::size_t h = raw.height, w = raw.width, n = h * w;
    std::vector<int> comp(n, -1);
    std::vector<std::size_t> comp_size;
    std::vector<std::size_t> queue;
    queue.reserve(n);
    for (std::size_t start = 0; start < n; ++start) {
        if (comp[start] >= 0) continue;
        const int id = static_cast<int>(comp_size.size());
        const int lbl = raw.labels[start];
        queue.clear();
        queue.push_back(start);
        comp[start] = id;
        for (std::size_t qi = 0; qi < queue.size(); ++qi) {
            const std::size_t p = queue[qi];
            const std::size_t y = p / w, x = p % w;
            const std::size_t nb[4] = {x > 0 ? p - 1 : n, x + 1 < w ? p + 1 : n, y > 0 ? p - w : n,
                                       y + 1 < h ? p + w : n};
            for (std::size_t q : nb) {
                if (q < n && comp[q] < 0 && raw.labels[q] == lbl) {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        comp_size.push_back(queue.size());
    }

    const std::size_t nc = comp_size.size();
    std::vector<std::vector<int>> adjacent(nc);
    for (std::size_t p = 0; p < n; ++p) {
        const std::size_t y = p / w, x = p % w;
        if (x + 1 < w && comp[p] != comp[p + 1]) {
            adjacent[comp[p]].push_back(comp[p + 1]);
            adjacent[comp[p + 1]].push_back(comp[p]);
        }
        if (y + 1 < h && comp[p] != comp[p + w]) {
            adjacent[comp[p]].push_back(comp[p + w]);
            adjacent[comp[p + w]].push_back(comp[p]);
        }
    }
    for (auto& a : adjacent) {
        std::sort(a.begin(), a.end());
        a.erase(std::unique(a.begin(), a.end()), a.end());
    }

    std::vector<int> parent(nc);
    std::iota(parent.begin(), parent.end(), 0);
    std::vector<std::size_t> size = comp_size;
    auto find = [&](int c) {
        while (parent[c] != c) c = parent[c] = parent[parent[c]];
        return c;
    };

    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t c = 0; c < nc; ++c) {
            const int root = find(static_cast<int>(c));
            if (root != static_cast<int>(c) || static_cast<double>(size[root]) >= min_size) continue;
            // Neighbours of every component already merged into this root.
            int best = -1;
            for (std::size_t m = 0; m < nc; ++m) {
                if (find(static_cast<int>(m)) != root) continue;
                for (int a : adjacent[m]) {
                    const int ra = find(a);
                    if (ra == root) continue;
                    if (best < 0 || size[ra] > size[best] || (size[ra] == size[best] && ra < best)) best = ra;
                }
            }
            if (best < 0) continue;
            parent[root] = best;
            size[best] += size[root];
            changed = true;
        }
    }

    LabelRaster out{h, w, std::vector<int>(n, -1), 0};
    std::vector<int> relabel(nc, -1);
    for (std::size_t p = 0; p < n; ++p) {
        const int r = find(comp[p]);
        if (relabel[r] < 0) relabel[r] = out.count++;
        out.labels[p] = relabel[r];
    }
    return out;
}

std::string to_string(ResolutionLevel level) {
    switch (level) {
        case ResolutionLevel::coarse: return "coarse";
        case ResolutionLevel::medium: return "medium";
        case ResolutionLevel::fine: return "fine";
    }
    return "coarse";
}

ResolutionLevel resolution_level_from_string(const std::string& s) {
    if (s == "coarse") return ResolutionLevel::coarse;
    if (s == "medium") return ResolutionLevel::medium;
    if (s == "fine") return ResolutionLevel::fine;
    throw ValidationError("unknown resolution level '" + s + "'");
}

std::size_t Segment::pixel_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<Segment> extract_segments(const Tensor& image, const std::string& instance_id,
                                      const std::vector<int>& resolutions, std::uint64_t seed,
                                      const SegmentationParams& params) {
    if (resolutions.empty()) throw ParameterError("at least one segmentation resolution is required");
    std::vector<int> ranked = resolutions;
    std::sort(ranked.begin(), ranked.end());
    ranked.erase(std::unique(ranked.begin(), ranked.end()), ranked.end());

    const std::size_t h = image.shape()[0], w = image.shape()[1];
    std::vector<Segment> out;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        ResolutionLevel level = ResolutionLevel::medium;
        if (r == 0) level = ResolutionLevel::coarse;
        else if (r + 1 == ranked.size()) level = ResolutionLevel::fine;

        const LabelRaster labels = slic(image, ranked[r], params.slic.compactness, params.slic.iterations, seed);
        std::vector<Segment> per_label(labels.count);
        std::vector<std::array<std::size_t, 4>> extent(labels.count, {h, w, 0, 0});  // top, left, bottom, right
        for (int l = 0; l < labels.count; ++l) {
            Segment& s = per_label[l];
            s.instance_id = instance_id;
            s.segment_id = instance_id + "-r" + std::to_string(ranked[r]) + "-" + std::to_string(l);
            s.resolution_level = level;
            s.resolution = ranked[r];
            s.height = h;
            s.width = w;
            s.mask.assign(h * w, 0);
        }
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const int l = labels.at(y, x);
                per_label[l].mask[y * w + x] = 1;
                auto& e = extent[l];
                e[0] = std::min(e[0], y);
                e[1] = std::min(e[1], x);
                e[2] = std::max(e[2], y);
                e[3] = std::max(e[3], x);
            }
        }
        for (int l = 0; l < labels.count; ++l) {
            Segment& s = per_label[l];
            if (s.pixel_count() < params.min_segment_pixels) continue;
            const auto& e = extent[l];
            s.bbox = {e[0], e[1], e[2] - e[0] + 1, e[3] - e[1] + 1};
            out.push_back(std::move(s));
        }
    }
    return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    const std::size_t ih = image.shape()[0], iw = image.shape()[1], c = image.shape()[2];
    if (ih == out_h && iw == out_w) return image;
    Tensor out({out_h, out_w, c});
    const double sy = out_h > 1 ? static_cast<double>(ih - 1) / static_cast<double>(out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(iw - 1) / static_cast<double>(out_w - 1) : 0.0;
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        const auto y0 = static_cast<std::size_t>(std::floor(fy));
        const std::size_t y1 = std::min(y0 + 1, ih - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            const auto x0 = static_cast<std::size_t>(std::floor(fx));
            const std::size_t x1 = std::min(x0 + 1, iw - 1);
            const double tx = fx - static_cast<double>(x0);
            for (std::size_t k = 0; k < c; ++k) {
                const double top = image.at(y0, x0, k) * (1 - tx) + image.at(y0, x1, k) * tx;
                const double bot = image.at(y1, x0, k) * (1 - tx) + image.at(y1, x1, k) * tx;
                out.at(y, x, k) = top * (1 - ty) + bot * ty;
            }
        }
    }
    return out;
}

Patch segment_to_patch(const Tensor& image, const Segment& segment, const std::vector<double>& channel_means,
                       const std::array<std::size_t, 3>& model_input_shape) {
    const std::size_t h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
    if (segment.height != h || segment.width != w || segment.mask.size() != h * w)
        throw PreconditionError("segment mask does not match image shape");
    if (segment.pixel_count() == 0) throw PreconditionError("segment mask is empty");
    if (channel_means.size() != c) throw PreconditionError("channel means do not match image channels");
    if (model_input_shape[2] != c) throw PreconditionError("model input channels do not match image channels");
    Tensor canvas = image;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            if (!segment.mask[y * w + x])
                for (std::size_t k = 0; k < c; ++k) canvas.at(y, x, k) = channel_means[k];
    return {segment.segment_id, resize_bilinear(canvas, model_input_shape[0], model_input_shape[1])};
}

Tensor segment_thumbnail(const Tensor& image, const Segment& segment, const std::vector<double>& channel_means) {
    const std::size_t c = image.shape()[2];
    const BBox& b = segment.bbox;
    Tensor out({b.height, b.width, c});
    for (std::size_t y = 0; y < b.height; ++y) {
        for (std::size_t x = 0; x < b.width; ++x) {
            const std::size_t iy = b.top + y, ix = b.left + x;
            const bool in = segment.mask[iy * segment.width + ix] != 0;
            for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = in ? image.at(iy, ix, k) : channel_means[k];
        }
    }
    return out;
}

std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& mask) {
    std::vector<std::uint32_t> runs;
    std::uint8_t current = 0;
    std::uint32_t len = 0;
    for (std::uint8_t v : mask) {
        const std::uint8_t b = v ? 1 : 0;
        if (b != current) {
            runs.push_back(len);
            current = b;
            len = 0;
        }
        ++len;
    }
    runs.push_back(len);
    return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& runs, std::size_t length) {
    std::vector<std::uint8_t> mask;
    mask.reserve(length);
    std::uint8_t value = 0;
    for (std::uint32_t r : runs) {
        mask.insert(mask.end(), r, value);
        value ^= 1;
    }
    if (mask.size() != length) throw FormatError("run-length mask decodes to the wrong size", 0);
    return mask;
}

std::vector<std::vector<std::array<int, 2>>> mask_outline(const std::vector<std::uint8_t>& mask, std::size_t height,
                                                          std::size_t width) {
    using Point = std::array<int, 2>;
    std::multimap<Point, Point> edges;
    auto set = [&](long y, long x) {
        return y >= 0 && x >= 0 && y < static_cast<long>(height) && x < static_cast<long>(width) &&
               mask[static_cast<std::size_t>(y) * width + x];
    };
    for (long y = 0; y < static_cast<long>(height); ++y) {
        for (long x = 0; x < static_cast<long>(width); ++x) {
            if (!set(y, x)) continue;
            const int X = static_cast<int>(x), Y = static_cast<int>(y);
            if (!set(y - 1, x)) edges.insert({{X, Y}, {X + 1, Y}});
            if (!set(y, x + 1)) edges.insert({{X + 1, Y}, {X + 1, Y + 1}});
            if (!set(y + 1, x)) edges.insert({{X + 1, Y + 1}, {X, Y + 1}});
            if (!set(y, x - 1)) edges.insert({{X, Y + 1}, {X, Y}});
        }
    }
    std::vector<std::vector<Point>> loops;
    while (!edges.empty()) {
        auto it = edges.begin();
        const Point start = it->first;
        std::vector<Point> loop{start};
        Point cur = it->second;
        edges.erase(it);
        while (cur != start) {
            loop.push_back(cur);
            auto next = edges.find(cur);
            if (next == edges.end()) break;
            cur = next->second;
            edges.erase(next);
        }
        // Drop collinear interior points.
        std::vector<Point> simplified;
        for (std::size_t i = 0; i < loop.size(); ++i) {
            const Point& a = loop[(i + loop.size() - 1) % loop.size()];
            const Point& b = loop[i];
            const Point& c = loop[(i + 1) % loop.size()];
            const long cross = static_cast<long>(b[0] - a[0]) * (c[1] - b[1]) - static_cast<long>(b[1] - a[1]) * (c[0] - b[0]);
            if (cross != 0) simplified.push_back(b);
        }
        loops.push_back(simplified.empty() ? loop : simplified);
    }
    return loops;
}

bool is_four_connected(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width) {
    const std::size_t n = height * width;
    std::size_t first = n, total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i]) {
            if (first == n) first = i;
            ++total;
        }
    }
    if (total == 0) return false;
    std::vector<std::uint8_t> seen(n, 0);
    std::queue<std::size_t> q;
    q.push(first);
    seen[first] = 1;
    std::size_t reached = 0;
    while (!q.empty()) {
        const std::size_t p = q.front();
        q.pop();
        ++reached;
        const std::size_t y = p / width, x = p % width;
        const std::size_t nb[4] = {x > 0 ? p - 1 : n, x + 1 < width ? p + 1 : n, y > 0 ? p - width : n,
                                   y + 1 < height ? p + width : n};
        for (std::size_t q2 : nb) {
            if (q2 < n && mask[q2] && !seen[q2]) {
                seen[q2] = 1;
                q.push(q2);
            }
        }
    }
    return reached == total;
}

}  // namespace cprobe
