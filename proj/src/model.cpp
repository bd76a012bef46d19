#include "cprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "cprobe/errors.hpp"

namespace cprobe {

std::string_view to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::convolution: return "convolution";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::global_average_pool: return "global-average-pool";
        case LayerKind::flatten: return "flatten";
        case LayerKind::dense: return "dense";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
    for (LayerKind k : {LayerKind::convolution, LayerKind::relu, LayerKind::maxpool,
                        LayerKind::global_average_pool, LayerKind::flatten, LayerKind::dense}) {
        if (to_string(k) == name) return k;
    }
    throw ValidationError("unknown layer kind '" + std::string(name) + "'");
}

namespace {

[[noreturn]] void invalid(const LayerSpec& layer, const std::string& why) {
    throw ValidationError("layer '" + layer.name + "': " + why);
}

Shape infer_shape(const LayerSpec& layer, const Shape& in) {
    switch (layer.kind) {
        case LayerKind::convolution: {
            const auto* p = std::get_if<ConvParams>(&layer.params);
            if (!p) invalid(layer, "missing convolution parameters");
            if (in.size() != 3) invalid(layer, "expects (h, w, c) input, got " + shape_string(in));
            if (p->kernel_h == 0 || p->kernel_w == 0 || p->out_channels == 0)
                invalid(layer, "kernel and channel counts must be positive");
            if (p->stride == 0) invalid(layer, "stride must be >= 1");
            if (p->in_channels != in[2])
                invalid(layer, "declares " + std::to_string(p->in_channels) + " input channels but receives " +
                                   std::to_string(in[2]));
            const Shape expected_w{p->out_channels, p->kernel_h, p->kernel_w, p->in_channels};
            if (p->weights.shape() != expected_w)
                invalid(layer, "weight tensor " + shape_string(p->weights.shape()) + " but expected " +
                                   shape_string(expected_w));
            if (p->bias.shape() != Shape{p->out_channels})
                invalid(layer, "bias tensor " + shape_string(p->bias.shape()) + " but expected (" +
                                   std::to_string(p->out_channels) + ")");
            const std::size_t ph = in[0] + 2 * p->padding, pw = in[1] + 2 * p->padding;
            if (ph < p->kernel_h || pw < p->kernel_w) invalid(layer, "kernel larger than padded input");
            return {(ph - p->kernel_h) / p->stride + 1, (pw - p->kernel_w) / p->stride + 1, p->out_channels};
        }
        case LayerKind::relu:
            return in;
        case LayerKind::maxpool: {
            const auto* p = std::get_if<PoolParams>(&layer.params);
            if (!p) invalid(layer, "missing pooling parameters");
            if (p->window == 0 || p->stride == 0) invalid(layer, "window and stride must be >= 1");
            if (in.size() != 3) invalid(layer, "expects (h, w, c) input, got " + shape_string(in));
            if (in[0] < p->window || in[1] < p->window) invalid(layer, "window larger than input");
            return {(in[0] - p->window) / p->stride + 1, (in[1] - p->window) / p->stride + 1, in[2]};
        }
        case LayerKind::global_average_pool:
            if (in.size() != 3) invalid(layer, "expects (h, w, c) input, got " + shape_string(in));
            return {in[2]};
        case LayerKind::flatten:
            return {shape_size(in)};
        case LayerKind::dense: {
            const auto* p = std::get_if<DenseParams>(&layer.params);
            if (!p) invalid(layer, "missing dense parameters");
            if (in.size() != 1) invalid(layer, "expects a flat input, got " + shape_string(in));
            if (p->in_features != in[0])
                invalid(layer, "declares fan-in " + std::to_string(p->in_features) + " but receives " +
                                   std::to_string(in[0]));
            const Shape expected_w{p->out_features, p->in_features};
            if (p->weights.shape() != expected_w)
                invalid(layer, "weight tensor " + shape_string(p->weights.shape()) + " but expected " +
                                   shape_string(expected_w));
            if (p->bias.shape() != Shape{p->out_features})
                invalid(layer, "bias tensor " + shape_string(p->bias.shape()) + " but expected (" +
                                   std::to_string(p->out_features) + ")");
            return {p->out_features};
        }
    }
    invalid(layer, "unsupported kind");
}

Tensor conv_forward(const ConvParams& p, const Tensor& in, const Shape& out_shape) {
    const std::size_t ih = in.shape()[0], iw = in.shape()[1], ic = in.shape()[2];
    const std::size_t oh = out_shape[0], ow = out_shape[1], oc = out_shape[2];
    Tensor out(out_shape);
    const auto w = p.weights.values();
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            for (std::size_t o = 0; o < oc; ++o) {
                double acc = p.bias[o];
                for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
                    const long iy = static_cast<long>(oy * p.stride + ky) - static_cast<long>(p.padding);
                    if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                    for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
                        const long ix = static_cast<long>(ox * p.stride + kx) - static_cast<long>(p.padding);
                        if (ix < 0 || ix >= static_cast<long>(iw)) continue;
                        const double* src = &in.values()[(static_cast<std::size_t>(iy) * iw + ix) * ic];
                        const double* wk = &w[((o * p.kernel_h + ky) * p.kernel_w + kx) * ic];
                        for (std::size_t i = 0; i < ic; ++i) acc += wk[i] * src[i];
                    }
                }
                out.at(oy, ox, o) = acc;
            }
        }
    }
    return out;
}

Tensor conv_backward(const ConvParams& p, const Shape& in_shape, const Tensor& grad_out) {
    const std::size_t ih = in_shape[0], iw = in_shape[1], ic = in_shape[2];
    const std::size_t oh = grad_out.shape()[0], ow = grad_out.shape()[1], oc = grad_out.shape()[2];
    Tensor grad_in(in_shape);
    const auto w = p.weights.values();
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            for (std::size_t o = 0; o < oc; ++o) {
                const double g = grad_out.at(oy, ox, o);
                if (g == 0.0) continue;
                for (std::size_t ky = 0; ky < p.kernel_h; ++ky) {
                    const long iy = static_cast<long>(oy * p.stride + ky) - static_cast<long>(p.padding);
                    if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                    for (std::size_t kx = 0; kx < p.kernel_w; ++kx) {
                        const long ix = static_cast<long>(ox * p.stride + kx) - static_cast<long>(p.padding);
                        if (ix < 0 || ix >= static_cast<long>(iw)) continue;
                        double* dst = &grad_in.values()[(static_cast<std::size_t>(iy) * iw + ix) * ic];
                        const double* wk = &w[((o * p.kernel_h + ky) * p.kernel_w + kx) * ic];
                        for (std::size_t i = 0; i < ic; ++i) dst[i] += wk[i] * g;
                    }
                }
            }
        }
    }
    return grad_in;
}

// Index into `in` of the window maximum; first occurrence wins ties.
std::size_t pool_argmax(const PoolParams& p, const Tensor& in, std::size_t oy, std::size_t ox, std::size_t c) {
    const std::size_t iw = in.shape()[1], ic = in.shape()[2];
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t ky = 0; ky < p.window; ++ky) {
        for (std::size_t kx = 0; kx < p.window; ++kx) {
            const std::size_t idx = ((oy * p.stride + ky) * iw + (ox * p.stride + kx)) * ic + c;
            if (in[idx] > best_v) {
                best_v = in[idx];
                best = idx;
            }
        }
    }
    return best;
}

Tensor run_layer(const LayerSpec& layer, const Tensor& in, const Shape& out_shape) {
    switch (layer.kind) {
        case LayerKind::convolution:
            return conv_forward(std::get<ConvParams>(layer.params), in, out_shape);
        case LayerKind::relu: {
            Tensor out = in;
            for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
            return out;
        }
        case LayerKind::maxpool: {
            const auto& p = std::get<PoolParams>(layer.params);
            Tensor out(out_shape);
            for (std::size_t oy = 0; oy < out_shape[0]; ++oy)
                for (std::size_t ox = 0; ox < out_shape[1]; ++ox)
                    for (std::size_t c = 0; c < out_shape[2]; ++c)
                        out.at(oy, ox, c) = in[pool_argmax(p, in, oy, ox, c)];
            return out;
        }
        case LayerKind::global_average_pool: {
            const std::size_t h = in.shape()[0], w = in.shape()[1], ch = in.shape()[2];
            Tensor out(out_shape);
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) acc += in.at(y, x, c);
                out[c] = acc / static_cast<double>(h * w);
            }
            return out;
        }
        case LayerKind::flatten:
            return Tensor(out_shape, in.data());
        case LayerKind::dense: {
            const auto& p = std::get<DenseParams>(layer.params);
            Tensor out(out_shape);
            for (std::size_t o = 0; o < p.out_features; ++o) {
                double acc = p.bias[o];
                const double* row = &p.weights.values()[o * p.in_features];
                for (std::size_t i = 0; i < p.in_features; ++i) acc += row[i] * in[i];
                out[o] = acc;
            }
            return out;
        }
    }
    return in;
}

Tensor backprop_layer(const LayerSpec& layer, const Tensor& in, const Tensor& grad_out) {
    switch (layer.kind) {
        case LayerKind::convolution:
            return conv_backward(std::get<ConvParams>(layer.params), in.shape(), grad_out);
        case LayerKind::relu: {
            Tensor g = grad_out;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!(in[i] > 0.0)) g[i] = 0.0;
            return g;
        }
        case LayerKind::maxpool: {
            const auto& p = std::get<PoolParams>(layer.params);
            Tensor g(in.shape());
            const Shape& os = grad_out.shape();
            for (std::size_t oy = 0; oy < os[0]; ++oy)
                for (std::size_t ox = 0; ox < os[1]; ++ox)
                    for (std::size_t c = 0; c < os[2]; ++c)
                        g[pool_argmax(p, in, oy, ox, c)] += grad_out.at(oy, ox, c);
            return g;
        }
        case LayerKind::global_average_pool: {
            const std::size_t h = in.shape()[0], w = in.shape()[1], ch = in.shape()[2];
            Tensor g(in.shape());
            const double scale = 1.0 / static_cast<double>(h * w);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    for (std::size_t c = 0; c < ch; ++c) g.at(y, x, c) = grad_out[c] * scale;
            return g;
        }
        case LayerKind::flatten:
            return Tensor(in.shape(), grad_out.data());
        case LayerKind::dense: {
            const auto& p = std::get<DenseParams>(layer.params);
            Tensor g(in.shape());
            for (std::size_t o = 0; o < p.out_features; ++o) {
                const double go = grad_out[o];
                if (go == 0.0) continue;
                const double* row = &p.weights.values()[o * p.in_features];
                for (std::size_t i = 0; i < p.in_features; ++i) g[i] += row[i] * go;
            }
            return g;
        }
    }
    return grad_out;
}

Tensor normalize_input(const ModelGraph& model, const Tensor& image) {
    const auto& s = model.input_shape();
    if (image.shape() != Shape{s[0], s[1], s[2]})
        throw PreconditionError("image shape " + shape_string(image.shape()) + " does not match model input " +
                                shape_string({s[0], s[1], s[2]}));
    Tensor x = image;
    const std::size_t c = s[2];
    auto v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - model.norm_mean()[i % c]) / model.norm_std()[i % c];
    return x;
}

std::size_t checked_class(const ModelGraph& model, std::size_t class_k) {
    if (class_k >= model.num_classes())
        throw LookupError("class index " + std::to_string(class_k) + " out of range");
    return class_k;
}

std::size_t capture_index_for_gradient(const ModelGraph& model, std::string_view layer) {
    const std::size_t idx = model.layer_index(layer);
    if (idx + 1 == model.layers().size())
        throw UnsupportedLayerError("layer '" + std::string(layer) +
                                    "' is the terminal layer; gradients need at least one layer above it");
    return idx;
}

void check_activation_shape(const ModelGraph& model, std::size_t idx, const Tensor& activation) {
    if (activation.shape() != model.output_shape(idx))
        throw PreconditionError("activation shape " + shape_string(activation.shape()) + " does not match layer '" +
                                model.layers()[idx].name + "' output " + shape_string(model.output_shape(idx)));
}

// Layers idx+1.. applied to `activation`; keeps every intermediate input.
std::vector<Tensor> forward_above(const ModelGraph& model, std::size_t idx, const Tensor& activation) {
    std::vector<Tensor> trace;
    trace.reserve(model.layers().size() - idx);
    trace.push_back(activation);
    for (std::size_t i = idx + 1; i < model.layers().size(); ++i)
        trace.push_back(run_layer(model.layers()[i], trace.back(), model.output_shape(i)));
    return trace;
}

Tensor backward_above(const ModelGraph& model, std::size_t idx, const std::vector<Tensor>& trace,
                      std::size_t class_k) {
    Tensor grad(trace.back().shape());
    grad[class_k] = 1.0;
    for (std::size_t i = model.layers().size() - 1; i > idx; --i)
        grad = backprop_layer(model.layers()[i], trace[i - idx - 1], grad);
    return grad;
}

Tensor activation_at(const ModelGraph& model, const Tensor& image, std::size_t idx) {
    Tensor x = normalize_input(model, image);
    for (std::size_t i = 0; i <= idx; ++i) x = run_layer(model.layers()[i], x, model.output_shape(i));
    return x;
}

}  // namespace

ModelGraph::ModelGraph(std::vector<LayerSpec> layers, std::array<std::size_t, 3> input_shape,
                       std::vector<double> norm_mean, std::vector<double> norm_std,
                       std::vector<std::string> class_names)
    : layers_(std::move(layers)),
      input_shape_(input_shape),
      norm_mean_(std::move(norm_mean)),
      norm_std_(std::move(norm_std)),
      class_names_(std::move(class_names)) {
    if (input_shape_[0] == 0 || input_shape_[1] == 0 || input_shape_[2] == 0)
        throw ValidationError("input shape must be positive");
    if (norm_mean_.size() != input_shape_[2] || norm_std_.size() != input_shape_[2])
        throw ValidationError("normalization needs one mean and std per input channel");
    for (double s : norm_std_)
        if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("normalization std must be positive");
    if (class_names_.empty()) throw ValidationError("model declares no classes");
    if (layers_.empty()) throw ValidationError("model has no layers");

    std::unordered_set<std::string> names;
    Shape shape{input_shape_[0], input_shape_[1], input_shape_[2]};
    for (const auto& layer : layers_) {
        if (layer.name.empty()) throw ValidationError("layer with empty name");
        if (!names.insert(layer.name).second) invalid(layer, "duplicate layer name");
        shape = infer_shape(layer, shape);
        if (const auto* c = std::get_if<ConvParams>(&layer.params);
            c && !(c->weights.all_finite() && c->bias.all_finite()))
            invalid(layer, "non-finite weights");
        if (const auto* d = std::get_if<DenseParams>(&layer.params);
            d && !(d->weights.all_finite() && d->bias.all_finite()))
            invalid(layer, "non-finite weights");
        shapes_.push_back(shape);
    }
    const auto& last = layers_.back();
    if (last.kind != LayerKind::dense) invalid(last, "terminal layer must be dense");
    if (std::get<DenseParams>(last.params).out_features != class_names_.size())
        invalid(last, "output width " + std::to_string(std::get<DenseParams>(last.params).out_features) +
                          " does not match " + std::to_string(class_names_.size()) + " classes");
}

std::size_t ModelGraph::layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i].name == name) return i;
    throw LookupError("unknown layer '" + std::string(name) + "'");
}

Prediction make_prediction(std::vector<double> raw) {
    Prediction p;
    p.logits = std::move(raw);
    const double mx = *std::max_element(p.logits.begin(), p.logits.end());
    p.probabilities.resize(p.logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.logits.size(); ++i) {
        p.probabilities[i] = std::exp(p.logits[i] - mx);
        z += p.probabilities[i];
    }
    for (double& v : p.probabilities) v /= z;
    p.predicted_class = static_cast<std::size_t>(std::max_element(p.logits.begin(), p.logits.end()) - p.logits.begin());
    p.confidence = p.probabilities[p.predicted_class];
    return p;
}

ForwardResult forward(const ModelGraph& model, const Tensor& image, std::string_view capture_layer) {
    const std::size_t capture = model.layer_index(capture_layer);
    Tensor x = normalize_input(model, image);
    Tensor captured;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        x = run_layer(model.layers()[i], x, model.output_shape(i));
        if (i == capture) captured = x;
    }
    return {make_prediction(x.data()), std::move(captured)};
}

std::vector<double> logits(const ModelGraph& model, const Tensor& image) {
    Tensor x = normalize_input(model, image);
    for (std::size_t i = 0; i < model.layers().size(); ++i) x = run_layer(model.layers()[i], x, model.output_shape(i));
    return x.data();
}

std::vector<double> logits_from_activation(const ModelGraph& model, std::string_view layer,
                                           const Tensor& activation) {
    const std::size_t idx = model.layer_index(layer);
    check_activation_shape(model, idx, activation);
    Tensor x = activation;
    for (std::size_t i = idx + 1; i < model.layers().size(); ++i)
        x = run_layer(model.layers()[i], x, model.output_shape(i));
    return x.data();
}

Tensor gradient_from_activation(const ModelGraph& model, std::string_view layer, const Tensor& activation,
                                std::size_t class_k) {
    const std::size_t idx = capture_index_for_gradient(model, layer);
    checked_class(model, class_k);
    check_activation_shape(model, idx, activation);
    return backward_above(model, idx, forward_above(model, idx, activation), class_k);
}

Tensor gradient_at_layer(const ModelGraph& model, const Tensor& image, std::string_view layer, std::size_t class_k) {
    const std::size_t idx = capture_index_for_gradient(model, layer);
    checked_class(model, class_k);
    const auto trace = forward_above(model, idx, activation_at(model, image, idx));
    return backward_above(model, idx, trace, class_k);
}

std::vector<Tensor> gradients_at_layer(const ModelGraph& model, const Tensor& image, std::string_view layer,
                                       const std::vector<std::size_t>& classes) {
    const std::size_t idx = capture_index_for_gradient(model, layer);
    const auto trace = forward_above(model, idx, activation_at(model, image, idx));
    std::vector<Tensor> out;
    out.reserve(classes.size());
    for (std::size_t k : classes) out.push_back(backward_above(model, idx, trace, checked_class(model, k)));
    return out;
}

}  // namespace cprobe
