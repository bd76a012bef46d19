#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cprobe/tensor.hpp"

namespace cprobe {

enum class LayerKind { convolution, relu, maxpool, global_average_pool, flatten, dense };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

// Weights are (out_channels, kernel_h, kernel_w, in_channels); bias is (out_channels).
struct ConvParams {
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    Tensor weights;
    Tensor bias;
};

struct PoolParams {
    std::size_t window = 2;
    std::size_t stride = 2;
};

// Weights are (out_features, in_features): row k produces output k.
struct DenseParams {
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    Tensor weights;
    Tensor bias;
};

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::relu;
    std::variant<std::monostate, ConvParams, PoolParams, DenseParams> params;
};

struct Prediction {
    std::string instance_id;
    std::vector<double> logits;
    std::vector<double> probabilities;
    std::size_t predicted_class = 0;
    double confidence = 0.0;
    // Ground-truth label when the prediction was made for a labelled instance.
    std::optional<std::size_t> label;

    bool correct() const { return label && *label == predicted_class; }

    friend bool operator==(const Prediction&, const Prediction&) = default;
};

// Immutable, validated layered classifier.
class ModelGraph {
public:
    // Validates shapes and names; throws ValidationError naming the offending layer.
    ModelGraph(std::vector<LayerSpec> layers, std::array<std::size_t, 3> input_shape,
               std::vector<double> norm_mean, std::vector<double> norm_std,
               std::vector<std::string> class_names);

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    const std::array<std::size_t, 3>& input_shape() const noexcept { return input_shape_; }
    const std::vector<double>& norm_mean() const noexcept { return norm_mean_; }
    const std::vector<double>& norm_std() const noexcept { return norm_std_; }
    const std::vector<std::string>& class_names() const noexcept { return class_names_; }
    std::size_t num_classes() const noexcept { return class_names_.size(); }

    // Output shape of layer i.
    const Shape& output_shape(std::size_t i) const { return shapes_.at(i); }
    // Index of the named layer; throws LookupError.
    std::size_t layer_index(std::string_view name) const;

private:
    std::vector<LayerSpec> layers_;
    std::array<std::size_t, 3> input_shape_;
    std::vector<double> norm_mean_;
    std::vector<double> norm_std_;
    std::vector<std::string> class_names_;
    std::vector<Shape> shapes_;
};

struct ForwardResult {
    Prediction prediction;
    Tensor activation;
};

// Builds a Prediction (softmax, argmax) from raw logits.
Prediction make_prediction(std::vector<double> logits);

// Normalizes `image` with the model's per-channel statistics and runs every
// layer, capturing the output of `capture_layer`.
ForwardResult forward(const ModelGraph& model, const Tensor& image, std::string_view capture_layer);

// Logits only.
std::vector<double> logits(const ModelGraph& model, const Tensor& image);

// Runs the layers strictly above `layer`, starting from its output activation.
std::vector<double> logits_from_activation(const ModelGraph& model, std::string_view layer,
                                           const Tensor& activation);

// d logit_k / d activation(layer), for the activation produced by `image`.
Tensor gradient_at_layer(const ModelGraph& model, const Tensor& image, std::string_view layer,
                         std::size_t class_k);

// Same derivative evaluated at a given activation value.
Tensor gradient_from_activation(const ModelGraph& model, std::string_view layer,
                                const Tensor& activation, std::size_t class_k);

// Gradients for several class logits at once, sharing one forward pass.
std::vector<Tensor> gradients_at_layer(const ModelGraph& model, const Tensor& image,
                                       std::string_view layer, const std::vector<std::size_t>& classes);

}  // namespace cprobe
