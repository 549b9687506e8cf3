#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fbprop/autograd.hpp"
#include "fbprop/tensor.hpp"

namespace fbprop {

enum class LayerKind { Conv2d, Dense, Relu, SigmoidHead, Flatten, MaxPool };

std::string layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
    std::string name;
    LayerKind kind{};
    // conv2d
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    // dense
    std::size_t units = 0;
    // maxpool (stride 0 means equal to window)
    std::size_t window = 2;
    std::size_t pool_stride = 0;

    bool has_parameters() const {
        return kind == LayerKind::Conv2d || kind == LayerKind::Dense;
    }
};

// Output shape of one layer; throws ShapeError naming the layer on mismatch.
std::vector<std::size_t> layer_output_shape(const LayerSpec& spec,
                                            const std::vector<std::size_t>& in);

struct Head {
    std::string name;
    std::size_t begin = 0;
    std::size_t end = 0; // exclusive
};

// Feed-forward model: ordered named layers over a fixed input shape, with one
// or more output heads splitting the final output vector. Immutable during
// inference; only training mutates parameters.
class Model {
public:
    Model(std::vector<std::size_t> input_shape, std::vector<LayerSpec> layers,
          std::map<std::string, Tensor> parameters, std::vector<Head> heads);

    const std::vector<std::size_t>& input_shape() const { return input_shape_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    const std::vector<Head>& heads() const { return heads_; }
    const std::map<std::string, Tensor>& parameters() const { return parameters_; }

    const Tensor& parameter(const std::string& name) const;
    void set_parameter(const std::string& name, Tensor value);

    int layer_index(const std::string& name) const; // -1 when absent
    const LayerSpec& layer(std::size_t i) const { return layers_[i]; }
    std::size_t output_dim() const { return output_dim_; }

    // Per-label training class weights, carried with the model after training.
    const std::optional<std::vector<double>>& class_weights() const {
        return class_weights_;
    }
    void set_class_weights(std::vector<double> w) { class_weights_ = std::move(w); }

    // Full forward pass onto a fresh tape. Registers pivot "input" plus one
    // pivot per layer name, and marks the output/logit nodes.
    Tape forward_full(const Tensor& input) const;

    // Plain forward returning only the final output vector.
    Tensor predict(const Tensor& input) const;

    std::uint64_t parameter_checksum() const;

private:
    std::vector<std::size_t> input_shape_;
    std::vector<LayerSpec> layers_;
    std::map<std::string, Tensor> parameters_;
    std::vector<Head> heads_;
    std::optional<std::vector<double>> class_weights_;
    std::size_t output_dim_ = 0;
};

// Deterministic initialization: all parameters uniform in [-s, s] with
// s = sqrt(6 / (fan_in + fan_out)). Same seed, same model, bit for bit.
Model build_model(const std::vector<LayerSpec>& specs,
                  std::vector<std::size_t> input_shape, std::vector<Head> heads,
                  std::uint64_t seed);

double glorot_bound(std::size_t fan_in, std::size_t fan_out);

// Validates names and returns them sorted front-to-back.
std::vector<std::string> pivot_set(const Model& model,
                                   std::vector<std::string> names);

// Model file: JSON next to an FBPT weight blob (tensors concatenated in layer
// order, weights before bias).
void save_model(const Model& model, const std::string& json_path);
Model load_model(const std::string& json_path);

// Architecture-only JSON (input_shape, layers, optional heads, optional seed):
// builds a freshly initialized, untrained model. `seed` overrides the file's
// seed when nonzero.
Model load_model_arch(const std::string& json_path, std::uint64_t seed = 0);

inline constexpr int kModelFormatVersion = 1;

} // namespace fbprop
