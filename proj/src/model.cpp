#include "fbprop/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"

namespace fbprop {

using nlohmann::json;

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::SigmoidHead: return "sigmoid-head";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::MaxPool: return "maxpool";
    }
    throw ConfigError("unknown layer kind");
}

LayerKind layer_kind_from_name(const std::string& name) {
    if (name == "conv2d") return LayerKind::Conv2d;
    if (name == "dense") return LayerKind::Dense;
    if (name == "relu") return LayerKind::Relu;
    if (name == "sigmoid-head") return LayerKind::SigmoidHead;
    if (name == "flatten") return LayerKind::Flatten;
    if (name == "maxpool") return LayerKind::MaxPool;
    throw ConfigError("unknown layer kind '" + name + "'");
}

std::vector<std::size_t> layer_output_shape(const LayerSpec& spec,
                                            const std::vector<std::size_t>& in) {
    try {
        switch (spec.kind) {
        case LayerKind::Conv2d: {
            if (in.size() != 3) throw ShapeError("conv2d input must be [C,H,W]");
            if (spec.out_channels == 0 || spec.kernel == 0)
                throw ShapeError("conv2d needs out_channels and kernel");
            return {spec.out_channels,
                    conv_out_extent(in[1], spec.kernel, spec.stride, spec.pad),
                    conv_out_extent(in[2], spec.kernel, spec.stride, spec.pad)};
        }
        case LayerKind::Dense: {
            if (in.size() != 1) throw ShapeError("dense input must be rank-1");
            if (spec.units == 0) throw ShapeError("dense needs units");
            return {spec.units};
        }
        case LayerKind::Relu:
        case LayerKind::SigmoidHead:
            return in;
        case LayerKind::Flatten:
            return {shape_product(in)};
        case LayerKind::MaxPool: {
            if (in.size() != 3) throw ShapeError("maxpool input must be [C,H,W]");
            const std::size_t stride =
                spec.pool_stride == 0 ? spec.window : spec.pool_stride;
            return {in[0], conv_out_extent(in[1], spec.window, stride, 0),
                    conv_out_extent(in[2], spec.window, stride, 0)};
        }
        }
    } catch (const ShapeError& e) {
        throw ShapeError("layer '" + spec.name + "': " + e.what());
    }
    throw ConfigError("unknown layer kind");
}

namespace {

std::vector<std::vector<std::size_t>> compose_shapes(
    const std::vector<LayerSpec>& layers, const std::vector<std::size_t>& input) {
    std::vector<std::vector<std::size_t>> shapes;
    std::vector<std::size_t> cur = input;
    for (const LayerSpec& l : layers) {
        cur = layer_output_shape(l, cur);
        shapes.push_back(cur);
    }
    return shapes;
}

} // namespace

Model::Model(std::vector<std::size_t> input_shape, std::vector<LayerSpec> layers,
             std::map<std::string, Tensor> parameters, std::vector<Head> heads)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)),
      parameters_(std::move(parameters)), heads_(std::move(heads)) {
    if (layers_.empty()) throw ConfigError("model needs at least one layer");
    std::set<std::string> names;
    for (const LayerSpec& l : layers_) {
        if (l.name.empty()) throw ConfigError("layer names must be non-empty");
        if (l.name == "input")
            throw ConfigError("'input' is reserved for the input pivot");
        if (!names.insert(l.name).second)
            throw ConfigError("duplicate layer name '" + l.name + "'");
    }
    const auto shapes = compose_shapes(layers_, input_shape_);
    const auto& out = shapes.back();
    if (out.size() != 1)
        throw ShapeError("model output must be a rank-1 score vector, got " +
                         shape_to_string(out));
    output_dim_ = out[0];

    for (const LayerSpec& l : layers_) {
        if (!l.has_parameters()) continue;
        if (!parameters_.count(l.name + ".w") || !parameters_.count(l.name + ".b"))
            throw ConfigError("missing parameters for layer '" + l.name + "'");
    }

    if (heads_.empty()) heads_.push_back({"labels", 0, output_dim_});
    std::vector<char> covered(output_dim_, 0);
    for (const Head& h : heads_) {
        if (h.begin >= h.end || h.end > output_dim_)
            throw ConfigError("head '" + h.name + "' range is invalid");
        for (std::size_t i = h.begin; i < h.end; ++i) {
            if (covered[i])
                throw ConfigError("head ranges overlap at output " +
                                  std::to_string(i));
            covered[i] = 1;
        }
    }
    if (std::count(covered.begin(), covered.end(), 1) !=
        static_cast<long>(output_dim_))
        throw ConfigError("head ranges do not cover the output dimension");
}

const Tensor& Model::parameter(const std::string& name) const {
    auto it = parameters_.find(name);
    if (it == parameters_.end())
        throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

void Model::set_parameter(const std::string& name, Tensor value) {
    auto it = parameters_.find(name);
    if (it == parameters_.end())
        throw ConfigError("unknown parameter '" + name + "'");
    if (!it->second.same_shape(value))
        throw ShapeError("parameter '" + name + "' shape cannot change");
    it->second = std::move(value);
}

int Model::layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i].name == name) return static_cast<int>(i);
    return -1;
}

Tape Model::forward_full(const Tensor& input) const {
    if (input.shape() != input_shape_)
        throw ShapeError("input shape " + shape_to_string(input.shape()) +
                         " does not match model input " +
                         shape_to_string(input_shape_));
    Tape tape;
    int cur = tape.add_input(input, "input");
    int logits = cur;
    for (const LayerSpec& l : layers_) {
        switch (l.kind) {
        case LayerKind::Conv2d: {
            int w = tape.add_parameter(parameter(l.name + ".w"));
            int b = tape.add_parameter(parameter(l.name + ".b"));
            tape.register_pivot(l.name + ".w", w);
            tape.register_pivot(l.name + ".b", b);
            cur = tape.add_conv2d(cur, w, b, l.stride, l.pad);
            break;
        }
        case LayerKind::Dense: {
            int w = tape.add_parameter(parameter(l.name + ".w"));
            int b = tape.add_parameter(parameter(l.name + ".b"));
            tape.register_pivot(l.name + ".w", w);
            tape.register_pivot(l.name + ".b", b);
            cur = tape.add_dense(cur, w, b);
            break;
        }
        case LayerKind::Relu:
            cur = tape.add_relu(cur);
            break;
        case LayerKind::SigmoidHead:
            cur = tape.add_sigmoid(cur);
            break;
        case LayerKind::Flatten:
            cur = tape.add_flatten(cur);
            break;
        case LayerKind::MaxPool:
            cur = tape.add_maxpool(cur, l.window,
                                   l.pool_stride == 0 ? l.window : l.pool_stride);
            break;
        }
        tape.register_pivot(l.name, cur);
        if (l.kind != LayerKind::SigmoidHead) logits = cur;
    }
    tape.set_output(cur, logits);
    return tape;
}

Tensor Model::predict(const Tensor& input) const {
    Tape tape = forward_full(input);
    return tape.value(tape.output_node());
}

std::uint64_t Model::parameter_checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, tensor] : parameters_) {
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        h ^= tensor_checksum(tensor);
        h *= 1099511628211ull;
    }
    return h;
}

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Model build_model(const std::vector<LayerSpec>& specs,
                  std::vector<std::size_t> input_shape, std::vector<Head> heads,
                  std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::map<std::string, Tensor> params;
    std::vector<std::size_t> cur = input_shape;
    for (const LayerSpec& l : specs) {
        const std::vector<std::size_t> out = layer_output_shape(l, cur);
        if (l.kind == LayerKind::Conv2d) {
            const std::size_t fan_in = cur[0] * l.kernel * l.kernel;
            const std::size_t fan_out = l.out_channels * l.kernel * l.kernel;
            const double s = glorot_bound(fan_in, fan_out);
            std::uniform_real_distribution<double> dist(-s, s);
            Tensor w = Tensor::zeros({l.out_channels, cur[0], l.kernel, l.kernel});
            for (double& v : w.data()) v = dist(rng);
            Tensor b = Tensor::zeros({l.out_channels});
            for (double& v : b.data()) v = dist(rng);
            params.emplace(l.name + ".w", std::move(w));
            params.emplace(l.name + ".b", std::move(b));
        } else if (l.kind == LayerKind::Dense) {
            const std::size_t fan_in = cur[0];
            const std::size_t fan_out = l.units;
            const double s = glorot_bound(fan_in, fan_out);
            std::uniform_real_distribution<double> dist(-s, s);
            Tensor w = Tensor::zeros({l.units, cur[0]});
            for (double& v : w.data()) v = dist(rng);
            Tensor b = Tensor::zeros({l.units});
            for (double& v : b.data()) v = dist(rng);
            params.emplace(l.name + ".w", std::move(w));
            params.emplace(l.name + ".b", std::move(b));
        }
        cur = out;
    }
    return Model(std::move(input_shape), specs, std::move(params),
                 std::move(heads));
}

std::vector<std::string> pivot_set(const Model& model,
                                   std::vector<std::string> names) {
    std::vector<std::pair<int, std::string>> ordered;
    std::set<std::string> seen;
    for (std::string& n : names) {
        if (!seen.insert(n).second)
            throw ConfigError("duplicate pivot '" + n + "'");
        if (n == "input") {
            ordered.emplace_back(-1, std::move(n));
            continue;
        }
        int idx = model.layer_index(n);
        if (idx < 0) throw ConfigError("unknown layer '" + n + "'");
        ordered.emplace_back(idx, std::move(n));
    }
    std::sort(ordered.begin(), ordered.end());
    std::vector<std::string> out;
    out.reserve(ordered.size());
    for (auto& [idx, n] : ordered) out.push_back(std::move(n));
    return out;
}

namespace {

json layer_to_json(const LayerSpec& l) {
    json hyper = json::object();
    switch (l.kind) {
    case LayerKind::Conv2d:
        hyper["out_channels"] = l.out_channels;
        hyper["kernel"] = l.kernel;
        hyper["stride"] = l.stride;
        hyper["pad"] = l.pad;
        break;
    case LayerKind::Dense:
        hyper["units"] = l.units;
        break;
    case LayerKind::MaxPool:
        hyper["window"] = l.window;
        if (l.pool_stride != 0) hyper["stride"] = l.pool_stride;
        break;
    default:
        break;
    }
    return json{{"name", l.name}, {"kind", layer_kind_name(l.kind)},
                {"hyperparams", hyper}};
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec l;
    l.name = j.at("name").get<std::string>();
    l.kind = layer_kind_from_name(j.at("kind").get<std::string>());
    const json& hyper = j.value("hyperparams", json::object());
    switch (l.kind) {
    case LayerKind::Conv2d:
        l.out_channels = hyper.at("out_channels").get<std::size_t>();
        l.kernel = hyper.at("kernel").get<std::size_t>();
        l.stride = hyper.value("stride", std::size_t{1});
        l.pad = hyper.value("pad", std::size_t{0});
        break;
    case LayerKind::Dense:
        l.units = hyper.at("units").get<std::size_t>();
        break;
    case LayerKind::MaxPool:
        l.window = hyper.value("window", std::size_t{2});
        l.pool_stride = hyper.value("stride", std::size_t{0});
        break;
    default:
        break;
    }
    return l;
}

} // namespace

void save_model(const Model& model, const std::string& json_path) {
    namespace fs = std::filesystem;
    const fs::path jpath(json_path);
    const std::string weights_name = jpath.stem().string() + ".weights";

    json doc;
    doc["version"] = kModelFormatVersion;
    doc["input_shape"] = model.input_shape();
    doc["layers"] = json::array();
    for (const LayerSpec& l : model.layers())
        doc["layers"].push_back(layer_to_json(l));
    doc["heads"] = json::array();
    for (const Head& h : model.heads())
        doc["heads"].push_back(
            json{{"name", h.name}, {"begin", h.begin}, {"end", h.end}});
    doc["weights_file"] = weights_name;
    doc["trained_class_weights"] = model.class_weights().has_value();

    std::ofstream wf(jpath.parent_path() / weights_name, std::ios::binary);
    if (!wf) throw IoError("cannot open weights file for writing");
    for (const LayerSpec& l : model.layers()) {
        if (!l.has_parameters()) continue;
        write_tensor(wf, model.parameter(l.name + ".w"));
        write_tensor(wf, model.parameter(l.name + ".b"));
    }
    if (model.class_weights()) {
        const auto& cw = *model.class_weights();
        write_tensor(wf, Tensor({cw.size()}, cw));
    }
    wf.close();

    std::ofstream jf(jpath);
    if (!jf) throw IoError("cannot open " + json_path + " for writing");
    jf << doc.dump(2) << "\n";
}

Model load_model(const std::string& json_path) {
    namespace fs = std::filesystem;
    std::ifstream jf(json_path);
    if (!jf) throw IoError("cannot open " + json_path);
    json doc;
    try {
        jf >> doc;
    } catch (const json::exception& e) {
        throw IoError("corrupt model file: " + std::string(e.what()));
    }
    const int version = doc.value("version", -1);
    if (version != kModelFormatVersion)
        throw IoError("unsupported model format version " +
                      std::to_string(version));

    std::vector<std::size_t> input_shape =
        doc.at("input_shape").get<std::vector<std::size_t>>();
    std::vector<LayerSpec> layers;
    for (const json& lj : doc.at("layers")) layers.push_back(layer_from_json(lj));
    std::vector<Head> heads;
    for (const json& hj : doc.at("heads"))
        heads.push_back({hj.at("name").get<std::string>(),
                         hj.at("begin").get<std::size_t>(),
                         hj.at("end").get<std::size_t>()});

    const fs::path wpath = fs::path(json_path).parent_path() /
                           doc.at("weights_file").get<std::string>();
    std::ifstream wf(wpath, std::ios::binary);
    if (!wf) throw IoError("cannot open weights file " + wpath.string());

    std::map<std::string, Tensor> params;
    std::vector<std::size_t> cur = input_shape;
    for (const LayerSpec& l : layers) {
        const auto out = layer_output_shape(l, cur);
        if (l.has_parameters()) {
            Tensor w = read_tensor(wf);
            Tensor b = read_tensor(wf);
            params.emplace(l.name + ".w", std::move(w));
            params.emplace(l.name + ".b", std::move(b));
        }
        cur = out;
    }

    Model model(std::move(input_shape), std::move(layers), std::move(params),
                std::move(heads));
    if (doc.value("trained_class_weights", false)) {
        Tensor cw = read_tensor(wf);
        if (cw.size() != model.output_dim())
            throw IoError("class weight count does not match model outputs");
        model.set_class_weights(cw.data());
    }

    // Cross-check parameter shapes against the architecture.
    cur = model.input_shape();
    for (const LayerSpec& l : model.layers()) {
        if (l.kind == LayerKind::Conv2d) {
            const Tensor& w = model.parameter(l.name + ".w");
            const std::vector<std::size_t> expect = {l.out_channels, cur[0],
                                                     l.kernel, l.kernel};
            if (w.shape() != expect)
                throw IoError("weights for layer '" + l.name +
                              "' do not match its architecture");
        } else if (l.kind == LayerKind::Dense) {
            const Tensor& w = model.parameter(l.name + ".w");
            if (w.shape() != std::vector<std::size_t>{l.units, cur[0]})
                throw IoError("weights for layer '" + l.name +
                              "' do not match its architecture");
        }
        cur = layer_output_shape(l, cur);
    }
    return model;
}

Model load_model_arch(const std::string& json_path, std::uint64_t seed) {
    std::ifstream jf(json_path);
    if (!jf) throw IoError("cannot open " + json_path);
    json doc;
    try {
        jf >> doc;
    } catch (const json::exception& e) {
        throw ConfigError("invalid model architecture JSON in " + json_path +
                          ": " + e.what());
    }
    try {
        std::vector<std::size_t> input_shape =
            doc.at("input_shape").get<std::vector<std::size_t>>();
        std::vector<LayerSpec> layers;
        for (const json& lj : doc.at("layers"))
            layers.push_back(layer_from_json(lj));
        std::vector<Head> heads;
        if (doc.contains("heads"))
            for (const json& hj : doc["heads"])
                heads.push_back({hj.at("name").get<std::string>(),
                                 hj.at("begin").get<std::size_t>(),
                                 hj.at("end").get<std::size_t>()});
        std::uint64_t s = seed != 0 ? seed : doc.value("seed", std::uint64_t{1});
        return build_model(layers, std::move(input_shape), std::move(heads), s);
    } catch (const json::exception& e) {
        throw ConfigError("invalid model architecture in " + json_path + ": " +
                          e.what());
    }
}

} // namespace fbprop
