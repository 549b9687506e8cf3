#include "fbprop/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fbprop/error.hpp"
#include "json.hpp"

namespace fbprop {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer over the combined words
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

void DatasetSpec::validate() const {
    if (samples == 0)
        throw ConfigError("dataset: samples must be positive");
    if (image_shape.size() != 3 || image_shape[0] == 0 || image_shape[1] == 0 ||
        image_shape[2] == 0)
        throw ConfigError("dataset: image_shape must be [C, H, W] with positive extents");
    if (num_labels < 2)
        throw ConfigError("dataset: at least 2 labels required");
    if (num_factors == 0)
        throw ConfigError("dataset: at least 1 factor required");
    if (coupling.size() != num_factors)
        throw ConfigError("dataset: coupling must list labels for each of the " +
                          std::to_string(num_factors) + " factors");
    std::vector<char> covered(num_labels, 0);
    for (std::size_t k = 0; k < coupling.size(); ++k) {
        if (coupling[k].empty())
            throw ConfigError("dataset: factor " + std::to_string(k) +
                              " couples to no label");
        for (std::size_t j : coupling[k]) {
            if (j >= num_labels)
                throw ConfigError("dataset: coupling index " + std::to_string(j) +
                                  " out of range for " + std::to_string(num_labels) +
                                  " labels");
            covered[j] = 1;
        }
    }
    for (std::size_t j = 0; j < num_labels; ++j)
        if (!covered[j])
            throw ConfigError("dataset: label " + std::to_string(j) +
                              " is coupled to no factor");
    if (!(factor_prob > 0.0 && factor_prob < 1.0))
        throw ConfigError("dataset: factor_prob must lie in (0, 1)");
    if (!(label_noise >= 0.0 && label_noise < 0.5))
        throw ConfigError("dataset: label_noise must lie in [0, 0.5)");
    if (pixel_noise < 0.0)
        throw ConfigError("dataset: pixel_noise must be nonnegative");
}

std::vector<std::vector<std::size_t>> default_coupling(std::size_t labels,
                                                       std::size_t factors) {
    std::vector<std::vector<std::size_t>> c(factors);
    for (std::size_t j = 0; j < labels; ++j)
        c[j * factors / labels].push_back(j);
    return c;
}

Tensor Dataset::sample(std::size_t i) const {
    const auto& s = images.shape();
    std::vector<std::size_t> shape(s.begin() + 1, s.end());
    std::size_t n = 1;
    for (std::size_t e : shape)
        n *= e;
    Tensor out = Tensor::zeros(shape);
    std::copy(images.data().begin() + static_cast<std::ptrdiff_t>(i * n),
              images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n),
              out.data().begin());
    return out;
}

std::vector<double> Dataset::label_row(std::size_t i) const {
    std::size_t d = label_dim();
    auto first = labels.data().begin() + static_cast<std::ptrdiff_t>(i * d);
    return std::vector<double>(first, first + static_cast<std::ptrdiff_t>(d));
}

Dataset synth_dataset(const DatasetSpec& spec) {
    spec.validate();
    const std::size_t N = spec.samples;
    const std::size_t C = spec.image_shape[0];
    const std::size_t H = spec.image_shape[1];
    const std::size_t W = spec.image_shape[2];
    const std::size_t d = spec.num_labels;
    const std::size_t K = spec.num_factors;

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // One fixed pattern per factor: a Gaussian bump at a random location with
    // alternating sign, drawn once so every sample shares the same dictionary.
    struct Pattern {
        double cy, cx, inv2s2, sign;
        std::size_t channel;
    };
    std::vector<Pattern> patterns(K);
    for (std::size_t k = 0; k < K; ++k) {
        Pattern p;
        p.cy = (0.15 + 0.7 * unit(rng)) * static_cast<double>(H);
        p.cx = (0.15 + 0.7 * unit(rng)) * static_cast<double>(W);
        double sigma = (0.06 + 0.08 * unit(rng)) * static_cast<double>(H);
        p.inv2s2 = 1.0 / (2.0 * sigma * sigma);
        p.sign = (k % 2 == 0) ? 1.0 : -1.0;
        p.channel = k % C;
        patterns[k] = p;
    }

    Dataset out;
    out.images = Tensor::zeros({N, C, H, W});
    out.labels = Tensor::zeros({N, d});
    out.factors = Tensor::zeros({N, K});
    auto& img = out.images.data();
    auto& lab = out.labels.data();
    auto& fac = out.factors.data();

    const std::size_t plane = H * W;
    const std::size_t chw = C * plane;
    std::vector<char> z(K);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            z[k] = unit(rng) < spec.factor_prob ? 1 : 0;
            fac[i * K + k] = z[k];
        }
        double* px = img.data() + i * chw;
        for (std::size_t k = 0; k < K; ++k) {
            if (!z[k])
                continue;
            const Pattern& p = patterns[k];
            double* ch = px + p.channel * plane;
            for (std::size_t y = 0; y < H; ++y) {
                double dy = static_cast<double>(y) - p.cy;
                for (std::size_t x = 0; x < W; ++x) {
                    double dx = static_cast<double>(x) - p.cx;
                    ch[y * W + x] += p.sign * spec.amplitude *
                                     std::exp(-(dy * dy + dx * dx) * p.inv2s2);
                }
            }
        }
        if (spec.pixel_noise > 0.0)
            for (std::size_t q = 0; q < chw; ++q)
                px[q] += spec.pixel_noise * gauss(rng);

        double* y = lab.data() + i * d;
        for (std::size_t k = 0; k < K; ++k)
            if (z[k])
                for (std::size_t j : spec.coupling[k])
                    y[j] = 1.0;
        if (spec.label_noise > 0.0)
            for (std::size_t j = 0; j < d; ++j)
                if (unit(rng) < spec.label_noise)
                    y[j] = 1.0 - y[j];
    }
    return out;
}

void save_dataset(const Dataset& data, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    write_tensor(data.images, (fs::path(dir) / "images.fbpt").string());
    write_tensor(data.labels, (fs::path(dir) / "labels.fbpt").string());
    write_tensor(data.factors, (fs::path(dir) / "factors.fbpt").string());
    json manifest{{"version", 1},
                  {"samples", data.size()},
                  {"labels", data.labels.shape()[1]},
                  {"factors", data.factors.shape()[1]}};
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out)
        throw IoError("cannot write " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in)
        throw IoError("cannot open " + dir + "/manifest.json");
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw IoError("corrupt dataset manifest in " + dir + ": " + e.what());
    }
    if (manifest.value("version", 0) != 1)
        throw IoError("unsupported dataset version in " + dir);
    Dataset data;
    data.images = read_tensor((fs::path(dir) / "images.fbpt").string());
    data.labels = read_tensor((fs::path(dir) / "labels.fbpt").string());
    data.factors = read_tensor((fs::path(dir) / "factors.fbpt").string());
    if (data.images.rank() != 4 || data.labels.rank() != 2 ||
        data.images.shape()[0] != data.labels.shape()[0] ||
        data.labels.shape()[0] != manifest.value("samples", std::size_t{0}))
        throw IoError("dataset tensors in " + dir + " do not match the manifest");
    return data;
}

DatasetSpec dataset_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid dataset spec JSON: ") + e.what());
    }
    DatasetSpec spec;
    try {
        spec.samples = j.value("samples", std::size_t{0});
        spec.image_shape = j.value("image_shape", std::vector<std::size_t>{});
        spec.num_labels = j.value("labels", std::size_t{0});
        spec.num_factors = j.value("factors", std::size_t{0});
        if (j.contains("coupling"))
            spec.coupling = j["coupling"].get<std::vector<std::vector<std::size_t>>>();
        else if (spec.num_labels > 0 && spec.num_factors > 0)
            spec.coupling = default_coupling(spec.num_labels, spec.num_factors);
        spec.factor_prob = j.value("factor_prob", spec.factor_prob);
        spec.amplitude = j.value("amplitude", spec.amplitude);
        spec.pixel_noise = j.value("pixel_noise", spec.pixel_noise);
        spec.label_noise = j.value("label_noise", spec.label_noise);
        spec.seed = j.value("seed", std::uint64_t{0});
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid dataset spec field: ") + e.what());
    }
    spec.validate();
    return spec;
}

DatasetSpec load_dataset_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return dataset_spec_from_json(text);
}

} // namespace fbprop
