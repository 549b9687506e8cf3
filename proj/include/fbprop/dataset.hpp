#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbprop/tensor.hpp"

namespace fbprop {

// Deterministic seed derivation for sub-streams (splits, epochs, sweep reps).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// Synthetic multi-label image source. K latent Bernoulli factors each stamp a
// fixed spatial pattern into the image; labels switch on when any coupled
// factor is active, then flip with the noise rate. Correlation between labels
// sharing a factor is built in, which is the property feedback inference
// exploits.
struct DatasetSpec {
    std::size_t samples = 0;
    std::vector<std::size_t> image_shape; // [C, H, W]
    std::size_t num_labels = 0;           // d
    std::size_t num_factors = 0;          // K
    // coupling[k] lists the label indices switched on by factor k
    std::vector<std::vector<std::size_t>> coupling;
    double factor_prob = 0.3;
    double amplitude = 1.0;
    double pixel_noise = 0.25;
    double label_noise = 0.0; // flip rate, in [0, 0.5)
    std::uint64_t seed = 0;

    void validate() const;
};

// Contiguous-block coupling: label j belongs to factor j*K/d. Covers every
// label with K blocks of (roughly) equal size.
std::vector<std::vector<std::size_t>> default_coupling(std::size_t labels,
                                                       std::size_t factors);

struct Dataset {
    Tensor images;  // [N, C, H, W]
    Tensor labels;  // [N, d]
    Tensor factors; // [N, K] latent ground truth, kept for diagnostics

    std::size_t size() const { return images.shape().empty() ? 0 : images.shape()[0]; }
    std::size_t label_dim() const { return labels.shape()[1]; }
    Tensor sample(std::size_t i) const;             // [C, H, W]
    std::vector<double> label_row(std::size_t i) const;
};

Dataset synth_dataset(const DatasetSpec& spec);

// Directory layout: images.fbpt, labels.fbpt, factors.fbpt, manifest.json.
void save_dataset(const Dataset& data, const std::string& dir);
Dataset load_dataset(const std::string& dir);

DatasetSpec dataset_spec_from_json(const std::string& text);
DatasetSpec load_dataset_spec(const std::string& path);

} // namespace fbprop
