#pragma once

#include <cstdint>
#include <vector>

#include "fbprop/dataset.hpp"
#include "fbprop/loss.hpp"
#include "fbprop/model.hpp"

namespace fbprop {

struct TrainConfig {
    std::size_t epochs = 5;
    std::size_t batch = 16;
    double rate = 0.05;
    std::uint64_t seed = 0;
    bool log_progress = false; // one line per epoch on stderr
};

struct TrainCurve {
    std::vector<double> train_loss; // running mean over the epoch's batches
    std::vector<double> val_loss;   // full validation pass after each epoch
};

// Minibatch SGD on the class-weighted BCE over all labels. Deterministic for
// a fixed seed: shuffles with a per-epoch derived stream, accumulates sample
// gradients in index order. The trained class weights are attached to the
// model for later use by feedback inference. Throws ValueError if the loss
// stops being finite.
TrainCurve train(Model& model, const Dataset& train_set, const Dataset& val_set,
                 const TrainConfig& config);

// Mean weighted BCE of the model over a dataset (forward only).
double dataset_loss(const Model& model, const Dataset& data,
                    const ClassWeights& weights);

} // namespace fbprop
