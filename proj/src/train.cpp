#include "fbprop/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "fbprop/error.hpp"

namespace fbprop {
namespace {

std::vector<std::size_t> all_indices(std::size_t d) {
    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

struct ParamGrads {
    std::vector<std::string> names; // parameter names in layer order
    std::vector<Tensor> sums;       // accumulated gradients

    void reset() {
        for (auto& t : sums)
            std::fill(t.data().begin(), t.data().end(), 0.0);
    }
};

ParamGrads make_grads(const Model& model) {
    ParamGrads g;
    for (const LayerSpec& l : model.layers()) {
        if (!l.has_parameters())
            continue;
        for (const char* suffix : {".w", ".b"}) {
            g.names.push_back(l.name + suffix);
            g.sums.push_back(Tensor::zeros(model.parameter(g.names.back()).shape()));
        }
    }
    return g;
}

} // namespace

double dataset_loss(const Model& model, const Dataset& data,
                    const ClassWeights& weights) {
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tape tape = model.forward_full(data.sample(i));
        total += weighted_bce(tape.value(tape.logits_node()), data.label_row(i),
                              weights);
    }
    return total / static_cast<double>(data.size());
}

TrainCurve train(Model& model, const Dataset& train_set, const Dataset& val_set,
                 const TrainConfig& config) {
    if (config.batch == 0)
        throw ConfigError("train: batch size must be positive");
    if (train_set.size() == 0)
        throw ConfigError("train: empty training set");
    if (train_set.label_dim() != model.output_dim())
        throw ShapeError("train: label dimension does not match the model output");

    ClassWeights weights = class_weights(train_set.labels);
    model.set_class_weights(weights.lambda);

    const std::size_t N = train_set.size();
    const std::vector<std::size_t> subset = all_indices(model.output_dim());
    ParamGrads grads = make_grads(model);
    std::vector<int> target_nodes(grads.names.size());

    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainCurve curve;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(config.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < N; start += config.batch) {
            std::size_t stop = std::min(start + config.batch, N);
            grads.reset();
            double batch_loss = 0.0;
            for (std::size_t p = start; p < stop; ++p) {
                std::size_t i = order[p];
                Tape tape = model.forward_full(train_set.sample(i));
                int loss = tape.add_bce_logits(tape.logits_node(), subset,
                                               train_set.label_row(i),
                                               weights.lambda);
                batch_loss += tape.value(loss).data()[0];
                for (std::size_t t = 0; t < grads.names.size(); ++t)
                    target_nodes[t] = tape.pivot(grads.names[t]);
                std::vector<Tensor> g = tape.backward_to(loss, target_nodes);
                for (std::size_t t = 0; t < g.size(); ++t) {
                    auto& acc = grads.sums[t].data();
                    const auto& src = g[t].data();
                    for (std::size_t q = 0; q < acc.size(); ++q)
                        acc[q] += src[q];
                }
            }
            double scale = config.rate / static_cast<double>(stop - start);
            if (!std::isfinite(batch_loss))
                throw ValueError("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch starting at " +
                                 std::to_string(start));
            for (std::size_t t = 0; t < grads.names.size(); ++t) {
                Tensor p = model.parameter(grads.names[t]);
                auto& pd = p.data();
                const auto& gd = grads.sums[t].data();
                for (std::size_t q = 0; q < pd.size(); ++q)
                    pd[q] -= scale * gd[q];
                model.set_parameter(grads.names[t], std::move(p));
            }
            epoch_loss += batch_loss;
            seen += stop - start;
        }
        curve.train_loss.push_back(epoch_loss / static_cast<double>(seen));
        curve.val_loss.push_back(val_set.size() > 0
                                     ? dataset_loss(model, val_set, weights)
                                     : 0.0);
        if (config.log_progress)
            std::fprintf(stderr, "epoch %zu/%zu  train %.5f  val %.5f\n",
                         epoch + 1, config.epochs, curve.train_loss.back(),
                         curve.val_loss.back());
    }
    return curve;
}

} // namespace fbprop
