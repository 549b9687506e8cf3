#include "fbprop/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fbprop {

void EvidencePartition::validate(std::size_t output_dim) const {
    for (const auto& [idx, value] : known) {
        if (idx >= output_dim)
            throw ConfigError("known index " + std::to_string(idx) +
                              " out of output range " +
                              std::to_string(output_dim));
        if (value != 0.0 && value != 1.0)
            throw ConfigError("known values must be 0 or 1");
    }
    for (std::size_t idx : unknown) {
        if (idx >= output_dim)
            throw ConfigError("unknown index " + std::to_string(idx) +
                              " out of output range " +
                              std::to_string(output_dim));
        if (known.count(idx))
            throw ConfigError("label " + std::to_string(idx) +
                              " is both known and unknown");
    }
}

ClassWeights class_weights(const Tensor& labels) {
    ClassWeightsWithDrop r = class_weights_with_drop(labels);
    if (!r.dropped.empty()) {
        std::string list;
        for (std::size_t j : r.dropped) {
            if (!list.empty()) list += ",";
            list += std::to_string(j);
        }
        throw ValueError("labels with zero positive occurrences: " + list);
    }
    return std::move(r.weights);
}

ClassWeightsWithDrop class_weights_with_drop(const Tensor& labels) {
    if (labels.rank() != 2) throw ShapeError("labels must be an N x d matrix");
    const std::size_t n = labels.shape()[0], d = labels.shape()[1];
    if (n == 0) throw ShapeError("labels must have N >= 1");
    ClassWeightsWithDrop out;
    out.weights.lambda.assign(d, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
        double positives = 0.0;
        for (std::size_t i = 0; i < n; ++i) positives += labels[i * d + j];
        if (positives == 0.0) {
            out.dropped.push_back(j);
        } else {
            out.weights.lambda[j] =
                (static_cast<double>(n) - positives) / positives;
            out.kept.push_back(j);
        }
    }
    return out;
}

double weighted_bce(const Tensor& scores, const std::vector<double>& targets,
                    const ClassWeights& weights,
                    const std::vector<std::size_t>* subset) {
    if (scores.rank() != 1) throw ShapeError("scores must be rank-1");
    const std::size_t d = scores.size();
    if (targets.size() != d) throw ShapeError("target count must match scores");
    if (weights.lambda.size() != d)
        throw ShapeError("weight count must match scores");
    auto term = [&](std::size_t j) {
        const double f = scores[j], y = targets[j];
        return weights.lambda[j] *
               (std::max(f, 0.0) - y * f + std::log1p(std::exp(-std::fabs(f))));
    };
    double loss = 0.0;
    if (subset) {
        for (std::size_t j : *subset) {
            if (j >= d) throw ConfigError("subset index out of range");
            loss += term(j);
        }
    } else {
        for (std::size_t j = 0; j < d; ++j) loss += term(j);
    }
    return loss;
}

PartialLoss attach_partial_loss(Tape& tape, const EvidencePartition& evidence,
                                const ClassWeights* weights) {
    const int logits = tape.logits_node();
    if (logits < 0) throw ConfigError("tape has no output registered");
    const std::size_t d = tape.value(logits).size();
    evidence.validate(d);
    if (evidence.known.empty()) return {true, -1};

    std::vector<std::size_t> subset;
    std::vector<double> targets, lam;
    subset.reserve(evidence.known.size());
    for (const auto& [idx, value] : evidence.known) {
        subset.push_back(idx);
        targets.push_back(value);
        if (weights) {
            if (weights->lambda.size() != d)
                throw ShapeError("class weight count must match outputs");
            lam.push_back(weights->lambda[idx]);
        } else {
            lam.push_back(1.0);
        }
    }
    const int node = tape.add_bce_logits(logits, std::move(subset),
                                         std::move(targets), std::move(lam));
    return {false, node};
}

} // namespace fbprop
