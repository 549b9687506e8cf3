#pragma once

#include <map>
#include <optional>
#include <vector>

#include "fbprop/autograd.hpp"
#include "fbprop/tensor.hpp"

namespace fbprop {

// Split of the output variables into labels whose true value is available at
// inference time and labels to predict. Known may be empty (degenerate case).
struct EvidencePartition {
    std::map<std::size_t, double> known; // label index -> true value in {0,1}
    std::vector<std::size_t> unknown;

    void validate(std::size_t output_dim) const;
};

// Per-label positive weights correcting class imbalance.
struct ClassWeights {
    std::vector<double> lambda;
};

// lambda_j = sum_i (1 - y_ij) / sum_i y_ij over an N x d binary label matrix.
// Labels with zero positives make the formula undefined; throws ValueError
// listing the offending indices.
ClassWeights class_weights(const Tensor& labels);

struct ClassWeightsWithDrop {
    ClassWeights weights;             // dropped entries hold 1.0, never used
    std::vector<std::size_t> kept;    // label indices with >= 1 positive
    std::vector<std::size_t> dropped; // zero-positive labels, excluded
};

// Permissive variant: drops undefined labels instead of throwing.
ClassWeightsWithDrop class_weights_with_drop(const Tensor& labels);

// Weighted binary cross entropy over raw scores (softplus form, never NaN
// for finite scores). subset == nullptr sums over all labels.
double weighted_bce(const Tensor& scores, const std::vector<double>& targets,
                    const ClassWeights& weights,
                    const std::vector<std::size_t>* subset = nullptr);

struct PartialLoss {
    bool degenerate = false; // empty known set: skip the feedback loop
    int node = -1;           // loss node id when not degenerate
};

// Attaches the known-label loss to the tape's raw-score node so backward_to
// can reach interior pivots. `weights` nullptr means unweighted (all ones).
PartialLoss attach_partial_loss(Tape& tape, const EvidencePartition& evidence,
                                const ClassWeights* weights);

} // namespace fbprop
