#pragma once

#include <vector>

#include "fbprop/tensor.hpp"

namespace fbprop {

// Non-interpolated average precision: mean over positive items, in descending
// score order (ties keep original order), of precision at that rank.
// Throws ValueError when there is no positive label.
double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels);

// Per-label AP over an N x d score/label matrix pair, averaged over the given
// label subset. Labels in the subset with zero positives raise ValueError
// listing the offenders.
double mean_ap(const Tensor& scores, const Tensor& labels,
               const std::vector<std::size_t>& label_subset);

// Fraction of rows whose argmax (lowest index wins ties) equals the truth.
double multiclass_accuracy(const Tensor& scores,
                           const std::vector<std::size_t>& true_classes);

} // namespace fbprop
