#include "fbprop/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace fbprop {

double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("score and label counts differ");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });
    double positives_seen = 0.0;
    double ap = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (labels[order[rank]]) {
            positives_seen += 1.0;
            ap += positives_seen / static_cast<double>(rank + 1);
        }
    }
    if (positives_seen == 0.0)
        throw ValueError("average precision undefined: no positive labels");
    return ap / positives_seen;
}

double mean_ap(const Tensor& scores, const Tensor& labels,
               const std::vector<std::size_t>& label_subset) {
    if (scores.rank() != 2 || labels.rank() != 2)
        throw ShapeError("scores and labels must be N x d matrices");
    if (scores.shape() != labels.shape())
        throw ShapeError("score and label matrices must have the same shape");
    if (label_subset.empty()) throw ConfigError("label subset is empty");
    const std::size_t n = scores.shape()[0], d = scores.shape()[1];

    double total = 0.0;
    std::string undefined;
    for (std::size_t j : label_subset) {
        if (j >= d) throw ConfigError("label index out of range");
        std::vector<double> col(n);
        std::vector<int> truth(n);
        bool any_positive = false;
        for (std::size_t i = 0; i < n; ++i) {
            col[i] = scores[i * d + j];
            truth[i] = labels[i * d + j] != 0.0 ? 1 : 0;
            any_positive = any_positive || truth[i];
        }
        if (!any_positive) {
            if (!undefined.empty()) undefined += ",";
            undefined += std::to_string(j);
            continue;
        }
        total += average_precision(col, truth);
    }
    if (!undefined.empty())
        throw ValueError("AP undefined for labels with no positives: " +
                         undefined);
    return total / static_cast<double>(label_subset.size());
}

double multiclass_accuracy(const Tensor& scores,
                           const std::vector<std::size_t>& true_classes) {
    if (scores.rank() != 2) throw ShapeError("scores must be an N x d matrix");
    const std::size_t n = scores.shape()[0], d = scores.shape()[1];
    if (true_classes.size() != n)
        throw ShapeError("one true class per sample required");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (true_classes[i] >= d)
            throw ConfigError("true class index out of range");
        std::size_t best = 0;
        for (std::size_t j = 1; j < d; ++j)
            if (scores[i * d + j] > scores[i * d + best]) best = j;
        if (best == true_classes[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

} // namespace fbprop
