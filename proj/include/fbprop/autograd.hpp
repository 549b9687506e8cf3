#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fbprop/tensor.hpp"

namespace fbprop {

enum class OpKind {
    Input,     // leaf: the sample
    Parameter, // leaf: model weights/bias
    Conv2d,    // parents [x, kernels, bias]
    Dense,     // parents [x, weights, bias]
    Relu,      // parents [x]
    Sigmoid,   // parents [x]
    MaxPool,   // parents [x]
    Flatten,   // parents [x]
    Sum,       // parents [x]
    Mean,      // parents [x]
    BceLogits  // parents [scores]; weighted binary cross entropy on a subset
};

struct TapeNode {
    OpKind kind{};
    std::vector<int> parents;
    Tensor value;
    Tensor grad;           // valid only when has_grad
    bool has_grad = false;

    // conv / pool attributes
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t window = 2;
    std::vector<std::size_t> argmax; // maxpool source index per output element

    // bce attributes, one entry per selected label
    std::vector<std::size_t> subset;
    std::vector<double> targets;
    std::vector<double> weights;
};

// A residual tensor attached to a node: whenever the node's value is
// (re)computed during recompute_from, the residual is added on top.
struct NodeResidual {
    int node;
    const Tensor* value;
};

// Recorded computation graph for one inference session. Rebuilt per sample;
// parents always precede children, so node ids are a topological order.
class Tape {
public:
    int add_input(Tensor value, const std::string& name);
    int add_parameter(Tensor value);
    int add_conv2d(int x, int kernels, int bias, std::size_t stride, std::size_t pad);
    int add_dense(int x, int weights, int bias);
    int add_relu(int x);
    int add_sigmoid(int x);
    int add_maxpool(int x, std::size_t window, std::size_t stride);
    int add_flatten(int x);
    int add_reduce(int x, Reduction kind);
    int add_bce_logits(int scores, std::vector<std::size_t> subset,
                       std::vector<double> targets, std::vector<double> weights);

    void register_pivot(const std::string& name, int node);
    bool has_pivot(const std::string& name) const;
    int pivot(const std::string& name) const; // ConfigError on unknown name

    int size() const { return static_cast<int>(nodes_.size()); }
    const TapeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const Tensor& value(int id) const { return node(id).value; }

    // Final output node (post head nonlinearity) and the raw-score node the
    // loss attaches to. Set by the model when it records the forward pass.
    void set_output(int output_node, int logits_node);
    int output_node() const { return output_node_; }
    int logits_node() const { return logits_node_; }

    // Truncated forward propagation: assigns `activation` to `start` and
    // recomputes exactly the nodes downstream of it. Nodes carrying a residual
    // are recomputed as value = f(parents) + r even when their parents are
    // clean, and must not sit upstream of `start`.
    void recompute_from(int start, const Tensor& activation,
                        const std::vector<NodeResidual>& residuals = {});

    // Reverse-mode accumulation from a scalar loss node down to the targets.
    // Traversal stops at the earliest target; parameter gradients are skipped
    // unless a parameter is itself a target. Returns one gradient per target.
    std::vector<Tensor> backward_to(int loss, const std::vector<int>& targets);

private:
    int push(TapeNode node);
    Tensor compute_value(TapeNode& n) const;
    void check_id(int id) const;

    std::vector<TapeNode> nodes_;
    std::unordered_map<std::string, int> pivots_;
    int output_node_ = -1;
    int logits_node_ = -1;
};

// Scalar function with an analytic gradient, for finite-difference checks.
struct ScalarFunction {
    std::function<double(const Tensor&)> value;
    std::function<Tensor(const Tensor&)> gradient;
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon);

} // namespace fbprop
