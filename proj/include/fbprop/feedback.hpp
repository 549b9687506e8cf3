#pragma once

#include <map>
#include <string>
#include <vector>

#include "fbprop/loss.hpp"
#include "fbprop/model.hpp"

namespace fbprop {

enum class UpdateRule { Sgd, Momentum, Adam };

UpdateRule update_rule_from_name(const std::string& name);
std::string update_rule_name(UpdateRule rule);

// Where feedback attaches relative to a layer's nonlinearity. Post treats the
// layer transformation as ending after its following relu; pre stops at the
// raw (pre-relu) activation.
enum class ResidualPlacement { PostNonlinearity, PreNonlinearity };

struct FeedbackConfig {
    std::vector<std::string> pivots; // topologically ordered layer names
    double rate = 1e-3;
    std::size_t iterations = 20;
    UpdateRule rule = UpdateRule::Sgd;
    double momentum_beta = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    ResidualPlacement placement = ResidualPlacement::PostNonlinearity;
    bool weighted_loss = true; // reuse training lambda_j in the partial loss
    double clip_norm = 0.0;    // 0 disables gradient clipping
    std::map<std::string, double> rate_overrides; // per-pivot-layer rate

    double rate_for(const std::string& pivot) const;
};

// Optimizer state for one updated variable; buffers grow lazily to the
// gradient's shape.
struct UpdateState {
    Tensor momentum;
    Tensor second_moment;
    std::size_t step = 0;
};

// One optimizer step. sgd: v - rate*g; momentum: heavy ball; adam:
// bias-corrected first/second moments.
Tensor update_step(const FeedbackConfig& config, const Tensor& value,
                   const Tensor& gradient, double rate, UpdateState& state);

// Additive feedback residuals, one per pivot layer, zero-initialized.
struct ResidualEntry {
    std::string layer;
    int node = -1; // injection node on the session tape
    Tensor value;
    UpdateState state;
};

struct ResidualSet {
    std::vector<ResidualEntry> entries;

    static ResidualSet zeros(const Model& model, const Tape& tape,
                             const std::vector<std::string>& pivots,
                             ResidualPlacement placement);
};

struct FeedbackTrace {
    // Partial-loss value at each iteration, before that iteration's update.
    // Layer-wise runs concatenate per-pivot sequences in pivot order.
    std::vector<double> losses;
    std::vector<double> iter_wall_ms;
    bool degenerate = false; // empty evidence: plain forward was returned
};

struct FeedbackResult {
    Tensor outputs;                     // final full output vector
    std::vector<double> unknown_scores; // outputs at the unknown indices
    FeedbackTrace trace;
};

// Maps a pivot name to the tape node it optimizes under the given placement.
// "input" names the input node.
int resolve_pivot_node(const Model& model, const Tape& tape,
                       const std::string& name, ResidualPlacement placement);

// Baseline: one forward pass, no feedback.
FeedbackResult plain_forward(const Model& model, const Tensor& input,
                             const EvidencePartition& evidence);

// Iteratively refine one pivot activation against the known-label loss, then
// re-forward to score the unknown labels.
FeedbackResult single_layer_feedback(const Model& model, const Tensor& input,
                                     const EvidencePartition& evidence,
                                     const std::string& layer,
                                     const FeedbackConfig& config);

// Optimize each pivot in topological order, freezing it before moving on.
FeedbackResult layer_wise_feedback(const Model& model, const Tensor& input,
                                   const EvidencePartition& evidence,
                                   const FeedbackConfig& config);

// Inject zero-initialized residuals at every pivot and optimize them jointly,
// one truncated forward and one truncated backward per iteration.
FeedbackResult residual_feedback(const Model& model, const Tensor& input,
                                 const EvidencePartition& evidence,
                                 const FeedbackConfig& config);

} // namespace fbprop
