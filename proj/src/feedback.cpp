#include "fbprop/feedback.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <utility>

#include "fbprop/error.hpp"

namespace fbprop {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

double scalar_of(const Tape& tape, int node) { return tape.value(node).data()[0]; }

// Topological position of a pivot name; "input" sits before every layer.
int pivot_position(const Model& model, const std::string& name) {
    if (name == "input") return -1;
    int idx = model.layer_index(name);
    if (idx < 0)
        throw ConfigError("unknown pivot layer '" + name + "'");
    return idx;
}

void check_rates(const FeedbackConfig& config) {
    if (!(config.rate > 0.0))
        throw ConfigError("feedback: update rate must be positive");
    for (const auto& [name, rate] : config.rate_overrides)
        if (!(rate > 0.0))
            throw ConfigError("feedback: rate override for '" + name +
                              "' must be positive");
}

void validate_pivot_order(const Model& model,
                          const std::vector<std::string>& pivots) {
    if (pivots.empty())
        throw ConfigError("feedback requires at least one pivot");
    int prev = -2;
    const std::string* prev_name = nullptr;
    for (const auto& p : pivots) {
        int pos = pivot_position(model, p);
        if (prev_name != nullptr && pos == prev)
            throw ConfigError("duplicate pivot '" + p + "'");
        if (prev_name != nullptr && pos < prev)
            throw ConfigError("pivots out of order: '" + p + "' precedes '" +
                              *prev_name + "' in the model");
        prev = pos;
        prev_name = &p;
    }
}

// Resolves every pivot and rejects collisions (e.g. a conv layer and the relu
// that follows it both map to the relu output under post-nonlinearity).
std::vector<int> resolve_pivots(const Model& model, const Tape& tape,
                                const std::vector<std::string>& pivots,
                                ResidualPlacement placement) {
    std::vector<int> nodes;
    std::map<int, const std::string*> seen;
    nodes.reserve(pivots.size());
    for (const auto& p : pivots) {
        int node = resolve_pivot_node(model, tape, p, placement);
        auto [it, fresh] = seen.emplace(node, &p);
        if (!fresh)
            throw ConfigError("pivots '" + *it->second + "' and '" + p +
                              "' resolve to the same activation");
        if (node > tape.logits_node())
            throw ConfigError("pivot '" + p +
                              "' is downstream of the known-label loss");
        nodes.push_back(node);
    }
    return nodes;
}

void clip_gradient(Tensor& g, double clip_norm) {
    if (clip_norm <= 0.0)
        return;
    double sq = 0.0;
    for (double v : g.data())
        sq += v * v;
    double norm = std::sqrt(sq);
    if (norm > clip_norm) {
        double s = clip_norm / norm;
        for (double& v : g.data())
            v *= s;
    }
}

const ClassWeights* loss_weights(const Model& model,
                                 const FeedbackConfig& config,
                                 ClassWeights& storage) {
    if (!config.weighted_loss || !model.class_weights())
        return nullptr;
    storage.lambda = *model.class_weights();
    return &storage;
}

FeedbackResult finish(const Tape& tape, const EvidencePartition& evidence,
                      FeedbackTrace trace) {
    FeedbackResult r;
    r.outputs = tape.value(tape.output_node());
    r.unknown_scores.reserve(evidence.unknown.size());
    for (std::size_t j : evidence.unknown)
        r.unknown_scores.push_back(r.outputs.data()[j]);
    r.trace = std::move(trace);
    return r;
}

// One pivot refined for `iters` steps: loss at the top of each iteration,
// gradient w.r.t. the pivot activation, optimizer step, truncated re-forward.
void run_pivot_loop(Tape& tape, int loss, int node, const FeedbackConfig& config,
                    double rate, FeedbackTrace& trace) {
    UpdateState state;
    for (std::size_t t = 0; t < config.iterations; ++t) {
        auto tick = Clock::now();
        trace.losses.push_back(scalar_of(tape, loss));
        Tensor g = std::move(tape.backward_to(loss, {node})[0]);
        clip_gradient(g, config.clip_norm);
        Tensor next = update_step(config, tape.value(node), g, rate, state);
        tape.recompute_from(node, next);
        trace.iter_wall_ms.push_back(elapsed_ms(tick));
    }
}

} // namespace

double FeedbackConfig::rate_for(const std::string& pivot) const {
    auto it = rate_overrides.find(pivot);
    return it == rate_overrides.end() ? rate : it->second;
}

UpdateRule update_rule_from_name(const std::string& name) {
    if (name == "sgd")
        return UpdateRule::Sgd;
    if (name == "momentum")
        return UpdateRule::Momentum;
    if (name == "adam")
        return UpdateRule::Adam;
    throw ConfigError("unknown update rule '" + name +
                      "' (expected sgd, momentum, or adam)");
}

std::string update_rule_name(UpdateRule rule) {
    switch (rule) {
    case UpdateRule::Sgd: return "sgd";
    case UpdateRule::Momentum: return "momentum";
    case UpdateRule::Adam: return "adam";
    }
    throw ConfigError("unknown update rule");
}

Tensor update_step(const FeedbackConfig& config, const Tensor& value,
                   const Tensor& gradient, double rate, UpdateState& state) {
    if (value.shape() != gradient.shape())
        throw ShapeError("update_step: value/gradient shape mismatch");
    Tensor out = value;
    auto& o = out.data();
    const auto& g = gradient.data();

    switch (config.rule) {
    case UpdateRule::Sgd:
        for (std::size_t i = 0; i < o.size(); ++i)
            o[i] -= rate * g[i];
        return out;

    case UpdateRule::Momentum: {
        if (state.momentum.size() != value.size())
            state.momentum = Tensor::zeros(value.shape());
        auto& m = state.momentum.data();
        for (std::size_t i = 0; i < o.size(); ++i) {
            m[i] = config.momentum_beta * m[i] + g[i];
            o[i] -= rate * m[i];
        }
        return out;
    }

    case UpdateRule::Adam: {
        if (state.momentum.size() != value.size()) {
            state.momentum = Tensor::zeros(value.shape());
            state.second_moment = Tensor::zeros(value.shape());
            state.step = 0;
        }
        state.step += 1;
        auto& m = state.momentum.data();
        auto& s = state.second_moment.data();
        const double b1 = config.adam_beta1;
        const double b2 = config.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
        for (std::size_t i = 0; i < o.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            s[i] = b2 * s[i] + (1.0 - b2) * g[i] * g[i];
            double mhat = m[i] / c1;
            double shat = s[i] / c2;
            o[i] -= rate * mhat / (std::sqrt(shat) + config.adam_eps);
        }
        return out;
    }
    }
    throw ConfigError("unknown update rule");
}

int resolve_pivot_node(const Model& model, const Tape& tape,
                       const std::string& name, ResidualPlacement placement) {
    if (name == "input")
        return tape.pivot("input");
    int idx = model.layer_index(name);
    if (idx < 0)
        throw ConfigError("unknown pivot layer '" + name + "'");
    const auto& layers = model.layers();
    auto i = static_cast<std::size_t>(idx);
    if (placement == ResidualPlacement::PostNonlinearity) {
        // The layer transformation absorbs an immediately following relu.
        if (i + 1 < layers.size() && layers[i + 1].kind == LayerKind::Relu)
            return tape.pivot(layers[i + 1].name);
        return tape.pivot(name);
    }
    // Pre-nonlinearity: naming a relu means its raw (pre-activation) input.
    if (layers[i].kind == LayerKind::Relu)
        return tape.node(tape.pivot(name)).parents[0];
    return tape.pivot(name);
}

ResidualSet ResidualSet::zeros(const Model& model, const Tape& tape,
                               const std::vector<std::string>& pivots,
                               ResidualPlacement placement) {
    validate_pivot_order(model, pivots);
    std::vector<int> nodes = resolve_pivots(model, tape, pivots, placement);
    ResidualSet set;
    set.entries.reserve(pivots.size());
    for (std::size_t i = 0; i < pivots.size(); ++i) {
        ResidualEntry e;
        e.layer = pivots[i];
        e.node = nodes[i];
        e.value = Tensor::zeros(tape.value(nodes[i]).shape());
        set.entries.push_back(std::move(e));
    }
    return set;
}

FeedbackResult plain_forward(const Model& model, const Tensor& input,
                             const EvidencePartition& evidence) {
    evidence.validate(model.output_dim());
    Tape tape = model.forward_full(input);
    return finish(tape, evidence, FeedbackTrace{});
}

FeedbackResult single_layer_feedback(const Model& model, const Tensor& input,
                                     const EvidencePartition& evidence,
                                     const std::string& layer,
                                     const FeedbackConfig& config) {
    check_rates(config);
    evidence.validate(model.output_dim());
    validate_pivot_order(model, {layer});
    Tape tape = model.forward_full(input);

    ClassWeights storage;
    PartialLoss loss =
        attach_partial_loss(tape, evidence, loss_weights(model, config, storage));
    FeedbackTrace trace;
    if (loss.degenerate) {
        trace.degenerate = true;
        return finish(tape, evidence, std::move(trace));
    }

    int node = resolve_pivots(model, tape, {layer}, config.placement)[0];
    run_pivot_loop(tape, loss.node, node, config, config.rate_for(layer), trace);
    return finish(tape, evidence, std::move(trace));
}

FeedbackResult layer_wise_feedback(const Model& model, const Tensor& input,
                                   const EvidencePartition& evidence,
                                   const FeedbackConfig& config) {
    check_rates(config);
    evidence.validate(model.output_dim());
    validate_pivot_order(model, config.pivots);
    Tape tape = model.forward_full(input);

    ClassWeights storage;
    PartialLoss loss =
        attach_partial_loss(tape, evidence, loss_weights(model, config, storage));
    FeedbackTrace trace;
    if (loss.degenerate) {
        trace.degenerate = true;
        return finish(tape, evidence, std::move(trace));
    }

    std::vector<int> nodes =
        resolve_pivots(model, tape, config.pivots, config.placement);
    // Front-to-back: each pivot is optimized with a fresh optimizer state,
    // then frozen; the tape already reflects it when the next pivot starts.
    for (std::size_t i = 0; i < nodes.size(); ++i)
        run_pivot_loop(tape, loss.node, nodes[i], config,
                       config.rate_for(config.pivots[i]), trace);
    return finish(tape, evidence, std::move(trace));
}

FeedbackResult residual_feedback(const Model& model, const Tensor& input,
                                 const EvidencePartition& evidence,
                                 const FeedbackConfig& config) {
    check_rates(config);
    evidence.validate(model.output_dim());
    Tape tape = model.forward_full(input);

    ClassWeights storage;
    PartialLoss loss =
        attach_partial_loss(tape, evidence, loss_weights(model, config, storage));
    FeedbackTrace trace;
    if (loss.degenerate) {
        trace.degenerate = true;
        return finish(tape, evidence, std::move(trace));
    }

    ResidualSet set = ResidualSet::zeros(model, tape, config.pivots, config.placement);
    std::vector<NodeResidual> residuals;
    std::vector<int> targets;
    residuals.reserve(set.entries.size());
    targets.reserve(set.entries.size());
    for (auto& e : set.entries) {
        residuals.push_back({e.node, &e.value});
        targets.push_back(e.node);
    }

    // Re-forward from just above the earliest injection point; everything
    // upstream of it never changes.
    int first = set.entries.front().node;
    int start = tape.node(first).kind == OpKind::Input
                    ? first
                    : tape.node(first).parents[0];
    Tensor start_value = tape.value(start);

    for (std::size_t t = 0; t < config.iterations; ++t) {
        auto tick = Clock::now();
        tape.recompute_from(start, start_value, residuals);
        trace.losses.push_back(scalar_of(tape, loss.node));
        std::vector<Tensor> grads = tape.backward_to(loss.node, targets);
        for (std::size_t i = 0; i < set.entries.size(); ++i) {
            auto& e = set.entries[i];
            clip_gradient(grads[i], config.clip_norm);
            e.value = update_step(config, e.value, grads[i],
                                  config.rate_for(e.layer), e.state);
        }
        trace.iter_wall_ms.push_back(elapsed_ms(tick));
    }
    // Realize the last update; with zero iterations the tape is untouched and
    // the result is exactly the plain forward pass.
    if (config.iterations > 0)
        tape.recompute_from(start, start_value, residuals);
    return finish(tape, evidence, std::move(trace));
}

} // namespace fbprop
