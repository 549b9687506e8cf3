#include "fbprop/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace fbprop {

namespace {

double bce_logit_term(double f, double y) {
    // -[y log s(f) + (1-y) log(1-s(f))] in softplus form, safe for large |f|.
    return std::max(f, 0.0) - y * f + std::log1p(std::exp(-std::fabs(f)));
}

} // namespace

int Tape::push(TapeNode node) {
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_id(int id) const {
    if (id < 0 || id >= size()) throw ConfigError("tape node id out of range");
}

int Tape::add_input(Tensor value, const std::string& name) {
    TapeNode n;
    n.kind = OpKind::Input;
    n.value = std::move(value);
    int id = push(std::move(n));
    register_pivot(name, id);
    return id;
}

int Tape::add_parameter(Tensor value) {
    TapeNode n;
    n.kind = OpKind::Parameter;
    n.value = std::move(value);
    return push(std::move(n));
}

int Tape::add_conv2d(int x, int kernels, int bias, std::size_t stride,
                     std::size_t pad) {
    check_id(x);
    check_id(kernels);
    check_id(bias);
    TapeNode n;
    n.kind = OpKind::Conv2d;
    n.parents = {x, kernels, bias};
    n.stride = stride;
    n.pad = pad;
    n.value = compute_value(n);
    return push(std::move(n));
}

int Tape::add_dense(int x, int weights, int bias) {
    check_id(x);
    check_id(weights);
    check_id(bias);
    TapeNode n;
    n.kind = OpKind::Dense;
    n.parents = {x, weights, bias};
    n.value = compute_value(n);
    return push(std::move(n));
}

int Tape::add_relu(int x) {
    check_id(x);
    TapeNode n;
    n.kind = OpKind::Relu;
    n.parents = {x};
    n.value = compute_value(n);
    return push(std::move(n));
}

int Tape::add_sigmoid(int x) {
    check_id(x);
    TapeNode n;
    n.kind = OpKind::Sigmoid;
    n.parents = {x};
    n.value = compute_value(n);
    return push(std::move(n));
}

int Tape::add_maxpool(int x, std::size_t window, std::size_t stride) {
    check_id(x);
    TapeNode n;
    n.kind = OpKind::MaxPool;
    n.parents = {x};
    n.window = window;
    n.stride = stride;
    n.value = compute_value(n);
    return push(std::move(n));
}

int Tape::add_flatten(int x) {
    check_id(x);
    TapeNode n;
    n.kind = OpKind::Flatten;
    n.parents = {x};
    n.value = compute_value(n);
    return push(std::move(n));
}

int Tape::add_reduce(int x, Reduction kind) {
    check_id(x);
    TapeNode n;
    n.kind = (kind == Reduction::Sum) ? OpKind::Sum : OpKind::Mean;
    n.parents = {x};
    n.value = compute_value(n);
    return push(std::move(n));
}

int Tape::add_bce_logits(int scores, std::vector<std::size_t> subset,
                         std::vector<double> targets,
                         std::vector<double> weights) {
    check_id(scores);
    const Tensor& f = value(scores);
    if (f.rank() != 1) throw ShapeError("bce expects a rank-1 score vector");
    if (subset.size() != targets.size() || subset.size() != weights.size())
        throw ShapeError("bce subset/target/weight sizes differ");
    for (std::size_t j : subset) {
        if (j >= f.size())
            throw ConfigError("known index " + std::to_string(j) +
                              " out of output range " + std::to_string(f.size()));
    }
    TapeNode n;
    n.kind = OpKind::BceLogits;
    n.parents = {scores};
    n.subset = std::move(subset);
    n.targets = std::move(targets);
    n.weights = std::move(weights);
    n.value = compute_value(n);
    return push(std::move(n));
}

void Tape::register_pivot(const std::string& name, int node) {
    check_id(node);
    pivots_[name] = node;
}

bool Tape::has_pivot(const std::string& name) const {
    return pivots_.count(name) != 0;
}

int Tape::pivot(const std::string& name) const {
    auto it = pivots_.find(name);
    if (it == pivots_.end()) throw ConfigError("unknown layer '" + name + "'");
    return it->second;
}

void Tape::set_output(int output_node, int logits_node) {
    check_id(output_node);
    check_id(logits_node);
    output_node_ = output_node;
    logits_node_ = logits_node;
}

Tensor Tape::compute_value(TapeNode& n) const {
    switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
        throw ConfigError("cannot recompute a leaf node");
    case OpKind::Conv2d: {
        Tensor out = conv2d(value(n.parents[0]), value(n.parents[1]), n.stride,
                            n.pad);
        const Tensor& bias = value(n.parents[2]);
        if (bias.rank() != 1 || bias.size() != out.shape()[0])
            throw ShapeError("conv bias must have one entry per output channel");
        const std::size_t plane = out.shape()[1] * out.shape()[2];
        for (std::size_t c = 0; c < out.shape()[0]; ++c)
            for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += bias[c];
        return out;
    }
    case OpKind::Dense: {
        const Tensor& x = value(n.parents[0]);
        const Tensor& w = value(n.parents[1]);
        const Tensor& b = value(n.parents[2]);
        if (x.rank() != 1) throw ShapeError("dense input must be rank-1");
        if (w.rank() != 2 || w.shape()[1] != x.size())
            throw ShapeError("dense weight shape does not match input size " +
                             std::to_string(x.size()));
        const std::size_t m = w.shape()[0], k = w.shape()[1];
        if (b.rank() != 1 || b.size() != m)
            throw ShapeError("dense bias must have one entry per unit");
        Tensor out = Tensor::zeros({m});
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += w[i * k + j] * x[j];
            out[i] = acc + b[i];
        }
        return out;
    }
    case OpKind::Relu:
        return activation(value(n.parents[0]), Activation::Relu);
    case OpKind::Sigmoid:
        return activation(value(n.parents[0]), Activation::Sigmoid);
    case OpKind::MaxPool: {
        const Tensor& x = value(n.parents[0]);
        if (x.rank() != 3) throw ShapeError("maxpool input must be [C,H,W]");
        const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
        const std::size_t oh = conv_out_extent(h, n.window, n.stride, 0);
        const std::size_t ow = conv_out_extent(w, n.window, n.stride, 0);
        Tensor out = Tensor::zeros({c, oh, ow});
        n.argmax.assign(out.size(), 0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double best = -1e300;
                    std::size_t best_idx = 0;
                    for (std::size_t ky = 0; ky < n.window; ++ky) {
                        for (std::size_t kx = 0; kx < n.window; ++kx) {
                            std::size_t iy = oy * n.stride + ky;
                            std::size_t ix = ox * n.stride + kx;
                            std::size_t idx = (ch * h + iy) * w + ix;
                            if (x[idx] > best) { // ties keep first in scan order
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    std::size_t o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    n.argmax[o] = best_idx;
                }
            }
        }
        return out;
    }
    case OpKind::Flatten: {
        const Tensor& x = value(n.parents[0]);
        return Tensor({x.size()}, x.data());
    }
    case OpKind::Sum:
        return reduce(value(n.parents[0]), Reduction::Sum);
    case OpKind::Mean:
        return reduce(value(n.parents[0]), Reduction::Mean);
    case OpKind::BceLogits: {
        const Tensor& f = value(n.parents[0]);
        double loss = 0.0;
        for (std::size_t k = 0; k < n.subset.size(); ++k)
            loss += n.weights[k] * bce_logit_term(f[n.subset[k]], n.targets[k]);
        return Tensor::scalar(loss);
    }
    }
    throw ConfigError("unknown op kind");
}

void Tape::recompute_from(int start, const Tensor& activation,
                          const std::vector<NodeResidual>& residuals) {
    check_id(start);
    TapeNode& s = nodes_[static_cast<std::size_t>(start)];
    if (!s.value.same_shape(activation))
        throw ShapeError("activation shape " + shape_to_string(activation.shape()) +
                         " does not match stored shape " +
                         shape_to_string(s.value.shape()));
    std::vector<const Tensor*> res_at(nodes_.size(), nullptr);
    for (const NodeResidual& r : residuals) {
        check_id(r.node);
        if (r.node < start)
            throw ConfigError("residual attached upstream of the start layer");
        const Tensor& stored = nodes_[static_cast<std::size_t>(r.node)].value;
        if (!stored.same_shape(*r.value))
            throw ShapeError("residual shape does not match layer activation");
        res_at[static_cast<std::size_t>(r.node)] = r.value;
    }

    std::vector<char> dirty(nodes_.size(), 0);
    s.value = activation;
    if (res_at[static_cast<std::size_t>(start)])
        s.value = add(s.value, *res_at[static_cast<std::size_t>(start)]);
    dirty[static_cast<std::size_t>(start)] = 1;

    for (int id = start + 1; id < size(); ++id) {
        TapeNode& n = nodes_[static_cast<std::size_t>(id)];
        bool touched = res_at[static_cast<std::size_t>(id)] != nullptr;
        if (!touched) {
            for (int p : n.parents) {
                if (dirty[static_cast<std::size_t>(p)]) {
                    touched = true;
                    break;
                }
            }
        }
        if (!touched) continue;
        n.value = compute_value(n);
        if (res_at[static_cast<std::size_t>(id)])
            n.value = add(n.value, *res_at[static_cast<std::size_t>(id)]);
        dirty[static_cast<std::size_t>(id)] = 1;
    }
}

std::vector<Tensor> Tape::backward_to(int loss, const std::vector<int>& targets) {
    check_id(loss);
    if (value(loss).size() != 1)
        throw ConfigError("loss node must be scalar");
    if (targets.empty()) throw ConfigError("backward_to needs at least one target");
    std::vector<char> is_target(nodes_.size(), 0);
    int earliest = loss;
    for (int t : targets) {
        check_id(t);
        is_target[static_cast<std::size_t>(t)] = 1;
        earliest = std::min(earliest, t);
    }

    // needs[i]: gradient at node i is a target or flows on toward one.
    std::vector<char> needs(nodes_.size(), 0);
    for (int id = 0; id < size(); ++id) {
        if (is_target[static_cast<std::size_t>(id)]) {
            needs[static_cast<std::size_t>(id)] = 1;
            continue;
        }
        for (int p : nodes_[static_cast<std::size_t>(id)].parents) {
            if (needs[static_cast<std::size_t>(p)]) {
                needs[static_cast<std::size_t>(id)] = 1;
                break;
            }
        }
    }

    for (TapeNode& n : nodes_) n.has_grad = false;
    TapeNode& root = nodes_[static_cast<std::size_t>(loss)];
    root.grad = Tensor::scalar(1.0);
    root.has_grad = true;

    auto grad_of = [this](int id) -> Tensor& {
        TapeNode& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.has_grad) {
            n.grad = Tensor::zeros(n.value.shape());
            n.has_grad = true;
        }
        return n.grad;
    };
    auto wants = [&](int id) { return needs[static_cast<std::size_t>(id)] != 0; };

    for (int id = loss; id >= earliest; --id) {
        TapeNode& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.has_grad) continue;
        const Tensor& g = n.grad;
        switch (n.kind) {
        case OpKind::Input:
        case OpKind::Parameter:
            break;
        case OpKind::Conv2d: {
            const int xid = n.parents[0], kid = n.parents[1], bid = n.parents[2];
            const bool wx = wants(xid), wk = wants(kid), wb = wants(bid);
            if (!(wx || wk || wb)) break;
            const Tensor& x = value(xid);
            const Tensor& ker = value(kid);
            const std::size_t ci = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
            const std::size_t co = ker.shape()[0], kh = ker.shape()[2],
                              kw = ker.shape()[3];
            const std::size_t oh = n.value.shape()[1], ow = n.value.shape()[2];
            Tensor* gx = wx ? &grad_of(xid) : nullptr;
            Tensor* gk = wk ? &grad_of(kid) : nullptr;
            Tensor* gb = wb ? &grad_of(bid) : nullptr;
            for (std::size_t oc = 0; oc < co; ++oc) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const double gv = g[(oc * oh + oy) * ow + ox];
                        if (gb) (*gb)[oc] += gv;
                        if (!wx && !wk) continue;
                        for (std::size_t ic = 0; ic < ci; ++ic) {
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * n.stride + ky) -
                                    static_cast<std::ptrdiff_t>(n.pad);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h))
                                    continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * n.stride + kx) -
                                        static_cast<std::ptrdiff_t>(n.pad);
                                    if (ix < 0 ||
                                        ix >= static_cast<std::ptrdiff_t>(w))
                                        continue;
                                    const std::size_t xi = (ic * h + iy) * w + ix;
                                    const std::size_t ki =
                                        ((oc * ci + ic) * kh + ky) * kw + kx;
                                    if (gx) (*gx)[xi] += gv * ker[ki];
                                    if (gk) (*gk)[ki] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
            break;
        }
        case OpKind::Dense: {
            const int xid = n.parents[0], wid = n.parents[1], bid = n.parents[2];
            const Tensor& x = value(xid);
            const Tensor& wgt = value(wid);
            const std::size_t m = wgt.shape()[0], k = wgt.shape()[1];
            if (wants(xid)) {
                Tensor& gx = grad_of(xid);
                for (std::size_t i = 0; i < m; ++i) {
                    const double gv = g[i];
                    for (std::size_t j = 0; j < k; ++j) gx[j] += gv * wgt[i * k + j];
                }
            }
            if (wants(wid)) {
                Tensor& gw = grad_of(wid);
                for (std::size_t i = 0; i < m; ++i) {
                    const double gv = g[i];
                    for (std::size_t j = 0; j < k; ++j) gw[i * k + j] += gv * x[j];
                }
            }
            if (wants(bid)) {
                Tensor& gb = grad_of(bid);
                for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
            }
            break;
        }
        case OpKind::Relu: {
            if (!wants(n.parents[0])) break;
            Tensor& gx = grad_of(n.parents[0]);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (n.value[i] > 0.0) gx[i] += g[i];
            break;
        }
        case OpKind::Sigmoid: {
            if (!wants(n.parents[0])) break;
            Tensor& gx = grad_of(n.parents[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = n.value[i];
                gx[i] += g[i] * y * (1.0 - y);
            }
            break;
        }
        case OpKind::MaxPool: {
            if (!wants(n.parents[0])) break;
            Tensor& gx = grad_of(n.parents[0]);
            for (std::size_t i = 0; i < g.size(); ++i) gx[n.argmax[i]] += g[i];
            break;
        }
        case OpKind::Flatten: {
            if (!wants(n.parents[0])) break;
            Tensor& gx = grad_of(n.parents[0]);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            break;
        }
        case OpKind::Sum: {
            if (!wants(n.parents[0])) break;
            Tensor& gx = grad_of(n.parents[0]);
            for (double& v : gx.data()) v += g[0];
            break;
        }
        case OpKind::Mean: {
            if (!wants(n.parents[0])) break;
            Tensor& gx = grad_of(n.parents[0]);
            const double gv = g[0] / static_cast<double>(gx.size());
            for (double& v : gx.data()) v += gv;
            break;
        }
        case OpKind::BceLogits: {
            if (!wants(n.parents[0])) break;
            Tensor& gf = grad_of(n.parents[0]);
            const Tensor& f = value(n.parents[0]);
            for (std::size_t k = 0; k < n.subset.size(); ++k) {
                const std::size_t j = n.subset[k];
                gf[j] += g[0] * n.weights[k] * (sigmoid(f[j]) - n.targets[k]);
            }
            break;
        }
        }
    }

    std::vector<Tensor> out;
    out.reserve(targets.size());
    for (int t : targets) {
        const TapeNode& n = node(t);
        if (!n.has_grad)
            throw ConfigError("target node " + std::to_string(t) +
                              " is not an ancestor of the loss node");
        out.push_back(n.grad);
    }
    return out;
}

double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon) {
    if (epsilon <= 0.0) throw ConfigError("grad_check epsilon must be positive");
    const Tensor analytic = f.gradient(point);
    if (!analytic.same_shape(point))
        throw ShapeError("analytic gradient shape does not match the point");
    double max_err = 0.0;
    Tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + epsilon;
        const double up = f.value(probe);
        probe[i] = point[i] - epsilon;
        const double down = f.value(probe);
        probe[i] = point[i];
        const double central = (up - down) / (2.0 * epsilon);
        const double err = std::fabs(analytic[i] - central) /
                           std::max(1.0, std::fabs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace fbprop
