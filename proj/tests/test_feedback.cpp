#include "doctest.h"

#include <cmath>
#include <random>

#include "fbprop/error.hpp"
#include "fbprop/feedback.hpp"
#include "fbprop/loss.hpp"
#include "fbprop/model.hpp"

using namespace fbprop;

namespace {

Model tiny_model(std::uint64_t seed) {
    std::vector<LayerSpec> layers(6);
    layers[0].name = "conv1";
    layers[0].kind = LayerKind::Conv2d;
    layers[0].out_channels = 2;
    layers[0].kernel = 3;
    layers[0].pad = 1;
    layers[1].name = "r1";
    layers[1].kind = LayerKind::Relu;
    layers[2].name = "p1";
    layers[2].kind = LayerKind::MaxPool;
    layers[2].window = 2;
    layers[3].name = "flat";
    layers[3].kind = LayerKind::Flatten;
    layers[4].name = "fc";
    layers[4].kind = LayerKind::Dense;
    layers[4].units = 4;
    layers[5].name = "out";
    layers[5].kind = LayerKind::SigmoidHead;
    return build_model(layers, {1, 6, 6}, {}, seed);
}

Tensor random_input(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Tensor t = Tensor::zeros({1, 6, 6});
    for (double& v : t.data()) v = dist(rng);
    return t;
}

EvidencePartition half_known() {
    EvidencePartition e;
    e.known = {{0, 1.0}, {1, 0.0}};
    e.unknown = {2, 3};
    return e;
}

// Two logits driven by the same input coordinate: whatever feedback does to
// satisfy label 0 is mirrored at label 1.
Model twin_model() {
    LayerSpec fc;
    fc.name = "fc";
    fc.kind = LayerKind::Dense;
    fc.units = 2;
    LayerSpec out;
    out.name = "out";
    out.kind = LayerKind::SigmoidHead;
    Model m = build_model({fc, out}, {2}, {}, 1);
    m.set_parameter("fc.w", Tensor({2, 2}, {1.0, 0.0, 1.0, 0.0}));
    m.set_parameter("fc.b", Tensor({2}, {0.0, 0.0}));
    return m;
}

} // namespace

TEST_CASE("update rules follow their definitions") {
    FeedbackConfig sgd;
    sgd.rule = UpdateRule::Sgd;
    UpdateState state;
    Tensor v({1}, {1.0});
    Tensor g({1}, {0.5});
    CHECK(update_step(sgd, v, g, 0.1, state)[0] == 0.95);

    FeedbackConfig adam;
    adam.rule = UpdateRule::Adam;
    UpdateState astate;
    Tensor a1 = update_step(adam, v, g, 0.1, astate);
    CHECK(std::fabs(a1[0] - 0.9000) < 1e-4);
    CHECK(astate.step == 1);

    FeedbackConfig mom;
    mom.rule = UpdateRule::Momentum;
    UpdateState mstate;
    Tensor ones({1}, {1.0});
    Tensor m1 = update_step(mom, v, ones, 0.1, mstate);
    CHECK(m1[0] == doctest::Approx(0.9).epsilon(1e-12));
    Tensor m2 = update_step(mom, m1, ones, 0.1, mstate);
    CHECK(m2[0] == doctest::Approx(0.71).epsilon(1e-12));

    // Zero gradient leaves the value untouched under every rule.
    Tensor z = Tensor::zeros({3});
    Tensor val({3}, {0.2, -0.7, 1.4});
    for (UpdateRule rule : {UpdateRule::Sgd, UpdateRule::Momentum, UpdateRule::Adam}) {
        FeedbackConfig c;
        c.rule = rule;
        UpdateState s;
        CHECK(update_step(c, val, z, 0.5, s).equals(val));
        CHECK(update_step(c, val, z, 0.5, s).equals(val));
    }

    CHECK_THROWS_AS(update_step(sgd, val, Tensor::zeros({2}), 0.1, state),
                    ShapeError);

    // Adam with persistent state matches a hand-rolled reference loop.
    FeedbackConfig cfg;
    cfg.rule = UpdateRule::Adam;
    UpdateState live;
    Tensor x({1}, {1.0});
    double xr = 1.0, m = 0.0, s2 = 0.0;
    std::mt19937_64 rng(71);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (int t = 1; t <= 5; ++t) {
        const double gv = dist(rng);
        x = update_step(cfg, x, Tensor({1}, {gv}), 0.1, live);
        m = 0.9 * m + (1.0 - 0.9) * gv;
        s2 = 0.999 * s2 + (1.0 - 0.999) * gv * gv;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double shat = s2 / (1.0 - std::pow(0.999, t));
        xr -= 0.1 * mhat / (std::sqrt(shat) + 1e-8);
        CHECK(x[0] == doctest::Approx(xr).epsilon(1e-14));
    }

    CHECK(update_rule_from_name("sgd") == UpdateRule::Sgd);
    CHECK(update_rule_from_name("momentum") == UpdateRule::Momentum);
    CHECK(update_rule_from_name("adam") == UpdateRule::Adam);
    for (UpdateRule rule : {UpdateRule::Sgd, UpdateRule::Momentum, UpdateRule::Adam})
        CHECK(update_rule_from_name(update_rule_name(rule)) == rule);
    CHECK_THROWS_AS(update_rule_from_name("adagrad"), ConfigError);

    FeedbackConfig rates;
    rates.rate = 0.01;
    rates.rate_overrides = {{"conv1", 0.5}};
    CHECK(rates.rate_for("conv1") == 0.5);
    CHECK(rates.rate_for("fc") == 0.01);
}

TEST_CASE("pivot resolution honors residual placement") {
    std::mt19937_64 rng(2);
    Model m = tiny_model(2);
    Tape tape = m.forward_full(random_input(rng));

    const int conv1 = tape.pivot("conv1");
    const int r1 = tape.pivot("r1");
    const int p1 = tape.pivot("p1");
    const int input = tape.pivot("input");

    // Post-nonlinearity: a layer followed by relu resolves to the relu output.
    CHECK(resolve_pivot_node(m, tape, "conv1", ResidualPlacement::PostNonlinearity) == r1);
    CHECK(resolve_pivot_node(m, tape, "r1", ResidualPlacement::PostNonlinearity) == r1);
    CHECK(resolve_pivot_node(m, tape, "p1", ResidualPlacement::PostNonlinearity) == p1);
    CHECK(resolve_pivot_node(m, tape, "input", ResidualPlacement::PostNonlinearity) == input);

    // Pre-nonlinearity: naming the relu moves to its raw input.
    CHECK(resolve_pivot_node(m, tape, "r1", ResidualPlacement::PreNonlinearity) == conv1);
    CHECK(resolve_pivot_node(m, tape, "conv1", ResidualPlacement::PreNonlinearity) == conv1);
    CHECK(resolve_pivot_node(m, tape, "input", ResidualPlacement::PreNonlinearity) == input);

    CHECK_THROWS_AS(
        resolve_pivot_node(m, tape, "ghost", ResidualPlacement::PostNonlinearity),
        ConfigError);

    // conv1 and r1 name the same activation under either placement: post maps
    // both to the relu output, pre maps both to the raw conv output.
    CHECK_THROWS_AS(ResidualSet::zeros(m, tape, {"conv1", "r1"},
                                       ResidualPlacement::PostNonlinearity),
                    ConfigError);
    CHECK_THROWS_AS(ResidualSet::zeros(m, tape, {"conv1", "r1"},
                                       ResidualPlacement::PreNonlinearity),
                    ConfigError);
    CHECK_NOTHROW(ResidualSet::zeros(m, tape, {"r1", "p1"},
                                     ResidualPlacement::PreNonlinearity));

    // The sigmoid head sits past the raw-score loss attachment.
    CHECK_THROWS_AS(ResidualSet::zeros(m, tape, {"out"},
                                       ResidualPlacement::PostNonlinearity),
                    ConfigError);

    ResidualSet set = ResidualSet::zeros(m, tape, {"conv1", "p1"},
                                         ResidualPlacement::PostNonlinearity);
    REQUIRE(set.entries.size() == 2);
    CHECK(set.entries[0].node == r1);
    CHECK(set.entries[1].node == p1);
    CHECK(set.entries[0].value.equals(Tensor::zeros(tape.value(r1).shape())));
    CHECK(set.entries[1].value.equals(Tensor::zeros(tape.value(p1).shape())));
}

TEST_CASE("zero iterations and empty evidence reproduce the plain forward") {
    std::mt19937_64 rng(3);
    Model m = tiny_model(3);
    Tensor x = random_input(rng);
    EvidencePartition e = half_known();
    FeedbackResult plain = plain_forward(m, x, e);
    CHECK(plain.unknown_scores.size() == 2);
    CHECK(plain.unknown_scores[0] == plain.outputs[2]);

    FeedbackConfig cfg;
    cfg.pivots = {"p1"};
    cfg.iterations = 0;
    cfg.rate = 0.1;

    FeedbackResult s = single_layer_feedback(m, x, e, "p1", cfg);
    FeedbackResult l = layer_wise_feedback(m, x, e, cfg);
    FeedbackResult r = residual_feedback(m, x, e, cfg);
    for (const FeedbackResult* res : {&s, &l, &r}) {
        CHECK(res->outputs.equals(plain.outputs));
        CHECK(res->trace.losses.empty());
        CHECK_FALSE(res->trace.degenerate);
    }

    EvidencePartition none;
    none.unknown = {0, 1, 2, 3};
    cfg.iterations = 5;
    FeedbackResult ds = single_layer_feedback(m, x, none, "p1", cfg);
    FeedbackResult dl = layer_wise_feedback(m, x, none, cfg);
    FeedbackResult dr = residual_feedback(m, x, none, cfg);
    for (const FeedbackResult* res : {&ds, &dl, &dr}) {
        CHECK(res->outputs.equals(plain_forward(m, x, none).outputs));
        CHECK(res->trace.degenerate);
        CHECK(res->trace.losses.empty());
        CHECK(res->unknown_scores.size() == 4);
    }
}

TEST_CASE("layer-wise with one pivot matches single-layer bitwise") {
    std::mt19937_64 rng(7);
    Model m = tiny_model(7);
    m.set_class_weights({1.5, 2.0, 0.5, 3.0});
    EvidencePartition e = half_known();

    for (UpdateRule rule : {UpdateRule::Sgd, UpdateRule::Momentum, UpdateRule::Adam}) {
        Tensor x = random_input(rng);
        FeedbackConfig cfg;
        cfg.pivots = {"p1"};
        cfg.iterations = 7;
        cfg.rate = 0.05;
        cfg.rule = rule;
        FeedbackResult one = single_layer_feedback(m, x, e, "p1", cfg);
        FeedbackResult lf = layer_wise_feedback(m, x, e, cfg);
        CHECK(lf.outputs.equals(one.outputs));
        CHECK(lf.unknown_scores == one.unknown_scores);
        CHECK(lf.trace.losses == one.trace.losses);
    }
}

TEST_CASE("single-pivot residual matches layer-wise under SGD") {
    std::mt19937_64 rng(8);
    Model m = tiny_model(8);
    EvidencePartition e = half_known();
    Tensor x = random_input(rng);

    // First iteration: the residual step equals the activation step exactly.
    FeedbackConfig cfg;
    cfg.pivots = {"p1"};
    cfg.iterations = 1;
    cfg.rate = 0.05;
    FeedbackResult lf1 = layer_wise_feedback(m, x, e, cfg);
    FeedbackResult rf1 = residual_feedback(m, x, e, cfg);
    REQUIRE(lf1.outputs.size() == rf1.outputs.size());
    for (std::size_t j = 0; j < lf1.outputs.size(); ++j)
        CHECK(std::fabs(lf1.outputs[j] - rf1.outputs[j]) < 1e-12);
    CHECK(lf1.trace.losses == rf1.trace.losses);

    // A residual on a fixed base tracks the activation trajectory for all T.
    cfg.iterations = 12;
    FeedbackResult lf = layer_wise_feedback(m, x, e, cfg);
    FeedbackResult rf = residual_feedback(m, x, e, cfg);
    for (std::size_t j = 0; j < lf.outputs.size(); ++j)
        CHECK(std::fabs(lf.outputs[j] - rf.outputs[j]) < 1e-10);
    REQUIRE(lf.trace.losses.size() == rf.trace.losses.size());
    for (std::size_t t = 0; t < lf.trace.losses.size(); ++t)
        CHECK(lf.trace.losses[t] ==
              doctest::Approx(rf.trace.losses[t]).epsilon(1e-10));
}

TEST_CASE("trace length is iterations per pivot") {
    std::mt19937_64 rng(9);
    Model m = tiny_model(9);
    EvidencePartition e = half_known();
    Tensor x = random_input(rng);

    FeedbackConfig cfg;
    cfg.pivots = {"conv1", "p1"};
    cfg.iterations = 6;
    cfg.rate = 0.01;

    FeedbackResult lf = layer_wise_feedback(m, x, e, cfg);
    CHECK(lf.trace.losses.size() == 12);
    CHECK(lf.trace.iter_wall_ms.size() == 12);

    FeedbackResult rf = residual_feedback(m, x, e, cfg);
    CHECK(rf.trace.losses.size() == 6);
    CHECK(rf.trace.iter_wall_ms.size() == 6);

    FeedbackResult one = single_layer_feedback(m, x, e, "p1", cfg);
    CHECK(one.trace.losses.size() == 6);

    // The first recorded loss is the plain partial loss, before any update.
    Tape tape = m.forward_full(x);
    PartialLoss pl = attach_partial_loss(tape, e, nullptr);
    const double initial = tape.value(pl.node)[0];
    CHECK(lf.trace.losses[0] == initial);
    CHECK(rf.trace.losses[0] == initial);
    CHECK(one.trace.losses[0] == initial);
    // The second pivot of LF starts from the first pivot's refined tape.
    CHECK(lf.trace.losses[6] < initial);
}

TEST_CASE("feedback descends on the known-label loss") {
    std::mt19937_64 rng(10);
    Model m = tiny_model(10);
    EvidencePartition e = half_known();

    int lf_down = 0, rf_down = 0, total = 0;
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_input(rng);
        FeedbackConfig cfg;
        cfg.pivots = {"flat"};
        cfg.iterations = 20;
        cfg.rate = 1e-2;
        FeedbackResult lf = layer_wise_feedback(m, x, e, cfg);
        FeedbackResult rf = residual_feedback(m, x, e, cfg);
        CHECK(lf.trace.losses.back() < lf.trace.losses.front());
        CHECK(rf.trace.losses.back() < rf.trace.losses.front());
        for (std::size_t t = 1; t < lf.trace.losses.size(); ++t) {
            lf_down += lf.trace.losses[t] <= lf.trace.losses[t - 1];
            rf_down += rf.trace.losses[t] <= rf.trace.losses[t - 1];
            ++total;
        }
    }
    // Small steps on the smooth tail segment descend essentially always.
    CHECK(lf_down >= total * 95 / 100);
    CHECK(rf_down >= total * 95 / 100);
}

TEST_CASE("model parameters are bitwise unchanged by feedback") {
    std::mt19937_64 rng(12);
    Model m = tiny_model(12);
    m.set_class_weights({1.0, 1.0, 1.0, 1.0});
    EvidencePartition e = half_known();
    Tensor x = random_input(rng);
    const std::uint64_t checksum = m.parameter_checksum();

    FeedbackConfig cfg;
    cfg.pivots = {"conv1", "p1"};
    cfg.iterations = 8;
    cfg.rate = 0.1;
    cfg.rule = UpdateRule::Adam;

    plain_forward(m, x, e);
    single_layer_feedback(m, x, e, "conv1", cfg);
    layer_wise_feedback(m, x, e, cfg);
    residual_feedback(m, x, e, cfg);
    CHECK(m.parameter_checksum() == checksum);
}

TEST_CASE("evidence lifts a correlated partner and ignores uncorrelated ones") {
    Model twin = twin_model();
    EvidencePartition e;
    e.known = {{0, 1.0}};
    e.unknown = {1};

    std::mt19937_64 rng(14);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    int raised = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x({2}, {dist(rng), dist(rng)});
        FeedbackConfig cfg;
        cfg.pivots = {"input"};
        cfg.iterations = 10;
        cfg.rate = 0.5;
        FeedbackResult before = plain_forward(twin, x, e);
        FeedbackResult after = residual_feedback(twin, x, e, cfg);
        if (after.unknown_scores[0] > before.unknown_scores[0]) ++raised;
    }
    CHECK(raised >= 90);

    // Knowing the label is absent pushes the partner down instead.
    EvidencePartition off;
    off.known = {{0, 0.0}};
    off.unknown = {1};
    Tensor x({2}, {0.8, -0.3});
    FeedbackConfig cfg;
    cfg.pivots = {"input"};
    cfg.iterations = 10;
    cfg.rate = 0.5;
    CHECK(residual_feedback(twin, x, off, cfg).unknown_scores[0] <
          plain_forward(twin, x, off).unknown_scores[0]);

    // Decoupled logits: feedback cannot move what shares no computation.
    Model split = twin_model();
    split.set_parameter("fc.w", Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
    FeedbackResult sp = single_layer_feedback(split, x, e, "input", cfg);
    CHECK(sp.unknown_scores[0] == plain_forward(split, x, e).unknown_scores[0]);
}

TEST_CASE("unknown labels do not influence the trajectory") {
    std::mt19937_64 rng(15);
    Model m = tiny_model(15);
    Tensor x = random_input(rng);

    EvidencePartition a;
    a.known = {{0, 1.0}};
    a.unknown = {1, 2, 3};
    EvidencePartition b;
    b.known = {{0, 1.0}};
    b.unknown = {3};

    FeedbackConfig cfg;
    cfg.pivots = {"p1"};
    cfg.iterations = 6;
    cfg.rate = 0.05;
    FeedbackResult ra = layer_wise_feedback(m, x, a, cfg);
    FeedbackResult rb = layer_wise_feedback(m, x, b, cfg);
    CHECK(ra.outputs.equals(rb.outputs));
    CHECK(ra.trace.losses == rb.trace.losses);
    CHECK(ra.unknown_scores.size() == 3);
    CHECK(rb.unknown_scores.size() == 1);
    CHECK(rb.unknown_scores[0] == ra.unknown_scores[2]);
}

TEST_CASE("per-pivot rate overrides are honored") {
    std::mt19937_64 rng(16);
    Model m = tiny_model(16);
    EvidencePartition e = half_known();
    Tensor x = random_input(rng);

    FeedbackConfig base;
    base.pivots = {"p1"};
    base.iterations = 5;
    base.rate = 0.02;

    FeedbackConfig overridden;
    overridden.pivots = {"p1"};
    overridden.iterations = 5;
    overridden.rate = 1e-9;
    overridden.rate_overrides = {{"p1", 0.02}};

    CHECK(layer_wise_feedback(m, x, e, overridden)
              .outputs.equals(layer_wise_feedback(m, x, e, base).outputs));
    CHECK(residual_feedback(m, x, e, overridden)
              .outputs.equals(residual_feedback(m, x, e, base).outputs));
}

TEST_CASE("gradient clipping caps the step size") {
    std::mt19937_64 rng(18);
    Model m = tiny_model(18);
    EvidencePartition e = half_known();
    Tensor x = random_input(rng);

    FeedbackConfig cfg;
    cfg.pivots = {"p1"};
    cfg.iterations = 3;
    cfg.rate = 0.5;

    FeedbackConfig loose = cfg;
    loose.clip_norm = 1e9; // far above any realistic norm: a no-op
    CHECK(layer_wise_feedback(m, x, e, loose)
              .outputs.equals(layer_wise_feedback(m, x, e, cfg).outputs));

    FeedbackConfig tight = cfg;
    tight.clip_norm = 1e-9;
    FeedbackResult plain = plain_forward(m, x, e);
    FeedbackResult clipped = layer_wise_feedback(m, x, e, tight);
    FeedbackResult free = layer_wise_feedback(m, x, e, cfg);
    double clipped_move = 0.0, free_move = 0.0;
    for (std::size_t j = 0; j < plain.outputs.size(); ++j) {
        clipped_move = std::max(clipped_move,
                                std::fabs(clipped.outputs[j] - plain.outputs[j]));
        free_move =
            std::max(free_move, std::fabs(free.outputs[j] - plain.outputs[j]));
    }
    CHECK(clipped_move < 1e-6);
    CHECK(free_move > 1e-4);
}

TEST_CASE("feedback configuration errors") {
    std::mt19937_64 rng(20);
    Model m = tiny_model(20);
    EvidencePartition e = half_known();
    Tensor x = random_input(rng);

    FeedbackConfig cfg;
    cfg.pivots = {"fc", "conv1"}; // back-to-front
    CHECK_THROWS_WITH_AS(layer_wise_feedback(m, x, e, cfg),
                         doctest::Contains("out of order"), ConfigError);

    cfg.pivots = {"p1", "p1"};
    CHECK_THROWS_WITH_AS(layer_wise_feedback(m, x, e, cfg),
                         doctest::Contains("duplicate"), ConfigError);

    cfg.pivots = {};
    CHECK_THROWS_AS(layer_wise_feedback(m, x, e, cfg), ConfigError);
    CHECK_THROWS_AS(residual_feedback(m, x, e, cfg), ConfigError);

    cfg.pivots = {"ghost"};
    CHECK_THROWS_AS(layer_wise_feedback(m, x, e, cfg), ConfigError);
    CHECK_THROWS_AS(single_layer_feedback(m, x, e, "ghost", cfg), ConfigError);

    cfg.pivots = {"conv1", "r1"}; // resolve to the same node post-nonlinearity
    CHECK_THROWS_WITH_AS(layer_wise_feedback(m, x, e, cfg),
                         doctest::Contains("same activation"), ConfigError);

    cfg.pivots = {"out"};
    CHECK_THROWS_WITH_AS(layer_wise_feedback(m, x, e, cfg),
                         doctest::Contains("downstream"), ConfigError);

    cfg.pivots = {"p1"};
    cfg.rate = 0.0;
    CHECK_THROWS_AS(layer_wise_feedback(m, x, e, cfg), ConfigError);
    cfg.rate = -0.1;
    CHECK_THROWS_AS(residual_feedback(m, x, e, cfg), ConfigError);
    cfg.rate = 0.1;
    cfg.rate_overrides = {{"p1", 0.0}};
    CHECK_THROWS_AS(single_layer_feedback(m, x, e, "p1", cfg), ConfigError);

    cfg.rate_overrides.clear();
    EvidencePartition bad;
    bad.known = {{9, 1.0}};
    CHECK_THROWS_AS(layer_wise_feedback(m, x, bad, cfg), ConfigError);
}

TEST_CASE("weighted loss uses the trained class weights") {
    std::mt19937_64 rng(22);
    Model m = tiny_model(22);
    EvidencePartition e = half_known();
    Tensor x = random_input(rng);

    FeedbackConfig cfg;
    cfg.pivots = {"p1"};
    cfg.iterations = 4;
    cfg.rate = 0.05;

    // Without trained weights, weighted and unweighted runs coincide.
    FeedbackConfig unweighted = cfg;
    unweighted.weighted_loss = false;
    CHECK(layer_wise_feedback(m, x, e, cfg).outputs.equals(
        layer_wise_feedback(m, x, e, unweighted).outputs));

    // Skewed weights change the trajectory; disabling them restores it.
    const Tensor before = layer_wise_feedback(m, x, e, cfg).outputs;
    m.set_class_weights({8.0, 0.25, 1.0, 1.0});
    CHECK_FALSE(layer_wise_feedback(m, x, e, cfg).outputs.equals(before));
    CHECK(layer_wise_feedback(m, x, e, unweighted).outputs.equals(before));
}
