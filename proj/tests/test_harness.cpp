#include "doctest.h"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "fbprop/dataset.hpp"
#include "fbprop/error.hpp"
#include "fbprop/experiment.hpp"
#include "fbprop/model.hpp"

using namespace fbprop;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("fbprop_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

// Saves and restores FBPROP_THREADS around a test.
struct EnvGuard {
    bool had = false;
    std::string old;
    EnvGuard() {
        if (const char* v = std::getenv("FBPROP_THREADS")) {
            had = true;
            old = v;
        }
    }
    ~EnvGuard() {
        if (had)
            setenv("FBPROP_THREADS", old.c_str(), 1);
        else
            unsetenv("FBPROP_THREADS");
    }
};

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

// Saved model plus val/test splits on disk, and a small grid over two pivot
// sets; enough structure to drive the sweep and the layer analysis.
ExperimentSpec sweep_fixture(const std::string& tag) {
    fs::path dir = fresh_dir(tag);
    DatasetSpec ds;
    ds.samples = 32;
    ds.image_shape = {1, 6, 6};
    ds.num_labels = 4;
    ds.num_factors = 2;
    ds.coupling = {{0, 1}, {2, 3}};
    ds.factor_prob = 0.45;
    ds.pixel_noise = 0.2;
    ds.label_noise = 0.1;
    ds.seed = 21;
    save_dataset(synth_dataset(ds), (dir / "val").string());
    ds.seed = 22;
    save_dataset(synth_dataset(ds), (dir / "test").string());
    save_model(tiny_model(7), (dir / "model.json").string());

    ExperimentSpec spec;
    spec.model_file = (dir / "model.json").string();
    spec.val_dir = (dir / "val").string();
    spec.test_dir = (dir / "test").string();
    spec.unknown = {1, 3};
    spec.known_amounts = {0, 2};
    spec.pivot_sets = {{"flat"}, {"conv1", "flat"}};
    spec.grid.rates = {0.05, 0.2};
    spec.grid.iterations = {2};
    spec.grid.rules = {UpdateRule::Sgd};
    spec.repetitions = 2;
    spec.seed = 5;
    return spec;
}

auto row_key(const ReportRow& r) {
    return std::tie(r.method, r.pivots, r.known, r.rep, r.metric);
}

bool canonically_sorted(const Report& r) {
    return std::is_sorted(r.rows.begin(), r.rows.end(),
                          [](const ReportRow& a, const ReportRow& b) {
                              return row_key(a) < row_key(b);
                          });
}

// Everything except wall time, which is the only non-deterministic column.
auto strip_wall(const Report& r) {
    std::vector<std::tuple<std::string, std::string, std::size_t, std::size_t,
                           std::string, double>>
        out;
    for (const ReportRow& row : r.rows)
        out.emplace_back(row.method, row.pivots, row.known, row.rep, row.metric,
                         row.value);
    return out;
}

} // namespace

TEST_CASE("worker count respects FBPROP_THREADS") {
    EnvGuard guard;

    unsetenv("FBPROP_THREADS");
    CHECK(worker_count() >= 1);

    setenv("FBPROP_THREADS", "1", 1);
    CHECK(worker_count() == 1);

    setenv("FBPROP_THREADS", "2", 1);
    CHECK(worker_count() >= 1);
    CHECK(worker_count() <= 2);

    for (const char* bad : {"0", "abc", "", "7seven", "-1"}) {
        setenv("FBPROP_THREADS", bad, 1);
        CHECK_THROWS_WITH_AS(worker_count(), doctest::Contains("FBPROP_THREADS"),
                             ConfigError);
    }
}

TEST_CASE("parallel_for covers every index exactly once") {
    EnvGuard guard;
    for (const char* threads : {"1", "3"}) {
        setenv("FBPROP_THREADS", threads, 1);
        const std::size_t n = 257;
        std::vector<int> hits(n, 0);
        parallel_for(n, [&](std::size_t i) { hits[i] += 1; });
        CHECK(std::count(hits.begin(), hits.end(), 1) ==
              static_cast<std::ptrdiff_t>(n));
    }

    bool called = false;
    parallel_for(0, [&](std::size_t) { called = true; });
    CHECK_FALSE(called);
}

TEST_CASE("parallel_for propagates worker exceptions") {
    EnvGuard guard;
    for (const char* threads : {"1", "4"}) {
        setenv("FBPROP_THREADS", threads, 1);
        CHECK_THROWS_AS(parallel_for(50,
                                     [](std::size_t i) {
                                         if (i == 7)
                                             throw ValueError("boom");
                                     }),
                        ValueError);
    }
}

TEST_CASE("report sort is canonical and stable, select filters") {
    Report r;
    r.rows.push_back({"rf", "flat", 1, 0, "m", 1.0, 0.0});
    r.rows.push_back({"lf", "flat", 1, 0, "m", 2.0, 0.0}); // first of equal pair
    r.rows.push_back({"lf", "flat", 2, 0, "m", 3.0, 0.0});
    r.rows.push_back({"lf", "conv1", 1, 0, "m", 4.0, 0.0});
    r.rows.push_back({"lf", "flat", 1, 1, "m", 5.0, 0.0});
    r.rows.push_back({"lf", "flat", 1, 0, "a", 6.0, 0.0});
    r.rows.push_back({"lf", "flat", 1, 0, "m", 7.0, 0.0}); // second of equal pair
    r.sort();

    std::vector<double> values;
    for (const ReportRow& row : r.rows)
        values.push_back(row.value);
    // method, then pivots, known, rep, metric; the tied pair keeps 2 before 7
    CHECK(values == std::vector<double>{4.0, 6.0, 2.0, 7.0, 5.0, 3.0, 1.0});
    CHECK(canonically_sorted(r));

    auto picked = r.select("lf", "m");
    REQUIRE(picked.size() == 5);
    CHECK(picked[0]->pivots == "conv1");
    CHECK(picked[1]->value == 2.0);
    CHECK(picked[2]->value == 7.0);
    CHECK(picked[3]->rep == 1);
    CHECK(picked[4]->known == 2);
    CHECK(r.select("none", "m").empty());
    CHECK(r.select("lf", "nope").empty());
}

TEST_CASE("report CSV round trip reproduces every bit") {
    fs::path dir = fresh_dir("report_roundtrip");
    Report r;
    r.rows.push_back({"none", "", 0, 0, "map_unknown", 0.1 + 0.2, 12.5});
    r.rows.push_back({"lf", "conv1+flat", 2, 1, "map_unknown", 1.0 / 3.0, 0.015625});
    r.rows.push_back({"rf", "flat", 2, 0, "val_map_best", DBL_MAX, 1e-3});
    r.rows.push_back({"rf", "flat", 2, 0, "selected_rate", DBL_MIN, 0.0});
    r.rows.push_back({"single", "fc", 1, 4, "ms_per_image_iter", -2.75, 7.0});
    r.rows.push_back({"lf", "fc", 1, 0, "pivot_count", 4.0, 3.3});

    const std::string path = (dir / "report.csv").string();
    emit_report(r, path);
    Report back = load_report(path);

    Report expected = r;
    expected.sort();
    CHECK(back.rows == expected.rows);
    CHECK(canonically_sorted(back));

    // emitting what was loaded is a fixed point
    const std::string path2 = (dir / "report2.csv").string();
    emit_report(back, path2);
    CHECK(load_report(path2).rows == expected.rows);
}

TEST_CASE("report io rejects malformed input") {
    fs::path dir = fresh_dir("report_bad");

    Report empty;
    CHECK_THROWS_WITH_AS(emit_report(empty, (dir / "x.csv").string()),
                         doctest::Contains("empty"), ValueError);

    Report one;
    one.rows.push_back({"lf", "fc", 1, 0, "m", 0.5, 1.0});
    CHECK_THROWS_AS(emit_report(one, dir.string()), IoError); // path is a directory

    CHECK_THROWS_AS(load_report((dir / "missing.csv").string()), IoError);

    const std::string header = "method,pivots,known,rep,metric,value,wall_ms\n";

    write_text(dir / "h.csv", "method,pivots\nlf,fc,1,0,m,0.5,1\n");
    CHECK_THROWS_WITH_AS(load_report((dir / "h.csv").string()),
                         doctest::Contains("not a report file"), IoError);

    write_text(dir / "wide.csv", header + "lf,fc,1,0,m,0.5,1,extra\n");
    CHECK_THROWS_WITH_AS(load_report((dir / "wide.csv").string()),
                         doctest::Contains("too many fields"), IoError);

    write_text(dir / "narrow.csv", header + "lf,fc,1\n");
    CHECK_THROWS_WITH_AS(load_report((dir / "narrow.csv").string()),
                         doctest::Contains("expected 7 fields"), IoError);

    write_text(dir / "num.csv", header + "lf,fc,1,0,m,notanumber,1\n");
    CHECK_THROWS_WITH_AS(load_report((dir / "num.csv").string()),
                         doctest::Contains("malformed numeric"), IoError);

    write_text(dir / "blank.csv",
               header + "lf,fc,1,0,m,0.5,1\n\nrf,fc,1,0,m,0.25,2\n\n");
    CHECK(load_report((dir / "blank.csv").string()).rows.size() == 2);
}

TEST_CASE("experiment spec loads fields and resolves relative paths") {
    fs::path dir = fresh_dir("spec_load");
    write_text(dir / "exp.json", R"({
        "model": "m/model.json",
        "data": {"train": "tr", "val": "va", "test": "te"},
        "unknown": [1, 3],
        "known_amounts": [0, 2],
        "pivot_sets": [["flat"], ["conv1", "flat"]],
        "grid": {"rates": [0.05, 0.2], "iterations": [2, 6], "rules": ["adam", "momentum"]},
        "repetitions": 3,
        "seed": 9,
        "val_samples": 12,
        "test_samples": 20,
        "placement": "pre",
        "weighted_loss": false,
        "clip_norm": 2.5
    })");

    ExperimentSpec spec = load_experiment_spec((dir / "exp.json").string());
    CHECK(spec.model_file == (dir / "m/model.json").string());
    CHECK(spec.train_dir == (dir / "tr").string());
    CHECK(spec.val_dir == (dir / "va").string());
    CHECK(spec.test_dir == (dir / "te").string());
    CHECK(spec.unknown == std::vector<std::size_t>{1, 3});
    CHECK(spec.known_amounts == std::vector<std::size_t>{0, 2});
    REQUIRE(spec.pivot_sets.size() == 2);
    CHECK(spec.pivot_sets[1] == std::vector<std::string>{"conv1", "flat"});
    CHECK(spec.grid.rates == std::vector<double>{0.05, 0.2});
    CHECK(spec.grid.iterations == std::vector<std::size_t>{2, 6});
    REQUIRE(spec.grid.rules.size() == 2);
    CHECK(spec.grid.rules[0] == UpdateRule::Adam);
    CHECK(spec.grid.rules[1] == UpdateRule::Momentum);
    CHECK(spec.repetitions == 3);
    CHECK(spec.seed == 9);
    CHECK(spec.val_samples == 12);
    CHECK(spec.test_samples == 20);
    CHECK(spec.placement == ResidualPlacement::PreNonlinearity);
    CHECK_FALSE(spec.weighted_loss);
    CHECK(spec.clip_norm == 2.5);

    // absolute paths pass through; omitted keys keep their defaults
    write_text(dir / "min.json", R"({
        "model": "/abs/model.json",
        "data": {"val": "va", "test": "te"},
        "unknown": [0],
        "known_amounts": [1],
        "pivot_sets": [["fc"]]
    })");
    ExperimentSpec min = load_experiment_spec((dir / "min.json").string());
    CHECK(min.model_file == "/abs/model.json");
    CHECK(min.grid.rates == std::vector<double>{1e-2});
    CHECK(min.grid.iterations == std::vector<std::size_t>{10});
    REQUIRE(min.grid.rules.size() == 1);
    CHECK(min.grid.rules[0] == UpdateRule::Sgd);
    CHECK(min.repetitions == 5);
    CHECK(min.seed == 0);
    CHECK(min.val_samples == 0);
    CHECK(min.placement == ResidualPlacement::PostNonlinearity);
    CHECK(min.weighted_loss);
    CHECK(min.clip_norm == 0.0);
}

TEST_CASE("experiment spec load rejects bad files") {
    fs::path dir = fresh_dir("spec_bad");

    CHECK_THROWS_AS(load_experiment_spec((dir / "missing.json").string()), IoError);

    write_text(dir / "garbage.json", "{nope");
    CHECK_THROWS_WITH_AS(load_experiment_spec((dir / "garbage.json").string()),
                         doctest::Contains("invalid experiment JSON"), ConfigError);

    write_text(dir / "nokey.json", R"({
        "model": "m.json",
        "data": {"val": "va", "test": "te"},
        "known_amounts": [1],
        "pivot_sets": [["fc"]]
    })");
    CHECK_THROWS_WITH_AS(load_experiment_spec((dir / "nokey.json").string()),
                         doctest::Contains("invalid experiment spec"), ConfigError);

    write_text(dir / "place.json", R"({
        "model": "m.json",
        "data": {"val": "va", "test": "te"},
        "unknown": [0],
        "known_amounts": [1],
        "pivot_sets": [["fc"]],
        "placement": "sideways"
    })");
    CHECK_THROWS_WITH_AS(load_experiment_spec((dir / "place.json").string()),
                         doctest::Contains("placement must be"), ConfigError);
}

TEST_CASE("experiment spec validation guards every field") {
    ExperimentSpec base;
    base.model_file = "m.json";
    base.unknown = {1, 3};
    base.known_amounts = {1, 2};
    base.pivot_sets = {{"fc"}};
    base.repetitions = 1;
    CHECK_NOTHROW(base.validate(4));

    ExperimentSpec s = base;
    s.unknown = {};
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("unknown label set"),
                         ConfigError);

    s = base;
    s.unknown = {1, 7};
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("out of range"),
                         ConfigError);

    s = base;
    s.unknown = {1, 1};
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("duplicate unknown"),
                         ConfigError);

    s = base;
    s.unknown = {0, 1, 2, 3};
    s.known_amounts = {0};
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("every label is unknown"),
                         ConfigError);

    s = base;
    s.known_amounts = {};
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("known_amounts is empty"),
                         ConfigError);

    s = base;
    s.known_amounts = {3}; // only two labels are known-eligible
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("exceeds"), ConfigError);

    s = base;
    s.pivot_sets = {};
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("pivot_sets is empty"),
                         ConfigError);

    s = base;
    s.repetitions = 0;
    CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("repetitions"),
                         ConfigError);

    for (int which : {0, 1, 2}) {
        s = base;
        if (which == 0)
            s.grid.rates = {};
        else if (which == 1)
            s.grid.iterations = {};
        else
            s.grid.rules = {};
        CHECK_THROWS_WITH_AS(s.validate(4), doctest::Contains("grid lists"),
                             ConfigError);
    }
}

TEST_CASE("benchmark timing reports a row pair per pivot suffix") {
    Model model = tiny_model(3);
    BenchConfig cfg;
    cfg.iterations = 2;
    cfg.warmup = 1;
    cfg.timed = 2;
    cfg.rate = 1e-3;
    cfg.seed = 3;

    // schedule arrives unordered; rows cover each suffix of the sorted order
    Report r = benchmark_timing(model, {"flat", "conv1"}, cfg);
    CHECK(r.rows.size() == 8);
    CHECK(canonically_sorted(r));

    for (const std::string& method : {std::string("lf"), std::string("rf")}) {
        auto counts = r.select(method, "pivot_count");
        REQUIRE(counts.size() == 2);
        std::set<std::string> pivots;
        for (const ReportRow* row : counts) {
            pivots.insert(row->pivots);
            std::size_t plus =
                static_cast<std::size_t>(std::count(row->pivots.begin(),
                                                    row->pivots.end(), '+'));
            CHECK(row->value == static_cast<double>(plus + 1));
            CHECK(row->known == 2); // half of four labels
        }
        CHECK(pivots == std::set<std::string>{"conv1+flat", "flat"});

        auto times = r.select(method, "ms_per_image_iter");
        REQUIRE(times.size() == 2);
        for (const ReportRow* row : times) {
            CHECK(row->value > 0.0);
            CHECK(std::isfinite(row->value));
            CHECK(row->wall_ms > 0.0);
        }
    }

    CHECK_THROWS_WITH_AS(benchmark_timing(model, {}, cfg),
                         doctest::Contains("empty pivot schedule"), ConfigError);
}

TEST_CASE("sweep emits baseline, selection, and paired method rows") {
    ExperimentSpec spec = sweep_fixture("sweep");
    Report r = run_sweep(spec);

    // phase 1: 2 pivot sets x 2 rates x 1 iteration count x 1 rule per method,
    // plus 3 selection rows per method; phase 2: baseline per amount and one
    // row per (amount, rep, method)
    CHECK(r.rows.size() == 24);
    CHECK(canonically_sorted(r));

    auto baseline = r.select("none", "map_unknown");
    REQUIRE(baseline.size() == 2);
    CHECK(baseline[0]->known == 0);
    CHECK(baseline[1]->known == 2);
    CHECK(baseline[0]->value == baseline[1]->value);
    const double base_map = baseline[0]->value;
    CHECK(base_map >= 0.0);
    CHECK(base_map <= 1.0);

    for (const std::string& method : {std::string("lf"), std::string("rf")}) {
        auto val_rows = r.select(method, "val_map_unknown");
        REQUIRE(val_rows.size() == 4);
        double best_seen = -1.0;
        for (const ReportRow* row : val_rows) {
            CHECK(row->known == 2);
            CHECK(row->value >= 0.0);
            CHECK(row->value <= 1.0);
            best_seen = std::max(best_seen, row->value);
        }

        auto best = r.select(method, "val_map_best");
        REQUIRE(best.size() == 1);
        CHECK(best[0]->value == best_seen);

        auto rate = r.select(method, "selected_rate");
        REQUIRE(rate.size() == 1);
        CHECK((rate[0]->value == 0.05 || rate[0]->value == 0.2));
        auto iters = r.select(method, "selected_iters");
        REQUIRE(iters.size() == 1);
        CHECK(iters[0]->value == 2.0);

        auto test_rows = r.select(method, "map_unknown");
        REQUIRE(test_rows.size() == 4); // 2 amounts x 2 reps
        for (const ReportRow* row : test_rows) {
            CHECK(row->pivots == best[0]->pivots);
            if (row->known == 0)
                CHECK(row->value == base_map); // no evidence, plain forward
        }
    }

    Report again = run_sweep(spec);
    CHECK(strip_wall(again) == strip_wall(r));
}

TEST_CASE("layer analysis rates each candidate pivot for both methods") {
    ExperimentSpec spec = sweep_fixture("layers");
    spec.known_amounts = {2};
    Report r = layer_analysis(spec);

    CHECK(r.rows.size() == 13); // baseline + 6 candidates x 2 methods
    CHECK(canonically_sorted(r));
    CHECK(r.select("none", "val_map_unknown").size() == 1);

    const std::set<std::string> expected{"input", "conv1", "r1",
                                         "p1",    "flat",  "fc"};
    for (const std::string& method : {std::string("lf"), std::string("rf")}) {
        auto rows = r.select(method, "val_map_unknown");
        REQUIRE(rows.size() == 6);
        std::set<std::string> seen;
        for (const ReportRow* row : rows) {
            seen.insert(row->pivots);
            CHECK(row->known == 2);
            CHECK(row->value >= 0.0);
            CHECK(row->value <= 1.0);
        }
        CHECK(seen == expected);
    }

    spec.known_amounts = {0};
    CHECK_THROWS_WITH_AS(layer_analysis(spec),
                         doctest::Contains("positive known amount"), ConfigError);
}
