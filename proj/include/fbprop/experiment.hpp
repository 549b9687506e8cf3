#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fbprop/dataset.hpp"
#include "fbprop/feedback.hpp"
#include "fbprop/model.hpp"

namespace fbprop {

// Worker pool size: hardware concurrency capped by FBPROP_THREADS.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Work is split into contiguous blocks; callers
// write results into per-index slots so the reduction never depends on
// scheduling. With one worker this is a plain loop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

struct ReportRow {
    std::string method; // none | single | lf | rf
    std::string pivots; // '+'-joined pivot layer names, empty for none
    std::size_t known = 0;
    std::size_t rep = 0;
    std::string metric;
    double value = 0.0;
    double wall_ms = 0.0;

    bool operator==(const ReportRow&) const = default;
};

struct Report {
    std::vector<ReportRow> rows;

    void sort(); // stable canonical order: method, pivots, known, rep, metric
    std::vector<const ReportRow*> select(const std::string& method,
                                         const std::string& metric) const;
};

// CSV with header method,pivots,known,rep,metric,value,wall_ms; %.17g numbers
// make the round trip exact. Refuses an empty report.
void emit_report(const Report& report, const std::string& path);
Report load_report(const std::string& path);

// Hyperparameter grid searched on the validation split.
struct GridSpec {
    std::vector<double> rates{1e-2};
    std::vector<std::size_t> iterations{10};
    std::vector<UpdateRule> rules{UpdateRule::Sgd};
};

struct ExperimentSpec {
    std::string model_file;
    std::string train_dir;
    std::string val_dir;
    std::string test_dir;
    std::vector<std::size_t> unknown;       // fixed unknown-label set
    std::vector<std::size_t> known_amounts; // evidence schedule
    std::vector<std::vector<std::string>> pivot_sets;
    GridSpec grid;
    std::size_t repetitions = 5;
    std::uint64_t seed = 0;
    std::size_t val_samples = 0;  // cap; 0 means the whole split
    std::size_t test_samples = 0; // cap; 0 means the whole split
    ResidualPlacement placement = ResidualPlacement::PostNonlinearity;
    bool weighted_loss = true;
    double clip_norm = 0.0;

    void validate(std::size_t output_dim) const;
};

// Paths inside the file resolve relative to its directory.
ExperimentSpec load_experiment_spec(const std::string& path);

// Evidence-amount sweep. Phase one selects (pivots, rate, iterations, rule)
// per method by unknown-set mAP on the validation split under a fixed
// evidence set; phase two evaluates the winner on the test split for every
// known amount and repetition, with the evidence label set resampled per
// repetition and shared between LF and RF. Baseline rows use method "none".
Report run_sweep(const ExperimentSpec& spec);

// Fixes the evidence split, then rates every individual pivot location
// (the input plus each eligible layer) for LF and RF by best-grid validation
// mAP. One row per (layer, method).
Report layer_analysis(const ExperimentSpec& spec);

struct BenchConfig {
    std::size_t iterations = 3;   // feedback steps per inference
    std::size_t warmup = 20;      // discarded inferences per cell
    std::size_t timed = 200;      // measured inferences per cell
    double rate = 1e-3;
    std::uint64_t seed = 0;
    double known_fraction = 0.5;  // synthetic evidence size
};

// For each schedule entry i, updates schedule[i:] (the entry and all
// subsequent pivots) and reports the mean per-image per-iteration wall time
// for LF and RF. Single-threaded by design.
Report benchmark_timing(const Model& model,
                        const std::vector<std::string>& schedule,
                        const BenchConfig& config);

} // namespace fbprop
