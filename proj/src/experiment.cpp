#include "fbprop/experiment.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>
#include <tuple>

#include "fbprop/error.hpp"
#include "fbprop/metrics.hpp"
#include "json.hpp"

namespace fbprop {

using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string join_pivots(const std::vector<std::string>& names) {
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) out += '+';
        out += names[i];
    }
    return out;
}

auto row_key(const ReportRow& r) {
    return std::tie(r.method, r.pivots, r.known, r.rep, r.metric);
}

} // namespace

std::size_t worker_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("FBPROP_THREADS")) {
        char* end = nullptr;
        unsigned long v = std::strtoul(env, &end, 10);
        // strtoul silently wraps negative input, so insist on a digit up front
        if (!std::isdigit(static_cast<unsigned char>(env[0])) || end == env ||
            *end != '\0' || v == 0)
            throw ConfigError("FBPROP_THREADS must be a positive integer");
        n = std::min<std::size_t>(n, v);
    }
    return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(begin + chunk, n);
        pool.emplace_back([&, w, begin, end] {
            try {
                for (std::size_t i = begin; i < end; ++i)
                    fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

void Report::sort() {
    std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
        return row_key(a) < row_key(b);
    });
}

std::vector<const ReportRow*> Report::select(const std::string& method,
                                             const std::string& metric) const {
    std::vector<const ReportRow*> out;
    for (const auto& r : rows)
        if (r.method == method && r.metric == metric)
            out.push_back(&r);
    return out;
}

void emit_report(const Report& report, const std::string& path) {
    if (report.rows.empty())
        throw ValueError("refusing to emit an empty report");
    Report sorted = report;
    sorted.sort();
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write report to " + path);
    out << "method,pivots,known,rep,metric,value,wall_ms\n";
    for (const auto& r : sorted.rows)
        out << r.method << ',' << r.pivots << ',' << r.known << ',' << r.rep
            << ',' << r.metric << ',' << format_g17(r.value) << ','
            << format_g17(r.wall_ms) << '\n';
    if (!out)
        throw IoError("failed while writing report to " + path);
}

Report load_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open report " + path);
    std::string line;
    if (!std::getline(in, line) || line != "method,pivots,known,rep,metric,value,wall_ms")
        throw IoError("not a report file: " + path);
    Report report;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::array<std::string, 7> f;
        std::size_t field = 0, start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                if (field >= 7)
                    throw IoError("report " + path + " line " +
                                  std::to_string(lineno) + ": too many fields");
                f[field++] = line.substr(start, i - start);
                start = i + 1;
            }
        }
        if (field != 7)
            throw IoError("report " + path + " line " + std::to_string(lineno) +
                          ": expected 7 fields");
        ReportRow r;
        r.method = f[0];
        r.pivots = f[1];
        try {
            r.known = std::stoul(f[2]);
            r.rep = std::stoul(f[3]);
            r.metric = f[4];
            r.value = std::stod(f[5]);
            r.wall_ms = std::stod(f[6]);
        } catch (const std::exception&) {
            throw IoError("report " + path + " line " + std::to_string(lineno) +
                          ": malformed numeric field");
        }
        report.rows.push_back(std::move(r));
    }
    return report;
}

void ExperimentSpec::validate(std::size_t output_dim) const {
    if (unknown.empty())
        throw ConfigError("experiment: unknown label set is empty");
    std::vector<char> is_unknown(output_dim, 0);
    for (std::size_t j : unknown) {
        if (j >= output_dim)
            throw ConfigError("experiment: unknown label " + std::to_string(j) +
                              " out of range");
        if (is_unknown[j])
            throw ConfigError("experiment: duplicate unknown label " +
                              std::to_string(j));
        is_unknown[j] = 1;
    }
    std::size_t complement = output_dim - unknown.size();
    if (complement == 0)
        throw ConfigError("experiment: every label is unknown; nothing can be known");
    if (known_amounts.empty())
        throw ConfigError("experiment: known_amounts is empty");
    for (std::size_t a : known_amounts)
        if (a > complement)
            throw ConfigError("experiment: known amount " + std::to_string(a) +
                              " exceeds the " + std::to_string(complement) +
                              " known-eligible labels");
    if (pivot_sets.empty())
        throw ConfigError("experiment: pivot_sets is empty");
    if (repetitions == 0)
        throw ConfigError("experiment: repetitions must be positive");
    if (grid.rates.empty() || grid.iterations.empty() || grid.rules.empty())
        throw ConfigError("experiment: grid lists must be non-empty");
}

ExperimentSpec load_experiment_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("invalid experiment JSON in " + path + ": " + e.what());
    }
    ExperimentSpec spec;
    fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        return fs::path(p).is_absolute() ? p : (base / p).string();
    };
    try {
        spec.model_file = resolve(j.at("model").get<std::string>());
        const json& data = j.at("data");
        spec.train_dir = resolve(data.value("train", std::string{}));
        spec.val_dir = resolve(data.at("val").get<std::string>());
        spec.test_dir = resolve(data.at("test").get<std::string>());
        spec.unknown = j.at("unknown").get<std::vector<std::size_t>>();
        spec.known_amounts = j.at("known_amounts").get<std::vector<std::size_t>>();
        spec.pivot_sets =
            j.at("pivot_sets").get<std::vector<std::vector<std::string>>>();
        if (j.contains("grid")) {
            const json& g = j["grid"];
            if (g.contains("rates"))
                spec.grid.rates = g["rates"].get<std::vector<double>>();
            if (g.contains("iterations"))
                spec.grid.iterations = g["iterations"].get<std::vector<std::size_t>>();
            if (g.contains("rules")) {
                spec.grid.rules.clear();
                for (const auto& name : g["rules"])
                    spec.grid.rules.push_back(
                        update_rule_from_name(name.get<std::string>()));
            }
        }
        spec.repetitions = j.value("repetitions", spec.repetitions);
        spec.seed = j.value("seed", spec.seed);
        spec.val_samples = j.value("val_samples", spec.val_samples);
        spec.test_samples = j.value("test_samples", spec.test_samples);
        if (j.contains("placement")) {
            std::string p = j["placement"].get<std::string>();
            if (p == "post")
                spec.placement = ResidualPlacement::PostNonlinearity;
            else if (p == "pre")
                spec.placement = ResidualPlacement::PreNonlinearity;
            else
                throw ConfigError("experiment: placement must be 'post' or 'pre'");
        }
        spec.weighted_loss = j.value("weighted_loss", spec.weighted_loss);
        spec.clip_norm = j.value("clip_norm", spec.clip_norm);
    } catch (const json::exception& e) {
        throw ConfigError("invalid experiment spec in " + path + ": " + e.what());
    }
    return spec;
}

namespace {

// Shared state for one evaluation campaign: the model, one split, and the
// fixed unknown set.
struct EvalContext {
    const Model* model = nullptr;
    const Dataset* data = nullptr;
    std::size_t count = 0; // samples actually evaluated (cap applied)
    std::vector<std::size_t> unknown;
};

EvidencePartition make_evidence(const EvalContext& ctx,
                                const std::vector<std::size_t>& known_set,
                                std::size_t sample) {
    EvidencePartition ev;
    ev.unknown = ctx.unknown;
    std::vector<double> row = ctx.data->label_row(sample);
    for (std::size_t j : known_set)
        ev.known.emplace(j, row[j]);
    return ev;
}

// Mean unknown-set mAP for one method/config over the split. Scores land in
// per-sample rows, so the result is identical for any worker count.
double evaluate_cell(const EvalContext& ctx, const std::string& method,
                     const FeedbackConfig& config,
                     const std::vector<std::size_t>& known_set) {
    const std::size_t d = ctx.model->output_dim();
    Tensor scores = Tensor::zeros({ctx.count, d});
    parallel_for(ctx.count, [&](std::size_t i) {
        EvidencePartition ev = make_evidence(ctx, known_set, i);
        Tensor input = ctx.data->sample(i);
        FeedbackResult r;
        if (method == "none" || known_set.empty())
            r = plain_forward(*ctx.model, input, ev);
        else if (method == "lf")
            r = layer_wise_feedback(*ctx.model, input, ev, config);
        else if (method == "rf")
            r = residual_feedback(*ctx.model, input, ev, config);
        else if (method == "single")
            r = single_layer_feedback(*ctx.model, input, ev, config.pivots.front(),
                                      config);
        else
            throw ConfigError("unknown method '" + method + "'");
        std::copy(r.outputs.data().begin(), r.outputs.data().end(),
                  scores.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    });
    Tensor truth = Tensor::zeros({ctx.count, d});
    for (std::size_t i = 0; i < ctx.count; ++i) {
        std::vector<double> row = ctx.data->label_row(i);
        std::copy(row.begin(), row.end(),
                  truth.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return mean_ap(scores, truth, ctx.unknown);
}

std::vector<std::size_t> complement_of(const std::vector<std::size_t>& unknown,
                                       std::size_t d) {
    std::vector<char> is_unknown(d, 0);
    for (std::size_t j : unknown)
        is_unknown[j] = 1;
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < d; ++j)
        if (!is_unknown[j])
            out.push_back(j);
    return out;
}

std::vector<std::size_t> sample_known(const std::vector<std::size_t>& pool,
                                      std::size_t amount, std::mt19937_64& rng) {
    std::vector<std::size_t> draw = pool;
    // partial Fisher-Yates: the first `amount` entries are a uniform subset
    for (std::size_t i = 0; i < amount; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, draw.size() - 1);
        std::swap(draw[i], draw[pick(rng)]);
    }
    draw.resize(amount);
    std::sort(draw.begin(), draw.end());
    return draw;
}

FeedbackConfig base_config(const ExperimentSpec& spec) {
    FeedbackConfig c;
    c.placement = spec.placement;
    c.weighted_loss = spec.weighted_loss;
    c.clip_norm = spec.clip_norm;
    return c;
}

struct GridChoice {
    std::vector<std::string> pivots;
    double rate = 0.0;
    std::size_t iterations = 0;
    UpdateRule rule = UpdateRule::Sgd;
    double val_map = -1.0;
};

constexpr std::uint64_t kValSalt = 0x76616cull;   // evidence stream for phase 1
constexpr std::uint64_t kLayerSalt = 0x6c6179ull; // layer-analysis evidence

} // namespace

Report run_sweep(const ExperimentSpec& spec) {
    Model model = load_model(spec.model_file);
    spec.validate(model.output_dim());
    Dataset val = load_dataset(spec.val_dir);
    Dataset test = load_dataset(spec.test_dir);

    EvalContext vctx{&model, &val,
                     spec.val_samples ? std::min(spec.val_samples, val.size())
                                      : val.size(),
                     spec.unknown};
    EvalContext tctx{&model, &test,
                     spec.test_samples ? std::min(spec.test_samples, test.size())
                                       : test.size(),
                     spec.unknown};
    std::vector<std::size_t> pool = complement_of(spec.unknown, model.output_dim());

    Report report;

    // Phase 1: pick hyperparameters per method on the validation split under
    // one fixed, fully-populated evidence draw.
    std::size_t val_amount = *std::max_element(spec.known_amounts.begin(),
                                               spec.known_amounts.end());
    GridChoice best_lf, best_rf;
    if (val_amount > 0) {
        std::mt19937_64 rng(mix_seed(spec.seed, kValSalt));
        std::vector<std::size_t> val_known = sample_known(pool, val_amount, rng);
        for (const std::string& method : {std::string("lf"), std::string("rf")}) {
            GridChoice& best = method == "lf" ? best_lf : best_rf;
            for (const auto& pivots : spec.pivot_sets)
                for (double rate : spec.grid.rates)
                    for (std::size_t iters : spec.grid.iterations)
                        for (UpdateRule rule : spec.grid.rules) {
                            FeedbackConfig c = base_config(spec);
                            c.pivots = pivots;
                            c.rate = rate;
                            c.iterations = iters;
                            c.rule = rule;
                            auto tick = Clock::now();
                            double v = evaluate_cell(vctx, method, c, val_known);
                            report.rows.push_back({method, join_pivots(pivots),
                                                   val_amount, 0, "val_map_unknown",
                                                   v, elapsed_ms(tick)});
                            if (v > best.val_map) {
                                best = GridChoice{pivots, rate, iters, rule, v};
                            }
                        }
            report.rows.push_back({method, join_pivots(best.pivots), val_amount, 0,
                                   "val_map_best", best.val_map, 0.0});
            report.rows.push_back({method, join_pivots(best.pivots), val_amount, 0,
                                   "selected_rate", best.rate, 0.0});
            report.rows.push_back({method, join_pivots(best.pivots), val_amount, 0,
                                   "selected_iters",
                                   static_cast<double>(best.iterations), 0.0});
        }
    } else {
        // Degenerate schedule: nothing is ever known; fall back to the first
        // grid cell so phase 2 still produces baseline-equal rows.
        best_lf = best_rf = GridChoice{spec.pivot_sets.front(),
                                       spec.grid.rates.front(),
                                       spec.grid.iterations.front(),
                                       spec.grid.rules.front(), -1.0};
    }

    // Phase 2: test split. Baseline once per known amount; feedback methods
    // share the per-repetition evidence draw so the comparison is paired.
    {
        auto tick = Clock::now();
        double base_map = evaluate_cell(tctx, "none", base_config(spec), {});
        double base_ms = elapsed_ms(tick);
        for (std::size_t a : spec.known_amounts)
            report.rows.push_back({"none", "", a, 0, "map_unknown", base_map,
                                   base_ms});
    }
    for (std::size_t a : spec.known_amounts) {
        for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
            std::mt19937_64 rng(mix_seed(spec.seed, a * 1000003ull + rep));
            std::vector<std::size_t> known = sample_known(pool, a, rng);
            for (const std::string& method : {std::string("lf"), std::string("rf")}) {
                const GridChoice& choice = method == "lf" ? best_lf : best_rf;
                FeedbackConfig c = base_config(spec);
                c.pivots = choice.pivots;
                c.rate = choice.rate;
                c.iterations = choice.iterations;
                c.rule = choice.rule;
                auto tick = Clock::now();
                double v = evaluate_cell(tctx, method, c, known);
                report.rows.push_back({method, join_pivots(choice.pivots), a, rep,
                                       "map_unknown", v, elapsed_ms(tick)});
            }
        }
    }
    report.sort();
    return report;
}

Report layer_analysis(const ExperimentSpec& spec) {
    Model model = load_model(spec.model_file);
    spec.validate(model.output_dim());
    Dataset val = load_dataset(spec.val_dir);
    EvalContext vctx{&model, &val,
                     spec.val_samples ? std::min(spec.val_samples, val.size())
                                      : val.size(),
                     spec.unknown};
    std::vector<std::size_t> pool = complement_of(spec.unknown, model.output_dim());
    std::size_t amount = *std::max_element(spec.known_amounts.begin(),
                                           spec.known_amounts.end());
    if (amount == 0)
        throw ConfigError("layer analysis needs a positive known amount");
    std::mt19937_64 rng(mix_seed(spec.seed, kLayerSalt));
    std::vector<std::size_t> known = sample_known(pool, amount, rng);

    // Candidate pivots: the input plus every layer that sits upstream of the
    // loss under the chosen placement.
    Tape probe = model.forward_full(val.sample(0));
    std::vector<std::string> candidates{"input"};
    for (const LayerSpec& l : model.layers()) {
        if (l.kind == LayerKind::SigmoidHead)
            continue;
        if (resolve_pivot_node(model, probe, l.name, spec.placement) <=
            probe.logits_node())
            candidates.push_back(l.name);
    }

    Report report;
    {
        auto tick = Clock::now();
        double base = evaluate_cell(vctx, "none", base_config(spec), {});
        report.rows.push_back({"none", "", amount, 0, "val_map_unknown", base,
                               elapsed_ms(tick)});
    }
    for (const std::string& layer : candidates) {
        for (const std::string& method : {std::string("lf"), std::string("rf")}) {
            double best = -1.0;
            double wall = 0.0;
            for (double rate : spec.grid.rates)
                for (std::size_t iters : spec.grid.iterations)
                    for (UpdateRule rule : spec.grid.rules) {
                        FeedbackConfig c = base_config(spec);
                        c.pivots = {layer};
                        c.rate = rate;
                        c.iterations = iters;
                        c.rule = rule;
                        auto tick = Clock::now();
                        best = std::max(best, evaluate_cell(vctx, method, c, known));
                        wall += elapsed_ms(tick);
                    }
            report.rows.push_back({method, layer, amount, 0, "val_map_unknown",
                                   best, wall});
        }
    }
    report.sort();
    return report;
}

Report benchmark_timing(const Model& model,
                        const std::vector<std::string>& schedule,
                        const BenchConfig& config) {
    if (schedule.empty())
        throw ConfigError("benchmark: empty pivot schedule");
    std::vector<std::string> ordered = pivot_set(model, schedule);

    // Fixed synthetic workload: one random input, one random evidence split.
    std::mt19937_64 rng(mix_seed(config.seed, 0xbe7cull));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Tensor input = Tensor::zeros(model.input_shape());
    for (double& v : input.data())
        v = gauss(rng);
    const std::size_t d = model.output_dim();
    std::size_t n_known = std::max<std::size_t>(
        1, static_cast<std::size_t>(config.known_fraction * static_cast<double>(d)));
    n_known = std::min(n_known, d - 1);
    std::vector<std::size_t> all(d);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<std::size_t> known_set = sample_known(all, n_known, rng);
    EvidencePartition ev;
    std::vector<char> is_known(d, 0);
    for (std::size_t j : known_set) {
        ev.known.emplace(j, rng() % 2 ? 1.0 : 0.0);
        is_known[j] = 1;
    }
    for (std::size_t j = 0; j < d; ++j)
        if (!is_known[j])
            ev.unknown.push_back(j);

    Report report;
    for (std::size_t start = 0; start < ordered.size(); ++start) {
        std::vector<std::string> pivots(ordered.begin() +
                                            static_cast<std::ptrdiff_t>(start),
                                        ordered.end());
        FeedbackConfig c;
        c.pivots = pivots;
        c.rate = config.rate;
        c.iterations = config.iterations;
        c.weighted_loss = false;
        for (const std::string& method : {std::string("lf"), std::string("rf")}) {
            auto run = [&] {
                if (method == "lf")
                    layer_wise_feedback(model, input, ev, c);
                else
                    residual_feedback(model, input, ev, c);
            };
            for (std::size_t i = 0; i < config.warmup; ++i)
                run();
            auto tick = Clock::now();
            for (std::size_t i = 0; i < config.timed; ++i)
                run();
            double total = elapsed_ms(tick);
            double per_iter = total / static_cast<double>(config.timed) /
                              static_cast<double>(config.iterations);
            report.rows.push_back({method, join_pivots(pivots), n_known, 0,
                                   "ms_per_image_iter", per_iter, total});
            report.rows.push_back({method, join_pivots(pivots), n_known, 0,
                                   "pivot_count",
                                   static_cast<double>(pivots.size()), total});
        }
    }
    report.sort();
    return report;
}

} // namespace fbprop
