// fbprop command line: dataset generation, training, feedback inference, and
// the reporting harness. Errors print one line to stderr:
//   error: <category>: <message>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fbprop/dataset.hpp"
#include "fbprop/error.hpp"
#include "fbprop/experiment.hpp"
#include "fbprop/feedback.hpp"
#include "fbprop/model.hpp"
#include "fbprop/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fbprop::EvidencePartition parse_evidence(const std::string& text,
                                         std::size_t output_dim) {
    fbprop::EvidencePartition ev;
    std::vector<char> is_known(output_dim, 0);
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t stop = text.find(',', start);
        if (stop == std::string::npos)
            stop = text.size();
        std::string item = text.substr(start, stop - start);
        std::size_t eq = item.find('=');
        if (eq == std::string::npos)
            throw fbprop::ConfigError("bad --known item '" + item +
                                      "', expected index=value");
        std::size_t j;
        double v;
        try {
            j = std::stoul(item.substr(0, eq));
            v = std::stod(item.substr(eq + 1));
        } catch (const std::exception&) {
            throw fbprop::ConfigError("bad --known item '" + item + "'");
        }
        if (j >= output_dim)
            throw fbprop::ConfigError("--known index " + std::to_string(j) +
                                      " out of range for " +
                                      std::to_string(output_dim) + " labels");
        ev.known[j] = v;
        is_known[j] = 1;
        start = stop + 1;
    }
    for (std::size_t j = 0; j < output_dim; ++j)
        if (!is_known[j])
            ev.unknown.push_back(j);
    return ev;
}

std::vector<std::string> split_names(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t stop = text.find(',', start);
        if (stop == std::string::npos)
            stop = text.size();
        if (stop > start)
            out.push_back(text.substr(start, stop - start));
        start = stop + 1;
    }
    return out;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
    std::ifstream in(spec_path, std::ios::binary);
    if (!in)
        throw fbprop::IoError("cannot open " + spec_path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw fbprop::ConfigError(std::string("invalid dataset spec JSON: ") +
                                  e.what());
    }

    if (j.contains("splits")) {
        // {"splits": {"train": 8000, "val": 1000, "test": 1000}} expands into
        // one dataset per split with a derived seed.
        const std::pair<const char*, std::uint64_t> names[] = {
            {"train", 1}, {"val", 2}, {"test", 3}};
        json base = j;
        base.erase("splits");
        std::uint64_t seed = j.value("seed", std::uint64_t{0});
        bool any = false;
        for (const auto& [name, salt] : names) {
            if (!j["splits"].contains(name))
                continue;
            any = true;
            json split = base;
            split["samples"] = j["splits"][name].get<std::size_t>();
            split["seed"] = fbprop::mix_seed(seed, salt);
            fbprop::DatasetSpec spec = fbprop::dataset_spec_from_json(split.dump());
            fbprop::Dataset data = fbprop::synth_dataset(spec);
            fbprop::save_dataset(data, (fs::path(out_dir) / name).string());
            std::printf("%s: %zu samples, %zu labels -> %s\n", name, data.size(),
                        data.label_dim(), (fs::path(out_dir) / name).c_str());
        }
        if (!any)
            throw fbprop::ConfigError(
                "splits must name at least one of train/val/test");
        return 0;
    }

    fbprop::DatasetSpec spec = fbprop::dataset_spec_from_json(text);
    fbprop::Dataset data = fbprop::synth_dataset(spec);
    fbprop::save_dataset(data, out_dir);
    std::printf("%zu samples, %zu labels -> %s\n", data.size(), data.label_dim(),
                out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& arch_path, const std::string& data_dir,
              const std::string& out_path, const fbprop::TrainConfig& config,
              std::uint64_t model_seed) {
    fbprop::Model model = fbprop::load_model_arch(arch_path, model_seed);
    fbprop::Dataset train_set =
        fbprop::load_dataset((fs::path(data_dir) / "train").string());
    fbprop::Dataset val_set =
        fbprop::load_dataset((fs::path(data_dir) / "val").string());
    fbprop::TrainCurve curve = fbprop::train(model, train_set, val_set, config);
    fbprop::save_model(model, out_path);
    std::printf("trained %zu epochs, final train loss %.5f, val loss %.5f -> %s\n",
                curve.train_loss.size(),
                curve.train_loss.empty() ? 0.0 : curve.train_loss.back(),
                curve.val_loss.empty() ? 0.0 : curve.val_loss.back(),
                out_path.c_str());
    return 0;
}

int cmd_infer(const std::string& model_path, const std::string& sample_path,
              const std::string& known, const std::string& method,
              const std::string& pivots, const fbprop::FeedbackConfig& base,
              bool show_all, bool show_trace) {
    fbprop::Model model = fbprop::load_model(model_path);
    fbprop::Tensor sample = fbprop::read_tensor(sample_path);
    fbprop::EvidencePartition ev = parse_evidence(known, model.output_dim());

    fbprop::FeedbackConfig config = base;
    config.pivots = split_names(pivots);

    fbprop::FeedbackResult result;
    if (method == "none") {
        result = fbprop::plain_forward(model, sample, ev);
    } else if (method == "single") {
        if (config.pivots.size() != 1)
            throw fbprop::ConfigError(
                "--method single needs exactly one --pivots layer");
        result = fbprop::single_layer_feedback(model, sample, ev,
                                               config.pivots.front(), config);
    } else if (method == "lf") {
        result = fbprop::layer_wise_feedback(model, sample, ev, config);
    } else if (method == "rf") {
        result = fbprop::residual_feedback(model, sample, ev, config);
    } else {
        throw fbprop::ConfigError("unknown --method '" + method +
                                  "' (expected none, single, lf, or rf)");
    }

    if (show_trace)
        for (std::size_t t = 0; t < result.trace.losses.size(); ++t)
            std::fprintf(stderr, "iter %zu loss %.9g\n", t,
                         result.trace.losses[t]);
    if (result.trace.degenerate)
        std::fprintf(stderr, "note: no known labels given; plain forward pass\n");

    if (show_all) {
        for (std::size_t j = 0; j < result.outputs.size(); ++j)
            std::printf("%zu\t%.9g\n", j, result.outputs.data()[j]);
    } else {
        for (std::size_t i = 0; i < ev.unknown.size(); ++i)
            std::printf("%zu\t%.9g\n", ev.unknown[i], result.unknown_scores[i]);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"feedback-prop inference over compact CNNs"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("spec", spec_path, "dataset spec JSON")->required();
    gen->add_option("out-dir", out_dir, "output directory")->required();

    std::string arch_path, data_dir, out_model;
    fbprop::TrainConfig tconfig;
    std::uint64_t model_seed = 0;
    bool quiet = false;
    auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
    tr->add_option("model-spec", arch_path, "architecture JSON")->required();
    tr->add_option("data-dir", data_dir, "directory holding train/ and val/")
        ->required();
    tr->add_option("out-model", out_model, "path for the trained model JSON")
        ->required();
    tr->add_option("--epochs", tconfig.epochs);
    tr->add_option("--batch", tconfig.batch);
    tr->add_option("--rate", tconfig.rate);
    tr->add_option("--seed", tconfig.seed);
    tr->add_option("--model-seed", model_seed, "parameter init seed override");
    tr->add_flag("--quiet", quiet, "suppress per-epoch progress");

    std::string model_path, sample_path, known, method = "none", pivots;
    fbprop::FeedbackConfig fconfig;
    std::string rule = "sgd", placement = "post";
    bool show_all = false, show_trace = false;
    auto* inf = app.add_subcommand("infer", "run (feedback) inference on one sample");
    inf->add_option("model", model_path, "trained model JSON")->required();
    inf->add_option("sample", sample_path, "input tensor (FBPT)")->required();
    inf->add_option("--known", known, "evidence as index=value,... (values 0/1)");
    inf->add_option("--method", method, "none | single | lf | rf");
    inf->add_option("--pivots", pivots, "comma-separated pivot layers");
    inf->add_option("--rate", fconfig.rate);
    inf->add_option("--iters", fconfig.iterations);
    inf->add_option("--rule", rule, "sgd | momentum | adam");
    inf->add_option("--placement", placement, "post | pre");
    inf->add_option("--clip", fconfig.clip_norm, "gradient max-norm, 0 = off");
    inf->add_flag("--unweighted", "ignore trained class weights in the loss");
    inf->add_flag("--all", show_all, "print every label, not just unknown");
    inf->add_flag("--trace", show_trace, "print per-iteration loss to stderr");

    std::string exp_path, out_csv;
    auto* sw = app.add_subcommand("sweep", "evidence-amount sweep to CSV");
    sw->add_option("experiment", exp_path, "experiment spec JSON")->required();
    sw->add_option("out", out_csv, "output CSV path")->required();

    std::string lexp_path, lout_csv;
    auto* ly = app.add_subcommand("layers", "per-layer usefulness analysis to CSV");
    ly->add_option("experiment", lexp_path, "experiment spec JSON")->required();
    ly->add_option("out", lout_csv, "output CSV path")->required();

    std::string bmodel, bschedule, bout;
    fbprop::BenchConfig bconfig;
    auto* be = app.add_subcommand("bench", "LF vs RF timing benchmark to CSV");
    be->add_option("model", bmodel, "trained model JSON")->required();
    be->add_option("schedule", bschedule, "comma-separated starting layers")
        ->required();
    be->add_option("out", bout, "output CSV path")->required();
    be->add_option("--iters", bconfig.iterations);
    be->add_option("--warmup", bconfig.warmup);
    be->add_option("--timed", bconfig.timed);
    be->add_option("--rate", bconfig.rate);
    be->add_option("--seed", bconfig.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(spec_path, out_dir);
        if (tr->parsed()) {
            tconfig.log_progress = !quiet;
            return cmd_train(arch_path, data_dir, out_model, tconfig, model_seed);
        }
        if (inf->parsed()) {
            fconfig.rule = fbprop::update_rule_from_name(rule);
            if (placement == "post")
                fconfig.placement = fbprop::ResidualPlacement::PostNonlinearity;
            else if (placement == "pre")
                fconfig.placement = fbprop::ResidualPlacement::PreNonlinearity;
            else
                throw fbprop::ConfigError("--placement must be 'post' or 'pre'");
            fconfig.weighted_loss = inf->count("--unweighted") == 0;
            return cmd_infer(model_path, sample_path, known, method, pivots,
                             fconfig, show_all, show_trace);
        }
        if (sw->parsed()) {
            fbprop::Report report =
                fbprop::run_sweep(fbprop::load_experiment_spec(exp_path));
            fbprop::emit_report(report, out_csv);
            std::printf("%zu rows -> %s\n", report.rows.size(), out_csv.c_str());
            return 0;
        }
        if (ly->parsed()) {
            fbprop::Report report =
                fbprop::layer_analysis(fbprop::load_experiment_spec(lexp_path));
            fbprop::emit_report(report, lout_csv);
            std::printf("%zu rows -> %s\n", report.rows.size(), lout_csv.c_str());
            return 0;
        }
        if (be->parsed()) {
            fbprop::Model model = fbprop::load_model(bmodel);
            fbprop::Report report = fbprop::benchmark_timing(
                model, split_names(bschedule), bconfig);
            fbprop::emit_report(report, bout);
            std::printf("%zu rows -> %s\n", report.rows.size(), bout.c_str());
            return 0;
        }
    } catch (const fbprop::Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", e.category().c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", e.what());
        return 2;
    }
    return 0;
}
