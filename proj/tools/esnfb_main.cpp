// Experiment CLI: ensemble runs, dataset generation, single-ESN
// diagnostics and the Lilliefors critical-value table.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "esnfb/esnfb.hpp"

namespace {

using namespace esnfb;

struct KeyCapture {
    std::vector<std::pair<std::string, std::string>> overrides;

    void add(CLI::App* cmd, const std::string& flag, const std::string& key,
             const std::string& help, bool is_flag = false) {
        if (is_flag) {
            cmd->add_flag_function(
                flag,
                [this, key](std::int64_t count) {
                    if (count > 0) overrides.emplace_back(key, "true");
                },
                help);
        } else {
            cmd->add_option_function<std::string>(
                flag,
                [this, key](const std::string& value) {
                    overrides.emplace_back(key, value);
                },
                help);
        }
    }
};

int cmd_run(const std::string& config_path, const KeyCapture& capture) {
    ExperimentConfig config;
    if (!config_path.empty()) load_config_file(config, config_path);
    for (const auto& [key, value] : capture.overrides)
        apply_config_key(config, key, value);
    if (config.output_dir.empty())
        throw UsageError("run: an output directory is required (--out)");

    const ExperimentResult result = run_experiment(config);
    std::cout << "members " << config.members << ", failures " << result.failures
              << "\n";
    std::cout << "no feedback: mean " << result.base.mean << ", std "
              << result.base.stddev << "\n";
    if (result.with_feedback)
        std::cout << "feedback:    mean " << result.with_feedback->mean << ", std "
                  << result.with_feedback->stddev << " (reduction "
                  << result.reduction_pct << "%)\n";
    std::cout << "results written to " << config.output_dir << "\n";
    return 0;
}

TaskDataset build_dataset(const ExperimentConfig& config) {
    switch (config.task) {
        case TaskKind::mackey_glass: return mackey_glass(config.windows);
        case TaskKind::channel_eq:
            return channel_equalization(config.windows, derive_seed(config.seed, 0, 1));
        case TaskKind::ced:
            if (config.ced_file.empty())
                throw DataError("the CED task requires --ced-file");
            return load_ced(config.ced_file, config.ced_columns,
                            config.ced_allow_length);
    }
    throw UsageError("unknown task");
}

int cmd_gen_task(ExperimentConfig config, const KeyCapture& capture,
                 const std::string& out_path) {
    for (const auto& [key, value] : capture.overrides)
        apply_config_key(config, key, value);
    const TaskDataset ds = build_dataset(config);
    if (out_path.empty() || out_path == "-") {
        write_dataset_csv(ds, std::cout);
    } else {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw DataError(out_path + ": cannot open for writing");
        write_dataset_csv(ds, out);
    }
    return 0;
}

int cmd_diagnose(ExperimentConfig config, const KeyCapture& capture,
                 std::uint64_t index, const std::string& out_path) {
    for (const auto& [key, value] : capture.overrides)
        apply_config_key(config, key, value);
    const TaskDataset ds = build_dataset(config);
    const EsnParams params = sample_esn(config.sampler_spec(), index);

    Trajectory traj = ds.kind == TaskKind::ced
                          ? ced_run(params, zero_feedback(params), ds, 0.0)
                          : run(params, zero_feedback(params),
                                ds.inputs.head(ds.windows.total()),
                                initial_state(params), ds.windows);
    const ReadoutSolution sol =
        solve(accumulate(traj.train_states(), ds.train_targets()));
    sensitivities(params, zero_feedback(params), traj);
    const GradientCertificate cert = certificate(traj, sol, ds.train_targets());

    ordered_json j;
    j["task"] = task_name(config.task);
    j["nodes"] = config.nodes;
    j["seed"] = config.seed;
    j["index"] = index;
    j["train_nmse"] = sol.nmse_train;
    j["grad_norm"] = cert.grad_norm;
    j["trace_m_par"] = cert.trace_m_par;
    j["m_par_rank"] = cert.m_par_rank;
    j["degenerate"] = cert.degenerate;
    const std::string text = j.dump(2) + "\n";
    if (out_path.empty() || out_path == "-") {
        std::cout << text;
    } else {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw DataError(out_path + ": cannot open for writing");
        out << text;
    }
    return 0;
}

int cmd_lilliefors_table(const std::vector<int>& sizes, double alpha,
                         int replicates, const std::string& out_path) {
    std::string text = "n,alpha,replicates,critical\n";
    char buf[64];
    for (int n : sizes) {
        const double critical = lilliefors_critical(n, alpha, replicates);
        std::snprintf(buf, sizeof buf, "%d,%g,%d,%.6f\n", n, alpha, replicates,
                      critical);
        text += buf;
    }
    if (out_path.empty() || out_path == "-") {
        std::cout << text;
    } else {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw DataError(out_path + ": cannot open for writing");
        out << text;
    }
    return 0;
}

void add_common_options(CLI::App* cmd, KeyCapture& capture) {
    capture.add(cmd, "--task", "task", "task: mg, ce or ced");
    capture.add(cmd, "--nodes", "nodes", "reservoir size");
    capture.add(cmd, "--seed", "seed", "ensemble base seed");
    capture.add(cmd, "--warmup", "warmup", "warmup steps");
    capture.add(cmd, "--train", "train", "training steps");
    capture.add(cmd, "--test", "test", "test steps");
    capture.add(cmd, "--ced-file", "ced_file", "coupled electric drives data file");
    capture.add(cmd, "--ced-input-col", "ced_input_col", "CED input column (name or index)");
    capture.add(cmd, "--ced-target-col", "ced_target_col", "CED target column (name or index)");
    capture.add(cmd, "--ced-allow-length", "ced_allow_length",
                "accept CED files that do not have 500 rows", true);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Echo state networks with trained state feedback"};
    app.require_subcommand(1);

    KeyCapture run_capture;
    std::string run_config;
    CLI::App* run_cmd = app.add_subcommand("run", "run an ensemble experiment");
    run_cmd->add_option("--config", run_config, "flat key = value config file");
    add_common_options(run_cmd, run_capture);
    run_capture.add(run_cmd, "--members", "members", "ensemble size");
    run_capture.add(run_cmd, "--feedback", "feedback", "optimize state feedback", true);
    run_capture.add(run_cmd, "--eta", "eta", "gradient descent learning rate");
    run_capture.add(run_cmd, "--gd-steps", "gd_steps", "gradient descent steps");
    run_capture.add(run_cmd, "--eps-a", "eps_a", "spectral projection margin");
    run_capture.add(run_cmd, "--keep-best", "keep_best", "return best iterate (true/false)");
    run_capture.add(run_cmd, "--alpha-init", "alpha_init", "gradient-ansatz initializer", true);
    run_capture.add(run_cmd, "--max-lag", "max_lag", "residual autocorrelation lags");
    run_capture.add(run_cmd, "--threads", "threads", "worker threads (0 = auto)");
    run_capture.add(run_cmd, "--hist-bins", "hist_bins", "histogram bins");
    run_capture.add(run_cmd, "--out", "out", "output directory");

    KeyCapture gen_capture;
    std::string gen_out;
    CLI::App* gen_cmd = app.add_subcommand("gen-task", "emit a dataset as CSV");
    add_common_options(gen_cmd, gen_capture);
    gen_cmd->add_option("--out", gen_out, "output file (default stdout)");

    KeyCapture diag_capture;
    std::string diag_out;
    std::uint64_t diag_index = 0;
    CLI::App* diag_cmd =
        app.add_subcommand("diagnose", "gradient certificate for a single ESN");
    add_common_options(diag_cmd, diag_capture);
    diag_cmd->add_option("--index", diag_index, "ensemble member index");
    diag_cmd->add_option("--out", diag_out, "output file (default stdout)");

    std::vector<int> lt_sizes{10, 20, 30, 50, 100, 200, 500};
    double lt_alpha = 0.05;
    int lt_replicates = kLillieforsReplicates;
    std::string lt_out;
    CLI::App* lt_cmd =
        app.add_subcommand("lilliefors-table", "regenerate the cached critical values");
    lt_cmd->add_option("--n", lt_sizes, "sample sizes");
    lt_cmd->add_option("--alpha", lt_alpha, "significance level");
    lt_cmd->add_option("--replicates", lt_replicates, "Monte-Carlo replicates");
    lt_cmd->add_option("--out", lt_out, "output file (default stdout)");

    try {
        app.parse(argc, argv);
        if (run_cmd->parsed()) return cmd_run(run_config, run_capture);
        if (gen_cmd->parsed()) return cmd_gen_task({}, gen_capture, gen_out);
        if (diag_cmd->parsed())
            return cmd_diagnose({}, diag_capture, diag_index, diag_out);
        if (lt_cmd->parsed())
            return cmd_lilliefors_table(lt_sizes, lt_alpha, lt_replicates, lt_out);
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const esnfb::DegenerateError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const esnfb::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const esnfb::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const esnfb::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
