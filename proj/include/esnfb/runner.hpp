#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "esnfb/analysis.hpp"
#include "esnfb/diagnostics.hpp"
#include "esnfb/errors.hpp"
#include "esnfb/feedback.hpp"
#include "esnfb/sampler.hpp"
#include "esnfb/tasks.hpp"

namespace esnfb {

using ordered_json = nlohmann::ordered_json;

/// Fully resolved experiment description. Defaults mirror the benchmark
/// protocol: 1000 training points after 500 startup steps, 500 test steps,
/// 100 gradient descent iterations.
struct ExperimentConfig {
    TaskKind task = TaskKind::mackey_glass;
    int nodes = 10;
    int members = 200;
    bool feedback = false;
    GdConfig gd{};  ///< gd.eta <= 0 resolves to the per-task default
    Windows windows{500, 1000, 500};
    int max_lag = 30;
    std::uint64_t seed = 0;
    std::string output_dir;
    int threads = 0;  ///< 0 = hardware concurrency
    int hist_bins = 30;
    std::string ced_file;
    CedColumns ced_columns{};
    bool ced_allow_length = false;
    double ced_lr_s_base = 0.0012;     ///< mixing-weight rate without feedback
    double ced_lr_s_feedback = 0.001;  ///< mixing-weight rate with feedback

    static double default_eta(TaskKind task) {
        switch (task) {
            case TaskKind::mackey_glass: return 25.0;
            case TaskKind::channel_eq: return 10.0;
            case TaskKind::ced: return 27.0;
        }
        return 1.0;
    }

    void resolve() {
        if (!(gd.eta > 0.0)) gd.eta = default_eta(task);
        if (members < 1) throw UsageError("config: members must be >= 1");
        if (nodes < 1) throw UsageError("config: nodes must be >= 1");
        if (task != TaskKind::ced) windows.validate();
        if (task == TaskKind::ced && ced_file.empty())
            throw DataError("config: the CED task requires a data file");
    }

    SamplerSpec sampler_spec() const {
        SamplerSpec spec;
        spec.n = nodes;
        spec.seed = seed;
        return spec;
    }
};

// ---------------------------------------------------------------------------
// Config file + overrides
// ---------------------------------------------------------------------------

inline TaskKind parse_task(const std::string& value) {
    if (value == "mg" || value == "mackey-glass" || value == "mackey_glass")
        return TaskKind::mackey_glass;
    if (value == "ce" || value == "channel-eq" || value == "channel_eq")
        return TaskKind::channel_eq;
    if (value == "ced") return TaskKind::ced;
    throw UsageError("unknown task '" + value + "' (expected mg, ce or ced)");
}

namespace detail {

inline bool parse_bool(const std::string& value) {
    if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
    if (value == "0" || value == "false" || value == "off" || value == "no") return false;
    throw UsageError("expected a boolean, got '" + value + "'");
}

template <typename T>
T parse_number(const std::string& value) {
    T out{};
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || p != value.data() + value.size())
        throw UsageError("expected a number, got '" + value + "'");
    return out;
}

}  // namespace detail

/// Applies one key=value pair; both the config file and CLI overrides go
/// through here so precedence is simply application order.
inline void apply_config_key(ExperimentConfig& config, const std::string& key,
                             const std::string& value) {
    if (key == "task") config.task = parse_task(value);
    else if (key == "nodes") config.nodes = detail::parse_number<int>(value);
    else if (key == "members") config.members = detail::parse_number<int>(value);
    else if (key == "feedback") config.feedback = detail::parse_bool(value);
    else if (key == "eta") config.gd.eta = detail::parse_number<double>(value);
    else if (key == "gd_steps") config.gd.steps = detail::parse_number<int>(value);
    else if (key == "eps_a") config.gd.eps_a = detail::parse_number<double>(value);
    else if (key == "keep_best") config.gd.keep_best = detail::parse_bool(value);
    else if (key == "alpha_init") config.gd.alpha_init = detail::parse_bool(value);
    else if (key == "seed") config.seed = detail::parse_number<std::uint64_t>(value);
    else if (key == "warmup") config.windows.warmup = detail::parse_number<int>(value);
    else if (key == "train") config.windows.train = detail::parse_number<int>(value);
    else if (key == "test") config.windows.test = detail::parse_number<int>(value);
    else if (key == "max_lag") config.max_lag = detail::parse_number<int>(value);
    else if (key == "threads") config.threads = detail::parse_number<int>(value);
    else if (key == "hist_bins") config.hist_bins = detail::parse_number<int>(value);
    else if (key == "out") config.output_dir = value;
    else if (key == "ced_file") config.ced_file = value;
    else if (key == "ced_input_col") config.ced_columns.input = value;
    else if (key == "ced_target_col") config.ced_columns.target = value;
    else if (key == "ced_allow_length") config.ced_allow_length = detail::parse_bool(value);
    else if (key == "ced_lr_s") config.ced_lr_s_base = detail::parse_number<double>(value);
    else if (key == "ced_lr_s_feedback") config.ced_lr_s_feedback = detail::parse_number<double>(value);
    else throw UsageError("unknown config key '" + key + "'");
}

/// Flat key = value file; '#' starts a comment, blank lines are skipped.
inline void load_config_file(ExperimentConfig& config, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open config file");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError(path + ": line " + std::to_string(lineno) +
                            ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        try {
            apply_config_key(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const UsageError& err) {
            throw DataError(path + ": line " + std::to_string(lineno) + ": " +
                            err.what());
        }
    }
}

// ---------------------------------------------------------------------------
// Per-member results
// ---------------------------------------------------------------------------

struct MemberMetrics {
    double train_nmse = 0.0;
    double test_nmse = 0.0;
    long test_errors = -1;  ///< channel task only
    double s_min = 0.0;
};

struct CedMemberStats {
    double s = 0.0;
    double r1 = 0.0;
    double input_corr = 0.0;
    bool lilliefors_pass = false;
};

struct MemberOutcome {
    int index = 0;
    std::uint64_t esn_seed = 0;
    bool failed = false;
    std::string error;
    MemberMetrics base;
    std::optional<MemberMetrics> with_feedback;
    GradientCertificate certificate;
    GdHistory history;
    int best_index = 0;
    std::optional<CedMemberStats> ced_base;
    std::optional<CedMemberStats> ced_feedback;
    // Representative residual detail (member 0 of CED runs only).
    std::optional<std::pair<ResidualReport, ResidualReport>> residual_detail;
    VectorXd detail_targets, detail_base_pred, detail_fb_pred;
};

struct ExperimentResult {
    EnsembleSummary base;
    std::optional<EnsembleSummary> with_feedback;
    int failures = 0;
    double reduction_pct = 0.0;
    std::vector<MemberOutcome> members;
};

namespace detail {

inline double member_metric(TaskKind task, const MemberMetrics& m) {
    return task == TaskKind::channel_eq ? static_cast<double>(m.test_errors)
                                        : m.test_nmse;
}

inline MemberMetrics evaluate_windows(const EsnParams& params,
                                      const FeedbackVector& v,
                                      const ReadoutSolution& sol,
                                      const TaskDataset& ds,
                                      Trajectory* traj_out = nullptr) {
    Trajectory traj =
        ds.kind == TaskKind::ced
            ? ced_run(params, v, ds, 0.0)
            : run(params, v, ds.inputs.head(ds.windows.total()),
                  initial_state(params), ds.windows);
    MemberMetrics metrics;
    metrics.train_nmse = sol.nmse_train;
    metrics.s_min = sol.s_min;
    const VectorXd test_pred = predict(sol, traj.test_states());
    metrics.test_nmse = nmse(test_pred, ds.test_targets());
    if (ds.kind == TaskKind::channel_eq)
        metrics.test_errors = symbol_errors(ds.test_targets(), test_pred);
    if (traj_out) *traj_out = std::move(traj);
    return metrics;
}

inline MemberOutcome run_member_generated(const ExperimentConfig& config,
                                          const TaskDataset& shared_mg, int index) {
    MemberOutcome out;
    out.index = index;
    out.esn_seed = derive_seed(config.seed, index);
    const EsnParams params = sample_esn(config.sampler_spec(), index);

    TaskDataset local;
    const TaskDataset& ds =
        config.task == TaskKind::mackey_glass
            ? shared_mg
            : (local = channel_equalization(config.windows,
                                            derive_seed(config.seed, index, 1)),
               local);

    // No-feedback baseline.
    const FeedbackVector v0 = zero_feedback(params);
    Trajectory traj = run(params, v0, ds.inputs.head(ds.windows.total()),
                          initial_state(params), ds.windows);
    const ReadoutSolution sol = solve(accumulate(traj.train_states(), ds.train_targets()));
    out.base.train_nmse = sol.nmse_train;
    out.base.s_min = sol.s_min;
    const VectorXd base_pred = predict(sol, traj.test_states());
    out.base.test_nmse = nmse(base_pred, ds.test_targets());
    if (ds.kind == TaskKind::channel_eq)
        out.base.test_errors = symbol_errors(ds.test_targets(), base_pred);

    sensitivities(params, v0, traj);
    out.certificate = certificate(traj, sol, ds.train_targets());

    if (config.feedback) {
        const OptimizeResult opt = optimize(params, ds, config.gd);
        out.with_feedback =
            evaluate_windows(params, opt.v, opt.solution, ds);
        out.history = opt.history;
        out.best_index = opt.best_index;
    }
    return out;
}

inline CedMemberStats ced_stats(const TaskDataset& ds, double s,
                                const Trajectory& traj, const ReadoutSolution& sol,
                                int max_lag, ResidualReport* report_out) {
    const VectorXd pred = predict(sol, traj.test_states());
    const VectorXd residuals = ds.test_targets() - pred;
    const VectorXd test_inputs =
        ds.inputs.segment(ds.windows.warmup + ds.windows.train, ds.windows.test);
    const ResidualReport report = residual_report(residuals, test_inputs, max_lag);
    CedMemberStats stats;
    stats.s = s;
    stats.r1 = report.autocorr(0);
    stats.input_corr = report.input_corr;
    stats.lilliefors_pass = report.lilliefors_pass;
    if (report_out) *report_out = report;
    return stats;
}

inline MemberOutcome run_member_ced(const ExperimentConfig& config,
                                    const TaskDataset& ds, int index) {
    MemberOutcome out;
    out.index = index;
    out.esn_seed = derive_seed(config.seed, index);
    const EsnParams params = sample_esn(config.sampler_spec(), index);
    const bool detail = index == 0;

    // Base model: mixing weight optimized, no state feedback.
    const FeedbackVector v0 = zero_feedback(params);
    const MixingParam mix =
        optimize_mixing(params, ds, v0, config.ced_lr_s_base, config.gd.steps);
    Evaluation base_ev = evaluate_ced(params, v0, ds, mix.s);
    out.base.train_nmse = base_ev.sol.nmse_train;
    out.base.s_min = base_ev.sol.s_min;
    const VectorXd base_pred = predict(base_ev.sol, base_ev.traj.test_states());
    out.base.test_nmse = nmse(base_pred, ds.test_targets());

    ResidualReport base_report;
    out.ced_base = ced_stats(ds, mix.s, base_ev.traj, base_ev.sol, config.max_lag,
                             detail ? &base_report : nullptr);

    sensitivities(params, v0, base_ev.traj);
    out.certificate = certificate(base_ev.traj, base_ev.sol, ds.train_targets());

    if (config.feedback) {
        CedGdConfig joint;
        joint.eta_v = config.gd.eta;
        joint.lr_s = config.ced_lr_s_feedback;
        joint.steps = config.gd.steps;
        joint.eps_a = config.gd.eps_a;
        const CedFitResult fit = optimize_ced(params, ds, joint);
        Evaluation fb_ev = evaluate_ced(params, fit.v, ds, fit.s);

        MemberMetrics fb;
        fb.train_nmse = fit.solution.nmse_train;
        fb.s_min = fit.solution.s_min;
        const VectorXd fb_pred = predict(fit.solution, fb_ev.traj.test_states());
        fb.test_nmse = nmse(fb_pred, ds.test_targets());
        out.with_feedback = fb;
        out.history = fit.history;

        ResidualReport fb_report;
        out.ced_feedback = ced_stats(ds, fit.s, fb_ev.traj, fit.solution,
                                     config.max_lag, detail ? &fb_report : nullptr);
        if (detail) {
            out.residual_detail = {base_report, fb_report};
            out.detail_targets = ds.test_targets();
            out.detail_base_pred = base_pred;
            out.detail_fb_pred = fb_pred;
        }
    } else if (detail) {
        out.residual_detail = {base_report, base_report};
        out.detail_targets = ds.test_targets();
        out.detail_base_pred = base_pred;
        out.detail_fb_pred = base_pred;
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline ordered_json history_tail_json(const GdHistory& history, int best_index) {
    ordered_json tail = ordered_json::array();
    const std::size_t take = std::min<std::size_t>(history.size(), 5);
    for (std::size_t i = history.size() - take; i < history.size(); ++i) {
        const GdRecord& r = history[i];
        tail.push_back({{"s_min", r.s_min},
                        {"grad_norm", std::isfinite(r.grad_norm) ? ordered_json(r.grad_norm)
                                                                 : ordered_json()},
                        {"projected", r.projected},
                        {"sigma_max", r.sigma_max}});
    }
    return {{"iterates", history.size()}, {"best_index", best_index}, {"tail", tail}};
}

inline ordered_json member_json(TaskKind task, const MemberOutcome& out) {
    ordered_json j;
    j["index"] = out.index;
    j["esn_seed"] = out.esn_seed;
    j["status"] = out.failed ? "failed" : "ok";
    if (out.failed) {
        j["error"] = out.error;
        return j;
    }
    auto metrics_json = [&](const MemberMetrics& m) {
        ordered_json mj;
        mj["train_nmse"] = m.train_nmse;
        mj["s_min"] = m.s_min;
        mj["test_nmse"] = m.test_nmse;
        if (task == TaskKind::channel_eq) mj["test_errors"] = m.test_errors;
        return mj;
    };
    j["no_feedback"] = metrics_json(out.base);
    j["certificate"] = {{"grad_norm", out.certificate.grad_norm},
                        {"trace_m_par", out.certificate.trace_m_par},
                        {"m_par_rank", out.certificate.m_par_rank},
                        {"degenerate", out.certificate.degenerate}};
    if (out.ced_base) {
        j["no_feedback"]["s"] = out.ced_base->s;
        j["no_feedback"]["r1"] = out.ced_base->r1;
        j["no_feedback"]["input_corr"] = out.ced_base->input_corr;
        j["no_feedback"]["lilliefors_pass"] = out.ced_base->lilliefors_pass;
    }
    if (out.with_feedback) {
        j["feedback"] = metrics_json(*out.with_feedback);
        if (out.ced_feedback) {
            j["feedback"]["s"] = out.ced_feedback->s;
            j["feedback"]["r1"] = out.ced_feedback->r1;
            j["feedback"]["input_corr"] = out.ced_feedback->input_corr;
            j["feedback"]["lilliefors_pass"] = out.ced_feedback->lilliefors_pass;
        }
        j["gd"] = history_tail_json(out.history, out.best_index);
    }
    return j;
}

inline ordered_json config_echo(const ExperimentConfig& config,
                                const Windows& effective) {
    // Execution details (threads, output paths) are deliberately absent:
    // the summary must be byte-identical across thread counts and
    // directories.
    ordered_json j;
    j["task"] = task_name(config.task);
    j["nodes"] = config.nodes;
    j["members"] = config.members;
    j["feedback"] = config.feedback;
    j["eta"] = config.gd.eta;
    j["gd_steps"] = config.gd.steps;
    j["eps_a"] = config.gd.eps_a;
    j["keep_best"] = config.gd.keep_best;
    j["alpha_init"] = config.gd.alpha_init;
    j["seed"] = config.seed;
    j["warmup"] = effective.warmup;
    j["train"] = effective.train;
    j["test"] = effective.test;
    j["max_lag"] = config.max_lag;
    j["hist_bins"] = config.hist_bins;
    const SamplerSpec spec = config.sampler_spec();
    j["rho_min"] = spec.rho_min;
    j["rho_max"] = spec.rho_max;
    j["b_scale"] = spec.b_scale;
    if (config.task == TaskKind::ced) {
        j["ced_file"] = config.ced_file;
        j["ced_input_col"] = config.ced_columns.input;
        j["ced_target_col"] = config.ced_columns.target;
        j["ced_lr_s"] = config.ced_lr_s_base;
        j["ced_lr_s_feedback"] = config.ced_lr_s_feedback;
    }
    return j;
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    out << content;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

/// Runs the ensemble: sample ESN -> build dataset -> (optionally) optimize
/// feedback -> evaluate the test metric, in parallel over members. Failed
/// members are recorded and excluded; the run aborts only when more than
/// 1% of members fail. Output files (members.jsonl, histogram.csv,
/// summary.json, config.txt, CED residual tables) are written when
/// output_dir is set, and are byte-identical for any thread count.
inline ExperimentResult run_experiment(ExperimentConfig config) {
    config.resolve();

    TaskDataset shared;
    if (config.task == TaskKind::mackey_glass) {
        shared = mackey_glass(config.windows);
    } else if (config.task == TaskKind::ced) {
        shared = load_ced(config.ced_file, config.ced_columns, config.ced_allow_length);
        config.windows = shared.windows;
    }

    std::vector<MemberOutcome> outcomes(config.members);
    std::atomic<int> next{0};
    int thread_count = config.threads > 0
                           ? config.threads
                           : static_cast<int>(std::thread::hardware_concurrency());
    thread_count = std::clamp(thread_count, 1, config.members);

    auto worker = [&]() {
        for (;;) {
            const int index = next.fetch_add(1);
            if (index >= config.members) return;
            MemberOutcome out;
            try {
                out = config.task == TaskKind::ced
                          ? detail::run_member_ced(config, shared, index)
                          : detail::run_member_generated(config, shared, index);
            } catch (const std::exception& e) {
                out = MemberOutcome{};
                out.esn_seed = derive_seed(config.seed, index);
                out.failed = true;
                out.error = e.what();
            }
            out.index = index;
            outcomes[static_cast<std::size_t>(index)] = std::move(out);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(thread_count);
    for (int t = 0; t < thread_count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    ExperimentResult result;
    result.members = std::move(outcomes);

    std::vector<double> base_values, fb_values;
    std::vector<std::uint64_t> seeds;
    for (const MemberOutcome& out : result.members) {
        if (out.failed) {
            ++result.failures;
            continue;
        }
        base_values.push_back(detail::member_metric(config.task, out.base));
        seeds.push_back(out.esn_seed);
        if (out.with_feedback)
            fb_values.push_back(detail::member_metric(config.task, *out.with_feedback));
    }
    if (result.failures * 100 > config.members)
        throw NumericError("run_experiment: more than 1% of members failed (" +
                           std::to_string(result.failures) + "/" +
                           std::to_string(config.members) + ")");
    if (base_values.empty())
        throw NumericError("run_experiment: no successful members");

    // One shared edge set so the histogram rows align across variants.
    std::vector<double> all = base_values;
    all.insert(all.end(), fb_values.begin(), fb_values.end());
    const EnsembleSummary combined = summarize(all, config.hist_bins);
    result.base = summarize(base_values, combined.bin_edges);
    result.base.seeds = seeds;
    if (!fb_values.empty()) {
        result.with_feedback = summarize(fb_values, combined.bin_edges);
        result.with_feedback->seeds = seeds;
        result.reduction_pct =
            100.0 * (1.0 - result.with_feedback->mean / result.base.mean);
    }

    if (!config.output_dir.empty()) {
        namespace fs = std::filesystem;
        const fs::path dir(config.output_dir);
        fs::create_directories(dir);

        std::string members_text;
        for (const MemberOutcome& out : result.members)
            members_text += detail::member_json(config.task, out).dump() + "\n";
        detail::write_text_file(dir / "members.jsonl", members_text);

        std::string hist = fb_values.empty()
                               ? "bin_left,bin_right,count_no_feedback\n"
                               : "bin_left,bin_right,count_no_feedback,count_feedback\n";
        for (std::size_t b = 0; b + 1 < combined.bin_edges.size(); ++b) {
            hist += detail::format_double(combined.bin_edges[b]) + "," +
                    detail::format_double(combined.bin_edges[b + 1]) + "," +
                    std::to_string(result.base.counts[b]);
            if (!fb_values.empty())
                hist += "," + std::to_string(result.with_feedback->counts[b]);
            hist += "\n";
        }
        detail::write_text_file(dir / "histogram.csv", hist);

        const std::string metric_name =
            config.task == TaskKind::channel_eq ? "test_errors" : "test_nmse";
        ordered_json summary;
        summary["task"] = task_name(config.task);
        summary["metric"] = metric_name;
        summary["members"] = config.members;
        summary["failures"] = result.failures;
        summary["config"] = detail::config_echo(config, config.windows);
        summary["no_feedback"] = {{"mean", result.base.mean},
                                  {"std", result.base.stddev}};
        if (result.with_feedback) {
            summary["feedback"] = {{"mean", result.with_feedback->mean},
                                   {"std", result.with_feedback->stddev}};
            summary["reduction_pct"] = result.reduction_pct;
        }
        if (config.task == TaskKind::ced) {
            auto mean_of = [&](auto&& get) {
                double sum = 0.0;
                int count = 0;
                for (const MemberOutcome& out : result.members)
                    if (!out.failed && out.ced_base) {
                        sum += get(out);
                        ++count;
                    }
                return count ? sum / count : 0.0;
            };
            summary["residuals"] = {
                {"mean_r1_no_feedback",
                 mean_of([](const MemberOutcome& o) { return o.ced_base->r1; })},
                {"mean_input_corr_no_feedback",
                 mean_of([](const MemberOutcome& o) { return o.ced_base->input_corr; })}};
            if (config.feedback) {
                summary["residuals"]["mean_r1_feedback"] = mean_of(
                    [](const MemberOutcome& o) { return o.ced_feedback->r1; });
                summary["residuals"]["mean_input_corr_feedback"] = mean_of(
                    [](const MemberOutcome& o) { return o.ced_feedback->input_corr; });
            }
        }
        detail::write_text_file(dir / "summary.json", summary.dump(2) + "\n");

        // Full provenance, including execution details.
        std::string cfg_text;
        for (auto& [key, value] : detail::config_echo(config, config.windows).items())
            cfg_text += key + " = " +
                        (value.is_string() ? value.get<std::string>() : value.dump()) +
                        "\n";
        cfg_text += "threads = " + std::to_string(config.threads) + "\n";
        cfg_text += "out = " + config.output_dir + "\n";
        detail::write_text_file(dir / "config.txt", cfg_text);

        if (config.task == TaskKind::ced && !result.members.empty() &&
            result.members.front().residual_detail) {
            const MemberOutcome& m0 = result.members.front();
            std::string res = "variant,k,y,yhat,e\n";
            const int offset = config.windows.warmup + config.windows.train;
            auto emit = [&](const char* variant, const VectorXd& pred) {
                for (Eigen::Index k = 0; k < m0.detail_targets.size(); ++k) {
                    const double y = m0.detail_targets(k);
                    res += std::string(variant) + "," + std::to_string(offset + k) +
                           "," + detail::format_double(y) + "," +
                           detail::format_double(pred(k)) + "," +
                           detail::format_double(y - pred(k)) + "\n";
                }
            };
            emit("no_feedback", m0.detail_base_pred);
            if (config.feedback) emit("feedback", m0.detail_fb_pred);
            detail::write_text_file(dir / "residuals.csv", res);

            std::string ac = "variant,lag,r,ci95\n";
            auto emit_ac = [&](const char* variant, const ResidualReport& rep) {
                for (Eigen::Index lag = 0; lag < rep.autocorr.size(); ++lag)
                    ac += std::string(variant) + "," + std::to_string(lag + 1) + "," +
                          detail::format_double(rep.autocorr(lag)) + "," +
                          detail::format_double(rep.ci_95) + "\n";
            };
            emit_ac("no_feedback", m0.residual_detail->first);
            if (config.feedback) emit_ac("feedback", m0.residual_detail->second);
            detail::write_text_file(dir / "residual_autocorr.csv", ac);
        }
    }
    return result;
}

}  // namespace esnfb
