#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "esnfb/errors.hpp"
#include "esnfb/random.hpp"

namespace esnfb {

using Eigen::VectorXd;

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }

namespace detail {

/// Inverse standard normal CDF: Acklam's rational approximation refined by
/// one Halley step, good to ~1e-15 over (0, 1).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw UsageError("normal_quantile: p must be in (0, 1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        double q = p - 0.5;
        double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

inline double population_mean(const Eigen::Ref<const VectorXd>& v) {
    return v.mean();
}

inline double population_var(const Eigen::Ref<const VectorXd>& v, double mean) {
    return (v.array() - mean).square().sum() / static_cast<double>(v.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Residual statistics
// ---------------------------------------------------------------------------

/// Residual autocorrelations
///   R_k = 1/(N-1) * sum_{j=0}^{N-k-1} (e_j - mean)(e_{j+k} - mean) / var,
/// for k = 1..max_lag, with the 95% white-noise band 1.96/sqrt(N).
inline std::pair<VectorXd, double> autocorrelation(
    const Eigen::Ref<const VectorXd>& e, int max_lag) {
    const int N = static_cast<int>(e.size());
    if (max_lag < 1) throw UsageError("autocorrelation: max_lag must be >= 1");
    if (N <= max_lag + 1) throw UsageError("autocorrelation: sequence too short");
    const double mean = detail::population_mean(e);
    const double var = detail::population_var(e, mean);
    if (var <= 0.0) throw DegenerateError("autocorrelation: zero residual variance");

    VectorXd centered = e.array() - mean;
    VectorXd r(max_lag);
    for (int k = 1; k <= max_lag; ++k) {
        double sum = 0.0;
        for (int j = 0; j + k < N; ++j) sum += centered(j) * centered(j + k);
        r(k - 1) = sum / (static_cast<double>(N - 1) * var);
    }
    return {std::move(r), 1.96 / std::sqrt(static_cast<double>(N))};
}

/// Pearson correlation between residuals and the input over the same
/// window; compare against +-1.96/sqrt(N).
inline double input_correlation(const Eigen::Ref<const VectorXd>& e,
                                const Eigen::Ref<const VectorXd>& u) {
    if (e.size() != u.size()) throw UsageError("input_correlation: length mismatch");
    const double em = detail::population_mean(e);
    const double um = detail::population_mean(u);
    const double ev = detail::population_var(e, em);
    const double uv = detail::population_var(u, um);
    if (ev <= 0.0 || uv <= 0.0)
        throw DegenerateError("input_correlation: zero variance");
    const double cov = ((e.array() - em) * (u.array() - um)).sum() /
                       static_cast<double>(e.size());
    return cov / std::sqrt(ev * uv);
}

// ---------------------------------------------------------------------------
// Lilliefors normality test
// ---------------------------------------------------------------------------

/// KS distance between the empirical CDF of the standardized sample (both
/// moments estimated from the data, population convention) and the
/// standard normal CDF.
inline double lilliefors_statistic(const Eigen::Ref<const VectorXd>& e) {
    const int N = static_cast<int>(e.size());
    if (N < 5) throw UsageError("lilliefors_statistic: need at least 5 samples");
    const double mean = detail::population_mean(e);
    const double var = detail::population_var(e, mean);
    if (var <= 0.0) throw DegenerateError("lilliefors_statistic: zero variance");
    const double sd = std::sqrt(var);

    std::vector<double> z(N);
    for (int i = 0; i < N; ++i) z[i] = (e(i) - mean) / sd;
    std::sort(z.begin(), z.end());
    double d = 0.0;
    for (int i = 0; i < N; ++i) {
        const double cdf = normal_cdf(z[i]);
        d = std::max(d, static_cast<double>(i + 1) / N - cdf);
        d = std::max(d, cdf - static_cast<double>(i) / N);
    }
    return d;
}

inline constexpr std::uint64_t kLillieforsTableSeed = 0x4C494C4C49454653ULL;
inline constexpr int kLillieforsReplicates = 10000;

/// Critical value of the Lilliefors statistic from a seeded Monte-Carlo
/// null table (10^4 replicates per sample size, memoized). Deterministic:
/// regeneration reproduces the same values.
inline double lilliefors_critical(int n, double alpha = 0.05,
                                  int replicates = kLillieforsReplicates,
                                  std::uint64_t seed = kLillieforsTableSeed) {
    if (n < 5) throw UsageError("lilliefors_critical: need n >= 5");
    if (!(alpha > 0.0 && alpha < 1.0))
        throw UsageError("lilliefors_critical: alpha must be in (0, 1)");

    static std::mutex mutex;
    static std::map<std::tuple<int, double, int, std::uint64_t>, double> cache;
    const auto key = std::make_tuple(n, alpha, replicates, seed);
    {
        std::lock_guard<std::mutex> lock(mutex);
        if (auto it = cache.find(key); it != cache.end()) return it->second;
    }

    std::vector<double> stats(replicates);
    VectorXd sample(n);
    for (int r = 0; r < replicates; ++r) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r), n));
        for (int i = 0; i < n; ++i) sample(i) = rng.normal();
        stats[r] = lilliefors_statistic(sample);
    }
    std::sort(stats.begin(), stats.end());
    const int index = std::min<int>(
        replicates - 1,
        static_cast<int>(std::ceil((1.0 - alpha) * replicates)) - 1);
    const double critical = stats[std::max(index, 0)];

    std::lock_guard<std::mutex> lock(mutex);
    cache.emplace(key, critical);
    return critical;
}

/// Large-N asymptotic approximation of the alpha = 0.05 critical value,
/// kept as a cross-check of the Monte-Carlo table.
inline double lilliefors_critical_approx(int n) {
    return 0.886 / std::sqrt(static_cast<double>(n));
}

struct LillieforsResult {
    double statistic = 0.0;
    double critical = 0.0;
    bool pass = false;  ///< consistent with normality at the given level
};

inline LillieforsResult lilliefors(const Eigen::Ref<const VectorXd>& e,
                                   double alpha = 0.05) {
    LillieforsResult res;
    res.statistic = lilliefors_statistic(e);
    res.critical = lilliefors_critical(static_cast<int>(e.size()), alpha);
    res.pass = res.statistic < res.critical;
    return res;
}

// ---------------------------------------------------------------------------
// Q-Q data
// ---------------------------------------------------------------------------

/// Quantile pairs (theoretical, empirical) at plotting positions
/// (i - 0.5)/N. Both axes are standardized scores (zero mean, unit
/// population variance), so data whose shape matches the normal quantiles
/// falls exactly on the identity line and affine transforms of the sample
/// change nothing.
inline std::vector<std::pair<double, double>> qq_data(
    const Eigen::Ref<const VectorXd>& e) {
    const int N = static_cast<int>(e.size());
    if (N < 2) throw UsageError("qq_data: need at least two samples");

    std::vector<double> sorted(e.data(), e.data() + N);
    std::sort(sorted.begin(), sorted.end());
    const double mean = detail::population_mean(e);
    const double var = detail::population_var(e, mean);
    if (var <= 0.0) throw DegenerateError("qq_data: zero variance");
    const double sd = std::sqrt(var);

    VectorXd theo(N);
    for (int i = 0; i < N; ++i)
        theo(i) = detail::normal_quantile((i + 0.5) / N);
    const double tm = detail::population_mean(theo);
    const double tsd = std::sqrt(detail::population_var(theo, tm));

    std::vector<std::pair<double, double>> pairs(N);
    for (int i = 0; i < N; ++i)
        pairs[i] = {(theo(i) - tm) / tsd, (sorted[i] - mean) / sd};
    return pairs;
}

/// Residual diagnostics bundle for one fitted model.
struct ResidualReport {
    VectorXd residuals;
    VectorXd autocorr;   ///< R_1 .. R_max_lag
    double ci_95 = 0.0;  ///< white-noise band half-width 1.96/sqrt(N)
    double input_corr = 0.0;
    double lilliefors_stat = 0.0;
    bool lilliefors_pass = false;
    std::vector<std::pair<double, double>> qq_points;
};

inline ResidualReport residual_report(const Eigen::Ref<const VectorXd>& e,
                                      const Eigen::Ref<const VectorXd>& u,
                                      int max_lag) {
    ResidualReport report;
    report.residuals = e;
    auto [r, ci] = autocorrelation(e, max_lag);
    report.autocorr = std::move(r);
    report.ci_95 = ci;
    report.input_corr = input_correlation(e, u);
    const auto lf = lilliefors(e);
    report.lilliefors_stat = lf.statistic;
    report.lilliefors_pass = lf.pass;
    report.qq_points = qq_data(e);
    return report;
}

// ---------------------------------------------------------------------------
// Ensemble aggregation
// ---------------------------------------------------------------------------

/// Per-member metric values with a histogram and population moments.
struct EnsembleSummary {
    std::vector<double> values;
    std::vector<double> bin_edges;  ///< size bins+1
    std::vector<long> counts;
    double mean = 0.0;
    double stddev = 0.0;  ///< population convention
    std::vector<std::uint64_t> seeds;
};

/// Histogram + moments. With explicit edges, values outside the range are
/// clamped into the end bins so counts always sum to the value count.
inline EnsembleSummary summarize(std::vector<double> values,
                                 std::vector<double> bin_edges) {
    if (values.empty()) throw UsageError("summarize: no values");
    if (bin_edges.size() < 2 || !std::is_sorted(bin_edges.begin(), bin_edges.end()))
        throw UsageError("summarize: need at least two sorted bin edges");

    EnsembleSummary s;
    s.bin_edges = std::move(bin_edges);
    s.counts.assign(s.bin_edges.size() - 1, 0);
    const auto bins = static_cast<long>(s.counts.size());
    for (double v : values) {
        auto it = std::upper_bound(s.bin_edges.begin(), s.bin_edges.end(), v);
        long bin = static_cast<long>(it - s.bin_edges.begin()) - 1;
        bin = std::clamp(bin, 0L, bins - 1);
        ++s.counts[static_cast<std::size_t>(bin)];
    }

    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= n;
    double m2 = 0.0;
    for (double v : values) m2 += (v - mean) * (v - mean);
    s.mean = mean;
    s.stddev = std::sqrt(m2 / n);
    s.values = std::move(values);
    return s;
}

/// Equal-width automatic bins over the data range.
inline EnsembleSummary summarize(std::vector<double> values, int bins = 30) {
    if (values.empty()) throw UsageError("summarize: no values");
    if (bins < 1) throw UsageError("summarize: bins must be >= 1");
    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (lo == hi) {
        lo -= 0.5;
        hi += 0.5;
        bins = 1;
    }
    std::vector<double> edges(bins + 1);
    for (int i = 0; i <= bins; ++i)
        edges[i] = lo + (hi - lo) * static_cast<double>(i) / bins;
    return summarize(std::move(values), std::move(edges));
}

/// Merges two summaries over identical bin edges; moments combine by the
/// pairwise update so the result matches summarizing the concatenation.
inline EnsembleSummary merge(const EnsembleSummary& a, const EnsembleSummary& b) {
    if (a.bin_edges != b.bin_edges)
        throw UsageError("merge: summaries have different bin edges");
    EnsembleSummary out;
    out.bin_edges = a.bin_edges;
    out.counts.resize(a.counts.size());
    for (std::size_t i = 0; i < a.counts.size(); ++i)
        out.counts[i] = a.counts[i] + b.counts[i];

    const double na = static_cast<double>(a.values.size());
    const double nb = static_cast<double>(b.values.size());
    const double n = na + nb;
    const double delta = b.mean - a.mean;
    out.mean = a.mean + delta * nb / n;
    const double m2 = na * a.stddev * a.stddev + nb * b.stddev * b.stddev +
                      delta * delta * na * nb / n;
    out.stddev = std::sqrt(m2 / n);

    out.values = a.values;
    out.values.insert(out.values.end(), b.values.begin(), b.values.end());
    out.seeds = a.seeds;
    out.seeds.insert(out.seeds.end(), b.seeds.begin(), b.seeds.end());
    return out;
}

}  // namespace esnfb
