#pragma once

#include "error.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

/**
 * @file eval.hpp
 * @brief Error measures between percentage matrices, random baselines and rank agreement.
 *
 * All measures take cell-type by sample matrices in percent.
 */

namespace deconv {

namespace detail {

inline void check_same_shape(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DataError("percentage matrices differ in shape (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
    }
    if (a.size() == 0) {
        throw DataError("percentage matrices are empty");
    }
}

} // namespace detail

/// Mean absolute difference over all cell-types and samples.
inline double mad(const Matrix& p, const Matrix& p_hat) {
    detail::check_same_shape(p, p_hat);
    return (p - p_hat).cwiseAbs().mean();
}

/// Root of the mean squared difference.
inline double rmsd(const Matrix& p, const Matrix& p_hat) {
    detail::check_same_shape(p, p_hat);
    return std::sqrt((p - p_hat).array().square().mean());
}

inline double pearson(const Matrix& a, const Matrix& b) {
    detail::check_same_shape(a, b);
    const double ma = a.mean();
    const double mb = b.mean();
    const auto da = (a.array() - ma);
    const auto db = (b.array() - mb);
    const double saa = da.square().sum();
    const double sbb = db.square().sum();
    if (!(saa > 0) || !(sbb > 0)) {
        throw UndefinedCorrelationError("correlation undefined: a percentage matrix has zero variance");
    }
    return (da * db).sum() / std::sqrt(saa * sbb);
}

/// One minus the Pearson correlation of the vectorized matrices.
inline double r2d(const Matrix& p, const Matrix& p_hat) { return 1.0 - pearson(p, p_hat); }

enum class Metric { mad, rmsd, r2d };

inline std::string metric_name(Metric m) {
    switch (m) {
    case Metric::mad:
        return "mad";
    case Metric::rmsd:
        return "rmsd";
    case Metric::r2d:
        return "r2d";
    }
    return "?";
}

inline double metric_value(Metric m, const Matrix& p, const Matrix& p_hat) {
    switch (m) {
    case Metric::mad:
        return mad(p, p_hat);
    case Metric::rmsd:
        return rmsd(p, p_hat);
    case Metric::r2d:
        return r2d(p, p_hat);
    }
    return std::numeric_limits<double>::quiet_NaN();
}

inline constexpr std::size_t kDefaultBaselineDraws = 10000;

/**
 * Metric values of random concentration matrices against a fixed truth.
 * Each draw has its own RNG stream, so the values do not depend on the
 * number of workers.
 */
struct RandomBaseline {
    std::size_t draws = kDefaultBaselineDraws;
    std::uint64_t seed = 0;
    std::vector<double> mad;
    std::vector<double> rmsd;
    std::vector<double> r2d; ///< NaN where the correlation is undefined

    const std::vector<double>& values(Metric m) const {
        switch (m) {
        case Metric::mad:
            return mad;
        case Metric::rmsd:
            return rmsd;
        default:
            return r2d;
        }
    }
};

/// q x p matrix whose columns are iid Uniform(0,1) values divided by their sum, in percent.
inline Matrix random_percentages(Rng& rng, Eigen::Index q, Eigen::Index p) {
    Matrix out(q, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        double total = 0.0;
        for (Eigen::Index i = 0; i < q; ++i) {
            out(i, j) = rng.uniform_open();
            total += out(i, j);
        }
        out.col(j) *= 100.0 / total;
    }
    return out;
}

inline RandomBaseline sample_baseline(const Matrix& p_true, std::size_t draws = kDefaultBaselineDraws,
                                      std::uint64_t seed = 0, unsigned workers = 1) {
    if (draws < 1) {
        throw UsageError("random baseline needs at least one draw");
    }
    RandomBaseline b;
    b.draws = draws;
    b.seed = seed;
    b.mad.resize(draws);
    b.rmsd.resize(draws);
    b.r2d.resize(draws);
    parallel_for(draws, workers, [&](std::size_t d) {
        Rng rng = Rng::stream(seed, d);
        const Matrix p_hat = random_percentages(rng, p_true.rows(), p_true.cols());
        for (Eigen::Index j = 0; j < p_hat.cols(); ++j) {
            if (std::abs(p_hat.col(j).sum() - 100.0) > 1e-9 || (p_hat.col(j).array() < 0).any()) {
                throw std::logic_error("random baseline column left the simplex");
            }
        }
        b.mad[d] = mad(p_true, p_hat);
        b.rmsd[d] = rmsd(p_true, p_hat);
        try {
            b.r2d[d] = r2d(p_true, p_hat);
        } catch (const UndefinedCorrelationError&) {
            b.r2d[d] = std::numeric_limits<double>::quiet_NaN();
        }
    });
    return b;
}

/// max(#{s <= observed}, 1) / S; NaN samples never count.
inline double empirical_pvalue(const std::vector<double>& samples, double observed) {
    if (samples.empty()) {
        throw UsageError("empirical p-value needs at least one baseline sample");
    }
    const auto count = std::count_if(samples.begin(), samples.end(), [&](double s) { return s <= observed; });
    return static_cast<double>(std::max<std::ptrdiff_t>(count, 1)) / static_cast<double>(samples.size());
}

inline double empirical_pvalue(Metric m, double observed, const RandomBaseline& baseline) {
    return empirical_pvalue(baseline.values(m), observed);
}

struct EvalResult {
    double mad = 0.0;
    double rmsd = 0.0;
    double r2d = std::numeric_limits<double>::quiet_NaN();
    double p_mad = std::numeric_limits<double>::quiet_NaN();
    double p_rmsd = std::numeric_limits<double>::quiet_NaN();
    double p_r2d = std::numeric_limits<double>::quiet_NaN();
};

/// Measures of `p_hat` against `p`; p-values only when a baseline is given.
inline EvalResult evaluate(const Matrix& p, const Matrix& p_hat, const RandomBaseline* baseline = nullptr) {
    EvalResult r;
    r.mad = mad(p, p_hat);
    r.rmsd = rmsd(p, p_hat);
    try {
        r.r2d = r2d(p, p_hat);
    } catch (const UndefinedCorrelationError&) {
    }
    if (baseline) {
        r.p_mad = empirical_pvalue(Metric::mad, r.mad, *baseline);
        r.p_rmsd = empirical_pvalue(Metric::rmsd, r.rmsd, *baseline);
        if (!std::isnan(r.r2d)) {
            r.p_r2d = empirical_pvalue(Metric::r2d, r.r2d, *baseline);
        }
    }
    return r;
}

struct SampleQc {
    std::vector<double> sample_mad;
    std::vector<bool> flagged;
    double median = 0.0;
    double median_abs_dev = 0.0;
    double threshold = 0.0;
};

/// Per-column mAD; a column is flagged when its error exceeds median + k * MAD.
inline SampleQc per_sample_qc(const Matrix& p, const Matrix& p_hat, double k = 3.0) {
    detail::check_same_shape(p, p_hat);
    SampleQc out;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
        out.sample_mad.push_back((p.col(j) - p_hat.col(j)).cwiseAbs().mean());
    }
    out.flagged.assign(out.sample_mad.size(), false);
    out.median = median(out.sample_mad);
    std::vector<double> dev;
    for (double e : out.sample_mad) {
        dev.push_back(std::abs(e - out.median));
    }
    out.median_abs_dev = median(dev);
    out.threshold = out.median + k * out.median_abs_dev;
    if (out.sample_mad.size() < 2) {
        return out;
    }
    for (std::size_t j = 0; j < out.sample_mad.size(); ++j) {
        out.flagged[j] = out.sample_mad[j] > out.threshold;
    }
    return out;
}

struct KendallResult {
    double tau = 0.0; ///< tau-b
    double p_value = 1.0;
    std::int64_t s = 0; ///< concordant minus discordant pairs
};

namespace detail {

inline std::int64_t pairs(std::int64_t t) { return t * (t - 1) / 2; }

// Sum over runs of equal values in sorted `v` of f(run length).
template <class F>
std::int64_t tie_sum(const std::vector<double>& v, F f) {
    std::int64_t acc = 0;
    std::size_t i = 0;
    while (i < v.size()) {
        std::size_t j = i + 1;
        while (j < v.size() && v[j] == v[i]) {
            ++j;
        }
        acc += f(static_cast<std::int64_t>(j - i));
        i = j;
    }
    return acc;
}

// Merge sort counting strict inversions.
inline std::int64_t count_swaps(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) {
        return 0;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    std::int64_t swaps = count_swaps(v, buf, lo, mid) + count_swaps(v, buf, mid, hi);
    std::size_t a = lo, b = mid, k = lo;
    while (a < mid && b < hi) {
        if (v[b] < v[a]) {
            swaps += static_cast<std::int64_t>(mid - a);
            buf[k++] = v[b++];
        } else {
            buf[k++] = v[a++];
        }
    }
    while (a < mid) buf[k++] = v[a++];
    while (b < hi) buf[k++] = v[b++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return swaps;
}

struct KendallCounts {
    std::int64_t s = 0;
    std::int64_t n0 = 0;
    std::int64_t tx = 0; ///< pairs tied in x
    std::int64_t ty = 0; ///< pairs tied in y
};

// O(n log n) pair counting.
inline KendallCounts kendall_counts(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
    });
    KendallCounts c;
    c.n0 = pairs(static_cast<std::int64_t>(n));
    std::int64_t joint = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && x[order[j]] == x[order[i]]) {
            ++j;
        }
        c.tx += pairs(static_cast<std::int64_t>(j - i));
        std::size_t k = i;
        while (k < j) {
            std::size_t l = k + 1;
            while (l < j && y[order[l]] == y[order[k]]) {
                ++l;
            }
            joint += pairs(static_cast<std::int64_t>(l - k));
            k = l;
        }
        i = j;
    }
    std::vector<double> ys(n);
    for (std::size_t k = 0; k < n; ++k) {
        ys[k] = y[order[k]];
    }
    std::vector<double> buf(n);
    const std::int64_t swaps = count_swaps(ys, buf, 0, n);
    c.ty = tie_sum(ys, pairs);
    // concordant - discordant = n0 - tx - ty + joint - 2 * discordant
    c.s = c.n0 - c.tx - c.ty + joint - 2 * swaps;
    return c;
}

inline double tau_b(const KendallCounts& c) {
    return static_cast<double>(c.s) /
           std::sqrt(static_cast<double>(c.n0 - c.tx) * static_cast<double>(c.n0 - c.ty));
}

inline std::int64_t brute_s(const std::vector<double>& x, const std::vector<double>& y) {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            const double dx = x[j] - x[i];
            const double dy = y[j] - y[i];
            if (dx * dy > 0) ++s;
            if (dx * dy < 0) --s;
        }
    }
    return s;
}

} // namespace detail

/// Largest n for which the p-value is computed by full permutation.
inline constexpr std::size_t kKendallExactMaxN = 10;

/**
 * @brief Kendall's tau-b with a two-sided p-value.
 *
 * For n <= 10 the p-value is the fraction of distinct permutations of y whose
 * |S| is at least the observed |S|; beyond that the tie-corrected normal
 * approximation of S is used.
 */
inline KendallResult kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) {
        throw DataError("kendall_tau needs vectors of equal length");
    }
    if (x.size() < 2) {
        throw DataError("kendall_tau needs at least two observations");
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
            throw DataError("kendall_tau needs finite values");
        }
    }
    const auto c = detail::kendall_counts(x, y);
    if (c.tx == c.n0 || c.ty == c.n0) {
        throw UndefinedCorrelationError("kendall_tau undefined: a vector is constant");
    }
    KendallResult r;
    r.s = c.s;
    r.tau = detail::tau_b(c);

    const std::size_t n = x.size();
    const std::int64_t obs = c.s < 0 ? -c.s : c.s;
    if (n <= kKendallExactMaxN) {
        std::vector<double> perm = y;
        std::sort(perm.begin(), perm.end());
        std::int64_t total = 0;
        std::int64_t extreme = 0;
        do {
            const std::int64_t s = detail::brute_s(x, perm);
            ++total;
            if ((s < 0 ? -s : s) >= obs) {
                ++extreme;
            }
        } while (std::next_permutation(perm.begin(), perm.end()));
        r.p_value = static_cast<double>(extreme) / static_cast<double>(total);
        return r;
    }

    std::vector<double> xs = x;
    std::vector<double> ys = y;
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    auto v0f = [](std::int64_t t) { return t * (t - 1) * (2 * t + 5); };
    auto t1f = [](std::int64_t t) { return t * (t - 1); };
    auto t2f = [](std::int64_t t) { return t * (t - 1) * (t - 2); };
    const double nd = static_cast<double>(n);
    const double v0 = static_cast<double>(v0f(static_cast<std::int64_t>(n)));
    const double vx = static_cast<double>(detail::tie_sum(xs, v0f));
    const double vy = static_cast<double>(detail::tie_sum(ys, v0f));
    const double x1 = static_cast<double>(detail::tie_sum(xs, t1f));
    const double y1 = static_cast<double>(detail::tie_sum(ys, t1f));
    const double x2 = static_cast<double>(detail::tie_sum(xs, t2f));
    const double y2 = static_cast<double>(detail::tie_sum(ys, t2f));
    const double var = (v0 - vx - vy) / 18.0 + x1 * y1 / (2.0 * nd * (nd - 1.0)) +
                       x2 * y2 / (9.0 * nd * (nd - 1.0) * (nd - 2.0));
    r.p_value = var > 0 ? normal_two_sided_p(static_cast<double>(c.s) / std::sqrt(var)) : 1.0;
    return r;
}

} // namespace deconv
