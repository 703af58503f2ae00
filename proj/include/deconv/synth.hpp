#pragma once

#include "error.hpp"
#include "eval.hpp"
#include "filter.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "solver.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

/**
 * @file synth.hpp
 * @brief Synthetic references, concentrations and noisy mixtures with known truth.
 */

namespace deconv {

enum class NoiseKind { none, gaussian, laplacian, outlier };

/**
 * Additive noise on every mixture entry. `outlier` draws Gaussian noise of
 * scale `scale` and, for a `fraction` of entries, of scale `scale * multiplier`.
 */
struct NoiseModel {
    NoiseKind kind = NoiseKind::none;
    double scale = 0.0;
    double fraction = 0.0;
    double multiplier = 1.0;

    static NoiseModel none() { return {}; }
    static NoiseModel gaussian(double sigma) { return checked({NoiseKind::gaussian, sigma, 0.0, 1.0}); }
    static NoiseModel laplacian(double b) { return checked({NoiseKind::laplacian, b, 0.0, 1.0}); }
    static NoiseModel outlier(double sigma, double fraction, double multiplier) {
        return checked({NoiseKind::outlier, sigma, fraction, multiplier});
    }

    static NoiseModel checked(NoiseModel n) {
        if (n.kind != NoiseKind::none && !(n.scale > 0)) {
            throw UsageError("noise scale must be positive");
        }
        if (!(n.fraction >= 0 && n.fraction <= 1)) {
            throw UsageError("outlier fraction must lie in [0, 1]");
        }
        if (!(n.multiplier > 0)) {
            throw UsageError("outlier multiplier must be positive");
        }
        return n;
    }

    double draw(Rng& rng) const {
        switch (kind) {
        case NoiseKind::none:
            return 0.0;
        case NoiseKind::gaussian:
            return scale * rng.normal();
        case NoiseKind::laplacian:
            return rng.laplace(scale);
        case NoiseKind::outlier: {
            const bool hit = rng.uniform() < fraction;
            return (hit ? scale * multiplier : scale) * rng.normal();
        }
        }
        return 0.0;
    }
};

inline std::string noise_kind_name(NoiseKind k) {
    switch (k) {
    case NoiseKind::none:
        return "none";
    case NoiseKind::gaussian:
        return "gaussian";
    case NoiseKind::laplacian:
        return "laplacian";
    case NoiseKind::outlier:
        return "outlier";
    }
    return "?";
}

inline NoiseKind parse_noise_kind(const std::string& s) {
    if (s == "none") return NoiseKind::none;
    if (s == "gaussian") return NoiseKind::gaussian;
    if (s == "laplacian") return NoiseKind::laplacian;
    if (s == "outlier") return NoiseKind::outlier;
    throw UsageError("unknown noise model '" + s + "' (none|gaussian|laplacian|outlier)");
}

enum class ConcentrationScheme { uniform_simplex, fixed_design };

struct SynthSpec {
    std::size_t n_genes = 500;
    std::size_t n_types = 4;
    std::size_t n_samples = 10;
    std::size_t markers_per_type = 25;
    double expression_lo = 16.0;   ///< linear scale
    double expression_hi = 4096.0; ///< linear scale
    double leakage = 0.01;
    double background_jitter = 0.1;
    ConcentrationScheme scheme = ConcentrationScheme::uniform_simplex;
    Matrix fixed_design; ///< n_types x n_samples, used with fixed_design
    NoiseModel noise;
    double scq_scale = 1.0;
    double reference_perturbation_sigma = 0.0;

    void validate() const {
        if (n_types < 1 || n_samples < 1 || n_genes < 1) {
            throw UsageError("synthetic dataset needs at least one gene, cell-type and sample");
        }
        if (n_genes < n_types * markers_per_type) {
            throw UsageError("n_genes must be at least n_types * markers_per_type");
        }
        if (!(expression_lo > 0 && expression_lo < expression_hi)) {
            throw UsageError("expression range needs 0 < lo < hi");
        }
        if (!(leakage >= 0) || !(background_jitter >= 0 && background_jitter < 1)) {
            throw UsageError("leakage must be >= 0 and background jitter in [0, 1)");
        }
        if (!(scq_scale > 0)) {
            throw UsageError("scq_scale must be positive");
        }
        if (!(reference_perturbation_sigma >= 0)) {
            throw UsageError("reference perturbation sigma must be >= 0");
        }
        NoiseModel::checked(noise);
        if (scheme == ConcentrationScheme::fixed_design) {
            if (fixed_design.rows() != static_cast<Eigen::Index>(n_types) ||
                fixed_design.cols() != static_cast<Eigen::Index>(n_samples)) {
                throw UsageError("fixed design must be n_types x n_samples");
            }
            for (Eigen::Index j = 0; j < fixed_design.cols(); ++j) {
                if ((fixed_design.col(j).array() < 0).any() || std::abs(fixed_design.col(j).sum() - 1.0) > 1e-12) {
                    throw UsageError("fixed design columns must lie on the simplex");
                }
            }
        }
    }
};

struct SynthData {
    ExpressionMatrix g_true;
    ExpressionMatrix g_given;
    ConcentrationMatrix c_true;
    ExpressionMatrix m;
    double clamp_rate = 0.0; ///< fraction of mixture entries clamped to 0
};

inline Labels numbered_labels(const std::string& prefix, std::size_t n) {
    const int width = static_cast<int>(std::to_string(n).size());
    Labels out;
    out.reserve(n);
    char buf[64];
    for (std::size_t i = 0; i < n; ++i) {
        std::snprintf(buf, sizeof buf, "%s%0*zu", prefix.c_str(), width, i + 1);
        out.emplace_back(buf);
    }
    return out;
}

/**
 * @brief Draws one dataset.
 *
 * Type t owns genes [t*k, (t+1)*k) for k markers per type: a log-uniform value
 * in its own column and `leakage` times that value elsewhere. The remaining
 * genes share a log-uniform mean with a per-type jitter of up to
 * +-background_jitter. M = scq_scale * G C + noise, clamped at zero.
 */
inline SynthData generate(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto n = static_cast<Eigen::Index>(spec.n_genes);
    const auto q = static_cast<Eigen::Index>(spec.n_types);
    const auto p = static_cast<Eigen::Index>(spec.n_samples);
    const auto k = static_cast<Eigen::Index>(spec.markers_per_type);
    const double llo = std::log(spec.expression_lo);
    const double lhi = std::log(spec.expression_hi);

    Rng ref_rng = Rng::stream(seed, 0);
    Matrix g(n, q);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double base = std::exp(ref_rng.uniform(llo, lhi));
        if (i < q * k) {
            const Eigen::Index owner = i / k;
            for (Eigen::Index t = 0; t < q; ++t) {
                g(i, t) = t == owner ? base : spec.leakage * base;
            }
        } else {
            for (Eigen::Index t = 0; t < q; ++t) {
                g(i, t) = base * (1.0 + spec.background_jitter * ref_rng.uniform(-1.0, 1.0));
            }
        }
    }

    Matrix c(q, p);
    if (spec.scheme == ConcentrationScheme::fixed_design) {
        c = spec.fixed_design;
    } else {
        Rng conc_rng = Rng::stream(seed, 1);
        for (Eigen::Index j = 0; j < p; ++j) {
            double total = 0.0;
            for (Eigen::Index t = 0; t < q; ++t) {
                c(t, j) = conc_rng.uniform_open();
                total += c(t, j);
            }
            c.col(j) /= total;
        }
    }

    Matrix m = spec.scq_scale * (g * c);
    Rng noise_rng = Rng::stream(seed, 2);
    std::size_t clamped = 0;
    if (spec.noise.kind != NoiseKind::none) {
        for (Eigen::Index j = 0; j < p; ++j) {
            for (Eigen::Index i = 0; i < n; ++i) {
                m(i, j) += spec.noise.draw(noise_rng);
                if (m(i, j) < 0) {
                    m(i, j) = 0.0;
                    ++clamped;
                }
            }
        }
    }

    Matrix g_given = g;
    if (spec.reference_perturbation_sigma > 0) {
        Rng pert_rng = Rng::stream(seed, 3);
        for (Eigen::Index t = 0; t < q; ++t) {
            for (Eigen::Index i = 0; i < n; ++i) {
                g_given(i, t) *= std::exp(spec.reference_perturbation_sigma * pert_rng.normal());
            }
        }
    }

    const Labels genes = numbered_labels("gene", spec.n_genes);
    const Labels types = numbered_labels("type", spec.n_types);
    const Labels samples = numbered_labels("sample", spec.n_samples);
    return SynthData{ExpressionMatrix(genes, types, std::move(g)), ExpressionMatrix(genes, types, std::move(g_given)),
                     ConcentrationMatrix::from_values(types, samples, std::move(c)),
                     ExpressionMatrix(genes, samples, std::move(m)),
                     static_cast<double>(clamped) / static_cast<double>(n * p)};
}

struct ReplicateSet {
    ExpressionMatrix h;
    ReplicateGrouping grouping;
};

/**
 * Replicate profiles around a reference: `k` columns per cell-type, each
 * entry multiplied by exp(sigma * N(0, 1)).
 */
inline ReplicateSet make_replicates(const ExpressionMatrix& g, std::size_t k, double sigma, std::uint64_t seed) {
    if (k < 1) {
        throw UsageError("need at least one replicate per cell-type");
    }
    if (!(sigma >= 0)) {
        throw UsageError("replicate sigma must be >= 0");
    }
    Rng rng = Rng::stream(seed, 4);
    const auto n = static_cast<Eigen::Index>(g.n_rows());
    Matrix h(n, static_cast<Eigen::Index>(g.n_cols() * k));
    Labels cols;
    std::vector<std::pair<std::string, std::string>> map;
    for (std::size_t t = 0; t < g.n_cols(); ++t) {
        for (std::size_t r = 0; r < k; ++r) {
            const auto col = static_cast<Eigen::Index>(t * k + r);
            for (Eigen::Index i = 0; i < n; ++i) {
                h(i, col) = g.values()(i, static_cast<Eigen::Index>(t)) * std::exp(sigma * rng.normal());
            }
            cols.push_back(g.col_labels()[t] + "_r" + std::to_string(r + 1));
            map.emplace_back(cols.back(), g.col_labels()[t]);
        }
    }
    return {ExpressionMatrix(g.row_labels(), cols, std::move(h)), ReplicateGrouping(std::move(map), g.col_labels())};
}

/// Seed of trial `t` in a battery started from `seed`.
inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t t) {
    return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(t) + 1));
}

/// Deconvolves every sample of `data.m` against `data.g_given`, optionally after per-sample violation filtering.
inline Matrix deconvolve_dataset(const ExpressionMatrix& g, const ExpressionMatrix& m, const DeconvolutionConfig& config,
                                 bool sto_filter = false) {
    std::optional<StoFilterResult> filt;
    if (sto_filter) {
        filt = sto_violation_filter(g, m, FilterScope::per_sample);
    }
    Matrix c(static_cast<Eigen::Index>(g.n_cols()), static_cast<Eigen::Index>(m.n_cols()));
    for (std::size_t j = 0; j < m.n_cols(); ++j) {
        const auto col = static_cast<Eigen::Index>(j);
        if (filt) {
            const auto idx = mask_indices(filt->mask_for(j));
            Matrix gs(static_cast<Eigen::Index>(idx.size()), g.values().cols());
            Vector ms(static_cast<Eigen::Index>(idx.size()));
            for (std::size_t r = 0; r < idx.size(); ++r) {
                gs.row(static_cast<Eigen::Index>(r)) = g.values().row(static_cast<Eigen::Index>(idx[r]));
                ms(static_cast<Eigen::Index>(r)) = m.values()(static_cast<Eigen::Index>(idx[r]), col);
            }
            c.col(col) = deconvolve_sample(gs, ms, config).coefficients;
        } else {
            c.col(col) = deconvolve_sample(g.values(), m.values().col(col), config).coefficients;
        }
    }
    return c;
}

struct MetricSummary {
    double mean = 0.0;
    double stdev = 0.0; ///< sample standard deviation (0 for one trial)
};

struct BatteryRow {
    MetricSummary mad;
    MetricSummary rmsd;
    MetricSummary r2d;
    std::vector<double> trial_mad; ///< per trial, in trial order
    std::size_t failures = 0;      ///< trials whose solve failed (excluded from the summaries)
};

namespace detail {

inline MetricSummary summarize(const std::vector<double>& v) {
    MetricSummary s;
    std::size_t n = 0;
    for (double x : v) {
        if (!std::isnan(x)) {
            s.mean += x;
            ++n;
        }
    }
    if (n == 0) {
        s.mean = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    s.mean /= static_cast<double>(n);
    if (n > 1) {
        double acc = 0.0;
        for (double x : v) {
            if (!std::isnan(x)) {
                acc += (x - s.mean) * (x - s.mean);
            }
        }
        s.stdev = std::sqrt(acc / static_cast<double>(n - 1));
    }
    return s;
}

} // namespace detail

/**
 * @brief Runs generate + deconvolve + evaluate for every trial and config.
 *
 * Trial t uses trial_seed(seed, t); results are gathered per trial slot, so
 * they do not depend on `workers`.
 */
inline std::vector<BatteryRow> trial_battery(const SynthSpec& spec, std::size_t trials,
                                             const std::vector<DeconvolutionConfig>& configs, std::uint64_t seed,
                                             bool sto_filter = false, unsigned workers = 1) {
    if (trials < 1) {
        throw UsageError("trial battery needs at least one trial");
    }
    const std::size_t nc = configs.size();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> mads(trials * nc, nan), rmsds(trials * nc, nan), r2ds(trials * nc, nan);
    parallel_for(trials, workers, [&](std::size_t t) {
        const SynthData data = generate(spec, trial_seed(seed, t));
        const Matrix truth = 100.0 * data.c_true.values;
        for (std::size_t k = 0; k < nc; ++k) {
            Matrix c;
            try {
                c = deconvolve_dataset(data.g_given, data.m, configs[k], sto_filter);
            } catch (const Error&) {
                continue;
            }
            const EvalResult e = evaluate(truth, 100.0 * c);
            mads[t * nc + k] = e.mad;
            rmsds[t * nc + k] = e.rmsd;
            r2ds[t * nc + k] = e.r2d;
        }
    });
    std::vector<BatteryRow> out(nc);
    for (std::size_t k = 0; k < nc; ++k) {
        std::vector<double> a, b, r;
        for (std::size_t t = 0; t < trials; ++t) {
            a.push_back(mads[t * nc + k]);
            b.push_back(rmsds[t * nc + k]);
            r.push_back(r2ds[t * nc + k]);
            if (std::isnan(mads[t * nc + k])) {
                ++out[k].failures;
            }
        }
        out[k].mad = detail::summarize(a);
        out[k].rmsd = detail::summarize(b);
        out[k].r2d = detail::summarize(r);
        out[k].trial_mad = std::move(a);
    }
    return out;
}

} // namespace deconv
