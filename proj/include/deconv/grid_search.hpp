#pragma once

#include "error.hpp"
#include "solver.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

/**
 * @file grid_search.hpp
 * @brief Exhaustive search over the Huber/epsilon parameter or the penalty weight.
 */

namespace deconv {

/// Decades 1e-7 ... 1e7 (15 values).
struct ParamGrid {
    std::vector<double> values;

    static ParamGrid decades(int lo_exp = -7, int hi_exp = 7) {
        ParamGrid g;
        for (int e = lo_exp; e <= hi_exp; ++e) {
            g.values.push_back(std::pow(10.0, e));
        }
        return g;
    }
};

enum class GridCriterion {
    oracle_mad,    ///< mAD in percentage points against known concentrations
    residual_rmsd, ///< RMSD of m - G c
};

enum class SearchTarget { loss_param, lambda };

struct GridSearchResult {
    SearchTarget target = SearchTarget::loss_param;
    double best_param = 0.0;
    std::size_t best_index = 0;
    std::vector<double> params;
    std::vector<double> scores; ///< +inf where the solve failed
    Solution best_solution;
};

inline SearchTarget search_target_for(const DeconvolutionConfig& config) {
    if (config.loss.has_param()) {
        return SearchTarget::loss_param;
    }
    if (config.regularizer.active()) {
        return SearchTarget::lambda;
    }
    throw UsageError("grid search needs a Huber/hinge loss or a regularizer weight to tune");
}

inline DeconvolutionConfig with_search_param(DeconvolutionConfig config, SearchTarget target, double value) {
    if (target == SearchTarget::loss_param) {
        config.loss = config.loss.with_param(value);
    } else {
        config.regularizer = config.regularizer.with_lambda(value);
    }
    return config;
}

/// Mean absolute percentage-point difference between two simplex vectors.
inline double sample_mad_percent(const Vector& c_hat, const Vector& c_true) {
    const Vector a = 100.0 * normalize_to_simplex(c_hat);
    const Vector b = 100.0 * normalize_to_simplex(c_true);
    return (a - b).cwiseAbs().mean();
}

inline double grid_score(const Matrix& g, const Vector& m, const Solution& s, GridCriterion criterion,
                         const Vector* c_true) {
    if (criterion == GridCriterion::oracle_mad) {
        return sample_mad_percent(s.coefficients, *c_true);
    }
    return residual_rmsd(g, m, s.coefficients);
}

/**
 * @brief Evaluates every grid value and returns the best under `criterion`.
 *
 * The tuned parameter defaults to search_target_for(config).
 * Ties go to the smaller parameter. Values whose solve fails score +inf; if
 * every value fails the last error is rethrown.
 */
inline GridSearchResult grid_search_param(const Matrix& g, const Vector& m, const DeconvolutionConfig& config,
                                          GridCriterion criterion, const std::optional<Vector>& c_true = std::nullopt,
                                          const ParamGrid& grid = ParamGrid::decades(),
                                          std::optional<SearchTarget> target = std::nullopt) {
    if (criterion == GridCriterion::oracle_mad && !c_true) {
        throw UsageError("oracle grid criterion requires true concentrations");
    }
    GridSearchResult out;
    out.target = target ? *target : search_target_for(config);
    out.params = grid.values;
    out.scores.assign(grid.values.size(), std::numeric_limits<double>::infinity());
    bool any = false;
    std::optional<Error> last_error;
    for (std::size_t k = 0; k < grid.values.size(); ++k) {
        try {
            const auto cfg = with_search_param(config, out.target, grid.values[k]);
            Solution s = deconvolve_sample(g, m, cfg);
            const double score = grid_score(g, m, s, criterion, c_true ? &*c_true : nullptr);
            out.scores[k] = score;
            if (!any || score < out.scores[out.best_index]) {
                out.best_index = k;
                out.best_solution = std::move(s);
                any = true;
            }
        } catch (const Error& e) {
            last_error = e;
        }
    }
    if (!any) {
        throw *last_error;
    }
    out.best_param = out.params[out.best_index];
    return out;
}

} // namespace deconv
