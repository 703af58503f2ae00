#pragma once

#include "error.hpp"
#include "solver.hpp"

#include <Eigen/Dense>

#include <string>
#include <variant>
#include <vector>

/**
 * @file anls.hpp
 * @brief Full deconvolution by alternating non-negative regression.
 *
 * Alternates between per-sample updates of C (columns) and per-gene updates
 * of G (rows), each a non-negatively constrained regression under the chosen
 * loss. Every sub-problem is warm-started from the current factor and a new
 * column/row is kept only if it does not increase the objective, so the
 * recorded trace never increases.
 */

namespace deconv {

struct InitReference {
    Matrix g;
};

struct InitConcentrations {
    Matrix c;
};

using AnlsInit = std::variant<InitReference, InitConcentrations>;

struct AnlsTrace {
    /// Objective before the first update, then after every half-step.
    std::vector<double> objective;
    std::vector<std::string> events;
    int iterations = 0;
    bool converged = false;
    bool ridge_used = false;
};

struct AnlsResult {
    Matrix g;
    Matrix c;
    AnlsTrace trace;
};

inline double factorization_objective(const Matrix& m, const Matrix& g, const Matrix& c, const LossKind& loss) {
    const Matrix r = m - g * c;
    double f = 0;
    for (Eigen::Index j = 0; j < r.cols(); ++j) {
        for (Eigen::Index i = 0; i < r.rows(); ++i) {
            f += loss_value(loss, r(i, j));
        }
    }
    return f;
}

namespace detail {

// Column-wise non-negative update of `c` with design `g` against `m`.
inline void update_columns(const Matrix& m, const Matrix& g, Matrix& c, const LossKind& loss, const Regularizer& reg,
                           const SolverOptions& opts) {
    const ConstraintMode nn_only{Enforcement::explicit_, Enforcement::implicit};
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const Vector y = m.col(j);
        const Vector current = c.col(j);
        RegressionProblem p{g, y, loss, nn_only, reg};
        Solution s = solve_constrained(p, opts, current);
        const double before = objective_value(g, y, loss, Regularizer::none(), current);
        const double after = objective_value(g, y, loss, Regularizer::none(), s.coefficients);
        if (after <= before) {
            c.col(j) = s.coefficients;
        }
    }
}

inline bool rank_deficient(const Matrix& a) {
    Eigen::JacobiSVD<Matrix> svd(a);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0) {
        return true;
    }
    return !(sv(sv.size() - 1) > 1e-12 * sv(0));
}

} // namespace detail

/**
 * @brief Alternating minimization of loss(M - G C) with G, C >= 0.
 *
 * With an InitReference the first half-step updates C; with InitConcentrations
 * it updates G. Stops when the relative decrease over a full iteration drops
 * below `tol` or after `max_iters` iterations. A rank-deficient C during the G
 * update is regularized with a 1e-8 ridge and noted in the trace.
 *
 * A component whose row of C or column of G is entirely zero contributes
 * nothing to G C; it is re-seeded (G column from the largest positive residual
 * column, C row from ones) without changing the objective, and the restart is
 * noted in the trace.
 */
inline AnlsResult full_deconvolve_anls(const Matrix& m, const AnlsInit& init, const LossKind& loss, int max_iters = 500,
                                       double tol = 1e-10, const SolverOptions& opts = {}) {
    AnlsResult out;
    bool start_with_c = true;
    Eigen::Index q = 0;
    if (const auto* ir = std::get_if<InitReference>(&init)) {
        if (ir->g.rows() != m.rows()) {
            throw DataError("initial reference has a different number of genes than the mixture");
        }
        out.g = ir->g.cwiseMax(0.0);
        q = out.g.cols();
        out.c = Matrix::Constant(q, m.cols(), 1.0 / static_cast<double>(q));
    } else {
        const auto& ic = std::get<InitConcentrations>(init);
        if (ic.c.cols() != m.cols()) {
            throw DataError("initial concentrations have a different number of samples than the mixture");
        }
        out.c = ic.c.cwiseMax(0.0);
        q = out.c.rows();
        out.g = Matrix::Zero(m.rows(), q);
        start_with_c = false;
    }
    if (q < 1) {
        throw DataError("full deconvolution needs at least one cell-type");
    }
    if (q > m.cols()) {
        out.trace.events.push_back("more cell-types than samples: reference update is under-determined");
    }

    auto& trace = out.trace;
    trace.objective.push_back(factorization_objective(m, out.g, out.c, loss));

    const Matrix mt = m.transpose();
    // A half-step that raises the total through round-off is discarded.
    auto record = [&](Matrix& factor, const Matrix& previous) {
        const double f = factorization_objective(m, out.g, out.c, loss);
        if (f > trace.objective.back()) {
            factor = previous;
            trace.objective.push_back(trace.objective.back());
        } else {
            trace.objective.push_back(f);
        }
    };
    auto c_step = [&] {
        const Matrix previous = out.c;
        detail::update_columns(m, out.g, out.c, loss, Regularizer::none(), opts);
        record(out.c, previous);
    };
    auto g_step = [&] {
        Regularizer reg = Regularizer::none();
        if (detail::rank_deficient(out.c.transpose())) {
            reg = Regularizer::norm_two(1e-8);
            trace.ridge_used = true;
            trace.events.push_back("iteration " + std::to_string(trace.iterations) +
                                   ": concentration matrix rank-deficient, ridge 1e-8 applied");
        }
        const Matrix previous = out.g;
        Matrix gt = out.g.transpose();
        detail::update_columns(mt, out.c.transpose(), gt, loss, reg, opts);
        out.g = gt.transpose();
        record(out.g, previous);
    };
    auto revive = [&] {
        bool any = false;
        for (Eigen::Index k = 0; k < q; ++k) {
            const bool dead_c = out.c.row(k).maxCoeff() <= 0;
            const bool dead_g = out.g.col(k).maxCoeff() <= 0;
            if (!dead_c && !dead_g) continue;
            if (dead_c) {
                const Matrix r = (m - out.g * out.c).cwiseMax(0.0);
                Eigen::Index best = 0;
                r.colwise().squaredNorm().maxCoeff(&best);
                if (r.col(best).maxCoeff() <= 0) continue;
                out.g.col(k) = r.col(best);
            } else {
                out.c.row(k).setOnes();
            }
            any = true;
            trace.events.push_back("iteration " + std::to_string(trace.iterations) + ": component " +
                                   std::to_string(k + 1) + " collapsed and was re-seeded");
        }
        return any;
    };

    for (trace.iterations = 0; trace.iterations < max_iters;) {
        const double before = trace.objective.back();
        if (start_with_c) {
            c_step();
            g_step();
        } else {
            g_step();
            c_step();
        }
        ++trace.iterations;
        const double after = trace.objective.back();
        if (after > 0.0 && revive()) {
            continue;
        }
        if (after == 0.0 || before - after <= tol * before) {
            trace.converged = true;
            break;
        }
    }
    return out;
}

} // namespace deconv
