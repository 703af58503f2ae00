#pragma once

#include "model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

/**
 * @file qp.hpp
 * @brief Primal active-set solver for small convex QPs over the simplex family.
 *
 * Solves
 *
 *     minimize  0.5 x'Hx + c'x
 *     subject to x >= 0           (if `nonneg`)
 *                sum(x) = target  (if `sum_target` is set)
 *
 * from a feasible starting point. H must be symmetric positive definite on the
 * free subspace; callers add a small ridge when it is not.
 */

namespace deconv {

struct QpResult {
    Vector x;
    int iterations = 0;
    bool converged = false;
};

namespace detail {

// Equality-constrained Newton step on the free set: minimizes the model over
// directions p with p_W = 0 and (optionally) sum(p) = 0.
inline bool free_step(const Matrix& h, const Vector& grad, const std::vector<Eigen::Index>& free_idx, bool with_sum,
                      Vector& p, double& nu) {
    const auto nf = static_cast<Eigen::Index>(free_idx.size());
    p = Vector::Zero(grad.size());
    nu = 0.0;
    if (nf == 0) {
        return true;
    }
    Matrix hff(nf, nf);
    Vector gf(nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
        gf(a) = grad(free_idx[a]);
        for (Eigen::Index b = 0; b < nf; ++b) {
            hff(a, b) = h(free_idx[a], free_idx[b]);
        }
    }
    Eigen::LDLT<Matrix> ldlt(hff);
    if (ldlt.info() != Eigen::Success) {
        return false;
    }
    Vector z = ldlt.solve(-gf);
    if (with_sum) {
        Vector u = ldlt.solve(Vector::Ones(nf));
        const double denom = u.sum();
        if (!(std::abs(denom) > 0)) {
            return false;
        }
        nu = z.sum() / denom;
        z -= nu * u;
    }
    for (Eigen::Index a = 0; a < nf; ++a) {
        p(free_idx[a]) = z(a);
    }
    return z.allFinite();
}

} // namespace detail

/// Snaps a nearly feasible point back onto {x >= 0, sum(x) = target}.
inline void restore_feasibility(Vector& x, bool nonneg, std::optional<double> sum_target) {
    if (nonneg) {
        x = x.cwiseMax(0.0);
    }
    if (sum_target) {
        const double s = x.sum();
        if (nonneg && s > 0) {
            x *= *sum_target / s;
        } else {
            x.array() += (*sum_target - s) / static_cast<double>(x.size());
        }
    }
}

inline QpResult solve_simplex_qp(const Matrix& h, const Vector& c, bool nonneg, std::optional<double> sum_target,
                                 Vector x0, int max_iter = -1) {
    const Eigen::Index n = c.size();
    if (max_iter < 0) {
        max_iter = 50 * static_cast<int>(n) + 100;
    }
    QpResult out;
    out.x = std::move(x0);
    if (sum_target && std::abs(out.x.sum() - *sum_target) > 1e-9 * std::max(1.0, std::abs(*sum_target))) {
        // Re-centre onto the hyperplane; the solver needs a feasible start.
        if (nonneg) {
            out.x = Vector::Constant(n, *sum_target / static_cast<double>(n));
        } else {
            out.x.array() += (*sum_target - out.x.sum()) / static_cast<double>(n);
        }
    }

    std::vector<char> active(static_cast<std::size_t>(n), 0);
    if (nonneg) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (out.x(j) <= 0) {
                out.x(j) = 0;
                active[j] = 1;
            }
        }
    }

    const double scale = std::max({1.0, h.cwiseAbs().maxCoeff(), c.cwiseAbs().maxCoeff()});
    Vector p;
    double nu = 0;
    for (out.iterations = 0; out.iterations < max_iter; ++out.iterations) {
        std::vector<Eigen::Index> free_idx;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (!active[j]) {
                free_idx.push_back(j);
            }
        }
        const Vector grad = h * out.x + c;
        if (!detail::free_step(h, grad, free_idx, sum_target.has_value(), p, nu)) {
            return out;
        }

        const double step_norm = p.cwiseAbs().maxCoeff();
        if (step_norm <= 1e-14 * std::max(1.0, out.x.cwiseAbs().maxCoeff())) {
            // Stationary on the working set; check multipliers of active bounds.
            Eigen::Index worst = -1;
            double most_negative = -1e-12 * scale;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (active[j]) {
                    const double lambda = grad(j) + nu;
                    if (lambda < most_negative) {
                        most_negative = lambda;
                        worst = j;
                    }
                }
            }
            if (worst < 0) {
                out.converged = true;
                return out;
            }
            active[worst] = 0;
            continue;
        }

        double alpha = 1.0;
        Eigen::Index blocking = -1;
        if (nonneg) {
            for (auto j : free_idx) {
                if (p(j) < 0) {
                    const double a = -out.x(j) / p(j);
                    if (a < alpha) {
                        alpha = a;
                        blocking = j;
                    }
                }
            }
        }
        out.x += alpha * p;
        if (blocking >= 0) {
            out.x(blocking) = 0;
            active[blocking] = 1;
        }
        restore_feasibility(out.x, nonneg, sum_target);
    }
    return out;
}

} // namespace deconv
