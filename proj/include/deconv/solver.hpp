#pragma once

#include "error.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "qp.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

/**
 * @file solver.hpp
 * @brief Constrained linear regression for per-sample deconvolution.
 *
 * Every problem has the form
 *
 *     minimize  sum_i loss(y_i - x_i'w) + regularizer(w)
 *
 * optionally subject to w >= 0 and/or sum(w) = 1 inside the optimizer
 * ("explicit" enforcement). Constraints marked "implicit" are applied after
 * optimization by clamping and rescaling (see enforce_implicit()).
 *
 * The optimizer is a projected Newton method: at each iterate the objective
 * is replaced by its second-order model and the model is minimized exactly
 * over the feasible set with solve_simplex_qp(), followed by a backtracking
 * line search. L2 and Huber losses are piecewise quadratic, so the model is
 * exact inside each residual pattern. Kinks of L1, epsilon-insensitive and
 * norm-1 terms are smoothed with a width that shrinks geometrically to
 * 1e-10 of the problem scale, so the final objective is within a negligible
 * margin of the true optimum.
 */

namespace deconv {

enum class Enforcement { implicit, explicit_ };

inline std::string enforcement_name(Enforcement e) { return e == Enforcement::implicit ? "implicit" : "explicit"; }

inline Enforcement parse_enforcement(const std::string& s) {
    if (s == "implicit") return Enforcement::implicit;
    if (s == "explicit") return Enforcement::explicit_;
    throw UsageError("unknown constraint mode '" + s + "' (expected implicit or explicit)");
}

struct ConstraintMode {
    Enforcement nn = Enforcement::explicit_;
    Enforcement sto = Enforcement::explicit_;

    bool operator==(const ConstraintMode&) const = default;
};

enum class RegularizerType { none, norm_two, norm_one, elastic_net, group_lasso };

/**
 * @brief Penalty on the coefficient vector.
 *
 * norm_two is lambda*||w||_2^2, norm_one is lambda*||w||_1, elastic_net is
 * lambda*(alpha*||w||_1 + (1-alpha)*||w||_2^2) and group_lasso is
 * lambda*sum_g ||w_g||_2 over a partition of the cell-types.
 */
struct Regularizer {
    RegularizerType type = RegularizerType::none;
    double lambda = 0.0;
    double alpha = 0.0;
    std::vector<std::vector<std::size_t>> groups;

    static Regularizer none() { return {}; }

    static Regularizer norm_two(double lambda) {
        check_lambda(lambda);
        return {RegularizerType::norm_two, lambda, 0.0, {}};
    }

    static Regularizer norm_one(double lambda) {
        check_lambda(lambda);
        return {RegularizerType::norm_one, lambda, 1.0, {}};
    }

    static Regularizer elastic_net(double lambda, double alpha) {
        check_lambda(lambda);
        if (!(alpha >= 0 && alpha <= 1)) {
            throw UsageError("elastic net mixing alpha must lie in [0, 1]");
        }
        return {RegularizerType::elastic_net, lambda, alpha, {}};
    }

    static Regularizer group_lasso(double lambda, std::vector<std::vector<std::size_t>> groups) {
        check_lambda(lambda);
        return {RegularizerType::group_lasso, lambda, 0.0, std::move(groups)};
    }

    /// Epsilon-SVR primal with linear kernel and no intercept, written in
    /// loss form: the norm-two weight is 1/(2C).
    static Regularizer svr(double cost) {
        if (!(cost > 0)) {
            throw UsageError("SVR cost C must be positive");
        }
        return norm_two(1.0 / (2.0 * cost));
    }

    Regularizer with_lambda(double l) const {
        Regularizer r = *this;
        check_lambda(l);
        r.lambda = l;
        return r;
    }

    bool active() const { return type != RegularizerType::none; }

    double l1_weight() const {
        switch (type) {
        case RegularizerType::norm_one:
            return lambda;
        case RegularizerType::elastic_net:
            return lambda * alpha;
        default:
            return 0.0;
        }
    }

    double l2_weight() const {
        switch (type) {
        case RegularizerType::norm_two:
            return lambda;
        case RegularizerType::elastic_net:
            return lambda * (1.0 - alpha);
        default:
            return 0.0;
        }
    }

    void validate(std::size_t n_coef) const {
        if (type != RegularizerType::group_lasso) {
            return;
        }
        std::vector<int> seen(n_coef, 0);
        for (const auto& g : groups) {
            for (auto j : g) {
                if (j >= n_coef) {
                    throw UsageError("group lasso group refers to a missing cell-type");
                }
                ++seen[j];
            }
        }
        for (auto s : seen) {
            if (s != 1) {
                throw UsageError("group lasso groups must partition the cell-types");
            }
        }
    }

    double value(const Vector& w) const {
        double v = l2_weight() * w.squaredNorm() + l1_weight() * w.lpNorm<1>();
        if (type == RegularizerType::group_lasso) {
            for (const auto& g : groups) {
                double s = 0;
                for (auto j : g) {
                    s += w(static_cast<Eigen::Index>(j)) * w(static_cast<Eigen::Index>(j));
                }
                v += lambda * std::sqrt(s);
            }
        }
        return v;
    }

private:
    static void check_lambda(double lambda) {
        if (!(lambda >= 0) || !std::isfinite(lambda)) {
            throw UsageError("regularization weight lambda must be finite and non-negative");
        }
    }
};

inline std::string regularizer_name(RegularizerType t) {
    switch (t) {
    case RegularizerType::none:
        return "none";
    case RegularizerType::norm_two:
        return "r2";
    case RegularizerType::norm_one:
        return "r1";
    case RegularizerType::elastic_net:
        return "elastic";
    case RegularizerType::group_lasso:
        return "group";
    }
    return "?";
}

inline RegularizerType parse_regularizer_type(const std::string& s) {
    if (s == "none") return RegularizerType::none;
    if (s == "r2" || s == "ridge" || s == "tikhonov") return RegularizerType::norm_two;
    if (s == "r1" || s == "lasso") return RegularizerType::norm_one;
    if (s == "elastic" || s == "elastic_net") return RegularizerType::elastic_net;
    if (s == "group" || s == "group_lasso") return RegularizerType::group_lasso;
    throw UsageError("unknown regularizer '" + s + "'");
}

struct SolverOptions {
    int max_iters = 10000;
    double rel_tol = 1e-9;
    double feas_tol = 1e-9;
    /// Final smoothing width relative to the problem scale.
    double smoothing_floor = 1e-10;
};

struct RegressionProblem {
    Matrix design;  ///< n' x q, rows are genes of the reference
    Vector target;  ///< n', the mixture sample
    LossKind loss = LossKind::squared();
    ConstraintMode constraints{};
    Regularizer regularizer{};
};

struct Solution {
    Vector coefficients;
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
    double residual_rmsd = 0.0;
};

inline double objective_value(const Matrix& x, const Vector& y, const LossKind& loss, const Regularizer& reg,
                              const Vector& w) {
    const Vector r = y - x * w;
    double f = 0;
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        f += loss_value(loss, r(i));
    }
    return f + reg.value(w);
}

inline double objective_value(const RegressionProblem& p, const Vector& w) {
    return objective_value(p.design, p.target, p.loss, p.regularizer, w);
}

inline double residual_rmsd(const Matrix& x, const Vector& y, const Vector& w) {
    if (y.size() == 0) {
        return 0.0;
    }
    return std::sqrt((y - x * w).squaredNorm() / static_cast<double>(y.size()));
}

namespace detail {

inline void check_shapes(const Matrix& x, const Vector& y) {
    if (x.rows() != y.size()) {
        throw DataError("design and target have different numbers of genes");
    }
    if (x.rows() < 1 || x.cols() < 1) {
        throw EmptyBasisError("regression problem has no genes or no cell-types");
    }
}

inline Solution finish(const Matrix& x, const Vector& y, const LossKind& loss, const Regularizer& reg, Vector w,
                       int iterations, bool converged) {
    Solution s;
    s.objective = objective_value(x, y, loss, reg, w);
    s.residual_rmsd = residual_rmsd(x, y, w);
    s.coefficients = std::move(w);
    s.iterations = iterations;
    s.converged = converged;
    return s;
}

// Smoothed objective with gradient and Hessian at w.
struct Model {
    double value = 0;
    Vector grad;
    Matrix hess;
};

inline Model smoothed_model(const Matrix& x, const Vector& y, const LossKind& loss, const Regularizer& reg,
                            const Vector& w, double gamma_r, double gamma_w) {
    const Eigen::Index q = w.size();
    Model m;
    m.grad = Vector::Zero(q);
    m.hess = Matrix::Zero(q, q);
    const Vector r = y - x * w;
    Vector d1(r.size());
    Vector d2(r.size());
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        const auto t = smoothed_loss(loss, r(i), gamma_r);
        m.value += t.value;
        d1(i) = t.d1;
        d2(i) = t.d2;
    }
    // d/dw loss(y - xw) = -x * loss'(r)
    m.grad.noalias() -= x.transpose() * d1;
    m.hess.noalias() += x.transpose() * d2.asDiagonal() * x;

    const double l2 = reg.l2_weight();
    if (l2 > 0) {
        m.value += l2 * w.squaredNorm();
        m.grad += 2.0 * l2 * w;
        m.hess.diagonal().array() += 2.0 * l2;
    }
    const double l1 = reg.l1_weight();
    if (l1 > 0) {
        const LossKind abs = LossKind::absolute();
        for (Eigen::Index j = 0; j < q; ++j) {
            const auto t = smoothed_loss(abs, w(j), gamma_w);
            m.value += l1 * t.value;
            m.grad(j) += l1 * t.d1;
            m.hess(j, j) += l1 * t.d2;
        }
    }
    if (reg.type == RegularizerType::group_lasso && reg.lambda > 0) {
        for (const auto& g : reg.groups) {
            double s = gamma_w * gamma_w;
            for (auto j : g) {
                s += w(static_cast<Eigen::Index>(j)) * w(static_cast<Eigen::Index>(j));
            }
            const double phi = std::sqrt(s);
            m.value += reg.lambda * (phi - gamma_w);
            for (auto a : g) {
                const auto ia = static_cast<Eigen::Index>(a);
                m.grad(ia) += reg.lambda * w(ia) / phi;
                for (auto b : g) {
                    const auto ib = static_cast<Eigen::Index>(b);
                    m.hess(ia, ib) += reg.lambda * ((a == b ? 1.0 / phi : 0.0) - w(ia) * w(ib) / (phi * phi * phi));
                }
            }
        }
    }
    return m;
}

inline double smoothed_value(const Matrix& x, const Vector& y, const LossKind& loss, const Regularizer& reg,
                             const Vector& w, double gamma_r, double gamma_w) {
    const Vector r = y - x * w;
    double f = 0;
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        f += smoothed_loss(loss, r(i), gamma_r).value;
    }
    f += reg.l2_weight() * w.squaredNorm();
    const double l1 = reg.l1_weight();
    if (l1 > 0) {
        const LossKind abs = LossKind::absolute();
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            f += l1 * smoothed_loss(abs, w(j), gamma_w).value;
        }
    }
    if (reg.type == RegularizerType::group_lasso && reg.lambda > 0) {
        for (const auto& g : reg.groups) {
            double s = gamma_w * gamma_w;
            for (auto j : g) {
                s += w(static_cast<Eigen::Index>(j)) * w(static_cast<Eigen::Index>(j));
            }
            f += reg.lambda * (std::sqrt(s) - gamma_w);
        }
    }
    return f;
}

struct StageResult {
    Vector w;
    int iterations = 0;
    bool converged = false;
};

// Projected Newton iterations for one smoothing width.
inline StageResult newton_stage(const Matrix& x, const Vector& y, const LossKind& loss, const Regularizer& reg,
                                Vector w, double gamma_r, double gamma_w, bool nonneg, bool sum_to_one,
                                double rel_tol, double f_floor, int budget) {
    StageResult out;
    const std::optional<double> target = sum_to_one ? std::optional<double>(1.0) : std::nullopt;
    int stalled = 0;
    for (out.iterations = 0; out.iterations < budget; ++out.iterations) {
        Model m = smoothed_model(x, y, loss, reg, w, gamma_r, gamma_w);
        const double tr = m.hess.trace() / static_cast<double>(w.size());
        const double ridge = std::max(1e-12 * std::abs(tr), 1e-14 * (1.0 + m.grad.cwiseAbs().maxCoeff()));
        m.hess.diagonal().array() += ridge;

        const Vector c = m.grad - m.hess * w;
        const QpResult qp = solve_simplex_qp(m.hess, c, nonneg, target, w);
        const Vector d = qp.x - w;
        const double slope = m.grad.dot(d);
        const double model_decrease = -(slope + 0.5 * d.dot(m.hess * d));
        const double tol = rel_tol * std::max(std::abs(m.value), f_floor);
        if (!(slope < 0) || model_decrease <= tol) {
            out.converged = true;
            break;
        }

        double alpha = 1.0;
        bool accepted = false;
        for (int k = 0; k < 80; ++k) {
            const Vector trial = w + alpha * d;
            const double ft = smoothed_value(x, y, loss, reg, trial, gamma_r, gamma_w);
            if (ft <= m.value + 1e-4 * alpha * slope) {
                w = trial;
                accepted = true;
                // Tiny widths leave a nearly singular model that can creep forever.
                stalled = m.value - ft <= tol ? stalled + 1 : 0;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            // No measurable decrease left at double precision.
            out.converged = true;
            break;
        }
        restore_feasibility(w, nonneg, target);
        if (stalled >= 5) {
            out.converged = true;
            break;
        }
    }
    out.w = std::move(w);
    return out;
}

} // namespace detail

/**
 * @brief Ordinary least squares via the normal equations.
 *
 * Throws IllConditionedError when X'X is numerically singular; the reported
 * estimate is the condition number of X'X.
 */
inline Solution solve_ols(const Matrix& x, const Vector& y) {
    detail::check_shapes(x, y);
    Eigen::JacobiSVD<Matrix> svd(x);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    const double smin = sv(sv.size() - 1);
    const double kappa_xtx = smin > 0 ? (smax / smin) * (smax / smin) : std::numeric_limits<double>::infinity();
    if (x.rows() < x.cols() || !(smin > 1e-8 * smax)) {
        throw IllConditionedError("X'X is singular or numerically ill-conditioned", kappa_xtx);
    }
    const Matrix xtx = x.transpose() * x;
    Vector w = xtx.ldlt().solve(x.transpose() * y);
    return detail::finish(x, y, LossKind::squared(), Regularizer::none(), std::move(w), 1, true);
}

inline Solution solve_ols(const RegressionProblem& p) { return solve_ols(p.design, p.target); }

/// Ridge regression closed form (X'X + lambda I)^-1 X'y.
inline Solution solve_ridge(const Matrix& x, const Vector& y, double lambda) {
    detail::check_shapes(x, y);
    if (!(lambda >= 0)) {
        throw UsageError("ridge lambda must be non-negative");
    }
    if (lambda == 0) {
        return solve_ols(x, y);
    }
    Matrix a = x.transpose() * x;
    a.diagonal().array() += lambda;
    Vector w = a.ldlt().solve(x.transpose() * y);
    return detail::finish(x, y, LossKind::squared(), Regularizer::norm_two(lambda), std::move(w), 1, true);
}

inline Solution solve_ridge(const RegressionProblem& p) {
    if (p.regularizer.type != RegularizerType::norm_two) {
        throw UsageError("solve_ridge requires a norm-two regularizer");
    }
    return solve_ridge(p.design, p.target, p.regularizer.lambda);
}

/**
 * @brief Minimizes the regularized loss with explicit constraints inside the optimizer.
 *
 * Only constraints flagged Explicit enter the optimization. Implicit flags are
 * ignored here; see deconvolve_sample() for the full pipeline.
 */
inline Solution solve_constrained(const RegressionProblem& p, const SolverOptions& opts = {},
                                  const std::optional<Vector>& warm_start = std::nullopt) {
    const Matrix& x = p.design;
    const Vector& y = p.target;
    detail::check_shapes(x, y);
    const Eigen::Index q = x.cols();
    p.regularizer.validate(static_cast<std::size_t>(q));

    const bool nonneg = p.constraints.nn == Enforcement::explicit_;
    const bool sum_to_one = p.constraints.sto == Enforcement::explicit_;
    const std::optional<double> target = sum_to_one ? std::optional<double>(1.0) : std::nullopt;

    // Feasible start.
    Vector w0 = sum_to_one ? Vector::Constant(q, 1.0 / static_cast<double>(q)) : Vector::Zero(q);
    if (warm_start && warm_start->size() == q) {
        Vector ws = *warm_start;
        if (nonneg) ws = ws.cwiseMax(0.0);
        if (sum_to_one) {
            const double s = ws.sum();
            if (nonneg ? s > 0 : std::abs(s) > 0) {
                ws /= s;
            } else {
                ws = w0;
            }
        }
        w0 = ws;
    }

    // Least-squares pass (with any norm-two weight). This is exact for L2
    // without non-smooth penalties and a warm start otherwise.
    Matrix h = 2.0 * x.transpose() * x;
    h.diagonal().array() += 2.0 * p.regularizer.l2_weight();
    const double h_scale = std::max(h.trace() / static_cast<double>(q), 1e-300);
    h.diagonal().array() += 1e-13 * h_scale;
    const Vector c = -2.0 * x.transpose() * y;
    const QpResult ls = solve_simplex_qp(h, c, nonneg, target, w0);
    Vector w = ls.x;
    int iterations = ls.iterations;

    const bool smooth_problem = p.loss.type == LossType::squared_l2 && p.regularizer.l1_weight() == 0 &&
                                p.regularizer.type != RegularizerType::group_lasso;
    if (smooth_problem) {
        // The quadratic is solved exactly by the active-set pass; polish with
        // one Newton stage in case the tiny ridge above shifted the optimum.
        auto st = detail::newton_stage(x, y, p.loss, p.regularizer, w, 0.0, 0.0, nonneg, sum_to_one, opts.rel_tol,
                                       1e-300, 20);
        return detail::finish(x, y, p.loss, p.regularizer, std::move(st.w), iterations + st.iterations, true);
    }

    // Problem scales for smoothing widths.
    const Vector r_ls = y - x * w;
    double scale_r = r_ls.cwiseAbs().mean();
    if (!(scale_r > 0)) {
        scale_r = std::max(y.cwiseAbs().maxCoeff(), 1.0) * 1e-6;
    }
    double scale_w = w.cwiseAbs().maxCoeff();
    if (!(scale_w > 0)) {
        scale_w = 1.0;
    }
    const double f_start = detail::smoothed_value(x, y, p.loss, p.regularizer, w, scale_r, scale_w);
    const double f_floor = std::max(1e-14 * f_start, 1e-300);

    // Continuation on the smoothing width; Huber with a small M is treated the
    // same way through an enlarged half-length in the early stages.
    const int stages = static_cast<int>(std::ceil(-std::log10(opts.smoothing_floor)));
    Vector best = w;
    double best_obj = objective_value(p, w);
    bool converged = false;
    for (int k = 0; k <= stages; ++k) {
        const double factor = std::pow(10.0, -k);
        const double gamma_r = scale_r * factor;
        const double gamma_w = scale_w * factor;
        LossKind stage_loss = p.loss;
        if (p.loss.type == LossType::huber) {
            stage_loss.param = std::max(p.loss.param, gamma_r);
        }
        const bool exact_huber = p.loss.type == LossType::huber && stage_loss.param == p.loss.param &&
                                 p.regularizer.l1_weight() == 0 && p.regularizer.type != RegularizerType::group_lasso;
        const bool last = k == stages || exact_huber;
        const int budget = opts.max_iters - iterations;
        if (budget <= 0) {
            break;
        }
        auto st = detail::newton_stage(x, y, stage_loss, p.regularizer, w, gamma_r, gamma_w, nonneg, sum_to_one,
                                       last ? opts.rel_tol : 1e-6, f_floor, budget);
        iterations += st.iterations;
        w = std::move(st.w);
        const double obj = objective_value(p, w);
        if (obj <= best_obj) {
            best_obj = obj;
            best = w;
        }
        if (last) {
            converged = st.converged;
        }
        if (exact_huber) {
            // Exact Huber objective reached; later stages would not change it.
            break;
        }
    }
    if (!converged) {
        throw NonConvergenceError("solver reached its iteration cap",
                                  std::vector<double>(best.data(), best.data() + best.size()), best_obj);
    }
    return detail::finish(x, y, p.loss, p.regularizer, std::move(best), iterations, true);
}

/**
 * @brief Applies implicitly enforced constraints after optimization.
 *
 * Negative entries are clamped to zero when NN is implicit; the vector is then
 * rescaled to sum to one when STO is implicit, or when STO was explicit but
 * clamping moved the vector off the hyperplane.
 */
inline Vector enforce_implicit(const Vector& c, const ConstraintMode& mode) {
    Vector out = c;
    bool clamped = false;
    if (mode.nn == Enforcement::implicit) {
        for (Eigen::Index j = 0; j < out.size(); ++j) {
            if (out(j) < 0) {
                out(j) = 0;
                clamped = true;
            }
        }
    }
    const bool normalize = mode.sto == Enforcement::implicit || (mode.nn == Enforcement::implicit && clamped);
    if (normalize) {
        const double total = out.sum();
        if (!(total > 0)) {
            throw DegenerateSolutionError("concentration vector is zero after enforcing non-negativity");
        }
        out /= total;
    }
    return out;
}

struct DeconvolutionConfig {
    LossKind loss = LossKind::squared();
    ConstraintMode constraints{};
    Regularizer regularizer{};
    SolverOptions options{};
};

/**
 * @brief Estimates one sample's concentrations against a reference.
 *
 * The returned coefficients always lie on the simplex: explicit constraints
 * are handled by solve_constrained(), implicit ones by enforce_implicit(), and
 * round-off is cleaned by a final clamp and rescale. The objective and
 * residual RMSD are evaluated at the returned coefficients.
 */
inline Solution deconvolve_sample(const Matrix& g, const Vector& m, const DeconvolutionConfig& config,
                                  const std::optional<Vector>& warm_start = std::nullopt) {
    RegressionProblem p{g, m, config.loss, config.constraints, config.regularizer};
    Solution raw = solve_constrained(p, config.options, warm_start);
    Vector c = enforce_implicit(raw.coefficients, config.constraints);
    c = normalize_to_simplex(c.cwiseMax(0.0));
    Solution out = detail::finish(g, m, config.loss, config.regularizer, std::move(c), raw.iterations, raw.converged);
    return out;
}

inline Solution deconvolve_sample(const ExpressionMatrix& g, const Vector& m, const DeconvolutionConfig& config) {
    return deconvolve_sample(g.values(), m, config);
}

} // namespace deconv
