#include "helpers.hpp"

#include <deconv/grid_search.hpp>
#include <deconv/solver.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace deconv;
using testutil::random_matrix;
using testutil::random_simplex;
using testutil::random_vector;

namespace {

const ConstraintMode kExplicitBoth{Enforcement::explicit_, Enforcement::explicit_};
const ConstraintMode kImplicitBoth{Enforcement::implicit, Enforcement::implicit};

std::vector<LossKind> all_losses() {
    return {LossKind::squared(), LossKind::absolute(), LossKind::huber(0.5), LossKind::eps_insensitive(0.1)};
}

} // namespace

TEST(SolveOls, IdentityDesign) {
    Vector y(2);
    y << 0.3, 0.7;
    const auto s = solve_ols(Matrix::Identity(2, 2), y);
    EXPECT_NEAR(s.coefficients(0), 0.3, 1e-14);
    EXPECT_NEAR(s.coefficients(1), 0.7, 1e-14);
}

TEST(SolveOls, ExactFit) {
    Rng rng(1);
    const Matrix x = random_matrix(rng, 20, 4);
    const Vector c = random_vector(rng, 4, -1, 1);
    const auto s = solve_ols(x, x * c);
    EXPECT_LT((s.coefficients - c).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SolveOls, MatchesNormalEquationOracle) {
    Rng rng(2);
    const Matrix x = random_matrix(rng, 50, 3);
    const Vector y = random_vector(rng, 50);
    const Vector oracle = testutil::gauss_solve(x.transpose() * x, x.transpose() * y);
    EXPECT_LT((solve_ols(x, y).coefficients - oracle).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SolveOls, SingularDesignReportsConditionEstimate) {
    Matrix x(4, 2);
    x << 1, 2, 2, 4, 3, 6, 4, 8;
    try {
        solve_ols(x, Vector::Ones(4));
        FAIL() << "expected IllConditionedError";
    } catch (const IllConditionedError& e) {
        EXPECT_GT(e.condition_estimate(), 1e12);
    }
}

TEST(SolveOls, ScalingHomogeneity) {
    Rng rng(3);
    const Matrix x = random_matrix(rng, 30, 3);
    const Vector y = random_vector(rng, 30);
    const Vector a = solve_ols(x, y).coefficients;
    const Vector b = solve_ols(x, 3.5 * y).coefficients;
    EXPECT_LT((b - 3.5 * a).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SolveRidge, LambdaZeroEqualsOls) {
    Rng rng(4);
    const Matrix x = random_matrix(rng, 30, 4);
    const Vector y = random_vector(rng, 30);
    EXPECT_LT((solve_ridge(x, y, 0.0).coefficients - solve_ols(x, y).coefficients).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SolveRidge, ShrinkageLimit) {
    Rng rng(5);
    const Matrix x = random_matrix(rng, 30, 4);
    const Vector y = random_vector(rng, 30);
    const double ols_norm = solve_ols(x, y).coefficients.norm();
    EXPECT_LT(solve_ridge(x, y, 1e12).coefficients.norm(), 1e-6 * ols_norm);
}

TEST(SolveRidge, MatchesAugmentedSystemOracle) {
    Rng rng(6);
    const Matrix x = random_matrix(rng, 20, 3);
    const Vector y = random_vector(rng, 20);
    Matrix xa(23, 3);
    xa << x, Matrix::Identity(3, 3);
    Vector ya(23);
    ya << y, Vector::Zero(3);
    const Vector oracle = xa.colPivHouseholderQr().solve(ya);
    EXPECT_LT((solve_ridge(x, y, 1.0).coefficients - oracle).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SolveConstrained, NoiselessL2RecoversTruth) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix g = random_matrix(rng, 40, 4, 0, 10);
        const Vector c = random_simplex(rng, 4);
        RegressionProblem p{g, g * c, LossKind::squared(), kExplicitBoth, {}};
        EXPECT_LT((solve_constrained(p).coefficients - c).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(SolveConstrained, SingleCellTypeIsOne) {
    Rng rng(8);
    const Matrix g = random_matrix(rng, 10, 1);
    const Vector m = random_vector(rng, 10);
    for (const auto& loss : all_losses()) {
        RegressionProblem p{g, m, loss, kExplicitBoth, {}};
        EXPECT_NEAR(solve_constrained(p).coefficients(0), 1.0, 1e-12);
    }
}

TEST(SolveConstrained, L1MatchesSimplexGridScan) {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix g = random_matrix(rng, 3, 2);
        const Vector m = random_vector(rng, 3);
        RegressionProblem p{g, m, LossKind::absolute(), kExplicitBoth, {}};
        const double ours = solve_constrained(p).objective;
        double best = std::numeric_limits<double>::infinity();
        for (int k = 0; k <= 100000; ++k) {
            const double t = k * 1e-5;
            Vector w(2);
            w << t, 1 - t;
            best = std::min(best, (m - g * w).cwiseAbs().sum());
        }
        EXPECT_LE(ours, best + 1e-9);
        EXPECT_NEAR(ours, best, 1e-4);
    }
}

TEST(SolveConstrained, FeasibilityOfExplicitConstraints) {
    Rng rng(10);
    for (const auto& loss : all_losses()) {
        for (auto mode : {ConstraintMode{Enforcement::explicit_, Enforcement::implicit},
                          ConstraintMode{Enforcement::implicit, Enforcement::explicit_}, kExplicitBoth}) {
            const Matrix g = random_matrix(rng, 30, 4);
            const Vector m = random_vector(rng, 30, 0, 2);
            RegressionProblem p{g, m, loss, mode, {}};
            const Vector w = solve_constrained(p).coefficients;
            if (mode.nn == Enforcement::explicit_) EXPECT_GE(w.minCoeff(), -1e-9);
            if (mode.sto == Enforcement::explicit_) EXPECT_NEAR(w.sum(), 1.0, 1e-6);
        }
    }
}

TEST(SolveConstrained, IterationCapRaisesWithBestIterate) {
    Rng rng(11);
    const Matrix g = random_matrix(rng, 30, 4);
    const Vector m = random_vector(rng, 30);
    SolverOptions opts;
    opts.max_iters = 1;
    RegressionProblem p{g, m, LossKind::absolute(), kExplicitBoth, {}};
    try {
        solve_constrained(p, opts);
        FAIL() << "expected NonConvergenceError";
    } catch (const NonConvergenceError& e) {
        EXPECT_EQ(e.best_iterate().size(), 4u);
        EXPECT_TRUE(std::isfinite(e.best_objective()));
    }
}

TEST(EnforceImplicit, Examples) {
    Vector c(3);
    c << -0.1, 0.5, 0.6;
    const Vector out = enforce_implicit(c, kImplicitBoth);
    EXPECT_DOUBLE_EQ(out(0), 0.0);
    EXPECT_NEAR(out(1), 0.5 / 1.1, 1e-15);
    EXPECT_NEAR(out(2), 0.6 / 1.1, 1e-15);

    Vector f(3);
    f << 0.2, 0.3, 0.5;
    EXPECT_LT((enforce_implicit(f, kImplicitBoth) - f).cwiseAbs().maxCoeff(), 1e-15);

    Vector neg(2);
    neg << -1, -2;
    EXPECT_THROW(enforce_implicit(neg, kImplicitBoth), DegenerateSolutionError);
}

TEST(DeconvolveSample, SixteenConfigsOnSimplex) {
    Rng rng(12);
    const Matrix g = random_matrix(rng, 50, 4, 1, 100);
    const Vector m = g * random_simplex(rng, 4) + random_vector(rng, 50, -2, 2);
    int count = 0;
    for (const auto& loss : all_losses()) {
        for (auto nn : {Enforcement::implicit, Enforcement::explicit_}) {
            for (auto sto : {Enforcement::implicit, Enforcement::explicit_}) {
                DeconvolutionConfig cfg{loss, {nn, sto}, {}, {}};
                const Vector c = deconvolve_sample(g, m, cfg).coefficients;
                EXPECT_GE(c.minCoeff(), 0.0);
                EXPECT_NEAR(c.sum(), 1.0, 1e-12);
                ++count;
            }
        }
    }
    EXPECT_EQ(count, 16);
}

TEST(DeconvolveSample, IdentityDesignSameForEveryConfig) {
    // The hinge loss is flat inside the tube, so only losses with a unique minimizer are checked.
    Vector y(2);
    y << 0.3, 0.7;
    for (const auto& loss : {LossKind::squared(), LossKind::absolute(), LossKind::huber(0.5)}) {
        for (auto nn : {Enforcement::implicit, Enforcement::explicit_}) {
            for (auto sto : {Enforcement::implicit, Enforcement::explicit_}) {
                DeconvolutionConfig cfg{loss, {nn, sto}, {}, {}};
                const Vector c = deconvolve_sample(Matrix::Identity(2, 2), y, cfg).coefficients;
                EXPECT_NEAR(c(0), 0.3, 1e-6) << loss_name(loss.type);
                EXPECT_NEAR(c(1), 0.7, 1e-6);
            }
        }
    }
}

TEST(DeconvolveSample, ExplicitNoWorseThanProjectedUnconstrained) {
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix g = random_matrix(rng, 40, 4, 0, 10);
        const Vector m = g * random_simplex(rng, 4) + random_vector(rng, 40, -3, 3);
        for (const auto& loss : all_losses()) {
            const Vector ex = deconvolve_sample(g, m, {loss, kExplicitBoth, {}, {}}).coefficients;
            const Vector im = deconvolve_sample(g, m, {loss, kImplicitBoth, {}, {}}).coefficients;
            const double fe = objective_value(g, m, loss, Regularizer::none(), ex);
            const double fi = objective_value(g, m, loss, Regularizer::none(), im);
            EXPECT_LE(fe, fi * (1 + 1e-7) + 1e-12);
        }
    }
}

TEST(LimitEquivalence, HuberLargeMEqualsL2) {
    Rng rng(14);
    const Matrix g = random_matrix(rng, 40, 3);
    const Vector m = random_vector(rng, 40);
    RegressionProblem l2{g, m, LossKind::squared(), kExplicitBoth, {}};
    RegressionProblem hu{g, m, LossKind::huber(1e3), kExplicitBoth, {}};
    EXPECT_LT((solve_constrained(l2).coefficients - solve_constrained(hu).coefficients).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(LimitEquivalence, HuberSmallMApproachesL1) {
    Rng rng(15);
    const Matrix g = random_matrix(rng, 25, 3);
    const Vector m = random_vector(rng, 25);
    RegressionProblem l1{g, m, LossKind::absolute(), kImplicitBoth, {}};
    RegressionProblem hu{g, m, LossKind::huber(1e-6), kImplicitBoth, {}};
    EXPECT_LT((solve_constrained(l1).coefficients - solve_constrained(hu).coefficients).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(LimitEquivalence, EpsZeroEqualsL1) {
    Rng rng(16);
    const Matrix g = random_matrix(rng, 25, 3);
    const Vector m = random_vector(rng, 25);
    RegressionProblem l1{g, m, LossKind::absolute(), kExplicitBoth, {}};
    RegressionProblem ep{g, m, LossKind::eps_insensitive(0.0), kExplicitBoth, {}};
    EXPECT_LT((solve_constrained(l1).coefficients - solve_constrained(ep).coefficients).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(LimitEquivalence, LassoLimits) {
    Rng rng(17);
    const Matrix g = random_matrix(rng, 30, 3);
    const Vector m = random_vector(rng, 30);
    RegressionProblem zero{g, m, LossKind::squared(), kImplicitBoth, Regularizer::norm_one(0.0)};
    EXPECT_LT((solve_constrained(zero).coefficients - solve_ols(g, m).coefficients).cwiseAbs().maxCoeff(), 1e-6);
    RegressionProblem big{g, m, LossKind::squared(), kImplicitBoth, Regularizer::norm_one(1e8)};
    EXPECT_LT(solve_constrained(big).coefficients.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Regularizer, ValuesAndValidation) {
    Vector w(3);
    w << 0.5, -0.3, 0.2;
    EXPECT_NEAR(Regularizer::norm_two(2.0).value(w), 2.0 * 0.38, 1e-15);
    EXPECT_NEAR(Regularizer::norm_one(2.0).value(w), 2.0, 1e-15);
    EXPECT_NEAR(Regularizer::elastic_net(2.0, 0.25).value(w), 2.0 * (0.25 * 1.0 + 0.75 * 0.38), 1e-15);
    EXPECT_NEAR(Regularizer::group_lasso(1.5, {{0, 1}, {2}}).value(w), 1.5 * (std::sqrt(0.34) + 0.2), 1e-15);
    EXPECT_NEAR(Regularizer::svr(4.0).lambda, 1.0 / 8.0, 1e-15);
    EXPECT_THROW(Regularizer::norm_two(-1.0), UsageError);
    EXPECT_THROW(Regularizer::elastic_net(1.0, 1.5), UsageError);
    EXPECT_THROW(Regularizer::group_lasso(1.0, {{0, 1}}).validate(3), UsageError);
    EXPECT_THROW(Regularizer::group_lasso(1.0, {{0, 1}, {1, 2}}).validate(3), UsageError);
}

TEST(GridSearch, FifteenDecades) {
    const auto g = ParamGrid::decades();
    ASSERT_EQ(g.values.size(), 15u);
    EXPECT_DOUBLE_EQ(g.values.front(), 1e-7);
    EXPECT_DOUBLE_EQ(g.values.back(), 1e7);
    for (std::size_t k = 1; k < g.values.size(); ++k) EXPECT_NEAR(g.values[k] / g.values[k - 1], 10.0, 1e-12);
}

TEST(GridSearch, TiesGoToSmallestParameter) {
    // q = 1 with explicit constraints: every parameter gives the same answer.
    Rng rng(18);
    const Matrix g = random_matrix(rng, 10, 1);
    const Vector m = random_vector(rng, 10);
    DeconvolutionConfig cfg{LossKind::huber(1.0), kExplicitBoth, {}, {}};
    const auto res = grid_search_param(g, m, cfg, GridCriterion::residual_rmsd);
    EXPECT_EQ(res.best_index, 0u);
    EXPECT_DOUBLE_EQ(res.best_param, 1e-7);
}

TEST(GridSearch, LambdaSearchMatchesReevaluation) {
    Rng rng(19);
    const Matrix g = random_matrix(rng, 60, 4, 0, 10);
    const Vector c = random_simplex(rng, 4);
    Vector m = g * c;
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) += 0.5 * rng.normal();
    DeconvolutionConfig cfg{LossKind::squared(), {Enforcement::explicit_, Enforcement::implicit},
                            Regularizer::norm_two(1.0), {}};
    const auto res = grid_search_param(g, m, cfg, GridCriterion::oracle_mad, c);
    EXPECT_EQ(res.target, SearchTarget::lambda);
    std::size_t best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < 15; ++k) {
        const double lambda = std::pow(10.0, static_cast<int>(k) - 7);
        DeconvolutionConfig ck = cfg;
        ck.regularizer = Regularizer::norm_two(lambda);
        const Vector est = deconvolve_sample(g, m, ck).coefficients;
        const double score = (100.0 * est - 100.0 * c).cwiseAbs().mean();
        EXPECT_NEAR(score, res.scores[k], 1e-9);
        if (score < best_score) {
            best_score = score;
            best = k;
        }
    }
    EXPECT_EQ(res.best_index, best);
}

TEST(GridSearch, OracleNeedsTruth) {
    DeconvolutionConfig cfg{LossKind::huber(1.0), kExplicitBoth, {}, {}};
    EXPECT_THROW(grid_search_param(Matrix::Identity(2, 2), Vector::Ones(2), cfg, GridCriterion::oracle_mad), UsageError);
}
