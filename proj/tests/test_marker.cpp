#include "helpers.hpp"

#include <deconv/marker.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace deconv;
using testutil::random_matrix;

namespace {

// Regularized incomplete beta by Lentz's continued fraction.
double beta_cf(double a, double b, double x) {
    const double tiny = 1e-300;
    double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m < 10000; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((a + m2 - 1) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-16) break;
    }
    return h;
}

double incomplete_beta(double a, double b, double x) {
    if (x <= 0) return 0.0;
    if (x >= 1) return 1.0;
    const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
    if (x < (a + 1) / (a + b + 2)) return front * beta_cf(a, b, x) / a;
    return 1.0 - front * beta_cf(b, a, 1 - x) / b;
}

double hand_welch_p(const std::vector<double>& a, const std::vector<double>& b) {
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
    auto var = [&](const std::vector<double>& v) {
        const double mu = mean(v);
        double s = 0;
        for (double x : v) s += (x - mu) * (x - mu);
        return s / static_cast<double>(v.size() - 1);
    };
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double sa = var(a) / na, sb = var(b) / nb;
    const double t = (mean(a) - mean(b)) / std::sqrt(sa + sb);
    const double df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1) + sb * sb / (nb - 1));
    return incomplete_beta(df / 2, 0.5, df / (df + t * t));
}

struct Replicates {
    ExpressionMatrix h;
    ReplicateGrouping grouping;
};

// k replicates per type; column names A_1, A_2, ...
Replicates replicates(const Matrix& values, std::size_t k) {
    Labels cols;
    std::vector<std::pair<std::string, std::string>> map;
    const std::size_t types = static_cast<std::size_t>(values.cols()) / k;
    for (std::size_t t = 0; t < types; ++t) {
        const std::string name(1, static_cast<char>('A' + t));
        for (std::size_t r = 0; r < k; ++r) {
            cols.push_back(name + "_" + std::to_string(r + 1));
            map.emplace_back(cols.back(), name);
        }
    }
    return {ExpressionMatrix(testutil::labels("g", static_cast<std::size_t>(values.rows())), cols, values),
            ReplicateGrouping(map)};
}

// Block-orthogonal reference: gene i is expressed only in type i % q.
Matrix block_reference(Rng& rng, Eigen::Index n, Eigen::Index q) {
    Matrix g = Matrix::Zero(n, q);
    for (Eigen::Index i = 0; i < n; ++i) g(i, i % q) = rng.uniform(1, 100);
    return g;
}

MarkerRanking per_type_ranking(const Matrix& g) {
    MarkerRanking r;
    r.per_type.resize(static_cast<std::size_t>(g.cols()));
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        Eigen::Index t = 0;
        g.row(i).maxCoeff(&t);
        r.per_type[static_cast<std::size_t>(t)].push_back(static_cast<std::size_t>(i));
        r.global.push_back(static_cast<std::size_t>(i));
    }
    return r;
}

} // namespace

TEST(BhQvalues, Examples) {
    const auto q = bh_qvalues({0.01, 0.02, 0.03});
    for (double v : q) EXPECT_NEAR(v, 0.03, 1e-15);
    EXPECT_EQ(bh_qvalues({0.2}), (std::vector<double>{0.2}));
    EXPECT_EQ(bh_qvalues({1.0, 1.0, 1.0}), (std::vector<double>{1.0, 1.0, 1.0}));
    EXPECT_THROW(bh_qvalues({0.5, 1.5}), DataError);
}

TEST(BhQvalues, MonotoneInPOrderAndAtLeastP) {
    Rng rng(1);
    std::vector<double> p(200);
    for (auto& v : p) v = std::pow(rng.uniform(), 3);
    const auto q = bh_qvalues(p);
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
    for (std::size_t k = 1; k < order.size(); ++k) EXPECT_LE(q[order[k - 1]], q[order[k]]);
    for (std::size_t i = 0; i < p.size(); ++i) {
        EXPECT_GE(q[i], p[i]);
        EXPECT_LE(q[i], 1.0);
    }
}

TEST(ScoreAbbas, MatchesHandWelchOracle) {
    Matrix v(4, 9);
    v << 10, 11, 12.5, 4, 5, 4.2, 1, 1.3, 0.8,  //
        3, 3.3, 2.9, 3.1, 2.7, 3.6, 9, 8.5, 10.2, //
        5, 5.1, 4.9, 5, 5.2, 4.8, 5.05, 4.95, 5.1, //
        2, 7, 3, 1, 1.5, 2, 20, 21, 19.5;
    const auto rep = replicates(v, 3);
    const auto scores = score_abbas(rep.h, rep.grouping);
    ASSERT_EQ(scores.size(), 4u);
    for (const auto& s : scores) {
        const Eigen::Index i = static_cast<Eigen::Index>(s.gene_index);
        std::vector<std::pair<double, std::vector<double>>> groups;
        for (int t = 0; t < 3; ++t) {
            std::vector<double> x{v(i, 3 * t), v(i, 3 * t + 1), v(i, 3 * t + 2)};
            groups.emplace_back((x[0] + x[1] + x[2]) / 3, x);
        }
        std::vector<int> order{0, 1, 2};
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return groups[a].first > groups[b].first; });
        const double p2 = hand_welch_p(groups[order[0]].second, groups[order[1]].second);
        const double p3 = hand_welch_p(groups[order[0]].second, groups[order[2]].second);
        EXPECT_NEAR(s.p_value, std::max(p2, p3), 1e-10) << s.gene;
        EXPECT_EQ(s.celltype, static_cast<std::size_t>(order[0]));
        EXPECT_NEAR(s.fold_ratio, groups[order[0]].first / groups[order[1]].first, 1e-12);
    }
    for (std::size_t k = 1; k < scores.size(); ++k) EXPECT_LE(scores[k - 1].p_value, scores[k].p_value);
}

TEST(ScoreAbbas, IdenticalTopGroupsGivePOne) {
    Matrix v(1, 6);
    v << 5, 6, 5, 6, 1, 1.2;
    const auto rep = replicates(v, 2);
    EXPECT_DOUBLE_EQ(score_abbas(rep.h, rep.grouping)[0].p_value, 1.0);
    Matrix z(1, 4);
    z << 3, 3, 3, 3;
    const auto flat = replicates(z, 2);
    EXPECT_DOUBLE_EQ(score_abbas(flat.h, flat.grouping)[0].p_value, 1.0);
}

TEST(ScoreAbbas, SeparatedGeneRanksFirst) {
    Matrix v(3, 6);
    v << 1, 1.5, 1.2, 1.1, 1.3, 1.4, //
        1000, 1000.01, 1, 1.1, 1, 1.2, //
        5, 4, 6, 5.5, 4.5, 5.2;
    const auto rep = replicates(v, 2);
    const auto scores = score_abbas(rep.h, rep.grouping);
    EXPECT_EQ(scores[0].gene, "g1");
    EXPECT_LT(scores[0].p_value, 1e-3);
}

TEST(ScoreAbbas, TwoTypesUseSecondComparisonOnly) {
    Rng rng(2);
    const auto rep = replicates(random_matrix(rng, 20, 6, 1, 10), 3);
    const auto two = replicates(rep.h.values().leftCols(6), 3);
    const auto max_p = score_abbas(two.h, two.grouping, AbbasCombine::max_p);
    const auto second = score_abbas(two.h, two.grouping, AbbasCombine::second_only);
    for (std::size_t k = 0; k < max_p.size(); ++k) EXPECT_EQ(max_p[k].p_value, second[k].p_value);
}

TEST(ScoreAbbas, NeedsTwoReplicates) {
    Matrix v = Matrix::Ones(2, 3);
    const auto rep = replicates(v, 1);
    EXPECT_THROW(score_abbas(rep.h, rep.grouping), DataError);
}

TEST(ScoreNewman, FoldRatioAndAssignment) {
    Matrix v(1, 6);
    v << 100, 100, 10, 10, 5, 5;
    v(0, 0) = 99;
    v(0, 1) = 101;
    const auto rep = replicates(v, 2);
    const auto sel = score_newman(rep.h, rep.grouping, 1.0);
    ASSERT_EQ(sel.per_type[0].size(), 1u);
    EXPECT_NEAR(sel.per_type[0][0].fold_ratio, 10.0, 1e-12);
}

TEST(ScoreNewman, VacuousCutKeepsEveryGeneAndSortsByFold) {
    Rng rng(3);
    const auto rep = replicates(random_matrix(rng, 60, 9, 1, 50), 3);
    const auto sel = score_newman(rep.h, rep.grouping, 1.0);
    std::size_t total = 0;
    for (std::size_t t = 0; t < sel.per_type.size(); ++t) {
        total += sel.per_type[t].size();
        for (std::size_t k = 0; k < sel.per_type[t].size(); ++k) {
            const auto& s = sel.per_type[t][k];
            if (k > 0) EXPECT_GE(sel.per_type[t][k - 1].fold_ratio, s.fold_ratio);
            const auto gs = detail::group_stats(rep.h.values(), static_cast<Eigen::Index>(s.gene_index),
                                                rep.grouping.column_groups(rep.h));
            for (const auto& m : gs.per_type) EXPECT_LE(m.mean, gs.per_type[t].mean);
        }
    }
    EXPECT_EQ(total, 60u);
    EXPECT_DOUBLE_EQ(kDefaultQCut, 1e-3);
    EXPECT_DOUBLE_EQ(kRangeFilteredQCut, 1e-5);
}

TEST(ScoreNewman, TypeWithoutMarkersIsFlagged) {
    Matrix v(2, 4);
    v << 100, 101, 1, 1.1, //
        50, 51, 2, 2.2;
    const auto rep = replicates(v, 2);
    const auto sel = score_newman(rep.h, rep.grouping, 1.0);
    EXPECT_EQ(sel.types_without_markers, (std::vector<std::string>{"B"}));
}

TEST(ConditionNumber, Examples) {
    EXPECT_NEAR(condition_number(Matrix::Identity(3, 3)), 1.0, 1e-14);
    Rng rng(4);
    const Matrix q = random_matrix(rng, 10, 3).householderQr().householderQ() * Matrix::Identity(10, 3);
    EXPECT_NEAR(condition_number(q), 1.0, 1e-12);
    Matrix d(2, 2);
    d << 10, 0, 0, 1;
    EXPECT_NEAR(condition_number(d), 10.0, 1e-12);
    Matrix s(2, 2);
    s << 1, 2, 2, 4;
    EXPECT_TRUE(std::isinf(condition_number(s)));
}

TEST(OptimalCut, ChosenStepMatchesBruteForcePrefixes) {
    Rng rng(5);
    const Matrix g = random_matrix(rng, 40, 3, 0.1, 10);
    MarkerRanking r;
    for (std::size_t i = 0; i < 40; ++i) r.global.push_back((i * 7) % 40);
    const auto cut = optimal_cut(r, g, CutMethod::abbas_grow_one);
    ASSERT_EQ(cut.curve.size(), 38u);
    std::size_t best = 0;
    double best_k = std::numeric_limits<double>::infinity();
    for (std::size_t len = 3; len <= 40; ++len) {
        Matrix b(static_cast<Eigen::Index>(len), 3);
        for (std::size_t k = 0; k < len; ++k) b.row(static_cast<Eigen::Index>(k)) = g.row(static_cast<Eigen::Index>(r.global[k]));
        const Eigen::JacobiSVD<Matrix> svd(b);
        const double kappa = svd.singularValues()(0) / svd.singularValues()(2);
        EXPECT_NEAR(cut.curve[len - 3], kappa, 1e-9 * kappa);
        if (kappa < best_k) {
            best_k = kappa;
            best = len;
        }
    }
    EXPECT_EQ(cut.selected.size(), best);
    for (double v : cut.curve) EXPECT_LE(cut.curve[cut.chosen_step], v);
}

TEST(OptimalCut, BlockOrthogonalMarkers) {
    Rng rng(6);
    const Matrix g = block_reference(rng, 30, 3);
    for (auto method : {CutMethod::abbas_grow_one, CutMethod::newman_grow_q, CutMethod::balanced_norm}) {
        const auto cut = optimal_cut(per_type_ranking(g), g, method);
        Matrix b(static_cast<Eigen::Index>(cut.selected.size()), 3);
        for (std::size_t k = 0; k < cut.selected.size(); ++k) b.row(static_cast<Eigen::Index>(k)) = g.row(static_cast<Eigen::Index>(cut.selected[k]));
        const Matrix gram = b.transpose() * b;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                if (i != j) EXPECT_EQ(gram(i, j), 0.0);
        EXPECT_TRUE(std::isfinite(cut.curve[cut.chosen_step])) << cut_method_name(method);
        if (method == CutMethod::balanced_norm) EXPECT_LE(cut.curve[cut.chosen_step], condition_number(g));
    }
}

TEST(OptimalCut, NewmanStepsAreMultiplesOfActiveTypes) {
    Rng rng(7);
    const Matrix g = random_matrix(rng, 30, 3, 0.1, 10);
    MarkerRanking r;
    r.per_type = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, {10, 11, 12, 13}, {14, 15, 16, 17, 18, 19, 20}};
    const auto cut = optimal_cut(r, g, CutMethod::newman_grow_q);
    ASSERT_EQ(cut.gene_counts.size(), 10u);
    for (std::size_t s = 0; s < cut.gene_counts.size(); ++s) {
        const std::size_t step = s + 1;
        const std::size_t expected = std::min<std::size_t>(step, 10) + std::min<std::size_t>(step, 4) + std::min<std::size_t>(step, 7);
        EXPECT_EQ(cut.gene_counts[s], expected);
    }
    EXPECT_EQ(cut.exhausted_types, (std::vector<std::size_t>{1, 2, 0}));
    for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(cut.gene_counts[s] % 3, 0u);
    for (std::size_t s = 4; s < 7; ++s) EXPECT_EQ((cut.gene_counts[s] - 12) % 2, 0u);
}

TEST(OptimalCut, BalancedFeedsSmallestColumn) {
    Matrix g = Matrix::Zero(6, 2);
    g << 10, 0, 0, 1, 10, 0, 0, 1, 0, 1, 0, 1;
    MarkerRanking r;
    r.per_type = {{0, 2}, {1, 3, 4, 5}};
    const auto cut = optimal_cut(r, g, CutMethod::balanced_norm);
    // Seed {0,1}; then type 2 is fed until its norm passes 10 or it runs out.
    ASSERT_EQ(cut.gene_counts.front(), 2u);
    EXPECT_EQ(cut.gene_counts.back(), 6u);
}

TEST(OptimalCut, TooFewMarkersIsDataError) {
    MarkerRanking r;
    r.per_type = {{0}, {1}};
    EXPECT_THROW(optimal_cut(r, Matrix::Identity(2, 2), CutMethod::newman_grow_q), DataError);
    r.global = {0, 1};
    EXPECT_THROW(optimal_cut(r, Matrix::Identity(2, 2), CutMethod::abbas_grow_one), DataError);
}

TEST(OptimalCut, StepCapBoundsCurve) {
    Rng rng(8);
    const Matrix g = random_matrix(rng, 50, 2);
    MarkerRanking r;
    for (std::size_t i = 0; i < 50; ++i) r.global.push_back(i);
    EXPECT_EQ(optimal_cut(r, g, CutMethod::abbas_grow_one, 5).curve.size(), 5u);
}
