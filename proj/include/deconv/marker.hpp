#pragma once

#include "error.hpp"
#include "model.hpp"
#include "stats.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

/**
 * @file marker.hpp
 * @brief Marker-gene scoring and condition-number based basis selection.
 */

namespace deconv {

struct MarkerScore {
    std::string gene;
    std::size_t gene_index = 0; ///< row in the replicate/reference matrix
    std::size_t celltype = 0;   ///< argmax of the per-type means
    double p_value = 1.0;
    double q_value = 1.0;
    double fold_ratio = 1.0; ///< highest mean / second-highest mean
};

/// How the top-vs-second and top-vs-third tests are combined.
enum class AbbasCombine { max_p, second_only };

/**
 * @brief Benjamini-Hochberg step-up adjusted p-values, in input order.
 */
inline std::vector<double> bh_qvalues(const std::vector<double>& p) {
    const std::size_t m = p.size();
    std::vector<double> q(m);
    if (m == 0) {
        return q;
    }
    for (double v : p) {
        if (!(v >= 0 && v <= 1)) {
            throw DataError("p-values must lie in [0, 1]");
        }
    }
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const double rank = static_cast<double>(k + 1);
        running = std::min(running, p[order[k]] * static_cast<double>(m) / rank);
        q[order[k]] = std::min(running, 1.0);
    }
    return q;
}

namespace detail {

struct GroupStats {
    std::vector<SampleMoments> per_type;
    std::vector<std::size_t> order; ///< types by descending mean
};

inline GroupStats group_stats(const Matrix& h, Eigen::Index row, const std::vector<std::vector<std::size_t>>& groups) {
    GroupStats gs;
    std::vector<double> buf;
    for (const auto& cols : groups) {
        buf.clear();
        for (auto j : cols) {
            buf.push_back(h(row, static_cast<Eigen::Index>(j)));
        }
        gs.per_type.push_back(moments(buf));
    }
    gs.order.resize(groups.size());
    std::iota(gs.order.begin(), gs.order.end(), 0);
    std::stable_sort(gs.order.begin(), gs.order.end(),
                     [&](std::size_t a, std::size_t b) { return gs.per_type[a].mean > gs.per_type[b].mean; });
    return gs;
}

inline double fold_ratio(double top, double second) {
    if (second > 0) {
        return top / second;
    }
    return top > 0 ? std::numeric_limits<double>::infinity() : 1.0;
}

} // namespace detail

/**
 * @brief Differential-expression score per gene from replicate profiles.
 *
 * For each gene the cell-type with the highest mean is tested (Welch,
 * two-sided) against the second- and third-highest types; the gene's p-value
 * is the larger of the two (only the second comparison when there are two
 * types). Results are sorted by ascending p-value with gene order breaking
 * ties, and carry BH q-values over all genes.
 */
inline std::vector<MarkerScore> score_abbas(const ExpressionMatrix& h, const ReplicateGrouping& grouping,
                                            AbbasCombine combine = AbbasCombine::max_p) {
    const auto groups = grouping.column_groups(h);
    if (groups.size() < 2) {
        throw DataError("marker scoring needs at least two cell-types");
    }
    for (std::size_t t = 0; t < groups.size(); ++t) {
        if (groups[t].size() < 2) {
            throw DataError("cell-type '" + grouping.celltypes()[t] + "' needs at least two replicates for a t-test");
        }
    }
    std::vector<MarkerScore> scores;
    scores.reserve(h.n_rows());
    for (std::size_t i = 0; i < h.n_rows(); ++i) {
        const auto gs = detail::group_stats(h.values(), static_cast<Eigen::Index>(i), groups);
        const auto& top = gs.per_type[gs.order[0]];
        const auto& second = gs.per_type[gs.order[1]];
        double p = welch_t_test(top, second).p_value;
        if (combine == AbbasCombine::max_p && groups.size() >= 3) {
            p = std::max(p, welch_t_test(top, gs.per_type[gs.order[2]]).p_value);
        }
        scores.push_back(
            MarkerScore{h.row_labels()[i], i, gs.order[0], p, 1.0, detail::fold_ratio(top.mean, second.mean)});
    }
    std::vector<double> ps;
    ps.reserve(scores.size());
    for (const auto& s : scores) {
        ps.push_back(s.p_value);
    }
    const auto qs = bh_qvalues(ps);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i].q_value = qs[i];
    }
    std::stable_sort(scores.begin(), scores.end(),
                     [](const MarkerScore& a, const MarkerScore& b) { return a.p_value < b.p_value; });
    return scores;
}

struct NewmanSelection {
    /// Significant markers per cell-type, by descending fold ratio.
    std::vector<std::vector<MarkerScore>> per_type;
    std::vector<std::string> types_without_markers;
};

/// q-value cutoffs: 1e-3 on unfiltered data, 1e-5 after range filtering.
inline constexpr double kDefaultQCut = 1e-3;
inline constexpr double kRangeFilteredQCut = 1e-5;

/**
 * @brief Keeps genes with q <= q_cut and ranks them per cell-type by fold ratio.
 */
inline NewmanSelection score_newman(const ExpressionMatrix& h, const ReplicateGrouping& grouping,
                                    double q_cut = kDefaultQCut, AbbasCombine combine = AbbasCombine::max_p) {
    const auto scores = score_abbas(h, grouping, combine);
    NewmanSelection out;
    out.per_type.resize(grouping.celltypes().size());
    for (const auto& s : scores) {
        if (s.q_value <= q_cut) {
            out.per_type[s.celltype].push_back(s);
        }
    }
    for (std::size_t t = 0; t < out.per_type.size(); ++t) {
        auto& v = out.per_type[t];
        std::stable_sort(v.begin(), v.end(),
                         [](const MarkerScore& a, const MarkerScore& b) { return a.fold_ratio > b.fold_ratio; });
        if (v.empty()) {
            out.types_without_markers.push_back(grouping.celltypes()[t]);
        }
    }
    return out;
}

/// Ratio of extreme singular values; +inf when numerically singular.
inline double condition_number(const Matrix& b) {
    if (b.rows() < b.cols() || b.cols() == 0) {
        return std::numeric_limits<double>::infinity();
    }
    Eigen::JacobiSVD<Matrix> svd(b);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    const double smin = sv(sv.size() - 1);
    if (!(smax > 0) || smin < 1e-12 * smax) {
        return std::numeric_limits<double>::infinity();
    }
    return smax / smin;
}

enum class CutMethod {
    abbas_grow_one, ///< next gene in global order per step
    newman_grow_q,  ///< next gene of every non-exhausted type per step
    balanced_norm,  ///< next gene of the type with the smallest basis-column norm
};

inline std::string cut_method_name(CutMethod m) {
    switch (m) {
    case CutMethod::abbas_grow_one:
        return "abbas";
    case CutMethod::newman_grow_q:
        return "newman";
    case CutMethod::balanced_norm:
        return "balanced";
    }
    return "?";
}

/// Gene rows in selection order: a global ranking and per-type rankings.
struct MarkerRanking {
    std::vector<std::size_t> global;
    std::vector<std::vector<std::size_t>> per_type;
};

inline MarkerRanking ranking_from_abbas(const std::vector<MarkerScore>& sorted_scores, std::size_t n_types) {
    MarkerRanking r;
    r.per_type.resize(n_types);
    for (const auto& s : sorted_scores) {
        r.global.push_back(s.gene_index);
        r.per_type.at(s.celltype).push_back(s.gene_index);
    }
    return r;
}

inline MarkerRanking ranking_from_newman(const NewmanSelection& sel) {
    MarkerRanking r;
    std::vector<MarkerScore> all;
    for (const auto& v : sel.per_type) {
        std::vector<std::size_t> idx;
        for (const auto& s : v) {
            idx.push_back(s.gene_index);
            all.push_back(s);
        }
        r.per_type.push_back(std::move(idx));
    }
    std::stable_sort(all.begin(), all.end(), [](const MarkerScore& a, const MarkerScore& b) {
        return a.q_value < b.q_value || (a.q_value == b.q_value && a.p_value < b.p_value);
    });
    for (const auto& s : all) {
        r.global.push_back(s.gene_index);
    }
    return r;
}

struct BasisCut {
    std::vector<std::size_t> selected; ///< gene rows at the chosen step
    std::vector<double> curve;         ///< condition number per step
    std::vector<std::size_t> gene_counts;
    std::size_t chosen_step = 0;
    std::vector<std::size_t> exhausted_types; ///< in order of exhaustion
};

inline constexpr std::size_t kDefaultStepCap = 1000;

namespace detail {

inline Matrix rows_of(const Matrix& g, const std::vector<std::size_t>& rows) {
    Matrix b(static_cast<Eigen::Index>(rows.size()), g.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        b.row(static_cast<Eigen::Index>(k)) = g.row(static_cast<Eigen::Index>(rows[k]));
    }
    return b;
}

} // namespace detail

/**
 * @brief Grows nested marker bases and keeps the one with the smallest condition number.
 *
 * `g` is the per-type reference whose rows are indexed by the ranking. Each
 * step records the condition number of `g` restricted to the genes selected
 * so far (steps with fewer genes than cell-types are skipped). Ties go to the
 * earliest step.
 */
inline BasisCut optimal_cut(const MarkerRanking& ranking, const Matrix& g, CutMethod method,
                            std::size_t step_cap = kDefaultStepCap) {
    const std::size_t q = static_cast<std::size_t>(g.cols());
    BasisCut cut;
    std::vector<std::size_t> selected;
    std::vector<std::vector<std::size_t>> snapshots;

    auto record = [&] {
        if (selected.size() < q) {
            return;
        }
        cut.curve.push_back(condition_number(detail::rows_of(g, selected)));
        cut.gene_counts.push_back(selected.size());
        snapshots.push_back(selected);
    };

    if (method == CutMethod::abbas_grow_one) {
        if (ranking.global.size() < q + 1) {
            throw DataError("marker cut needs at least " + std::to_string(q + 1) + " ranked genes, got " +
                            std::to_string(ranking.global.size()));
        }
        for (std::size_t k = 0; k < ranking.global.size() && cut.curve.size() < step_cap; ++k) {
            selected.push_back(ranking.global[k]);
            record();
        }
    } else {
        if (ranking.per_type.size() != q) {
            throw DataError("per-type marker ranking does not match the number of cell-types");
        }
        std::vector<std::size_t> next(q, 0);
        std::vector<bool> exhausted(q, false);
        auto mark_exhausted = [&](std::size_t t) {
            if (!exhausted[t] && next[t] >= ranking.per_type[t].size()) {
                exhausted[t] = true;
                cut.exhausted_types.push_back(t);
            }
        };
        for (std::size_t t = 0; t < q; ++t) {
            mark_exhausted(t);
        }
        std::size_t total = 0;
        for (const auto& v : ranking.per_type) {
            total += v.size();
        }
        if (total < q + 1) {
            throw DataError("marker cut needs at least " + std::to_string(q + 1) + " significant markers, got " +
                            std::to_string(total) + " (try a larger q-value cutoff or more replicates)");
        }

        if (method == CutMethod::newman_grow_q) {
            while (cut.curve.size() < step_cap) {
                bool grew = false;
                for (std::size_t t = 0; t < q; ++t) {
                    if (!exhausted[t]) {
                        selected.push_back(ranking.per_type[t][next[t]++]);
                        grew = true;
                    }
                }
                if (!grew) {
                    break;
                }
                record();
                for (std::size_t t = 0; t < q; ++t) {
                    mark_exhausted(t);
                }
            }
        } else {
            // Seed with the best marker of every type, then always feed the
            // type whose basis column is currently smallest.
            for (std::size_t t = 0; t < q; ++t) {
                if (!exhausted[t]) {
                    selected.push_back(ranking.per_type[t][next[t]++]);
                    mark_exhausted(t);
                }
            }
            record();
            while (cut.curve.size() < step_cap) {
                const Matrix b = detail::rows_of(g, selected);
                std::size_t pick = q;
                double smallest = std::numeric_limits<double>::infinity();
                for (std::size_t t = 0; t < q; ++t) {
                    if (exhausted[t]) {
                        continue;
                    }
                    const double norm = b.col(static_cast<Eigen::Index>(t)).norm();
                    if (norm < smallest) {
                        smallest = norm;
                        pick = t;
                    }
                }
                if (pick == q) {
                    break;
                }
                selected.push_back(ranking.per_type[pick][next[pick]++]);
                mark_exhausted(pick);
                record();
            }
        }
    }

    if (cut.curve.empty()) {
        throw DataError("marker ranking never reached as many genes as cell-types");
    }
    cut.chosen_step = 0;
    for (std::size_t s = 1; s < cut.curve.size(); ++s) {
        if (cut.curve[s] < cut.curve[cut.chosen_step]) {
            cut.chosen_step = s;
        }
    }
    cut.selected = snapshots[cut.chosen_step];
    return cut;
}

} // namespace deconv
