#pragma once

#include "error.hpp"
#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

/**
 * @file filter.hpp
 * @brief Gene filters: sum-to-one violations and expression-range bounds.
 *
 * Range bounds are expressed in log2 units while matrices stay linear.
 */

namespace deconv {

enum class Violation { ok, violating_reference, violating_mixture };

/**
 * @brief Classifies each gene of one mixture sample against the reference.
 *
 * A gene violates the reference when m(i) <= min_t G(i,t) and violates the
 * mixture when max_t G(i,t) <= m(i). Both inequalities are non-strict; a gene
 * satisfying both (constant reference row equal to m) is reported as a
 * reference violation.
 */
inline std::vector<Violation> sto_violation_categorize(const Matrix& g, const Vector& m) {
    if (g.rows() != m.size()) {
        throw DataError("reference and mixture are not row-aligned");
    }
    std::vector<Violation> out(static_cast<std::size_t>(g.rows()), Violation::ok);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double lo = g.row(i).minCoeff();
        const double hi = g.row(i).maxCoeff();
        if (m(i) <= lo) {
            out[i] = Violation::violating_reference;
        } else if (hi <= m(i)) {
            out[i] = Violation::violating_mixture;
        }
    }
    return out;
}

struct FeatureMask {
    std::vector<bool> keep;
    std::string provenance;

    std::size_t kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }

    static FeatureMask all(std::size_t n, std::string provenance = "all") {
        return {std::vector<bool>(n, true), std::move(provenance)};
    }
};

/// Gene-wise conjunction of two masks of equal length.
inline FeatureMask combine_masks(const FeatureMask& a, const FeatureMask& b) {
    if (a.keep.size() != b.keep.size()) {
        throw DataError("cannot combine feature masks of different lengths");
    }
    FeatureMask out{std::vector<bool>(a.keep.size()), a.provenance + "+" + b.provenance};
    for (std::size_t i = 0; i < a.keep.size(); ++i) {
        out.keep[i] = a.keep[i] && b.keep[i];
    }
    return out;
}

inline std::vector<std::size_t> mask_indices(const FeatureMask& mask) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < mask.keep.size(); ++i) {
        if (mask.keep[i]) {
            idx.push_back(i);
        }
    }
    return idx;
}

inline ExpressionMatrix apply_mask(const ExpressionMatrix& x, const FeatureMask& mask) {
    if (mask.keep.size() != x.n_rows()) {
        throw DataError("feature mask length does not match the number of genes");
    }
    auto idx = mask_indices(mask);
    if (idx.empty()) {
        throw EmptyBasisError("feature filter '" + mask.provenance + "' retained no gene");
    }
    return x.select_rows(idx);
}

enum class FilterScope { per_sample, any_sample };

struct SampleViolationCounts {
    std::string sample;
    std::size_t n_genes = 0;
    std::size_t violating_reference = 0;
    std::size_t violating_mixture = 0;
};

struct ViolationReport {
    std::vector<SampleViolationCounts> samples;
    double mean_percent_reference = 0.0;
    double mean_percent_mixture = 0.0;
};

struct StoFilterResult {
    FilterScope scope = FilterScope::per_sample;
    /// One mask per mixture column (per_sample) or a single global mask.
    std::vector<FeatureMask> masks;
    ViolationReport report;

    const FeatureMask& mask_for(std::size_t sample) const {
        return scope == FilterScope::per_sample ? masks.at(sample) : masks.at(0);
    }
};

inline StoFilterResult sto_violation_filter(const ExpressionMatrix& g, const ExpressionMatrix& m, FilterScope scope) {
    if (g.row_labels() != m.row_labels()) {
        throw DataError("reference and mixture must be aligned before violation filtering");
    }
    const std::size_t n = g.n_rows();
    StoFilterResult out;
    out.scope = scope;
    FeatureMask global = FeatureMask::all(n, "sto_any");
    for (std::size_t j = 0; j < m.n_cols(); ++j) {
        const auto cats = sto_violation_categorize(g.values(), m.values().col(static_cast<Eigen::Index>(j)));
        SampleViolationCounts counts{m.col_labels()[j], n, 0, 0};
        FeatureMask mask = FeatureMask::all(n, "sto_sample");
        for (std::size_t i = 0; i < n; ++i) {
            if (cats[i] == Violation::violating_reference) ++counts.violating_reference;
            if (cats[i] == Violation::violating_mixture) ++counts.violating_mixture;
            if (cats[i] != Violation::ok) {
                mask.keep[i] = false;
                global.keep[i] = false;
            }
        }
        out.report.mean_percent_reference += 100.0 * static_cast<double>(counts.violating_reference) / static_cast<double>(n);
        out.report.mean_percent_mixture += 100.0 * static_cast<double>(counts.violating_mixture) / static_cast<double>(n);
        out.report.samples.push_back(counts);
        if (scope == FilterScope::per_sample) {
            if (mask.kept() == 0) {
                throw EmptyBasisError("every gene violates sum-to-one in sample '" + m.col_labels()[j] + "'");
            }
            out.masks.push_back(std::move(mask));
        }
    }
    if (m.n_cols() > 0) {
        out.report.mean_percent_reference /= static_cast<double>(m.n_cols());
        out.report.mean_percent_mixture /= static_cast<double>(m.n_cols());
    }
    if (scope == FilterScope::any_sample) {
        if (global.kept() == 0) {
            throw EmptyBasisError("every gene violates sum-to-one in at least one sample");
        }
        out.masks.push_back(std::move(global));
    }
    return out;
}

/// Expression bounds in log2 units.
struct RangeBounds {
    double lo = 3.0;
    double hi = 12.0;

    static RangeBounds make(double lo, double hi) {
        if (!(lo < hi)) {
            throw UsageError("range bounds need lo < hi");
        }
        return {lo, hi};
    }
};

/// Keeps a gene iff all of its values in M and G lie within [2^lo, 2^hi].
inline FeatureMask fixed_range_mask(const ExpressionMatrix& m, const ExpressionMatrix& g, const RangeBounds& bounds) {
    if (m.n_rows() != g.n_rows()) {
        throw DataError("range filter needs row-aligned mixture and reference");
    }
    const double lo = std::exp2(bounds.lo);
    const double hi = std::exp2(bounds.hi);
    FeatureMask out = FeatureMask::all(m.n_rows(), "range");
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(m.n_rows()); ++i) {
        const double vmin = std::min(m.values().row(i).minCoeff(), g.values().row(i).minCoeff());
        const double vmax = std::max(m.values().row(i).maxCoeff(), g.values().row(i).maxCoeff());
        out.keep[i] = vmin >= lo && vmax <= hi;
    }
    return out;
}

/// Percentage of genes retained by fixed_range_mask for each upper bound.
inline std::vector<double> range_retention_curve(const ExpressionMatrix& m, const ExpressionMatrix& g, double lo,
                                                 const std::vector<double>& his) {
    std::vector<double> out;
    for (double hi : his) {
        const auto mask = fixed_range_mask(m, g, RangeBounds{lo, hi});
        out.push_back(100.0 * static_cast<double>(mask.kept()) / static_cast<double>(mask.keep.size()));
    }
    return out;
}

enum class KneeNormalization { unit, none };

struct AdaptiveRange {
    RangeBounds bounds;
    std::vector<double> sorted_log2_max; ///< ascending
    std::vector<std::string> sorted_genes;
    std::size_t middle = 0;
    std::size_t lo_index = 0;
    std::size_t hi_index = 0;
    bool lo_defaulted = false; ///< lower half too short for a knee
    bool hi_defaulted = false;
};

namespace detail {

/**
 * Farthest point from the chord between positions `outer` and `middle` of
 * `s`. Distances within a 1e-12 relative band of the maximum count as ties,
 * resolved toward the outer end of the half.
 */
inline std::size_t knee_in_half(const std::vector<double>& s, std::size_t outer, std::size_t middle,
                                KneeNormalization norm) {
    const double xa = static_cast<double>(outer);
    const double va = s[outer];
    const double dx = static_cast<double>(middle) - xa;
    const double dv = s[middle] - va;

    auto distance = [&](std::size_t k) {
        double px = static_cast<double>(k) - xa;
        double pv = s[k] - va;
        double cx = dx;
        double cv = dv;
        if (norm == KneeNormalization::unit) {
            px /= dx;
            cx = 1.0;
            if (dv != 0) {
                pv /= dv;
                cv = 1.0;
            } else {
                pv = 0.0;
                cv = 0.0;
            }
        }
        const double len = std::hypot(cx, cv);
        return len > 0 ? std::abs(cx * pv - cv * px) / len : 0.0;
    };

    const std::size_t count = (middle > outer ? middle - outer : outer - middle) + 1;
    auto position = [&](std::size_t step) { return middle > outer ? outer + step : outer - step; };
    std::vector<double> d(count);
    double best_d = 0.0;
    for (std::size_t step = 0; step < count; ++step) {
        d[step] = distance(position(step));
        best_d = std::max(best_d, d[step]);
    }
    const double band = 1e-12 * std::max(1.0, best_d);
    for (std::size_t step = 0; step < count; ++step) {
        if (d[step] >= best_d - band) {
            return position(step);
        }
    }
    return outer;
}

} // namespace detail

/**
 * @brief Finds expression-range knees on the sorted per-gene maximum.
 *
 * For every gene the maximum over all columns of M and G is taken in log2
 * (genes with a non-positive maximum are skipped) and sorted ascending. The
 * middle element (1-based position floor((len+1)/2)) splits the curve; in each
 * half the knee is the point farthest from the chord joining the outer end to
 * the middle. With unit normalization both axes of a half are rescaled to
 * [0, 1] first. A half with fewer than three points falls back to its outer
 * value and is flagged.
 */
inline AdaptiveRange adaptive_range_bounds(const ExpressionMatrix& m, const ExpressionMatrix& g,
                                           KneeNormalization norm = KneeNormalization::unit) {
    if (m.n_rows() != g.n_rows()) {
        throw DataError("adaptive range needs row-aligned mixture and reference");
    }
    std::vector<std::pair<double, std::string>> pts;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(m.n_rows()); ++i) {
        const double mx = std::max(m.values().row(i).maxCoeff(), g.values().row(i).maxCoeff());
        if (mx > 0) {
            pts.emplace_back(std::log2(mx), m.row_labels()[i]);
        }
    }
    if (pts.size() < 3) {
        throw DataError("adaptive range detection needs at least three genes with positive expression");
    }
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    AdaptiveRange out;
    for (auto& [v, gene] : pts) {
        out.sorted_log2_max.push_back(v);
        out.sorted_genes.push_back(gene);
    }
    const auto& s = out.sorted_log2_max;
    const std::size_t len = s.size();
    out.middle = (len + 1) / 2 - 1;
    const std::size_t last = len - 1;

    if (out.middle + 1 < 3) {
        out.lo_index = 0;
        out.lo_defaulted = true;
    } else {
        out.lo_index = detail::knee_in_half(s, 0, out.middle, norm);
    }
    if (last - out.middle + 1 < 3) {
        out.hi_index = last;
        out.hi_defaulted = true;
    } else {
        out.hi_index = detail::knee_in_half(s, last, out.middle, norm);
    }
    out.bounds.lo = s[out.lo_index];
    out.bounds.hi = s[out.hi_index];
    if (!(out.bounds.lo < out.bounds.hi)) {
        throw DataError("adaptive range collapsed (lower knee is not below upper knee)");
    }
    return out;
}

} // namespace deconv
