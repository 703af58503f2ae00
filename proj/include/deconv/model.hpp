#pragma once

#include "error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

/**
 * @file model.hpp
 * @brief Labelled expression and concentration matrices.
 *
 * Expression values are always stored in linear scale. Rows are genes,
 * columns are either mixture samples (M), replicate reference profiles (H)
 * or collapsed per-cell-type references (G).
 */

namespace deconv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Labels = std::vector<std::string>;

namespace detail {

inline void require_unique(const Labels& labels, const char* what) {
    std::unordered_set<std::string> seen;
    seen.reserve(labels.size());
    for (const auto& l : labels) {
        if (!seen.insert(l).second) {
            throw DataError(std::string("duplicate ") + what + " label '" + l + "'");
        }
    }
}

inline std::unordered_map<std::string, std::size_t> index_of(const Labels& labels) {
    std::unordered_map<std::string, std::size_t> out;
    out.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        out.emplace(labels[i], i);
    }
    return out;
}

} // namespace detail

/**
 * @brief Non-negative gene-by-column matrix with unique row and column labels.
 *
 * Immutable once constructed; the constructor enforces every invariant.
 */
class ExpressionMatrix {
public:
    ExpressionMatrix() = default;

    ExpressionMatrix(Labels row_labels, Labels col_labels, Matrix values)
        : rows_(std::move(row_labels)), cols_(std::move(col_labels)), values_(std::move(values)) {
        if (static_cast<std::size_t>(values_.rows()) != rows_.size() ||
            static_cast<std::size_t>(values_.cols()) != cols_.size()) {
            throw DataError("expression matrix dimensions do not match its labels");
        }
        detail::require_unique(rows_, "gene");
        detail::require_unique(cols_, "column");
        for (Eigen::Index j = 0; j < values_.cols(); ++j) {
            for (Eigen::Index i = 0; i < values_.rows(); ++i) {
                const double v = values_(i, j);
                if (!std::isfinite(v) || v < 0) {
                    throw DataError("expression value for gene '" + rows_[i] + "', column '" + cols_[j] +
                                    "' must be finite and non-negative");
                }
            }
        }
    }

    const Labels& row_labels() const { return rows_; }
    const Labels& col_labels() const { return cols_; }
    const Matrix& values() const { return values_; }

    std::size_t n_rows() const { return rows_.size(); }
    std::size_t n_cols() const { return cols_.size(); }

    std::optional<std::size_t> col_index(const std::string& label) const {
        for (std::size_t j = 0; j < cols_.size(); ++j) {
            if (cols_[j] == label) {
                return j;
            }
        }
        return std::nullopt;
    }

    /// Rows in the given order; indices must be valid and distinct.
    ExpressionMatrix select_rows(const std::vector<std::size_t>& idx) const {
        Labels labels;
        labels.reserve(idx.size());
        Matrix out(static_cast<Eigen::Index>(idx.size()), values_.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            labels.push_back(rows_.at(idx[k]));
            out.row(static_cast<Eigen::Index>(k)) = values_.row(static_cast<Eigen::Index>(idx[k]));
        }
        return ExpressionMatrix(std::move(labels), cols_, std::move(out));
    }

    ExpressionMatrix select_cols(const std::vector<std::size_t>& idx) const {
        Labels labels;
        labels.reserve(idx.size());
        Matrix out(values_.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            labels.push_back(cols_.at(idx[k]));
            out.col(static_cast<Eigen::Index>(k)) = values_.col(static_cast<Eigen::Index>(idx[k]));
        }
        return ExpressionMatrix(rows_, std::move(labels), std::move(out));
    }

private:
    Labels rows_;
    Labels cols_;
    Matrix values_;
};

/**
 * @brief Assignment of replicate reference columns to cell-types.
 *
 * The cell-type order is the order in which types first appear, unless an
 * explicit order is supplied.
 */
class ReplicateGrouping {
public:
    ReplicateGrouping() = default;

    explicit ReplicateGrouping(std::vector<std::pair<std::string, std::string>> column_to_type,
                               Labels celltype_order = {})
        : assignment_(std::move(column_to_type)), types_(std::move(celltype_order)) {
        std::unordered_set<std::string> columns;
        for (const auto& [col, type] : assignment_) {
            if (!columns.insert(col).second) {
                throw DataError("replicate column '" + col + "' is mapped more than once");
            }
        }
        if (types_.empty()) {
            std::unordered_set<std::string> seen;
            for (const auto& [col, type] : assignment_) {
                if (seen.insert(type).second) {
                    types_.push_back(type);
                }
            }
        } else {
            detail::require_unique(types_, "cell-type");
            const auto known = detail::index_of(types_);
            for (const auto& [col, type] : assignment_) {
                if (!known.count(type)) {
                    throw DataError("column '" + col + "' maps to unlisted cell-type '" + type + "'");
                }
            }
        }
        for (const auto& t : types_) {
            if (members(t).empty()) {
                throw DataError("cell-type '" + t + "' has no replicate column");
            }
        }
    }

    const Labels& celltypes() const { return types_; }
    const std::vector<std::pair<std::string, std::string>>& assignment() const { return assignment_; }

    std::optional<std::string> type_of(const std::string& column) const {
        for (const auto& [col, type] : assignment_) {
            if (col == column) {
                return type;
            }
        }
        return std::nullopt;
    }

    Labels members(const std::string& type) const {
        Labels out;
        for (const auto& [col, t] : assignment_) {
            if (t == type) {
                out.push_back(col);
            }
        }
        return out;
    }

    /// Column indices of `h` grouped per cell-type, in celltypes() order.
    std::vector<std::vector<std::size_t>> column_groups(const ExpressionMatrix& h) const {
        const auto type_idx = detail::index_of(types_);
        std::vector<std::vector<std::size_t>> groups(types_.size());
        for (std::size_t j = 0; j < h.n_cols(); ++j) {
            const auto t = type_of(h.col_labels()[j]);
            if (!t) {
                throw DataError("reference column '" + h.col_labels()[j] + "' is not in the replicate map");
            }
            groups[type_idx.at(*t)].push_back(j);
        }
        for (std::size_t t = 0; t < groups.size(); ++t) {
            if (groups[t].empty()) {
                throw DataError("cell-type '" + types_[t] + "' has no column in the reference matrix");
            }
        }
        return groups;
    }

private:
    std::vector<std::pair<std::string, std::string>> assignment_;
    Labels types_;
};

struct ConstraintStatus {
    bool nonneg_satisfied = false;
    bool sto_satisfied = false;
};

/// Cell-type by sample coefficient matrix (C).
struct ConcentrationMatrix {
    Labels celltype_labels;
    Labels sample_labels;
    Matrix values;
    ConstraintStatus status;

    /// Builds the matrix and derives the constraint flags from the values.
    static ConcentrationMatrix from_values(Labels celltypes, Labels samples, Matrix values) {
        if (static_cast<std::size_t>(values.rows()) != celltypes.size() ||
            static_cast<std::size_t>(values.cols()) != samples.size()) {
            throw DataError("concentration matrix dimensions do not match its labels");
        }
        ConcentrationMatrix out{std::move(celltypes), std::move(samples), std::move(values), {}};
        out.status.nonneg_satisfied = (out.values.array() >= 0).all();
        out.status.sto_satisfied = true;
        for (Eigen::Index j = 0; j < out.values.cols(); ++j) {
            if (std::abs(out.values.col(j).sum() - 1.0) > 1e-9) {
                out.status.sto_satisfied = false;
            }
        }
        return out;
    }
};

/// Concentrations expressed in percent; every column sums to 100.
struct PercentageMatrix {
    Labels celltype_labels;
    Labels sample_labels;
    Matrix values;
};

/**
 * @brief Averages replicate columns of `h` per cell-type (linear scale).
 *
 * The result has one column per cell-type, in the grouping's order.
 */
inline ExpressionMatrix collapse_replicates(const ExpressionMatrix& h, const ReplicateGrouping& grouping) {
    const auto groups = grouping.column_groups(h);
    Matrix g(static_cast<Eigen::Index>(h.n_rows()), static_cast<Eigen::Index>(groups.size()));
    for (std::size_t t = 0; t < groups.size(); ++t) {
        Vector acc = Vector::Zero(g.rows());
        for (auto j : groups[t]) {
            acc += h.values().col(static_cast<Eigen::Index>(j));
        }
        g.col(static_cast<Eigen::Index>(t)) = acc / static_cast<double>(groups[t].size());
    }
    return ExpressionMatrix(h.row_labels(), grouping.celltypes(), std::move(g));
}

/// Normalizes one non-negative vector to sum to one.
inline Vector normalize_to_simplex(const Vector& c) {
    if ((c.array() < 0).any()) {
        throw DegenerateSolutionError("concentration vector has negative entries");
    }
    const double total = c.sum();
    if (!(total > 0) || !std::isfinite(total)) {
        throw DegenerateSolutionError("concentration vector sums to zero");
    }
    return c / total;
}

inline PercentageMatrix to_percentages(const Labels& celltypes, const Labels& samples, const Matrix& c) {
    Matrix p(c.rows(), c.cols());
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
        try {
            p.col(j) = 100.0 * normalize_to_simplex(c.col(j));
        } catch (const DegenerateSolutionError& e) {
            throw DegenerateSolutionError("sample '" + samples.at(static_cast<std::size_t>(j)) + "': " + e.what());
        }
    }
    return PercentageMatrix{celltypes, samples, std::move(p)};
}

inline PercentageMatrix to_percentages(const ConcentrationMatrix& c) {
    return to_percentages(c.celltype_labels, c.sample_labels, c.values);
}

/// Re-normalizing an existing percentage matrix (idempotence of to_percentages).
inline PercentageMatrix to_percentages(const PercentageMatrix& p) {
    return to_percentages(p.celltype_labels, p.sample_labels, p.values);
}

struct AlignedPair {
    ExpressionMatrix mixture;
    ExpressionMatrix reference;
    std::size_t dropped_from_mixture = 0;
    std::size_t dropped_from_reference = 0;
};

/**
 * @brief Restricts both matrices to their shared genes.
 *
 * Output rows follow the mixture's gene order. Genes are matched by exact
 * identifier equality.
 */
inline AlignedPair validate_alignment(const ExpressionMatrix& mixture, const ExpressionMatrix& reference) {
    const auto ref_index = detail::index_of(reference.row_labels());
    std::vector<std::size_t> mix_rows;
    std::vector<std::size_t> ref_rows;
    for (std::size_t i = 0; i < mixture.n_rows(); ++i) {
        auto it = ref_index.find(mixture.row_labels()[i]);
        if (it != ref_index.end()) {
            mix_rows.push_back(i);
            ref_rows.push_back(it->second);
        }
    }
    if (mix_rows.empty()) {
        throw DataError("mixture and reference share no gene identifiers");
    }
    return AlignedPair{mixture.select_rows(mix_rows), reference.select_rows(ref_rows),
                       mixture.n_rows() - mix_rows.size(), reference.n_rows() - ref_rows.size()};
}

} // namespace deconv
