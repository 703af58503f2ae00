#pragma once

#include "error.hpp"
#include "model.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

/**
 * @file tsv.hpp
 * @brief Tab-separated readers and writers for expression, grouping and concentration tables.
 *
 * Values are written in the shortest form that parses back to the same double.
 */

namespace deconv {

inline std::string format_double(double v) {
    if (std::isnan(v)) {
        return "";
    }
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace tsv {

struct Table {
    std::string source;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers; ///< 1-based line of each row
};

inline std::vector<std::string> split_tabs(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

inline std::string where(const std::string& source, std::size_t line) {
    return source + ":" + std::to_string(line) + ": ";
}

/// Parses tab-separated text; blank lines are skipped, every row must match the header width.
inline Table parse(std::istream& in, const std::string& source) {
    Table t;
    t.source = source;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) {
            line.erase(0, 3);
        }
        if (line.empty()) {
            continue;
        }
        auto fields = split_tabs(line);
        if (!have_header) {
            t.header = std::move(fields);
            have_header = true;
            continue;
        }
        if (fields.size() != t.header.size()) {
            throw DataError(where(source, lineno) + "expected " + std::to_string(t.header.size()) + " fields, found " +
                            std::to_string(fields.size()));
        }
        t.rows.push_back(std::move(fields));
        t.line_numbers.push_back(lineno);
    }
    if (!have_header) {
        throw DataError(source + ": empty file (missing header)");
    }
    return t;
}

inline Table read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(path + ": cannot open file");
    }
    return parse(in, path);
}

inline double parse_number(const std::string& s, const std::string& source, std::size_t line) {
    std::string_view v = s;
    if (!v.empty() && v.front() == '+') {
        v.remove_prefix(1);
    }
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw DataError(where(source, line) + "non-numeric value '" + s + "'");
    }
    return out;
}

inline void expect_header(const Table& t, const std::vector<std::string>& prefix, bool exact) {
    const bool size_ok = exact ? t.header.size() == prefix.size() : t.header.size() > prefix.size() - 1;
    bool ok = size_ok;
    for (std::size_t i = 0; ok && i < prefix.size(); ++i) {
        ok = t.header[i] == prefix[i];
    }
    if (!ok) {
        std::string want;
        for (const auto& p : prefix) {
            want += (want.empty() ? "" : "\\t") + p;
        }
        throw DataError(where(t.source, 1) + "malformed header (expected '" + want + (exact ? "'" : "...'") + ")");
    }
}

struct NumericBlock {
    Labels rows;
    Labels cols;
    Matrix values;
};

/// Row-labelled numeric matrix with a named first column.
inline NumericBlock numeric_block(const Table& t, const std::string& key, bool non_negative) {
    expect_header(t, {key}, false);
    if (t.header.size() < 2) {
        throw DataError(where(t.source, 1) + "header has no data columns");
    }
    Labels cols(t.header.begin() + 1, t.header.end());
    Labels rows;
    Matrix values(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(cols.size()));
    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& f = t.rows[r];
        const auto line = t.line_numbers[r];
        if (f[0].empty()) {
            throw DataError(where(t.source, line) + "empty " + key + " identifier");
        }
        auto [it, inserted] = seen.emplace(f[0], line);
        if (!inserted) {
            throw DataError(where(t.source, line) + "duplicate " + key + " '" + f[0] + "' (first seen on line " +
                            std::to_string(it->second) + ")");
        }
        rows.push_back(f[0]);
        for (std::size_t c = 1; c < f.size(); ++c) {
            const double v = parse_number(f[c], t.source, line);
            if (non_negative && v < 0) {
                throw DataError(where(t.source, line) + "negative value " + f[c] + " in column '" + cols[c - 1] + "'");
            }
            values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c - 1)) = v;
        }
    }
    if (rows.empty()) {
        throw DataError(t.source + ": no data rows");
    }
    return {std::move(rows), std::move(cols), std::move(values)};
}

} // namespace tsv

inline ExpressionMatrix read_expression(std::istream& in, const std::string& source = "<stream>") {
    auto b = tsv::numeric_block(tsv::parse(in, source), "gene", true);
    return ExpressionMatrix(std::move(b.rows), std::move(b.cols), std::move(b.values));
}

inline ExpressionMatrix read_expression_file(const std::string& path) {
    auto b = tsv::numeric_block(tsv::read_file(path), "gene", true);
    return ExpressionMatrix(std::move(b.rows), std::move(b.cols), std::move(b.values));
}

inline void write_expression(std::ostream& out, const ExpressionMatrix& x) {
    out << "gene";
    for (const auto& c : x.col_labels()) {
        out << '\t' << c;
    }
    out << '\n';
    for (std::size_t i = 0; i < x.n_rows(); ++i) {
        out << x.row_labels()[i];
        for (std::size_t j = 0; j < x.n_cols(); ++j) {
            out << '\t' << format_double(x.values()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        }
        out << '\n';
    }
}

inline ReplicateGrouping read_replicate_map(std::istream& in, const std::string& source = "<stream>") {
    const auto t = tsv::parse(in, source);
    tsv::expect_header(t, {"column", "celltype"}, true);
    std::vector<std::pair<std::string, std::string>> pairs;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (t.rows[r][0].empty() || t.rows[r][1].empty()) {
            throw DataError(tsv::where(source, t.line_numbers[r]) + "empty column or cell-type name");
        }
        pairs.emplace_back(t.rows[r][0], t.rows[r][1]);
    }
    if (pairs.empty()) {
        throw DataError(source + ": no data rows");
    }
    try {
        return ReplicateGrouping(std::move(pairs));
    } catch (const DataError& e) {
        throw DataError(source + ": " + e.what());
    }
}

inline ReplicateGrouping read_replicate_map_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(path + ": cannot open file");
    }
    return read_replicate_map(in, path);
}

inline void write_replicate_map(std::ostream& out, const ReplicateGrouping& g) {
    out << "column\tcelltype\n";
    for (const auto& [col, type] : g.assignment()) {
        out << col << '\t' << type << '\n';
    }
}

/// Truth table: header celltype<TAB>sample..., non-negative values.
inline ConcentrationMatrix read_truth(std::istream& in, const std::string& source = "<stream>") {
    auto b = tsv::numeric_block(tsv::parse(in, source), "celltype", true);
    return ConcentrationMatrix::from_values(std::move(b.rows), std::move(b.cols), std::move(b.values));
}

inline ConcentrationMatrix read_truth_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(path + ": cannot open file");
    }
    return read_truth(in, path);
}

inline void write_truth(std::ostream& out, const ConcentrationMatrix& c) {
    out << "celltype";
    for (const auto& s : c.sample_labels) {
        out << '\t' << s;
    }
    out << '\n';
    for (std::size_t t = 0; t < c.celltype_labels.size(); ++t) {
        out << c.celltype_labels[t];
        for (std::size_t j = 0; j < c.sample_labels.size(); ++j) {
            out << '\t' << format_double(c.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)));
        }
        out << '\n';
    }
}

/// One estimate in long form, keyed by configuration.
struct ConcentrationRecord {
    std::string config_id;
    std::string sample;
    std::string celltype;
    double value = 0.0;
};

inline void write_concentrations_header(std::ostream& out) { out << "config_id\tsample\tcelltype\tconcentration\n"; }

inline void write_concentrations(std::ostream& out, const std::string& config_id, const ConcentrationMatrix& c) {
    for (std::size_t j = 0; j < c.sample_labels.size(); ++j) {
        for (std::size_t t = 0; t < c.celltype_labels.size(); ++t) {
            out << config_id << '\t' << c.sample_labels[j] << '\t' << c.celltype_labels[t] << '\t'
                << format_double(c.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j))) << '\n';
        }
    }
}

inline std::vector<ConcentrationRecord> read_concentrations(std::istream& in, const std::string& source = "<stream>") {
    const auto t = tsv::parse(in, source);
    tsv::expect_header(t, {"config_id", "sample", "celltype", "concentration"}, true);
    std::vector<ConcentrationRecord> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& f = t.rows[r];
        out.push_back({f[0], f[1], f[2], tsv::parse_number(f[3], source, t.line_numbers[r])});
    }
    return out;
}

/// Rebuilds the wide matrix of one configuration from long-form records.
inline ConcentrationMatrix concentrations_for(const std::vector<ConcentrationRecord>& records,
                                              const std::string& config_id) {
    Labels types, samples;
    std::unordered_map<std::string, std::size_t> ti, si;
    for (const auto& r : records) {
        if (r.config_id != config_id) continue;
        if (ti.emplace(r.celltype, types.size()).second) types.push_back(r.celltype);
        if (si.emplace(r.sample, samples.size()).second) samples.push_back(r.sample);
    }
    if (types.empty()) {
        throw DataError("no concentrations for configuration '" + config_id + "'");
    }
    Matrix v = Matrix::Constant(static_cast<Eigen::Index>(types.size()), static_cast<Eigen::Index>(samples.size()),
                                std::numeric_limits<double>::quiet_NaN());
    for (const auto& r : records) {
        if (r.config_id != config_id) continue;
        v(static_cast<Eigen::Index>(ti[r.celltype]), static_cast<Eigen::Index>(si[r.sample])) = r.value;
    }
    if (v.hasNaN()) {
        throw DataError("configuration '" + config_id + "' has missing cell-type/sample entries");
    }
    return ConcentrationMatrix::from_values(std::move(types), std::move(samples), std::move(v));
}

} // namespace deconv
