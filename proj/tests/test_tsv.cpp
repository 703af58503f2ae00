#include "helpers.hpp"

#include <deconv/tsv.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace deconv;

namespace {

std::string message_of(const std::string& text) {
    std::istringstream in(text);
    try {
        read_expression(in, "x.tsv");
    } catch (const DataError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(FormatDouble, ShortestRoundTrip) {
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(format_double(100), "100");
    EXPECT_EQ(format_double(std::nan("")), "");
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double v = std::exp(rng.uniform(-30, 30));
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
}

TEST(Expression, RoundTripIsBitEqual) {
    Rng rng(2);
    Matrix v = testutil::random_matrix(rng, 25, 4, 0, 5000);
    v(0, 0) = 0.0;
    v(1, 1) = 1e-300;
    const ExpressionMatrix x(testutil::labels("gene", 25), {"a", "b", "c", "d"}, v);
    std::stringstream ss;
    write_expression(ss, x);
    const auto y = read_expression(ss);
    EXPECT_EQ(y.row_labels(), x.row_labels());
    EXPECT_EQ(y.col_labels(), x.col_labels());
    EXPECT_EQ(y.values(), x.values());
}

TEST(Expression, ToleratesCrlfBomAndBlankLines) {
    std::istringstream in("\xEF\xBB\xBFgene\ts1\r\ng1\t1.5\r\n\r\ng2\t+2\r\n");
    const auto x = read_expression(in);
    EXPECT_EQ(x.col_labels(), (Labels{"s1"}));
    EXPECT_EQ(x.values()(1, 0), 2.0);
}

TEST(Expression, ErrorsCarryLineNumbers) {
    EXPECT_NE(message_of("gene\ts1\ng1\t1\ng2\t2\ng1\t3\n").find("x.tsv:4: duplicate gene 'g1' (first seen on line 2)"),
              std::string::npos);
    EXPECT_NE(message_of("gene\ts1\ng1\tabc\n").find("x.tsv:2: non-numeric value 'abc'"), std::string::npos);
    EXPECT_NE(message_of("gene\ts1\ng1\t-1\n").find("x.tsv:2: negative value"), std::string::npos);
    EXPECT_NE(message_of("probe\ts1\ng1\t1\n").find("x.tsv:1: malformed header"), std::string::npos);
    EXPECT_NE(message_of("gene\ts1\ts2\ng1\t1\n").find("x.tsv:2: expected 3 fields, found 2"), std::string::npos);
    EXPECT_NE(message_of("").find("missing header"), std::string::npos);
    EXPECT_NE(message_of("gene\ts1\n").find("no data rows"), std::string::npos);
    EXPECT_NE(message_of("gene\ts1\ng1\tnan\n").find("non-numeric"), std::string::npos);
    EXPECT_NE(message_of("gene\ts1\ts1\ng1\t1\t2\n").find("s1"), std::string::npos);
}

TEST(Expression, MissingFileIsDataError) {
    EXPECT_THROW(read_expression_file("/nonexistent/x.tsv"), DataError);
}

TEST(ReplicateMap, RoundTripAndErrors) {
    const ReplicateGrouping g({{"a1", "A"}, {"b1", "B"}, {"a2", "A"}});
    std::stringstream ss;
    write_replicate_map(ss, g);
    const auto back = read_replicate_map(ss);
    EXPECT_EQ(back.assignment(), g.assignment());
    EXPECT_EQ(back.celltypes(), (Labels{"A", "B"}));
    std::istringstream dup("column\tcelltype\na1\tA\na1\tB\n");
    EXPECT_THROW(read_replicate_map(dup), DataError);
    std::istringstream bad("col\ttype\na1\tA\n");
    EXPECT_THROW(read_replicate_map(bad), DataError);
}

TEST(Truth, RoundTrip) {
    Matrix v(2, 3);
    v << 0.25, 0.5, 1.0 / 3, 0.75, 0.5, 2.0 / 3;
    const auto c = ConcentrationMatrix::from_values({"A", "B"}, {"s1", "s2", "s3"}, v);
    std::stringstream ss;
    write_truth(ss, c);
    const auto back = read_truth(ss);
    EXPECT_EQ(back.values, v);
    EXPECT_TRUE(back.status.sto_satisfied);
}

TEST(Concentrations, LongFormRoundTrip) {
    Matrix v(2, 2);
    v << 0.1, 0.7, 0.9, 0.3;
    const auto c = ConcentrationMatrix::from_values({"A", "B"}, {"s1", "s2"}, v);
    std::stringstream ss;
    write_concentrations_header(ss);
    write_concentrations(ss, "l2.nn_explicit.sto_explicit", c);
    write_concentrations(ss, "l1.nn_explicit.sto_explicit", ConcentrationMatrix::from_values({"A", "B"}, {"s1", "s2"}, v.reverse()));
    const auto recs = read_concentrations(ss);
    EXPECT_EQ(recs.size(), 8u);
    const auto back = concentrations_for(recs, "l2.nn_explicit.sto_explicit");
    EXPECT_EQ(back.values, v);
    EXPECT_EQ(back.sample_labels, c.sample_labels);
    EXPECT_THROW(concentrations_for(recs, "missing"), DataError);
    auto partial = recs;
    partial.pop_back();
    EXPECT_THROW(concentrations_for(partial, "l1.nn_explicit.sto_explicit"), DataError);
}
