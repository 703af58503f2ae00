#include "helpers.hpp"

#include <deconv/pipeline.hpp>
#include <deconv/synth.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace deconv;
namespace fs = std::filesystem;

namespace {

class PipelineTest : public ::testing::Test {
protected:
    fs::path dir;
    SynthData data;

    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("deconv_pipeline_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        SynthSpec s;
        s.n_genes = 200;
        s.n_types = 3;
        s.n_samples = 4;
        s.markers_per_type = 15;
        data = generate(s, 17);
        write("mixture.tsv", [&](std::ostream& o) { write_expression(o, data.m); });
        write("reference.tsv", [&](std::ostream& o) { write_expression(o, data.g_true); });
        write("truth.tsv", [&](std::ostream& o) { write_truth(o, data.c_true); });
        const auto reps = make_replicates(data.g_true, 6, 0.1, 17);
        write("replicates.tsv", [&](std::ostream& o) { write_expression(o, reps.h); });
        write("replicate_map.tsv", [&](std::ostream& o) { write_replicate_map(o, reps.grouping); });
    }

    void TearDown() override { fs::remove_all(dir); }

    template <class F>
    void write(const std::string& name, F&& f) {
        std::ofstream out(dir / name);
        f(out);
    }

    std::string path(const std::string& name) const { return (dir / name).string(); }

    Settings base(bool truth = true) const {
        Settings s;
        s["dataset.mixture"] = path("mixture.tsv");
        s["dataset.reference"] = path("reference.tsv");
        if (truth) s["dataset.truth"] = path("truth.tsv");
        s["eval.samples"] = "200";
        s["output.dir"] = path("out");
        return s;
    }

    static std::map<std::string, std::string> as_map(const OutputFiles& files) {
        return {files.begin(), files.end()};
    }
};

tsv::Table parse_text(const std::string& text) {
    std::istringstream in(text);
    return tsv::parse(in, "text");
}

} // namespace

TEST(Config, DefaultsAndKeys) {
    const auto c = make_experiment_config({});
    EXPECT_EQ(c.losses.size(), 4u);
    EXPECT_EQ(expand_grid(c).size(), 16u);
    EXPECT_EQ(c.scope, FilterScope::per_sample);
    EXPECT_EQ(c.normalization, KneeNormalization::unit);
    EXPECT_DOUBLE_EQ(c.effective_q_cut(), 1e-3);
    EXPECT_EQ(c.baseline_samples, 10000u);
    EXPECT_TRUE(is_config_key("solver.losses"));
    EXPECT_FALSE(is_config_key("solver.nope"));
}

TEST(Config, RangeFilterTightensAutomaticQCut) {
    Settings s;
    s["filters.range"] = "fixed";
    EXPECT_DOUBLE_EQ(make_experiment_config(s).effective_q_cut(), 1e-5);
    s["markers.q_cut"] = "0.01";
    EXPECT_DOUBLE_EQ(make_experiment_config(s).effective_q_cut(), 0.01);
}

TEST(Config, InvalidValuesAreUsageErrors) {
    for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
             {"solver.losses", "l3"},
             {"solver.nn", "sometimes"},
             {"filters.range", "maybe"},
             {"filters.range_lo", "abc"},
             {"markers.q_cut", "2"},
             {"solver.alpha", "1.5"},
             {"solver.regularizer", "group_lasso"},
             {"eval.samples", "0"},
             {"no.such", "1"}}) {
        Settings s;
        s[k] = v;
        EXPECT_THROW(make_experiment_config(s), UsageError) << k << "=" << v;
    }
    Settings both;
    both["solver.regularizer"] = "ridge";
    EXPECT_THROW(make_experiment_config(both), UsageError);
    both["solver.loss_param"] = "0.5";
    EXPECT_NO_THROW(make_experiment_config(both));
}

TEST_F(PipelineTest, ConfigFileReadsSectionsAndRejectsUnknownKeys) {
    write("good.ini", [](std::ostream& o) { o << "[solver]\nlosses = l2,l1\n[eval]\nseed = 9\n"; });
    const auto s = read_config_file(path("good.ini"));
    EXPECT_EQ(s.at("solver.losses"), "l2,l1");
    EXPECT_EQ(s.at("eval.seed"), "9");
    EXPECT_EQ(s.at("solver.sto"), "implicit,explicit");
    write("bad.ini", [](std::ostream& o) { o << "[solver]\nloss = l2\n"; });
    EXPECT_THROW(read_config_file(path("bad.ini")), UsageError);
}

TEST_F(PipelineTest, DefaultGridGivesSixteenRowsAndRecovers) {
    const auto r = run_grid(make_experiment_config(base()));
    const auto files = as_map(render_outputs(r, "t0", "t1"));
    const auto metrics = parse_text(files.at("metrics.tsv"));
    EXPECT_EQ(metrics.header, (std::vector<std::string>{"config_id", "loss", "nn", "sto", "regularizer", "lambda", "mad",
                                                        "rmsd", "r2d", "p_mad", "p_rmsd", "p_r2d", "n_genes_used"}));
    ASSERT_EQ(metrics.rows.size(), 16u);
    for (const auto& row : metrics.rows) {
        EXPECT_LT(std::stod(row[6]), 0.5) << row[0];
        EXPECT_DOUBLE_EQ(std::stod(row[9]), 1.0 / 200.0);
        EXPECT_EQ(row[12], "200");
    }
    std::istringstream conc(files.at("concentrations.tsv"));
    const auto recs = read_concentrations(conc);
    EXPECT_EQ(recs.size(), 16u * 4u * 3u);
    for (const auto& name : {"filter_report.tsv", "condition_curve.tsv", "sorted_expression.tsv", "per_sample.tsv",
                             "errors.tsv", "loss_curve.tsv", "measure_agreement.tsv"}) {
        EXPECT_NO_THROW(parse_text(files.at(name))) << name;
    }
    EXPECT_NE(files.at("manifest.txt").find("configurations\t16"), std::string::npos);
}

TEST_F(PipelineTest, WithoutTruthMetricColumnsAreEmpty) {
    Settings s = base(false);
    s["solver.losses"] = "l2,huber";
    s["solver.grid_criterion"] = "residual";
    const auto r = run_grid(make_experiment_config(s));
    const auto metrics = parse_text(as_map(render_outputs(r, "a", "b")).at("metrics.tsv"));
    ASSERT_EQ(metrics.rows.size(), 8u);
    for (const auto& row : metrics.rows) {
        for (int k = 6; k < 12; ++k) EXPECT_EQ(row[k], "");
        EXPECT_NE(row[12], "");
    }
}

TEST_F(PipelineTest, OracleCriterionWithoutTruthIsUsageError) {
    Settings s = base(false);
    s["solver.grid_criterion"] = "oracle";
    EXPECT_THROW(run_grid(make_experiment_config(s)), UsageError);
}

TEST_F(PipelineTest, OutputsIndependentOfWorkersAndReruns) {
    Settings s = base();
    s["filters.sto_violation"] = "on";
    s["filters.range"] = "adaptive";
    const auto one = as_map(render_outputs(run_grid(make_experiment_config(s)), "x", "y"));
    s["output.workers"] = "3";
    const auto three = as_map(render_outputs(run_grid(make_experiment_config(s)), "x", "y"));
    const auto again = as_map(render_outputs(run_grid(make_experiment_config(s)), "x", "y"));
    EXPECT_EQ(one, three);
    EXPECT_EQ(three, again);
}

TEST_F(PipelineTest, MarkerSelectionNeedsReplicateMap) {
    Settings s = base();
    s["markers.method"] = "abbas";
    EXPECT_THROW(run_grid(make_experiment_config(s)), UsageError);
}

TEST_F(PipelineTest, MarkerStagesRestrictGenes) {
    for (const std::string method : {"abbas", "newman", "balanced"}) {
        Settings s = base();
        s["dataset.reference"] = path("replicates.tsv");
        s["dataset.replicate_map"] = path("replicate_map.tsv");
        s["markers.method"] = method;
        s["solver.losses"] = "l2";
        const auto r = run_grid(make_experiment_config(s));
        ASSERT_TRUE(r.markers.cut) << method;
        EXPECT_LT(r.markers.mask.kept(), 200u);
        EXPECT_EQ(r.markers.mask.kept(), r.markers.cut->selected.size());
        for (const auto& o : r.outcomes) {
            ASSERT_TRUE(o.eval);
            EXPECT_EQ(o.mean_genes, static_cast<double>(r.markers.mask.kept()));
        }
        const auto files = as_map(render_outputs(r, "a", "b"));
        EXPECT_GT(parse_text(files.at("condition_curve.tsv")).rows.size(), 1u);
    }
}

TEST_F(PipelineTest, StageOrderViolationThenRangeThenMarkers) {
    Settings s = base();
    s["dataset.reference"] = path("replicates.tsv");
    s["dataset.replicate_map"] = path("replicate_map.tsv");
    s["filters.sto_violation"] = "on";
    s["filters.scope"] = "any_sample";
    s["filters.range"] = "fixed";
    s["filters.range_lo"] = "5";
    s["markers.method"] = "abbas";
    s["solver.losses"] = "l2";
    const auto r = run_grid(make_experiment_config(s));
    const auto candidates = global_mask(r.filters);
    for (std::size_t i = 0; i < candidates.keep.size(); ++i) {
        if (r.markers.mask.keep[i]) EXPECT_TRUE(candidates.keep[i]);
        if (candidates.keep[i]) {
            EXPECT_TRUE(r.filters.sto->masks[0].keep[i]);
            EXPECT_TRUE(r.filters.range.keep[i]);
        }
    }
}

TEST_F(PipelineTest, RegularizedLambdaGridRuns) {
    Settings s = base();
    s["solver.losses"] = "l2";
    s["solver.nn"] = "explicit";
    s["solver.sto"] = "implicit";
    s["solver.regularizer"] = "ridge";
    const auto r = run_grid(make_experiment_config(s));
    ASSERT_EQ(r.outcomes.size(), 1u);
    EXPECT_TRUE(r.outcomes[0].ok);
    for (const auto& smp : r.outcomes[0].samples) EXPECT_FALSE(std::isnan(smp.lambda));
    const auto metrics = parse_text(as_map(render_outputs(r, "a", "b")).at("metrics.tsv"));
    EXPECT_EQ(metrics.rows[0][4], "ridge");
    EXPECT_EQ(metrics.rows[0][5], "grid");
}

TEST(LossCurve, SamplesEveryLoss) {
    const auto t = parse_text(loss_curve_tsv(1.0, 0.5, -3, 3, 7));
    ASSERT_EQ(t.rows.size(), 7u);
    EXPECT_EQ(t.header.size(), 5u);
    // At r = -3: l2 9, l1 3, huber 2*1*3 - 1 = 5, hinge 2.5.
    EXPECT_DOUBLE_EQ(std::stod(t.rows[0][1]), 9.0);
    EXPECT_DOUBLE_EQ(std::stod(t.rows[0][2]), 3.0);
    EXPECT_DOUBLE_EQ(std::stod(t.rows[0][3]), 5.0);
    EXPECT_DOUBLE_EQ(std::stod(t.rows[0][4]), 2.5);
}
