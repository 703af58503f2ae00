// Command-line front end: run, filter, markers, eval, synth, losscurve.

#include <deconv/deconv.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace {

using namespace deconv;

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitSolver = 3;

int exit_code(const Error& e) {
    switch (e.category()) {
    case ErrorCategory::usage:
        return kExitUsage;
    case ErrorCategory::data:
        return kExitData;
    case ErrorCategory::solver:
        return kExitSolver;
    }
    return kExitSolver;
}

// Every config key becomes --section.key; given flags override the file.
struct ConfigFlags {
    std::string config_file;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;

    void attach(CLI::App* app) {
        app->add_option("-c,--config", config_file, "configuration file (sections dataset/filters/markers/solver/eval/output)")
            ->check(CLI::ExistingFile);
        for (const auto& k : config_keys()) {
            const std::string name = k.name();
            std::string help = k.help;
            if (!k.default_value.empty()) help += " [default: " + k.default_value + "]";
            options[name] = app->add_option("--" + name, values[name], help);
        }
    }

    ExperimentConfig resolve() const {
        Settings s = config_file.empty() ? default_settings() : read_config_file(config_file);
        for (const auto& [name, opt] : options) {
            if (opt->count() > 0) s[name] = values.at(name);
        }
        return make_experiment_config(s);
    }
};

void write_text(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out) throw DataError("cannot write " + path);
}

int cmd_run(const ConfigFlags& flags) {
    const auto cfg = flags.resolve();
    const RunResult r = run_experiment(cfg);
    std::size_t failed = 0;
    for (const auto& o : r.outcomes) {
        if (!o.ok) ++failed;
    }
    std::cerr << "deconv: " << r.outcomes.size() << " configurations, " << failed << " with errors; outputs in "
              << cfg.out_dir << "\n";
    if (failed > 0 && failed == r.outcomes.size()) {
        for (const auto& s : r.outcomes.front().samples) {
            if (!s.ok) {
                std::cerr << "deconv: " << s.error << "\n";
                return s.category == ErrorCategory::data ? kExitData
                       : s.category == ErrorCategory::usage ? kExitUsage
                                                            : kExitSolver;
            }
        }
    }
    return 0;
}

int cmd_filter(const ConfigFlags& flags) {
    const auto cfg = flags.resolve();
    const LoadedData d = load_dataset(cfg);
    const FilterStage f = run_filters(d, cfg);

    std::ostringstream masks;
    masks << "gene\trange";
    if (f.sto) {
        for (std::size_t k = 0; k < f.sto->masks.size(); ++k) {
            masks << '\t' << (f.sto->scope == FilterScope::per_sample ? "sto:" + d.mixture.col_labels()[k] : "sto:any");
        }
    }
    masks << '\n';
    for (std::size_t i = 0; i < d.mixture.n_rows(); ++i) {
        masks << d.mixture.row_labels()[i] << '\t' << (f.range.keep[i] ? 1 : 0);
        if (f.sto) {
            for (const auto& m : f.sto->masks) masks << '\t' << (m.keep[i] ? 1 : 0);
        }
        masks << '\n';
    }

    RunResult partial;
    partial.config = cfg;
    partial.data = d;
    partial.filters = f;
    const FeatureMask base = global_mask(f);
    for (std::size_t j = 0; j < d.mixture.n_cols(); ++j) {
        FeatureMask mj = base;
        if (f.sto && f.sto->scope == FilterScope::per_sample) mj = combine_masks(f.sto->mask_for(j), mj);
        partial.sample_genes.push_back(mask_indices(mj));
    }
    write_files(cfg.out_dir, {{"filter_masks.tsv", masks.str()},
                              {"filter_report.tsv", detail::filter_report_tsv(partial)},
                              {"sorted_expression.tsv", detail::sorted_expression_tsv(f.curve)}});
    if (f.bounds_used) {
        std::cerr << "deconv: range bounds (log2) " << format_double(f.bounds_used->lo) << " "
                  << format_double(f.bounds_used->hi) << "\n";
    }
    return 0;
}

int cmd_markers(const ConfigFlags& flags) {
    auto cfg = flags.resolve();
    if (cfg.markers == MarkerMethod::none) {
        throw UsageError("markers: set --markers.method (abbas|newman|balanced)");
    }
    const LoadedData d = load_dataset(cfg);
    const FilterStage f = run_filters(d, cfg);
    const MarkerStage m = run_markers(d, cfg, global_mask(f));
    write_files(cfg.out_dir, {{"marker_scores.tsv", detail::marker_scores_tsv(m.scores, d.reference.col_labels())},
                              {"condition_curve.tsv", detail::condition_curve_tsv(m.cut)},
                              {"selected_markers.tsv", detail::selected_markers_tsv(m, d)}});
    if (m.newman) {
        for (const auto& t : m.newman->types_without_markers) {
            std::cerr << "deconv: warning: cell-type '" << t << "' has no significant marker\n";
        }
    }
    return 0;
}

struct EvalArgs {
    std::string truth;
    std::string estimate;
    std::string concentrations;
    std::string config_id;
    std::size_t samples = kDefaultBaselineDraws;
    std::uint64_t seed = 1;
    double qc_threshold = 3.0;
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    const ConcentrationMatrix truth = read_truth_file(a.truth);
    ConcentrationMatrix est;
    if (!a.estimate.empty()) {
        est = read_truth_file(a.estimate);
    } else {
        std::ifstream in(a.concentrations, std::ios::binary);
        if (!in) throw DataError(a.concentrations + ": cannot open file");
        est = concentrations_for(read_concentrations(in, a.concentrations), a.config_id);
    }
    const auto ti = detail::index_of(est.celltype_labels);
    const auto si = detail::index_of(est.sample_labels);
    Matrix aligned(truth.values.rows(), truth.values.cols());
    for (std::size_t t = 0; t < truth.celltype_labels.size(); ++t) {
        auto it = ti.find(truth.celltype_labels[t]);
        if (it == ti.end()) throw DataError("estimate lacks cell-type '" + truth.celltype_labels[t] + "'");
        for (std::size_t j = 0; j < truth.sample_labels.size(); ++j) {
            auto jt = si.find(truth.sample_labels[j]);
            if (jt == si.end()) throw DataError("estimate lacks sample '" + truth.sample_labels[j] + "'");
            aligned(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) =
                est.values(static_cast<Eigen::Index>(it->second), static_cast<Eigen::Index>(jt->second));
        }
    }
    if (est.celltype_labels.size() != truth.celltype_labels.size()) {
        throw DataError("estimate and truth have different cell-types");
    }
    const Matrix p = to_percentages(truth).values;
    const Matrix p_hat = to_percentages(truth.celltype_labels, truth.sample_labels, aligned).values;
    const RandomBaseline base = sample_baseline(p, a.samples, a.seed);
    const EvalResult r = evaluate(p, p_hat, &base);
    const SampleQc qc = per_sample_qc(p, p_hat, a.qc_threshold);

    std::ostringstream out;
    out << "mad\trmsd\tr2d\tp_mad\tp_rmsd\tp_r2d\n";
    out << format_double(r.mad) << '\t' << format_double(r.rmsd) << '\t' << format_double(r.r2d) << '\t'
        << format_double(r.p_mad) << '\t' << format_double(r.p_rmsd) << '\t' << format_double(r.p_r2d) << '\n';
    write_text(a.out, out.str());
    for (std::size_t j = 0; j < qc.flagged.size(); ++j) {
        if (qc.flagged[j]) {
            std::cerr << "deconv: sample '" << truth.sample_labels[j] << "' flagged (mAD " << format_double(qc.sample_mad[j])
                      << " > " << format_double(qc.threshold) << ")\n";
        }
    }
    return 0;
}

struct SynthArgs {
    SynthSpec spec;
    std::string noise = "none";
    double noise_scale = 10.0;
    double outlier_fraction = 0.1;
    double outlier_multiplier = 20.0;
    std::size_t replicates = 6;
    double replicate_sigma = 0.1;
    std::uint64_t seed = 1;
    std::string out = "synth_out";
};

int cmd_synth(SynthArgs a) {
    switch (parse_noise_kind(a.noise)) {
    case NoiseKind::none:
        a.spec.noise = NoiseModel::none();
        break;
    case NoiseKind::gaussian:
        a.spec.noise = NoiseModel::gaussian(a.noise_scale);
        break;
    case NoiseKind::laplacian:
        a.spec.noise = NoiseModel::laplacian(a.noise_scale);
        break;
    case NoiseKind::outlier:
        a.spec.noise = NoiseModel::outlier(a.noise_scale, a.outlier_fraction, a.outlier_multiplier);
        break;
    }
    const SynthData d = generate(a.spec, a.seed);
    std::ostringstream mix, ref, ref_true, truth, config;
    write_expression(mix, d.m);
    write_expression(ref, d.g_given);
    write_expression(ref_true, d.g_true);
    write_truth(truth, d.c_true);
    OutputFiles files{{"mixture.tsv", mix.str()},
                      {"reference.tsv", ref.str()},
                      {"reference_true.tsv", ref_true.str()},
                      {"truth.tsv", truth.str()}};
    const auto dir = std::filesystem::absolute(a.out);
    config << "[dataset]\nmixture = " << (dir / "mixture.tsv").string() << "\n";
    if (a.replicates > 0) {
        const ReplicateSet reps = make_replicates(d.g_given, a.replicates, a.replicate_sigma, a.seed);
        std::ostringstream h, map;
        write_expression(h, reps.h);
        write_replicate_map(map, reps.grouping);
        files.emplace_back("replicates.tsv", h.str());
        files.emplace_back("replicate_map.tsv", map.str());
        config << "reference = " << (dir / "replicates.tsv").string() << "\n";
        config << "replicate_map = " << (dir / "replicate_map.tsv").string() << "\n";
    } else {
        config << "reference = " << (dir / "reference.tsv").string() << "\n";
    }
    config << "truth = " << (dir / "truth.tsv").string() << "\n";
    files.emplace_back("config.ini", config.str());
    write_files(a.out, files);
    std::cerr << "deconv: wrote " << a.out << " (clamped " << format_double(100.0 * d.clamp_rate)
              << "% of mixture entries)\n";
    return 0;
}

struct LossCurveArgs {
    double huber_m = 1.0;
    double epsilon = 0.5;
    double lo = -3.0;
    double hi = 3.0;
    std::size_t points = 121;
    std::string out;
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cell-type deconvolution of expression mixtures"};
    app.set_version_flag("--version", std::string(DECONV_VERSION));
    app.require_subcommand(1);

    ConfigFlags run_flags, filter_flags, marker_flags;
    auto* run = app.add_subcommand("run", "run the loss/constraint grid and write all result tables");
    run_flags.attach(run);
    auto* filter = app.add_subcommand("filter", "write feature masks and filter reports");
    filter_flags.attach(filter);
    auto* markers = app.add_subcommand("markers", "write marker scores and the condition-number cut");
    marker_flags.attach(markers);

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "score an estimate against true concentrations");
    eval->add_option("--truth", ea.truth, "true concentrations TSV")->required()->check(CLI::ExistingFile);
    auto* est_opt = eval->add_option("--estimate", ea.estimate, "estimate TSV (celltype x sample)")->check(CLI::ExistingFile);
    auto* conc_opt = eval->add_option("--concentrations", ea.concentrations, "concentrations.tsv from a run")
                         ->check(CLI::ExistingFile);
    est_opt->excludes(conc_opt);
    eval->add_option("--config-id", ea.config_id, "configuration to read from --concentrations");
    eval->add_option("--samples", ea.samples, "random-baseline draws")->check(CLI::PositiveNumber)->capture_default_str();
    eval->add_option("--seed", ea.seed, "random seed")->capture_default_str();
    eval->add_option("--qc-threshold", ea.qc_threshold, "outlier rule k in median + k * MAD")->capture_default_str();
    eval->add_option("-o,--out", ea.out, "output TSV (default stdout)");

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with known concentrations");
    synth->add_option("--genes", sa.spec.n_genes, "number of genes")->capture_default_str();
    synth->add_option("--types", sa.spec.n_types, "number of cell-types")->capture_default_str();
    synth->add_option("--samples", sa.spec.n_samples, "number of mixture samples")->capture_default_str();
    synth->add_option("--markers", sa.spec.markers_per_type, "marker genes per cell-type")->capture_default_str();
    synth->add_option("--expression-lo", sa.spec.expression_lo, "lowest base expression (linear)")->capture_default_str();
    synth->add_option("--expression-hi", sa.spec.expression_hi, "highest base expression (linear)")->capture_default_str();
    synth->add_option("--leakage", sa.spec.leakage, "marker expression outside its type, relative")->capture_default_str();
    synth->add_option("--noise", sa.noise, "none|gaussian|laplacian|outlier")->capture_default_str();
    synth->add_option("--noise-scale", sa.noise_scale, "noise sigma or Laplace scale")->capture_default_str();
    synth->add_option("--outlier-fraction", sa.outlier_fraction, "fraction of outlier entries")->capture_default_str();
    synth->add_option("--outlier-multiplier", sa.outlier_multiplier, "outlier scale multiplier")->capture_default_str();
    synth->add_option("--scq-scale", sa.spec.scq_scale, "global mixture rescale")->capture_default_str();
    synth->add_option("--perturbation", sa.spec.reference_perturbation_sigma, "log-normal sigma on the given reference")
        ->capture_default_str();
    synth->add_option("--replicates", sa.replicates, "replicates per cell-type (0 = none)")->capture_default_str();
    synth->add_option("--replicate-sigma", sa.replicate_sigma, "log-normal replicate spread")->capture_default_str();
    synth->add_option("--seed", sa.seed, "random seed")->capture_default_str();
    synth->add_option("-o,--out", sa.out, "output directory")->capture_default_str();

    LossCurveArgs la;
    auto* losscurve = app.add_subcommand("losscurve", "sample the four loss functions");
    losscurve->add_option("--huber-m", la.huber_m, "Huber M")->capture_default_str();
    losscurve->add_option("--epsilon", la.epsilon, "hinge epsilon")->capture_default_str();
    losscurve->add_option("--lo", la.lo, "smallest residual")->capture_default_str();
    losscurve->add_option("--hi", la.hi, "largest residual")->capture_default_str();
    losscurve->add_option("--points", la.points, "number of points")->capture_default_str();
    losscurve->add_option("-o,--out", la.out, "output TSV (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUsage;
    }

    try {
        if (*run) return cmd_run(run_flags);
        if (*filter) return cmd_filter(filter_flags);
        if (*markers) return cmd_markers(marker_flags);
        if (*eval) {
            if (ea.estimate.empty() && ea.concentrations.empty()) {
                throw UsageError("eval: give --estimate or --concentrations");
            }
            if (!ea.concentrations.empty() && ea.config_id.empty()) {
                throw UsageError("eval: --concentrations needs --config-id");
            }
            return cmd_eval(ea);
        }
        if (*synth) return cmd_synth(sa);
        if (*losscurve) {
            write_text(la.out, loss_curve_tsv(la.huber_m, la.epsilon, la.lo, la.hi, la.points));
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "deconv: error: " << e.what() << "\n";
        return exit_code(e);
    } catch (const std::exception& e) {
        std::cerr << "deconv: internal error: " << e.what() << "\n";
        return kExitSolver;
    }
    return 0;
}
