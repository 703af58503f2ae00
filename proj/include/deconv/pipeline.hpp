#pragma once

#include "error.hpp"
#include "eval.hpp"
#include "filter.hpp"
#include "grid_search.hpp"
#include "marker.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "solver.hpp"
#include "tsv.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

/**
 * @file pipeline.hpp
 * @brief Experiment configuration and the end-to-end grid run.
 *
 * Stage order: alignment, sum-to-one violation filter, expression-range
 * filter, marker selection, regression, evaluation.
 */

#ifndef DECONV_VERSION
#define DECONV_VERSION "0.0.0"
#endif

namespace deconv {

/// One recognised configuration key; also the long CLI flag `--section.key`.
struct ConfigKey {
    std::string section;
    std::string key;
    std::string default_value;
    std::string help;

    std::string name() const { return section + "." + key; }
};

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"dataset", "mixture", "", "mixture expression TSV (genes x samples)"},
        {"dataset", "reference", "", "reference TSV: per-type profiles, or replicate profiles with replicate_map"},
        {"dataset", "replicate_map", "", "replicate map TSV (column, celltype); needed for marker selection"},
        {"dataset", "truth", "", "true concentrations TSV (celltype x sample); enables error metrics"},
        {"filters", "sto_violation", "off", "drop genes violating the sum-to-one conditions (on|off)"},
        {"filters", "scope", "per_sample", "violation filter scope (per_sample|any_sample)"},
        {"filters", "range", "none", "expression range filter (none|fixed|adaptive)"},
        {"filters", "range_lo", "3", "fixed range lower bound, log2 units"},
        {"filters", "range_hi", "12", "fixed range upper bound, log2 units"},
        {"filters", "normalization", "unit", "knee normalization for the adaptive range (unit|none)"},
        {"markers", "method", "none", "marker selection (none|abbas|newman|balanced)"},
        {"markers", "q_cut", "auto", "q-value cutoff for newman/balanced; auto = 1e-3, or 1e-5 with a range filter"},
        {"markers", "combine", "max_p", "how the second/third-type tests combine (max_p|second_only)"},
        {"markers", "step_cap", "1000", "maximum number of basis-growth steps"},
        {"solver", "losses", "l2,l1,huber,hinge", "comma-separated losses (l2|l1|huber|hinge)"},
        {"solver", "nn", "implicit,explicit", "non-negativity enforcement modes"},
        {"solver", "sto", "implicit,explicit", "sum-to-one enforcement modes"},
        {"solver", "loss_param", "grid", "Huber M / hinge epsilon, or grid"},
        {"solver", "regularizer", "none", "penalty (none|ridge|lasso|elastic_net|group_lasso)"},
        {"solver", "lambda", "grid", "penalty weight, or grid"},
        {"solver", "alpha", "0.5", "elastic-net mixing weight of the L1 part"},
        {"solver", "groups", "", "group lasso groups: cell-types separated by ',' and groups by ';'"},
        {"solver", "grid_criterion", "auto", "grid score (auto|oracle|residual); auto = oracle when truth is given"},
        {"solver", "max_iters", "10000", "iteration cap per solve"},
        {"solver", "tolerance", "1e-9", "relative objective tolerance"},
        {"eval", "samples", "10000", "random-baseline draws for empirical p-values"},
        {"eval", "seed", "1", "random seed"},
        {"eval", "qc_threshold", "3", "per-sample outlier rule: median + k * MAD"},
        {"output", "dir", "deconv_out", "output directory"},
        {"output", "workers", "1", "worker threads (0 = all cores); outputs do not depend on it"},
    };
    return keys;
}

using Settings = std::map<std::string, std::string>;

inline Settings default_settings() {
    Settings s;
    for (const auto& k : config_keys()) {
        s[k.name()] = k.default_value;
    }
    return s;
}

inline bool is_config_key(const std::string& name) {
    const auto& keys = config_keys();
    return std::any_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.name() == name; });
}

/// Reads a sectioned key = value file over `base`; unknown sections or keys are usage errors.
inline Settings read_config_file(const std::string& path, Settings base = default_settings()) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw UsageError("config file: " + std::string(e.what()));
    }
    for (const auto& [section, body] : tree) {
        if (body.empty()) {
            throw UsageError("config file " + path + ": key '" + section + "' is outside a section");
        }
        for (const auto& [key, value] : body) {
            const std::string name = section + "." + key;
            if (!is_config_key(name)) {
                throw UsageError("config file " + path + ": unknown key '" + name + "'");
            }
            base[name] = value.get_value<std::string>();
        }
    }
    return base;
}

enum class RangeMode { none, fixed, adaptive };
enum class MarkerMethod { none, abbas, newman, balanced };
enum class CriterionChoice { automatic, oracle, residual };

struct ExperimentConfig {
    std::string mixture;
    std::string reference;
    std::string replicate_map;
    std::string truth;

    bool sto_filter = false;
    FilterScope scope = FilterScope::per_sample;
    RangeMode range = RangeMode::none;
    RangeBounds fixed_bounds{};
    KneeNormalization normalization = KneeNormalization::unit;

    MarkerMethod markers = MarkerMethod::none;
    std::optional<double> q_cut; ///< empty = automatic
    AbbasCombine combine = AbbasCombine::max_p;
    std::size_t step_cap = kDefaultStepCap;

    std::vector<LossType> losses{LossType::squared_l2, LossType::absolute_l1, LossType::huber,
                                 LossType::eps_insensitive};
    std::vector<Enforcement> nn{Enforcement::implicit, Enforcement::explicit_};
    std::vector<Enforcement> sto{Enforcement::implicit, Enforcement::explicit_};
    std::optional<double> loss_param; ///< empty = grid
    RegularizerType regularizer = RegularizerType::none;
    std::optional<double> lambda; ///< empty = grid
    double alpha = 0.5;
    std::vector<std::vector<std::string>> groups;
    CriterionChoice criterion = CriterionChoice::automatic;
    SolverOptions solver{};

    std::size_t baseline_samples = kDefaultBaselineDraws;
    std::uint64_t seed = 1;
    double qc_threshold = 3.0;

    std::string out_dir = "deconv_out";
    unsigned workers = 1;

    Settings settings; ///< effective key/value form

    double effective_q_cut() const {
        if (q_cut) return *q_cut;
        return range == RangeMode::none ? kDefaultQCut : kRangeFilteredQCut;
    }
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        const auto b = cur.find_first_not_of(" \t");
        const auto e = cur.find_last_not_of(" \t");
        out.push_back(b == std::string::npos ? "" : cur.substr(b, e - b + 1));
    }
    return out;
}

inline double parse_real(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || !std::isfinite(out)) {
        throw UsageError(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

inline std::uint64_t parse_count(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw UsageError(key + ": integer out of range");
    }
}

inline std::optional<double> parse_real_or_grid(const Settings& s, const std::string& key) {
    if (s.at(key) == "grid") return std::nullopt;
    return parse_real(s, key);
}

template <class T>
T choose(const Settings& s, const std::string& key, const std::vector<std::pair<std::string, T>>& options) {
    const std::string& v = s.at(key);
    std::string names;
    for (const auto& [name, value] : options) {
        if (v == name) return value;
        names += (names.empty() ? "" : "|") + name;
    }
    throw UsageError(key + ": unknown value '" + v + "' (" + names + ")");
}

inline RegularizerType parse_regularizer_setting(const std::string& v) {
    if (v == "ridge") return RegularizerType::norm_two;
    if (v == "lasso") return RegularizerType::norm_one;
    try {
        return parse_regularizer_type(v);
    } catch (const Error&) {
        throw UsageError("solver.regularizer: unknown value '" + v + "' (none|ridge|lasso|elastic_net|group_lasso)");
    }
}

} // namespace detail

/// Validates and converts settings; enumerations and numbers are checked here, file existence at load time.
inline ExperimentConfig make_experiment_config(const Settings& settings) {
    Settings s = default_settings();
    for (const auto& [k, v] : settings) {
        if (!is_config_key(k)) {
            throw UsageError("unknown configuration key '" + k + "'");
        }
        s[k] = v;
    }
    ExperimentConfig c;
    c.settings = s;
    c.mixture = s["dataset.mixture"];
    c.reference = s["dataset.reference"];
    c.replicate_map = s["dataset.replicate_map"];
    c.truth = s["dataset.truth"];

    c.sto_filter = detail::choose<bool>(s, "filters.sto_violation", {{"on", true}, {"off", false}, {"true", true},
                                                                     {"false", false}});
    c.scope = detail::choose<FilterScope>(s, "filters.scope",
                                          {{"per_sample", FilterScope::per_sample}, {"any_sample", FilterScope::any_sample}});
    c.range = detail::choose<RangeMode>(s, "filters.range",
                                        {{"none", RangeMode::none}, {"fixed", RangeMode::fixed}, {"adaptive", RangeMode::adaptive}});
    c.fixed_bounds = RangeBounds::make(detail::parse_real(s, "filters.range_lo"), detail::parse_real(s, "filters.range_hi"));
    c.normalization = detail::choose<KneeNormalization>(
        s, "filters.normalization", {{"unit", KneeNormalization::unit}, {"none", KneeNormalization::none}});

    c.markers = detail::choose<MarkerMethod>(s, "markers.method",
                                             {{"none", MarkerMethod::none}, {"abbas", MarkerMethod::abbas},
                                              {"newman", MarkerMethod::newman}, {"balanced", MarkerMethod::balanced}});
    if (s["markers.q_cut"] != "auto") {
        c.q_cut = detail::parse_real(s, "markers.q_cut");
        if (!(*c.q_cut > 0 && *c.q_cut <= 1)) throw UsageError("markers.q_cut must lie in (0, 1]");
    }
    c.combine = detail::choose<AbbasCombine>(
        s, "markers.combine", {{"max_p", AbbasCombine::max_p}, {"second_only", AbbasCombine::second_only}});
    c.step_cap = detail::parse_count(s, "markers.step_cap");
    if (c.step_cap < 1) throw UsageError("markers.step_cap must be at least 1");

    c.losses.clear();
    for (const auto& name : detail::split(s["solver.losses"], ',')) {
        try {
            c.losses.push_back(parse_loss_type(name));
        } catch (const Error&) {
            throw UsageError("solver.losses: unknown loss '" + name + "' (l2|l1|huber|hinge)");
        }
    }
    auto modes = [&](const std::string& key) {
        std::vector<Enforcement> out;
        for (const auto& name : detail::split(s[key], ',')) {
            try {
                out.push_back(parse_enforcement(name));
            } catch (const Error&) {
                throw UsageError(key + ": unknown mode '" + name + "' (implicit|explicit)");
            }
        }
        if (out.empty()) throw UsageError(key + ": at least one mode is required");
        return out;
    };
    if (c.losses.empty()) throw UsageError("solver.losses: at least one loss is required");
    c.nn = modes("solver.nn");
    c.sto = modes("solver.sto");
    c.loss_param = detail::parse_real_or_grid(s, "solver.loss_param");
    if (c.loss_param && !(*c.loss_param >= 0)) throw UsageError("solver.loss_param must be >= 0");
    c.regularizer = detail::parse_regularizer_setting(s["solver.regularizer"]);
    c.lambda = detail::parse_real_or_grid(s, "solver.lambda");
    if (c.lambda && !(*c.lambda >= 0)) throw UsageError("solver.lambda must be >= 0");
    c.alpha = detail::parse_real(s, "solver.alpha");
    if (!(c.alpha >= 0 && c.alpha <= 1)) throw UsageError("solver.alpha must lie in [0, 1]");
    if (!s["solver.groups"].empty()) {
        for (const auto& grp : detail::split(s["solver.groups"], ';')) {
            c.groups.push_back(detail::split(grp, ','));
        }
    }
    if (c.regularizer == RegularizerType::group_lasso && c.groups.empty()) {
        throw UsageError("solver.groups is required for group_lasso");
    }
    c.criterion = detail::choose<CriterionChoice>(s, "solver.grid_criterion",
                                                  {{"auto", CriterionChoice::automatic},
                                                   {"oracle", CriterionChoice::oracle},
                                                   {"residual", CriterionChoice::residual}});
    c.solver.max_iters = static_cast<int>(std::min<std::uint64_t>(detail::parse_count(s, "solver.max_iters"), 1u << 30));
    c.solver.rel_tol = detail::parse_real(s, "solver.tolerance");
    if (!(c.solver.rel_tol > 0)) throw UsageError("solver.tolerance must be positive");

    c.baseline_samples = detail::parse_count(s, "eval.samples");
    if (c.baseline_samples < 1) throw UsageError("eval.samples must be at least 1");
    c.seed = detail::parse_count(s, "eval.seed");
    c.qc_threshold = detail::parse_real(s, "eval.qc_threshold");

    c.out_dir = s["output.dir"];
    c.workers = static_cast<unsigned>(detail::parse_count(s, "output.workers"));

    bool any_param_loss = false;
    for (auto l : c.losses) {
        any_param_loss = any_param_loss || l == LossType::huber || l == LossType::eps_insensitive;
    }
    if (any_param_loss && !c.loss_param && c.regularizer != RegularizerType::none && !c.lambda) {
        throw UsageError("grid search tunes one parameter: fix solver.loss_param or solver.lambda");
    }
    return c;
}

/// Canonical text of the settings that influence results.
inline std::string canonical_settings(const ExperimentConfig& c) {
    std::string out;
    for (const auto& [k, v] : c.settings) {
        if (k == "output.dir" || k == "output.workers") continue;
        out += k + "=" + v + "\n";
    }
    return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct LoadedData {
    ExpressionMatrix mixture;   ///< aligned to the reference genes
    ExpressionMatrix reference; ///< per-type profiles G
    std::optional<ExpressionMatrix> replicates; ///< H, row-aligned with reference
    std::optional<ReplicateGrouping> grouping;
    std::optional<ConcentrationMatrix> truth; ///< rows = reference types, cols = mixture samples
    std::size_t genes_mixture = 0;
    std::size_t genes_reference = 0;
};

inline LoadedData load_dataset(const ExperimentConfig& c) {
    if (c.mixture.empty() || c.reference.empty()) {
        throw UsageError("dataset.mixture and dataset.reference are required");
    }
    LoadedData d;
    const ExpressionMatrix m = read_expression_file(c.mixture);
    ExpressionMatrix ref = read_expression_file(c.reference);
    d.genes_mixture = m.n_rows();
    d.genes_reference = ref.n_rows();
    ExpressionMatrix g = ref;
    if (!c.replicate_map.empty()) {
        d.grouping = read_replicate_map_file(c.replicate_map);
        g = collapse_replicates(ref, *d.grouping);
    } else if (c.markers != MarkerMethod::none) {
        throw UsageError("marker selection needs dataset.replicate_map");
    }
    auto aligned = validate_alignment(m, g);
    d.mixture = std::move(aligned.mixture);
    d.reference = std::move(aligned.reference);
    if (d.grouping) {
        const auto idx = detail::index_of(ref.row_labels());
        std::vector<std::size_t> rows;
        for (const auto& gene : d.reference.row_labels()) {
            rows.push_back(idx.at(gene));
        }
        d.replicates = ref.select_rows(rows);
    }
    if (!c.truth.empty()) {
        const auto t = read_truth_file(c.truth);
        const auto ti = detail::index_of(t.celltype_labels);
        const auto si = detail::index_of(t.sample_labels);
        Matrix v(static_cast<Eigen::Index>(d.reference.n_cols()), static_cast<Eigen::Index>(d.mixture.n_cols()));
        for (std::size_t a = 0; a < d.reference.n_cols(); ++a) {
            auto it = ti.find(d.reference.col_labels()[a]);
            if (it == ti.end()) {
                throw DataError(c.truth + ": missing cell-type '" + d.reference.col_labels()[a] + "'");
            }
            for (std::size_t j = 0; j < d.mixture.n_cols(); ++j) {
                auto jt = si.find(d.mixture.col_labels()[j]);
                if (jt == si.end()) {
                    throw DataError(c.truth + ": missing sample '" + d.mixture.col_labels()[j] + "'");
                }
                v(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j)) =
                    t.values(static_cast<Eigen::Index>(it->second), static_cast<Eigen::Index>(jt->second));
            }
        }
        if (t.celltype_labels.size() != d.reference.n_cols()) {
            throw DataError(c.truth + ": cell-types do not match the reference");
        }
        d.truth = ConcentrationMatrix::from_values(d.reference.col_labels(), d.mixture.col_labels(), std::move(v));
    }
    return d;
}

struct FilterStage {
    std::optional<StoFilterResult> sto;
    FeatureMask range;
    std::optional<AdaptiveRange> curve; ///< sorted maxima with knees, when computable
    std::optional<RangeBounds> bounds_used;
};

inline FilterStage run_filters(const LoadedData& d, const ExperimentConfig& c) {
    FilterStage f;
    const std::size_t n = d.mixture.n_rows();
    if (c.sto_filter) {
        f.sto = sto_violation_filter(d.reference, d.mixture, c.scope);
    }
    f.range = FeatureMask::all(n, "range_none");
    try {
        f.curve = adaptive_range_bounds(d.mixture, d.reference, c.normalization);
    } catch (const DataError&) {
        if (c.range == RangeMode::adaptive) throw;
    }
    if (c.range == RangeMode::fixed) {
        f.bounds_used = c.fixed_bounds;
    } else if (c.range == RangeMode::adaptive) {
        f.bounds_used = f.curve->bounds;
    }
    if (f.bounds_used) {
        f.range = fixed_range_mask(d.mixture, d.reference, *f.bounds_used);
        if (f.range.kept() == 0) {
            throw EmptyBasisError("range filter retained no gene");
        }
    }
    return f;
}

/// Genes passing every sample-independent filter.
inline FeatureMask global_mask(const FilterStage& f) {
    FeatureMask m = f.range;
    if (f.sto && f.sto->scope == FilterScope::any_sample) {
        m = combine_masks(f.sto->masks.at(0), m);
    }
    return m;
}

struct MarkerStage {
    std::vector<MarkerScore> scores; ///< gene_index refers to the full aligned gene list
    std::optional<NewmanSelection> newman;
    std::optional<BasisCut> cut;
    FeatureMask mask;
};

inline MarkerStage run_markers(const LoadedData& d, const ExperimentConfig& c, const FeatureMask& candidates) {
    MarkerStage s;
    const std::size_t n = d.mixture.n_rows();
    s.mask = FeatureMask::all(n, "markers_none");
    if (c.markers == MarkerMethod::none) {
        return s;
    }
    const auto idx = mask_indices(candidates);
    if (idx.empty()) {
        throw EmptyBasisError("no gene left for marker selection");
    }
    const ExpressionMatrix h = d.replicates->select_rows(idx);
    const Matrix g = d.reference.select_rows(idx).values();
    auto scores = score_abbas(h, *d.grouping, c.combine);
    MarkerRanking ranking;
    CutMethod method = CutMethod::abbas_grow_one;
    if (c.markers == MarkerMethod::abbas) {
        ranking = ranking_from_abbas(scores, d.reference.n_cols());
    } else {
        s.newman = score_newman(h, *d.grouping, c.effective_q_cut(), c.combine);
        ranking = ranking_from_newman(*s.newman);
        method = c.markers == MarkerMethod::newman ? CutMethod::newman_grow_q : CutMethod::balanced_norm;
    }
    s.cut = optimal_cut(ranking, g, method, c.step_cap);
    auto remap = [&](std::size_t local) { return idx[local]; };
    for (auto& sc : scores) {
        sc.gene_index = remap(sc.gene_index);
    }
    if (s.newman) {
        for (auto& v : s.newman->per_type) {
            for (auto& sc : v) sc.gene_index = remap(sc.gene_index);
        }
    }
    for (auto& gi : s.cut->selected) {
        gi = remap(gi);
    }
    s.scores = std::move(scores);
    s.mask = FeatureMask{std::vector<bool>(n, false), "markers_" + cut_method_name(method)};
    for (auto gi : s.cut->selected) {
        s.mask.keep[gi] = true;
    }
    return s;
}

struct GridCell {
    std::string id;
    LossType loss = LossType::squared_l2;
    ConstraintMode constraints{};
};

inline std::vector<GridCell> expand_grid(const ExperimentConfig& c) {
    std::vector<GridCell> out;
    for (auto l : c.losses) {
        for (auto nn : c.nn) {
            for (auto sto : c.sto) {
                GridCell g;
                g.loss = l;
                g.constraints = {nn, sto};
                g.id = loss_name(l) + ".nn_" + enforcement_name(nn) + ".sto_" + enforcement_name(sto);
                if (std::find_if(out.begin(), out.end(), [&](const GridCell& o) { return o.id == g.id; }) == out.end()) {
                    out.push_back(g);
                }
            }
        }
    }
    return out;
}

struct SampleOutcome {
    bool ok = false;
    Vector c;
    double param = std::numeric_limits<double>::quiet_NaN();
    double lambda = std::numeric_limits<double>::quiet_NaN();
    double objective = std::numeric_limits<double>::quiet_NaN();
    double residual = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_genes = 0;
    std::string error;
    ErrorCategory category = ErrorCategory::solver;
};

struct ConfigOutcome {
    GridCell cell;
    std::vector<SampleOutcome> samples;
    bool ok = false;
    std::optional<EvalResult> eval;
    std::optional<SampleQc> qc;
    double mean_genes = 0.0;
};

struct RunResult {
    ExperimentConfig config;
    LoadedData data;
    FilterStage filters;
    MarkerStage markers;
    std::vector<std::vector<std::size_t>> sample_genes; ///< final gene rows per sample
    std::vector<ConfigOutcome> outcomes;
    std::optional<RandomBaseline> baseline;
    std::vector<std::string> stage_errors;
};

namespace detail {

inline Regularizer make_regularizer(const ExperimentConfig& c, const Labels& types, double lambda) {
    switch (c.regularizer) {
    case RegularizerType::none:
        return Regularizer::none();
    case RegularizerType::norm_two:
        return Regularizer::norm_two(lambda);
    case RegularizerType::norm_one:
        return Regularizer::norm_one(lambda);
    case RegularizerType::elastic_net:
        return Regularizer::elastic_net(lambda, c.alpha);
    case RegularizerType::group_lasso: {
        const auto ti = index_of(types);
        std::vector<std::vector<std::size_t>> groups;
        for (const auto& grp : c.groups) {
            std::vector<std::size_t> g;
            for (const auto& name : grp) {
                auto it = ti.find(name);
                if (it == ti.end()) {
                    throw UsageError("solver.groups: unknown cell-type '" + name + "'");
                }
                g.push_back(it->second);
            }
            groups.push_back(std::move(g));
        }
        return Regularizer::group_lasso(lambda, std::move(groups));
    }
    }
    return Regularizer::none();
}

inline bool has_loss_param(LossType t) { return t == LossType::huber || t == LossType::eps_insensitive; }

inline SampleOutcome solve_cell(const ExperimentConfig& c, const GridCell& cell, const Matrix& g, const Vector& m,
                                const std::optional<Vector>& truth, const Labels& types) {
    SampleOutcome out;
    out.n_genes = static_cast<std::size_t>(g.rows());
    DeconvolutionConfig cfg;
    cfg.constraints = cell.constraints;
    cfg.options = c.solver;
    const bool param_grid = has_loss_param(cell.loss) && !c.loss_param;
    const bool lambda_grid = c.regularizer != RegularizerType::none && !c.lambda;
    const double param = c.loss_param.value_or(1.0);
    switch (cell.loss) {
    case LossType::squared_l2:
        cfg.loss = LossKind::squared();
        break;
    case LossType::absolute_l1:
        cfg.loss = LossKind::absolute();
        break;
    case LossType::huber:
        cfg.loss = LossKind::huber(param);
        break;
    case LossType::eps_insensitive:
        cfg.loss = LossKind::eps_insensitive(param);
        break;
    }
    cfg.regularizer = make_regularizer(c, types, c.lambda.value_or(1.0));
    if (cfg.loss.has_param()) out.param = cfg.loss.param;
    if (c.regularizer != RegularizerType::none) out.lambda = cfg.regularizer.lambda;

    Solution sol;
    if (param_grid || lambda_grid) {
        GridCriterion crit = GridCriterion::residual_rmsd;
        if (c.criterion == CriterionChoice::oracle || (c.criterion == CriterionChoice::automatic && truth)) {
            if (!truth) throw UsageError("solver.grid_criterion = oracle needs dataset.truth");
            crit = GridCriterion::oracle_mad;
        }
        const auto res = grid_search_param(g, m, cfg, crit, truth, ParamGrid::decades(),
                                           param_grid ? SearchTarget::loss_param : SearchTarget::lambda);
        sol = res.best_solution;
        (res.target == SearchTarget::loss_param ? out.param : out.lambda) = res.best_param;
    } else {
        sol = deconvolve_sample(g, m, cfg);
    }
    out.ok = true;
    out.c = sol.coefficients;
    out.objective = sol.objective;
    out.residual = sol.residual_rmsd;
    return out;
}

} // namespace detail

/// Runs every stage and configuration; configuration-level failures are recorded, not thrown.
inline RunResult run_grid(const ExperimentConfig& c) {
    RunResult r;
    r.config = c;
    r.data = load_dataset(c);
    const auto& d = r.data;
    if (c.criterion == CriterionChoice::oracle && !d.truth) {
        throw UsageError("solver.grid_criterion = oracle needs dataset.truth");
    }
    r.filters = run_filters(d, c);
    const FeatureMask base = global_mask(r.filters);
    r.markers = run_markers(d, c, base);
    const FeatureMask fixed = combine_masks(base, r.markers.mask);

    const std::size_t p = d.mixture.n_cols();
    for (std::size_t j = 0; j < p; ++j) {
        FeatureMask mj = fixed;
        if (r.filters.sto && r.filters.sto->scope == FilterScope::per_sample) {
            mj = combine_masks(r.filters.sto->mask_for(j), mj);
        }
        r.sample_genes.push_back(mask_indices(mj));
    }

    std::optional<Matrix> p_true;
    if (d.truth) {
        p_true = to_percentages(*d.truth).values;
        r.baseline = sample_baseline(*p_true, c.baseline_samples, c.seed, c.workers);
    }

    const auto cells = expand_grid(c);
    r.outcomes.resize(cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) {
        r.outcomes[k].cell = cells[k];
        r.outcomes[k].samples.resize(p);
    }
    parallel_for(cells.size() * p, c.workers, [&](std::size_t idx) {
        const std::size_t k = idx / p;
        const std::size_t j = idx % p;
        auto& slot = r.outcomes[k].samples[j];
        const auto& rows = r.sample_genes[j];
        try {
            if (rows.empty()) {
                throw EmptyBasisError("sample '" + d.mixture.col_labels()[j] + "': no gene left after filtering");
            }
            Matrix g(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d.reference.n_cols()));
            Vector m(static_cast<Eigen::Index>(rows.size()));
            for (std::size_t i = 0; i < rows.size(); ++i) {
                g.row(static_cast<Eigen::Index>(i)) = d.reference.values().row(static_cast<Eigen::Index>(rows[i]));
                m(static_cast<Eigen::Index>(i)) =
                    d.mixture.values()(static_cast<Eigen::Index>(rows[i]), static_cast<Eigen::Index>(j));
            }
            std::optional<Vector> truth;
            if (d.truth) truth = Vector(d.truth->values.col(static_cast<Eigen::Index>(j)));
            slot = detail::solve_cell(c, cells[k], g, m, truth, d.reference.col_labels());
        } catch (const Error& e) {
            slot = SampleOutcome{};
            slot.error = e.what();
            slot.category = e.category();
            slot.n_genes = rows.size();
        }
    });

    for (auto& o : r.outcomes) {
        o.ok = std::all_of(o.samples.begin(), o.samples.end(), [](const SampleOutcome& s) { return s.ok; });
        double genes = 0.0;
        for (const auto& s : o.samples) genes += static_cast<double>(s.n_genes);
        o.mean_genes = p ? genes / static_cast<double>(p) : 0.0;
        if (o.ok && p_true) {
            Matrix est(static_cast<Eigen::Index>(d.reference.n_cols()), static_cast<Eigen::Index>(p));
            for (std::size_t j = 0; j < p; ++j) est.col(static_cast<Eigen::Index>(j)) = 100.0 * o.samples[j].c;
            o.eval = evaluate(*p_true, est, r.baseline ? &*r.baseline : nullptr);
            o.qc = per_sample_qc(*p_true, est, c.qc_threshold);
        }
    }
    return r;
}

/// Sample points of the four losses, with Huber M and hinge epsilon as given.
inline std::string loss_curve_tsv(double huber_m = 1.0, double eps = 0.5, double lo = -3.0, double hi = 3.0,
                                  std::size_t points = 121) {
    if (points < 2 || !(lo < hi)) {
        throw UsageError("loss curve needs lo < hi and at least two points");
    }
    std::ostringstream out;
    out << "residual\tl2\tl1\thuber\thinge\n";
    const LossKind l2 = LossKind::squared(), l1 = LossKind::absolute(), hu = LossKind::huber(huber_m),
                   hg = LossKind::eps_insensitive(eps);
    for (std::size_t k = 0; k < points; ++k) {
        const double r = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
        out << format_double(r) << '\t' << format_double(loss_value(l2, r)) << '\t' << format_double(loss_value(l1, r))
            << '\t' << format_double(loss_value(hu, r)) << '\t' << format_double(loss_value(hg, r)) << '\n';
    }
    return out.str();
}

struct MeasureAgreement {
    std::string first;
    std::string second;
    std::size_t n = 0;
    std::optional<KendallResult> result;
};

/// Kendall agreement between the measures over configurations with complete metrics.
inline std::vector<MeasureAgreement> measure_agreement(const std::vector<ConfigOutcome>& outcomes) {
    std::vector<double> a, b, c;
    for (const auto& o : outcomes) {
        if (o.eval && !std::isnan(o.eval->r2d)) {
            a.push_back(o.eval->mad);
            b.push_back(o.eval->rmsd);
            c.push_back(o.eval->r2d);
        }
    }
    std::vector<MeasureAgreement> out;
    auto add = [&](const char* x, const char* y, const std::vector<double>& u, const std::vector<double>& v) {
        MeasureAgreement m{x, y, u.size(), std::nullopt};
        try {
            if (u.size() >= 2) m.result = kendall_tau(u, v);
        } catch (const DataError&) {
        }
        out.push_back(m);
    };
    add("mad", "rmsd", a, b);
    add("mad", "r2d", a, c);
    add("rmsd", "r2d", b, c);
    return out;
}

/// Output file name to content, in write order.
using OutputFiles = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string num(double v) { return format_double(v); }

inline std::string filter_report_tsv(const RunResult& r) {
    std::ostringstream out;
    out << "sample\tn_genes\tviolating_reference\tviolating_mixture\tpercent_reference\tpercent_mixture\tgenes_used\n";
    const auto& d = r.data;
    for (std::size_t j = 0; j < d.mixture.n_cols(); ++j) {
        out << d.mixture.col_labels()[j] << '\t' << d.mixture.n_rows() << '\t';
        if (r.filters.sto) {
            const auto& s = r.filters.sto->report.samples[j];
            const double n = static_cast<double>(s.n_genes);
            out << s.violating_reference << '\t' << s.violating_mixture << '\t'
                << num(100.0 * static_cast<double>(s.violating_reference) / n) << '\t'
                << num(100.0 * static_cast<double>(s.violating_mixture) / n);
        } else {
            const auto cats = sto_violation_categorize(d.reference.values(), d.mixture.values().col(static_cast<Eigen::Index>(j)));
            const auto vr = std::count(cats.begin(), cats.end(), Violation::violating_reference);
            const auto vm = std::count(cats.begin(), cats.end(), Violation::violating_mixture);
            const double n = static_cast<double>(cats.size());
            out << vr << '\t' << vm << '\t' << num(100.0 * static_cast<double>(vr) / n) << '\t'
                << num(100.0 * static_cast<double>(vm) / n);
        }
        out << '\t' << r.sample_genes[j].size() << '\n';
    }
    return out.str();
}

inline std::string sorted_expression_tsv(const std::optional<AdaptiveRange>& a) {
    std::ostringstream out;
    out << "rank\tgene\tlog2_max\tknee\n";
    if (!a) return out.str();
    for (std::size_t k = 0; k < a->sorted_log2_max.size(); ++k) {
        std::string flag;
        if (k == a->lo_index) flag = "lower";
        if (k == a->hi_index) flag = flag.empty() ? "upper" : flag + ",upper";
        if (k == a->middle) flag = flag.empty() ? "middle" : flag + ",middle";
        out << k + 1 << '\t' << a->sorted_genes[k] << '\t' << num(a->sorted_log2_max[k]) << '\t' << flag << '\n';
    }
    return out.str();
}

inline std::string condition_curve_tsv(const std::optional<BasisCut>& cut) {
    std::ostringstream out;
    out << "step\tn_genes\tcondition_number\tchosen\n";
    if (!cut) return out.str();
    for (std::size_t s = 0; s < cut->curve.size(); ++s) {
        out << s + 1 << '\t' << cut->gene_counts[s] << '\t' << num(cut->curve[s]) << '\t'
            << (s == cut->chosen_step ? "1" : "0") << '\n';
    }
    return out.str();
}

inline std::string marker_scores_tsv(const std::vector<MarkerScore>& scores, const Labels& types) {
    std::ostringstream out;
    out << "gene\tcelltype\tp_value\tq_value\tfold_ratio\n";
    for (const auto& s : scores) {
        out << s.gene << '\t' << types[s.celltype] << '\t' << num(s.p_value) << '\t' << num(s.q_value) << '\t'
            << num(s.fold_ratio) << '\n';
    }
    return out.str();
}

inline std::string selected_markers_tsv(const MarkerStage& m, const LoadedData& d) {
    std::ostringstream out;
    out << "order\tgene\n";
    if (!m.cut) return out.str();
    for (std::size_t k = 0; k < m.cut->selected.size(); ++k) {
        out << k + 1 << '\t' << d.mixture.row_labels()[m.cut->selected[k]] << '\n';
    }
    return out.str();
}

} // namespace detail

/// All result tables of a grid run. The manifest's timestamp lines are the only run-dependent content.
inline OutputFiles render_outputs(const RunResult& r, const std::string& started, const std::string& finished) {
    using detail::num;
    const auto& d = r.data;
    const auto& c = r.config;
    OutputFiles files;

    std::ostringstream conc;
    write_concentrations_header(conc);
    for (const auto& o : r.outcomes) {
        if (!o.ok) continue;
        Matrix v(static_cast<Eigen::Index>(d.reference.n_cols()), static_cast<Eigen::Index>(o.samples.size()));
        for (std::size_t j = 0; j < o.samples.size(); ++j) v.col(static_cast<Eigen::Index>(j)) = o.samples[j].c;
        write_concentrations(conc, o.cell.id, ConcentrationMatrix::from_values(d.reference.col_labels(), d.mixture.col_labels(), v));
    }
    files.emplace_back("concentrations.tsv", conc.str());

    std::ostringstream met;
    met << "config_id\tloss\tnn\tsto\tregularizer\tlambda\tmad\trmsd\tr2d\tp_mad\tp_rmsd\tp_r2d\tn_genes_used\n";
    for (const auto& o : r.outcomes) {
        std::string lambda;
        if (c.regularizer != RegularizerType::none) lambda = c.lambda ? num(*c.lambda) : "grid";
        met << o.cell.id << '\t' << loss_name(o.cell.loss) << '\t' << enforcement_name(o.cell.constraints.nn) << '\t'
            << enforcement_name(o.cell.constraints.sto) << '\t' << c.settings.at("solver.regularizer") << '\t' << lambda;
        if (o.eval) {
            met << '\t' << num(o.eval->mad) << '\t' << num(o.eval->rmsd) << '\t' << num(o.eval->r2d) << '\t'
                << num(o.eval->p_mad) << '\t' << num(o.eval->p_rmsd) << '\t' << num(o.eval->p_r2d);
        } else {
            met << "\t\t\t\t\t\t";
        }
        met << '\t' << num(o.mean_genes) << '\n';
    }
    files.emplace_back("metrics.tsv", met.str());

    std::ostringstream per;
    per << "config_id\tsample\tn_genes\tloss_param\tlambda\tobjective\tresidual_rmsd\tmad\tqc_flag\tstatus\n";
    for (const auto& o : r.outcomes) {
        for (std::size_t j = 0; j < o.samples.size(); ++j) {
            const auto& s = o.samples[j];
            per << o.cell.id << '\t' << d.mixture.col_labels()[j] << '\t' << s.n_genes << '\t' << num(s.param) << '\t'
                << num(s.lambda) << '\t' << num(s.objective) << '\t' << num(s.residual) << '\t';
            if (o.qc) {
                per << num(o.qc->sample_mad[j]) << '\t' << (o.qc->flagged[j] ? "1" : "0");
            } else {
                per << '\t';
            }
            per << '\t' << (s.ok ? "ok" : "error") << '\n';
        }
    }
    files.emplace_back("per_sample.tsv", per.str());

    std::ostringstream err;
    err << "config_id\tsample\tcategory\tmessage\n";
    std::size_t n_errors = 0;
    for (const auto& o : r.outcomes) {
        for (std::size_t j = 0; j < o.samples.size(); ++j) {
            const auto& s = o.samples[j];
            if (s.ok) continue;
            ++n_errors;
            const char* cat = s.category == ErrorCategory::usage ? "usage" : s.category == ErrorCategory::data ? "data" : "solver";
            std::string msg = s.error;
            std::replace(msg.begin(), msg.end(), '\t', ' ');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            err << o.cell.id << '\t' << d.mixture.col_labels()[j] << '\t' << cat << '\t' << msg << '\n';
        }
    }
    files.emplace_back("errors.tsv", err.str());

    files.emplace_back("filter_report.tsv", detail::filter_report_tsv(r));
    files.emplace_back("condition_curve.tsv", detail::condition_curve_tsv(r.markers.cut));
    files.emplace_back("sorted_expression.tsv", detail::sorted_expression_tsv(r.filters.curve));
    files.emplace_back("loss_curve.tsv", loss_curve_tsv());

    std::ostringstream agr;
    agr << "measure_a\tmeasure_b\tn_configs\ttau\tp_value\n";
    for (const auto& a : measure_agreement(r.outcomes)) {
        agr << a.first << '\t' << a.second << '\t' << a.n << '\t';
        if (a.result) {
            agr << num(a.result->tau) << '\t' << num(a.result->p_value);
        } else {
            agr << '\t';
        }
        agr << '\n';
    }
    files.emplace_back("measure_agreement.tsv", agr.str());

    std::ostringstream man;
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(canonical_settings(c))));
    const std::size_t after_global = global_mask(r.filters).kept();
    std::size_t after_sto = d.mixture.n_rows();
    if (r.filters.sto) {
        double acc = 0.0;
        for (const auto& m : r.filters.sto->masks) acc += static_cast<double>(m.kept());
        after_sto = static_cast<std::size_t>(std::lround(acc / static_cast<double>(r.filters.sto->masks.size())));
    }
    man << "tool\tdeconv\n";
    man << "version\t" << DECONV_VERSION << '\n';
    man << "config_hash\t" << hash << '\n';
    man << "seed\t" << c.seed << '\n';
    man << "started\t" << started << '\n';
    man << "finished\t" << finished << '\n';
    man << "genes_mixture\t" << d.genes_mixture << '\n';
    man << "genes_reference\t" << d.genes_reference << '\n';
    man << "genes_aligned\t" << d.mixture.n_rows() << '\n';
    man << "genes_after_sto_filter\t" << after_sto << '\n';
    man << "genes_after_range_filter\t" << r.filters.range.kept() << '\n';
    man << "genes_after_global_filters\t" << after_global << '\n';
    man << "genes_after_markers\t" << combine_masks(global_mask(r.filters), r.markers.mask).kept() << '\n';
    if (r.filters.bounds_used) {
        man << "range_bounds_log2\t" << num(r.filters.bounds_used->lo) << ',' << num(r.filters.bounds_used->hi) << '\n';
    }
    if (r.markers.newman) {
        for (const auto& t : r.markers.newman->types_without_markers) {
            man << "warning\tcell-type '" << t << "' has no significant marker\n";
        }
    }
    if (r.markers.cut) {
        for (auto t : r.markers.cut->exhausted_types) {
            man << "marker_exhausted\t" << d.reference.col_labels()[t] << '\n';
        }
    }
    man << "configurations\t" << r.outcomes.size() << '\n';
    man << "errors\t" << n_errors << '\n';
    man << "settings\n" << canonical_settings(c);
    files.emplace_back("manifest.txt", man.str());
    return files;
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void write_files(const std::string& dir, const OutputFiles& files) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw DataError("cannot create output directory '" + dir + "': " + ec.message());
    }
    for (const auto& [name, content] : files) {
        const auto path = std::filesystem::path(dir) / name;
        std::ofstream out(path, std::ios::binary);
        out << content;
        if (!out) {
            throw DataError("cannot write " + path.string());
        }
    }
}

/// run_grid plus output writing; returns the result for inspection.
inline RunResult run_experiment(const ExperimentConfig& c) {
    const std::string started = utc_timestamp();
    RunResult r = run_grid(c);
    write_files(c.out_dir, render_outputs(r, started, utc_timestamp()));
    return r;
}

} // namespace deconv
