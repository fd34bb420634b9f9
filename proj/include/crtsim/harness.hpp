#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "crtsim/datagen.hpp"
#include "crtsim/design.hpp"
#include "crtsim/inference.hpp"
#include "crtsim/random.hpp"

namespace crtsim {

inline constexpr int kSchemaVersion = 1;

struct DecisionRule {
    double delta = 0.0;       // minimum clinically important difference
    double threshold = 0.95;  // reject when P(theta > delta | data) > threshold

    void validate() const {
        detail::require(threshold > 0.0 && threshold < 1.0, "DecisionRule: threshold must lie in (0, 1)");
    }
};

// Strict inequality: a probability equal to the threshold does not reject.
inline bool decide(double prob, const DecisionRule& rule) { return prob > rule.threshold; }

struct ReplicateResult {
    std::string scenario;
    int theta_index = 0;
    double theta_true = 0.0;
    ModelKind model = ModelKind::SMM;
    int replicate = 0;
    std::uint64_t seed = 0;
    std::string status = "ok";  // "ok" or an error code
    double post_mean = 0.0;
    double post_sd = 0.0;
    double prob_exceeds = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    bool rejected = false;
    bool covered = false;
    double fit_wall_time = 0.0;  // seconds

    bool ok() const { return status == "ok"; }
};

enum class SeAggregator { Mean, Median };

struct OpCharSummary {
    std::string scenario;
    double theta_true = 0.0;
    ModelKind model = ModelKind::SMM;
    int n_reps = 0;  // successful replicates S
    int n_failed = 0;
    bool flagged = false;  // more than 1% failures
    double rejection_rate = 0.0;
    double mod_se = 0.0;
    double emp_se = 0.0;
    double pct_re = 0.0;
    double bias = 0.0;
    double mse = 0.0;
    double coverage = 0.0;
    double mc_se_rejection = 0.0;
    double mc_se_bias = 0.0;
    double mc_se_mse = 0.0;
    double mc_se_coverage = 0.0;
    double mc_se_pct_re = 0.0;
};

// Metrics over the successful replicates of one (scenario, theta, model) cell.
// Independent of replicate order: values are sorted before accumulation.
inline OpCharSummary summarize(const std::vector<ReplicateResult>& results, double theta_true,
                               SeAggregator aggregator = SeAggregator::Mean) {
    detail::require(!results.empty(), "summarize: no results");
    OpCharSummary s;
    s.scenario = results.front().scenario;
    s.model = results.front().model;
    s.theta_true = theta_true;
    std::vector<double> means, sds;
    int rejected = 0, covered = 0;
    for (const auto& r : results) {
        detail::require(r.scenario == s.scenario && r.model == s.model, "summarize: results span several cells");
        if (!r.ok()) {
            ++s.n_failed;
            continue;
        }
        means.push_back(r.post_mean);
        sds.push_back(r.post_sd);
        rejected += r.rejected ? 1 : 0;
        covered += r.covered ? 1 : 0;
    }
    const auto n = static_cast<int>(means.size());
    detail::require(n >= 2, "summarize: at least two successful replicates are needed for the empirical SE");
    s.n_reps = n;
    s.flagged = s.n_failed > 0.01 * static_cast<double>(results.size());
    std::sort(means.begin(), means.end());
    std::sort(sds.begin(), sds.end());
    const double dn = n;

    s.rejection_rate = rejected / dn;
    s.coverage = covered / dn;
    if (aggregator == SeAggregator::Mean) {
        s.mod_se = std::accumulate(sds.begin(), sds.end(), 0.0) / dn;
    } else {
        s.mod_se = n % 2 == 1 ? sds[static_cast<std::size_t>(n / 2)]
                              : 0.5 * (sds[static_cast<std::size_t>(n / 2 - 1)] + sds[static_cast<std::size_t>(n / 2)]);
    }
    const double mean_est = std::accumulate(means.begin(), means.end(), 0.0) / dn;
    double ss = 0.0, sq_err = 0.0;
    for (double m : means) {
        ss += (m - mean_est) * (m - mean_est);
        sq_err += (m - theta_true) * (m - theta_true);
    }
    s.emp_se = std::sqrt(ss / (dn - 1.0));
    s.pct_re = (s.mod_se / s.emp_se - 1.0) * 100.0;
    s.bias = mean_est - theta_true;
    s.mse = sq_err / dn;

    double ss_sq = 0.0;
    for (double m : means) {
        const double e2 = (m - theta_true) * (m - theta_true);
        ss_sq += (e2 - s.mse) * (e2 - s.mse);
    }
    s.mc_se_rejection = std::sqrt(s.rejection_rate * (1.0 - s.rejection_rate) / dn);
    s.mc_se_coverage = std::sqrt(s.coverage * (1.0 - s.coverage) / dn);
    s.mc_se_bias = s.emp_se / std::sqrt(dn);
    s.mc_se_mse = std::sqrt(ss_sq / (dn - 1.0) / dn);
    s.mc_se_pct_re = 100.0 * (s.mod_se / s.emp_se) / std::sqrt(2.0 * (dn - 1.0));
    return s;
}

struct StudyConfig {
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 20240601;
    std::vector<ScenarioConfig> scenarios;
    std::vector<double> theta_grid{0.0};
    std::vector<ModelKind> models{kAllModels.begin(), kAllModels.end()};
    int reps = 100;
    int threads = 1;
    DecisionRule rule;
    double ci_level = 0.95;
    SeAggregator mod_se_aggregator = SeAggregator::Mean;
    PriorSpec priors;
    FitOptions fit_options;
    std::string out_dir;

    void validate() const {
        detail::require(schema_version == kSchemaVersion, "StudyConfig: unsupported schema_version");
        detail::require(!scenarios.empty(), "StudyConfig: no scenarios");
        detail::require(!theta_grid.empty(), "StudyConfig: empty theta grid");
        detail::require(!models.empty(), "StudyConfig: no models");
        detail::require(reps >= 1, "StudyConfig: reps must be >= 1");
        detail::require(threads >= 1, "StudyConfig: threads must be >= 1");
        detail::require(ci_level > 0.0 && ci_level < 1.0, "StudyConfig: ci_level must lie in (0, 1)");
        rule.validate();
        priors.validate();
        for (const auto& s : scenarios) validate_scenario(s);
    }

private:
    static void validate_scenario(const ScenarioConfig& s) { crtsim::validate(s); }
};

// Keeps freed N x N work matrices in the heap instead of returning them to
// the kernel after every fit.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// Default worker count: CRTSIM_THREADS if set, else 1.
inline int default_thread_count() {
    if (const char* env = std::getenv("CRTSIM_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

struct StudyResults {
    std::vector<ReplicateResult> replicates;  // sorted by (scenario, theta, model, replicate)
    std::vector<OpCharSummary> summaries;
};

inline std::string error_code(const std::exception& e) {
    if (dynamic_cast<const NotPositiveDefinite*>(&e)) return "not_positive_definite";
    if (dynamic_cast<const InferenceError*>(&e)) return "inference_error";
    if (dynamic_cast<const GenerationError*>(&e)) return "generation_error";
    if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid_argument";
    return "error";
}

// Fits one model to one trial and applies the decision rule.
inline ReplicateResult evaluate_replicate(const TrialData& data, ModelKind model, double theta_true,
                                          const StudyConfig& cfg) {
    ReplicateResult r;
    r.model = model;
    r.theta_true = theta_true;
    const auto start = std::chrono::steady_clock::now();
    try {
        const FitResult f = fit(model, data, cfg.priors, cfg.fit_options);
        r.post_mean = f.effect.mean();
        r.post_sd = f.effect.sd();
        r.prob_exceeds = prob_exceeds(f.effect, cfg.rule.delta);
        std::tie(r.ci_lo, r.ci_hi) = credible_interval(f.effect, cfg.ci_level);
        r.rejected = decide(r.prob_exceeds, cfg.rule);
        r.covered = r.ci_lo <= theta_true && theta_true <= r.ci_hi;
    } catch (const std::exception& e) {
        r.status = error_code(e);
    }
    r.fit_wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

// Every (scenario, theta, replicate) work item owns its seed and state, and
// writes into its own slot, so output does not depend on the worker count.
inline StudyResults run_study(const StudyConfig& cfg, const ProgressFn& progress = {}) {
    cfg.validate();
    const std::size_t n_s = cfg.scenarios.size();
    const std::size_t n_t = cfg.theta_grid.size();
    const auto n_r = static_cast<std::size_t>(cfg.reps);
    const std::size_t n_m = cfg.models.size();
    const std::size_t n_items = n_s * n_t * n_r;

    std::vector<ReplicateResult> slots(n_items * n_m);
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::mutex progress_mutex;

    auto worker = [&] {
        for (std::size_t item = next++; item < n_items; item = next++) {
            const std::size_t s = item / (n_t * n_r);
            const std::size_t t = (item / n_r) % n_t;
            const std::size_t rep = item % n_r;
            ScenarioConfig sc = cfg.scenarios[s];
            sc.theta = cfg.theta_grid[t];
            const std::uint64_t seed = replicate_seed(cfg.seed, sc.label, t, rep);
            std::optional<TrialData> data;
            std::string gen_status;
            try {
                data = generate_trial(sc, seed);
            } catch (const std::exception& e) {
                gen_status = error_code(e);
            }
            for (std::size_t m = 0; m < n_m; ++m) {
                ReplicateResult r;
                if (data) {
                    r = evaluate_replicate(*data, cfg.models[m], sc.theta, cfg);
                } else {
                    r.model = cfg.models[m];
                    r.theta_true = sc.theta;
                    r.status = gen_status;
                }
                r.scenario = sc.label;
                r.theta_index = static_cast<int>(t);
                r.replicate = static_cast<int>(rep);
                r.seed = seed;
                // slot order: scenario, theta, model, replicate
                slots[((s * n_t + t) * n_m + m) * n_r + rep] = std::move(r);
            }
            const std::size_t d = ++done;
            if (progress) {
                std::lock_guard lock(progress_mutex);
                progress(d, n_items);
            }
        }
    };

    const int n_threads = std::max(1, std::min<int>(cfg.threads, static_cast<int>(n_items)));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    }

    StudyResults out;
    out.replicates = std::move(slots);
    for (std::size_t s = 0; s < n_s; ++s) {
        for (std::size_t t = 0; t < n_t; ++t) {
            for (std::size_t m = 0; m < n_m; ++m) {
                const auto first = out.replicates.begin() + static_cast<std::ptrdiff_t>(((s * n_t + t) * n_m + m) * n_r);
                std::vector<ReplicateResult> cell(first, first + static_cast<std::ptrdiff_t>(n_r));
                const auto ok = std::count_if(cell.begin(), cell.end(), [](const auto& r) { return r.ok(); });
                if (ok < 2) {
                    OpCharSummary empty;
                    empty.scenario = cfg.scenarios[s].label;
                    empty.theta_true = cfg.theta_grid[t];
                    empty.model = cfg.models[m];
                    empty.n_failed = static_cast<int>(n_r - static_cast<std::size_t>(ok));
                    empty.n_reps = static_cast<int>(ok);
                    empty.flagged = true;
                    out.summaries.push_back(empty);
                    continue;
                }
                out.summaries.push_back(summarize(cell, cfg.theta_grid[t], cfg.mod_se_aggregator));
            }
        }
    }
    return out;
}

// ---- persistence ---------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace detail

inline const char* kReplicateCsvHeader =
    "scenario,theta_index,theta,model,replicate,seed,status,post_mean,post_sd,prob_exceeds,ci_lo,ci_hi,rejected,covered";

inline void write_replicates_csv(std::ostream& os, const std::vector<ReplicateResult>& rows) {
    os << kReplicateCsvHeader << '\n';
    for (const auto& r : rows) {
        os << r.scenario << ',' << r.theta_index << ',' << detail::fmt_double(r.theta_true) << ',' << model_token(r.model)
           << ',' << r.replicate << ',' << r.seed << ',' << r.status << ',' << detail::fmt_double(r.post_mean) << ','
           << detail::fmt_double(r.post_sd) << ',' << detail::fmt_double(r.prob_exceeds) << ','
           << detail::fmt_double(r.ci_lo) << ',' << detail::fmt_double(r.ci_hi) << ',' << (r.rejected ? 1 : 0) << ','
           << (r.covered ? 1 : 0) << '\n';
    }
}

inline std::vector<ReplicateResult> read_replicates_csv(std::istream& is) {
    std::string line;
    detail::require(static_cast<bool>(std::getline(is, line)), "read_replicates_csv: empty input");
    detail::require(line == kReplicateCsvHeader, "read_replicates_csv: unexpected header");
    std::vector<ReplicateResult> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        detail::require(f.size() == 14, "read_replicates_csv: expected 14 fields");
        ReplicateResult r;
        r.scenario = f[0];
        r.theta_index = std::stoi(f[1]);
        r.theta_true = std::stod(f[2]);
        r.model = parse_model(f[3]);
        r.replicate = std::stoi(f[4]);
        r.seed = std::stoull(f[5]);
        r.status = f[6];
        r.post_mean = std::stod(f[7]);
        r.post_sd = std::stod(f[8]);
        r.prob_exceeds = std::stod(f[9]);
        r.ci_lo = std::stod(f[10]);
        r.ci_hi = std::stod(f[11]);
        r.rejected = f[12] == "1";
        r.covered = f[13] == "1";
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_timings_csv(std::ostream& os, const std::vector<ReplicateResult>& rows) {
    os << "scenario,theta_index,model,replicate,fit_wall_time\n";
    for (const auto& r : rows)
        os << r.scenario << ',' << r.theta_index << ',' << model_token(r.model) << ',' << r.replicate << ','
           << detail::fmt_double(r.fit_wall_time) << '\n';
}

// Group replicate rows by (scenario, theta, model) in first-seen order and
// summarize each group.
inline std::vector<OpCharSummary> summarize_all(const std::vector<ReplicateResult>& rows,
                                                SeAggregator aggregator = SeAggregator::Mean) {
    std::vector<std::tuple<std::string, int, ModelKind>> keys;
    std::map<std::tuple<std::string, int, ModelKind>, std::vector<ReplicateResult>> groups;
    for (const auto& r : rows) {
        auto key = std::make_tuple(r.scenario, r.theta_index, r.model);
        if (!groups.contains(key)) keys.push_back(key);
        groups[key].push_back(r);
    }
    std::vector<OpCharSummary> out;
    for (const auto& key : keys) {
        const auto& g = groups[key];
        out.push_back(summarize(g, g.front().theta_true, aggregator));
    }
    return out;
}

inline nlohmann::json to_json(const OpCharSummary& s) {
    return {{"scenario", s.scenario},
            {"theta", s.theta_true},
            {"model", model_token(s.model)},
            {"n_reps", s.n_reps},
            {"n_failed", s.n_failed},
            {"flagged", s.flagged},
            {"rejection_rate", s.rejection_rate},
            {"mod_se", s.mod_se},
            {"emp_se", s.emp_se},
            {"pct_re", s.pct_re},
            {"bias", s.bias},
            {"mse", s.mse},
            {"coverage", s.coverage},
            {"mc_se_rejection", s.mc_se_rejection},
            {"mc_se_bias", s.mc_se_bias},
            {"mc_se_mse", s.mc_se_mse},
            {"mc_se_coverage", s.mc_se_coverage},
            {"mc_se_pct_re", s.mc_se_pct_re}};
}

inline OpCharSummary summary_from_json(const nlohmann::json& j) {
    OpCharSummary s;
    s.scenario = j.at("scenario").get<std::string>();
    s.theta_true = j.at("theta").get<double>();
    s.model = parse_model(j.at("model").get<std::string>());
    s.n_reps = j.at("n_reps").get<int>();
    s.n_failed = j.at("n_failed").get<int>();
    s.flagged = j.at("flagged").get<bool>();
    s.rejection_rate = j.at("rejection_rate").get<double>();
    s.mod_se = j.at("mod_se").get<double>();
    s.emp_se = j.at("emp_se").get<double>();
    s.pct_re = j.at("pct_re").get<double>();
    s.bias = j.at("bias").get<double>();
    s.mse = j.at("mse").get<double>();
    s.coverage = j.at("coverage").get<double>();
    s.mc_se_rejection = j.at("mc_se_rejection").get<double>();
    s.mc_se_bias = j.at("mc_se_bias").get<double>();
    s.mc_se_mse = j.at("mc_se_mse").get<double>();
    s.mc_se_coverage = j.at("mc_se_coverage").get<double>();
    s.mc_se_pct_re = j.at("mc_se_pct_re").get<double>();
    return s;
}

inline std::string summaries_to_json(const std::vector<OpCharSummary>& summaries) {
    nlohmann::json doc;
    doc["schema_version"] = kSchemaVersion;
    doc["summaries"] = nlohmann::json::array();
    for (const auto& s : summaries) doc["summaries"].push_back(to_json(s));
    return doc.dump(2) + "\n";
}

inline std::vector<OpCharSummary> summaries_from_json(const std::string& text) {
    const auto doc = nlohmann::json::parse(text);
    detail::require(doc.value("schema_version", 0) == kSchemaVersion, "summaries: unsupported schema_version");
    std::vector<OpCharSummary> out;
    for (const auto& j : doc.at("summaries")) out.push_back(summary_from_json(j));
    return out;
}

enum class PlotMetric { Power, Fpr, PctRe, Bias, Mse, Coverage };

inline std::string metric_name(PlotMetric m) {
    switch (m) {
        case PlotMetric::Power: return "power";
        case PlotMetric::Fpr: return "fpr";
        case PlotMetric::PctRe: return "pct_re";
        case PlotMetric::Bias: return "bias";
        case PlotMetric::Mse: return "mse";
        case PlotMetric::Coverage: return "coverage";
    }
    return "?";
}

inline PlotMetric parse_metric(const std::string& s) {
    for (PlotMetric m : {PlotMetric::Power, PlotMetric::Fpr, PlotMetric::PctRe, PlotMetric::Bias, PlotMetric::Mse,
                         PlotMetric::Coverage})
        if (metric_name(m) == s) return m;
    throw InvalidArgument("unknown metric '" + s + "'");
}

struct PlotRow {
    std::string scenario;
    std::string model;
    double theta = 0.0;
    std::string metric;
    double value = 0.0;
    double mc_se = 0.0;
};

inline std::pair<double, double> metric_value(const OpCharSummary& s, PlotMetric m) {
    switch (m) {
        case PlotMetric::Power:
        case PlotMetric::Fpr: return {s.rejection_rate, s.mc_se_rejection};
        case PlotMetric::PctRe: return {s.pct_re, s.mc_se_pct_re};
        case PlotMetric::Bias: return {s.bias, s.mc_se_bias};
        case PlotMetric::Mse: return {s.mse, s.mc_se_mse};
        case PlotMetric::Coverage: return {s.coverage, s.mc_se_coverage};
    }
    return {0.0, 0.0};
}

// Long format; the FPR export keeps theta = 0 rows only.
inline std::vector<PlotRow> plot_rows(const std::vector<OpCharSummary>& summaries, PlotMetric metric) {
    std::vector<PlotRow> rows;
    for (const auto& s : summaries) {
        if (metric == PlotMetric::Fpr && s.theta_true != 0.0) continue;
        const auto [v, se] = metric_value(s, metric);
        rows.push_back({s.scenario, model_token(s.model), s.theta_true, metric_name(metric), v, se});
    }
    return rows;
}

inline void export_plotdata(std::ostream& os, const std::vector<OpCharSummary>& summaries, PlotMetric metric) {
    os << "scenario,model,theta,metric,value,mc_se\n";
    for (const auto& r : plot_rows(summaries, metric))
        os << r.scenario << ',' << r.model << ',' << detail::fmt_double(r.theta) << ',' << r.metric << ','
           << detail::fmt_double(r.value) << ',' << detail::fmt_double(r.mc_se) << '\n';
}

inline std::vector<PlotRow> import_plotdata(std::istream& is) {
    std::string line;
    detail::require(static_cast<bool>(std::getline(is, line)) && line == "scenario,model,theta,metric,value,mc_se",
                    "import_plotdata: unexpected header");
    std::vector<PlotRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        detail::require(f.size() == 6, "import_plotdata: expected 6 fields");
        rows.push_back({f[0], f[1], std::stod(f[2]), f[3], std::stod(f[4]), std::stod(f[5])});
    }
    return rows;
}

// ---- configuration JSON --------------------------------------------------

inline std::string randomization_name(Randomization r) {
    return r == Randomization::Checkerboard ? "checkerboard" : "simple";
}

inline Randomization parse_randomization(const std::string& s) {
    if (s == "simple" || s == "SimpleOneToOne") return Randomization::SimpleOneToOne;
    if (s == "checkerboard" || s == "Checkerboard") return Randomization::Checkerboard;
    throw InvalidArgument("unknown randomization '" + s + "'");
}

// A scenario is either a table label ("A".."F") or an object with optional
// "base" label plus overrides.
inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
    if (j.is_string()) return scenario_by_label(j.get<std::string>());
    ScenarioConfig s = j.contains("base") ? scenario_by_label(j.at("base").get<std::string>()) : ScenarioConfig{};
    s.label = j.value("label", s.label.empty() ? std::string("custom") : s.label);
    s.icc = j.value("icc", s.icc);
    s.f = j.value("f", s.f);
    s.sigma_w2 = j.value("sigma_w2", s.sigma_w2);
    s.kernel.phi = j.value("phi", s.kernel.phi);
    if (j.contains("kernel")) {
        const auto& k = j.at("kernel");
        const std::string fam = k.value("family", std::string("exponential"));
        s.kernel.family = fam == "matern" ? KernelFamily::Matern : KernelFamily::Exponential;
        s.kernel.nu = k.value("nu", s.kernel.nu);
    }
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        s.grid.rows = g.value("rows", s.grid.rows);
        s.grid.cols = g.value("cols", s.grid.cols);
        s.grid.cell_size = g.value("cell_size", s.grid.cell_size);
    }
    s.m = j.value("m", s.m);
    s.gamma = j.value("gamma", s.gamma);
    s.delta = j.value("delta", s.delta);
    if (j.contains("randomization")) s.randomization = parse_randomization(j.at("randomization").get<std::string>());
    return s;
}

inline nlohmann::json scenario_to_json(const ScenarioConfig& s) {
    return {{"label", s.label},
            {"icc", s.icc},
            {"f", s.f},
            {"sigma_w2", s.sigma_w2},
            {"phi", s.kernel.phi},
            {"kernel", {{"family", s.kernel.family == KernelFamily::Matern ? "matern" : "exponential"}, {"nu", s.kernel.nu}}},
            {"grid", {{"rows", s.grid.rows}, {"cols", s.grid.cols}, {"cell_size", s.grid.cell_size}}},
            {"m", s.m},
            {"gamma", s.gamma},
            {"delta", s.delta},
            {"randomization", randomization_name(s.randomization)}};
}

inline StudyConfig study_config_from_json(const nlohmann::json& j) {
    StudyConfig c;
    c.schema_version = j.value("schema_version", 0);
    detail::require(c.schema_version == kSchemaVersion,
                    "config: schema_version must be " + std::to_string(kSchemaVersion));
    c.seed = j.value("seed", c.seed);
    if (j.contains("scenarios"))
        for (const auto& s : j.at("scenarios")) c.scenarios.push_back(scenario_from_json(s));
    if (j.contains("theta_grid")) c.theta_grid = j.at("theta_grid").get<std::vector<double>>();
    if (j.contains("models")) {
        c.models.clear();
        for (const auto& m : j.at("models")) c.models.push_back(parse_model(m.get<std::string>()));
    }
    c.reps = j.value("reps", c.reps);
    c.threads = j.value("threads", default_thread_count());
    if (j.contains("rule")) {
        c.rule.delta = j.at("rule").value("delta", c.rule.delta);
        c.rule.threshold = j.at("rule").value("threshold", c.rule.threshold);
    }
    c.ci_level = j.value("ci_level", c.ci_level);
    if (j.value("mod_se", std::string("mean")) == "median") c.mod_se_aggregator = SeAggregator::Median;
    if (j.contains("priors")) {
        const auto& p = j.at("priors");
        auto sd_rate = [&](const char* key, double fallback) {
            if (!p.contains(key)) return fallback;
            return pc_sd_rate(p.at(key).at("U").get<double>(), p.at(key).at("alpha").get<double>());
        };
        c.priors.rate_sigma_w = sd_rate("sigma_w", c.priors.rate_sigma_w);
        c.priors.rate_sigma_b = sd_rate("sigma_b", c.priors.rate_sigma_b);
        c.priors.rate_tau = sd_rate("tau", c.priors.rate_tau);
        c.priors.rate_sigma_c = sd_rate("sigma_c", c.priors.rate_sigma_c);
        if (p.contains("phi"))
            c.priors.rate_phi = pc_range_rate(p.at("phi").at("phi0").get<double>(), p.at("phi").at("alpha").get<double>());
        if (p.contains("fixed_effect_variance")) c.priors.fixed_effects.variance = p.at("fixed_effect_variance");
        if (p.contains("fm_fixed_effect_variance")) c.priors.fixed_effects_fm.variance = p.at("fm_fixed_effect_variance");
    }
    if (j.contains("fit_kernel")) {
        const auto& k = j.at("fit_kernel");
        c.fit_options.spatial_family =
            k.value("family", std::string("exponential")) == "matern" ? KernelFamily::Matern : KernelFamily::Exponential;
        c.fit_options.spatial_nu = k.value("nu", c.fit_options.spatial_nu);
    }
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

inline nlohmann::json study_config_to_json(const StudyConfig& c) {
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["seed"] = c.seed;
    j["scenarios"] = nlohmann::json::array();
    for (const auto& s : c.scenarios) j["scenarios"].push_back(scenario_to_json(s));
    j["theta_grid"] = c.theta_grid;
    j["models"] = nlohmann::json::array();
    for (ModelKind m : c.models) j["models"].push_back(model_token(m));
    j["reps"] = c.reps;
    j["rule"] = {{"delta", c.rule.delta}, {"threshold", c.rule.threshold}};
    j["ci_level"] = c.ci_level;
    j["mod_se"] = c.mod_se_aggregator == SeAggregator::Median ? "median" : "mean";
    j["fit_kernel"] = {{"family", c.fit_options.spatial_family == KernelFamily::Matern ? "matern" : "exponential"},
                       {"nu", c.fit_options.spatial_nu}};
    return j;
}

inline nlohmann::json fit_diagnostics(ModelKind kind, const FitResult& f) {
    nlohmann::json j;
    j["model"] = model_token(kind);
    const auto names = hyper_names(kind);
    j["mode"] = nlohmann::json::object();
    for (std::size_t i = 0; i < names.size(); ++i) j["mode"][names[i]] = f.grid.mode(static_cast<Eigen::Index>(i));
    j["log_posterior_at_mode"] = f.grid.log_posterior_at_mode;
    j["log_marginal_at_mode"] = f.grid.log_marginal_at_mode;
    j["optimizer_iterations"] = f.grid.optimizer_iterations;
    j["optimizer_evaluations"] = f.grid.optimizer_evaluations;
    j["grid_size"] = f.grid.points.size();
    j["coefficients"] = f.grid.coefficient_labels;
    j["effect"] = {{"mean", f.effect.mean()}, {"sd", f.effect.sd()}};
    j["components"] = nlohmann::json::array();
    for (const auto& c : f.effect.components)
        j["components"].push_back({{"weight", c.weight}, {"mean", c.mean}, {"sd", c.sd}});
    return j;
}

// Writes replicates.csv, summary.json, timings.csv and config.json into dir.
inline void write_study(const std::filesystem::path& dir, const StudyConfig& cfg, const StudyResults& res) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "replicates.csv");
        write_replicates_csv(os, res.replicates);
    }
    {
        std::ofstream os(dir / "summary.json");
        os << summaries_to_json(res.summaries);
    }
    {
        std::ofstream os(dir / "timings.csv");
        write_timings_csv(os, res.replicates);
    }
    {
        std::ofstream os(dir / "config.json");
        os << study_config_to_json(cfg).dump(2) << '\n';
    }
}

}  // namespace crtsim
