#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crtsim/harness.hpp"

namespace fs = std::filesystem;
using namespace crtsim;

namespace {

std::vector<std::string> split(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<double> parse_theta_grid(const std::string& s) {
    if (s == "default") return default_theta_grid();
    std::vector<double> out;
    for (const auto& t : split(s)) out.push_back(std::stod(t));
    return out;
}

std::vector<ModelKind> parse_models(const std::string& s) {
    if (s == "all") return {kAllModels.begin(), kAllModels.end()};
    std::vector<ModelKind> out;
    for (const auto& t : split(s)) out.push_back(parse_model(t));
    return out;
}

std::vector<ScenarioConfig> parse_scenarios(const std::string& s) {
    std::vector<ScenarioConfig> out;
    if (s == "all") return scenario_table();
    for (const auto& t : split(s)) out.push_back(scenario_by_label(t));
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw InvalidArgument("cannot open " + p.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct Common {
    std::string config;
    std::string scenario = "A";
    std::string theta_grid;
    std::string models = "all";
    int reps = 0;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    double threshold = -1.0;
    double delta = 0.0;
    bool delta_set = false;
    std::string out = "out";
};

StudyConfig make_study_config(const Common& c) {
    StudyConfig cfg;
    if (!c.config.empty()) cfg = study_config_from_json(nlohmann::json::parse(read_file(c.config)));
    if (c.config.empty() || cfg.scenarios.empty()) cfg.scenarios = parse_scenarios(c.scenario);
    if (!c.theta_grid.empty()) cfg.theta_grid = parse_theta_grid(c.theta_grid);
    if (c.config.empty() || c.models != "all") cfg.models = parse_models(c.models);
    if (c.reps > 0) cfg.reps = c.reps;
    if (c.seed_set) cfg.seed = c.seed;
    cfg.threads = c.threads > 0 ? c.threads : (c.config.empty() ? default_thread_count() : cfg.threads);
    if (c.threshold > 0.0) cfg.rule.threshold = c.threshold;
    if (c.delta_set) cfg.rule.delta = c.delta;
    return cfg;
}

void print_design(double theta, double power, double alpha, int m, double sigma_w2, double f,
                  const std::vector<double>& iccs, const fs::path& out) {
    nlohmann::json rows = nlohmann::json::array();
    std::printf("%6s %10s %10s %8s %8s %6s\n", "icc", "sigma_b2", "tau2", "deff", "raw", "even");
    for (double icc : iccs) {
        const VarianceComponents vc = variance_partition(icc, f, sigma_w2);
        const ClusterCount cc = required_clusters({theta, power, alpha, m, icc}, sigma_w2);
        std::printf("%6.3f %10.3f %10.3f %8.3f %8d %6d\n", icc, vc.sigma_b2, vc.tau2, cc.deff, cc.raw, cc.even);
        rows.push_back({{"icc", icc},
                        {"sigma_b2", vc.sigma_b2},
                        {"tau2", vc.tau2},
                        {"sigma_w2", vc.sigma_w2},
                        {"design_effect", cc.deff},
                        {"n_per_arm", cc.n_per_arm},
                        {"clusters", cc.raw},
                        {"clusters_even", cc.even}});
    }
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream os(out / "design.json");
        nlohmann::json doc{{"schema_version", kSchemaVersion},
                           {"theta", theta},
                           {"power", power},
                           {"alpha", alpha},
                           {"m", m},
                           {"f", f},
                           {"rows", rows}};
        os << doc.dump(2) << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Spatial cluster-randomized trial simulation and Bayesian analysis"};
    app.require_subcommand(1);

    // design
    auto* design = app.add_subcommand("design", "Variance partition and required number of clusters");
    double d_theta = 0.6, d_power = 0.85, d_alpha = 0.05, d_sigma_w2 = 2.25, d_f = 0.5;
    int d_m = 40;
    std::vector<double> d_icc{0.05, 0.15, 0.25};
    std::string d_out;
    design->add_option("--theta", d_theta, "Target effect");
    design->add_option("--power", d_power, "Target power");
    design->add_option("--alpha", d_alpha, "Two-sided type I error");
    design->add_option("--m", d_m, "Individuals per cluster");
    design->add_option("--sigma-w2", d_sigma_w2, "Within-cluster variance");
    design->add_option("--f", d_f, "Cluster share of the between-cluster variance");
    design->add_option("--icc", d_icc, "ICC values");
    design->add_option("--out", d_out, "Directory for design.json");

    // simulate
    auto* simulate = app.add_subcommand("simulate", "Generate one trial and fit the models");
    Common sim;
    double s_theta = 0.0;
    bool s_latent = false;
    simulate->add_option("--scenario", sim.scenario, "Scenario label A-F");
    simulate->add_option("--config", sim.config, "JSON config; its first scenario is used");
    simulate->add_option("--theta", s_theta, "True treatment effect");
    simulate->add_option("--seed", sim.seed, "Seed")->each([&](const std::string&) { sim.seed_set = true; });
    simulate->add_option("--models", sim.models, "Comma-separated models or 'all'");
    simulate->add_flag("--latent", s_latent, "Include u, w, eps columns");
    simulate->add_option("--out", sim.out, "Output directory");

    // study
    auto* study = app.add_subcommand("study", "Monte Carlo operating characteristics");
    Common st;
    study->add_option("--config", st.config, "JSON config (schema_version 1)");
    study->add_option("--scenario", st.scenario, "Comma-separated labels A-F or 'all'");
    study->add_option("--theta-grid", st.theta_grid, "Comma-separated values or 'default'");
    study->add_option("--models", st.models, "Comma-separated models or 'all'");
    study->add_option("--reps", st.reps, "Replicates per cell");
    study->add_option("--seed", st.seed, "Study seed")->each([&](const std::string&) { st.seed_set = true; });
    study->add_option("--threads", st.threads, "Workers (default: CRTSIM_THREADS or 1)");
    study->add_option("--threshold", st.threshold, "Posterior probability threshold");
    study->add_option("--delta", st.delta, "Effect threshold in P(theta > delta)")->each([&](const std::string&) {
        st.delta_set = true;
    });
    study->add_option("--out", st.out, "Output directory");
    bool st_quiet = false;
    study->add_flag("--quiet", st_quiet, "No progress output");

    // summarize
    auto* summarize_cmd = app.add_subcommand("summarize", "Recompute summary.json from replicates.csv");
    std::string sm_input;
    std::string sm_out = "out";
    std::string sm_modse = "mean";
    summarize_cmd->add_option("--input", sm_input, "replicates.csv")->required();
    summarize_cmd->add_option("--mod-se", sm_modse, "mean or median")->check(CLI::IsMember({"mean", "median"}));
    summarize_cmd->add_option("--out", sm_out, "Output directory");

    // export-plotdata
    auto* plot = app.add_subcommand("export-plotdata", "Long-format CSV for one metric");
    std::string pl_input, pl_metric = "all", pl_out = "out";
    plot->add_option("--input", pl_input, "summary.json")->required();
    plot->add_option("--metric", pl_metric, "power, fpr, pct_re, bias, mse, coverage or all");
    plot->add_option("--out", pl_out, "Output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*design) {
            print_design(d_theta, d_power, d_alpha, d_m, d_sigma_w2, d_f, d_icc, d_out);
        } else if (*simulate) {
            ScenarioConfig sc = sim.config.empty()
                                    ? scenario_by_label(sim.scenario)
                                    : study_config_from_json(nlohmann::json::parse(read_file(sim.config))).scenarios.at(0);
            sc.theta = s_theta;
            const std::uint64_t seed = sim.seed_set ? sim.seed : replicate_seed(0, sc.label, 0, 0);
            const TrialData data = generate_trial(sc, seed, s_latent);
            const fs::path out = sim.out;
            fs::create_directories(out);
            {
                std::ofstream os(out / "trial.csv");
                write_trial_csv(os, data);
            }
            nlohmann::json diag;
            diag["schema_version"] = kSchemaVersion;
            diag["scenario"] = scenario_to_json(sc);
            diag["theta"] = s_theta;
            diag["seed"] = seed;
            diag["fits"] = nlohmann::json::array();
            const StudyConfig defaults;
            for (ModelKind k : parse_models(sim.models)) {
                try {
                    const FitResult f = fit(k, data, defaults.priors, defaults.fit_options);
                    auto j = fit_diagnostics(k, f);
                    const auto [lo, hi] = credible_interval(f.effect, defaults.ci_level);
                    j["prob_exceeds"] = prob_exceeds(f.effect, defaults.rule.delta);
                    j["ci"] = {lo, hi};
                    std::printf("%-14s mean %8.4f  sd %7.4f  P(>0) %.4f  CI [%.4f, %.4f]\n", model_name(k).c_str(),
                                f.effect.mean(), f.effect.sd(), j["prob_exceeds"].get<double>(), lo, hi);
                    diag["fits"].push_back(j);
                } catch (const std::exception& e) {
                    std::fprintf(stderr, "%s: %s\n", model_name(k).c_str(), e.what());
                    diag["fits"].push_back({{"model", model_token(k)}, {"status", error_code(e)}, {"message", e.what()}});
                }
            }
            std::ofstream os(out / "diagnostics.json");
            os << diag.dump(2) << '\n';
        } else if (*study) {
            const StudyConfig cfg = make_study_config(st);
            ProgressFn progress;
            if (!st_quiet) {
                progress = [](std::size_t done, std::size_t total) {
                    if (done == total || done % 10 == 0) std::fprintf(stderr, "\r%zu/%zu", done, total);
                    if (done == total) std::fprintf(stderr, "\n");
                };
            }
            const StudyResults res = run_study(cfg, progress);
            write_study(st.out, cfg, res);
            for (const auto& s : res.summaries)
                std::printf("%s theta=%.2f %-14s S=%d rej=%.3f cov=%.3f bias=%+.4f %%RE=%+.1f%s\n", s.scenario.c_str(),
                            s.theta_true, model_name(s.model).c_str(), s.n_reps, s.rejection_rate, s.coverage, s.bias,
                            s.pct_re, s.flagged ? " [flagged]" : "");
        } else if (*summarize_cmd) {
            std::ifstream is(sm_input);
            if (!is) throw InvalidArgument("cannot open " + sm_input);
            const auto rows = read_replicates_csv(is);
            const auto sums = summarize_all(rows, sm_modse == "median" ? SeAggregator::Median : SeAggregator::Mean);
            fs::create_directories(sm_out);
            std::ofstream os(fs::path(sm_out) / "summary.json");
            os << summaries_to_json(sums);
        } else if (*plot) {
            const auto sums = summaries_from_json(read_file(pl_input));
            fs::create_directories(pl_out);
            std::vector<PlotMetric> metrics;
            if (pl_metric == "all") {
                metrics = {PlotMetric::Power, PlotMetric::Fpr, PlotMetric::PctRe, PlotMetric::Bias, PlotMetric::Mse,
                           PlotMetric::Coverage};
            } else {
                metrics = {parse_metric(pl_metric)};
            }
            for (PlotMetric m : metrics) {
                std::ofstream os(fs::path(pl_out) / ("plotdata_" + metric_name(m) + ".csv"));
                export_plotdata(os, sums, m);
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
