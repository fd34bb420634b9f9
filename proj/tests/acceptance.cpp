#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crtsim/harness.hpp"

using namespace crtsim;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
    std::printf("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void print_summaries(const std::vector<OpCharSummary>& sums) {
    for (const auto& s : sums)
        std::printf("  %s theta=%.1f %-13s S=%4d fail=%d rej=%.3f cov=%.3f mean_sd=%.3f emp_se=%.3f %%RE=%+6.1f bias=%+.3f\n",
                    s.scenario.c_str(), s.theta_true, model_name(s.model).c_str(), s.n_reps, s.n_failed, s.rejection_rate,
                    s.coverage, s.mod_se, s.emp_se, s.pct_re, s.bias);
    std::fflush(stdout);
}

const OpCharSummary& find(const std::vector<OpCharSummary>& sums, const std::string& sc, double theta, ModelKind m) {
    for (const auto& s : sums)
        if (s.scenario == sc && s.model == m && std::abs(s.theta_true - theta) < 1e-12) return s;
    throw std::runtime_error("missing summary " + sc + " " + model_name(m));
}

void criterion_1() {
    const double expect[3] = {0.125, 0.482, 1.125};
    const double iccs[3] = {0.05, 0.15, 0.25};
    bool ok = true;
    std::string detail;
    for (int i = 0; i < 3; ++i) {
        const VarianceComponents vc = variance_partition(iccs[i], 0.5, 2.25);
        ok = ok && std::abs(std::round(vc.sigma_b2 * 1000.0) / 1000.0 - expect[i]) < 1e-12 &&
             std::abs(std::round(vc.tau2 * 1000.0) / 1000.0 - expect[i]) < 1e-12;
        detail += "(" + fmt("%.3f", vc.sigma_b2) + ", " + fmt("%.3f", vc.tau2) + ") ";
    }
    report(1, ok, "variance partition " + detail);
}

void criterion_2() {
    const int expect[3] = {17, 39, 61};
    const double iccs[3] = {0.05, 0.15, 0.25};
    bool ok = true;
    std::string detail;
    for (int i = 0; i < 3; ++i) {
        const int c = required_clusters({0.6, 0.85, 0.05, 40, iccs[i]}, 2.25).raw;
        ok = ok && c == expect[i];
        detail += std::to_string(c) + " ";
    }
    report(2, ok, "required clusters " + detail);
}

void criterion_3() {
    const double d = 3.0 * std::numbers::sqrt2;
    const double a = exponential_corr(d, 1.5), b = exponential_corr(d, 3.5);
    // leading three decimals
    const bool ok = std::floor(a * 1000.0) == 59.0 && std::floor(b * 1000.0) == 297.0;
    report(3, ok, "corr at 3*sqrt(2): " + fmt("%.4f", a) + " (phi 1.5), " + fmt("%.4f", b) + " (phi 3.5)");
}

void criterion_8() {
    Rng rng(8);
    auto rmat = [&](Eigen::Index r, Eigen::Index c) {
        Eigen::MatrixXd m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = standard_normal(rng);
        return m;
    };

    // (a) pinned hyperparameters vs dense conjugate formula
    double err_a = 0.0;
    {
        ScenarioConfig s = scenario_by_label("D");
        s.grid = {2, 2, 1.0};
        s.m = 12;
        const TrialData d = generate_trial(s, 81);
        const PriorSpec priors;
        for (ModelKind k : kAllModels) {
            Eigen::VectorXd psi(n_hyper(k));
            if (k == ModelKind::SMM) psi << 0.3, -0.6, -0.4, 0.2;
            else if (k == ModelKind::MM) psi << 0.3, -0.6;
            else psi << 0.25;
            FitOptions opt;
            opt.fixed_hyper = psi;
            const HyperGrid g = hyper_posterior(k, d, priors, opt);
            const DesignMatrix dm = build_design(d, k);
            const Eigen::MatrixXd si = build_covariance(k, g.points.at(0), d).inverse();
            const double v0 = k == ModelKind::FM ? priors.fixed_effects_fm.variance : priors.fixed_effects.variance;
            const Eigen::MatrixXd v =
                (dm.x.transpose() * si * dm.x + Eigen::MatrixXd::Identity(dm.x.cols(), dm.x.cols()) / v0).inverse();
            const Eigen::VectorXd m = v * dm.x.transpose() * si * dm.y;
            err_a = std::max({err_a, (g.points[0].conditional.mean - m).cwiseAbs().maxCoeff(),
                              (g.points[0].conditional.covariance - v).cwiseAbs().maxCoeff()});
        }
    }

    // (b) mvn_logpdf vs explicit inverse and determinant
    double err_b = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        const Eigen::MatrixXd b = rmat(8, 8);
        const Eigen::MatrixXd s = b * b.transpose() + Eigen::MatrixXd::Identity(8, 8);
        const Eigen::VectorXd y = rmat(8, 1), mu = rmat(8, 1);
        const Eigen::VectorXd r = y - mu;
        const double naive =
            -0.5 * (8.0 * std::log(2.0 * std::numbers::pi) + std::log(s.determinant()) + r.dot(s.inverse() * r));
        err_b = std::max(err_b, std::abs(mvn_logpdf(y, mu, chol_factor(s)) - naive));
    }

    // (c) mixture exceedance and interval vs 10^6 draws
    double err_c = 0.0;
    {
        EffectPosterior p;
        p.components = {{0.5, 0.0, 1.0}, {0.5, 1.0, 1.0}};
        EffectPosterior q;
        q.components = {{0.3, -0.4, 0.5}, {0.7, 0.8, 0.3}};
        for (const EffectPosterior& post : {p, q}) {
            const int n = 1000000;
            std::vector<double> draws(n);
            for (auto& v : draws) {
                const auto& c = uniform01(rng) < post.components[0].weight ? post.components[0] : post.components[1];
                v = c.mean + c.sd * standard_normal(rng);
            }
            const double frac = std::count_if(draws.begin(), draws.end(), [](double v) { return v > 0.0; }) / double(n);
            err_c = std::max(err_c, std::abs(prob_exceeds(post, 0.0) - frac));
            std::sort(draws.begin(), draws.end());
            const auto [lo, hi] = credible_interval(post, 0.95);
            err_c = std::max({err_c, std::abs(lo - draws[25000]), std::abs(hi - draws[975000])});
        }
    }

    // (d) Matern nu = 1/2 vs exponential
    double err_d = 0.0;
    for (double phi : {0.5, 1.5, 3.5})
        for (double d = 0.0; d < 10.0; d += 0.01) err_d = std::max(err_d, std::abs(matern_corr(d, phi, 0.5) - exponential_corr(d, phi)));

    const bool ok = err_a <= 1e-8 && err_b <= 1e-10 && err_c <= 2e-3 && err_d <= 1e-12;
    std::ostringstream os;
    os << "max errors: conjugate " << err_a << ", logpdf " << err_b << ", mixture sampling " << err_c << ", matern "
       << err_d;
    report(8, ok, os.str());
}

void criterion_9() {
    StudyConfig cfg;
    cfg.scenarios = {scenario_by_label("B")};
    cfg.theta_grid = {0.3};
    cfg.reps = 100;
    cfg.seed = 909;
    cfg.threads = 1;
    const auto t0 = std::chrono::steady_clock::now();
    const StudyResults a = run_study(cfg);
    cfg.threads = 8;
    const StudyResults b = run_study(cfg);
    std::ostringstream sa, sb;
    write_replicates_csv(sa, a.replicates);
    write_replicates_csv(sb, b.replicates);
    const bool ok = sa.str() == sb.str() && summaries_to_json(a.summaries) == summaries_to_json(b.summaries);
    report(9, ok,
           "1 vs 8 workers, " + std::to_string(a.replicates.size()) + " rows, " + (ok ? "byte-identical" : "differ") +
               fmt(" (%.0f s)", seconds_since(t0)));
}

}  // namespace

int main() {
    tune_allocator();
    const int threads = default_thread_count();
    std::printf("acceptance run, %d worker(s)\n", threads);

    criterion_1();
    criterion_2();
    criterion_3();
    criterion_8();
    criterion_9();

    // Null-effect study over all scenarios, S = 1000.
    auto t0 = std::chrono::steady_clock::now();
    StudyConfig null_cfg;
    null_cfg.scenarios = scenario_table();
    null_cfg.theta_grid = {0.0};
    null_cfg.reps = 1000;
    null_cfg.seed = 2024;
    null_cfg.threads = threads;
    const StudyResults null_run = run_study(null_cfg);
    std::printf("null-effect study: %zu fits in %.0f s\n", null_run.replicates.size(), seconds_since(t0));
    print_summaries(null_run.summaries);

    // Effects 0.3 and 0.6 for A and B, S = 500; theta = 0 reuses the first
    // 500 replicates of the null study.
    t0 = std::chrono::steady_clock::now();
    StudyConfig eff_cfg;
    eff_cfg.scenarios = {scenario_by_label("A"), scenario_by_label("B")};
    eff_cfg.theta_grid = {0.3, 0.6};
    eff_cfg.models = {ModelKind::SMM, ModelKind::MM, ModelKind::FMNaive};
    eff_cfg.reps = 500;
    eff_cfg.seed = 4048;
    eff_cfg.threads = threads;
    const StudyResults eff_run = run_study(eff_cfg);
    std::printf("effect study: %zu fits in %.0f s\n", eff_run.replicates.size(), seconds_since(t0));

    std::vector<OpCharSummary> table2;
    for (const std::string sc : {"A", "B"})
        for (ModelKind m : eff_cfg.models) {
            std::vector<ReplicateResult> cell;
            for (const auto& r : null_run.replicates)
                if (r.scenario == sc && r.model == m && r.replicate < 500) cell.push_back(r);
            table2.push_back(summarize(cell, 0.0));
        }
    for (const auto& s : eff_run.summaries) table2.push_back(s);
    print_summaries(table2);

    {
        struct Target {
            ModelKind model;
            double sd_a, sd_b, sd_tol;
        };
        const Target targets[] = {{ModelKind::SMM, 0.24, 0.27, 0.05},
                                  {ModelKind::MM, 0.25, 0.46, 0.06},
                                  {ModelKind::FMNaive, 0.12, 0.14, 0.03}};
        bool ok = true;
        std::string misses;
        for (const auto& t : targets)
            for (const std::string sc : {"A", "B"})
                for (double theta : {0.0, 0.3, 0.6}) {
                    const OpCharSummary& s = find(table2, sc, theta, t.model);
                    const double sd_target = sc == "A" ? t.sd_a : t.sd_b;
                    if (std::abs(s.mod_se - sd_target) > t.sd_tol) {
                        ok = false;
                        misses += " " + model_name(t.model) + "/" + sc + fmt("/%.1f", theta) + fmt(" sd=%.3f", s.mod_se);
                    }
                    if (t.model == ModelKind::SMM && std::abs(s.bias) > 0.04) {
                        ok = false;
                        misses += " " + model_name(t.model) + "/" + sc + fmt("/%.1f", theta) + fmt(" mean=%.3f", s.theta_true + s.bias);
                    }
                }
        report(4, ok, ok ? "posterior means and sds within bands for A, B at theta 0, 0.3, 0.6" : "outside band:" + misses);
    }

    {
        bool ok = true;
        std::string detail;
        for (const auto& sc : scenario_table()) {
            for (ModelKind m : {ModelKind::SMM, ModelKind::MM, ModelKind::Cluster}) {
                const double r = find(null_run.summaries, sc.label, 0.0, m).rejection_rate;
                if (r > 0.08) {
                    ok = false;
                    detail += " " + model_name(m) + "/" + sc.label + fmt("=%.3f", r);
                }
            }
            if (sc.label >= "C") {
                const double r = find(null_run.summaries, sc.label, 0.0, ModelKind::FMNaive).rejection_rate;
                if (r < 0.15) {
                    ok = false;
                    detail += " naive/" + sc.label + fmt("=%.3f", r);
                }
            }
        }
        report(5, ok, ok ? "FPR <= 0.08 for SMM, MM, cluster in A-F; naive >= 0.15 in C-F" : "violations:" + detail);
    }

    {
        bool ok = true;
        std::string detail;
        for (const auto& sc : scenario_table()) {
            const double smm = find(null_run.summaries, sc.label, 0.0, ModelKind::SMM).pct_re;
            const double naive = find(null_run.summaries, sc.label, 0.0, ModelKind::FMNaive).pct_re;
            if (std::abs(smm) > 15.0) {
                ok = false;
                detail += " SMM/" + sc.label + fmt("=%+.1f", smm);
            }
            if (naive > -40.0) {
                ok = false;
                detail += " naive/" + sc.label + fmt("=%+.1f", naive);
            }
        }
        report(6, ok, ok ? "%RE within 15 of 0 for SMM; <= -40 for naive, all scenarios" : "violations:" + detail);
    }

    {
        bool ok = true;
        std::string detail;
        for (const auto& sc : scenario_table()) {
            for (ModelKind m : {ModelKind::SMM, ModelKind::MM, ModelKind::Cluster}) {
                const double c = find(null_run.summaries, sc.label, 0.0, m).coverage;
                if (c < 0.93) {
                    ok = false;
                    detail += " " + model_name(m) + "/" + sc.label + fmt("=%.3f", c);
                }
            }
            if (sc.label >= "C") {
                const double c = find(null_run.summaries, sc.label, 0.0, ModelKind::FMNaive).coverage;
                if (c > 0.80) {
                    ok = false;
                    detail += " naive/" + sc.label + fmt("=%.3f", c);
                }
            }
        }
        report(7, ok, ok ? "coverage >= 0.93 for SMM, MM, cluster in A-F; naive <= 0.80 in C-F" : "violations:" + detail);
    }

    std::printf("%s: %d criterion(s) failed\n", failures == 0 ? "ALL PASS" : "NOT ALL PASS", failures);
    return failures == 0 ? 0 : 1;
}
