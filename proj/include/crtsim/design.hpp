#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "crtsim/error.hpp"
#include "crtsim/scenario.hpp"

namespace crtsim {

struct DesignTarget {
    double theta = 0.6;
    double power = 0.85;
    double alpha = 0.05;  // two-sided
    int m = 40;
    double icc = 0.05;
};

struct ClusterCount {
    double n_per_arm = 0.0;  // individuals per arm, design-effect inflated
    double deff = 1.0;
    int raw = 0;   // ceil(2 * n_per_arm / m)
    int even = 0;  // raw rounded up to an even number for 1:1 allocation
};

// Spatial variance counts toward the denominator only.
inline double icc_from_components(const VarianceComponents& vc) {
    detail::require(vc.sigma_w2 >= 0.0 && vc.sigma_b2 >= 0.0 && vc.tau2 >= 0.0,
                    "icc_from_components: negative variance component");
    const double total = vc.sigma_b2 + vc.tau2 + vc.sigma_w2;
    detail::require(total > 0.0, "icc_from_components: all components are zero");
    return vc.sigma_b2 / total;
}

inline VarianceComponents variance_partition(double icc, double f, double sigma_w2) {
    detail::require(sigma_w2 > 0.0, "variance_partition: sigma_w2 must be > 0");
    detail::require(f > 0.0 && f <= 1.0, "variance_partition: f must lie in (0, 1]");
    detail::require(icc >= 0.0 && icc < 1.0, "variance_partition: icc must lie in [0, 1)");
    if (icc == 0.0) return {sigma_w2, 0.0, 0.0};
    const double denom = 1.0 / icc - 1.0 / f;
    detail::require(denom > 0.0, "variance_partition: requires 1/icc > 1/f so that sigma_b2 > 0");
    const double sigma_b2 = sigma_w2 / denom;
    return {sigma_w2, sigma_b2, (1.0 - f) * sigma_b2 / f};
}

inline double design_effect(int m, double icc) {
    detail::require(m >= 1, "design_effect: m must be >= 1");
    detail::require(icc >= 0.0 && icc < 1.0, "design_effect: icc must lie in [0, 1)");
    return 1.0 + (m - 1) * icc;
}

inline double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

inline ClusterCount required_clusters(const DesignTarget& t, double sigma_w2) {
    detail::require(t.theta != 0.0 && std::isfinite(t.theta), "required_clusters: theta must be nonzero");
    detail::require(t.power > 0.0 && t.power < 1.0, "required_clusters: power must lie in (0, 1)");
    detail::require(t.alpha > 0.0 && t.alpha < 1.0, "required_clusters: alpha must lie in (0, 1)");
    detail::require(sigma_w2 > 0.0, "required_clusters: sigma_w2 must be > 0");
    const double z = normal_quantile(t.power) + normal_quantile(1.0 - t.alpha / 2.0);
    ClusterCount out;
    out.deff = design_effect(t.m, t.icc);
    out.n_per_arm = 2.0 * sigma_w2 * z * z / (t.theta * t.theta) * out.deff;
    out.raw = static_cast<int>(std::ceil(2.0 * out.n_per_arm / t.m - 1e-12));
    out.even = out.raw % 2 == 0 ? out.raw : out.raw + 1;
    return out;
}

// 0, 0.1, ..., 1.4
inline std::vector<double> default_theta_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 14; ++i) grid.push_back(i / 10.0);
    return grid;
}

// The six scenarios A-F: ICC x range, 4x4 unit grid, m = 40, f = 0.5,
// sigma_w2 = 2.25, gamma = delta = 0.1.
inline std::vector<ScenarioConfig> scenario_table() {
    const double iccs[] = {0.05, 0.15, 0.25};
    const double phis[] = {1.5, 3.5};
    std::vector<ScenarioConfig> out;
    char label = 'A';
    for (double icc : iccs) {
        for (double phi : phis) {
            ScenarioConfig s;
            s.label = std::string(1, label++);
            s.icc = icc;
            s.kernel = {KernelFamily::Exponential, phi, 0.5};
            out.push_back(s);
        }
    }
    return out;
}

inline ScenarioConfig scenario_by_label(const std::string& label) {
    for (auto& s : scenario_table())
        if (s.label == label) return s;
    throw InvalidArgument("unknown scenario label '" + label + "' (expected A-F)");
}

inline VarianceComponents scenario_components(const ScenarioConfig& s) {
    if (s.components) return *s.components;
    return variance_partition(s.icc, s.f, s.sigma_w2);
}

}  // namespace crtsim
