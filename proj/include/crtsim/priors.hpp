#pragma once

#include <cmath>
#include <limits>

#include "crtsim/error.hpp"

namespace crtsim {

// Rate of the exponential prior on a standard deviation with P(sigma > U) = alpha.
inline double pc_sd_rate(double upper, double alpha) {
    detail::require(upper > 0.0, "pc_sd_rate: U must be > 0");
    detail::require(alpha > 0.0 && alpha < 1.0, "pc_sd_rate: alpha must lie in (0, 1)");
    return -std::log(alpha) / upper;
}

inline double pc_sd_logpdf(double sigma, double lambda) {
    detail::require(sigma >= 0.0, "pc_sd_logpdf: sigma must be >= 0");
    detail::require(lambda > 0.0, "pc_sd_logpdf: lambda must be > 0");
    return std::log(lambda) - lambda * sigma;
}

// Rate of the range prior lambda phi^-2 exp(-lambda/phi) with P(phi < phi0) = alpha.
inline double pc_range_rate(double phi0, double alpha) {
    detail::require(phi0 > 0.0, "pc_range_rate: phi0 must be > 0");
    detail::require(alpha > 0.0 && alpha < 1.0, "pc_range_rate: alpha must lie in (0, 1)");
    return -phi0 * std::log(alpha);
}

inline double pc_range_logpdf(double phi, double lambda) {
    detail::require(phi > 0.0, "pc_range_logpdf: phi must be > 0");
    detail::require(lambda > 0.0, "pc_range_logpdf: lambda must be > 0");
    return std::log(lambda) - 2.0 * std::log(phi) - lambda / phi;
}

// Log prior density of psi = log(parameter), Jacobian included, with its
// first and second derivatives in psi.
struct LogScalePrior {
    double value = 0.0;
    double d1 = 0.0;
    double d2 = 0.0;
};

inline LogScalePrior pc_sd_log_scale(double psi, double lambda) {
    const double sigma = std::exp(psi);
    return {std::log(lambda) - lambda * sigma + psi, 1.0 - lambda * sigma, -lambda * sigma};
}

inline LogScalePrior pc_range_log_scale(double psi, double lambda) {
    const double inv_phi = std::exp(-psi);
    return {std::log(lambda) - psi - lambda * inv_phi, -1.0 + lambda * inv_phi, -lambda * inv_phi};
}

struct NormalPrior {
    double mean = 0.0;
    double variance = 1000.0;
};

struct PriorSpec {
    NormalPrior fixed_effects{0.0, 1000.0};     // every model but CRT-FM
    NormalPrior fixed_effects_fm{0.0, 1.0};     // CRT-FM, dummies included
    double rate_sigma_w = pc_sd_rate(10.0, 0.1);
    double rate_sigma_b = pc_sd_rate(3.0, 0.1);
    double rate_tau = pc_sd_rate(3.0, 0.1);
    double rate_phi = pc_range_rate(7.0, 0.5);
    double rate_sigma_c = pc_sd_rate(10.0, 0.1);  // cluster-level residual sd

    void validate() const {
        detail::require(fixed_effects.variance > 0.0 && fixed_effects_fm.variance > 0.0,
                        "PriorSpec: fixed-effect variances must be > 0");
        for (double r : {rate_sigma_w, rate_sigma_b, rate_tau, rate_phi, rate_sigma_c})
            detail::require(r > 0.0 && std::isfinite(r), "PriorSpec: rates must be > 0");
    }
};

}  // namespace crtsim
