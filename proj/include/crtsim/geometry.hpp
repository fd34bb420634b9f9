#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/bessel.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "crtsim/error.hpp"
#include "crtsim/random.hpp"

namespace crtsim {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

inline double distance(const Point2& a, const Point2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct Rect {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

    bool contains(const Point2& p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }
    Point2 midpoint() const { return {0.5 * (x0 + x1), 0.5 * (y0 + y1)}; }
};

// Rectangular cells tiling [0, cols*cell] x [0, rows*cell]; cluster k sits at
// row k / cols, column k % cols.
struct ClusterRegions {
    int rows = 0;
    int cols = 0;
    double cell_size = 1.0;
    std::vector<Point2> centers;
    std::vector<Rect> bounds;

    std::size_t size() const { return centers.size(); }
    int row_of(std::size_t k) const { return static_cast<int>(k) / cols; }
    int col_of(std::size_t k) const { return static_cast<int>(k) % cols; }
};

inline ClusterRegions grid_layout(int rows, int cols, double cell_size) {
    detail::require(rows >= 1 && cols >= 1, "grid_layout: rows and cols must be >= 1");
    detail::require(cell_size > 0.0 && std::isfinite(cell_size), "grid_layout: cell_size must be > 0");
    ClusterRegions regions{rows, cols, cell_size, {}, {}};
    regions.centers.reserve(static_cast<std::size_t>(rows * cols));
    regions.bounds.reserve(static_cast<std::size_t>(rows * cols));
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            Rect box{c * cell_size, r * cell_size, (c + 1) * cell_size, (r + 1) * cell_size};
            regions.bounds.push_back(box);
            regions.centers.push_back(box.midpoint());
        }
    }
    return regions;
}

// m points per cluster, uniform within each cell. Draw order is cluster-major.
inline std::vector<std::vector<Point2>> sample_locations(const ClusterRegions& regions, int m, Rng& rng) {
    detail::require(m >= 1, "sample_locations: m must be >= 1");
    std::vector<std::vector<Point2>> out(regions.size());
    for (std::size_t k = 0; k < regions.size(); ++k) {
        const Rect& b = regions.bounds[k];
        out[k].reserve(static_cast<std::size_t>(m));
        for (int j = 0; j < m; ++j) {
            const double u = uniform01(rng);
            const double v = uniform01(rng);
            out[k].push_back({b.x0 + u * (b.x1 - b.x0), b.y0 + v * (b.y1 - b.y0)});
        }
    }
    return out;
}

enum class KernelFamily { Exponential, Matern };

struct KernelSpec {
    KernelFamily family = KernelFamily::Exponential;
    double phi = 1.0;
    double nu = 0.5;

    void validate() const {
        detail::require(phi > 0.0 && std::isfinite(phi), "kernel: phi must be > 0");
        if (family == KernelFamily::Matern) detail::require(nu > 0.0 && std::isfinite(nu), "kernel: nu must be > 0");
    }
};

namespace detail {

inline bool is_half_integer(double nu) {
    const double twice = 2.0 * std::abs(nu);
    return std::abs(twice - std::round(twice)) < 1e-12 && static_cast<long>(std::round(twice)) % 2 == 1;
}

// K_{n+1/2} by upward recurrence from the closed forms of K_{1/2}, K_{3/2}.
inline double bessel_k_half_integer(double order, double x) {
    const double a = std::abs(order);
    const double k_half = std::sqrt(std::numbers::pi / (2.0 * x)) * std::exp(-x);
    if (a < 1.0) return k_half;
    double k_prev = k_half;
    double k_cur = k_half * (1.0 + 1.0 / x);
    for (double v = 1.5; v + 0.5 < a; v += 1.0) {
        const double next = k_prev + (2.0 * v / x) * k_cur;
        k_prev = k_cur;
        k_cur = next;
    }
    return k_cur;
}

}  // namespace detail

// Modified Bessel function of the second kind; symmetric in the order.
inline double bessel_k(double order, double x) {
    if (detail::is_half_integer(order)) return detail::bessel_k_half_integer(order, x);
    return boost::math::cyl_bessel_k(std::abs(order), x);
}

inline double exponential_corr(double d, double phi) {
    detail::require(phi > 0.0, "exponential_corr: phi must be > 0");
    detail::require(d >= 0.0, "exponential_corr: distance must be >= 0");
    return std::exp(-d / phi);
}

inline double matern_corr(double d, double phi, double nu) {
    detail::require(phi > 0.0, "matern_corr: phi must be > 0");
    detail::require(nu > 0.0, "matern_corr: nu must be > 0");
    detail::require(d >= 0.0, "matern_corr: distance must be >= 0");
    if (d == 0.0) return 1.0;
    const double r = d / phi;
    if (std::abs(nu - 0.5) < 1e-15) return std::exp(-r);
    if (std::abs(nu - 1.5) < 1e-15) return (1.0 + r) * std::exp(-r);
    if (std::abs(nu - 2.5) < 1e-15) return (1.0 + r + r * r / 3.0) * std::exp(-r);
    const double log_norm = -(nu - 1.0) * std::numbers::ln2 - boost::math::lgamma(nu);
    const double k = bessel_k(nu, r);
    if (k == 0.0) return 0.0;
    return std::exp(log_norm + nu * std::log(r) + std::log(k));
}

inline double kernel_corr(double d, const KernelSpec& k) {
    return k.family == KernelFamily::Exponential ? exponential_corr(d, k.phi) : matern_corr(d, k.phi, k.nu);
}

// Correlation and its first two derivatives with respect to log(phi).
struct CorrDerivs {
    double value = 1.0;
    double d1 = 0.0;
    double d2 = 0.0;
};

inline CorrDerivs kernel_corr_log_phi_derivs(double d, const KernelSpec& k) {
    if (d == 0.0) return {};
    const double r = d / k.phi;
    if (k.family == KernelFamily::Exponential || std::abs(k.nu - 0.5) < 1e-15) {
        const double e = std::exp(-r);
        return {e, r * e, (r * r - r) * e};
    }
    // d/dlogphi [c r^nu K_nu(r)] = c r^{nu+1} K_{nu-1}(r)
    const double nu = k.nu;
    const double c = std::exp(-(nu - 1.0) * std::numbers::ln2 - boost::math::lgamma(nu));
    const double rn = std::pow(r, nu);
    const double k0 = bessel_k(nu, r);
    const double k1 = bessel_k(nu - 1.0, r);
    const double k2 = bessel_k(nu - 2.0, r);
    return {c * rn * k0, c * rn * r * k1, c * rn * r * (r * k2 - 2.0 * k1)};
}

inline Eigen::MatrixXd distance_matrix(std::span<const Point2> pts) {
    const auto n = static_cast<Eigen::Index>(pts.size());
    Eigen::MatrixXd d(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        d(j, j) = 0.0;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            const double v = distance(pts[static_cast<std::size_t>(i)], pts[static_cast<std::size_t>(j)]);
            d(i, j) = v;
            d(j, i) = v;
        }
    }
    return d;
}

inline Eigen::MatrixXd corr_from_distances(const Eigen::MatrixXd& dist, const KernelSpec& kernel) {
    kernel.validate();
    if (kernel.family == KernelFamily::Exponential) return (-dist.array() / kernel.phi).exp().matrix();
    Eigen::MatrixXd h(dist.rows(), dist.cols());
    for (Eigen::Index j = 0; j < dist.cols(); ++j) {
        h(j, j) = 1.0;
        for (Eigen::Index i = j + 1; i < dist.rows(); ++i) {
            const double v = matern_corr(dist(i, j), kernel.phi, kernel.nu);
            h(i, j) = v;
            h(j, i) = v;
        }
    }
    return h;
}

inline Eigen::MatrixXd corr_matrix(std::span<const Point2> locations, const KernelSpec& kernel) {
    detail::require(!locations.empty(), "corr_matrix: no locations");
    return corr_from_distances(distance_matrix(locations), kernel);
}

}  // namespace crtsim
