#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "crtsim/error.hpp"
#include "crtsim/random.hpp"

namespace crtsim {

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

struct CholFactor {
    Eigen::MatrixXd lower;  // L with L * L^T = A
    double log_det = 0.0;

    Eigen::Index dimension() const { return lower.rows(); }

    template <typename Derived>
    Eigen::MatrixXd solve(const Eigen::MatrixBase<Derived>& b) const {
        Eigen::MatrixXd x = lower.triangularView<Eigen::Lower>().solve(b);
        lower.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
        return x;
    }

    // L^{-1} b
    template <typename Derived>
    Eigen::MatrixXd whiten(const Eigen::MatrixBase<Derived>& b) const {
        return lower.triangularView<Eigen::Lower>().solve(b);
    }

    Eigen::MatrixXd reconstruct() const { return lower * lower.transpose(); }
};

struct GaussianDist {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;

    Eigen::Index dimension() const { return mean.size(); }
};

// Relative pivot floor: a pivot below kPivotTolerance * max(diag(A)) is
// treated as a failure.
inline constexpr double kPivotTolerance = 1e-12;

namespace detail {

// Locates the first failing pivot with a plain column Cholesky. Only used on
// the error path.
inline std::size_t locate_failed_pivot(const Eigen::MatrixXd& a, double floor_value, double& pivot_value) {
    const Eigen::Index n = a.rows();
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double s = a(j, j) - l.row(j).head(j).squaredNorm();
        if (!(s > floor_value)) {
            pivot_value = s;
            return static_cast<std::size_t>(j);
        }
        l(j, j) = std::sqrt(s);
        for (Eigen::Index i = j + 1; i < n; ++i)
            l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
    }
    pivot_value = 0.0;
    return static_cast<std::size_t>(n);
}

}  // namespace detail

inline CholFactor chol_factor(const Eigen::MatrixXd& a) {
    detail::require(a.rows() == a.cols() && a.rows() > 0, "chol_factor: matrix must be square and nonempty");
    const double scale = a.diagonal().cwiseAbs().maxCoeff();
    const double floor_value = kPivotTolerance * (scale > 0.0 ? scale : 1.0);
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    bool ok = llt.info() == Eigen::Success;
    if (ok) {
        const auto& l = llt.matrixLLT();
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            if (!(l(i, i) * l(i, i) > floor_value)) {
                throw NotPositiveDefinite(static_cast<std::size_t>(i), l(i, i) * l(i, i));
            }
        }
    }
    if (!ok) {
        double pivot_value = 0.0;
        const std::size_t pivot = detail::locate_failed_pivot(a, floor_value, pivot_value);
        throw NotPositiveDefinite(pivot, pivot_value);
    }
    CholFactor f;
    f.lower = llt.matrixL();
    f.log_det = 2.0 * f.lower.diagonal().array().log().sum();
    return f;
}

// Factor, retrying once with jitter * mean(diag) added to the diagonal.
inline CholFactor chol_factor_jittered(Eigen::MatrixXd a, double jitter = 1e-8) {
    try {
        return chol_factor(a);
    } catch (const NotPositiveDefinite&) {
        a.diagonal().array() += jitter * a.diagonal().mean();
        return chol_factor(a);
    }
}

inline double mvn_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const CholFactor& chol) {
    detail::require(y.size() == mu.size() && y.size() == chol.dimension(), "mvn_logpdf: dimension mismatch");
    const Eigen::VectorXd z = chol.whiten(y - mu);
    return -0.5 * (static_cast<double>(y.size()) * kLog2Pi + chol.log_det + z.squaredNorm());
}

inline Eigen::VectorXd mvn_sample(const Eigen::VectorXd& mu, const CholFactor& chol, Rng& rng) {
    detail::require(mu.size() == chol.dimension(), "mvn_sample: dimension mismatch");
    Eigen::VectorXd z(mu.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = standard_normal(rng);
    return mu + chol.lower.triangularView<Eigen::Lower>() * z;
}

// Covariance operators usable by gaussian_linear_fit. Each knows its own
// log-determinant and how to apply its inverse.
template <typename S>
concept CovarianceSolver = requires(const S& s, const Eigen::MatrixXd& b) {
    { s.log_det() } -> std::convertible_to<double>;
    { s.solve(b) } -> std::convertible_to<Eigen::MatrixXd>;
    { s.size() } -> std::convertible_to<Eigen::Index>;
};

class DenseCovSolver {
public:
    explicit DenseCovSolver(CholFactor chol) : chol_(std::move(chol)) {}
    explicit DenseCovSolver(const Eigen::MatrixXd& sigma) : chol_(chol_factor(sigma)) {}

    double log_det() const { return chol_.log_det; }
    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const { return chol_.solve(b); }
    Eigen::Index size() const { return chol_.dimension(); }
    const CholFactor& factor() const { return chol_; }

private:
    CholFactor chol_;
};

// variance * I
class ScaledIdentitySolver {
public:
    ScaledIdentitySolver(Eigen::Index n, double variance) : n_(n), variance_(variance) {
        detail::require(variance > 0.0, "ScaledIdentitySolver: variance must be > 0");
    }

    double log_det() const { return static_cast<double>(n_) * std::log(variance_); }
    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const { return b / variance_; }
    Eigen::Index size() const { return n_; }

private:
    Eigen::Index n_;
    double variance_;
};

// sigma_w2 * I + sigma_b2 * C'C where C'C has a block of ones per cluster.
// Observations of a cluster need not be contiguous.
class BlockCompoundSolver {
public:
    BlockCompoundSolver(std::span<const int> cluster_of, int n_clusters, double sigma_w2, double sigma_b2)
        : cluster_of_(cluster_of.begin(), cluster_of.end()),
          counts_(static_cast<std::size_t>(n_clusters), 0),
          sigma_w2_(sigma_w2),
          sigma_b2_(sigma_b2) {
        detail::require(sigma_w2 > 0.0 && sigma_b2 >= 0.0, "BlockCompoundSolver: invalid variances");
        for (int g : cluster_of_) ++counts_.at(static_cast<std::size_t>(g));
        log_det_ = 0.0;
        for (int m : counts_) {
            if (m == 0) continue;
            log_det_ += (m - 1) * std::log(sigma_w2) + std::log(sigma_w2 + m * sigma_b2);
        }
    }

    double log_det() const { return log_det_; }
    Eigen::Index size() const { return static_cast<Eigen::Index>(cluster_of_.size()); }

    // (1/sw2) [I - sb2 / (sw2 + m sb2) 11'] per block
    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const {
        const auto n_clusters = static_cast<Eigen::Index>(counts_.size());
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n_clusters, b.cols());
        for (std::size_t i = 0; i < cluster_of_.size(); ++i)
            sums.row(cluster_of_[i]) += b.row(static_cast<Eigen::Index>(i));
        for (Eigen::Index g = 0; g < n_clusters; ++g) {
            const double m = counts_[static_cast<std::size_t>(g)];
            sums.row(g) *= sigma_b2_ / (sigma_w2_ + m * sigma_b2_);
        }
        Eigen::MatrixXd x = b;
        for (std::size_t i = 0; i < cluster_of_.size(); ++i)
            x.row(static_cast<Eigen::Index>(i)) -= sums.row(cluster_of_[i]);
        return x / sigma_w2_;
    }

private:
    std::vector<int> cluster_of_;
    std::vector<int> counts_;
    double sigma_w2_;
    double sigma_b2_;
    double log_det_ = 0.0;
};

struct LinearGaussianFit {
    double log_marginal = 0.0;  // log p(y) with the coefficients integrated out
    GaussianDist posterior;     // coefficients given y
};

// y = X b + e, e ~ N(0, Sigma), b ~ prior. Returns the conjugate posterior and
// log N(y; X m0, Sigma + X V0 X') through the K x K precision.
template <CovarianceSolver S>
LinearGaussianFit gaussian_linear_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const S& sigma,
                                      const GaussianDist& prior) {
    detail::require(x.rows() == y.size() && sigma.size() == y.size(), "gaussian_linear_fit: row mismatch");
    detail::require(x.cols() == prior.dimension() && prior.covariance.rows() == prior.dimension(),
                    "gaussian_linear_fit: prior dimension mismatch");
    const CholFactor prior_chol = chol_factor(prior.covariance);
    const Eigen::MatrixXd prior_prec = prior_chol.solve(Eigen::MatrixXd::Identity(x.cols(), x.cols()));

    Eigen::MatrixXd rhs(x.rows(), x.cols() + 1);
    rhs << x, y;
    const Eigen::MatrixXd solved = sigma.solve(rhs);
    const auto sx = solved.leftCols(x.cols());
    const auto sy = solved.col(x.cols());

    Eigen::MatrixXd precision = x.transpose() * sx + prior_prec;
    precision = 0.5 * (precision + precision.transpose());
    const Eigen::VectorXd b = x.transpose() * sy + prior_prec * prior.mean;
    const CholFactor post_chol = chol_factor(precision);

    LinearGaussianFit fit;
    fit.posterior.mean = post_chol.solve(b);
    fit.posterior.covariance = post_chol.solve(Eigen::MatrixXd::Identity(x.cols(), x.cols()));
    const double quad = y.dot(sy) + prior.mean.dot(prior_prec * prior.mean) - b.dot(fit.posterior.mean);
    fit.log_marginal = -0.5 * (static_cast<double>(y.size()) * kLog2Pi + sigma.log_det() + prior_chol.log_det +
                               post_chol.log_det + quad);
    return fit;
}

inline GaussianDist gls_posterior(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const CholFactor& sigma_chol,
                                  const GaussianDist& prior) {
    return gaussian_linear_fit(x, y, DenseCovSolver(sigma_chol), prior).posterior;
}

// Direct form: log N(y; X m0, Sigma + X V0 X').
inline double marginal_loglik(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::MatrixXd& sigma,
                              const GaussianDist& prior) {
    detail::require(x.rows() == y.size() && sigma.rows() == y.size() && sigma.cols() == y.size(),
                    "marginal_loglik: dimension mismatch");
    detail::require(x.cols() == prior.dimension(), "marginal_loglik: prior dimension mismatch");
    Eigen::MatrixXd total = sigma + x * prior.covariance * x.transpose();
    total = 0.5 * (total + total.transpose());
    return mvn_logpdf(y, x * prior.mean, chol_factor(total));
}

}  // namespace crtsim
