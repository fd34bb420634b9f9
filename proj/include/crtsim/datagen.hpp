#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/random/uniform_int_distribution.hpp>

#include "crtsim/design.hpp"
#include "crtsim/gaussian.hpp"
#include "crtsim/geometry.hpp"
#include "crtsim/random.hpp"
#include "crtsim/scenario.hpp"

namespace crtsim {

struct LatentComponents {
    Eigen::VectorXd u;    // per cluster
    Eigen::VectorXd w;    // spatial effect per individual
    Eigen::VectorXd eps;  // individual noise
};

// Individuals are stored cluster-major: individual k*m + j is member j of
// cluster k.
struct TrialData {
    int n_clusters = 0;
    std::vector<Point2> locations;
    std::vector<int> cluster_of;
    std::vector<int> z_cluster;
    Eigen::MatrixXd x;  // N x K covariates, no intercept column
    Eigen::VectorXd y;
    std::optional<LatentComponents> latent;

    Eigen::Index size() const { return y.size(); }
    Eigen::Index n_covariates() const { return x.cols(); }
    int z_of(Eigen::Index i) const { return z_cluster[static_cast<std::size_t>(cluster_of[static_cast<std::size_t>(i)])]; }

    Eigen::VectorXd z_individual() const {
        Eigen::VectorXd z(size());
        for (Eigen::Index i = 0; i < size(); ++i) z(i) = z_of(i);
        return z;
    }
};

inline void validate(const ScenarioConfig& cfg) {
    detail::require(cfg.grid.rows >= 1 && cfg.grid.cols >= 1 && cfg.grid.cell_size > 0.0, "scenario: invalid grid");
    detail::require(cfg.m >= 1, "scenario: m must be >= 1");
    detail::require(cfg.n_clusters() % 2 == 0, "scenario: the number of clusters must be even for 1:1 allocation");
    cfg.kernel.validate();
    const VarianceComponents vc = scenario_components(cfg);
    detail::require(vc.sigma_w2 > 0.0 && vc.sigma_b2 >= 0.0 && vc.tau2 >= 0.0, "scenario: invalid variance components");
}

inline std::vector<int> randomize_clusters(int n_clusters, Randomization scheme, const ClusterRegions& regions, Rng& rng) {
    detail::require(n_clusters >= 2 && n_clusters % 2 == 0, "randomize_clusters: the number of clusters must be even");
    std::vector<int> z(static_cast<std::size_t>(n_clusters), 0);
    if (scheme == Randomization::Checkerboard) {
        detail::require(regions.size() == static_cast<std::size_t>(n_clusters),
                        "randomize_clusters: regions do not match the cluster count");
        // Random phase so each parity class is treated half the time.
        const int phase = uniform01(rng) < 0.5 ? 0 : 1;
        for (std::size_t k = 0; k < z.size(); ++k) z[k] = (regions.row_of(k) + regions.col_of(k) + phase) % 2;
        return z;
    }
    std::vector<int> order(z.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        boost::random::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(order[i], order[pick(rng)]);
    }
    for (int k = 0; k < n_clusters / 2; ++k) z[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = 1;
    return z;
}

// Draw order: locations, allocation, covariates, cluster effects, spatial
// field, noise.
inline TrialData generate_trial(const ScenarioConfig& cfg, std::uint64_t replicate_seed, bool keep_latent = false) {
    validate(cfg);
    const VarianceComponents vc = scenario_components(cfg);
    Rng rng(replicate_seed);

    const ClusterRegions regions = grid_layout(cfg.grid.rows, cfg.grid.cols, cfg.grid.cell_size);
    const int n_clusters = static_cast<int>(regions.size());
    const auto grouped = sample_locations(regions, cfg.m, rng);

    TrialData data;
    data.n_clusters = n_clusters;
    for (int k = 0; k < n_clusters; ++k) {
        for (const Point2& p : grouped[static_cast<std::size_t>(k)]) {
            data.locations.push_back(p);
            data.cluster_of.push_back(k);
        }
    }
    const auto n = static_cast<Eigen::Index>(data.locations.size());
    data.z_cluster = randomize_clusters(n_clusters, cfg.randomization, regions, rng);

    data.x.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) data.x(i, 0) = standard_normal(rng);

    LatentComponents latent;
    latent.u.resize(n_clusters);
    for (int k = 0; k < n_clusters; ++k) latent.u(k) = std::sqrt(vc.sigma_b2) * standard_normal(rng);

    latent.w = Eigen::VectorXd::Zero(n);
    if (vc.tau2 > 0.0) {
        const Eigen::MatrixXd cov = vc.tau2 * corr_matrix(data.locations, cfg.kernel);
        CholFactor chol;
        try {
            chol = chol_factor_jittered(cov);
        } catch (const NotPositiveDefinite& e) {
            throw GenerationError(std::string("spatial covariance factorization failed: ") + e.what());
        }
        latent.w = mvn_sample(Eigen::VectorXd::Zero(n), chol, rng);
    }

    latent.eps.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) latent.eps(i) = std::sqrt(vc.sigma_w2) * standard_normal(rng);

    data.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z = data.z_of(i);
        const double xi = data.x(i, 0);
        data.y(i) = cfg.theta * z + cfg.gamma * xi + cfg.delta * z * xi +
                    latent.u(data.cluster_of[static_cast<std::size_t>(i)]) + latent.w(i) + latent.eps(i);
    }
    if (keep_latent) data.latent = std::move(latent);
    return data;
}

struct ClusterMeans {
    Eigen::VectorXd ybar;
    Eigen::MatrixXd xbar;
    Eigen::VectorXd z;
};

inline ClusterMeans aggregate_clusters(const TrialData& data) {
    const int n_clusters = data.n_clusters;
    ClusterMeans out;
    out.ybar = Eigen::VectorXd::Zero(n_clusters);
    out.xbar = Eigen::MatrixXd::Zero(n_clusters, data.x.cols());
    out.z.resize(n_clusters);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(n_clusters);
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        const int g = data.cluster_of[static_cast<std::size_t>(i)];
        out.ybar(g) += data.y(i);
        out.xbar.row(g) += data.x.row(i);
        counts(g) += 1.0;
    }
    for (int g = 0; g < n_clusters; ++g) {
        detail::require(counts(g) > 0.0, "aggregate_clusters: empty cluster");
        out.ybar(g) /= counts(g);
        out.xbar.row(g) /= counts(g);
        out.z(g) = data.z_cluster[static_cast<std::size_t>(g)];
    }
    return out;
}

// Flat table: id, cluster, sx, sy, z, x (or x1..xK), y [, u, w, eps].
inline void write_trial_csv(std::ostream& os, const TrialData& data) {
    const auto k = data.x.cols();
    os << "id,cluster,sx,sy,z";
    if (k == 1) {
        os << ",x";
    } else {
        for (Eigen::Index c = 0; c < k; ++c) os << ",x" << (c + 1);
    }
    os << ",y";
    if (data.latent) os << ",u,w,eps";
    os << '\n';
    const auto old_precision = os.precision(17);
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        const auto s = static_cast<std::size_t>(i);
        os << i << ',' << data.cluster_of[s] << ',' << data.locations[s].x << ',' << data.locations[s].y << ','
           << data.z_of(i);
        for (Eigen::Index c = 0; c < k; ++c) os << ',' << data.x(i, c);
        os << ',' << data.y(i);
        if (data.latent) {
            os << ',' << data.latent->u(data.cluster_of[s]) << ',' << data.latent->w(i) << ',' << data.latent->eps(i);
        }
        os << '\n';
    }
    os.precision(old_precision);
}

}  // namespace crtsim
