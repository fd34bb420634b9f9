#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numbers>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crtsim/datagen.hpp"
#include "crtsim/error.hpp"
#include "crtsim/gaussian.hpp"
#include "crtsim/geometry.hpp"
#include "crtsim/optimize.hpp"
#include "crtsim/priors.hpp"

namespace crtsim {

enum class ModelKind { SMM, FMNaive, FM, MM, Cluster };

inline constexpr std::array<ModelKind, 5> kAllModels{ModelKind::SMM, ModelKind::FMNaive, ModelKind::FM, ModelKind::MM,
                                                     ModelKind::Cluster};

inline std::string model_name(ModelKind k) {
    switch (k) {
        case ModelKind::SMM: return "CRT-SMM";
        case ModelKind::FMNaive: return "CRT-FM-naive";
        case ModelKind::FM: return "CRT-FM";
        case ModelKind::MM: return "CRT-MM";
        case ModelKind::Cluster: return "CRT-cluster";
    }
    return "?";
}

inline std::string model_token(ModelKind k) {
    switch (k) {
        case ModelKind::SMM: return "smm";
        case ModelKind::FMNaive: return "fm-naive";
        case ModelKind::FM: return "fm";
        case ModelKind::MM: return "mm";
        case ModelKind::Cluster: return "cluster";
    }
    return "?";
}

// Accepts tokens ("fm-naive") and display names ("CRT-FM-naive"), any case.
inline ModelKind parse_model(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s.rfind("crt-", 0) == 0) s = s.substr(4);
    for (ModelKind k : kAllModels)
        if (model_token(k) == s) return k;
    if (s == "fm_naive" || s == "fmnaive" || s == "naive") return ModelKind::FMNaive;
    throw InvalidArgument("unknown model '" + s + "'");
}

inline int n_hyper(ModelKind k) {
    switch (k) {
        case ModelKind::SMM: return 4;
        case ModelKind::MM: return 2;
        default: return 1;
    }
}

inline std::vector<std::string> hyper_names(ModelKind k) {
    if (k == ModelKind::Cluster) return {"log_sigma_c"};
    std::vector<std::string> all{"log_sigma_w", "log_sigma_b", "log_tau", "log_phi"};
    all.resize(static_cast<std::size_t>(n_hyper(k)));
    return all;
}

// One hyperparameter configuration. For CRT-cluster log_sigma_w holds the
// cluster-level residual sd.
struct HyperPoint {
    double log_sigma_w = 0.0;
    std::optional<double> log_sigma_b;
    std::optional<double> log_tau;
    std::optional<double> log_phi;
    double log_weight = 0.0;     // normalized
    double log_posterior = 0.0;  // unnormalized, log-scale density incl. Jacobian
    double log_marginal = 0.0;   // log p(y | hyper)
    GaussianDist conditional;    // fixed effects given hyper and y

    Eigen::VectorXd as_vector() const {
        std::vector<double> v{log_sigma_w};
        for (const auto& o : {log_sigma_b, log_tau, log_phi})
            if (o) v.push_back(*o);
        return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }

    static HyperPoint from_vector(ModelKind kind, const Eigen::VectorXd& psi) {
        detail::require(psi.size() == n_hyper(kind), "HyperPoint: wrong number of hyperparameters");
        HyperPoint h;
        h.log_sigma_w = psi(0);
        if (psi.size() >= 2) h.log_sigma_b = psi(1);
        if (psi.size() >= 4) {
            h.log_tau = psi(2);
            h.log_phi = psi(3);
        }
        return h;
    }
};

struct HyperGrid {
    ModelKind kind = ModelKind::SMM;
    std::vector<HyperPoint> points;
    Eigen::VectorXd mode;
    double log_posterior_at_mode = 0.0;
    double log_marginal_at_mode = 0.0;
    std::vector<std::string> coefficient_labels;
    int optimizer_iterations = 0;
    int optimizer_evaluations = 0;

    double weight_sum() const {
        double s = 0.0;
        for (const auto& p : points) s += std::exp(p.log_weight);
        return s;
    }
};

struct MixtureComponent {
    double weight = 1.0;
    double mean = 0.0;
    double sd = 1.0;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

// Posterior of the marginal treatment effect as a Gaussian mixture.
struct EffectPosterior {
    std::vector<MixtureComponent> components;

    double mean() const {
        double m = 0.0;
        for (const auto& c : components) m += c.weight * c.mean;
        return m;
    }

    double variance() const {
        const double mu = mean();
        double v = 0.0;
        for (const auto& c : components) v += c.weight * (c.sd * c.sd + (c.mean - mu) * (c.mean - mu));
        return v;
    }

    double sd() const { return std::sqrt(variance()); }

    double cdf(double t) const {
        double p = 0.0;
        for (const auto& c : components) p += c.weight * normal_cdf((t - c.mean) / c.sd);
        return p;
    }
};

inline double prob_exceeds(const EffectPosterior& post, double delta) {
    double p = 0.0;
    for (const auto& c : post.components) p += c.weight * normal_sf((delta - c.mean) / c.sd);
    return std::clamp(p, 0.0, 1.0);
}

inline double prob_below(const EffectPosterior& post, double delta) {
    double p = 0.0;
    for (const auto& c : post.components) p += c.weight * normal_cdf((delta - c.mean) / c.sd);
    return std::clamp(p, 0.0, 1.0);
}

namespace detail {

inline double mixture_quantile(const EffectPosterior& post, double p) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& c : post.components) {
        lo = std::min(lo, c.mean - 40.0 * c.sd);
        hi = std::max(hi, c.mean + 40.0 * c.sd);
    }
    while (hi - lo > 1e-10 * std::max(1.0, std::abs(lo) + std::abs(hi))) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        (post.cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Equal-tailed interval from the mixture CDF.
inline std::pair<double, double> credible_interval(const EffectPosterior& post, double level) {
    detail::require(level > 0.0 && level < 1.0, "credible_interval: level must lie in (0, 1)");
    detail::require(!post.components.empty(), "credible_interval: empty posterior");
    const double tail = 0.5 * (1.0 - level);
    return {detail::mixture_quantile(post, tail), detail::mixture_quantile(post, 1.0 - tail)};
}

struct DesignMatrix {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::vector<std::string> labels;
};

// Columns [1, z, x, z*x]; CRT-FM appends dummies for clusters 2..I; CRT-cluster
// works on cluster means.
inline DesignMatrix build_design(const TrialData& data, ModelKind kind) {
    const Eigen::Index k = data.x.cols();
    DesignMatrix d;
    d.labels.push_back("(Intercept)");
    d.labels.push_back("z");
    for (Eigen::Index c = 0; c < k; ++c) d.labels.push_back(k == 1 ? "x" : "x" + std::to_string(c + 1));
    for (Eigen::Index c = 0; c < k; ++c) d.labels.push_back(k == 1 ? "z:x" : "z:x" + std::to_string(c + 1));

    if (kind == ModelKind::Cluster) {
        const ClusterMeans agg = aggregate_clusters(data);
        d.x.resize(data.n_clusters, 2 + 2 * k);
        d.x.col(0).setOnes();
        d.x.col(1) = agg.z;
        d.x.middleCols(2, k) = agg.xbar;
        d.x.middleCols(2 + k, k) = agg.xbar.array().colwise() * agg.z.array();
        d.y = agg.ybar;
        return d;
    }

    const Eigen::Index n = data.size();
    const Eigen::VectorXd z = data.z_individual();
    const Eigen::Index n_dummies = kind == ModelKind::FM ? data.n_clusters - 1 : 0;
    d.x = Eigen::MatrixXd::Zero(n, 2 + 2 * k + n_dummies);
    d.x.col(0).setOnes();
    d.x.col(1) = z;
    d.x.middleCols(2, k) = data.x;
    d.x.middleCols(2 + k, k) = data.x.array().colwise() * z.array();
    for (Eigen::Index i = 0; i < n; ++i) {
        const int g = data.cluster_of[static_cast<std::size_t>(i)];
        if (n_dummies > 0 && g > 0) d.x(i, 2 + 2 * k + g - 1) = 1.0;
    }
    for (Eigen::Index g = 1; g <= n_dummies; ++g) d.labels.push_back("cluster" + std::to_string(g + 1));
    d.y = data.y;
    return d;
}

struct FitOptions {
    KernelFamily spatial_family = KernelFamily::Exponential;
    double spatial_nu = 0.5;
    // Pins the hyperparameters (log scale) and skips the search.
    std::optional<Eigen::VectorXd> fixed_hyper;
    double prune_ratio = 1e-6;
    double jitter = 1e-8;
};

namespace detail {

// C'C v: each entry replaced by the sum over its cluster.
inline Eigen::VectorXd cluster_expand_sum(const Eigen::VectorXd& v, const std::vector<int>& cluster_of, int n_clusters) {
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(n_clusters);
    for (std::size_t i = 0; i < cluster_of.size(); ++i) sums(cluster_of[i]) += v(static_cast<Eigen::Index>(i));
    Eigen::VectorXd out(v.size());
    for (std::size_t i = 0; i < cluster_of.size(); ++i) out(static_cast<Eigen::Index>(i)) = sums(cluster_of[i]);
    return out;
}

inline LogScalePrior add(LogScalePrior a, LogScalePrior b) { return {a.value + b.value, a.d1 + b.d1, a.d2 + b.d2}; }

}  // namespace detail

// Model-specific likelihood pieces for one trial, built once per fit.
class ModelProblem {
public:
    ModelProblem(ModelKind kind, const TrialData& data, const PriorSpec& priors, const FitOptions& options = {})
        : kind_(kind), priors_(priors), options_(options), design_(build_design(data, kind)),
          cluster_of_(data.cluster_of), n_clusters_(data.n_clusters) {
        priors.validate();
        const NormalPrior fe = kind == ModelKind::FM ? priors.fixed_effects_fm : priors.fixed_effects;
        const Eigen::Index p = design_.x.cols();
        prior_.mean = Eigen::VectorXd::Constant(p, fe.mean);
        prior_.covariance = Eigen::MatrixXd::Identity(p, p) * fe.variance;
        if (kind == ModelKind::SMM) {
            dist_ = distance_matrix(data.locations);
            double xmax = 0.0, ymax = 0.0;
            for (const auto& pt : data.locations) {
                xmax = std::max(xmax, pt.x);
                ymax = std::max(ymax, pt.y);
            }
            domain_diagonal_ = std::hypot(xmax, ymax);
        }
    }

    ModelKind kind() const { return kind_; }
    int dim() const { return n_hyper(kind_); }
    const DesignMatrix& design() const { return design_; }
    const GaussianDist& coefficient_prior() const { return prior_; }

    LogScalePrior log_prior(const Eigen::VectorXd& psi) const {
        switch (kind_) {
            case ModelKind::SMM:
                return detail::add(detail::add(pc_sd_log_scale(psi(0), priors_.rate_sigma_w),
                                               pc_sd_log_scale(psi(1), priors_.rate_sigma_b)),
                                   detail::add(pc_sd_log_scale(psi(2), priors_.rate_tau),
                                               pc_range_log_scale(psi(3), priors_.rate_phi)));
            case ModelKind::MM:
                return detail::add(pc_sd_log_scale(psi(0), priors_.rate_sigma_w),
                                   pc_sd_log_scale(psi(1), priors_.rate_sigma_b));
            case ModelKind::Cluster: return pc_sd_log_scale(psi(0), priors_.rate_sigma_c);
            default: return pc_sd_log_scale(psi(0), priors_.rate_sigma_w);
        }
    }

    KernelSpec spatial_kernel(double log_phi) const {
        return {options_.spatial_family, std::exp(log_phi), options_.spatial_nu};
    }

    // Dense outcome covariance at psi (N x N, or I x I for CRT-cluster).
    Eigen::MatrixXd covariance(const Eigen::VectorXd& psi) const {
        const Eigen::Index n = design_.y.size();
        const double sw2 = std::exp(2.0 * psi(0));
        Eigen::MatrixXd sigma = Eigen::MatrixXd::Identity(n, n) * sw2;
        if (kind_ == ModelKind::MM || kind_ == ModelKind::SMM) {
            const double sb2 = std::exp(2.0 * psi(1));
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j)
                    if (cluster_of_[static_cast<std::size_t>(i)] == cluster_of_[static_cast<std::size_t>(j)])
                        sigma(i, j) += sb2;
        }
        if (kind_ == ModelKind::SMM) {
            sigma += std::exp(2.0 * psi(2)) * corr_from_distances(dist_, spatial_kernel(psi(3)));
        }
        return sigma;
    }

    // log p(y | psi) and the conditional coefficient posterior.
    LinearGaussianFit conditional(const Eigen::VectorXd& psi) const {
        detail::require(psi.size() == dim(), "ModelProblem: wrong number of hyperparameters");
        const double sw2 = std::exp(2.0 * psi(0));
        switch (kind_) {
            case ModelKind::FMNaive:
            case ModelKind::FM:
            case ModelKind::Cluster:
                return gaussian_linear_fit(design_.x, design_.y, ScaledIdentitySolver(design_.y.size(), sw2), prior_);
            case ModelKind::MM:
                return gaussian_linear_fit(design_.x, design_.y,
                                           BlockCompoundSolver(cluster_of_, n_clusters_, sw2, std::exp(2.0 * psi(1))),
                                           prior_);
            case ModelKind::SMM:
                return gaussian_linear_fit(design_.x, design_.y,
                                           DenseCovSolver(chol_factor_jittered(covariance(psi), options_.jitter)),
                                           prior_);
        }
        throw InvalidArgument("ModelProblem: unknown model");
    }

    double log_posterior(const Eigen::VectorXd& psi) const {
        return conditional(psi).log_marginal + log_prior(psi).value;
    }

    // Value, gradient and Hessian of the CRT-SMM log posterior in
    // psi = (log sigma_w, log sigma_b, log tau, log phi), from the dense
    // marginal covariance M = Sigma + X V0 X'.
    SecondOrder smm_derivatives(const Eigen::VectorXd& psi) const {
        detail::require(kind_ == ModelKind::SMM, "smm_derivatives: CRT-SMM only");
        const Eigen::Index n = design_.y.size();
        const double sw2 = std::exp(2.0 * psi(0));
        const double sb2 = std::exp(2.0 * psi(1));
        const double t2 = std::exp(2.0 * psi(2));
        const KernelSpec kernel = spatial_kernel(psi(3));

        Eigen::MatrixXd h(n, n), hp(n, n), hpp(n, n);
        if (kernel.family == KernelFamily::Exponential) {
            const Eigen::ArrayXXd r = dist_.array() / kernel.phi;
            const Eigen::ArrayXXd e = (-r).exp();
            h = e.matrix();
            hp = (r * e).matrix();
            hpp = ((r * r - r) * e).matrix();
        } else {
            for (Eigen::Index j = 0; j < n; ++j) {
                for (Eigen::Index i = j; i < n; ++i) {
                    const CorrDerivs c = kernel_corr_log_phi_derivs(dist_(i, j), kernel);
                    h(i, j) = h(j, i) = c.value;
                    hp(i, j) = hp(j, i) = c.d1;
                    hpp(i, j) = hpp(j, i) = c.d2;
                }
            }
        }

        Eigen::MatrixXd m = t2 * h + design_.x * prior_.covariance * design_.x.transpose();
        m.diagonal().array() += sw2;
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < n; ++i)
                if (cluster_of_[static_cast<std::size_t>(i)] == cluster_of_[static_cast<std::size_t>(j)]) m(i, j) += sb2;

        const CholFactor chol = chol_factor(m);
        Eigen::MatrixXd linv = Eigen::MatrixXd::Identity(n, n);
        chol.lower.triangularView<Eigen::Lower>().solveInPlace(linv);
        Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
        p.selfadjointView<Eigen::Lower>().rankUpdate(linv.transpose());
        p = p.selfadjointView<Eigen::Lower>();

        const Eigen::VectorXd r = design_.y - design_.x * prior_.mean;
        const Eigen::VectorXd alpha = p * r;

        SecondOrder out;
        out.value = -0.5 * (static_cast<double>(n) * kLog2Pi + chol.log_det + r.dot(alpha));

        // dM/dpsi_k = coef_k * A_k with A = (I, C'C, H, dH/dlogphi)
        const double coef[4] = {2.0 * sw2, 2.0 * sb2, 2.0 * t2, t2};
        Eigen::MatrixXd v(n, 4);
        v.col(0) = coef[0] * alpha;
        v.col(1) = coef[1] * detail::cluster_expand_sum(alpha, cluster_of_, n_clusters_);
        v.col(2) = coef[2] * (h * alpha);
        v.col(3) = coef[3] * (hp * alpha);
        const Eigen::VectorXd a_v = v.transpose() * alpha;  // alpha' dM_k alpha
        const Eigen::MatrixXd v_p_v = v.transpose() * (p * v);

        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n_clusters_);  // P C'
        for (Eigen::Index j = 0; j < n; ++j) g.col(cluster_of_[static_cast<std::size_t>(j)]) += p.col(j);
        Eigen::MatrixXd cpc = Eigen::MatrixXd::Zero(n_clusters_, n_clusters_);  // C P C'
        for (Eigen::Index i = 0; i < n; ++i) cpc.row(cluster_of_[static_cast<std::size_t>(i)]) += g.row(i);

        const Eigen::MatrixXd q_t = p * h;
        const Eigen::MatrixXd q_p = p * hp;
        const Eigen::MatrixXd hg = h * g;
        const Eigen::MatrixXd hpg = hp * g;

        // tr(P A_k)
        const double tr_a[4] = {p.trace(), cpc.trace(), (p.array() * h.array()).sum(), (p.array() * hp.array()).sum()};
        // tr(P A_k P A_l)
        Eigen::Matrix4d tt;
        tt(0, 0) = p.squaredNorm();
        tt(0, 1) = g.squaredNorm();
        tt(0, 2) = (p.array() * q_t.array()).sum();
        tt(0, 3) = (p.array() * q_p.array()).sum();
        tt(1, 1) = cpc.squaredNorm();
        tt(1, 2) = (g.array() * hg.array()).sum();
        tt(1, 3) = (g.array() * hpg.array()).sum();
        tt(2, 2) = (q_t.array() * q_t.transpose().array()).sum();
        tt(2, 3) = (q_t.array() * q_p.transpose().array()).sum();
        tt(3, 3) = (q_p.array() * q_p.transpose().array()).sum();
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < i; ++j) tt(i, j) = tt(j, i);

        out.gradient.resize(4);
        for (int k = 0; k < 4; ++k) out.gradient(k) = 0.5 * a_v(k) - 0.5 * coef[k] * tr_a[k];

        // Second derivatives of M: diagonal blocks scale by 2 for the
        // variance terms; the (tau, phi) and (phi, phi) terms involve H'.
        Eigen::Matrix4d quad_second = Eigen::Matrix4d::Zero();  // alpha' d2M alpha
        Eigen::Matrix4d tr_second = Eigen::Matrix4d::Zero();    // tr(P d2M)
        for (int k = 0; k < 3; ++k) {
            quad_second(k, k) = 2.0 * a_v(k);
            tr_second(k, k) = 2.0 * coef[k] * tr_a[k];
        }
        quad_second(2, 3) = quad_second(3, 2) = 2.0 * a_v(3);
        tr_second(2, 3) = tr_second(3, 2) = 2.0 * coef[3] * tr_a[3];
        quad_second(3, 3) = t2 * alpha.dot(hpp * alpha);
        tr_second(3, 3) = t2 * (p.array() * hpp.array()).sum();

        out.hessian.resize(4, 4);
        for (int k = 0; k < 4; ++k)
            for (int l = 0; l < 4; ++l)
                out.hessian(k, l) = 0.5 * quad_second(k, l) - v_p_v(k, l) - 0.5 * tr_second(k, l) +
                                    0.5 * coef[k] * coef[l] * tt(k, l);

        const LogScalePrior lp0 = pc_sd_log_scale(psi(0), priors_.rate_sigma_w);
        const LogScalePrior lp1 = pc_sd_log_scale(psi(1), priors_.rate_sigma_b);
        const LogScalePrior lp2 = pc_sd_log_scale(psi(2), priors_.rate_tau);
        const LogScalePrior lp3 = pc_range_log_scale(psi(3), priors_.rate_phi);
        const LogScalePrior lps[4] = {lp0, lp1, lp2, lp3};
        for (int k = 0; k < 4; ++k) {
            out.value += lps[k].value;
            out.gradient(k) += lps[k].d1;
            out.hessian(k, k) += lps[k].d2;
        }
        return out;
    }

    // Log of ANOVA moment estimates from OLS residuals. The between-cluster
    // excess is split equally between sigma_b and tau for CRT-SMM; phi starts
    // at half the domain diagonal.
    Eigen::VectorXd start_point() const {
        const Eigen::MatrixXd& x = design_.x;
        const Eigen::Index p = x.cols();
        Eigen::MatrixXd xtx = x.transpose() * x;
        xtx.diagonal().array() += 1e-8 * (1.0 + xtx.diagonal().maxCoeff());
        const Eigen::VectorXd beta = xtx.ldlt().solve(x.transpose() * design_.y);
        const Eigen::VectorXd e = design_.y - x * beta;
        const double n = static_cast<double>(e.size());
        const double total = std::max(e.squaredNorm() / std::max(1.0, n - static_cast<double>(p)), 1e-6);

        Eigen::VectorXd psi(dim());
        if (kind_ == ModelKind::Cluster || kind_ == ModelKind::FMNaive) {
            psi(0) = 0.5 * std::log(total);
            return psi;
        }
        Eigen::VectorXd sums = Eigen::VectorXd::Zero(n_clusters_);
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(n_clusters_);
        for (std::size_t i = 0; i < cluster_of_.size(); ++i) {
            sums(cluster_of_[i]) += e(static_cast<Eigen::Index>(i));
            counts(cluster_of_[i]) += 1.0;
        }
        const Eigen::VectorXd means = sums.cwiseQuotient(counts.cwiseMax(1.0));
        double within = 0.0;
        for (std::size_t i = 0; i < cluster_of_.size(); ++i) {
            const double d = e(static_cast<Eigen::Index>(i)) - means(cluster_of_[i]);
            within += d * d;
        }
        within = std::max(within / std::max(1.0, n - n_clusters_), 1e-6);
        psi(0) = 0.5 * std::log(within);
        if (kind_ == ModelKind::FM) return psi;

        const double mbar = n / n_clusters_;
        const double mean_of_means = means.mean();
        const double var_means = (means.array() - mean_of_means).square().sum() / std::max(1, n_clusters_ - 1);
        const double between = std::max(var_means - within / mbar, 0.05 * within);
        if (kind_ == ModelKind::MM) {
            psi(1) = 0.5 * std::log(between);
            return psi;
        }
        psi(1) = 0.5 * std::log(0.5 * between);
        psi(2) = 0.5 * std::log(0.5 * between);
        psi(3) = std::log(0.5 * domain_diagonal_);
        return psi;
    }

private:
    ModelKind kind_;
    PriorSpec priors_;
    FitOptions options_;
    DesignMatrix design_;
    std::vector<int> cluster_of_;
    int n_clusters_;
    GaussianDist prior_;
    Eigen::MatrixXd dist_;
    double domain_diagonal_ = 1.0;
};

inline Eigen::MatrixXd build_covariance(ModelKind kind, const HyperPoint& hyper, const TrialData& data,
                                        const FitOptions& options = {}) {
    detail::require(hyper.as_vector().size() == n_hyper(kind), "build_covariance: hyperparameters do not match the model");
    return ModelProblem(kind, data, PriorSpec{}, options).covariance(hyper.as_vector());
}

namespace detail {

struct DesignPoint {
    Eigen::VectorXd z;
    double log_design_weight = 0.0;
    bool importance = false;  // weight by d * exp(logpost) / q(z) rather than exp(logpost)
};

// 5 points per dimension at 0, +-1, +-2 standardized steps.
inline std::vector<DesignPoint> tensor_design(int dim) {
    std::vector<DesignPoint> pts;
    const int total = static_cast<int>(std::pow(5, dim));
    for (int idx = 0; idx < total; ++idx) {
        DesignPoint p;
        p.z.resize(dim);
        int rest = idx;
        for (int d = 0; d < dim; ++d) {
            p.z(d) = static_cast<double>(rest % 5) - 2.0;
            rest /= 5;
        }
        pts.push_back(p);
    }
    return pts;
}

// Degree-5 symmetric cubature for the standard normal: center, +-sqrt(3) e_i,
// and +-sqrt(3) e_i +- sqrt(3) e_j. Zero-weight points are omitted.
inline std::vector<DesignPoint> cubature_design(int dim) {
    const double n = dim;
    const double r = std::sqrt(3.0);
    const double w_center = 1.0 + (n * n - 7.0 * n) / 18.0;
    const double w_axis = (4.0 - n) / 18.0;
    const double w_pair = 1.0 / 36.0;
    std::vector<DesignPoint> pts;
    auto add = [&](Eigen::VectorXd z, double w) {
        if (w > 0.0) pts.push_back({std::move(z), std::log(w), true});
    };
    add(Eigen::VectorXd::Zero(dim), w_center);
    for (int i = 0; i < dim; ++i) {
        for (double s : {1.0, -1.0}) {
            Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
            z(i) = s * r;
            add(z, w_axis);
        }
    }
    for (int i = 0; i < dim; ++i)
        for (int j = i + 1; j < dim; ++j)
            for (double si : {1.0, -1.0})
                for (double sj : {1.0, -1.0}) {
                    Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
                    z(i) = si * r;
                    z(j) = sj * r;
                    add(z, w_pair);
                }
    return pts;
}

inline HyperPoint evaluate_point(const ModelProblem& prob, const Eigen::VectorXd& psi) {
    const LinearGaussianFit fit = prob.conditional(psi);
    HyperPoint h = HyperPoint::from_vector(prob.kind(), psi);
    h.log_marginal = fit.log_marginal;
    h.log_posterior = fit.log_marginal + prob.log_prior(psi).value;
    h.conditional = fit.posterior;
    return h;
}

}  // namespace detail

// Mode search, curvature, then a weighted design of hyperparameter points,
// each carrying its exact conditional Gaussian over the fixed effects.
inline HyperGrid hyper_posterior(const ModelProblem& prob, const FitOptions& options = {}) {
    HyperGrid grid;
    grid.kind = prob.kind();
    grid.coefficient_labels = prob.design().labels;
    const int dim = prob.dim();

    if (options.fixed_hyper) {
        HyperPoint h = detail::evaluate_point(prob, *options.fixed_hyper);
        h.log_weight = 0.0;
        grid.mode = *options.fixed_hyper;
        grid.log_posterior_at_mode = h.log_posterior;
        grid.log_marginal_at_mode = h.log_marginal;
        grid.points.push_back(std::move(h));
        return grid;
    }

    auto objective = [&prob](const Eigen::VectorXd& psi) { return prob.log_posterior(psi); };
    Eigen::MatrixXd hessian;
    if (prob.kind() == ModelKind::SMM) {
        auto full = [&prob](const Eigen::VectorXd& psi) { return prob.smm_derivatives(psi); };
        const OptimResult res = newton_max(full, objective, prob.start_point());
        grid.mode = res.argmax;
        grid.optimizer_iterations = res.iterations;
        grid.optimizer_evaluations = res.evaluations;
        hessian = res.hessian;
    } else {
        const OptimResult res = nelder_mead_max(objective, prob.start_point());
        if (!res.converged || !std::isfinite(res.value))
            throw InferenceError("hyper_posterior: Nelder-Mead did not converge",
                                 std::vector<double>(res.argmax.data(), res.argmax.data() + res.argmax.size()));
        grid.mode = res.argmax;
        grid.optimizer_iterations = res.iterations;
        grid.optimizer_evaluations = res.evaluations;
        hessian = fd_hessian(objective, grid.mode);
    }

    // psi = mode + V diag(1/sqrt(lambda)) z with -H = V diag(lambda) V'
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(-0.5 * (hessian + hessian.transpose()));
    const Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.25);
    const Eigen::MatrixXd scale = eig.eigenvectors() * lambda.cwiseInverse().cwiseSqrt().asDiagonal();

    const HyperPoint center = detail::evaluate_point(prob, grid.mode);
    grid.log_posterior_at_mode = center.log_posterior;
    grid.log_marginal_at_mode = center.log_marginal;

    const auto design = dim <= 2 ? detail::tensor_design(dim) : detail::cubature_design(dim);
    std::vector<double> log_w;
    for (const auto& dp : design) {
        HyperPoint h;
        if (dp.z.isZero()) {
            h = center;
        } else {
            try {
                h = detail::evaluate_point(prob, grid.mode + scale * dp.z);
            } catch (const NotPositiveDefinite&) {
                continue;
            }
        }
        if (!std::isfinite(h.log_posterior)) continue;
        double lw = h.log_posterior - center.log_posterior;
        if (dp.importance) lw += dp.log_design_weight + 0.5 * dp.z.squaredNorm();
        log_w.push_back(lw);
        grid.points.push_back(std::move(h));
    }
    if (grid.points.empty())
        throw InferenceError("hyper_posterior: no design point could be evaluated",
                             std::vector<double>(grid.mode.data(), grid.mode.data() + grid.mode.size()));

    const double max_lw = *std::max_element(log_w.begin(), log_w.end());
    std::vector<HyperPoint> kept;
    std::vector<double> kept_lw;
    for (std::size_t i = 0; i < grid.points.size(); ++i) {
        if (log_w[i] - max_lw < std::log(options.prune_ratio)) continue;
        kept.push_back(std::move(grid.points[i]));
        kept_lw.push_back(log_w[i] - max_lw);
    }
    double total = 0.0;
    for (double lw : kept_lw) total += std::exp(lw);
    const double log_total = std::log(total);
    for (std::size_t i = 0; i < kept.size(); ++i) kept[i].log_weight = kept_lw[i] - log_total;
    grid.points = std::move(kept);
    return grid;
}

inline HyperGrid hyper_posterior(ModelKind kind, const TrialData& data, const PriorSpec& priors,
                                 const FitOptions& options = {}) {
    return hyper_posterior(ModelProblem(kind, data, priors, options), options);
}

// Coefficients of theta = beta + xbar1'(gamma + delta) - xbar0'gamma over the
// model's coefficient vector.
inline Eigen::VectorXd effect_contrast(const TrialData& data, ModelKind kind) {
    const Eigen::Index k = data.x.cols();
    Eigen::RowVectorXd sum1 = Eigen::RowVectorXd::Zero(k), sum0 = Eigen::RowVectorXd::Zero(k);
    double n1 = 0.0, n0 = 0.0;
    if (kind == ModelKind::Cluster) {
        const ClusterMeans agg = aggregate_clusters(data);
        for (Eigen::Index g = 0; g < agg.z.size(); ++g) {
            if (agg.z(g) > 0.5) {
                sum1 += agg.xbar.row(g);
                n1 += 1.0;
            } else {
                sum0 += agg.xbar.row(g);
                n0 += 1.0;
            }
        }
    } else {
        for (Eigen::Index i = 0; i < data.size(); ++i) {
            if (data.z_of(i) == 1) {
                sum1 += data.x.row(i);
                n1 += 1.0;
            } else {
                sum0 += data.x.row(i);
                n0 += 1.0;
            }
        }
    }
    detail::require(n1 > 0.0 && n0 > 0.0, "marginal_effect: both arms need at least one cluster");
    const Eigen::RowVectorXd xbar1 = sum1 / n1, xbar0 = sum0 / n0;
    const Eigen::Index p = 2 + 2 * k + (kind == ModelKind::FM ? data.n_clusters - 1 : 0);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
    c(1) = 1.0;
    c.segment(2, k) = (xbar1 - xbar0).transpose();
    c.segment(2 + k, k) = xbar1.transpose();
    return c;
}

inline EffectPosterior marginal_effect(const HyperGrid& grid, const TrialData& data, ModelKind kind) {
    const Eigen::VectorXd c = effect_contrast(data, kind);
    EffectPosterior post;
    for (const auto& h : grid.points) {
        detail::require(h.conditional.dimension() == c.size(), "marginal_effect: grid does not match the model");
        const double var = c.dot(h.conditional.covariance * c);
        post.components.push_back({std::exp(h.log_weight), c.dot(h.conditional.mean), std::sqrt(std::max(var, 1e-300))});
    }
    return post;
}

struct FitResult {
    HyperGrid grid;
    EffectPosterior effect;
};

inline FitResult fit(ModelKind kind, const TrialData& data, const PriorSpec& priors, const FitOptions& options = {}) {
    FitResult r;
    r.grid = hyper_posterior(kind, data, priors, options);
    r.effect = marginal_effect(r.grid, data, kind);
    return r;
}

}  // namespace crtsim
