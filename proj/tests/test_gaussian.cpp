#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "crtsim/gaussian.hpp"
#include "crtsim/random.hpp"

using namespace crtsim;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = standard_normal(rng);
    return m;
}

Eigen::MatrixXd random_spd(Eigen::Index n, Rng& rng) {
    const Eigen::MatrixXd b = random_matrix(n, n, rng);
    return b * b.transpose() + Eigen::MatrixXd::Identity(n, n);
}

Eigen::VectorXd random_vector(Eigen::Index n, Rng& rng) { return random_matrix(n, 1, rng); }

// Explicit inverse and determinant.
double naive_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const Eigen::MatrixXd& s) {
    const Eigen::VectorXd r = y - mu;
    return -0.5 * (y.size() * std::log(2.0 * std::numbers::pi) + std::log(s.determinant()) + r.dot(s.inverse() * r));
}

}  // namespace

TEST(Cholesky, IdentityFactor) {
    const CholFactor f = chol_factor(Eigen::MatrixXd::Identity(3, 3));
    EXPECT_TRUE(f.lower.isApprox(Eigen::MatrixXd::Identity(3, 3)));
    EXPECT_DOUBLE_EQ(f.log_det, 0.0);
}

TEST(Cholesky, HandFactorization) {
    Eigen::MatrixXd a(2, 2);
    a << 4, 2, 2, 3;
    const CholFactor f = chol_factor(a);
    EXPECT_NEAR(f.lower(0, 0), 2.0, 1e-15);
    EXPECT_NEAR(f.lower(1, 0), 1.0, 1e-15);
    EXPECT_NEAR(f.lower(1, 1), std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(f.lower(0, 1), 0.0, 0.0);
    EXPECT_NEAR(f.log_det, std::log(8.0), 1e-14);
}

TEST(Cholesky, RandomReconstruction) {
    Rng rng(1);
    const Eigen::MatrixXd a = random_spd(50, rng);
    const CholFactor f = chol_factor(a);
    EXPECT_LT((f.reconstruct() - a).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Cholesky, ReportsFailingPivot) {
    Eigen::MatrixXd a(3, 3);
    a << 1, 0, 0, 0, 1, 1, 0, 1, 1;  // rank 2: third pivot is zero
    try {
        chol_factor(a);
        FAIL() << "expected NotPositiveDefinite";
    } catch (const NotPositiveDefinite& e) {
        EXPECT_EQ(e.pivot(), 2u);
    }
    Eigen::MatrixXd neg = -Eigen::MatrixXd::Identity(2, 2);
    EXPECT_THROW(chol_factor(neg), NotPositiveDefinite);
}

TEST(Cholesky, JitterRescuesSemidefinite) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Ones(4, 4);
    EXPECT_THROW(chol_factor(a), NotPositiveDefinite);
    EXPECT_NO_THROW(chol_factor_jittered(a, 1e-6));
}

TEST(MvnLogpdf, TrivialValues) {
    const Eigen::VectorXd zero1 = Eigen::VectorXd::Zero(1);
    EXPECT_NEAR(mvn_logpdf(zero1, zero1, chol_factor(Eigen::MatrixXd::Identity(1, 1))), -0.91893853320467274, 1e-14);
    Eigen::VectorXd y(2);
    y << 0.3, -1.2;
    EXPECT_NEAR(mvn_logpdf(y, y, chol_factor(Eigen::MatrixXd::Identity(2, 2))), -std::log(2.0 * std::numbers::pi),
                1e-14);
}

TEST(MvnLogpdf, MatchesExplicitInverse) {
    Rng rng(2);
    for (int rep = 0; rep < 10; ++rep) {
        const Eigen::MatrixXd s = random_spd(8, rng);
        const Eigen::VectorXd y = random_vector(8, rng), mu = random_vector(8, rng);
        EXPECT_NEAR(mvn_logpdf(y, mu, chol_factor(s)), naive_logpdf(y, mu, s), 1e-10);
    }
}

TEST(MvnLogpdf, DimensionMismatchThrows) {
    EXPECT_THROW(mvn_logpdf(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(3), chol_factor(Eigen::MatrixXd::Identity(2, 2))),
                 InvalidArgument);
}

TEST(MvnSample, DegenerateCovarianceReturnsMean) {
    Rng rng(3);
    Eigen::VectorXd mu(3);
    mu << 1, 2, 3;
    const auto s = mvn_sample(mu, chol_factor(1e-12 * Eigen::MatrixXd::Identity(3, 3)), rng);
    EXPECT_LT((s - mu).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(MvnSample, SampleCovariance) {
    Eigen::MatrixXd s(2, 2);
    s << 1, 0.5, 0.5, 1;
    const CholFactor f = chol_factor(s);
    Rng rng(4);
    Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const Eigen::Vector2d x = mvn_sample(Eigen::VectorXd::Zero(2), f, rng);
        acc += x * x.transpose();
    }
    acc /= n;
    EXPECT_LT((acc - s).cwiseAbs().maxCoeff(), 0.05);
}

TEST(MvnSample, Deterministic) {
    const CholFactor f = chol_factor(Eigen::MatrixXd::Identity(5, 5));
    Rng a(42), b(42);
    EXPECT_EQ(mvn_sample(Eigen::VectorXd::Zero(5), f, a), mvn_sample(Eigen::VectorXd::Zero(5), f, b));
}

TEST(GlsPosterior, InterpolationLimit) {
    Rng rng(5);
    const Eigen::VectorXd y = random_vector(4, rng);
    GaussianDist prior{Eigen::VectorXd::Zero(4), 1e12 * Eigen::MatrixXd::Identity(4, 4)};
    const GaussianDist post =
        gls_posterior(Eigen::MatrixXd::Identity(4, 4), y, chol_factor(Eigen::MatrixXd::Identity(4, 4)), prior);
    EXPECT_LT((post.mean - y).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GlsPosterior, DogmaticPriorLimit) {
    Rng rng(6);
    const Eigen::MatrixXd x = random_matrix(10, 3, rng);
    const Eigen::VectorXd y = random_vector(10, rng);
    GaussianDist prior{random_vector(3, rng), 1e-12 * Eigen::MatrixXd::Identity(3, 3)};
    const GaussianDist post = gls_posterior(x, y, chol_factor(Eigen::MatrixXd::Identity(10, 10)), prior);
    EXPECT_LT((post.mean - prior.mean).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GlsPosterior, MatchesDenseInverseFormula) {
    Rng rng(7);
    for (int rep = 0; rep < 5; ++rep) {
        const Eigen::MatrixXd x = random_matrix(20, 3, rng);
        const Eigen::VectorXd y = random_vector(20, rng);
        const Eigen::MatrixXd s = random_spd(20, rng);
        GaussianDist prior{random_vector(3, rng), random_spd(3, rng)};
        const GaussianDist post = gls_posterior(x, y, chol_factor(s), prior);
        const Eigen::MatrixXd si = s.inverse(), v0i = prior.covariance.inverse();
        const Eigen::MatrixXd v = (x.transpose() * si * x + v0i).inverse();
        const Eigen::VectorXd m = v * (x.transpose() * si * y + v0i * prior.mean);
        EXPECT_LT((post.mean - m).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT((post.covariance - v).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(MarginalLoglik, NoFixedEffectUncertainty) {
    Rng rng(8);
    const Eigen::MatrixXd x = random_matrix(6, 2, rng);
    const Eigen::VectorXd y = random_vector(6, rng);
    const Eigen::MatrixXd s = random_spd(6, rng);
    GaussianDist prior{Eigen::VectorXd::Zero(2), 1e-12 * Eigen::MatrixXd::Identity(2, 2)};
    EXPECT_NEAR(marginal_loglik(x, y, s, prior), mvn_logpdf(y, Eigen::VectorXd::Zero(6), chol_factor(s)), 1e-8);
}

TEST(MarginalLoglik, DecompositionIdentity) {
    Rng rng(9);
    for (int rep = 0; rep < 5; ++rep) {
        const Eigen::MatrixXd x = random_matrix(15, 3, rng);
        const Eigen::VectorXd y = random_vector(15, rng);
        const Eigen::MatrixXd s = random_spd(15, rng);
        GaussianDist prior{random_vector(3, rng), random_spd(3, rng)};
        const GaussianDist post = gls_posterior(x, y, chol_factor(s), prior);
        const Eigen::VectorXd b = post.mean;
        const double two_step = mvn_logpdf(y, x * b, chol_factor(s)) + mvn_logpdf(b, prior.mean, chol_factor(prior.covariance)) -
                                mvn_logpdf(b, post.mean, chol_factor(post.covariance));
        EXPECT_NEAR(marginal_loglik(x, y, s, prior), two_step, 1e-8);
    }
}

TEST(StructuredSolvers, AgreeWithDense) {
    Rng rng(10);
    std::vector<int> cluster_of;
    for (int g : {0, 1, 2, 0, 1, 2, 2, 0, 1, 1}) cluster_of.push_back(g);
    const Eigen::Index n = 10;
    const double sw2 = 0.7, sb2 = 0.4;
    Eigen::MatrixXd s = sw2 * Eigen::MatrixXd::Identity(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (cluster_of[i] == cluster_of[j]) s(i, j) += sb2;
    const BlockCompoundSolver block(cluster_of, 3, sw2, sb2);
    const DenseCovSolver dense(s);
    const Eigen::MatrixXd b = random_matrix(n, 3, rng);
    EXPECT_NEAR(block.log_det(), dense.log_det(), 1e-12);
    EXPECT_LT((block.solve(b) - dense.solve(b)).cwiseAbs().maxCoeff(), 1e-12);

    const ScaledIdentitySolver iso(n, sw2);
    const DenseCovSolver iso_dense(Eigen::MatrixXd(sw2 * Eigen::MatrixXd::Identity(n, n)));
    EXPECT_NEAR(iso.log_det(), iso_dense.log_det(), 1e-12);
    EXPECT_LT((iso.solve(b) - iso_dense.solve(b)).cwiseAbs().maxCoeff(), 1e-12);

    const Eigen::MatrixXd x = random_matrix(n, 2, rng);
    const Eigen::VectorXd y = random_vector(n, rng);
    GaussianDist prior{Eigen::VectorXd::Zero(2), 10.0 * Eigen::MatrixXd::Identity(2, 2)};
    EXPECT_NEAR(gaussian_linear_fit(x, y, block, prior).log_marginal, marginal_loglik(x, y, s, prior), 1e-10);
}
