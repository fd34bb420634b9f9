#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "crtsim/error.hpp"

namespace crtsim {

struct OptimResult {
    Eigen::VectorXd argmax;
    double value = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
    Eigen::MatrixXd hessian;  // at argmax, when the method computes one
};

struct NelderMeadOptions {
    double initial_step = 0.5;
    double ftol = 1e-12;  // spread of simplex values
    double xtol = 1e-9;   // simplex diameter
    int max_iterations = 5000;
};

// Maximizes f. Evaluations that throw or return NaN count as -inf.
inline OptimResult nelder_mead_max(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x0,
                                   const NelderMeadOptions& opt = {}) {
    const Eigen::Index n = x0.size();
    OptimResult res;
    auto eval = [&](const Eigen::VectorXd& x) {
        ++res.evaluations;
        double v;
        try {
            v = f(x);
        } catch (const std::exception&) {
            v = -std::numeric_limits<double>::infinity();
        }
        return std::isnan(v) ? -std::numeric_limits<double>::infinity() : v;
    };

    std::vector<Eigen::VectorXd> simplex(static_cast<std::size_t>(n + 1), x0);
    std::vector<double> values(static_cast<std::size_t>(n + 1));
    for (Eigen::Index i = 0; i < n; ++i) simplex[static_cast<std::size_t>(i + 1)](i) += opt.initial_step;
    for (std::size_t i = 0; i < simplex.size(); ++i) values[i] = eval(simplex[i]);

    std::vector<std::size_t> order(simplex.size());
    for (res.iterations = 0; res.iterations < opt.max_iterations; ++res.iterations) {
        std::iota(order.begin(), order.end(), 0);
        // Descending by value; ties keep the earlier vertex first.
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
        const std::size_t best = order.front();
        const std::size_t worst = order.back();
        const std::size_t second_worst = order[order.size() - 2];

        double diameter = 0.0;
        for (const auto& v : simplex) diameter = std::max(diameter, (v - simplex[best]).cwiseAbs().maxCoeff());
        const double spread = values[best] - values[worst];
        if (std::isfinite(values[best]) && spread <= opt.ftol * (1.0 + std::abs(values[best])) && diameter <= opt.xtol) {
            res.converged = true;
            break;
        }

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (std::size_t i = 0; i < simplex.size(); ++i)
            if (i != worst) centroid += simplex[i];
        centroid /= static_cast<double>(n);

        const Eigen::VectorXd reflected = centroid + (centroid - simplex[worst]);
        const double f_reflected = eval(reflected);
        if (f_reflected > values[best]) {
            const Eigen::VectorXd expanded = centroid + 2.0 * (centroid - simplex[worst]);
            const double f_expanded = eval(expanded);
            if (f_expanded > f_reflected) {
                simplex[worst] = expanded;
                values[worst] = f_expanded;
            } else {
                simplex[worst] = reflected;
                values[worst] = f_reflected;
            }
            continue;
        }
        if (f_reflected > values[second_worst]) {
            simplex[worst] = reflected;
            values[worst] = f_reflected;
            continue;
        }
        const bool outside = f_reflected > values[worst];
        const Eigen::VectorXd contracted =
            outside ? Eigen::VectorXd(centroid + 0.5 * (reflected - centroid))
                    : Eigen::VectorXd(centroid + 0.5 * (simplex[worst] - centroid));
        const double f_contracted = eval(contracted);
        if (f_contracted > std::max(values[worst], outside ? f_reflected : values[worst])) {
            simplex[worst] = contracted;
            values[worst] = f_contracted;
            continue;
        }
        for (std::size_t i = 0; i < simplex.size(); ++i) {
            if (i == best) continue;
            simplex[i] = simplex[best] + 0.5 * (simplex[i] - simplex[best]);
            values[i] = eval(simplex[i]);
        }
    }
    const auto it = std::max_element(values.begin(), values.end());
    res.argmax = simplex[static_cast<std::size_t>(it - values.begin())];
    res.value = *it;
    return res;
}

struct SecondOrder {
    double value = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd gradient;
    Eigen::MatrixXd hessian;
};

struct NewtonOptions {
    double decrement_tol = 1e-12;  // g' (-H)^{-1} g
    double max_step = 2.0;         // per coordinate, before line search
    double min_curvature = 1e-3;
    int max_iterations = 100;
    int max_halvings = 40;
};

// Newton direction for maximization with eigenvalues of -H floored so the
// step always ascends.
inline Eigen::VectorXd ascent_direction(const Eigen::VectorXd& g, const Eigen::MatrixXd& h, double min_curvature) {
    const Eigen::MatrixXd neg = -0.5 * (h + h.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(neg);
    Eigen::VectorXd lambda = eig.eigenvalues().cwiseAbs().cwiseMax(min_curvature);
    return eig.eigenvectors() * ((eig.eigenvectors().transpose() * g).cwiseQuotient(lambda));
}

// Damped Newton ascent. `full` returns value, gradient and Hessian; `value`
// is the cheap objective used by the backtracking line search. Both may
// throw for infeasible points.
inline OptimResult newton_max(const std::function<SecondOrder(const Eigen::VectorXd&)>& full,
                              const std::function<double(const Eigen::VectorXd&)>& value, const Eigen::VectorXd& x0,
                              const NewtonOptions& opt = {}) {
    OptimResult res;
    Eigen::VectorXd x = x0;
    SecondOrder cur = full(x);
    ++res.evaluations;
    if (!std::isfinite(cur.value)) throw InferenceError("newton_max: objective is not finite at the start point",
                                                        std::vector<double>(x0.data(), x0.data() + x0.size()));
    for (res.iterations = 0; res.iterations < opt.max_iterations; ++res.iterations) {
        Eigen::VectorXd p = ascent_direction(cur.gradient, cur.hessian, opt.min_curvature);
        const double decrement = cur.gradient.dot(p);
        if (decrement < opt.decrement_tol) {
            res.converged = true;
            break;
        }
        const double biggest = p.cwiseAbs().maxCoeff();
        if (biggest > opt.max_step) p *= opt.max_step / biggest;
        const double slope = cur.gradient.dot(p);

        double t = 1.0;
        bool accepted = false;
        for (int k = 0; k < opt.max_halvings; ++k, t *= 0.5) {
            double v;
            try {
                v = value(x + t * p);
                ++res.evaluations;
            } catch (const std::exception&) {
                continue;
            }
            if (std::isfinite(v) && v >= cur.value + 1e-4 * t * slope) {
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            // No ascent possible at machine precision: the start of the line
            // search is the optimum to the attainable accuracy.
            res.converged = cur.gradient.cwiseAbs().maxCoeff() < 1e-4;
            break;
        }
        x += t * p;
        cur = full(x);
        ++res.evaluations;
    }
    res.argmax = x;
    res.value = cur.value;
    res.hessian = cur.hessian;
    if (!res.converged)
        throw InferenceError("newton_max: no convergence after " + std::to_string(res.iterations) + " iterations",
                             std::vector<double>(x.data(), x.data() + x.size()));
    return res;
}

// Central finite-difference Hessian.
inline Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                  double h = 1e-3) {
    const Eigen::Index n = x.size();
    Eigen::MatrixXd out(n, n);
    const double f0 = f(x);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        out(i, i) = (f(xp) - 2.0 * f0 + f(xm)) / (h * h);
        for (Eigen::Index j = 0; j < i; ++j) {
            Eigen::VectorXd pp = x, pm = x, mp = x, mm = x;
            pp(i) += h; pp(j) += h;
            pm(i) += h; pm(j) -= h;
            mp(i) -= h; mp(j) += h;
            mm(i) -= h; mm(j) -= h;
            out(i, j) = out(j, i) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h * h);
        }
    }
    return out;
}

}  // namespace crtsim
