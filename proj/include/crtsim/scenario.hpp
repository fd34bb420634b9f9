#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "crtsim/geometry.hpp"

namespace crtsim {

struct VarianceComponents {
    double sigma_w2 = 1.0;  // within-cluster
    double sigma_b2 = 0.0;  // between-cluster
    double tau2 = 0.0;      // spatial marginal variance
};

enum class Randomization { SimpleOneToOne, Checkerboard };

struct GridSpec {
    int rows = 4;
    int cols = 4;
    double cell_size = 1.0;
};

// One data-generating scenario. theta is the true treatment effect beta.
struct ScenarioConfig {
    std::string label;
    double icc = 0.05;
    double f = 0.5;  // sigma_b2 / (sigma_b2 + tau2)
    double sigma_w2 = 2.25;
    KernelSpec kernel{KernelFamily::Exponential, 1.5, 0.5};
    GridSpec grid;
    int m = 40;
    double theta = 0.0;
    double gamma = 0.1;
    double delta = 0.1;
    Randomization randomization = Randomization::SimpleOneToOne;
    std::uint64_t seed = 0;
    // Overrides the (icc, f, sigma_w2) partition when set.
    std::optional<VarianceComponents> components;

    int n_clusters() const { return grid.rows * grid.cols; }
    double phi() const { return kernel.phi; }
};

}  // namespace crtsim
