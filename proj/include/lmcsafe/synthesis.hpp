#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lmcsafe/kernels.hpp"

namespace lmcsafe {

/// One latent feature of a synthetic objective: a finite kernel expansion
/// sum_n c_n Sigma_i(:, t_n) k_i(., z_n).
struct FeatureExpansion {
    Eigen::MatrixXd centers;              // n x d
    std::vector<std::size_t> center_tasks;  // n
    Eigen::VectorXd coefficients;         // n
    double norm = 0.0;                    // stored RKHS norm
};

struct Optimum {
    Eigen::VectorXd x;
    double value = 0.0;
    double projected_gradient_norm = 0.0;
};

/// Vector-valued RKHS element of an LMC kernel, used as ground truth.
class SyntheticFunction {
public:
    SyntheticFunction(LMCKernel kernel, std::vector<FeatureExpansion> features, Box domain);

    const LMCKernel& kernel() const { return kernel_; }
    const Box& domain() const { return domain_; }
    std::size_t features() const { return features_.size(); }
    const FeatureExpansion& feature(std::size_t i) const { return features_.at(i); }

    double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) const;
    /// Contribution of a single feature.
    double evaluate_feature(std::size_t i, const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) const;
    Eigen::VectorXd gradient(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) const;
    Eigen::MatrixXd hessian(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) const;

    /// sqrt(c_i^T G_i(Sigma_i) c_i) recomputed from the expansion.
    double computed_norm(std::size_t i) const;

    const std::optional<Optimum>& optimum() const { return optimum_; }
    void set_optimum(Optimum opt) { optimum_ = std::move(opt); }

    /// Returns a copy whose feature i coefficients are multiplied by a.
    SyntheticFunction scaled_feature(std::size_t i, double a) const;

private:
    LMCKernel kernel_;
    std::vector<FeatureExpansion> features_;
    Box domain_;
    std::optional<Optimum> optimum_;
};

/// Draws centers uniformly over the domain (tasks uniform), standard normal
/// coefficients, and rescales each feature to its target RKHS norm.
/// Each feature uses its own random stream derived from (seed, feature index).
SyntheticFunction sample_function(const LMCKernel& kernel, std::span<const double> target_norms,
                                  std::span<const std::size_t> n_centers, std::uint64_t seed, const Box& domain);

double evaluate(const SyntheticFunction& f, const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task);

struct OptimumSearch {
    std::size_t starts = 1024;
    std::size_t max_iterations = 200;
    double gradient_tolerance = 1e-8;
    std::uint64_t seed = 0;
};

/// Multi-start projected Newton descent from Sobol starts.
Optimum locate_global_minimum(const SyntheticFunction& f, std::size_t task, const OptimumSearch& search = {});

/// Projected Newton descent from a single start.
Optimum local_minimum(const SyntheticFunction& f, std::size_t task, Eigen::VectorXd start,
                      std::size_t max_iterations = 200, double gradient_tolerance = 1e-8);

struct ExpressivenessOptions {
    std::size_t dim = 1;
    double major_norm = 30.5;
    double major_correlation = 0.85;
    double major_lengthscale = 0.3;
    double minor_norm = 10.2;
    double minor_lengthscale = 0.1;
    std::size_t n_centers = 200;
};

/// ICM instance (one highly correlated feature) and LMC instance (same
/// feature plus a smaller uncorrelated one). With minor_norm == 0 the LMC
/// instance reduces to the ICM instance.
std::pair<SyntheticFunction, SyntheticFunction> expressiveness_demo(std::uint64_t seed,
                                                                    const ExpressivenessOptions& options = {});

/// Writes values on a regular grid with `resolution` points per axis.
/// Columns: x_1..x_d, task, value.
void write_grid_csv(std::ostream& out, const SyntheticFunction& f, std::size_t resolution);

}  // namespace lmcsafe
