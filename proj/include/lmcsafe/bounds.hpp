#pragma once

#include <cstddef>
#include <memory>
#include <ostream>
#include <vector>

#include <Eigen/Dense>

#include "lmcsafe/correlation.hpp"
#include "lmcsafe/inference.hpp"
#include "lmcsafe/kernels.hpp"

namespace lmcsafe {

/// Regularity constants of the discretization term. All zero by default,
/// which switches the term off.
struct RegularityBudget {
    double lipschitz_f = 0.0;
    double omega_mu_at_tau = 0.0;
    double omega_sigma_at_tau = 0.0;
    double tau = 0.0;
};

struct RobustBound {
    double beta = 0.0;
    double nu = 0.0;
    double gamma = 1.0;
    double psi = 0.0;
    double beta_bar = 0.0;
    /// |I|, kept as a double because tensor grids overflow 64-bit counts quickly.
    double grid_cardinality = 1.0;
    double delta = 0.05;
};

/// 2 ln(|I| / delta).
double beta(double grid_cardinality, double delta);

/// Number of points of the tensor grid with mesh tau over the box:
/// prod_j (floor(side_j / tau) + 1).
double grid_cardinality(const Box& domain, double tau);

/// L_f tau + omega_mu(tau) + sqrt(beta) omega_sigma(tau).
double psi(const RegularityBudget& budget, double beta);

/// beta_bar = (nu + gamma sqrt(beta))^2. Only nu, gamma, beta and beta_bar are filled.
RobustBound robust_beta(double nu, double gamma, double beta);

/// Which posterior-mean components enter the data-fit part of nu.
enum class DataFitMode {
    /// Only the observed task t_n at each training input x_n.
    Observed,
    /// Every task at each training input. Never smaller than Observed.
    Full,
};

/// The two squared contributions of nu for one candidate.
struct NuTerms {
    /// sum_i [a'^T G_i(S_i') a' - 2 a'^T G_i(S_i) a + a^T G_i(S_i S_i'^{-1} S_i) a]
    double rkhs = 0.0;
    /// (1 / sigma_n^2) sum_n (mu_S(x_n) - mu_S'(x_n))^2, over the components
    /// selected by the data-fit mode.
    double data_fit = 0.0;
    double value() const;
};

/// Evaluates nu for many candidate tuples against one nominal tuple on a
/// fixed dataset. Base-kernel Gram matrices and the nominal solve are cached.
class NuEvaluator {
public:
    NuEvaluator(const LMCKernel& kernel_template, const TaskedDataset& data, const CorrelationTuple& nominal,
                const FitOptions& options = {}, DataFitMode mode = DataFitMode::Observed);

    /// Enables the fast path for candidates that differ from the nominal only in
    /// the off-diagonal entry of `feature` (two tasks). The solver must have been
    /// built by make_offdiagonal_solver from a kernel sharing every other entry
    /// with the nominal.
    void use_affine_solver(std::shared_ptr<const AffineGramSolver> solver, std::size_t feature);

    NuTerms terms(const CorrelationTuple& candidate) const;
    double nu(const CorrelationTuple& candidate) const { return terms(candidate).value(); }

    const Eigen::VectorXd& nominal_alpha() const { return alpha_nominal_; }

private:
    Eigen::VectorXd solve_alpha(const CorrelationTuple& candidate) const;
    Eigen::MatrixXd training_means(const CorrelationTuple& sigmas, const Eigen::VectorXd& alpha) const;
    double data_fit(const Eigen::MatrixXd& means) const;
    /// a^T G_i(A) b
    double weighted_form(std::size_t feature, const Eigen::MatrixXd& a_weights, const Eigen::VectorXd& a,
                         const Eigen::VectorXd& b) const;

    LMCKernel kernel_;
    TaskedDataset data_;
    CorrelationTuple nominal_;
    std::vector<Eigen::MatrixXd> nominal_inverse_;
    FitOptions options_;
    DataFitMode mode_;
    std::vector<Eigen::MatrixXd> base_grams_;
    Eigen::VectorXd alpha_nominal_;
    Eigen::MatrixXd means_nominal_;
    double nominal_rkhs_ = 0.0;
    std::shared_ptr<const AffineGramSolver> affine_;
    std::size_t affine_feature_ = 0;
};

NuTerms nu_terms(const CorrelationTuple& candidate, const CorrelationTuple& nominal, const TaskedDataset& data,
                 const LMCKernel& kernel_template, const FitOptions& options = {},
                 DataFitMode mode = DataFitMode::Observed);

double nu_single(const CorrelationTuple& candidate, const CorrelationTuple& nominal, const TaskedDataset& data,
                 const LMCKernel& kernel_template, const FitOptions& options = {},
                 DataFitMode mode = DataFitMode::Observed);

/// Largest nu over the members of the set, measured against its nominal.
/// Identical member tuples are evaluated once.
double nu_max(const CorrelationSet& set, const NuEvaluator& evaluator);
double nu_max(const CorrelationSet& set, const TaskedDataset& data, const LMCKernel& kernel_template,
              const FitOptions& options = {}, DataFitMode mode = DataFitMode::Observed);

/// sqrt of the largest spectral norm of S_i S_i'^{-1} over members and
/// features, floored at 1.
double gamma(const CorrelationSet& set);

/// The same quantity per feature (max over members only, no floor). Diagnostic.
std::vector<double> per_feature_gamma(const CorrelationSet& set);

/// Spectral norm of S S'^{-1}; throws NumericalError when S' is singular.
double correlation_ratio_norm(const CorrelationMatrix& candidate, const CorrelationMatrix& nominal);

struct BoundInputs {
    double grid_cardinality = 1.0;
    double delta = 0.05;
    RegularityBudget budget;
};

/// beta, nu, gamma, psi and beta_bar for a confidence set on a dataset.
RobustBound compute_robust_bound(const CorrelationSet& set, const NuEvaluator& evaluator, const BoundInputs& inputs);

/// Columns: iteration, beta, nu, gamma, psi, beta_bar.
void write_bound_header(std::ostream& out);
void write_bound_row(std::ostream& out, std::size_t iteration, const RobustBound& bound);

}  // namespace lmcsafe
