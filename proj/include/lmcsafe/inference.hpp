#pragma once

#include <cstddef>
#include <optional>

#include <Eigen/Dense>

#include "lmcsafe/kernels.hpp"

namespace lmcsafe {

struct FitOptions {
    /// Initial jitter, relative to the mean diagonal of the noisy Gram.
    double jitter = 1e-10;
    /// Largest relative jitter tried before giving up; jitter grows by 10x per attempt.
    double max_jitter = 1e-4;
};

/// Per-task posterior at one input.
struct Prediction {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
};

/// Posterior of one task at many inputs.
struct TaskPrediction {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
};

/// Exact multi-task GP posterior with a cached Cholesky factor of
/// Gamma_Sigma + sigma_n^2 I plus a small relative jitter, escalated when the
/// factorization fails.
class PosteriorModel {
public:
    PosteriorModel(LMCKernel kernel, TaskedDataset data, const FitOptions& options = {});

    const LMCKernel& kernel() const { return kernel_; }
    const TaskedDataset& data() const { return data_; }
    /// Lower triangular factor; factor * factor^T = Gamma + (sigma_n^2 + jitter) I.
    const Eigen::MatrixXd& factor() const { return factor_; }
    const Eigen::VectorXd& alpha() const { return alpha_; }
    double jitter() const { return jitter_; }

    Prediction predict(const Eigen::Ref<const Eigen::VectorXd>& x) const;
    /// Full u x u posterior covariance at x.
    Eigen::MatrixXd predict_covariance(const Eigen::Ref<const Eigen::VectorXd>& x) const;
    /// Mean and variance of one task at every row of `inputs`.
    TaskPrediction predict_task(const Eigen::MatrixXd& inputs, std::size_t task) const;
    /// factor^{-1} K(X, inputs) for one task: N x Q. Its columns give posterior
    /// covariances via k(a, b) - w_a . w_b.
    Eigen::MatrixXd whitened_cross(const Eigen::MatrixXd& inputs, std::size_t task) const;

    /// Posterior mean at every training input, N x u.
    Eigen::MatrixXd training_means() const;

    double log_marginal_likelihood() const;

private:
    LMCKernel kernel_;
    TaskedDataset data_;
    Eigen::MatrixXd factor_;
    Eigen::VectorXd alpha_;
    double jitter_ = 0.0;
};

PosteriorModel fit(const LMCKernel& kernel, const TaskedDataset& data, const FitOptions& options = {});

Prediction predict(const PosteriorModel& model, const Eigen::Ref<const Eigen::VectorXd>& x);

double log_marginal_likelihood(const LMCKernel& kernel, const TaskedDataset& data, const FitOptions& options = {});

/// Cholesky factor of a symmetric positive definite matrix with relative jitter
/// escalation. Returns the factor and writes the absolute jitter used.
Eigen::MatrixXd robust_cholesky(const Eigen::MatrixXd& matrix, const FitOptions& options, double* jitter_used = nullptr);

/// Solves (M0 + theta * M1) systems for many scalars theta through one
/// generalized eigendecomposition M0^{-1/2} M1 M0^{-T/2} = V D V^T. Each
/// query then costs O(N) (likelihood) or O(N^2) (weights).
class AffineGramSolver {
public:
    AffineGramSolver(const Eigen::MatrixXd& base, const Eigen::MatrixXd& direction, const Eigen::VectorXd& y);

    std::size_t size() const { return static_cast<std::size_t>(rotated_y_.size()); }
    /// True when M0 + theta M1 is positive definite.
    bool admissible(double theta) const;
    double log_marginal_likelihood(double theta) const;
    /// (M0 + theta M1)^{-1} y
    Eigen::VectorXd alpha(double theta) const;

private:
    Eigen::MatrixXd basis_;  // L0^{-T} V
    Eigen::VectorXd eigenvalues_;
    Eigen::VectorXd rotated_y_;  // V^T L0^{-1} y
    double base_log_det_ = 0.0;
};

/// Solver for an LMC posterior in which only the off-diagonal entry of one
/// feature's 2 x 2 matrix varies; theta is that entry. The noise and the
/// factorization jitter follow fit() exactly. Empty when the kernel does not
/// have two tasks or the base matrix cannot be factorized.
std::optional<AffineGramSolver> make_offdiagonal_solver(const LMCKernel& kernel, std::size_t feature,
                                                        const TaskedDataset& data, const FitOptions& options = {});

}  // namespace lmcsafe
