#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace lmcsafe {

/// Raised when a factorization or solve cannot be completed even after
/// jitter escalation.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Axis-aligned compact input domain.
struct Box {
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;

    Box() = default;
    Box(Eigen::VectorXd lo, Eigen::VectorXd hi);

    static Box cube(std::size_t dim, double lo, double hi);

    std::size_t dim() const { return static_cast<std::size_t>(lower.size()); }
    bool contains(const Eigen::VectorXd& x, double slack = 1e-12) const;
    Eigen::VectorXd clamp(const Eigen::VectorXd& x) const;
    /// Maps a point of the unit cube onto the box.
    Eigen::VectorXd from_unit(const Eigen::VectorXd& u) const;
};

/// Squared exponential base kernel
/// k(x, x') = signal_variance * exp(-0.5 * sum_j ((x_j - x'_j) / lengthscale_j)^2).
struct SEKernelParams {
    Eigen::VectorXd lengthscales;
    double signal_variance = 1.0;

    SEKernelParams() = default;
    SEKernelParams(Eigen::VectorXd ls, double variance);

    std::size_t dim() const { return static_cast<std::size_t>(lengthscales.size()); }
};

double se_eval(const SEKernelParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
               const Eigen::Ref<const Eigen::VectorXd>& xp);

/// Gradient of se_eval with respect to its first argument.
Eigen::VectorXd se_gradient(const SEKernelParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
                            const Eigen::Ref<const Eigen::VectorXd>& xp);

/// Symmetric positive definite u x u inter-task matrix.
class CorrelationMatrix {
public:
    CorrelationMatrix() = default;
    explicit CorrelationMatrix(Eigen::MatrixXd entries);

    static CorrelationMatrix identity(std::size_t tasks);
    /// Builds the matrix D R D with R the 2x2 correlation matrix [[1, r], [r, 1]]
    /// and D = diag(sqrt(variances)).
    static CorrelationMatrix two_task(double r, double var0 = 1.0, double var1 = 1.0);

    const Eigen::MatrixXd& matrix() const { return entries_; }
    std::size_t tasks() const { return static_cast<std::size_t>(entries_.rows()); }
    double operator()(std::size_t t, std::size_t tp) const { return entries_(t, tp); }

private:
    Eigen::MatrixXd entries_;
};

using CorrelationTuple = std::vector<CorrelationMatrix>;

struct LMCFeature {
    SEKernelParams base;
    CorrelationMatrix correlation;
};

/// Linear model of co-regionalization: K(x, x') = sum_i Sigma_i k_i(x, x').
/// With a single feature this is the intrinsic co-regionalization model.
class LMCKernel {
public:
    LMCKernel() = default;
    explicit LMCKernel(std::vector<LMCFeature> features);

    std::size_t features() const { return features_.size(); }
    std::size_t tasks() const { return tasks_; }
    std::size_t dim() const { return features_.front().base.dim(); }

    const LMCFeature& feature(std::size_t i) const { return features_.at(i); }
    const SEKernelParams& base(std::size_t i) const { return features_.at(i).base; }
    const CorrelationMatrix& correlation(std::size_t i) const { return features_.at(i).correlation; }

    CorrelationTuple correlations() const;
    /// Same base kernels, different correlation matrices.
    LMCKernel with_correlations(const CorrelationTuple& sigmas) const;

    /// Prior covariance between task t and task tp at zero distance.
    double prior_variance(std::size_t task) const;

private:
    std::vector<LMCFeature> features_;
    std::size_t tasks_ = 0;
};

double lmc_eval(const LMCKernel& kernel, const Eigen::Ref<const Eigen::VectorXd>& x,
                const Eigen::Ref<const Eigen::VectorXd>& xp, std::size_t t, std::size_t tp);

/// Inputs with per-row task indices (0-based) and noisy observations.
class TaskedDataset {
public:
    TaskedDataset() = default;
    TaskedDataset(std::size_t dim, std::size_t tasks, double noise_variance);
    TaskedDataset(Eigen::MatrixXd inputs, std::vector<std::size_t> tasks, Eigen::VectorXd observations,
                  std::size_t task_count, double noise_variance);

    void add(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task, double y);

    std::size_t size() const { return task_of_.size(); }
    bool empty() const { return task_of_.empty(); }
    std::size_t dim() const { return dim_; }
    std::size_t task_count() const { return task_count_; }
    double noise_variance() const { return noise_variance_; }

    Eigen::VectorXd input(std::size_t n) const { return inputs_.row(static_cast<Eigen::Index>(n)).head(dim_); }
    std::size_t task(std::size_t n) const { return task_of_[n]; }
    double observation(std::size_t n) const { return y_[static_cast<Eigen::Index>(n)]; }

    /// N x d input matrix (rows in insertion order).
    Eigen::MatrixXd inputs() const { return inputs_.topRows(static_cast<Eigen::Index>(size())); }
    const std::vector<std::size_t>& tasks() const { return task_of_; }
    Eigen::VectorXd observations() const { return y_.head(static_cast<Eigen::Index>(size())); }

    /// Rows restricted to one task, relabelled as task 0 of a single-task set.
    TaskedDataset single_task(std::size_t task) const;
    /// Same rows, reordered so that rows[k] = old row perm[k].
    TaskedDataset permuted(std::span<const std::size_t> perm) const;

    void require_within(const Box& domain) const;

private:
    std::size_t dim_ = 0;
    std::size_t task_count_ = 1;
    double noise_variance_ = 1e-4;
    Eigen::MatrixXd inputs_;
    std::vector<std::size_t> task_of_;
    Eigen::VectorXd y_;
};

/// A query for the cross covariance: input plus task.
struct TaskedPoint {
    Eigen::VectorXd x;
    std::size_t task = 0;
};

/// N x N multi-task Gram matrix Gamma_Sigma (no noise, no jitter).
Eigen::MatrixXd assemble_gram(const LMCKernel& kernel, const TaskedDataset& data);

/// Q x N cross covariance between queries and data rows.
Eigen::MatrixXd cross_gram(const LMCKernel& kernel, std::span<const TaskedPoint> queries, const TaskedDataset& data);

/// Q x N cross covariance for all queries on the same task.
Eigen::MatrixXd cross_gram_task(const LMCKernel& kernel, const Eigen::MatrixXd& query_inputs, std::size_t task,
                                const TaskedDataset& data);

/// Base-kernel Gram k_i(x_n, x_m) over the dataset inputs (task independent).
Eigen::MatrixXd base_gram(const SEKernelParams& params, const Eigen::MatrixXd& inputs);
Eigen::MatrixXd base_cross_gram(const SEKernelParams& params, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Task-weighted Gram G_i(A) with entries A(t_n, t_m) k_i(x_n, x_m).
Eigen::MatrixXd per_feature_gram(const LMCKernel& kernel, std::size_t feature, const Eigen::MatrixXd& task_weights,
                                 const TaskedDataset& data);

}  // namespace lmcsafe
