#include "lmcsafe/inference.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace lmcsafe {

Eigen::MatrixXd robust_cholesky(const Eigen::MatrixXd& matrix, const FitOptions& options, double* jitter_used) {
    const Eigen::Index n = matrix.rows();
    if (n == 0) {
        if (jitter_used != nullptr) {
            *jitter_used = 0.0;
        }
        return Eigen::MatrixXd(0, 0);
    }
    const double mean_diag = matrix.diagonal().mean();
    double rel = options.jitter;
    while (true) {
        const double jitter = rel * mean_diag;
        Eigen::MatrixXd a = matrix;
        a.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(a);
        if (llt.info() == Eigen::Success) {
            if (jitter_used != nullptr) {
                *jitter_used = jitter;
            }
            return llt.matrixL();
        }
        if (rel >= options.max_jitter * (1.0 - 1e-12)) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(matrix, Eigen::EigenvaluesOnly);
            std::ostringstream msg;
            msg << "Cholesky factorization failed for a " << n << "x" << n << " matrix after jitter "
                << jitter << " (eigenvalue range [" << eig.eigenvalues().minCoeff() << ", "
                << eig.eigenvalues().maxCoeff() << "], mean diagonal " << mean_diag << ")";
            throw NumericalError(msg.str());
        }
        rel = rel > 0.0 ? std::min(rel * 10.0, options.max_jitter) : std::min(1e-12, options.max_jitter);
    }
}

PosteriorModel::PosteriorModel(LMCKernel kernel, TaskedDataset data, const FitOptions& options)
    : kernel_(std::move(kernel)), data_(std::move(data)) {
    if (data_.dim() != kernel_.dim() || data_.task_count() != kernel_.tasks()) {
        throw std::invalid_argument("fit: kernel and data disagree on input dimension or task count");
    }
    const auto n = static_cast<Eigen::Index>(data_.size());
    if (n == 0) {
        factor_.resize(0, 0);
        alpha_.resize(0);
        return;
    }
    Eigen::MatrixXd noisy = assemble_gram(kernel_, data_);
    noisy.diagonal().array() += data_.noise_variance();
    factor_ = robust_cholesky(noisy, options, &jitter_);
    alpha_ = factor_.triangularView<Eigen::Lower>().solve(data_.observations());
    factor_.triangularView<Eigen::Lower>().transpose().solveInPlace(alpha_);
}

Eigen::MatrixXd PosteriorModel::predict_covariance(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const std::size_t u = kernel_.tasks();
    std::vector<TaskedPoint> queries;
    queries.reserve(u);
    for (std::size_t t = 0; t < u; ++t) {
        queries.push_back({x, t});
    }
    Eigen::MatrixXd prior(u, u);
    for (std::size_t t = 0; t < u; ++t) {
        for (std::size_t s = 0; s < u; ++s) {
            prior(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)) = lmc_eval(kernel_, x, x, t, s);
        }
    }
    if (data_.empty()) {
        return prior;
    }
    const Eigen::MatrixXd kx = cross_gram(kernel_, queries, data_);
    const Eigen::MatrixXd w = factor_.triangularView<Eigen::Lower>().solve(kx.transpose());
    return prior - w.transpose() * w;
}

Prediction PosteriorModel::predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (static_cast<std::size_t>(x.size()) != kernel_.dim()) {
        throw std::invalid_argument("predict: dimension mismatch");
    }
    const std::size_t u = kernel_.tasks();
    Prediction p;
    p.mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(u));
    if (!data_.empty()) {
        std::vector<TaskedPoint> queries;
        for (std::size_t t = 0; t < u; ++t) {
            queries.push_back({x, t});
        }
        p.mean = cross_gram(kernel_, queries, data_) * alpha_;
    }
    p.variance = predict_covariance(x).diagonal().cwiseMax(0.0);
    return p;
}

Eigen::MatrixXd PosteriorModel::whitened_cross(const Eigen::MatrixXd& inputs, std::size_t task) const {
    const Eigen::MatrixXd kx = cross_gram_task(kernel_, inputs, task, data_);
    return factor_.triangularView<Eigen::Lower>().solve(kx.transpose());
}

TaskPrediction PosteriorModel::predict_task(const Eigen::MatrixXd& inputs, std::size_t task) const {
    if (static_cast<std::size_t>(inputs.cols()) != kernel_.dim()) {
        throw std::invalid_argument("predict_task: dimension mismatch");
    }
    const double prior = kernel_.prior_variance(task);
    TaskPrediction p;
    if (data_.empty()) {
        p.mean = Eigen::VectorXd::Zero(inputs.rows());
        p.variance = Eigen::VectorXd::Constant(inputs.rows(), prior);
        return p;
    }
    const Eigen::MatrixXd kx = cross_gram_task(kernel_, inputs, task, data_);
    p.mean = kx * alpha_;
    const Eigen::MatrixXd w = factor_.triangularView<Eigen::Lower>().solve(kx.transpose());
    p.variance = (prior - w.colwise().squaredNorm().transpose().array()).matrix().cwiseMax(0.0);
    return p;
}

Eigen::MatrixXd PosteriorModel::training_means() const {
    const auto n = static_cast<Eigen::Index>(data_.size());
    const auto u = static_cast<Eigen::Index>(kernel_.tasks());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, u);
    if (n == 0) {
        return out;
    }
    const Eigen::MatrixXd xs = data_.inputs();
    for (Eigen::Index t = 0; t < u; ++t) {
        out.col(t) = cross_gram_task(kernel_, xs, static_cast<std::size_t>(t), data_) * alpha_;
    }
    return out;
}

double PosteriorModel::log_marginal_likelihood() const {
    const auto n = static_cast<double>(data_.size());
    if (data_.empty()) {
        throw std::invalid_argument("log_marginal_likelihood: data must be nonempty");
    }
    const double fit_term = data_.observations().dot(alpha_);
    const double log_det = 2.0 * factor_.diagonal().array().log().sum();
    return -0.5 * fit_term - 0.5 * log_det - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

PosteriorModel fit(const LMCKernel& kernel, const TaskedDataset& data, const FitOptions& options) {
    return PosteriorModel(kernel, data, options);
}

Prediction predict(const PosteriorModel& model, const Eigen::Ref<const Eigen::VectorXd>& x) {
    return model.predict(x);
}

double log_marginal_likelihood(const LMCKernel& kernel, const TaskedDataset& data, const FitOptions& options) {
    if (data.empty()) {
        throw std::invalid_argument("log_marginal_likelihood: data must be nonempty");
    }
    return PosteriorModel(kernel, data, options).log_marginal_likelihood();
}

AffineGramSolver::AffineGramSolver(const Eigen::MatrixXd& base, const Eigen::MatrixXd& direction, const Eigen::VectorXd& y) {
    if (base.rows() != base.cols() || direction.rows() != base.rows() || direction.cols() != base.cols() ||
        y.size() != base.rows()) {
        throw std::invalid_argument("AffineGramSolver: dimension mismatch");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(base);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("AffineGramSolver: base matrix is not positive definite");
    }
    const Eigen::MatrixXd l0 = llt.matrixL();
    base_log_det_ = 2.0 * l0.diagonal().array().log().sum();
    Eigen::MatrixXd c = l0.triangularView<Eigen::Lower>().solve(direction);
    c = l0.triangularView<Eigen::Lower>().solve(c.transpose()).eval();
    c = 0.5 * (c + c.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
    if (eig.info() != Eigen::Success) {
        throw NumericalError("AffineGramSolver: eigendecomposition failed");
    }
    eigenvalues_ = eig.eigenvalues();
    basis_ = l0.triangularView<Eigen::Lower>().transpose().solve(eig.eigenvectors());
    rotated_y_ = basis_.transpose() * y;
}

bool AffineGramSolver::admissible(double theta) const {
    return ((1.0 + theta * eigenvalues_.array()) > 0.0).all();
}

double AffineGramSolver::log_marginal_likelihood(double theta) const {
    const Eigen::ArrayXd scale = 1.0 + theta * eigenvalues_.array();
    if ((scale <= 0.0).any()) {
        return -std::numeric_limits<double>::infinity();
    }
    const double fit_term = (rotated_y_.array().square() / scale).sum();
    const double log_det = base_log_det_ + scale.log().sum();
    const auto n = static_cast<double>(rotated_y_.size());
    return -0.5 * fit_term - 0.5 * log_det - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

Eigen::VectorXd AffineGramSolver::alpha(double theta) const {
    const Eigen::ArrayXd scale = 1.0 + theta * eigenvalues_.array();
    if ((scale <= 0.0).any()) {
        throw NumericalError("AffineGramSolver: matrix is not positive definite at this parameter");
    }
    return basis_ * (rotated_y_.array() / scale).matrix();
}

std::optional<AffineGramSolver> make_offdiagonal_solver(const LMCKernel& kernel, std::size_t feature,
                                                        const TaskedDataset& data, const FitOptions& options) {
    if (kernel.tasks() != 2 || feature >= kernel.features() || data.empty()) {
        return std::nullopt;
    }
    Eigen::MatrixXd base = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < kernel.features(); ++i) {
        Eigen::MatrixXd a = kernel.correlation(i).matrix();
        if (i == feature) {
            a(0, 1) = 0.0;
            a(1, 0) = 0.0;
        }
        base += per_feature_gram(kernel, i, a, data);
    }
    base.diagonal().array() += data.noise_variance();
    base.diagonal().array() += options.jitter * base.diagonal().mean();
    Eigen::MatrixXd dir(2, 2);
    dir << 0.0, 1.0, 1.0, 0.0;
    const Eigen::MatrixXd direction = per_feature_gram(kernel, feature, dir, data);
    try {
        return AffineGramSolver(base, direction, data.observations());
    } catch (const NumericalError&) {
        return std::nullopt;
    }
}

}  // namespace lmcsafe
