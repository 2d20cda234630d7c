#include "lmcsafe/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace lmcsafe {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) {
        throw std::invalid_argument(message);
    }
}

double scaled_sq_dist(const Eigen::VectorXd& inv_ls, const Eigen::Ref<const Eigen::VectorXd>& x,
                      const Eigen::Ref<const Eigen::VectorXd>& xp) {
    double r = 0.0;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        const double d = (x[j] - xp[j]) * inv_ls[j];
        r += d * d;
    }
    return r;
}

}  // namespace

Box::Box(Eigen::VectorXd lo, Eigen::VectorXd hi) : lower(std::move(lo)), upper(std::move(hi)) {
    require(lower.size() == upper.size() && lower.size() > 0, "Box: bound dimensions must agree and be nonzero");
    require(((upper - lower).array() > 0.0).all(), "Box: every upper bound must exceed its lower bound");
}

Box Box::cube(std::size_t dim, double lo, double hi) {
    const auto n = static_cast<Eigen::Index>(dim);
    return Box(Eigen::VectorXd::Constant(n, lo), Eigen::VectorXd::Constant(n, hi));
}

bool Box::contains(const Eigen::VectorXd& x, double slack) const {
    if (x.size() != lower.size()) {
        return false;
    }
    return ((x - lower).array() >= -slack).all() && ((upper - x).array() >= -slack).all();
}

Eigen::VectorXd Box::clamp(const Eigen::VectorXd& x) const {
    return x.cwiseMax(lower).cwiseMin(upper);
}

Eigen::VectorXd Box::from_unit(const Eigen::VectorXd& u) const {
    return lower + (upper - lower).cwiseProduct(u);
}

SEKernelParams::SEKernelParams(Eigen::VectorXd ls, double variance)
    : lengthscales(std::move(ls)), signal_variance(variance) {
    require(lengthscales.size() > 0, "SEKernelParams: at least one lengthscale is required");
    require((lengthscales.array() > 0.0).all(), "SEKernelParams: lengthscales must be positive");
    require(signal_variance > 0.0, "SEKernelParams: signal variance must be positive");
}

double se_eval(const SEKernelParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
               const Eigen::Ref<const Eigen::VectorXd>& xp) {
    require(x.size() == xp.size() && x.size() == params.lengthscales.size(), "se_eval: dimension mismatch");
    double r = 0.0;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        const double d = (x[j] - xp[j]) / params.lengthscales[j];
        r += d * d;
    }
    return params.signal_variance * std::exp(-0.5 * r);
}

Eigen::VectorXd se_gradient(const SEKernelParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
                            const Eigen::Ref<const Eigen::VectorXd>& xp) {
    const double k = se_eval(params, x, xp);
    return -k * (x - xp).cwiseQuotient(params.lengthscales.cwiseProduct(params.lengthscales));
}

CorrelationMatrix::CorrelationMatrix(Eigen::MatrixXd entries) : entries_(std::move(entries)) {
    require(entries_.rows() == entries_.cols() && entries_.rows() > 0, "CorrelationMatrix: matrix must be square");
    const double asym = (entries_ - entries_.transpose()).cwiseAbs().maxCoeff();
    require(asym <= 1e-12 * std::max(1.0, entries_.cwiseAbs().maxCoeff()), "CorrelationMatrix: matrix must be symmetric");
    entries_ = 0.5 * (entries_ + entries_.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(entries_, Eigen::EigenvaluesOnly);
    require(eig.eigenvalues().minCoeff() > 0.0, "CorrelationMatrix: matrix must be positive definite");
}

CorrelationMatrix CorrelationMatrix::identity(std::size_t tasks) {
    const auto n = static_cast<Eigen::Index>(tasks);
    return CorrelationMatrix(Eigen::MatrixXd::Identity(n, n));
}

CorrelationMatrix CorrelationMatrix::two_task(double r, double var0, double var1) {
    Eigen::MatrixXd m(2, 2);
    const double off = r * std::sqrt(var0 * var1);
    m << var0, off, off, var1;
    return CorrelationMatrix(m);
}

LMCKernel::LMCKernel(std::vector<LMCFeature> features) : features_(std::move(features)) {
    require(!features_.empty(), "LMCKernel: at least one feature is required");
    tasks_ = features_.front().correlation.tasks();
    const std::size_t d = features_.front().base.dim();
    for (const auto& f : features_) {
        require(f.correlation.tasks() == tasks_ && tasks_ > 0, "LMCKernel: all correlation matrices must share the task count");
        require(f.base.dim() == d, "LMCKernel: all base kernels must share the input dimension");
    }
}

CorrelationTuple LMCKernel::correlations() const {
    CorrelationTuple out;
    out.reserve(features_.size());
    for (const auto& f : features_) {
        out.push_back(f.correlation);
    }
    return out;
}

LMCKernel LMCKernel::with_correlations(const CorrelationTuple& sigmas) const {
    require(sigmas.size() == features_.size(), "LMCKernel::with_correlations: feature count mismatch");
    std::vector<LMCFeature> out = features_;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].correlation = sigmas[i];
    }
    return LMCKernel(std::move(out));
}

double LMCKernel::prior_variance(std::size_t task) const {
    require(task < tasks_, "LMCKernel::prior_variance: invalid task index");
    double v = 0.0;
    for (const auto& f : features_) {
        v += f.correlation(task, task) * f.base.signal_variance;
    }
    return v;
}

double lmc_eval(const LMCKernel& kernel, const Eigen::Ref<const Eigen::VectorXd>& x,
                const Eigen::Ref<const Eigen::VectorXd>& xp, std::size_t t, std::size_t tp) {
    require(t < kernel.tasks() && tp < kernel.tasks(), "lmc_eval: invalid task index");
    double v = 0.0;
    for (std::size_t i = 0; i < kernel.features(); ++i) {
        v += kernel.correlation(i)(t, tp) * se_eval(kernel.base(i), x, xp);
    }
    return v;
}

TaskedDataset::TaskedDataset(std::size_t dim, std::size_t tasks, double noise_variance)
    : dim_(dim), task_count_(tasks), noise_variance_(noise_variance) {
    require(dim > 0, "TaskedDataset: input dimension must be positive");
    require(tasks > 0, "TaskedDataset: task count must be positive");
    require(noise_variance > 0.0, "TaskedDataset: noise variance must be positive");
    inputs_.resize(0, static_cast<Eigen::Index>(dim));
}

TaskedDataset::TaskedDataset(Eigen::MatrixXd inputs, std::vector<std::size_t> tasks, Eigen::VectorXd observations,
                             std::size_t task_count, double noise_variance)
    : TaskedDataset(static_cast<std::size_t>(inputs.cols()), task_count, noise_variance) {
    require(static_cast<std::size_t>(inputs.rows()) == tasks.size() && observations.size() == inputs.rows(),
            "TaskedDataset: row counts of inputs, tasks and observations must agree");
    for (auto t : tasks) {
        require(t < task_count, "TaskedDataset: invalid task index");
    }
    inputs_ = std::move(inputs);
    task_of_ = std::move(tasks);
    y_ = std::move(observations);
}

void TaskedDataset::add(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task, double y) {
    require(static_cast<std::size_t>(x.size()) == dim_, "TaskedDataset::add: dimension mismatch");
    require(task < task_count_, "TaskedDataset::add: invalid task index");
    require(x.allFinite() && std::isfinite(y), "TaskedDataset::add: inputs and observations must be finite");
    const auto n = static_cast<Eigen::Index>(task_of_.size());
    if (n >= inputs_.rows()) {
        const Eigen::Index cap = std::max<Eigen::Index>(16, 2 * inputs_.rows());
        inputs_.conservativeResize(cap, static_cast<Eigen::Index>(dim_));
        y_.conservativeResize(cap);
    }
    inputs_.row(n) = x.transpose();
    y_[n] = y;
    task_of_.push_back(task);
}

TaskedDataset TaskedDataset::single_task(std::size_t task) const {
    require(task < task_count_, "TaskedDataset::single_task: invalid task index");
    TaskedDataset out(dim_, 1, noise_variance_);
    for (std::size_t n = 0; n < size(); ++n) {
        if (task_of_[n] == task) {
            out.add(input(n), 0, observation(n));
        }
    }
    return out;
}

TaskedDataset TaskedDataset::permuted(std::span<const std::size_t> perm) const {
    require(perm.size() == size(), "TaskedDataset::permuted: permutation length mismatch");
    TaskedDataset out(dim_, task_count_, noise_variance_);
    for (auto p : perm) {
        out.add(input(p), task_of_.at(p), observation(p));
    }
    return out;
}

void TaskedDataset::require_within(const Box& domain) const {
    for (std::size_t n = 0; n < size(); ++n) {
        require(domain.contains(input(n)), "TaskedDataset: input row " + std::to_string(n) + " lies outside the domain");
    }
}

Eigen::MatrixXd base_cross_gram(const SEKernelParams& params, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    require(a.cols() == b.cols() && static_cast<std::size_t>(a.cols()) == params.dim(), "base_cross_gram: dimension mismatch");
    const Eigen::VectorXd inv_ls = params.lengthscales.cwiseInverse();
    Eigen::MatrixXd out(a.rows(), b.rows());
    for (Eigen::Index m = 0; m < b.rows(); ++m) {
        const Eigen::VectorXd xm = b.row(m).transpose();
        for (Eigen::Index n = 0; n < a.rows(); ++n) {
            out(n, m) = params.signal_variance * std::exp(-0.5 * scaled_sq_dist(inv_ls, a.row(n).transpose(), xm));
        }
    }
    return out;
}

Eigen::MatrixXd base_gram(const SEKernelParams& params, const Eigen::MatrixXd& inputs) {
    require(static_cast<std::size_t>(inputs.cols()) == params.dim(), "base_gram: dimension mismatch");
    const Eigen::VectorXd inv_ls = params.lengthscales.cwiseInverse();
    const Eigen::Index n = inputs.rows();
    Eigen::MatrixXd out(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const Eigen::VectorXd xj = inputs.row(j).transpose();
        out(j, j) = params.signal_variance;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            const double k = params.signal_variance * std::exp(-0.5 * scaled_sq_dist(inv_ls, inputs.row(i).transpose(), xj));
            out(i, j) = k;
            out(j, i) = k;
        }
    }
    return out;
}

Eigen::MatrixXd per_feature_gram(const LMCKernel& kernel, std::size_t feature, const Eigen::MatrixXd& task_weights,
                                 const TaskedDataset& data) {
    require(feature < kernel.features(), "per_feature_gram: invalid feature index");
    require(static_cast<std::size_t>(task_weights.rows()) == kernel.tasks() && task_weights.rows() == task_weights.cols(),
            "per_feature_gram: task weight matrix must be u x u");
    Eigen::MatrixXd g = base_gram(kernel.base(feature), data.inputs());
    const auto& tasks = data.tasks();
    for (Eigen::Index m = 0; m < g.cols(); ++m) {
        for (Eigen::Index n = 0; n < g.rows(); ++n) {
            g(n, m) *= task_weights(static_cast<Eigen::Index>(tasks[static_cast<std::size_t>(n)]),
                                    static_cast<Eigen::Index>(tasks[static_cast<std::size_t>(m)]));
        }
    }
    return g;
}

Eigen::MatrixXd assemble_gram(const LMCKernel& kernel, const TaskedDataset& data) {
    require(data.dim() == kernel.dim() && data.task_count() == kernel.tasks(), "assemble_gram: kernel and data disagree");
    const auto n = static_cast<Eigen::Index>(data.size());
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < kernel.features(); ++i) {
        gram += per_feature_gram(kernel, i, kernel.correlation(i).matrix(), data);
    }
    return gram;
}

Eigen::MatrixXd cross_gram(const LMCKernel& kernel, std::span<const TaskedPoint> queries, const TaskedDataset& data) {
    require(data.dim() == kernel.dim() && data.task_count() == kernel.tasks(), "cross_gram: kernel and data disagree");
    const auto q = static_cast<Eigen::Index>(queries.size());
    const auto n = static_cast<Eigen::Index>(data.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(q, n);
    if (q == 0 || n == 0) {
        return out;
    }
    Eigen::MatrixXd qx(q, static_cast<Eigen::Index>(kernel.dim()));
    for (Eigen::Index r = 0; r < q; ++r) {
        require(queries[static_cast<std::size_t>(r)].task < kernel.tasks(), "cross_gram: invalid task index");
        require(static_cast<std::size_t>(queries[static_cast<std::size_t>(r)].x.size()) == kernel.dim(),
                "cross_gram: dimension mismatch");
        qx.row(r) = queries[static_cast<std::size_t>(r)].x.transpose();
    }
    const Eigen::MatrixXd xs = data.inputs();
    const auto& tasks = data.tasks();
    for (std::size_t i = 0; i < kernel.features(); ++i) {
        const Eigen::MatrixXd kb = base_cross_gram(kernel.base(i), qx, xs);
        const Eigen::MatrixXd& s = kernel.correlation(i).matrix();
        for (Eigen::Index m = 0; m < n; ++m) {
            const auto tm = static_cast<Eigen::Index>(tasks[static_cast<std::size_t>(m)]);
            for (Eigen::Index r = 0; r < q; ++r) {
                out(r, m) += s(static_cast<Eigen::Index>(queries[static_cast<std::size_t>(r)].task), tm) * kb(r, m);
            }
        }
    }
    return out;
}

Eigen::MatrixXd cross_gram_task(const LMCKernel& kernel, const Eigen::MatrixXd& query_inputs, std::size_t task,
                                const TaskedDataset& data) {
    require(task < kernel.tasks(), "cross_gram_task: invalid task index");
    require(data.dim() == kernel.dim() && data.task_count() == kernel.tasks(), "cross_gram_task: kernel and data disagree");
    const auto n = static_cast<Eigen::Index>(data.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(query_inputs.rows(), n);
    if (query_inputs.rows() == 0 || n == 0) {
        return out;
    }
    const Eigen::MatrixXd xs = data.inputs();
    const auto& tasks = data.tasks();
    for (std::size_t i = 0; i < kernel.features(); ++i) {
        const Eigen::MatrixXd kb = base_cross_gram(kernel.base(i), query_inputs, xs);
        const Eigen::MatrixXd& s = kernel.correlation(i).matrix();
        for (Eigen::Index m = 0; m < n; ++m) {
            out.col(m) += s(static_cast<Eigen::Index>(task), static_cast<Eigen::Index>(tasks[static_cast<std::size_t>(m)])) * kb.col(m);
        }
    }
    return out;
}

}  // namespace lmcsafe
