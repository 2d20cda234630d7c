#include "lmcsafe/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "lmcsafe/csv.hpp"

namespace lmcsafe {

double beta(double grid_cardinality, double delta) {
    if (!(grid_cardinality >= 1.0)) {
        throw std::invalid_argument("beta: grid cardinality must be at least 1");
    }
    if (!(delta > 0.0 && delta < 1.0)) {
        throw std::invalid_argument("beta: delta must lie in (0, 1)");
    }
    return 2.0 * (std::log(grid_cardinality) - std::log(delta));
}

double grid_cardinality(const Box& domain, double tau) {
    if (!(tau > 0.0)) {
        throw std::invalid_argument("grid_cardinality: tau must be positive");
    }
    double count = 1.0;
    for (std::size_t j = 0; j < domain.dim(); ++j) {
        const double side = domain.upper[static_cast<Eigen::Index>(j)] - domain.lower[static_cast<Eigen::Index>(j)];
        // 1e-9 absorbs representation error in side / tau (2 / 0.001 is 1999.999...).
        count *= std::floor(side / tau + 1e-9) + 1.0;
    }
    return count;
}

double psi(const RegularityBudget& budget, double beta) {
    if (budget.lipschitz_f < 0.0 || budget.omega_mu_at_tau < 0.0 || budget.omega_sigma_at_tau < 0.0 || budget.tau < 0.0) {
        throw std::invalid_argument("psi: regularity budget entries must be nonnegative");
    }
    if (beta < 0.0) {
        throw std::invalid_argument("psi: beta must be nonnegative");
    }
    return budget.lipschitz_f * budget.tau + budget.omega_mu_at_tau + std::sqrt(beta) * budget.omega_sigma_at_tau;
}

RobustBound robust_beta(double nu, double gamma, double beta) {
    if (!(nu >= 0.0) || !(gamma > 0.0) || !(beta >= 0.0)) {
        throw std::invalid_argument("robust_beta: need nu >= 0, gamma > 0, beta >= 0");
    }
    RobustBound b;
    b.nu = nu;
    b.gamma = gamma;
    b.beta = beta;
    if (nu == 0.0 && gamma == 1.0) {
        b.beta_bar = beta;
    } else {
        const double root = nu + gamma * std::sqrt(beta);
        b.beta_bar = root * root;
    }
    return b;
}

double NuTerms::value() const {
    return std::sqrt(std::max(rkhs, 0.0) + std::max(data_fit, 0.0));
}

namespace {

Eigen::MatrixXd task_weighted(const Eigen::MatrixXd& base, const Eigen::MatrixXd& weights, const std::vector<std::size_t>& tasks) {
    const auto n = base.rows();
    Eigen::MatrixXd out(n, n);
    for (Eigen::Index m = 0; m < n; ++m) {
        const auto tm = static_cast<Eigen::Index>(tasks[static_cast<std::size_t>(m)]);
        for (Eigen::Index k = 0; k < n; ++k) {
            out(k, m) = weights(static_cast<Eigen::Index>(tasks[static_cast<std::size_t>(k)]), tm) * base(k, m);
        }
    }
    return out;
}

void check_tuple(const CorrelationTuple& sigmas, const LMCKernel& kernel, const char* what) {
    if (sigmas.size() != kernel.features()) {
        throw std::invalid_argument(std::string(what) + ": tuple size differs from the number of features");
    }
    for (const auto& s : sigmas) {
        if (s.tasks() != kernel.tasks()) {
            throw std::invalid_argument(std::string(what) + ": matrix size differs from the number of tasks");
        }
    }
}

}  // namespace

NuEvaluator::NuEvaluator(const LMCKernel& kernel_template, const TaskedDataset& data, const CorrelationTuple& nominal,
                         const FitOptions& options, DataFitMode mode)
    : kernel_(kernel_template), data_(data), nominal_(nominal), options_(options), mode_(mode) {
    if (data_.empty()) {
        throw std::invalid_argument("NuEvaluator: data must be nonempty");
    }
    check_tuple(nominal_, kernel_, "NuEvaluator");
    const Eigen::MatrixXd xs = data_.inputs();
    for (std::size_t i = 0; i < kernel_.features(); ++i) {
        base_grams_.push_back(base_gram(kernel_.base(i), xs));
        Eigen::FullPivLU<Eigen::MatrixXd> lu(nominal_[i].matrix());
        if (!lu.isInvertible()) {
            throw NumericalError("NuEvaluator: nominal matrix is singular");
        }
        nominal_inverse_.push_back(lu.inverse());
    }
    alpha_nominal_ = solve_alpha(nominal_);
    means_nominal_ = training_means(nominal_, alpha_nominal_);
    for (std::size_t i = 0; i < kernel_.features(); ++i) {
        nominal_rkhs_ += weighted_form(i, nominal_[i].matrix(), alpha_nominal_, alpha_nominal_);
    }
}

void NuEvaluator::use_affine_solver(std::shared_ptr<const AffineGramSolver> solver, std::size_t feature) {
    if (kernel_.tasks() != 2 || feature >= kernel_.features()) {
        throw std::invalid_argument("NuEvaluator: the affine path needs two tasks and a valid feature");
    }
    if (solver && solver->size() != data_.size()) {
        throw std::invalid_argument("NuEvaluator: affine solver was built for a different dataset");
    }
    affine_ = std::move(solver);
    affine_feature_ = feature;
}

Eigen::VectorXd NuEvaluator::solve_alpha(const CorrelationTuple& candidate) const {
    if (affine_) {
        bool same_elsewhere = true;
        for (std::size_t i = 0; i < candidate.size() && same_elsewhere; ++i) {
            if (i == affine_feature_) {
                same_elsewhere = candidate[i](0, 0) == nominal_[i](0, 0) && candidate[i](1, 1) == nominal_[i](1, 1);
            } else {
                same_elsewhere = candidate[i].matrix() == nominal_[i].matrix();
            }
        }
        const double theta = candidate[affine_feature_](0, 1);
        if (same_elsewhere && affine_->admissible(theta)) {
            return affine_->alpha(theta);
        }
    }
    const auto n = static_cast<Eigen::Index>(data_.size());
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < candidate.size(); ++i) {
        gram += task_weighted(base_grams_[i], candidate[i].matrix(), data_.tasks());
    }
    gram.diagonal().array() += data_.noise_variance();
    const Eigen::MatrixXd l = robust_cholesky(gram, options_);
    Eigen::VectorXd alpha = l.triangularView<Eigen::Lower>().solve(data_.observations());
    l.triangularView<Eigen::Lower>().transpose().solveInPlace(alpha);
    return alpha;
}

Eigen::MatrixXd NuEvaluator::training_means(const CorrelationTuple& sigmas, const Eigen::VectorXd& alpha) const {
    const auto n = static_cast<Eigen::Index>(data_.size());
    const auto u = static_cast<Eigen::Index>(kernel_.tasks());
    Eigen::MatrixXd means = Eigen::MatrixXd::Zero(n, u);
    Eigen::MatrixXd w(n, u);
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        for (Eigen::Index m = 0; m < n; ++m) {
            const auto tm = static_cast<Eigen::Index>(data_.task(static_cast<std::size_t>(m)));
            w.row(m) = alpha[m] * sigmas[i].matrix().row(tm);
        }
        means.noalias() += base_grams_[i] * w;
    }
    return means;
}

double NuEvaluator::data_fit(const Eigen::MatrixXd& means) const {
    const Eigen::MatrixXd diff = means - means_nominal_;
    double total = 0.0;
    if (mode_ == DataFitMode::Full) {
        total = diff.squaredNorm();
    } else {
        for (Eigen::Index n = 0; n < diff.rows(); ++n) {
            const double d = diff(n, static_cast<Eigen::Index>(data_.task(static_cast<std::size_t>(n))));
            total += d * d;
        }
    }
    return total / data_.noise_variance();
}

double NuEvaluator::weighted_form(std::size_t feature, const Eigen::MatrixXd& weights, const Eigen::VectorXd& a,
                                  const Eigen::VectorXd& b) const {
    // a^T (K o T(A)) b = sum_m a_m sum_k A(t_m, t_k) K(m, k) b_k; grouping by the
    // task of k turns this into u matrix-vector products.
    const auto n = static_cast<Eigen::Index>(data_.size());
    const auto u = static_cast<Eigen::Index>(kernel_.tasks());
    Eigen::MatrixXd split_b = Eigen::MatrixXd::Zero(n, u);
    for (Eigen::Index k = 0; k < n; ++k) {
        split_b(k, static_cast<Eigen::Index>(data_.task(static_cast<std::size_t>(k)))) = b[k];
    }
    const Eigen::MatrixXd kb = base_grams_[feature] * split_b;  // n x u
    double total = 0.0;
    for (Eigen::Index m = 0; m < n; ++m) {
        const auto tm = static_cast<Eigen::Index>(data_.task(static_cast<std::size_t>(m)));
        total += a[m] * weights.row(tm).dot(kb.row(m));
    }
    return total;
}

NuTerms NuEvaluator::terms(const CorrelationTuple& candidate) const {
    check_tuple(candidate, kernel_, "nu");
    const Eigen::VectorXd alpha = solve_alpha(candidate);
    NuTerms t;
    t.rkhs = nominal_rkhs_;
    for (std::size_t i = 0; i < candidate.size(); ++i) {
        const Eigen::MatrixXd& s = candidate[i].matrix();
        const Eigen::MatrixXd sandwich = s * nominal_inverse_[i] * s;
        t.rkhs -= 2.0 * weighted_form(i, s, alpha_nominal_, alpha);
        t.rkhs += weighted_form(i, 0.5 * (sandwich + sandwich.transpose()), alpha, alpha);
    }
    const Eigen::MatrixXd means = training_means(candidate, alpha);
    t.data_fit = data_fit(means);
    return t;
}

NuTerms nu_terms(const CorrelationTuple& candidate, const CorrelationTuple& nominal, const TaskedDataset& data,
                 const LMCKernel& kernel_template, const FitOptions& options, DataFitMode mode) {
    return NuEvaluator(kernel_template, data, nominal, options, mode).terms(candidate);
}

double nu_single(const CorrelationTuple& candidate, const CorrelationTuple& nominal, const TaskedDataset& data,
                 const LMCKernel& kernel_template, const FitOptions& options, DataFitMode mode) {
    return nu_terms(candidate, nominal, data, kernel_template, options, mode).value();
}

namespace {

std::vector<double> flatten(const CorrelationTuple& t) {
    std::vector<double> out;
    for (const auto& m : t) {
        out.insert(out.end(), m.matrix().data(), m.matrix().data() + m.matrix().size());
    }
    return out;
}

}  // namespace

double nu_max(const CorrelationSet& set, const NuEvaluator& evaluator) {
    if (set.members.empty()) {
        throw std::invalid_argument("nu_max: confidence set is empty");
    }
    std::set<std::vector<double>> seen;
    seen.insert(flatten(set.nominal));
    double best = 0.0;
    for (const auto& member : set.members) {
        if (!seen.insert(flatten(member)).second) {
            continue;
        }
        best = std::max(best, evaluator.nu(member));
    }
    return best;
}

double nu_max(const CorrelationSet& set, const TaskedDataset& data, const LMCKernel& kernel_template,
              const FitOptions& options, DataFitMode mode) {
    return nu_max(set, NuEvaluator(kernel_template, data, set.nominal, options, mode));
}

double correlation_ratio_norm(const CorrelationMatrix& candidate, const CorrelationMatrix& nominal) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(nominal.matrix());
    if (!lu.isInvertible()) {
        throw NumericalError("gamma: nominal matrix is singular");
    }
    if (candidate.matrix() == nominal.matrix()) {
        return 1.0;
    }
    const Eigen::MatrixXd ratio = candidate.matrix() * lu.inverse();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(ratio);
    return svd.singularValues()[0];
}

std::vector<double> per_feature_gamma(const CorrelationSet& set) {
    if (set.members.empty()) {
        throw std::invalid_argument("gamma: confidence set is empty");
    }
    std::vector<double> out(set.nominal.size(), 0.0);
    for (const auto& member : set.members) {
        if (member.size() != set.nominal.size()) {
            throw std::invalid_argument("gamma: member and nominal tuples differ in size");
        }
        for (std::size_t i = 0; i < member.size(); ++i) {
            out[i] = std::max(out[i], correlation_ratio_norm(member[i], set.nominal[i]));
        }
    }
    for (auto& g : out) {
        g = std::sqrt(g);
    }
    return out;
}

double gamma(const CorrelationSet& set) {
    // Below one the variance comparison fails: the noise term is not rescaled
    // along with the kernel. Sets that contain their nominal never reach this.
    const auto per = per_feature_gamma(set);
    return std::max(1.0, *std::max_element(per.begin(), per.end()));
}

RobustBound compute_robust_bound(const CorrelationSet& set, const NuEvaluator& evaluator, const BoundInputs& inputs) {
    const double b = beta(inputs.grid_cardinality, inputs.delta);
    RobustBound bound = robust_beta(nu_max(set, evaluator), gamma(set), b);
    bound.psi = psi(inputs.budget, b);
    bound.grid_cardinality = inputs.grid_cardinality;
    bound.delta = inputs.delta;
    return bound;
}

void write_bound_header(std::ostream& out) {
    out << "iteration,beta,nu,gamma,psi,beta_bar\n";
}

void write_bound_row(std::ostream& out, std::size_t iteration, const RobustBound& bound) {
    out << iteration << ',' << csv::format(bound.beta) << ',' << csv::format(bound.nu) << ',' << csv::format(bound.gamma)
        << ',' << csv::format(bound.psi) << ',' << csv::format(bound.beta_bar) << '\n';
}

}  // namespace lmcsafe
