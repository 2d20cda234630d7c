#include "lmcsafe/correlation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "lmcsafe/csv.hpp"

namespace lmcsafe {

namespace {

constexpr double kMaxAbsCorrelation = 1.0 - 1e-12;

/// log(1 - tanh(z)^2) without cancellation.
double log_one_minus_tanh_sq(double z) {
    const double a = std::abs(z);
    return -2.0 * (a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0));
}

double clipped_tanh(double z) {
    return std::clamp(std::tanh(z), -kMaxAbsCorrelation, kMaxAbsCorrelation);
}

}  // namespace

PriorSpec::PriorSpec(std::vector<FeaturePrior> features) : features_(std::move(features)) {
    for (const auto& f : features_) {
        if (const auto* lkj = std::get_if<LKJPrior>(&f)) {
            if (!(lkj->eta > 0.0)) {
                throw std::invalid_argument("PriorSpec: LKJ eta must be positive");
            }
            if (lkj->variances.size() == 0 || (lkj->variances.array() <= 0.0).any()) {
                throw std::invalid_argument("PriorSpec: LKJ variances must be positive");
            }
        }
    }
}

std::size_t PriorSpec::free_features() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < features_.size(); ++i) {
        n += is_fixed(i) ? 0 : 1;
    }
    return n;
}

double lkj_log_density(const CorrelationMatrix& c, double eta) {
    if (!(eta > 0.0)) {
        throw std::invalid_argument("lkj_log_density: eta must be positive");
    }
    if ((c.matrix().diagonal().array() - 1.0).abs().maxCoeff() > 1e-10) {
        throw std::invalid_argument("lkj_log_density: matrix must have a unit diagonal");
    }
    if (eta == 1.0) {
        return 0.0;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(c.matrix());
    const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return (eta - 1.0) * log_det;
}

std::size_t cpc_count(std::size_t tasks) {
    return tasks * (tasks - 1) / 2;
}

Eigen::MatrixXd correlation_from_cpc_z(const Eigen::VectorXd& z, std::size_t tasks) {
    if (static_cast<std::size_t>(z.size()) != cpc_count(tasks)) {
        throw std::invalid_argument("correlation_from_cpc_z: wrong number of coordinates");
    }
    const auto u = static_cast<Eigen::Index>(tasks);
    // Upper-triangular W with unit-norm columns; C = W^T W.
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(u, u);
    w(0, 0) = 1.0;
    Eigen::MatrixXd cpc = Eigen::MatrixXd::Zero(u, u);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < u; ++i) {
        for (Eigen::Index j = i + 1; j < u; ++j) {
            cpc(i, j) = clipped_tanh(z[k++]);
        }
    }
    for (Eigen::Index j = 1; j < u; ++j) {
        double remaining = 1.0;
        for (Eigen::Index i = 0; i < j; ++i) {
            w(i, j) = cpc(i, j) * std::sqrt(remaining);
            remaining -= w(i, j) * w(i, j);
        }
        w(j, j) = std::sqrt(std::max(remaining, 0.0));
    }
    Eigen::MatrixXd c = w.transpose() * w;
    c.diagonal().setOnes();
    return 0.5 * (c + c.transpose());
}

double lkj_log_density_z(const Eigen::VectorXd& z, std::size_t tasks, double eta) {
    if (static_cast<std::size_t>(z.size()) != cpc_count(tasks)) {
        throw std::invalid_argument("lkj_log_density_z: wrong number of coordinates");
    }
    // CPCs in row i are Beta(b_i, b_i) on (-1, 1) with b_i = eta + (u - 2 - i) / 2;
    // the tanh Jacobian adds one power of (1 - r^2).
    double lp = 0.0;
    Eigen::Index k = 0;
    const auto u = static_cast<Eigen::Index>(tasks);
    for (Eigen::Index i = 0; i < u; ++i) {
        const double b = eta + 0.5 * static_cast<double>(u - 2 - i);
        for (Eigen::Index j = i + 1; j < u; ++j) {
            lp += b * log_one_minus_tanh_sq(z[k++]);
        }
    }
    return lp;
}

CorrelationTuple correlations_from_state(const PriorSpec& prior, const std::vector<Eigen::VectorXd>& z, std::size_t tasks) {
    CorrelationTuple out;
    out.reserve(prior.features());
    for (std::size_t i = 0; i < prior.features(); ++i) {
        if (const auto* fixed = std::get_if<CorrelationMatrix>(&prior.feature(i))) {
            out.push_back(*fixed);
            continue;
        }
        const auto& lkj = std::get<LKJPrior>(prior.feature(i));
        if (static_cast<std::size_t>(lkj.variances.size()) != tasks) {
            throw std::invalid_argument("correlations_from_state: LKJ variances must have one entry per task");
        }
        const Eigen::VectorXd d = lkj.variances.cwiseSqrt();
        out.emplace_back(d.asDiagonal() * correlation_from_cpc_z(z.at(i), tasks) * d.asDiagonal());
    }
    return out;
}

namespace {

/// Log target of the sampler for one state.
class ChainTarget {
public:
    ChainTarget(const TaskedDataset& data, const LMCKernel& kernel_template, const PriorSpec& prior, const FitOptions& fit,
                std::shared_ptr<const AffineGramSolver> shared)
        : data_(data), kernel_(kernel_template), prior_(prior), fit_(fit) {
        const std::size_t u = kernel_template.tasks();
        if (prior.free_features() == 1 && u == 2) {
            for (std::size_t i = 0; i < prior.features(); ++i) {
                if (!prior.is_fixed(i)) {
                    affine_feature_ = i;
                }
            }
            const auto& lkj = std::get<LKJPrior>(prior.feature(affine_feature_));
            affine_scale_ = std::sqrt(lkj.variances[0] * lkj.variances[1]);
            if (shared && shared->size() == data.size()) {
                affine_ = std::move(shared);
                return;
            }
            std::vector<Eigen::VectorXd> z0(prior.features(), Eigen::VectorXd::Zero(1));
            const LMCKernel k0 = kernel_.with_correlations(correlations_from_state(prior_, z0, u));
            if (auto solver = make_offdiagonal_solver(k0, affine_feature_, data_, fit_)) {
                affine_ = std::make_shared<const AffineGramSolver>(std::move(*solver));
            }
        }
    }

    double log_likelihood(const std::vector<Eigen::VectorXd>& z, const CorrelationTuple& sigmas) const {
        if (affine_) {
            return affine_->log_marginal_likelihood(clipped_tanh(z[affine_feature_][0]) * affine_scale_);
        }
        try {
            return log_marginal_likelihood(kernel_.with_correlations(sigmas), data_, fit_);
        } catch (const NumericalError&) {
            return -std::numeric_limits<double>::infinity();
        }
    }

    double log_prior(const std::vector<Eigen::VectorXd>& z) const {
        double lp = 0.0;
        for (std::size_t i = 0; i < prior_.features(); ++i) {
            if (const auto* lkj = std::get_if<LKJPrior>(&prior_.feature(i))) {
                lp += lkj_log_density_z(z[i], kernel_.tasks(), lkj->eta);
            }
        }
        return lp;
    }

private:
    const TaskedDataset& data_;
    const LMCKernel& kernel_;
    const PriorSpec& prior_;
    FitOptions fit_;
    std::shared_ptr<const AffineGramSolver> affine_;
    std::size_t affine_feature_ = 0;
    double affine_scale_ = 1.0;
};

double trace_r(const CorrelationMatrix& m) {
    if (m.tasks() < 2) {
        return 0.0;
    }
    return m(0, 1) / std::sqrt(m(0, 0) * m(1, 1));
}

}  // namespace

MCMCResult mh_sample(const TaskedDataset& data, const LMCKernel& kernel_template, const PriorSpec& prior,
                     const MCMCOptions& options) {
    if (data.empty()) {
        throw std::invalid_argument("mh_sample: data must be nonempty");
    }
    if (prior.features() != kernel_template.features()) {
        throw std::invalid_argument("mh_sample: prior and kernel disagree on the number of features");
    }
    if (prior.free_features() == 0) {
        throw std::invalid_argument("mh_sample: every feature is fixed, nothing to sample");
    }
    if (options.n_samples == 0 || options.thinning == 0) {
        throw std::invalid_argument("mh_sample: n_samples and thinning must be positive");
    }
    const std::size_t u = kernel_template.tasks();
    const std::size_t h = prior.features();
    const std::size_t p = cpc_count(u);

    std::vector<Eigen::VectorXd> z(h);
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < h; ++i) {
        if (prior.is_fixed(i)) {
            continue;
        }
        free.push_back(i);
        if (i < options.initial_state.size() && static_cast<std::size_t>(options.initial_state[i].size()) == p) {
            z[i] = options.initial_state[i];
        } else {
            z[i] = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
        }
    }

    ChainTarget target(data, kernel_template, prior, options.fit, options.affine_solver);
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    CorrelationTuple sigmas = correlations_from_state(prior, z, u);
    double log_lik = target.log_likelihood(z, sigmas);
    double log_prior = target.log_prior(z);

    MCMCResult result;
    std::vector<double> log_step(h, std::log(options.initial_step));
    std::size_t accepted_after_burn = 0;
    std::size_t proposals_after_burn = 0;
    const std::size_t total_steps = options.burn_in + options.n_samples * options.thinning;
    result.samples.reserve(options.n_samples);

    for (std::size_t step = 0; step < total_steps; ++step) {
        const bool burning = step < options.burn_in;
        for (auto i : free) {
            std::vector<Eigen::VectorXd> proposal = z;
            const double s = std::exp(log_step[i]);
            for (Eigen::Index k = 0; k < proposal[i].size(); ++k) {
                proposal[i][k] += s * normal(rng);
            }
            const CorrelationTuple prop_sigmas = correlations_from_state(prior, proposal, u);
            const double prop_lik = target.log_likelihood(proposal, prop_sigmas);
            const double prop_prior = target.log_prior(proposal);
            const double log_ratio = (prop_lik + prop_prior) - (log_lik + log_prior);
            const double draw = unif(rng);
            const bool accept = std::isfinite(prop_lik) && (log_ratio >= 0.0 || std::log(draw) < log_ratio);
            if (accept) {
                z = std::move(proposal);
                sigmas = prop_sigmas;
                log_lik = prop_lik;
                log_prior = prop_prior;
            }
            if (burning) {
                const double a = std::isfinite(log_ratio) ? std::min(1.0, std::exp(std::min(log_ratio, 0.0))) : 0.0;
                log_step[i] += (a - options.target_acceptance) / std::pow(static_cast<double>(step) + 1.0, 0.6);
            } else {
                ++proposals_after_burn;
                accepted_after_burn += accept ? 1 : 0;
            }
            if (options.record_trace) {
                result.trace.push_back({step, i, trace_r(sigmas[i]), log_lik + log_prior, accept});
            }
        }
        if (!burning && (step - options.burn_in + 1) % options.thinning == 0) {
            CorrelationSample sample;
            sample.sigmas = sigmas;
            sample.z = z;
            for (std::size_t i = 0; i < h; ++i) {
                if (prior.is_fixed(i)) {
                    sample.z[i].resize(0);
                }
            }
            sample.score = log_lik + log_prior;
            result.samples.push_back(std::move(sample));
        }
    }
    result.acceptance_rate =
        proposals_after_burn == 0 ? 0.0 : static_cast<double>(accepted_after_burn) / static_cast<double>(proposals_after_burn);
    for (auto i : free) {
        result.step_sizes.push_back(std::exp(log_step[i]));
    }
    if (accepted_after_burn == 0) {
        result.warnings.emplace_back("mh_sample: every proposal after burn-in was rejected (acceptance 0)");
    }
    return result;
}

MCMCResult mh_sample_chains(const TaskedDataset& data, const LMCKernel& kernel_template, const PriorSpec& prior,
                            const MCMCOptions& options, std::vector<std::uint64_t> seeds) {
    std::sort(seeds.begin(), seeds.end());
    MCMCResult merged;
    double accepted = 0.0;
    for (auto seed : seeds) {
        MCMCOptions o = options;
        o.seed = seed;
        MCMCResult r = mh_sample(data, kernel_template, prior, o);
        accepted += r.acceptance_rate;
        merged.samples.insert(merged.samples.end(), r.samples.begin(), r.samples.end());
        merged.trace.insert(merged.trace.end(), r.trace.begin(), r.trace.end());
        merged.warnings.insert(merged.warnings.end(), r.warnings.begin(), r.warnings.end());
        merged.step_sizes.insert(merged.step_sizes.end(), r.step_sizes.begin(), r.step_sizes.end());
    }
    merged.acceptance_rate = seeds.empty() ? 0.0 : accepted / static_cast<double>(seeds.size());
    return merged;
}

CorrelationSet build_confidence_set(const std::vector<CorrelationSample>& samples, double rho) {
    if (samples.empty()) {
        throw std::invalid_argument("build_confidence_set: samples must be nonempty");
    }
    if (!(rho > 0.0 && rho < 1.0)) {
        throw std::invalid_argument("build_confidence_set: rho must lie in (0, 1)");
    }
    const auto s = static_cast<double>(samples.size());
    // The small offset keeps exact products such as 0.95 * 100 from rounding up.
    auto keep = static_cast<std::size_t>(std::ceil((1.0 - rho) * s - 1e-9));
    keep = std::clamp<std::size_t>(keep, 1, samples.size());

    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return samples[a].score > samples[b].score; });

    CorrelationSet set;
    set.rho = rho;
    for (std::size_t k = 0; k < keep; ++k) {
        set.members.push_back(samples[order[k]].sigmas);
        set.posterior_scores.push_back(samples[order[k]].score);
    }
    set.nominal = set.members.front();
    return set;
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
    out << "step,feature,r,log_posterior,accepted\n";
    for (const auto& row : trace) {
        out << row.step << ',' << row.feature << ',' << csv::format(row.r) << ',' << csv::format(row.log_posterior) << ','
            << (row.accepted ? 1 : 0) << '\n';
    }
}

}  // namespace lmcsafe
