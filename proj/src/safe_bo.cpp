#include "lmcsafe/safe_bo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>

#include "lmcsafe/csv.hpp"
#include "lmcsafe/sobol.hpp"

namespace lmcsafe {

std::string to_string(Method m) {
    switch (m) {
        case Method::LMC:
            return "LMC";
        case Method::ICM:
            return "ICM";
        case Method::SingleTask:
            return "SingleTask";
    }
    return "unknown";
}

Method method_from_string(const std::string& name) {
    if (name == "LMC") {
        return Method::LMC;
    }
    if (name == "ICM") {
        return Method::ICM;
    }
    if (name == "SingleTask") {
        return Method::SingleTask;
    }
    throw std::invalid_argument("unknown method '" + name + "' (expected LMC, ICM or SingleTask)");
}

namespace {

std::size_t prior_tasks(const FeaturePrior& p) {
    if (const auto* fixed = std::get_if<CorrelationMatrix>(&p)) {
        return fixed->tasks();
    }
    return static_cast<std::size_t>(std::get<LKJPrior>(p).variances.size());
}

CorrelationMatrix prior_center(const FeaturePrior& p) {
    if (const auto* fixed = std::get_if<CorrelationMatrix>(&p)) {
        return *fixed;
    }
    const Eigen::VectorXd& v = std::get<LKJPrior>(p).variances;
    return CorrelationMatrix(Eigen::MatrixXd(v.asDiagonal()));
}

double main_diagonal(const FeaturePrior& p) {
    if (const auto* fixed = std::get_if<CorrelationMatrix>(&p)) {
        return (*fixed)(0, 0);
    }
    return std::get<LKJPrior>(p).variances[0];
}

}  // namespace

ModelSpec make_model(Method method, const std::vector<SEKernelParams>& bases, const PriorSpec& lmc_prior,
                     double noise_variance, const ICMKernelRule& icm_rule) {
    if (bases.empty() || bases.size() != lmc_prior.features()) {
        throw std::invalid_argument("make_model: need one prior per base kernel");
    }
    const std::size_t u = prior_tasks(lmc_prior.feature(0));
    ModelSpec spec;
    spec.noise_variance = noise_variance;
    switch (method) {
        case Method::LMC: {
            std::vector<LMCFeature> features;
            for (std::size_t i = 0; i < bases.size(); ++i) {
                if (prior_tasks(lmc_prior.feature(i)) != u) {
                    throw std::invalid_argument("make_model: features disagree on the number of tasks");
                }
                features.push_back({bases[i], prior_center(lmc_prior.feature(i))});
            }
            spec.kernel = LMCKernel(std::move(features));
            spec.prior = lmc_prior;
            break;
        }
        case Method::ICM: {
            std::size_t source = 0;
            for (std::size_t i = 0; i < lmc_prior.features(); ++i) {
                if (!lmc_prior.is_fixed(i)) {
                    source = i;
                    break;
                }
            }
            SEKernelParams base = bases[0];
            if (icm_rule.lengthscale == "min") {
                for (const auto& b : bases) {
                    base.lengthscales = base.lengthscales.cwiseMin(b.lengthscales);
                }
            } else if (icm_rule.lengthscale != "first") {
                throw std::invalid_argument("make_model: icm lengthscale rule must be 'min' or 'first'");
            }
            if (icm_rule.variance == "sum") {
                base.signal_variance = 0.0;
                for (const auto& b : bases) {
                    base.signal_variance += b.signal_variance;
                }
            } else if (icm_rule.variance != "first") {
                throw std::invalid_argument("make_model: icm variance rule must be 'sum' or 'first'");
            }
            spec.kernel = LMCKernel({LMCFeature{base, prior_center(lmc_prior.feature(source))}});
            spec.prior = PriorSpec({lmc_prior.feature(source)});
            break;
        }
        case Method::SingleTask: {
            std::vector<LMCFeature> features;
            std::vector<FeaturePrior> priors;
            for (std::size_t i = 0; i < bases.size(); ++i) {
                CorrelationMatrix m(Eigen::MatrixXd::Constant(1, 1, main_diagonal(lmc_prior.feature(i))));
                features.push_back({bases[i], m});
                priors.emplace_back(m);
            }
            spec.kernel = LMCKernel(std::move(features));
            spec.prior = PriorSpec(std::move(priors));
            break;
        }
    }
    return spec;
}

std::vector<double> BOHistory::main_regret() const {
    std::vector<double> out;
    for (const auto& r : records) {
        if (r.task == 0) {
            out.push_back(r.regret);
        }
    }
    return out;
}

namespace {

bool lex_less(const Eigen::MatrixXd& c, std::size_t a, std::size_t b) {
    const auto ra = static_cast<Eigen::Index>(a);
    const auto rb = static_cast<Eigen::Index>(b);
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
        if (c(ra, j) != c(rb, j)) {
            return c(ra, j) < c(rb, j);
        }
    }
    return false;
}

/// Rows of the candidate matrix that coincide with a main-task input whose
/// observation met the threshold.
std::vector<bool> certified_rows(const TaskedDataset& data, const Eigen::MatrixXd& candidates, double threshold,
                                 std::size_t main_task) {
    std::vector<bool> out(static_cast<std::size_t>(candidates.rows()), false);
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (data.task(n) != main_task || data.observation(n) > threshold) {
            continue;
        }
        const Eigen::VectorXd x = data.input(n);
        for (Eigen::Index q = 0; q < candidates.rows(); ++q) {
            if (candidates.row(q).transpose() == x) {
                out[static_cast<std::size_t>(q)] = true;
            }
        }
    }
    return out;
}

std::vector<std::size_t> safe_from_prediction(const TaskPrediction& pred, const RobustBound& bound, double threshold,
                                              const std::vector<bool>& certified) {
    const double scale = std::sqrt(bound.beta_bar);
    std::vector<std::size_t> out;
    for (Eigen::Index q = 0; q < pred.mean.size(); ++q) {
        const double ucb = pred.mean[q] + scale * std::sqrt(pred.variance[q]) + bound.psi;
        if (ucb <= threshold || certified[static_cast<std::size_t>(q)]) {
            out.push_back(static_cast<std::size_t>(q));
        }
    }
    return out;
}

std::size_t argmin_lcb(const TaskPrediction& pred, const RobustBound& bound, const Eigen::MatrixXd& candidates,
                       const std::vector<std::size_t>& safe) {
    if (safe.empty()) {
        throw std::invalid_argument("acquire_main: the safe set is empty");
    }
    const double scale = std::sqrt(bound.beta_bar);
    std::size_t best = safe.front();
    double best_lcb = std::numeric_limits<double>::infinity();
    double best_sd = 0.0;
    for (auto q : safe) {
        const auto i = static_cast<Eigen::Index>(q);
        const double sd = std::sqrt(pred.variance[i]);
        const double lcb = pred.mean[i] - scale * sd;
        const bool better = lcb < best_lcb || (lcb == best_lcb && (sd > best_sd || (sd == best_sd && lex_less(candidates, q, best))));
        if (better) {
            best = q;
            best_lcb = lcb;
            best_sd = sd;
        }
    }
    return best;
}

std::size_t argmax_variance(const Eigen::VectorXd& variance, const Eigen::MatrixXd& candidates) {
    std::size_t best = 0;
    for (Eigen::Index q = 1; q < variance.size(); ++q) {
        const auto b = static_cast<Eigen::Index>(best);
        if (variance[q] > variance[b] || (variance[q] == variance[b] && lex_less(candidates, static_cast<std::size_t>(q), best))) {
            best = static_cast<std::size_t>(q);
        }
    }
    return best;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

std::vector<std::size_t> safe_set(const PosteriorModel& model, const RobustBound& bound, double threshold,
                                  const Eigen::MatrixXd& candidates, std::size_t main_task) {
    const TaskPrediction pred = model.predict_task(candidates, main_task);
    return safe_from_prediction(pred, bound, threshold, certified_rows(model.data(), candidates, threshold, main_task));
}

std::size_t acquire_main(const PosteriorModel& model, const RobustBound& bound, const Eigen::MatrixXd& candidates,
                         const std::vector<std::size_t>& safe, std::size_t main_task) {
    if (safe.empty()) {
        throw std::invalid_argument("acquire_main: the safe set is empty");
    }
    return argmin_lcb(model.predict_task(candidates, main_task), bound, candidates, safe);
}

std::size_t acquire_supplementary(const PosteriorModel& model, const Eigen::MatrixXd& candidates, std::size_t task) {
    if (candidates.rows() == 0) {
        throw std::invalid_argument("acquire_supplementary: no candidates");
    }
    return argmax_variance(model.predict_task(candidates, task).variance, candidates);
}

std::vector<std::size_t> acquire_supplementary_batch(const PosteriorModel& model, const Eigen::MatrixXd& candidates,
                                                     std::size_t count, std::size_t task) {
    if (candidates.rows() == 0) {
        throw std::invalid_argument("acquire_supplementary: no candidates");
    }
    const LMCKernel& kernel = model.kernel();
    const Eigen::Index q = candidates.rows();
    const double prior = kernel.prior_variance(task);
    Eigen::MatrixXd w;
    Eigen::VectorXd variance = Eigen::VectorXd::Constant(q, prior);
    if (!model.data().empty()) {
        w = model.whitened_cross(candidates, task);
        variance -= w.colwise().squaredNorm().transpose();
    }
    variance = variance.cwiseMax(0.0);
    const double noise = model.data().noise_variance();

    std::vector<Eigen::VectorXd> downdates;
    std::vector<std::size_t> picks;
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t j = argmax_variance(variance, candidates);
        picks.push_back(j);
        if (k + 1 == count) {
            break;
        }
        const auto jj = static_cast<Eigen::Index>(j);
        const Eigen::VectorXd xj = candidates.row(jj).transpose();
        Eigen::VectorXd cov(q);
        for (Eigen::Index c = 0; c < q; ++c) {
            cov[c] = lmc_eval(kernel, candidates.row(c).transpose(), xj, task, task);
        }
        if (w.size() > 0) {
            cov.noalias() -= w.transpose() * w.col(jj);
        }
        for (const auto& v : downdates) {
            cov -= v * v[jj];
        }
        const double denom = std::max(cov[jj], 0.0) + noise;
        Eigen::VectorXd v = cov / std::sqrt(denom);
        variance = (variance - v.cwiseProduct(v)).cwiseMax(0.0);
        downdates.push_back(std::move(v));
    }
    return picks;
}

std::optional<Eigen::VectorXd> find_initial_safe_input(const SyntheticFunction& f, double threshold, double margin,
                                                       std::uint64_t seed, std::size_t max_draws) {
    SobolSequence sobol(f.domain().dim(), seed);
    const std::size_t batch = 256;
    for (std::size_t drawn = 0; drawn < max_draws; drawn += batch) {
        const Eigen::MatrixXd u = sobol.next(batch);
        for (Eigen::Index r = 0; r < u.rows(); ++r) {
            const Eigen::VectorXd x = f.domain().from_unit(u.row(r).transpose());
            if (f.evaluate(x, 0) <= threshold - margin) {
                return x;
            }
        }
    }
    return std::nullopt;
}

namespace {

void validate(const BOConfig& config, const SyntheticFunction& objective, const ModelSpec& model) {
    const std::size_t d = config.domain.dim();
    if (d == 0 || objective.domain().dim() != d || model.kernel.features() == 0 || model.kernel.dim() != d) {
        throw std::invalid_argument("run: domain, objective and model dimensions disagree");
    }
    if (!objective.optimum()) {
        throw std::invalid_argument("run: the objective optimum has not been located");
    }
    if (model.kernel.tasks() > objective.kernel().tasks()) {
        throw std::invalid_argument("run: the model has more tasks than the objective");
    }
    if (model.prior.features() != model.kernel.features()) {
        throw std::invalid_argument("run: prior and kernel disagree on the number of features");
    }
    if (config.initial_safe_inputs.empty()) {
        throw std::invalid_argument("run: at least one initial safe input is required");
    }
    for (const auto& x : config.initial_safe_inputs) {
        if (static_cast<std::size_t>(x.size()) != d || !config.domain.contains(x)) {
            throw std::invalid_argument("run: initial safe inputs must lie in the domain");
        }
    }
    if (!(config.delta > 0.0 && config.delta < 1.0) || !(config.rho > 0.0 && config.rho < 1.0)) {
        throw std::invalid_argument("run: delta and rho must lie in (0, 1)");
    }
    if (config.candidate_count == 0) {
        throw std::invalid_argument("run: candidate_count must be positive");
    }
}

}  // namespace

BOHistory run(const BOConfig& config, const SyntheticFunction& objective, const ModelSpec& model) {
    validate(config, objective, model);
    const std::size_t d = config.domain.dim();
    const std::size_t u = model.kernel.tasks();
    const bool multi = u > 1;
    constexpr std::size_t kMain = 0;
    constexpr std::size_t kSupplementary = 1;

    BOHistory history;
    history.dim = d;
    history.optimum_value = objective.optimum()->value;

    std::mt19937_64 noise_rng(derive_seed(config.seed, 1, 0));
    std::normal_distribution<double> normal(0.0, 1.0);
    SobolSequence candidate_stream(d, derive_seed(config.seed, 2, 0));
    SobolSequence initial_stream(d, derive_seed(config.seed, 3, 0));

    TaskedDataset data(d, u, model.noise_variance);
    double incumbent = std::numeric_limits<double>::infinity();

    const double base_beta = beta(grid_cardinality(config.domain, config.tau), config.delta);
    RobustBound bound = robust_beta(0.0, 1.0, base_beta);
    bound.psi = psi(config.budget, base_beta);
    bound.grid_cardinality = grid_cardinality(config.domain, config.tau);
    bound.delta = config.delta;

    auto observe = [&](const Eigen::VectorXd& x, std::size_t task, std::size_t iteration, bool safe_predicted) {
        const double truth = objective.evaluate(x, task);
        const double y = config.observation_noise > 0.0 ? truth + config.observation_noise * normal(noise_rng) : truth;
        if (!std::isfinite(y)) {
            throw NumericalError("objective returned a non-finite value");
        }
        data.add(x, task, y);
        const bool violation = task == kMain && truth > config.threshold;
        if (task == kMain) {
            if (violation) {
                ++history.violation_count;
            } else {
                incumbent = std::min(incumbent, truth);
            }
        }
        HistoryRecord rec;
        rec.iteration = iteration;
        rec.task = task;
        rec.x = x;
        rec.observation = y;
        rec.true_value = truth;
        rec.safe_predicted = safe_predicted;
        rec.violation = violation;
        rec.bound = bound;
        rec.incumbent = incumbent;
        rec.regret = incumbent - history.optimum_value;
        history.records.push_back(std::move(rec));
    };

    std::vector<Eigen::VectorXd> chain_state;
    try {
        for (const auto& x : config.initial_safe_inputs) {
            observe(x, kMain, 0, true);
        }
        if (multi && config.initial_supplementary > 0) {
            const Eigen::MatrixXd pts = initial_stream.next(config.initial_supplementary);
            for (Eigen::Index r = 0; r < pts.rows(); ++r) {
                observe(config.domain.from_unit(pts.row(r).transpose()), kSupplementary, 0, false);
            }
        }

        const FitOptions fit_options = config.mcmc.fit;
        for (std::size_t it = 1; it <= config.max_main_evals; ++it) {
            IterationDiagnostics diag;
            diag.iteration = it;

            CorrelationSet set;
            std::shared_ptr<const AffineGramSolver> affine;
            std::size_t affine_feature = 0;
            if (model.prior.free_features() > 0) {
                MCMCOptions mcmc = config.mcmc;
                mcmc.seed = derive_seed(config.seed, 4, it);
                if (config.warm_start) {
                    mcmc.initial_state = chain_state;
                }
                if (u == 2 && model.prior.free_features() == 1) {
                    for (std::size_t i = 0; i < model.prior.features(); ++i) {
                        if (!model.prior.is_fixed(i)) {
                            affine_feature = i;
                        }
                    }
                    std::vector<Eigen::VectorXd> z0(model.prior.features(), Eigen::VectorXd::Zero(1));
                    const LMCKernel k0 = model.kernel.with_correlations(correlations_from_state(model.prior, z0, u));
                    if (auto solver = make_offdiagonal_solver(k0, affine_feature, data, fit_options)) {
                        affine = std::make_shared<const AffineGramSolver>(std::move(*solver));
                    }
                    mcmc.affine_solver = affine;
                }
                MCMCResult chain = mh_sample(data, model.kernel, model.prior, mcmc);
                for (auto& w : chain.warnings) {
                    history.warnings.push_back("iteration " + std::to_string(it) + ": " + w);
                }
                diag.acceptance_rate = chain.acceptance_rate;
                chain_state = chain.samples.back().z;
                set = build_confidence_set(chain.samples, config.rho);
            } else {
                set.members = {model.kernel.correlations()};
                set.posterior_scores = {0.0};
                set.nominal = set.members.front();
                set.rho = config.rho;
            }
            diag.set_size = set.members.size();

            const LMCKernel nominal_kernel = model.kernel.with_correlations(set.nominal);
            const PosteriorModel posterior(nominal_kernel, data, fit_options);
            NuEvaluator evaluator(model.kernel, data, set.nominal, fit_options, config.nu_data_fit);
            if (affine) {
                evaluator.use_affine_solver(affine, affine_feature);
            }
            bound = compute_robust_bound(set, evaluator, {bound.grid_cardinality, config.delta, config.budget});
            diag.bound = bound;
            diag.feature_gamma = per_feature_gamma(set);
            if (u >= 2) {
                const auto r01 = [](const CorrelationMatrix& m) { return m(0, 1) / std::sqrt(m(0, 0) * m(1, 1)); };
                for (std::size_t i = 0; i < set.nominal.size(); ++i) {
                    diag.nominal_r.push_back(r01(set.nominal[i]));
                    double lo = std::numeric_limits<double>::infinity();
                    double hi = -lo;
                    for (const auto& member : set.members) {
                        lo = std::min(lo, r01(member[i]));
                        hi = std::max(hi, r01(member[i]));
                    }
                    diag.set_r_min.push_back(lo);
                    diag.set_r_max.push_back(hi);
                }
            }

            Eigen::MatrixXd unit = candidate_stream.next(config.candidate_count);
            const Eigen::MatrixXd evaluated = data.inputs();
            Eigen::MatrixXd candidates(unit.rows() + evaluated.rows(), static_cast<Eigen::Index>(d));
            for (Eigen::Index r = 0; r < unit.rows(); ++r) {
                candidates.row(r) = config.domain.from_unit(unit.row(r).transpose()).transpose();
            }
            candidates.bottomRows(evaluated.rows()) = evaluated;

            const TaskPrediction pred = posterior.predict_task(candidates, kMain);
            const std::vector<std::size_t> safe =
                safe_from_prediction(pred, bound, config.threshold, certified_rows(data, candidates, config.threshold, kMain));
            diag.safe_count = safe.size();
            diag.safe_set_empty = safe.empty();
            if (safe.empty()) {
                // No certified input: re-evaluate the best observed main input.
                std::size_t best = 0;
                double best_y = std::numeric_limits<double>::infinity();
                for (std::size_t n = 0; n < data.size(); ++n) {
                    if (data.task(n) == kMain && data.observation(n) < best_y) {
                        best_y = data.observation(n);
                        best = n;
                    }
                }
                observe(data.input(best), kMain, it, false);
            } else {
                const std::size_t pick = argmin_lcb(pred, bound, candidates, safe);
                observe(candidates.row(static_cast<Eigen::Index>(pick)).transpose(), kMain, it, true);
            }
            history.diagnostics.push_back(std::move(diag));

            if (multi && config.fidelity_ratio > 0) {
                const PosteriorModel refreshed(nominal_kernel, data, fit_options);
                const auto picks = acquire_supplementary_batch(refreshed, candidates, config.fidelity_ratio, kSupplementary);
                for (auto p : picks) {
                    observe(candidates.row(static_cast<Eigen::Index>(p)).transpose(), kSupplementary, it, false);
                }
            }
        }
    } catch (const std::exception& e) {
        history.error = e.what();
    }
    return history;
}

void write_history_csv(std::ostream& out, const BOHistory& history) {
    out << "iteration,task";
    for (std::size_t j = 1; j <= history.dim; ++j) {
        out << ",x_" << j;
    }
    out << ",observation,safe_predicted,beta,nu,gamma,beta_bar,incumbent,regret,violation\n";
    for (const auto& r : history.records) {
        out << r.iteration << ',' << r.task;
        for (Eigen::Index j = 0; j < r.x.size(); ++j) {
            out << ',' << csv::format(r.x[j]);
        }
        out << ',' << csv::format(r.observation) << ',' << (r.safe_predicted ? 1 : 0) << ',' << csv::format(r.bound.beta)
            << ',' << csv::format(r.bound.nu) << ',' << csv::format(r.bound.gamma) << ',' << csv::format(r.bound.beta_bar)
            << ',' << csv::format(r.incumbent) << ',' << csv::format(r.regret) << ',' << (r.violation ? 1 : 0) << '\n';
    }
}

void write_diagnostics_csv(std::ostream& out, const BOHistory& history) {
    const std::size_t h = history.diagnostics.empty() ? 0 : history.diagnostics.front().feature_gamma.size();
    out << "iteration,beta,nu,gamma,psi,beta_bar";
    for (std::size_t i = 1; i <= h; ++i) {
        out << ",gamma_feature_" << i;
    }
    const std::size_t hr = history.diagnostics.empty() ? 0 : history.diagnostics.front().nominal_r.size();
    for (std::size_t i = 1; i <= hr; ++i) {
        out << ",nominal_r_feature_" << i << ",r_min_feature_" << i << ",r_max_feature_" << i;
    }
    out << ",acceptance_rate,set_size,safe_count\n";
    for (const auto& d : history.diagnostics) {
        out << d.iteration << ',' << csv::format(d.bound.beta) << ',' << csv::format(d.bound.nu) << ','
            << csv::format(d.bound.gamma) << ',' << csv::format(d.bound.psi) << ',' << csv::format(d.bound.beta_bar);
        for (double g : d.feature_gamma) {
            out << ',' << csv::format(g);
        }
        for (std::size_t i = 0; i < d.nominal_r.size(); ++i) {
            out << ',' << csv::format(d.nominal_r[i]) << ',' << csv::format(d.set_r_min[i]) << ','
                << csv::format(d.set_r_max[i]);
        }
        out << ',' << csv::format(d.acceptance_rate) << ',' << d.set_size << ',' << d.safe_count << '\n';
    }
}

}  // namespace lmcsafe
