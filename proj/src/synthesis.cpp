#include "lmcsafe/synthesis.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "lmcsafe/csv.hpp"
#include "lmcsafe/sobol.hpp"

namespace lmcsafe {

SyntheticFunction::SyntheticFunction(LMCKernel kernel, std::vector<FeatureExpansion> features, Box domain)
    : kernel_(std::move(kernel)), features_(std::move(features)), domain_(std::move(domain)) {
    if (features_.size() != kernel_.features()) {
        throw std::invalid_argument("SyntheticFunction: one expansion per kernel feature is required");
    }
    if (domain_.dim() != kernel_.dim()) {
        throw std::invalid_argument("SyntheticFunction: domain and kernel dimensions disagree");
    }
    for (const auto& f : features_) {
        if (f.centers.rows() != f.coefficients.size() || f.center_tasks.size() != static_cast<std::size_t>(f.centers.rows()) ||
            static_cast<std::size_t>(f.centers.cols()) != kernel_.dim()) {
            throw std::invalid_argument("SyntheticFunction: malformed feature expansion");
        }
        for (auto t : f.center_tasks) {
            if (t >= kernel_.tasks()) {
                throw std::invalid_argument("SyntheticFunction: invalid center task");
            }
        }
    }
}

double SyntheticFunction::evaluate_feature(std::size_t i, const Eigen::Ref<const Eigen::VectorXd>& x,
                                           std::size_t task) const {
    const auto& fe = features_.at(i);
    const auto& base = kernel_.base(i);
    const auto& sigma = kernel_.correlation(i);
    double v = 0.0;
    for (Eigen::Index n = 0; n < fe.centers.rows(); ++n) {
        v += fe.coefficients[n] * sigma(task, fe.center_tasks[static_cast<std::size_t>(n)]) *
             se_eval(base, x, fe.centers.row(n).transpose());
    }
    return v;
}

double SyntheticFunction::evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) const {
    if (task >= kernel_.tasks()) {
        throw std::invalid_argument("SyntheticFunction::evaluate: invalid task index");
    }
    double v = 0.0;
    for (std::size_t i = 0; i < features_.size(); ++i) {
        v += evaluate_feature(i, x, task);
    }
    return v;
}

Eigen::VectorXd SyntheticFunction::gradient(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
    for (std::size_t i = 0; i < features_.size(); ++i) {
        const auto& fe = features_[i];
        const auto& base = kernel_.base(i);
        const Eigen::VectorXd inv_ls2 = base.lengthscales.cwiseProduct(base.lengthscales).cwiseInverse();
        for (Eigen::Index n = 0; n < fe.centers.rows(); ++n) {
            const Eigen::VectorXd diff = x - fe.centers.row(n).transpose();
            const double w = fe.coefficients[n] * kernel_.correlation(i)(task, fe.center_tasks[static_cast<std::size_t>(n)]) *
                             se_eval(base, x, fe.centers.row(n).transpose());
            g -= w * diff.cwiseProduct(inv_ls2);
        }
    }
    return g;
}

Eigen::MatrixXd SyntheticFunction::hessian(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) const {
    const Eigen::Index d = x.size();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t i = 0; i < features_.size(); ++i) {
        const auto& fe = features_[i];
        const auto& base = kernel_.base(i);
        const Eigen::VectorXd inv_ls2 = base.lengthscales.cwiseProduct(base.lengthscales).cwiseInverse();
        for (Eigen::Index n = 0; n < fe.centers.rows(); ++n) {
            const Eigen::VectorXd s = (x - fe.centers.row(n).transpose()).cwiseProduct(inv_ls2);
            const double w = fe.coefficients[n] * kernel_.correlation(i)(task, fe.center_tasks[static_cast<std::size_t>(n)]) *
                             se_eval(base, x, fe.centers.row(n).transpose());
            h += w * (s * s.transpose());
            h.diagonal() -= w * inv_ls2;
        }
    }
    return h;
}

double SyntheticFunction::computed_norm(std::size_t i) const {
    const auto& fe = features_.at(i);
    const Eigen::MatrixXd k = base_gram(kernel_.base(i), fe.centers);
    const auto& sigma = kernel_.correlation(i);
    double q = 0.0;
    for (Eigen::Index m = 0; m < k.cols(); ++m) {
        for (Eigen::Index n = 0; n < k.rows(); ++n) {
            q += fe.coefficients[n] * fe.coefficients[m] * k(n, m) *
                 sigma(fe.center_tasks[static_cast<std::size_t>(n)], fe.center_tasks[static_cast<std::size_t>(m)]);
        }
    }
    return std::sqrt(std::max(q, 0.0));
}

SyntheticFunction SyntheticFunction::scaled_feature(std::size_t i, double a) const {
    auto feats = features_;
    feats.at(i).coefficients *= a;
    feats.at(i).norm *= std::abs(a);
    return SyntheticFunction(kernel_, std::move(feats), domain_);
}

SyntheticFunction sample_function(const LMCKernel& kernel, std::span<const double> target_norms,
                                  std::span<const std::size_t> n_centers, std::uint64_t seed, const Box& domain) {
    const std::size_t h = kernel.features();
    if (target_norms.size() != h) {
        throw std::invalid_argument("sample_function: one target norm per feature is required");
    }
    if (n_centers.size() != h && n_centers.size() != 1) {
        throw std::invalid_argument("sample_function: n_centers must have one entry or one per feature");
    }
    std::vector<FeatureExpansion> feats;
    for (std::size_t i = 0; i < h; ++i) {
        if (!(target_norms[i] > 0.0)) {
            throw std::invalid_argument("sample_function: target norms must be positive");
        }
        const std::size_t count = n_centers.size() == 1 ? n_centers[0] : n_centers[i];
        if (count == 0) {
            throw std::invalid_argument("sample_function: n_centers must be at least 1");
        }
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(i), 0x5eedu};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> task_dist(0, kernel.tasks() - 1);
        std::normal_distribution<double> normal(0.0, 1.0);

        FeatureExpansion fe;
        const auto n = static_cast<Eigen::Index>(count);
        const auto d = static_cast<Eigen::Index>(kernel.dim());
        fe.centers.resize(n, d);
        fe.center_tasks.resize(count);
        fe.coefficients.resize(n);
        for (Eigen::Index r = 0; r < n; ++r) {
            Eigen::VectorXd u(d);
            for (auto& v : u) {
                v = unif(rng);
            }
            fe.centers.row(r) = domain.from_unit(u).transpose();
            fe.center_tasks[static_cast<std::size_t>(r)] = task_dist(rng);
        }
        const Eigen::MatrixXd k = base_gram(kernel.base(i), fe.centers);
        Eigen::MatrixXd g(n, n);
        for (Eigen::Index c = 0; c < n; ++c) {
            for (Eigen::Index r = 0; r < n; ++r) {
                g(r, c) = k(r, c) * kernel.correlation(i)(fe.center_tasks[static_cast<std::size_t>(r)],
                                                          fe.center_tasks[static_cast<std::size_t>(c)]);
            }
        }
        double raw = 0.0;
        for (int attempt = 0; attempt < 2; ++attempt) {
            for (auto& c : fe.coefficients) {
                c = normal(rng);
            }
            raw = std::sqrt(std::max(fe.coefficients.dot(g * fe.coefficients), 0.0));
            if (raw > 1e-300 && std::isfinite(raw)) {
                break;
            }
        }
        if (!(raw > 1e-300) || !std::isfinite(raw)) {
            throw NumericalError("sample_function: degenerate feature Gram, norm vanished after resampling");
        }
        fe.coefficients *= target_norms[i] / raw;
        fe.norm = target_norms[i];
        feats.push_back(std::move(fe));
    }
    return SyntheticFunction(kernel, std::move(feats), domain);
}

double evaluate(const SyntheticFunction& f, const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t task) {
    return f.evaluate(x, task);
}

namespace {

Eigen::VectorXd projected_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Box& box) {
    Eigen::VectorXd pg = g;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        const bool at_lower = x[j] <= box.lower[j];
        const bool at_upper = x[j] >= box.upper[j];
        if ((at_lower && g[j] > 0.0) || (at_upper && g[j] < 0.0)) {
            pg[j] = 0.0;
        }
    }
    return pg;
}

}  // namespace

Optimum local_minimum(const SyntheticFunction& f, std::size_t task, Eigen::VectorXd x, std::size_t max_iterations,
                      double gradient_tolerance) {
    const Box& box = f.domain();
    x = box.clamp(x);
    double fx = f.evaluate(x, task);
    Eigen::VectorXd pg = projected_gradient(x, f.gradient(x, task), box);
    for (std::size_t it = 0; it < max_iterations && pg.norm() >= gradient_tolerance; ++it) {
        const Eigen::VectorXd g = f.gradient(x, task);
        std::vector<Eigen::Index> free;
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            if (pg[j] != 0.0 || (x[j] > box.lower[j] && x[j] < box.upper[j])) {
                free.push_back(j);
            }
        }
        const auto nf = static_cast<Eigen::Index>(free.size());
        Eigen::VectorXd step = Eigen::VectorXd::Zero(x.size());
        Eigen::VectorXd gf(nf);
        Eigen::MatrixXd hf(nf, nf);
        const Eigen::MatrixXd h = f.hessian(x, task);
        for (Eigen::Index a = 0; a < nf; ++a) {
            gf[a] = g[free[static_cast<std::size_t>(a)]];
            for (Eigen::Index b = 0; b < nf; ++b) {
                hf(a, b) = h(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
            }
        }
        Eigen::VectorXd pf = -gf;
        Eigen::LLT<Eigen::MatrixXd> llt(hf);
        if (llt.info() == Eigen::Success) {
            const Eigen::VectorXd newton = llt.solve(-gf);
            if (newton.allFinite() && newton.dot(gf) < 0.0) {
                pf = newton;
            }
        }
        for (Eigen::Index a = 0; a < nf; ++a) {
            step[free[static_cast<std::size_t>(a)]] = pf[a];
        }
        double t = 1.0;
        bool moved = false;
        for (int k = 0; k < 60; ++k, t *= 0.5) {
            const Eigen::VectorXd trial = box.clamp(x + t * step);
            const double ft = f.evaluate(trial, task);
            if (ft <= fx + 1e-4 * g.dot(trial - x)) {
                moved = (trial - x).norm() > 0.0;
                x = trial;
                fx = ft;
                break;
            }
        }
        pg = projected_gradient(x, f.gradient(x, task), box);
        if (!moved) {
            break;
        }
    }
    return Optimum{x, fx, pg.norm()};
}

Optimum locate_global_minimum(const SyntheticFunction& f, std::size_t task, const OptimumSearch& search) {
    SobolSequence sobol(f.domain().dim(), search.seed);
    const Eigen::MatrixXd starts = sobol.next(search.starts);
    Optimum best;
    best.value = std::numeric_limits<double>::infinity();
    for (Eigen::Index s = 0; s < starts.rows(); ++s) {
        Optimum o = local_minimum(f, task, f.domain().from_unit(starts.row(s).transpose()), search.max_iterations,
                                  search.gradient_tolerance);
        if (o.value < best.value) {
            best = std::move(o);
        }
    }
    return best;
}

std::pair<SyntheticFunction, SyntheticFunction> expressiveness_demo(std::uint64_t seed, const ExpressivenessOptions& options) {
    const Box domain = Box::cube(options.dim, -1.0, 1.0);
    const auto d = static_cast<Eigen::Index>(options.dim);
    LMCFeature major{SEKernelParams(Eigen::VectorXd::Constant(d, options.major_lengthscale), 1.0),
                     CorrelationMatrix::two_task(options.major_correlation)};
    LMCFeature minor{SEKernelParams(Eigen::VectorXd::Constant(d, options.minor_lengthscale), 1.0),
                     CorrelationMatrix::identity(2)};
    const std::size_t centers[] = {options.n_centers};

    LMCKernel icm_kernel({major});
    const double icm_norms[] = {options.major_norm};
    SyntheticFunction icm = sample_function(icm_kernel, icm_norms, centers, seed, domain);
    if (options.minor_norm <= 0.0) {
        return {icm, icm};
    }
    LMCKernel lmc_kernel({major, minor});
    const double lmc_norms[] = {options.major_norm, options.minor_norm};
    SyntheticFunction lmc = sample_function(lmc_kernel, lmc_norms, centers, seed, domain);
    return {std::move(icm), std::move(lmc)};
}

void write_grid_csv(std::ostream& out, const SyntheticFunction& f, std::size_t resolution) {
    if (resolution < 2) {
        throw std::invalid_argument("write_grid_csv: resolution must be at least 2");
    }
    const Box& box = f.domain();
    const std::size_t d = box.dim();
    for (std::size_t j = 0; j < d; ++j) {
        out << "x_" << (j + 1) << ',';
    }
    out << "task,value\n";
    std::size_t total = 1;
    for (std::size_t j = 0; j < d; ++j) {
        total *= resolution;
    }
    Eigen::VectorXd x(static_cast<Eigen::Index>(d));
    for (std::size_t t = 0; t < f.kernel().tasks(); ++t) {
        for (std::size_t idx = 0; idx < total; ++idx) {
            std::size_t rem = idx;
            for (std::size_t j = d; j-- > 0;) {
                const std::size_t k = rem % resolution;
                rem /= resolution;
                const auto jj = static_cast<Eigen::Index>(j);
                x[jj] = box.lower[jj] + (box.upper[jj] - box.lower[jj]) * static_cast<double>(k) /
                                            static_cast<double>(resolution - 1);
            }
            for (std::size_t j = 0; j < d; ++j) {
                out << csv::format(x[static_cast<Eigen::Index>(j)]) << ',';
            }
            out << t << ',' << csv::format(f.evaluate(x, t)) << '\n';
        }
    }
}

}  // namespace lmcsafe
