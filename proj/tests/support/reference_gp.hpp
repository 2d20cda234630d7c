#pragma once

// Straight-line multi-task GP used as an independent reference in tests. It
// shares no code with the library beyond plain Eigen types.

#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace reference {

struct Feature {
    Eigen::VectorXd lengthscales;
    double variance = 1.0;
};

struct Problem {
    std::vector<Feature> features;
    Eigen::MatrixXd inputs;  // N x d
    std::vector<std::size_t> tasks;
    Eigen::VectorXd y;
    double noise = 1e-2;
};

inline double se(const Feature& f, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < a.size(); ++j) {
        const double d = (a[j] - b[j]) / f.lengthscales[j];
        s += d * d;
    }
    return f.variance * std::exp(-0.5 * s);
}

inline double cov(const Problem& p, const std::vector<Eigen::MatrixXd>& sigmas, const Eigen::VectorXd& a, std::size_t ta,
                  const Eigen::VectorXd& b, std::size_t tb) {
    double k = 0.0;
    for (std::size_t i = 0; i < p.features.size(); ++i) {
        k += sigmas[i](static_cast<Eigen::Index>(ta), static_cast<Eigen::Index>(tb)) * se(p.features[i], a, b);
    }
    return k;
}

inline Eigen::MatrixXd base_gram(const Feature& f, const Eigen::MatrixXd& x) {
    const auto n = x.rows();
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
        for (Eigen::Index b = 0; b < n; ++b) {
            k(a, b) = se(f, x.row(a).transpose(), x.row(b).transpose());
        }
    }
    return k;
}

/// Posterior of a multi-task GP under fixed inter-task matrices.
class Posterior {
public:
    Posterior(const Problem& p, std::vector<Eigen::MatrixXd> sigmas) : p_(p), sigmas_(std::move(sigmas)) {
        const auto n = p.inputs.rows();
        Eigen::MatrixXd k(n, n);
        for (Eigen::Index a = 0; a < n; ++a) {
            for (Eigen::Index b = 0; b < n; ++b) {
                k(a, b) = cov(p, sigmas_, p.inputs.row(a).transpose(), p.tasks[static_cast<std::size_t>(a)],
                              p.inputs.row(b).transpose(), p.tasks[static_cast<std::size_t>(b)]);
            }
        }
        k.diagonal().array() += p.noise;
        ldlt_.compute(k);
        alpha_ = ldlt_.solve(p.y);
    }

    const Eigen::VectorXd& alpha() const { return alpha_; }

    void predict(const Eigen::VectorXd& x, std::size_t task, double& mean, double& sd) const {
        const auto n = p_.inputs.rows();
        Eigen::VectorXd kx(n);
        for (Eigen::Index a = 0; a < n; ++a) {
            kx[a] = cov(p_, sigmas_, x, task, p_.inputs.row(a).transpose(), p_.tasks[static_cast<std::size_t>(a)]);
        }
        mean = kx.dot(alpha_);
        const double var = cov(p_, sigmas_, x, task, x, task) - kx.dot(ldlt_.solve(kx));
        sd = std::sqrt(std::max(var, 0.0));
    }

private:
    const Problem& p_;
    std::vector<Eigen::MatrixXd> sigmas_;
    Eigen::LDLT<Eigen::MatrixXd> ldlt_;
    Eigen::VectorXd alpha_;
};

}  // namespace reference
