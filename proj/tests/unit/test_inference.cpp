#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "lmcsafe/inference.hpp"
#include "support/builders.hpp"

using namespace lmcsafe;
using testing_support::se;
using testing_support::vec;

TEST_CASE("empty data gives the prior") {
    const LMCKernel k({{se(0.5, 1.7), CorrelationMatrix::two_task(0.3, 1.0, 2.0)}});
    const PosteriorModel m(k, TaskedDataset(1, 2, 1e-4));
    const Prediction p = m.predict(vec({0.25}));
    CHECK(p.mean.norm() == 0.0);
    CHECK(p.variance[0] == doctest::Approx(1.7));
    CHECK(p.variance[1] == doctest::Approx(3.4));
}

TEST_CASE("single observation matches the hand formula") {
    const auto base = se(0.7, 1.3);
    const LMCKernel k({{base, CorrelationMatrix::identity(1)}});
    TaskedDataset d(1, 1, 0.05);
    d.add(vec({0.1}), 0, 0.8);
    const PosteriorModel m(k, d);
    const Eigen::VectorXd x = vec({-0.35});
    const double kx = se_eval(base, x, vec({0.1}));
    const double denom = 1.3 + 0.05 + m.jitter();
    const Prediction p = m.predict(x);
    CHECK(p.mean[0] == doctest::Approx(kx * 0.8 / denom).epsilon(1e-12));
    CHECK(p.variance[0] == doctest::Approx(1.3 - kx * kx / denom).epsilon(1e-12));
    const double lml = -0.5 * 0.64 / denom - 0.5 * std::log(denom) - 0.5 * std::log(2 * std::numbers::pi);
    CHECK(m.log_marginal_likelihood() == doctest::Approx(lml).epsilon(1e-12));
}

TEST_CASE("duplicate rows factorize through jitter") {
    const LMCKernel k({{se(0.5, 1.0), CorrelationMatrix::identity(1)}});
    TaskedDataset d(1, 1, 1e-14);
    for (int i = 0; i < 4; ++i) {
        d.add(vec({0.2}), 0, 1.0);
    }
    const PosteriorModel m(k, d);
    CHECK(m.jitter() > 0.0);
    CHECK(m.predict(vec({0.2})).mean[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("interpolation and decay limits") {
    const LMCKernel k({{se(0.3, 1.0), CorrelationMatrix::two_task(0.5)}, {se(0.2, 0.5), CorrelationMatrix::identity(2)}});
    TaskedDataset d(1, 2, 1e-12);
    d.add(vec({-0.5}), 0, 0.3);
    d.add(vec({0.4}), 1, -1.2);
    const PosteriorModel m(k, d);
    CHECK(m.predict(vec({-0.5})).mean[0] == doctest::Approx(0.3).epsilon(1e-4));
    CHECK(m.predict(vec({0.4})).mean[1] == doctest::Approx(-1.2).epsilon(1e-4));
    const Prediction far = m.predict(vec({50.0}));
    CHECK(std::abs(far.variance[0] - 1.5) <= 1e-6);
    CHECK(std::abs(far.variance[1] - 1.5) <= 1e-6);
}

TEST_CASE("log marginal likelihood agrees with a dense computation") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto inst = testing_support::random_instance(seed, 2, 5 + 2 * seed, 2);
        const PosteriorModel m(inst.kernel, inst.data);
        const Eigen::MatrixXd g = assemble_gram(inst.kernel, inst.data) +
                                  (inst.data.noise_variance() + m.jitter()) * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(inst.data.size()),
                                                                                        static_cast<Eigen::Index>(inst.data.size()));
        const Eigen::VectorXd y = inst.data.observations();
        const double dense = -0.5 * y.dot(g.inverse() * y) - 0.5 * std::log(g.determinant()) -
                             0.5 * static_cast<double>(y.size()) * std::log(2 * std::numbers::pi);
        CHECK(m.log_marginal_likelihood() == doctest::Approx(dense).epsilon(1e-8));
    }
}

TEST_CASE("posterior agrees with the reference implementation") {
    const auto inst = testing_support::random_instance(42, 2, 14, 2);
    const PosteriorModel m(inst.kernel, inst.data);
    reference::Problem problem = inst.problem;
    problem.noise += m.jitter();
    const reference::Posterior ref(problem, testing_support::matrices(inst.nominal));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int q = 0; q < 20; ++q) {
        const Eigen::VectorXd x = vec({u(rng), u(rng)});
        const Prediction p = m.predict(x);
        for (std::size_t t = 0; t < 2; ++t) {
            double mean = 0.0;
            double sd = 0.0;
            ref.predict(x, t, mean, sd);
            CHECK(p.mean[static_cast<Eigen::Index>(t)] == doctest::Approx(mean).epsilon(1e-9));
            CHECK(std::sqrt(p.variance[static_cast<Eigen::Index>(t)]) == doctest::Approx(sd).epsilon(1e-7));
        }
    }
}

TEST_CASE("adding data never increases variance") {
    auto inst = testing_support::random_instance(9, 2, 10, 2);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::MatrixXd probes(100, 2);
    for (Eigen::Index r = 0; r < 100; ++r) {
        probes(r, 0) = u(rng);
        probes(r, 1) = u(rng);
    }
    const PosteriorModel before(inst.kernel, inst.data);
    TaskedDataset more = inst.data;
    more.add(vec({0.05, -0.3}), 0, 0.7);
    const PosteriorModel after(inst.kernel, more);
    for (std::size_t t = 0; t < 2; ++t) {
        const auto a = before.predict_task(probes, t);
        const auto b = after.predict_task(probes, t);
        CHECK((b.variance - a.variance).maxCoeff() <= 1e-8);
    }
}

TEST_CASE("affine solver reproduces direct fits along the off-diagonal") {
    const auto inst = testing_support::random_instance(3, 2, 12, 2);
    const auto solver = make_offdiagonal_solver(inst.kernel, 0, inst.data);
    REQUIRE(solver.has_value());
    const double v0 = inst.nominal[0](0, 0);
    const double v1 = inst.nominal[0](1, 1);
    for (double r : {-0.9, -0.2, 0.0, 0.4, 0.95}) {
        const double theta = r * std::sqrt(v0 * v1);
        auto sigmas = inst.nominal;
        sigmas[0] = CorrelationMatrix::two_task(r, v0, v1);
        const PosteriorModel direct(inst.kernel.with_correlations(sigmas), inst.data);
        CHECK(solver->log_marginal_likelihood(theta) == doctest::Approx(direct.log_marginal_likelihood()).epsilon(1e-9));
        CHECK((solver->alpha(theta) - direct.alpha()).norm() <= 1e-7 * direct.alpha().norm());
    }
}
