#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "lmcsafe/correlation.hpp"
#include "support/builders.hpp"

using namespace lmcsafe;
using testing_support::se;
using testing_support::vec;

TEST_CASE("lkj log density") {
    CHECK(lkj_log_density(CorrelationMatrix::two_task(0.85), 0.1) == doctest::Approx(-0.9 * std::log(1 - 0.85 * 0.85)));
    CHECK(lkj_log_density(CorrelationMatrix::two_task(0.3), 1.0) == 0.0);
    CHECK(lkj_log_density(CorrelationMatrix::identity(3), 4.0) == doctest::Approx(0.0));
    CHECK(lkj_log_density(CorrelationMatrix::two_task(-0.5), 2.0) == doctest::Approx(std::log(0.75)));
    CHECK_THROWS_AS(lkj_log_density(CorrelationMatrix::two_task(0.1, 2.0, 1.0), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(lkj_log_density(CorrelationMatrix::two_task(0.1), 0.0), std::invalid_argument);
}

TEST_CASE("canonical partial correlations") {
    CHECK(cpc_count(2) == 1);
    CHECK(cpc_count(3) == 3);
    CHECK(cpc_count(4) == 6);
    const Eigen::MatrixXd two = correlation_from_cpc_z(vec({0.4}), 2);
    CHECK(two(0, 1) == doctest::Approx(std::tanh(0.4)));
    CHECK(two(0, 0) == 1.0);

    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 1.5);
    for (int rep = 0; rep < 50; ++rep) {
        const Eigen::VectorXd z = vec({n(rng), n(rng), n(rng), n(rng), n(rng), n(rng)});
        const Eigen::MatrixXd c = correlation_from_cpc_z(z, 4);
        CHECK((c.diagonal().array() - 1.0).abs().maxCoeff() <= 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }

    // For u = 2 the z density is the Beta(eta, eta) density of (1 + r) / 2
    // pushed through r = tanh z, up to a constant.
    const double eta = 2.5;
    auto expected = [&](double z) {
        const double r = std::tanh(z);
        return (eta - 1) * std::log(1 - r * r) + std::log(1 - r * r);
    };
    const double shift = lkj_log_density_z(vec({0.0}), 2, eta) - expected(0.0);
    for (double z : {-2.0, -0.7, 0.3, 1.1}) {
        CHECK(lkj_log_density_z(vec({z}), 2, eta) - expected(z) == doctest::Approx(shift));
    }
}

namespace {

struct Fixture {
    LMCKernel kernel;
    TaskedDataset data;
};

/// Paired observations drawn from the prior of a one-feature model with
/// correlation r.
Fixture icm_fixture(double r, std::size_t pairs, std::uint64_t seed) {
    const LMCKernel truth({{se(0.3, 1.0), CorrelationMatrix::two_task(r)}});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    TaskedDataset d(1, 2, 1e-2);
    std::vector<double> xs;
    for (std::size_t k = 0; k < pairs; ++k) {
        xs.push_back(u(rng));
    }
    TaskedDataset skeleton(1, 2, 1e-2);
    for (double x : xs) {
        skeleton.add(vec({x}), 0, 0.0);
        skeleton.add(vec({x}), 1, 0.0);
    }
    Eigen::MatrixXd g = assemble_gram(truth, skeleton);
    g.diagonal().array() += 1e-2;
    const Eigen::MatrixXd l = g.llt().matrixL();
    Eigen::VectorXd e(g.rows());
    for (auto& v : e) {
        v = n(rng);
    }
    const Eigen::VectorXd y = l * e;
    for (std::size_t k = 0; k < skeleton.size(); ++k) {
        d.add(skeleton.input(k), skeleton.task(k), y[static_cast<Eigen::Index>(k)]);
    }
    return {truth, d};
}

PriorSpec lkj(double eta) {
    return PriorSpec({LKJPrior{eta, vec({1.0, 1.0})}});
}

}  // namespace

TEST_CASE("sampler rejects degenerate inputs") {
    const auto fx = icm_fixture(0.5, 5, 1);
    const PriorSpec fixed({CorrelationMatrix::two_task(0.5)});
    CHECK_THROWS_AS(mh_sample(fx.data, fx.kernel, fixed, {}), std::invalid_argument);
    CHECK_THROWS_AS(mh_sample(TaskedDataset(1, 2, 1e-2), fx.kernel, lkj(1.0), {}), std::invalid_argument);
    CHECK_THROWS_AS(PriorSpec({LKJPrior{-1.0, vec({1.0, 1.0})}}), std::invalid_argument);
}

TEST_CASE("sampler is deterministic by seed") {
    const auto fx = icm_fixture(0.5, 8, 3);
    MCMCOptions o;
    o.n_samples = 50;
    o.burn_in = 100;
    o.seed = 77;
    const auto a = mh_sample(fx.data, fx.kernel, lkj(1.0), o);
    const auto b = mh_sample(fx.data, fx.kernel, lkj(1.0), o);
    REQUIRE(a.samples.size() == 50);
    for (std::size_t s = 0; s < a.samples.size(); ++s) {
        CHECK(a.samples[s].sigmas[0].matrix() == b.samples[s].sigmas[0].matrix());
        CHECK(a.samples[s].score == b.samples[s].score);
    }
    o.seed = 78;
    const auto c = mh_sample(fx.data, fx.kernel, lkj(1.0), o);
    bool differs = false;
    for (std::size_t s = 0; s < a.samples.size(); ++s) {
        differs = differs || a.samples[s].sigmas[0](0, 1) != c.samples[s].sigmas[0](0, 1);
    }
    CHECK(differs);
}

TEST_CASE("posterior concentrates near the generating correlation") {
    const auto fx = icm_fixture(0.85, 20, 11);
    MCMCOptions o;
    o.n_samples = 400;
    o.burn_in = 1000;
    o.seed = 5;
    const auto res = mh_sample(fx.data, fx.kernel, lkj(1.0), o);
    double mean = 0.0;
    for (const auto& s : res.samples) {
        mean += s.sigmas[0](0, 1);
    }
    mean /= static_cast<double>(res.samples.size());
    CHECK(std::abs(mean - 0.85) <= 0.15);
    CHECK(res.acceptance_rate > 0.05);
    CHECK(res.acceptance_rate < 0.9);
}

TEST_CASE("fixed features stay at their prior matrix") {
    const auto fx = icm_fixture(0.6, 6, 4);
    const LMCKernel k({{se(0.3, 1.0), CorrelationMatrix::two_task(0.6)}, {se(0.1, 0.2), CorrelationMatrix::identity(2)}});
    const PriorSpec prior({LKJPrior{0.5, vec({1.0, 1.0})}, CorrelationMatrix::identity(2)});
    MCMCOptions o;
    o.n_samples = 30;
    o.burn_in = 50;
    const auto res = mh_sample(fx.data, k, prior, o);
    for (const auto& s : res.samples) {
        CHECK(s.sigmas[1].matrix() == Eigen::MatrixXd::Identity(2, 2));
        CHECK(s.z[1].size() == 0);
        CHECK(s.sigmas[0](0, 0) == doctest::Approx(1.0));
    }
}

TEST_CASE("confidence set keeps the top fraction") {
    std::vector<CorrelationSample> samples;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-0.9, 0.9);
    for (int s = 0; s < 100; ++s) {
        CorrelationSample c;
        const double r = u(rng);
        c.sigmas = {CorrelationMatrix::two_task(r)};
        c.z = {vec({std::atanh(r)})};
        c.score = -std::abs(r - 0.2);
        samples.push_back(c);
    }
    const CorrelationSet set = build_confidence_set(samples, 0.05);
    REQUIRE(set.members.size() == 95);
    for (std::size_t k = 1; k < set.members.size(); ++k) {
        CHECK(set.posterior_scores[k - 1] >= set.posterior_scores[k]);
    }
    CHECK(set.nominal[0].matrix() == set.members[0][0].matrix());
    double dropped_best = -1e300;
    std::vector<double> all;
    for (const auto& s : samples) {
        all.push_back(s.score);
    }
    std::sort(all.begin(), all.end(), std::greater<>());
    dropped_best = all[95];
    CHECK(set.posterior_scores.back() >= dropped_best);
    for (const auto& m : set.members) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m[0].matrix());
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }

    CHECK(build_confidence_set(samples, 0.5).members.size() == 50);
    CHECK(build_confidence_set(samples, 0.999).members.size() == 1);
    CHECK_THROWS_AS(build_confidence_set(samples, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(build_confidence_set({}, 0.05), std::invalid_argument);
}

TEST_CASE("trace output") {
    std::ostringstream out;
    write_trace_csv(out, {{0, 0, 0.5, -1.25, true}, {1, 0, 0.4, -1.5, false}});
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,feature,r,log_posterior,accepted");
    std::getline(in, line);
    CHECK(line.rfind("0,0,", 0) == 0);
}
