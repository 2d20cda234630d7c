#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "lmcsafe/bounds.hpp"
#include "support/builders.hpp"
#include "support/nystrom_oracle.hpp"

using namespace lmcsafe;
using testing_support::se;
using testing_support::vec;

TEST_CASE("beta from grid size") {
    CHECK(beta(1e4, 0.05) == doctest::Approx(2 * std::log(2e5)));
    CHECK(beta(1.0, 0.5) == doctest::Approx(2 * std::log(2.0)));
    const double table = grid_cardinality(Box::cube(4, -1.0, 1.0), 0.001);
    CHECK(table == std::pow(2001.0, 4));
    CHECK(beta(table, 0.05) == doctest::Approx(2 * (4 * std::log(2001.0) - std::log(0.05))));
    CHECK(grid_cardinality(Box::cube(1, 0.0, 1.0), 0.25) == 5.0);
    CHECK(grid_cardinality(Box(vec({0.0, 0.0}), vec({1.0, 0.5})), 0.1) == 11.0 * 6.0);
    CHECK_THROWS_AS(beta(0.5, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(beta(10.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(grid_cardinality(Box::cube(1, 0.0, 1.0), 0.0), std::invalid_argument);
}

TEST_CASE("discretization term") {
    const RegularityBudget b{100.0, 0.01, 0.02, 0.001};
    CHECK(psi(b, 4.0) == doctest::Approx(0.1 + 0.01 + 0.04));
    CHECK(psi(RegularityBudget{}, 30.0) == 0.0);
    CHECK_THROWS_AS(psi(RegularityBudget{-1.0, 0, 0, 0}, 1.0), std::invalid_argument);
}

TEST_CASE("robust scaling") {
    CHECK(robust_beta(1.0, 1.0, 4.0).beta_bar == doctest::Approx(9.0));
    CHECK(robust_beta(0.0, 1.0, 17.3).beta_bar == 17.3);
    CHECK(robust_beta(0.0, 2.0, 4.0).beta_bar == doctest::Approx(16.0));
    double prev = 0.0;
    for (double nu : {0.0, 0.5, 1.0, 3.0}) {
        for (double g : {1.0, 1.5, 3.0}) {
            const double v = robust_beta(nu, g, 10.0).beta_bar;
            CHECK(v >= 10.0);
            CHECK(v >= robust_beta(nu, 1.0, 10.0).beta_bar);
            CHECK(v >= robust_beta(0.0, g, 10.0).beta_bar);
            if (g == 1.0) {
                CHECK(v >= prev);
                prev = v;
            }
        }
    }
    CHECK_THROWS_AS(robust_beta(-0.1, 1.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(robust_beta(0.0, 0.0, 1.0), std::invalid_argument);
}

namespace {

CorrelationSet make_set(std::vector<CorrelationTuple> members, CorrelationTuple nominal) {
    CorrelationSet s;
    s.members = std::move(members);
    s.posterior_scores.assign(s.members.size(), 0.0);
    s.nominal = std::move(nominal);
    return s;
}

double power_iteration_norm(const Eigen::MatrixXd& a) {
    const Eigen::MatrixXd ata = a.transpose() * a;
    Eigen::VectorXd v = Eigen::VectorXd::Ones(a.cols());
    for (int k = 0; k < 2000; ++k) {
        v = ata * v;
        v /= v.norm();
    }
    return std::sqrt(v.dot(ata * v));
}

}  // namespace

TEST_CASE("gamma") {
    const auto id = CorrelationMatrix::identity(2);
    CHECK(gamma(make_set({{CorrelationMatrix::two_task(0.85)}}, {id})) == doctest::Approx(std::sqrt(1.85)));
    const CorrelationMatrix four(Eigen::MatrixXd::Constant(1, 1, 4.0));
    const CorrelationMatrix one(Eigen::MatrixXd::Constant(1, 1, 1.0));
    CHECK(gamma(make_set({{four}}, {one})) == doctest::Approx(2.0));
    CHECK(gamma(make_set({{id}}, {id})) == 1.0);
    const CorrelationMatrix half(0.5 * Eigen::MatrixXd::Identity(2, 2));
    CHECK(per_feature_gamma(make_set({{half}}, {id}))[0] == doctest::Approx(std::sqrt(0.5)));
    CHECK(gamma(make_set({{half}}, {id})) == 1.0);

    std::mt19937_64 rng(12);
    for (int rep = 0; rep < 20; ++rep) {
        const auto a = testing_support::random_two_task(rng);
        const auto b = testing_support::random_two_task(rng);
        const double expected = power_iteration_norm(a.matrix() * b.matrix().inverse());
        CHECK(correlation_ratio_norm(a, b) == doctest::Approx(expected).epsilon(1e-9));
    }

    const auto n0 = CorrelationMatrix::two_task(0.5);
    const auto set = make_set({{CorrelationMatrix::two_task(0.1), id}, {CorrelationMatrix::two_task(0.7), CorrelationMatrix::two_task(0.3)}},
                              {n0, id});
    const auto per = per_feature_gamma(set);
    REQUIRE(per.size() == 2);
    CHECK(per[0] <= gamma(set));
    CHECK(per[1] <= gamma(set));
    CHECK(std::max(per[0], per[1]) == gamma(set));
    CHECK(per[1] == doctest::Approx(std::sqrt(1.3)));
}

TEST_CASE("nu vanishes at the nominal") {
    const auto inst = testing_support::random_instance(1, 2, 10, 2);
    const auto t = nu_terms(inst.nominal, inst.nominal, inst.data, inst.kernel);
    CHECK(std::abs(t.rkhs) <= 1e-9);
    CHECK(t.data_fit == 0.0);
    CHECK(nu_max(make_set({inst.nominal}, inst.nominal), inst.data, inst.kernel) == 0.0);
}

TEST_CASE("rkhs term for one task by hand") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    reference::Problem p;
    p.features.push_back({vec({0.4}), 1.2});
    p.noise = 0.02;
    p.inputs.resize(7, 1);
    p.y.resize(7);
    TaskedDataset d(1, 1, 0.02);
    for (Eigen::Index n = 0; n < 7; ++n) {
        p.inputs(n, 0) = u(rng);
        p.y[n] = u(rng);
        p.tasks.push_back(0);
        d.add(p.inputs.row(n).transpose(), 0, p.y[n]);
    }
    const double s = 2.5;
    const double sp = 0.8;
    const LMCKernel k({{se(0.4, 1.2), CorrelationMatrix(Eigen::MatrixXd::Constant(1, 1, sp))}});
    const FitOptions exact{0.0, 1e-4};
    const auto terms = nu_terms({CorrelationMatrix(Eigen::MatrixXd::Constant(1, 1, s))},
                                {CorrelationMatrix(Eigen::MatrixXd::Constant(1, 1, sp))}, d, k, exact);
    const reference::Posterior pc(p, {Eigen::MatrixXd::Constant(1, 1, s)});
    const reference::Posterior pn(p, {Eigen::MatrixXd::Constant(1, 1, sp)});
    const Eigen::MatrixXd kk = reference::base_gram(p.features[0], p.inputs);
    const Eigen::VectorXd w = sp * pn.alpha() - s * pc.alpha();
    CHECK(terms.rkhs == doctest::Approx(w.dot(kk * w) / sp).epsilon(1e-8));
    const Eigen::VectorXd diff = kk * w;
    CHECK(terms.data_fit == doctest::Approx(diff.squaredNorm() / 0.02).epsilon(1e-8));
}

TEST_CASE("rkhs term agrees with the finite feature oracle") {
    for (std::uint64_t seed = 20; seed < 26; ++seed) {
        const auto inst = testing_support::random_instance(seed, 1 + seed % 2, 6 + seed % 7, 2);
        const auto terms = nu_terms(inst.candidate, inst.nominal, inst.data, inst.kernel, {0.0, 1e-4});
        const double ref = oracle::nystrom_rkhs_term(inst.problem, testing_support::matrices(inst.candidate),
                                                     testing_support::matrices(inst.nominal));
        CHECK(terms.rkhs == doctest::Approx(ref).epsilon(1e-6));
    }
}

TEST_CASE("data fit term by component selection") {
    const auto inst = testing_support::random_instance(31, 2, 9, 2);
    const reference::Posterior pc(inst.problem, testing_support::matrices(inst.candidate));
    const reference::Posterior pn(inst.problem, testing_support::matrices(inst.nominal));
    double observed = 0.0;
    double full = 0.0;
    for (std::size_t n = 0; n < inst.data.size(); ++n) {
        for (std::size_t t = 0; t < 2; ++t) {
            double a = 0.0;
            double b = 0.0;
            double sd = 0.0;
            pc.predict(inst.data.input(n), t, a, sd);
            pn.predict(inst.data.input(n), t, b, sd);
            full += (a - b) * (a - b);
            if (t == inst.data.task(n)) {
                observed += (a - b) * (a - b);
            }
        }
    }
    const double s2 = inst.data.noise_variance();
    const FitOptions exact{0.0, 1e-4};
    const auto obs = nu_terms(inst.candidate, inst.nominal, inst.data, inst.kernel, exact, DataFitMode::Observed);
    const auto all = nu_terms(inst.candidate, inst.nominal, inst.data, inst.kernel, exact, DataFitMode::Full);
    CHECK(obs.data_fit == doctest::Approx(observed / s2).epsilon(1e-7));
    CHECK(all.data_fit == doctest::Approx(full / s2).epsilon(1e-7));
    CHECK(all.data_fit >= obs.data_fit);
    CHECK(obs.rkhs == all.rkhs);
    CHECK(obs.value() == doctest::Approx(std::sqrt(obs.rkhs + obs.data_fit)));
}

TEST_CASE("nu over a set") {
    const auto inst = testing_support::random_instance(40, 2, 12, 2);
    std::mt19937_64 rng(3);
    std::vector<CorrelationTuple> members{inst.nominal};
    for (int m = 0; m < 6; ++m) {
        members.push_back({testing_support::random_two_task(rng), testing_support::random_two_task(rng)});
    }
    const auto set = make_set(members, inst.nominal);
    const double top = nu_max(set, inst.data, inst.kernel);
    double expected = 0.0;
    for (const auto& m : members) {
        const double v = nu_single(m, inst.nominal, inst.data, inst.kernel);
        CHECK(v <= top + 1e-12);
        expected = std::max(expected, v);
    }
    CHECK(top == doctest::Approx(expected));

    const auto pair = make_set({members[1], members[2]}, inst.nominal);
    CHECK(nu_max(pair, inst.data, inst.kernel) ==
          doctest::Approx(std::max(nu_single(members[1], inst.nominal, inst.data, inst.kernel),
                                   nu_single(members[2], inst.nominal, inst.data, inst.kernel))));
}

TEST_CASE("affine fast path matches the direct evaluation") {
    const auto inst = testing_support::random_instance(50, 2, 12, 2);
    auto solver = make_offdiagonal_solver(inst.kernel, 0, inst.data);
    REQUIRE(solver.has_value());
    NuEvaluator direct(inst.kernel, inst.data, inst.nominal);
    NuEvaluator fast(inst.kernel, inst.data, inst.nominal);
    fast.use_affine_solver(std::make_shared<const AffineGramSolver>(*solver), 0);
    const double v0 = inst.nominal[0](0, 0);
    const double v1 = inst.nominal[0](1, 1);
    for (double r : {-0.8, 0.0, 0.3, 0.9}) {
        auto cand = inst.nominal;
        cand[0] = CorrelationMatrix::two_task(r, v0, v1);
        const auto a = direct.terms(cand);
        const auto b = fast.terms(cand);
        CHECK(b.rkhs == doctest::Approx(a.rkhs).epsilon(1e-6));
        CHECK(b.data_fit == doctest::Approx(a.data_fit).epsilon(1e-6));
    }
}

TEST_CASE("combined bound") {
    const auto inst = testing_support::random_instance(60, 2, 8, 2);
    const auto set = make_set({inst.nominal, inst.candidate}, inst.nominal);
    const NuEvaluator ev(inst.kernel, inst.data, inst.nominal);
    BoundInputs in;
    in.grid_cardinality = 1000.0;
    in.delta = 0.1;
    const RobustBound b = compute_robust_bound(set, ev, in);
    CHECK(b.beta == doctest::Approx(2 * std::log(1e4)));
    CHECK(b.nu == doctest::Approx(nu_max(set, ev)));
    CHECK(b.gamma == doctest::Approx(gamma(set)));
    CHECK(b.beta_bar == doctest::Approx(std::pow(b.nu + b.gamma * std::sqrt(b.beta), 2)));
    CHECK(b.psi == 0.0);

    const RobustBound exact = compute_robust_bound(make_set({inst.nominal}, inst.nominal), ev, in);
    CHECK(exact.beta_bar == exact.beta);

    std::ostringstream out;
    write_bound_header(out);
    write_bound_row(out, 3, b);
    CHECK(out.str().rfind("iteration,beta,nu,gamma,psi,beta_bar\n3,", 0) == 0);
}
