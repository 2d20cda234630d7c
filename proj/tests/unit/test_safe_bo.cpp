#include <cmath>
#include <sstream>

#include "doctest.h"
#include "lmcsafe/safe_bo.hpp"
#include "support/builders.hpp"

using namespace lmcsafe;
using testing_support::se;
using testing_support::vec;

namespace {

Eigen::MatrixXd column(std::initializer_list<double> v) {
    return vec(v);
}

PosteriorModel single_point_model(double x, std::size_t task, double y) {
    const LMCKernel k({{se(0.4, 1.0), CorrelationMatrix::two_task(0.5)}});
    TaskedDataset d(1, 2, 1e-4);
    d.add(vec({x}), task, y);
    return PosteriorModel(k, d);
}

struct Problem {
    SyntheticFunction objective;
    BOConfig config;
};

Problem small_problem(std::size_t features) {
    std::vector<LMCFeature> feats{{se(0.4, 1.0), CorrelationMatrix::two_task(0.8)}};
    std::vector<double> norms{2.0};
    if (features > 1) {
        feats.push_back({se(0.2, 0.2), CorrelationMatrix::identity(2)});
        norms.push_back(0.5);
    }
    const std::size_t centers[] = {30};
    SyntheticFunction f = sample_function(LMCKernel(feats), norms, centers, 21, Box::cube(1, -1.0, 1.0));
    f.set_optimum(locate_global_minimum(f, 0, {64, 100, 1e-8, 0}));
    BOConfig c;
    c.domain = Box::cube(1, -1.0, 1.0);
    c.threshold = 0.5;
    c.tau = 0.01;
    c.fidelity_ratio = 2;
    c.candidate_count = 64;
    c.max_main_evals = 4;
    c.initial_supplementary = 3;
    c.seed = 5;
    c.mcmc.n_samples = 30;
    c.mcmc.burn_in = 40;
    c.mcmc.thinning = 2;
    const auto x0 = find_initial_safe_input(f, c.threshold, 0.2, 1);
    REQUIRE(x0.has_value());
    c.initial_safe_inputs = {*x0};
    return {f, c};
}

std::vector<SEKernelParams> bases(std::size_t features) {
    std::vector<SEKernelParams> b{se(0.4, 1.0)};
    if (features > 1) {
        b.push_back(se(0.2, 0.2));
    }
    return b;
}

PriorSpec prior(std::size_t features) {
    std::vector<FeaturePrior> p{LKJPrior{1.0, vec({1.0, 1.0})}};
    if (features > 1) {
        p.emplace_back(CorrelationMatrix::identity(2));
    }
    return PriorSpec(p);
}

}  // namespace

TEST_CASE("method names") {
    for (Method m : {Method::LMC, Method::ICM, Method::SingleTask}) {
        CHECK(method_from_string(to_string(m)) == m);
    }
    CHECK_THROWS(method_from_string("lmc"));
}

TEST_CASE("safe set from the certified upper bound") {
    const PosteriorModel m = single_point_model(0.0, 0, 0.0);
    const Eigen::MatrixXd cand = column({-0.9, -0.3, 0.0, 0.2, 0.8});
    const RobustBound b = robust_beta(0.0, 1.0, 4.0);
    const auto pred = m.predict_task(cand, 0);
    std::vector<std::size_t> expected;
    for (Eigen::Index r = 0; r < cand.rows(); ++r) {
        if (pred.mean[r] + 2.0 * std::sqrt(pred.variance[r]) <= 1.0) {
            expected.push_back(static_cast<std::size_t>(r));
        }
    }
    CHECK(safe_set(m, b, 1.0, cand) == expected);
    CHECK(!expected.empty());
    CHECK(expected.size() < 5);

    // Only the observed input survives a large discretization term.
    RobustBound with_psi = b;
    with_psi.psi = 10.0;
    CHECK(safe_set(m, with_psi, 1.0, cand) == std::vector<std::size_t>{2});
    CHECK(safe_set(m, with_psi, -1.0, cand).empty());
}

TEST_CASE("main acquisition") {
    SUBCASE("lower bound minimizer among three") {
        const PosteriorModel m = single_point_model(0.0, 0, 0.0);
        const Eigen::MatrixXd cand = column({0.0, 0.3, 0.6});
        const RobustBound b = robust_beta(0.0, 1.0, 1.0);
        const auto pred = m.predict_task(cand, 0);
        Eigen::Index best = 0;
        for (Eigen::Index r = 1; r < 3; ++r) {
            if (pred.mean[r] - std::sqrt(pred.variance[r]) < pred.mean[best] - std::sqrt(pred.variance[best])) {
                best = r;
            }
        }
        CHECK(acquire_main(m, b, cand, {0, 1, 2}) == static_cast<std::size_t>(best));
        CHECK(acquire_main(m, b, cand, {0}) == 0);
    }
    SUBCASE("exact ties go to the smaller input") {
        const PosteriorModel m = single_point_model(0.0, 0, 0.3);
        const Eigen::MatrixXd cand = column({0.5, -0.5});
        CHECK(acquire_main(m, robust_beta(0.0, 1.0, 4.0), cand, {0, 1}) == 1);
    }
}

TEST_CASE("supplementary acquisition") {
    const PosteriorModel m = single_point_model(0.0, 1, 0.0);
    CHECK(acquire_supplementary(m, column({-0.1, 0.9, 0.2})) == 1);
    const auto batch = acquire_supplementary_batch(m, column({-0.05, 1.0, -1.0, 0.1}), 2);
    REQUIRE(batch.size() == 2);
    CHECK(batch[0] == 2);
    CHECK(batch[1] == 1);
}

TEST_CASE("initial safe input") {
    const auto p = small_problem(2);
    const Eigen::VectorXd x = p.config.initial_safe_inputs.front();
    CHECK(p.objective.evaluate(x, 0) <= p.config.threshold - 0.2);
    CHECK(!find_initial_safe_input(p.objective, -1e6, 0.0, 1, 256).has_value());
}

TEST_CASE("optimizer run") {
    const auto p = small_problem(2);
    const ModelSpec model = make_model(Method::LMC, bases(2), prior(2), 1e-4);
    const BOHistory h = run(p.config, p.objective, model);
    REQUIRE(!h.error.has_value());
    CHECK(h.records.size() == 1 + 3 + 4 * (1 + 2));
    CHECK(h.diagnostics.size() == 4);
    const auto regret = h.main_regret();
    REQUIRE(regret.size() == 5);
    for (std::size_t k = 1; k < regret.size(); ++k) {
        CHECK(regret[k] <= regret[k - 1]);
        CHECK(regret[k] >= -1e-9);
    }
    for (const auto& d : h.diagnostics) {
        CHECK(d.bound.beta_bar >= d.bound.beta);
        CHECK(d.nominal_r.size() == 2);
        CHECK(d.set_r_min[0] <= d.nominal_r[0]);
        CHECK(d.nominal_r[0] <= d.set_r_max[0]);
    }

    SUBCASE("deterministic") {
        const BOHistory again = run(p.config, p.objective, model);
        REQUIRE(again.records.size() == h.records.size());
        for (std::size_t k = 0; k < h.records.size(); ++k) {
            CHECK(again.records[k].x == h.records[k].x);
            CHECK(again.records[k].observation == h.records[k].observation);
        }
    }
    SUBCASE("csv outputs") {
        std::ostringstream out;
        write_history_csv(out, h);
        std::istringstream in(out.str());
        std::string line;
        std::getline(in, line);
        CHECK(line == "iteration,task,x_1,observation,safe_predicted,beta,nu,gamma,beta_bar,incumbent,regret,violation");
        std::size_t rows = 0;
        while (std::getline(in, line)) {
            ++rows;
        }
        CHECK(rows == h.records.size());
        std::ostringstream diag;
        write_diagnostics_csv(diag, h);
        CHECK(diag.str().rfind("iteration,beta,nu,gamma,psi,beta_bar,gamma_feature_1,gamma_feature_2,", 0) == 0);
    }
}

TEST_CASE("zero main evaluations keeps only the initial design") {
    auto p = small_problem(2);
    p.config.max_main_evals = 0;
    const BOHistory h = run(p.config, p.objective, make_model(Method::LMC, bases(2), prior(2), 1e-4));
    CHECK(h.records.size() == 4);
    CHECK(h.diagnostics.empty());
    CHECK(h.main_regret().size() == 1);
}

TEST_CASE("single-feature lmc follows icm exactly") {
    const auto p = small_problem(1);
    const BOHistory a = run(p.config, p.objective, make_model(Method::LMC, bases(1), prior(1), 1e-4));
    const BOHistory b = run(p.config, p.objective, make_model(Method::ICM, bases(1), prior(1), 1e-4));
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t k = 0; k < a.records.size(); ++k) {
        CHECK(a.records[k].x == b.records[k].x);
        CHECK(a.records[k].regret == b.records[k].regret);
    }
}

TEST_CASE("single task model ignores the supplementary task") {
    const auto p = small_problem(2);
    const ModelSpec st = make_model(Method::SingleTask, bases(2), prior(2), 1e-4);
    CHECK(st.kernel.tasks() == 1);
    const BOHistory h = run(p.config, p.objective, st);
    REQUIRE(!h.error.has_value());
    CHECK(h.records.size() == 5);
    for (const auto& d : h.diagnostics) {
        CHECK(d.bound.beta_bar == d.bound.beta);
    }
}
