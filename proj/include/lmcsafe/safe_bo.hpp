#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmcsafe/bounds.hpp"
#include "lmcsafe/correlation.hpp"
#include "lmcsafe/inference.hpp"
#include "lmcsafe/kernels.hpp"
#include "lmcsafe/synthesis.hpp"

namespace lmcsafe {

enum class Method { LMC, ICM, SingleTask };

std::string to_string(Method m);
/// Accepts "LMC", "ICM" and "SingleTask" (case sensitive).
Method method_from_string(const std::string& name);

/// Surrogate model used by the optimizer: kernel template plus prior over its
/// inter-task matrices. A one-task kernel means single-task optimization.
struct ModelSpec {
    LMCKernel kernel;
    PriorSpec prior;
    double noise_variance = 1e-4;
};

/// How the ICM surrogate's single base kernel is derived from the LMC features.
struct ICMKernelRule {
    /// "min" takes the elementwise smallest lengthscale; "first" copies feature 0.
    std::string lengthscale = "min";
    /// "sum" adds the feature variances; "first" copies feature 0.
    std::string variance = "sum";
};

/// Builds the surrogate for a method from the LMC feature description.
/// LMC keeps every feature with its prior. ICM collapses to one feature with
/// the first free feature's LKJ prior. SingleTask keeps the main-task diagonal
/// entry of every feature as a fixed 1 x 1 matrix.
ModelSpec make_model(Method method, const std::vector<SEKernelParams>& bases, const PriorSpec& lmc_prior,
                     double noise_variance, const ICMKernelRule& icm_rule = {});

struct BOConfig {
    Box domain;
    double threshold = 1.0;
    double delta = 0.05;
    double rho = 0.05;
    /// Mesh of the theoretical grid; enters only through |I|.
    double tau = 0.001;
    RegularityBudget budget;
    std::size_t fidelity_ratio = 8;
    std::size_t candidate_count = 4096;
    std::size_t max_main_evals = 40;
    std::size_t initial_supplementary = 8;
    std::vector<Eigen::VectorXd> initial_safe_inputs;
    /// Standard deviation of the Gaussian noise added to every observation.
    double observation_noise = 0.0;
    std::uint64_t seed = 0;
    MCMCOptions mcmc;
    /// Reuse the previous chain state as the next starting point.
    bool warm_start = true;
    DataFitMode nu_data_fit = DataFitMode::Observed;
};

struct HistoryRecord {
    std::size_t iteration = 0;
    std::size_t task = 0;
    Eigen::VectorXd x;
    double observation = 0.0;
    double true_value = 0.0;
    bool safe_predicted = false;
    /// Main-task evaluation whose true value exceeded the threshold.
    bool violation = false;
    RobustBound bound;
    double incumbent = 0.0;
    double regret = 0.0;
};

struct IterationDiagnostics {
    std::size_t iteration = 0;
    RobustBound bound;
    std::vector<double> feature_gamma;
    /// Per feature: correlation between tasks 0 and 1 in the nominal matrix and
    /// its range over the confidence set. Empty for single-task models.
    std::vector<double> nominal_r;
    std::vector<double> set_r_min;
    std::vector<double> set_r_max;
    double acceptance_rate = 0.0;
    std::size_t set_size = 0;
    std::size_t safe_count = 0;
    bool safe_set_empty = false;
};

struct BOHistory {
    std::vector<HistoryRecord> records;
    std::vector<IterationDiagnostics> diagnostics;
    std::size_t violation_count = 0;
    std::size_t dim = 0;
    double optimum_value = 0.0;
    std::vector<std::string> warnings;
    /// Set when the run stopped early; the records up to that point are kept.
    std::optional<std::string> error;

    /// Regret after each main evaluation (initial design included).
    std::vector<double> main_regret() const;
};

/// Main-task candidates whose certified upper bound mu + sqrt(beta_bar) sigma + psi
/// stays at or below the threshold. Returns indices into `candidates`.
std::vector<std::size_t> safe_set(const PosteriorModel& model, const RobustBound& bound, double threshold,
                                  const Eigen::MatrixXd& candidates, std::size_t main_task = 0);

/// Index of the safe candidate minimizing mu - sqrt(beta_bar) sigma on the
/// main task; ties go to larger sigma, then to the lexicographically smaller input.
std::size_t acquire_main(const PosteriorModel& model, const RobustBound& bound, const Eigen::MatrixXd& candidates,
                         const std::vector<std::size_t>& safe, std::size_t main_task = 0);

/// Index of the candidate with the largest posterior variance on `task`;
/// ties go to the lexicographically smaller input.
std::size_t acquire_supplementary(const PosteriorModel& model, const Eigen::MatrixXd& candidates, std::size_t task = 1);

/// Greedy batch of `count` variance maximizers. After each pick the variance is
/// conditioned on a noisy observation there, which equals refitting with the
/// picked input because the GP variance does not depend on observed values.
std::vector<std::size_t> acquire_supplementary_batch(const PosteriorModel& model, const Eigen::MatrixXd& candidates,
                                                     std::size_t count, std::size_t task = 1);

/// First point of a Sobol stream with f(x) <= threshold - margin on the main task.
std::optional<Eigen::VectorXd> find_initial_safe_input(const SyntheticFunction& f, double threshold, double margin,
                                                       std::uint64_t seed, std::size_t max_draws = 65536);

/// Runs the optimizer. The objective must have its optimum located.
BOHistory run(const BOConfig& config, const SyntheticFunction& objective, const ModelSpec& model);

/// Columns: iteration, task, x_1..x_d, observation, safe_predicted, beta, nu,
/// gamma, beta_bar, incumbent, regret, violation.
void write_history_csv(std::ostream& out, const BOHistory& history);

void write_diagnostics_csv(std::ostream& out, const BOHistory& history);

}  // namespace lmcsafe
