#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmcsafe/safe_bo.hpp"
#include "lmcsafe/synthesis.hpp"

namespace lmcsafe {

/// Thrown for malformed or out-of-range configuration; the message names the field.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FeatureConfig {
    std::vector<double> lengthscales;
    double variance = 1.0;
    /// "lkj" or "fixed".
    std::string prior = "fixed";
    double eta = 1.0;
    /// Diagonal of the LKJ feature's matrix.
    std::vector<double> variances;
    /// Matrix of a fixed feature (row major, u x u).
    std::vector<std::vector<double>> matrix;
};

struct SynthesisConfig {
    std::vector<double> norms;
    /// Off-diagonal correlation of each feature of the ground truth (two tasks).
    std::vector<double> correlations;
    std::vector<std::size_t> n_centers{200};
    /// Signal variance of each ground-truth base kernel. Empty means the
    /// model's feature variances; smaller values leave the model conservative.
    std::vector<double> variances;
};

struct MCMCConfig {
    std::size_t n_samples = 200;
    std::size_t burn_in = 500;
    std::size_t thinning = 5;
    double initial_step = 0.1;
    double target_acceptance = 0.3;
    bool warm_start = true;
};

struct ExperimentConfig {
    int schema_version = 1;
    std::string name = "experiment";
    std::vector<Method> methods{Method::LMC, Method::ICM, Method::SingleTask};
    std::size_t repetitions = 1;
    std::uint64_t seed = 0;
    std::string output_dir = "results";

    std::vector<double> lower;
    std::vector<double> upper;
    double threshold = 1.0;
    double delta = 0.05;
    double rho = 0.05;
    double tau = 0.001;
    double lipschitz_f = 0.0;
    double omega_mu = 0.0;
    double omega_sigma = 0.0;

    std::size_t fidelity_ratio = 8;
    std::size_t candidate_count = 4096;
    std::size_t max_main_evals = 40;
    std::size_t initial_supplementary = 8;
    /// Explicit initial safe inputs; when empty one is drawn per repetition.
    std::vector<std::vector<double>> initial_safe_inputs;
    /// Required gap below the threshold for an automatically drawn initial input.
    double initial_safe_margin = 0.5;
    double observation_noise = 0.0;
    double noise_variance = 1e-4;
    /// "observed" or "full"; see DataFitMode.
    std::string nu_data_fit = "observed";

    std::vector<FeatureConfig> features;
    ICMKernelRule icm_kernel;
    SynthesisConfig synthesis;
    MCMCConfig mcmc;
    std::size_t optimum_starts = 1024;

    std::size_t dim() const { return lower.size(); }
    std::size_t tasks() const;
};

/// Parses and validates. Unknown keys are rejected; missing keys take defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Complete JSON document with every field (defaults included).
std::string emit_config(const ExperimentConfig& config);
/// Throws ConfigError naming the first invalid field.
void validate_config(const ExperimentConfig& config);

/// Building blocks shared by run_experiment and the tests.
Box config_domain(const ExperimentConfig& config);
std::vector<SEKernelParams> config_bases(const ExperimentConfig& config);
PriorSpec config_prior(const ExperimentConfig& config);
LMCKernel truth_kernel(const ExperimentConfig& config);
ModelSpec config_model(const ExperimentConfig& config, Method method);
/// Ground truth for one repetition, with its optimum located.
SyntheticFunction make_objective(const ExperimentConfig& config, std::uint64_t run_seed);
BOConfig make_bo_config(const ExperimentConfig& config, const SyntheticFunction& objective, std::uint64_t run_seed);

struct RunSummary {
    Method method = Method::LMC;
    std::size_t repetition = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::size_t violations = 0;
    double final_regret = 0.0;
    double seconds = 0.0;
    std::string history_file;
};

struct ExperimentOptions {
    std::filesystem::path output_dir;
    std::size_t jobs = 1;
    bool quiet = false;
    std::function<void(const std::string&)> log;
};

struct ExperimentResult {
    std::vector<RunSummary> runs;
    double seconds = 0.0;
    std::size_t failed() const;
};

/// Runs every (method, repetition) pair and writes run CSVs, aggregates and
/// the manifest into options.output_dir.
ExperimentResult run_experiment(const ExperimentConfig& config, const ExperimentOptions& options);

struct AggregateRow {
    std::size_t n = 0;
    double q25 = 0.0;
    double median = 0.0;
    double q75 = 0.0;
    std::size_t violations_total = 0;
};

/// Linearly interpolated quantile (the usual "type 7" definition).
double quantile(std::vector<double> values, double p);

/// Aggregates per main evaluation index n (1-based) over the given regret
/// sequences; violations are cumulative over all runs up to n.
std::vector<AggregateRow> aggregate(const std::vector<std::vector<double>>& regrets,
                                    const std::vector<std::vector<std::size_t>>& violations);

void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows);
std::vector<AggregateRow> read_aggregate_csv(std::istream& in);

/// Rebuilds aggregate_<method>.csv from the run CSVs under dir/runs.
/// Returns the methods found.
std::vector<std::string> recompute_aggregates(const std::filesystem::path& dir);

/// Writes text to path through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

struct DemoOptions {
    std::uint64_t seed = 0;
    std::size_t resolution = 101;
    ExpressivenessOptions shape;
};

/// Writes icm.csv and lmc.csv (columns x_1..x_d, task, value) into out_dir.
void demo_expressiveness(const DemoOptions& options, const std::filesystem::path& out_dir);

}  // namespace lmcsafe
