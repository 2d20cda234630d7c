#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "lmcsafe/inference.hpp"
#include "lmcsafe/kernels.hpp"

namespace lmcsafe {

/// LKJ(eta) prior on the correlation shape; the diagonal (variances) is held fixed.
struct LKJPrior {
    double eta = 1.0;
    Eigen::VectorXd variances;
};

/// Prior for one feature's inter-task matrix: either fixed or LKJ.
using FeaturePrior = std::variant<CorrelationMatrix, LKJPrior>;

class PriorSpec {
public:
    PriorSpec() = default;
    explicit PriorSpec(std::vector<FeaturePrior> features);

    std::size_t features() const { return features_.size(); }
    const FeaturePrior& feature(std::size_t i) const { return features_.at(i); }
    bool is_fixed(std::size_t i) const { return std::holds_alternative<CorrelationMatrix>(features_.at(i)); }
    std::size_t free_features() const;

private:
    std::vector<FeaturePrior> features_;
};

/// Unnormalized LKJ log density (eta - 1) log det C for a unit-diagonal C.
double lkj_log_density(const CorrelationMatrix& c, double eta);

/// Number of canonical partial correlations of a u x u correlation matrix.
std::size_t cpc_count(std::size_t tasks);

/// Correlation matrix from Fisher-z transformed canonical partial
/// correlations (row-major over i < j). For u = 2 this is [[1, tanh z], [tanh z, 1]].
/// Correlations are clipped to |r| <= 1 - 1e-12 so that the result stays positive definite.
Eigen::MatrixXd correlation_from_cpc_z(const Eigen::VectorXd& z, std::size_t tasks);

/// Log density of the LKJ(eta) prior expressed in the Fisher-z CPC coordinates
/// (LKJ density of the implied matrix times the Jacobian of the transform).
double lkj_log_density_z(const Eigen::VectorXd& z, std::size_t tasks, double eta);

struct MCMCOptions {
    std::size_t n_samples = 200;
    std::size_t burn_in = 500;
    std::size_t thinning = 5;
    double initial_step = 0.1;
    double target_acceptance = 0.3;
    std::uint64_t seed = 0;
    /// Starting Fisher-z coordinates per feature (empty entries start at 0).
    std::vector<Eigen::VectorXd> initial_state;
    /// Record every step in the chain trace.
    bool record_trace = false;
    FitOptions fit;
    /// Optional prebuilt solver for the single-free-feature, two-task case
    /// (see make_offdiagonal_solver). Built internally when absent.
    std::shared_ptr<const AffineGramSolver> affine_solver;
};

struct CorrelationSample {
    CorrelationTuple sigmas;
    /// Fisher-z CPC coordinates per feature; empty for fixed features.
    std::vector<Eigen::VectorXd> z;
    /// Log posterior density in the sampler's coordinates (log likelihood + log prior + log Jacobian).
    double score = 0.0;
};

struct TraceRow {
    std::size_t step = 0;
    std::size_t feature = 0;
    double r = 0.0;
    double log_posterior = 0.0;
    bool accepted = false;
};

struct MCMCResult {
    std::vector<CorrelationSample> samples;
    double acceptance_rate = 0.0;
    std::vector<double> step_sizes;
    std::vector<TraceRow> trace;
    std::vector<std::string> warnings;
};

/// Builds H-tuples of matrices from per-feature CPC coordinates. Fixed features
/// take their prior matrix; LKJ features are D R(z) D with D = diag(sqrt(variances)).
CorrelationTuple correlations_from_state(const PriorSpec& prior, const std::vector<Eigen::VectorXd>& z, std::size_t tasks);

/// Random-walk Metropolis over Fisher-z coordinates of the free features.
/// Target: log marginal likelihood + sum of LKJ log densities (in z coordinates).
/// Step sizes adapt toward the target acceptance during burn-in and are then frozen.
MCMCResult mh_sample(const TaskedDataset& data, const LMCKernel& kernel_template, const PriorSpec& prior,
                     const MCMCOptions& options);

/// Independent chains, merged in ascending seed order.
MCMCResult mh_sample_chains(const TaskedDataset& data, const LMCKernel& kernel_template, const PriorSpec& prior,
                            const MCMCOptions& options, std::vector<std::uint64_t> seeds);

/// Confidence set C_rho built from scored samples.
struct CorrelationSet {
    std::vector<CorrelationTuple> members;
    std::vector<double> posterior_scores;
    CorrelationTuple nominal;
    double rho = 0.05;
};

/// Keeps the ceil((1 - rho) S) highest-scoring samples, ordered by descending
/// score; the nominal is the top member.
CorrelationSet build_confidence_set(const std::vector<CorrelationSample>& samples, double rho);

/// Writes the chain trace. Columns: step, feature, r, log_posterior, accepted.
void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace);

}  // namespace lmcsafe
