#include "lmcsafe/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "lmcsafe/csv.hpp"

namespace lmcsafe {

using json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "1.0.0";

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
        throw ConfigError(where.empty() ? "configuration must be a JSON object" : "'" + where + "' must be an object");
    }
    for (const auto& item : obj.items()) {
        bool known = false;
        for (const char* key : allowed) {
            known = known || item.key() == key;
        }
        if (!known) {
            throw ConfigError("unknown key '" + (where.empty() ? item.key() : where + "." + item.key()) + "'");
        }
    }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) {
        return;
    }
    const std::string field = where.empty() ? key : where + "." + key;
    try {
        const json& v = obj.at(key);
        if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t> || std::is_same_v<T, int>) {
            if (!v.is_number_integer()) {
                throw ConfigError("'" + field + "' must be an integer");
            }
            if constexpr (!std::is_same_v<T, int>) {
                if (v.get<long long>() < 0) {
                    throw ConfigError("'" + field + "' must be nonnegative");
                }
            }
        }
        out = v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("'" + field + "' has the wrong type");
    }
}

std::string join(const std::string& where, const std::string& key) {
    return where.empty() ? key : where + "." + key;
}

}  // namespace

std::size_t ExperimentConfig::tasks() const {
    if (features.empty()) {
        return 0;
    }
    const auto& f = features.front();
    return f.prior == "lkj" ? f.variances.size() : f.matrix.size();
}

ExperimentConfig parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("malformed JSON: ") + e.what());
    }
    check_keys(doc, "",
               {"schema_version", "name", "methods", "repetitions", "seed", "output_dir", "domain", "threshold", "delta",
                "rho", "tau", "regularity", "fidelity_ratio", "candidate_count", "max_main_evals",
                "initial_supplementary", "initial_safe_inputs", "initial_safe_margin", "observation_noise",
                "noise_variance", "nu_data_fit", "features", "icm_kernel", "synthesis", "mcmc", "optimum_starts"});
    ExperimentConfig c;
    read(doc, "schema_version", c.schema_version, "");
    read(doc, "name", c.name, "");
    if (doc.contains("methods")) {
        std::vector<std::string> names;
        read(doc, "methods", names, "");
        c.methods.clear();
        for (const auto& n : names) {
            try {
                c.methods.push_back(method_from_string(n));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("'methods': ") + e.what());
            }
        }
    }
    read(doc, "repetitions", c.repetitions, "");
    read(doc, "seed", c.seed, "");
    read(doc, "output_dir", c.output_dir, "");
    if (doc.contains("domain")) {
        const json& d = doc["domain"];
        check_keys(d, "domain", {"lower", "upper"});
        read(d, "lower", c.lower, "domain");
        read(d, "upper", c.upper, "domain");
    }
    read(doc, "threshold", c.threshold, "");
    read(doc, "delta", c.delta, "");
    read(doc, "rho", c.rho, "");
    read(doc, "tau", c.tau, "");
    if (doc.contains("regularity")) {
        const json& r = doc["regularity"];
        check_keys(r, "regularity", {"lipschitz_f", "omega_mu", "omega_sigma"});
        read(r, "lipschitz_f", c.lipschitz_f, "regularity");
        read(r, "omega_mu", c.omega_mu, "regularity");
        read(r, "omega_sigma", c.omega_sigma, "regularity");
    }
    read(doc, "fidelity_ratio", c.fidelity_ratio, "");
    read(doc, "candidate_count", c.candidate_count, "");
    read(doc, "max_main_evals", c.max_main_evals, "");
    read(doc, "initial_supplementary", c.initial_supplementary, "");
    read(doc, "initial_safe_inputs", c.initial_safe_inputs, "");
    read(doc, "initial_safe_margin", c.initial_safe_margin, "");
    read(doc, "observation_noise", c.observation_noise, "");
    read(doc, "noise_variance", c.noise_variance, "");
    read(doc, "nu_data_fit", c.nu_data_fit, "");
    if (doc.contains("features")) {
        if (!doc["features"].is_array()) {
            throw ConfigError("'features' must be an array");
        }
        for (std::size_t i = 0; i < doc["features"].size(); ++i) {
            const json& f = doc["features"][i];
            const std::string where = "features[" + std::to_string(i) + "]";
            check_keys(f, where, {"lengthscales", "variance", "prior"});
            FeatureConfig fc;
            read(f, "lengthscales", fc.lengthscales, where);
            read(f, "variance", fc.variance, where);
            if (f.contains("prior")) {
                const json& p = f["prior"];
                const std::string pw = join(where, "prior");
                check_keys(p, pw, {"type", "eta", "variances", "matrix"});
                read(p, "type", fc.prior, pw);
                read(p, "eta", fc.eta, pw);
                read(p, "variances", fc.variances, pw);
                read(p, "matrix", fc.matrix, pw);
            }
            c.features.push_back(std::move(fc));
        }
    }
    if (doc.contains("icm_kernel")) {
        const json& k = doc["icm_kernel"];
        check_keys(k, "icm_kernel", {"lengthscale", "variance"});
        read(k, "lengthscale", c.icm_kernel.lengthscale, "icm_kernel");
        read(k, "variance", c.icm_kernel.variance, "icm_kernel");
    }
    if (doc.contains("synthesis")) {
        const json& s = doc["synthesis"];
        check_keys(s, "synthesis", {"norms", "correlations", "n_centers", "variances"});
        read(s, "norms", c.synthesis.norms, "synthesis");
        read(s, "correlations", c.synthesis.correlations, "synthesis");
        read(s, "n_centers", c.synthesis.n_centers, "synthesis");
        read(s, "variances", c.synthesis.variances, "synthesis");
    }
    if (doc.contains("mcmc")) {
        const json& m = doc["mcmc"];
        check_keys(m, "mcmc", {"n_samples", "burn_in", "thinning", "initial_step", "target_acceptance", "warm_start"});
        read(m, "n_samples", c.mcmc.n_samples, "mcmc");
        read(m, "burn_in", c.mcmc.burn_in, "mcmc");
        read(m, "thinning", c.mcmc.thinning, "mcmc");
        read(m, "initial_step", c.mcmc.initial_step, "mcmc");
        read(m, "target_acceptance", c.mcmc.target_acceptance, "mcmc");
        read(m, "warm_start", c.mcmc.warm_start, "mcmc");
    }
    read(doc, "optimum_starts", c.optimum_starts, "");
    validate_config(c);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open configuration file '" + path.string() + "'");
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

namespace {

json config_json(const ExperimentConfig& c) {
    json doc;
    doc["schema_version"] = c.schema_version;
    doc["name"] = c.name;
    json methods = json::array();
    for (auto m : c.methods) {
        methods.push_back(to_string(m));
    }
    doc["methods"] = methods;
    doc["repetitions"] = c.repetitions;
    doc["seed"] = c.seed;
    doc["output_dir"] = c.output_dir;
    doc["domain"] = {{"lower", c.lower}, {"upper", c.upper}};
    doc["threshold"] = c.threshold;
    doc["delta"] = c.delta;
    doc["rho"] = c.rho;
    doc["tau"] = c.tau;
    doc["regularity"] = {{"lipschitz_f", c.lipschitz_f}, {"omega_mu", c.omega_mu}, {"omega_sigma", c.omega_sigma}};
    doc["fidelity_ratio"] = c.fidelity_ratio;
    doc["candidate_count"] = c.candidate_count;
    doc["max_main_evals"] = c.max_main_evals;
    doc["initial_supplementary"] = c.initial_supplementary;
    doc["initial_safe_inputs"] = c.initial_safe_inputs;
    doc["initial_safe_margin"] = c.initial_safe_margin;
    doc["observation_noise"] = c.observation_noise;
    doc["noise_variance"] = c.noise_variance;
    doc["nu_data_fit"] = c.nu_data_fit;
    json features = json::array();
    for (const auto& f : c.features) {
        json prior = {{"type", f.prior}};
        if (f.prior == "lkj") {
            prior["eta"] = f.eta;
            prior["variances"] = f.variances;
        } else {
            prior["matrix"] = f.matrix;
        }
        features.push_back({{"lengthscales", f.lengthscales}, {"variance", f.variance}, {"prior", prior}});
    }
    doc["features"] = features;
    doc["icm_kernel"] = {{"lengthscale", c.icm_kernel.lengthscale}, {"variance", c.icm_kernel.variance}};
    doc["synthesis"] = {{"norms", c.synthesis.norms},
                        {"correlations", c.synthesis.correlations},
                        {"n_centers", c.synthesis.n_centers},
                        {"variances", c.synthesis.variances}};
    doc["mcmc"] = {{"n_samples", c.mcmc.n_samples},
                   {"burn_in", c.mcmc.burn_in},
                   {"thinning", c.mcmc.thinning},
                   {"initial_step", c.mcmc.initial_step},
                   {"target_acceptance", c.mcmc.target_acceptance},
                   {"warm_start", c.mcmc.warm_start}};
    doc["optimum_starts"] = c.optimum_starts;
    return doc;
}

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) {
        throw ConfigError("'" + field + "' " + what);
    }
}

}  // namespace

std::string emit_config(const ExperimentConfig& config) {
    return config_json(config).dump(2) + "\n";
}

void validate_config(const ExperimentConfig& c) {
    require(c.schema_version == 1, "schema_version", "must be 1");
    require(c.repetitions >= 1, "repetitions", "must be at least 1");
    require(!c.methods.empty(), "methods", "must list at least one method");
    require(!c.lower.empty(), "domain.lower", "must be nonempty");
    require(c.lower.size() == c.upper.size(), "domain.upper", "must have as many entries as domain.lower");
    for (std::size_t j = 0; j < c.lower.size(); ++j) {
        require(std::isfinite(c.lower[j]) && std::isfinite(c.upper[j]) && c.lower[j] < c.upper[j], "domain",
                "needs finite bounds with lower < upper");
    }
    require(std::isfinite(c.threshold), "threshold", "must be finite");
    require(c.delta > 0.0 && c.delta < 1.0, "delta", "must lie in (0, 1)");
    require(c.rho > 0.0 && c.rho < 1.0, "rho", "must lie in (0, 1)");
    require(c.tau > 0.0, "tau", "must be positive");
    require(c.lipschitz_f >= 0.0, "regularity.lipschitz_f", "must be nonnegative");
    require(c.omega_mu >= 0.0, "regularity.omega_mu", "must be nonnegative");
    require(c.omega_sigma >= 0.0, "regularity.omega_sigma", "must be nonnegative");
    require(c.candidate_count >= 1, "candidate_count", "must be at least 1");
    require(c.initial_safe_margin >= 0.0, "initial_safe_margin", "must be nonnegative");
    require(c.observation_noise >= 0.0, "observation_noise", "must be nonnegative");
    require(c.noise_variance > 0.0, "noise_variance", "must be positive");
    require(c.nu_data_fit == "observed" || c.nu_data_fit == "full", "nu_data_fit", "must be 'observed' or 'full'");
    require(c.optimum_starts >= 1, "optimum_starts", "must be at least 1");
    for (std::size_t k = 0; k < c.initial_safe_inputs.size(); ++k) {
        const auto& x = c.initial_safe_inputs[k];
        const std::string field = "initial_safe_inputs[" + std::to_string(k) + "]";
        require(x.size() == c.lower.size(), field, "has the wrong dimension");
        for (std::size_t j = 0; j < x.size(); ++j) {
            require(x[j] >= c.lower[j] && x[j] <= c.upper[j], field, "lies outside the domain");
        }
    }

    require(!c.features.empty(), "features", "must list at least one feature");
    const std::size_t u = c.tasks();
    for (std::size_t i = 0; i < c.features.size(); ++i) {
        const auto& f = c.features[i];
        const std::string where = "features[" + std::to_string(i) + "]";
        require(f.lengthscales.size() == c.lower.size(), where + ".lengthscales", "must have one entry per input dimension");
        for (double l : f.lengthscales) {
            require(l > 0.0, where + ".lengthscales", "must be positive");
        }
        require(f.variance > 0.0, where + ".variance", "must be positive");
        if (f.prior == "lkj") {
            require(f.eta > 0.0, where + ".prior.eta", "must be positive");
            require(f.variances.size() >= 2, where + ".prior.variances", "needs one entry per task (at least two)");
            for (double v : f.variances) {
                require(v > 0.0, where + ".prior.variances", "must be positive");
            }
            require(f.variances.size() == u, where + ".prior.variances", "disagrees with the number of tasks");
        } else if (f.prior == "fixed") {
            require(!f.matrix.empty() && f.matrix.size() == u, where + ".prior.matrix", "must be u x u with u tasks");
            Eigen::MatrixXd m(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(u));
            for (std::size_t r = 0; r < u; ++r) {
                require(f.matrix[r].size() == u, where + ".prior.matrix", "must be square");
                for (std::size_t s = 0; s < u; ++s) {
                    m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s)) = f.matrix[r][s];
                }
            }
            try {
                CorrelationMatrix check(m);
            } catch (const std::exception& e) {
                throw ConfigError("'" + where + ".prior.matrix' " + e.what());
            }
        } else {
            throw ConfigError("'" + where + ".prior.type' must be 'lkj' or 'fixed'");
        }
    }
    for (auto m : c.methods) {
        if (m != Method::SingleTask) {
            require(u >= 2, "methods", "multi-task methods need at least two tasks");
        }
        if (m == Method::ICM) {
            bool any_free = false;
            for (const auto& f : c.features) {
                any_free = any_free || f.prior == "lkj";
            }
            require(any_free || c.features.size() == 1, "methods", "ICM needs an LKJ feature or a single feature");
        }
    }
    require(c.icm_kernel.lengthscale == "min" || c.icm_kernel.lengthscale == "first", "icm_kernel.lengthscale",
            "must be 'min' or 'first'");
    require(c.icm_kernel.variance == "sum" || c.icm_kernel.variance == "first", "icm_kernel.variance",
            "must be 'sum' or 'first'");
    require(c.synthesis.norms.size() == c.features.size(), "synthesis.norms", "needs one entry per feature");
    for (double n : c.synthesis.norms) {
        require(n >= 0.0 && std::isfinite(n), "synthesis.norms", "must be nonnegative");
    }
    require(c.synthesis.correlations.size() == c.features.size(), "synthesis.correlations", "needs one entry per feature");
    require(u == 2, "synthesis.correlations", "ground-truth correlations are defined for two tasks");
    for (double r : c.synthesis.correlations) {
        require(r > -1.0 && r < 1.0, "synthesis.correlations", "must lie in (-1, 1)");
    }
    require(c.synthesis.n_centers.size() == 1 || c.synthesis.n_centers.size() == c.features.size(), "synthesis.n_centers",
            "needs one entry or one per feature");
    for (auto n : c.synthesis.n_centers) {
        require(n >= 1, "synthesis.n_centers", "must be positive");
    }
    require(c.synthesis.variances.empty() || c.synthesis.variances.size() == c.features.size(), "synthesis.variances",
            "needs one entry per feature (or none)");
    for (double v : c.synthesis.variances) {
        require(v > 0.0, "synthesis.variances", "must be positive");
    }
    require(c.mcmc.n_samples >= 1, "mcmc.n_samples", "must be at least 1");
    require(c.mcmc.thinning >= 1, "mcmc.thinning", "must be at least 1");
    require(c.mcmc.initial_step > 0.0, "mcmc.initial_step", "must be positive");
    require(c.mcmc.target_acceptance > 0.0 && c.mcmc.target_acceptance < 1.0, "mcmc.target_acceptance",
            "must lie in (0, 1)");
}

Box config_domain(const ExperimentConfig& c) {
    return Box(Eigen::Map<const Eigen::VectorXd>(c.lower.data(), static_cast<Eigen::Index>(c.lower.size())),
               Eigen::Map<const Eigen::VectorXd>(c.upper.data(), static_cast<Eigen::Index>(c.upper.size())));
}

std::vector<SEKernelParams> config_bases(const ExperimentConfig& c) {
    std::vector<SEKernelParams> out;
    for (const auto& f : c.features) {
        out.emplace_back(Eigen::Map<const Eigen::VectorXd>(f.lengthscales.data(), static_cast<Eigen::Index>(f.lengthscales.size())),
                         f.variance);
    }
    return out;
}

namespace {

Eigen::MatrixXd fixed_matrix(const FeatureConfig& f) {
    const auto u = static_cast<Eigen::Index>(f.matrix.size());
    Eigen::MatrixXd m(u, u);
    for (Eigen::Index r = 0; r < u; ++r) {
        for (Eigen::Index s = 0; s < u; ++s) {
            m(r, s) = f.matrix[static_cast<std::size_t>(r)][static_cast<std::size_t>(s)];
        }
    }
    return m;
}

Eigen::VectorXd feature_diagonal(const FeatureConfig& f) {
    if (f.prior == "lkj") {
        return Eigen::Map<const Eigen::VectorXd>(f.variances.data(), static_cast<Eigen::Index>(f.variances.size()));
    }
    return fixed_matrix(f).diagonal();
}

}  // namespace

PriorSpec config_prior(const ExperimentConfig& c) {
    std::vector<FeaturePrior> priors;
    for (const auto& f : c.features) {
        if (f.prior == "lkj") {
            priors.emplace_back(LKJPrior{f.eta, feature_diagonal(f)});
        } else {
            priors.emplace_back(CorrelationMatrix(fixed_matrix(f)));
        }
    }
    return PriorSpec(std::move(priors));
}

LMCKernel truth_kernel(const ExperimentConfig& c) {
    auto bases = config_bases(c);
    for (std::size_t i = 0; i < c.synthesis.variances.size(); ++i) {
        bases[i].signal_variance = c.synthesis.variances[i];
    }
    std::vector<LMCFeature> features;
    for (std::size_t i = 0; i < c.features.size(); ++i) {
        const Eigen::VectorXd diag = feature_diagonal(c.features[i]);
        features.push_back({bases[i], CorrelationMatrix::two_task(c.synthesis.correlations[i], diag[0], diag[1])});
    }
    return LMCKernel(std::move(features));
}

ModelSpec config_model(const ExperimentConfig& c, Method method) {
    return make_model(method, config_bases(c), config_prior(c), c.noise_variance, c.icm_kernel);
}

SyntheticFunction make_objective(const ExperimentConfig& c, std::uint64_t run_seed) {
    SyntheticFunction f = sample_function(truth_kernel(c), c.synthesis.norms, c.synthesis.n_centers, run_seed, config_domain(c));
    OptimumSearch search;
    search.starts = c.optimum_starts;
    search.seed = run_seed;
    f.set_optimum(locate_global_minimum(f, 0, search));
    return f;
}

BOConfig make_bo_config(const ExperimentConfig& c, const SyntheticFunction& objective, std::uint64_t run_seed) {
    BOConfig b;
    b.domain = config_domain(c);
    b.threshold = c.threshold;
    b.delta = c.delta;
    b.rho = c.rho;
    b.tau = c.tau;
    b.budget = {c.lipschitz_f, c.omega_mu, c.omega_sigma, c.tau};
    b.fidelity_ratio = c.fidelity_ratio;
    b.candidate_count = c.candidate_count;
    b.max_main_evals = c.max_main_evals;
    b.initial_supplementary = c.initial_supplementary;
    b.observation_noise = c.observation_noise;
    b.seed = run_seed;
    b.mcmc.n_samples = c.mcmc.n_samples;
    b.mcmc.burn_in = c.mcmc.burn_in;
    b.mcmc.thinning = c.mcmc.thinning;
    b.mcmc.initial_step = c.mcmc.initial_step;
    b.mcmc.target_acceptance = c.mcmc.target_acceptance;
    b.warm_start = c.mcmc.warm_start;
    b.nu_data_fit = c.nu_data_fit == "full" ? DataFitMode::Full : DataFitMode::Observed;
    for (const auto& x : c.initial_safe_inputs) {
        b.initial_safe_inputs.emplace_back(Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())));
    }
    if (b.initial_safe_inputs.empty()) {
        auto x = find_initial_safe_input(objective, c.threshold, c.initial_safe_margin, run_seed);
        if (!x) {
            throw std::runtime_error("no input with f <= threshold - initial_safe_margin was found");
        }
        b.initial_safe_inputs.push_back(*x);
    }
    return b;
}

std::size_t ExperimentResult::failed() const {
    return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const RunSummary& r) { return !r.ok; }));
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write '" + tmp.string() + "'");
        }
        out << text;
        if (!out) {
            throw std::runtime_error("write to '" + tmp.string() + "' failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

double quantile(std::vector<double> values, double p) {
    if (values.empty()) {
        throw std::invalid_argument("quantile: no values");
    }
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const double frac = h - static_cast<double>(lo);
    if (frac == 0.0 || lo + 1 >= values.size() || values[lo] == values[lo + 1]) {
        return values[lo];
    }
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

std::vector<AggregateRow> aggregate(const std::vector<std::vector<double>>& regrets,
                                    const std::vector<std::vector<std::size_t>>& violations) {
    if (regrets.size() != violations.size()) {
        throw std::invalid_argument("aggregate: regret and violation sequences differ in count");
    }
    std::size_t longest = 0;
    for (const auto& r : regrets) {
        longest = std::max(longest, r.size());
    }
    std::vector<AggregateRow> rows;
    for (std::size_t n = 1; n <= longest; ++n) {
        std::vector<double> values;
        AggregateRow row;
        row.n = n;
        for (std::size_t k = 0; k < regrets.size(); ++k) {
            if (regrets[k].size() >= n) {
                values.push_back(regrets[k][n - 1]);
            }
            if (!violations[k].empty()) {
                row.violations_total += violations[k][std::min(n, violations[k].size()) - 1];
            }
        }
        row.q25 = quantile(values, 0.25);
        row.median = quantile(values, 0.5);
        row.q75 = quantile(values, 0.75);
        rows.push_back(row);
    }
    return rows;
}

void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows) {
    out << "n,regret_q25,regret_median,regret_q75,violations_total\n";
    for (const auto& r : rows) {
        out << r.n << ',' << csv::format(r.q25) << ',' << csv::format(r.median) << ',' << csv::format(r.q75) << ','
            << r.violations_total << '\n';
    }
}

std::vector<AggregateRow> read_aggregate_csv(std::istream& in) {
    const csv::Table t = csv::read(in);
    const std::size_t cn = t.column("n"), c25 = t.column("regret_q25"), cm = t.column("regret_median"),
                      c75 = t.column("regret_q75"), cv = t.column("violations_total");
    std::vector<AggregateRow> rows;
    for (const auto& r : t.rows) {
        AggregateRow a;
        a.n = std::stoul(r[cn]);
        a.q25 = csv::parse_double(r[c25]);
        a.median = csv::parse_double(r[cm]);
        a.q75 = csv::parse_double(r[c75]);
        a.violations_total = std::stoul(r[cv]);
        rows.push_back(a);
    }
    return rows;
}

std::vector<std::string> recompute_aggregates(const std::filesystem::path& dir) {
    const std::filesystem::path runs = dir / "runs";
    if (!std::filesystem::is_directory(runs)) {
        throw std::runtime_error("'" + runs.string() + "' is not a directory");
    }
    const std::regex name_re(R"(^([A-Za-z]+)_rep(\d+)\.csv$)");
    std::map<std::string, std::map<std::size_t, std::filesystem::path>> files;
    for (const auto& entry : std::filesystem::directory_iterator(runs)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (std::regex_match(name, m, name_re)) {
            files[m[1].str()][std::stoul(m[2].str())] = entry.path();
        }
    }
    std::vector<std::string> methods;
    for (const auto& [method, by_rep] : files) {
        std::vector<std::vector<double>> regrets;
        std::vector<std::vector<std::size_t>> violations;
        for (const auto& [rep, path] : by_rep) {
            std::ifstream in(path);
            const csv::Table t = csv::read(in);
            const std::size_t ct = t.column("task"), cr = t.column("regret"), cv = t.column("violation");
            std::vector<double> reg;
            std::vector<std::size_t> vio;
            std::size_t count = 0;
            for (const auto& row : t.rows) {
                if (row[ct] != "0") {
                    continue;
                }
                count += row[cv] == "1" ? 1 : 0;
                reg.push_back(csv::parse_double(row[cr]));
                vio.push_back(count);
            }
            regrets.push_back(std::move(reg));
            violations.push_back(std::move(vio));
        }
        std::ostringstream out;
        write_aggregate_csv(out, aggregate(regrets, violations));
        write_file_atomic(dir / ("aggregate_" + method + ".csv"), out.str());
        methods.push_back(method);
    }
    return methods;
}

namespace {

std::string run_file_name(Method m, std::size_t rep) {
    std::ostringstream s;
    s << to_string(m) << "_rep" << std::setw(3) << std::setfill('0') << rep << ".csv";
    return s.str();
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const ExperimentOptions& options) {
    validate_config(config);
    const auto start = std::chrono::steady_clock::now();
    const std::filesystem::path out = options.output_dir.empty() ? std::filesystem::path(config.output_dir) : options.output_dir;
    std::filesystem::create_directories(out / "runs");
    std::filesystem::create_directories(out / "diagnostics");
    // Stale run files from an earlier invocation would leak into the aggregates.
    for (const auto& sub : {"runs", "diagnostics", "failed"}) {
        if (std::filesystem::is_directory(out / sub)) {
            for (const auto& e : std::filesystem::directory_iterator(out / sub)) {
                if (e.path().extension() == ".csv") {
                    std::filesystem::remove(e.path());
                }
            }
        }
    }

    const std::size_t m_count = config.methods.size();
    ExperimentResult result;
    result.runs.resize(config.repetitions * m_count);
    std::mutex log_mutex;
    auto log = [&](const std::string& msg) {
        if (options.quiet || !options.log) {
            return;
        }
        std::lock_guard<std::mutex> lock(log_mutex);
        options.log(msg);
    };

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t rep = next.fetch_add(1);
            if (rep >= config.repetitions) {
                return;
            }
            const std::uint64_t run_seed = config.seed + rep;
            std::optional<SyntheticFunction> objective;
            std::optional<BOConfig> bo;
            std::string setup_error;
            try {
                objective = make_objective(config, run_seed);
                bo = make_bo_config(config, *objective, run_seed);
            } catch (const std::exception& e) {
                setup_error = e.what();
            }
            for (std::size_t mi = 0; mi < m_count; ++mi) {
                RunSummary& s = result.runs[rep * m_count + mi];
                s.method = config.methods[mi];
                s.repetition = rep;
                s.seed = run_seed;
                if (!setup_error.empty()) {
                    s.error = "setup: " + setup_error;
                    log(to_string(s.method) + " rep " + std::to_string(rep) + " failed: " + s.error);
                    continue;
                }
                const auto t0 = std::chrono::steady_clock::now();
                BOHistory history;
                try {
                    history = run(*bo, *objective, config_model(config, s.method));
                } catch (const std::exception& e) {
                    history.error = e.what();
                }
                s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                s.ok = !history.error.has_value();
                s.error = history.error.value_or("");
                s.violations = history.violation_count;
                const auto regret = history.main_regret();
                s.final_regret = regret.empty() ? std::numeric_limits<double>::quiet_NaN() : regret.back();
                const std::string name = run_file_name(s.method, rep);
                std::ostringstream hist, diag;
                write_history_csv(hist, history);
                write_diagnostics_csv(diag, history);
                s.history_file = (s.ok ? std::filesystem::path("runs") : std::filesystem::path("failed")) / name;
                try {
                    write_file_atomic(out / s.history_file, hist.str());
                    write_file_atomic(out / "diagnostics" / name, diag.str());
                } catch (const std::exception& e) {
                    s.ok = false;
                    s.error = e.what();
                }
                std::ostringstream msg;
                msg << to_string(s.method) << " rep " << rep << " seed " << run_seed << ": "
                    << (s.ok ? "ok" : "failed (" + s.error + ")") << ", final regret " << s.final_regret << ", violations "
                    << s.violations << ", " << std::fixed << std::setprecision(1) << s.seconds << " s";
                log(msg.str());
            }
        }
    };
    const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, config.repetitions));
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < jobs; ++j) {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& t : pool) {
        t.join();
    }

    const auto methods = recompute_aggregates(out);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    json manifest;
    manifest["tool"] = "lmcsafe_bench";
    manifest["version"] = kVersion;
    manifest["compiler"] = __VERSION__;
    manifest["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION);
    manifest["config"] = config_json(config);
    manifest["jobs"] = jobs;
    manifest["wall_seconds"] = result.seconds;
    json seeds = json::array();
    for (std::size_t rep = 0; rep < config.repetitions; ++rep) {
        seeds.push_back(config.seed + rep);
    }
    manifest["seeds"] = seeds;
    json runs = json::array();
    for (const auto& s : result.runs) {
        json r = {{"method", to_string(s.method)},
                  {"repetition", s.repetition},
                  {"seed", s.seed},
                  {"status", s.ok ? "ok" : "failed"},
                  {"violations", s.violations},
                  {"seconds", s.seconds},
                  {"history", s.history_file}};
        r["final_regret"] = std::isfinite(s.final_regret) ? json(s.final_regret) : json(csv::format(s.final_regret));
        if (!s.ok) {
            r["error"] = s.error;
        }
        runs.push_back(r);
    }
    manifest["runs"] = runs;
    json aggregates = json::array();
    for (const auto& m : methods) {
        aggregates.push_back("aggregate_" + m + ".csv");
    }
    manifest["aggregates"] = aggregates;
    manifest["failed_runs"] = result.failed();
    write_file_atomic(out / "manifest.json", manifest.dump(2) + "\n");
    return result;
}

void demo_expressiveness(const DemoOptions& options, const std::filesystem::path& out_dir) {
    const auto [icm, lmc] = expressiveness_demo(options.seed, options.shape);
    std::ostringstream a, b;
    write_grid_csv(a, icm, options.resolution);
    write_grid_csv(b, lmc, options.resolution);
    write_file_atomic(out_dir / "icm.csv", a.str());
    write_file_atomic(out_dir / "lmc.csv", b.str());
}

}  // namespace lmcsafe
