#include "lmcsafe/sobol.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include <boost/random/sobol.hpp>

namespace lmcsafe {

struct SobolSequence::Engine {
    explicit Engine(std::size_t dim) : gen(dim) {}
    boost::random::sobol gen;
};

SobolSequence::SobolSequence(std::size_t dim, std::uint64_t seed) : dim_(dim) {
    if (dim == 0) {
        throw std::invalid_argument("SobolSequence: dimension must be positive");
    }
    engine_ = std::make_unique<Engine>(dim);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    shift_.resize(static_cast<Eigen::Index>(dim));
    for (auto& s : shift_) {
        s = unif(rng);
    }
}

SobolSequence::~SobolSequence() = default;
SobolSequence::SobolSequence(SobolSequence&&) noexcept = default;
SobolSequence& SobolSequence::operator=(SobolSequence&&) noexcept = default;

Eigen::MatrixXd SobolSequence::next(std::size_t count) {
    // The engine emits full-width words; map them onto [0, 1).
    const double scale = 1.0 / (static_cast<double>(boost::random::sobol::max()) + 1.0);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim_));
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        for (Eigen::Index j = 0; j < out.cols(); ++j) {
            const double v = static_cast<double>(engine_->gen()) * scale + shift_[j];
            out(r, j) = v - std::floor(v);
        }
    }
    return out;
}

}  // namespace lmcsafe
