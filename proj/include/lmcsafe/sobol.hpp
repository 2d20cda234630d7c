#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>

#include <Eigen/Dense>

namespace lmcsafe {

/// Sobol low-discrepancy points on [0, 1)^d with a seeded Cranley-Patterson
/// rotation. Consecutive calls to next() continue the same sequence.
class SobolSequence {
public:
    SobolSequence(std::size_t dim, std::uint64_t seed);
    ~SobolSequence();
    SobolSequence(SobolSequence&&) noexcept;
    SobolSequence& operator=(SobolSequence&&) noexcept;

    std::size_t dim() const { return dim_; }
    /// count x dim matrix of the next points.
    Eigen::MatrixXd next(std::size_t count);

private:
    struct Engine;
    std::size_t dim_;
    std::unique_ptr<Engine> engine_;
    Eigen::VectorXd shift_;
};

}  // namespace lmcsafe
