#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace mvj {

// Weighted point cloud standing for a probability measure with finite second
// moment. Atoms are the columns of `points` (d x n); weights are probability
// weights (sum to one within 1e-12, all >= 0). Immutable by convention after
// construction: nothing in the engine mutates a measure in place, so sharing
// across worker threads is safe.
class EmpiricalMeasure {
public:
    EmpiricalMeasure() = default;
    // Validates invariants; throws MvjError on violation.
    EmpiricalMeasure(Eigen::MatrixXd points, Eigen::VectorXd weights);

    int dim() const { return static_cast<int>(points_.rows()); }
    Eigen::Index size() const { return points_.cols(); }
    const Eigen::MatrixXd& points() const { return points_; }
    const Eigen::VectorXd& weights() const { return weights_; }
    Eigen::VectorXd atom(Eigen::Index i) const { return points_.col(i); }
    double weight(Eigen::Index i) const { return weights_(i); }
    // Weighted mean, computed once at construction. Coefficient families
    // evaluate it per step per path, so it must not cost O(atoms) there.
    const Eigen::VectorXd& mean() const { return mean_; }

    bool operator==(const EmpiricalMeasure& o) const {
        return points_ == o.points_ && weights_ == o.weights_;
    }

private:
    Eigen::MatrixXd points_;   // d x n
    Eigen::VectorXd weights_;  // n
    Eigen::VectorXd mean_;     // d, cached at construction
};

// Uniform-weight measure from a sample set (realizes a simulated law from
// particles). Throws EmptySampleSet / NonFiniteEntry.
EmpiricalMeasure empirical_from_samples(const std::vector<Eigen::VectorXd>& samples);
// Fast path for scalar samples (d = 1).
EmpiricalMeasure empirical_from_samples_1d(const std::vector<double>& samples);

// Exact 2-Wasserstein distance in one dimension via the sorted (comonotone)
// coupling of the two quantile functions. Throws DimensionMismatch /
// UnsupportedDimension (d > 1 is out of scope by design).
double wasserstein2_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

// Componentwise k-th raw moment sum_i w_i x_i^k, k >= 1.
Eigen::VectorXd moment(const EmpiricalMeasure& mu, int k);

// First moment of a scalar measure as a plain double (hot path for the
// built-in mean-field coefficient families).
double mean_1d(const EmpiricalMeasure& mu);

// CSV round-trip: header `x_0,...,x_{d-1},w`, one atom per row, '.' decimal.
void write_measure_csv(const EmpiricalMeasure& mu, const std::string& path);
EmpiricalMeasure read_measure_csv(const std::string& path);

} // namespace mvj
