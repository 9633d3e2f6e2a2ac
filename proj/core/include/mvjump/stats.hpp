#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mvj {

// Welford accumulator with exact merge, so chunked parallel reductions give
// the same result as a serial pass when merged in a fixed order.
class RunningStats {
public:
    void add(double x) {
        ++n_;
        double d = x - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d * (x - mean_);
    }

    void merge(const RunningStats& o) {
        if (o.n_ == 0) return;
        if (n_ == 0) { *this = o; return; }
        double na = static_cast<double>(n_), nb = static_cast<double>(o.n_);
        double delta = o.mean_ - mean_;
        double nt = na + nb;
        mean_ += delta * nb / nt;
        m2_ += o.m2_ + delta * delta * na * nb / nt;
        n_ += o.n_;
    }

    std::size_t count() const { return n_; }
    double mean() const { return n_ ? mean_ : 0.0; }
    double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
    double std_error() const;

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

struct LinFit {
    double slope = 0.0;
    double intercept = 0.0;
    // slopes of the first and second half of the grid, for drift diagnostics
    double slope_first_half = 0.0;
    double slope_second_half = 0.0;
};

// Ordinary least squares y = slope*x + intercept. Used for the log-log
// scaling fits; xs must have >= 2 points (>= 4 for the half-slopes).
LinFit linear_fit(const std::vector<double>& xs, const std::vector<double>& ys);

// Two-sided Kolmogorov-Smirnov statistic of samples against a CDF callback.
double ks_statistic(std::vector<double> samples, double (*cdf)(double, const void*), const void* ctx);

struct Histogram {
    double lo = 0.0, hi = 0.0;
    std::vector<std::size_t> counts;
    std::size_t total = 0;
    double bin_width() const;
    double density_at(double y) const;  // count/(total*width) of the bin containing y
    double density_se_at(double y) const;  // binomial s.e. of that density value
};

// Freedman-Diaconis binning over [lo, hi].
Histogram histogram_fd(const std::vector<double>& samples, double lo, double hi);

double trapezoid(const std::vector<double>& xs, const std::vector<double>& ys);

} // namespace mvj
