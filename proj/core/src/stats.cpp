#include "mvjump/stats.hpp"

#include <algorithm>
#include <cmath>

#include "mvjump/errors.hpp"

namespace mvj {

double RunningStats::std_error() const {
    if (n_ < 2) return 0.0;
    return std::sqrt(variance() / static_cast<double>(n_));
}

static double ols_slope(const double* xs, const double* ys, std::size_t n, double* intercept) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    double dn = static_cast<double>(n);
    double denom = dn * sxx - sx * sx;
    if (denom == 0.0) fail(ErrorCode::InvalidWindow, "degenerate abscissae in linear fit");
    double slope = (dn * sxy - sx * sy) / denom;
    if (intercept) *intercept = (sy - slope * sx) / dn;
    return slope;
}

LinFit linear_fit(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        fail(ErrorCode::InvalidWindow, "linear_fit needs >= 2 equal-length series");
    LinFit out;
    out.slope = ols_slope(xs.data(), ys.data(), xs.size(), &out.intercept);
    if (xs.size() >= 4) {
        std::size_t half = xs.size() / 2;
        out.slope_first_half = ols_slope(xs.data(), ys.data(), half, nullptr);
        out.slope_second_half =
            ols_slope(xs.data() + half, ys.data() + half, xs.size() - half, nullptr);
    } else {
        out.slope_first_half = out.slope_second_half = out.slope;
    }
    return out;
}

double ks_statistic(std::vector<double> samples, double (*cdf)(double, const void*),
                    const void* ctx) {
    if (samples.empty()) fail(ErrorCode::EmptySampleSet, "ks_statistic on empty sample");
    std::sort(samples.begin(), samples.end());
    double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        double f = cdf(samples[i], ctx);
        double lo = static_cast<double>(i) / n;
        double hi = static_cast<double>(i + 1) / n;
        d = std::max(d, std::max(std::abs(f - lo), std::abs(hi - f)));
    }
    return d;
}

double Histogram::bin_width() const {
    return counts.empty() ? 0.0 : (hi - lo) / static_cast<double>(counts.size());
}

double Histogram::density_at(double y) const {
    double w = bin_width();
    if (w <= 0.0 || total == 0 || y < lo || y >= hi) return 0.0;
    std::size_t b = static_cast<std::size_t>((y - lo) / w);
    if (b >= counts.size()) b = counts.size() - 1;
    return static_cast<double>(counts[b]) / (static_cast<double>(total) * w);
}

double Histogram::density_se_at(double y) const {
    double w = bin_width();
    if (w <= 0.0 || total == 0 || y < lo || y >= hi) return 0.0;
    std::size_t b = static_cast<std::size_t>((y - lo) / w);
    if (b >= counts.size()) b = counts.size() - 1;
    double p = static_cast<double>(counts[b]) / static_cast<double>(total);
    return std::sqrt(p * (1.0 - p) / static_cast<double>(total)) / w;
}

Histogram histogram_fd(const std::vector<double>& samples, double lo, double hi) {
    if (samples.empty()) fail(ErrorCode::EmptySampleSet, "histogram of empty sample");
    if (!(hi > lo)) fail(ErrorCode::InvalidWindow, "histogram window must have hi > lo");
    std::vector<double> sorted(samples);
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        double pos = q * static_cast<double>(sorted.size() - 1);
        std::size_t i = static_cast<std::size_t>(pos);
        double frac = pos - static_cast<double>(i);
        if (i + 1 >= sorted.size()) return sorted.back();
        return sorted[i] * (1.0 - frac) + sorted[i + 1] * frac;
    };
    double iqr = quantile(0.75) - quantile(0.25);
    double width = 2.0 * iqr / std::cbrt(static_cast<double>(sorted.size()));
    if (width <= 0.0) width = (hi - lo) / 64.0;
    std::size_t bins = static_cast<std::size_t>(std::ceil((hi - lo) / width));
    bins = std::clamp<std::size_t>(bins, 8, 4096);

    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(bins, 0);
    double bw = (hi - lo) / static_cast<double>(bins);
    for (double s : sorted) {
        if (s < lo || s >= hi) continue;
        std::size_t b = static_cast<std::size_t>((s - lo) / bw);
        if (b >= bins) b = bins - 1;
        ++h.counts[b];
        ++h.total;
    }
    return h;
}

double trapezoid(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        fail(ErrorCode::InvalidWindow, "trapezoid needs >= 2 equal-length series");
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i)
        acc += 0.5 * (ys[i] + ys[i + 1]) * (xs[i + 1] - xs[i]);
    return acc;
}

} // namespace mvj
