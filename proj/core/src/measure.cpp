#include "mvjump/measure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mvjump/errors.hpp"

namespace mvj {

EmpiricalMeasure::EmpiricalMeasure(Eigen::MatrixXd points, Eigen::VectorXd weights)
    : points_(std::move(points)), weights_(std::move(weights)) {
    if (points_.cols() == 0) fail(ErrorCode::EmptySampleSet, "measure needs at least one atom");
    if (points_.cols() != weights_.size())
        fail(ErrorCode::DimensionMismatch, "atom count != weight count");
    if (!points_.allFinite() || !weights_.allFinite())
        fail(ErrorCode::NonFiniteEntry, "non-finite atom or weight");
    if ((weights_.array() < 0.0).any())
        fail(ErrorCode::NonFiniteEntry, "negative weight");
    double s = weights_.sum();
    if (std::abs(s - 1.0) > 1e-12)
        fail(ErrorCode::NonFiniteEntry, "weights sum to " + std::to_string(s) + ", expected 1");
    mean_ = points_ * weights_;
}

EmpiricalMeasure empirical_from_samples(const std::vector<Eigen::VectorXd>& samples) {
    if (samples.empty()) fail(ErrorCode::EmptySampleSet, "no samples");
    const Eigen::Index d = samples.front().size();
    Eigen::MatrixXd pts(d, static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].size() != d)
            fail(ErrorCode::DimensionMismatch, "sample dimension varies across the set");
        pts.col(static_cast<Eigen::Index>(i)) = samples[i];
    }
    Eigen::VectorXd w =
        Eigen::VectorXd::Constant(pts.cols(), 1.0 / static_cast<double>(pts.cols()));
    return EmpiricalMeasure(std::move(pts), std::move(w));
}

EmpiricalMeasure empirical_from_samples_1d(const std::vector<double>& samples) {
    if (samples.empty()) fail(ErrorCode::EmptySampleSet, "no samples");
    Eigen::MatrixXd pts(1, static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) pts(0, static_cast<Eigen::Index>(i)) = samples[i];
    Eigen::VectorXd w =
        Eigen::VectorXd::Constant(pts.cols(), 1.0 / static_cast<double>(pts.cols()));
    return EmpiricalMeasure(std::move(pts), std::move(w));
}

double wasserstein2_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    if (mu.dim() != nu.dim()) fail(ErrorCode::DimensionMismatch, "W2 of measures with different d");
    if (mu.dim() != 1) fail(ErrorCode::UnsupportedDimension, "exact W2 implemented for d = 1 only");

    // Sorted atoms with cumulative weights: integrate |F^{-1} - G^{-1}|^2
    // over the merged quantile partition.
    auto sorted_atoms = [](const EmpiricalMeasure& m) {
        std::vector<std::pair<double, double>> aw(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.size(); ++i)
            aw[static_cast<std::size_t>(i)] = {m.points()(0, i), m.weight(i)};
        std::sort(aw.begin(), aw.end());
        return aw;
    };
    auto a = sorted_atoms(mu), b = sorted_atoms(nu);

    double acc = 0.0, q = 0.0;
    std::size_t i = 0, j = 0;
    double ca = a[0].second, cb = b[0].second;  // cumulative weight heads
    while (i < a.size() && j < b.size()) {
        double qn = std::min(ca, cb);
        double diff = a[i].first - b[j].first;
        acc += (qn - q) * diff * diff;
        q = qn;
        // advance whichever quantile block is exhausted (both on ties)
        if (ca <= qn + 1e-18 && i + 1 <= a.size()) {
            if (++i < a.size()) ca += a[i].second; else ca = 2.0;
        }
        if (cb <= qn + 1e-18 && j + 1 <= b.size()) {
            if (++j < b.size()) cb += b[j].second; else cb = 2.0;
        }
    }
    return std::sqrt(std::max(0.0, acc));
}

Eigen::VectorXd moment(const EmpiricalMeasure& mu, int k) {
    if (k < 1) fail(ErrorCode::InvalidWindow, "moment order must be >= 1");
    if (k == 1) return mu.mean();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(mu.dim());
    for (Eigen::Index i = 0; i < mu.size(); ++i)
        out += mu.weight(i) * mu.points().col(i).array().pow(k).matrix();
    return out;
}

double mean_1d(const EmpiricalMeasure& mu) {
    if (mu.dim() != 1) fail(ErrorCode::UnsupportedDimension, "mean_1d needs d = 1");
    return mu.mean()(0);
}

void write_measure_csv(const EmpiricalMeasure& mu, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::NonFiniteEntry, "cannot open " + path + " for writing");
    out.precision(17);
    for (int j = 0; j < mu.dim(); ++j) out << "x_" << j << ",";
    out << "w\n";
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        for (int j = 0; j < mu.dim(); ++j) out << mu.points()(j, i) << ",";
        out << mu.weight(i) << "\n";
    }
}

EmpiricalMeasure read_measure_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::EmptySampleSet, "cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::EmptySampleSet, "empty file " + path);
    // header: x_0,...,x_{d-1},w
    int d = 0;
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok == "w") break;
            ++d;
        }
        if (d == 0) fail(ErrorCode::DimensionMismatch, "bad header in " + path);
    }
    std::vector<double> flat;
    std::vector<double> ws;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        for (int j = 0; j < d; ++j) {
            if (!std::getline(ss, tok, ','))
                fail(ErrorCode::DimensionMismatch, "short row in " + path);
            flat.push_back(std::stod(tok));
        }
        if (!std::getline(ss, tok, ',')) fail(ErrorCode::DimensionMismatch, "missing weight in " + path);
        ws.push_back(std::stod(tok));
    }
    if (ws.empty()) fail(ErrorCode::EmptySampleSet, "no atoms in " + path);
    Eigen::MatrixXd pts(d, static_cast<Eigen::Index>(ws.size()));
    for (std::size_t i = 0; i < ws.size(); ++i)
        for (int j = 0; j < d; ++j) pts(j, static_cast<Eigen::Index>(i)) = flat[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
    Eigen::VectorXd w(static_cast<Eigen::Index>(ws.size()));
    for (std::size_t i = 0; i < ws.size(); ++i) w(static_cast<Eigen::Index>(i)) = ws[i];
    return EmpiricalMeasure(std::move(pts), std::move(w));
}

} // namespace mvj
