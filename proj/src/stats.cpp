#include "cprobe/stats.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <vector>

#include "cprobe/errors.hpp"

namespace cprobe {

double mean(std::span<const double> xs) {
    if (xs.empty()) throw PreconditionError("mean of an empty sample");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double student_t_two_sided_p(double t, double df) {
    if (!(df > 0.0)) throw ParameterError("t distribution needs positive degrees of freedom");
    if (std::isinf(t)) return 0.0;
    boost::math::students_t dist(df);
    const double tail = boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
    return std::min(1.0, 2.0 * tail);
}

TTestResult one_sample_t_test(std::span<const double> samples, double mu0) {
    if (samples.size() < 2) throw PreconditionError("t-test needs at least two samples");
    TTestResult r;
    const double n = static_cast<double>(samples.size());
    const double m = mean(samples);
    double ss = 0.0;
    for (double x : samples) ss += (x - m) * (x - m);
    const double var = ss / (n - 1.0);
    r.df = n - 1.0;
    const double deviation = m - mu0;
    if (var == 0.0) {
        r.t = deviation == 0.0 ? 0.0 : std::copysign(INFINITY, deviation);
        r.p_value = deviation == 0.0 ? 1.0 : 0.0;
        return r;
    }
    r.t = deviation / std::sqrt(var / n);
    r.p_value = student_t_two_sided_p(r.t, r.df);
    return r;
}

double quantile(std::span<const double> xs, double q) {
    if (xs.empty()) throw PreconditionError("quantile of an empty sample");
    std::vector<double> v(xs.begin(), xs.end());
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace cprobe
