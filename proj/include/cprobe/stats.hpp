#pragma once

#include <span>

namespace cprobe {

struct TTestResult {
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0;
};

// Two-sided one-sample Student t-test of mean(samples) == mu0. With zero sample
// variance the statistic is undefined: p = 1 when the mean equals mu0 exactly,
// p = 0 otherwise.
TTestResult one_sample_t_test(std::span<const double> samples, double mu0);

// Two-sided tail probability P(|T| >= |t|) for Student's t with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

double mean(std::span<const double> xs);

// Linear-interpolation quantile (q in [0,1]) of unsorted data.
double quantile(std::span<const double> xs, double q);

}  // namespace cprobe
