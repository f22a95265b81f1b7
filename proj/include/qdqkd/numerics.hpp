#pragma once

// Shared numeric helpers: scaled complementary error function, the
// exponential-Gaussian convolution used by lifetime fitting and window
// acceptance, incomplete beta / binomial intervals, binary entropy and a
// compact Nelder-Mead minimizer.

#include <cstdint>
#include <functional>
#include <vector>

namespace qdqkd::num {

// exp(x^2) erfc(x), stable for all x representable without overflow of the
// direct product (|x| <= 26 covers every use here).
double erfcx(double x);

// Density/CDF at t of Exp(mean tau) convolved with N(mu, sigma^2).
// sigma == 0 degrades to the plain shifted exponential.
double emg_pdf(double t, double mu, double tau, double sigma);
double emg_log_pdf(double t, double mu, double tau, double sigma);
double emg_cdf(double t, double mu, double tau, double sigma);

// Regularized incomplete beta I_x(a, b).
double betainc(double a, double b, double x);

// Clopper-Pearson binomial confidence interval.
struct Interval {
    double lo = 0.0;
    double hi = 1.0;
};
Interval clopper_pearson(uint64_t errors, uint64_t trials, double confidence = 0.95);

// Binary entropy in bits; h2(0) = h2(1) = 0.
double binary_entropy(double p);

struct NmResult {
    std::vector<double> x;
    double value = 0.0;
    bool converged = false;
    int iterations = 0;
};

// Nelder-Mead on n parameters.  `scale` sets the initial simplex extent per
// coordinate.  Stops when the simplex value spread falls below ftol.
NmResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                     std::vector<double> x0, std::vector<double> scale,
                     double ftol = 1e-10, int max_iter = 4000);

} // namespace qdqkd::num
