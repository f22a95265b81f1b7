#include "qdqkd/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

namespace qdqkd::num {

double erfcx(double x) {
    if (x >= 6.0) {
        // asymptotic series 1/(x sqrt(pi)) (1 - 1/(2x^2) + 3/(4x^4) - ...)
        const double ix2 = 1.0 / (x * x);
        return (1.0 / (x * 1.7724538509055160273)) *
               (1.0 + ix2 * (-0.5 + ix2 * (0.75 - 1.875 * ix2)));
    }
    if (x >= 0.0) return std::exp(x * x) * std::erfc(x);
    // erfcx(-x) = 2 exp(x^2) - erfcx(x); callers keep |x| small enough
    return 2.0 * std::exp(x * x) - erfcx(-x);
}

double emg_log_pdf(double t, double mu, double tau, double sigma) {
    if (sigma <= 0.0) {
        const double d = t - mu;
        if (d < 0.0) return -std::numeric_limits<double>::infinity();
        return -std::log(tau) - d / tau;
    }
    const double z = (t - mu) / sigma;
    const double u = (sigma / tau - z) / std::sqrt(2.0);
    if (u >= 0.0)
        return -std::log(2.0 * tau) + std::log(erfcx(u)) - 0.5 * z * z;
    // far right of the peak: the Gaussian factor is fully absorbed in the
    // exponential tail; erfc(u) ~ 2 so evaluate the plain-tail form
    const double expo_arg = 0.5 * (sigma / tau) * (sigma / tau) - (t - mu) / tau;
    return -std::log(2.0 * tau) + expo_arg + std::log(std::erfc(u));
}

double emg_pdf(double t, double mu, double tau, double sigma) {
    return std::exp(emg_log_pdf(t, mu, tau, sigma));
}

namespace {
double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
} // namespace

double emg_cdf(double t, double mu, double tau, double sigma) {
    if (sigma <= 0.0) {
        const double d = t - mu;
        return d < 0.0 ? 0.0 : 1.0 - std::exp(-d / tau);
    }
    const double z = (t - mu) / sigma;
    const double u = (sigma / tau - z) / std::sqrt(2.0);
    // F(t) = Phi(z) - 1/2 exp(-z^2/2) erfcx(u)   (u >= 0 branch)
    double tail;
    if (u >= 0.0)
        tail = 0.5 * std::exp(-0.5 * z * z) * erfcx(u);
    else
        tail = 0.5 * std::exp(0.5 * (sigma / tau) * (sigma / tau) - (t - mu) / tau) *
               std::erfc(u);
    return std::clamp(norm_cdf(z) - tail, 0.0, 1.0);
}

namespace {

// Lentz continued fraction for the incomplete beta (Numerical-Recipes form).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

} // namespace

double betainc(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log1p(-x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

namespace {

// smallest x with betainc(a,b,x) >= target
double betainc_inv(double a, double b, double target) {
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (betainc(a, b, mid) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace

Interval clopper_pearson(uint64_t errors, uint64_t trials, double confidence) {
    if (trials == 0) throw std::invalid_argument("clopper_pearson: no trials");
    const double alpha = 1.0 - confidence;
    Interval iv;
    const double k = double(errors), n = double(trials);
    iv.lo = errors == 0 ? 0.0 : betainc_inv(k, n - k + 1.0, alpha / 2.0);
    iv.hi = errors == trials ? 1.0 : betainc_inv(k + 1.0, n - k, 1.0 - alpha / 2.0);
    return iv;
}

double binary_entropy(double p) {
    if (p <= 0.0 || p >= 1.0) return 0.0;
    return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

NmResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                     std::vector<double> x0, std::vector<double> scale,
                     double ftol, int max_iter) {
    const size_t n = x0.size();
    std::vector<std::vector<double>> pts(n + 1, x0);
    for (size_t i = 0; i < n; ++i) pts[i + 1][i] += scale[i];
    std::vector<double> vals(n + 1);
    for (size_t i = 0; i <= n; ++i) vals[i] = f(pts[i]);

    NmResult res;
    int iter = 0;
    for (; iter < max_iter; ++iter) {
        // order
        std::vector<size_t> idx(n + 1);
        for (size_t i = 0; i <= n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(),
                  [&](size_t a, size_t b) { return vals[a] < vals[b]; });
        const size_t best = idx[0], worst = idx[n], second = idx[n - 1];
        if (std::fabs(vals[worst] - vals[best]) <=
            ftol * (std::fabs(vals[best]) + std::fabs(vals[worst]) + 1e-300)) {
            res.converged = true;
            break;
        }
        std::vector<double> centroid(n, 0.0);
        for (size_t i = 0; i <= n; ++i)
            if (i != worst)
                for (size_t j = 0; j < n; ++j) centroid[j] += pts[i][j] / double(n);
        auto blend = [&](double coeff) {
            std::vector<double> p(n);
            for (size_t j = 0; j < n; ++j)
                p[j] = centroid[j] + coeff * (pts[worst][j] - centroid[j]);
            return p;
        };
        auto refl = blend(-1.0);
        double frefl = f(refl);
        if (frefl < vals[idx[0]]) {
            auto expd = blend(-2.0);
            const double fexp = f(expd);
            if (fexp < frefl) { pts[worst] = expd; vals[worst] = fexp; }
            else { pts[worst] = refl; vals[worst] = frefl; }
        } else if (frefl < vals[second]) {
            pts[worst] = refl;
            vals[worst] = frefl;
        } else {
            auto contr = blend(frefl < vals[worst] ? -0.5 : 0.5);
            const double fcon = f(contr);
            if (fcon < std::min(frefl, vals[worst])) {
                pts[worst] = contr;
                vals[worst] = fcon;
            } else {
                for (size_t i = 0; i <= n; ++i) {
                    if (i == best) continue;
                    for (size_t j = 0; j < n; ++j)
                        pts[i][j] = pts[best][j] + 0.5 * (pts[i][j] - pts[best][j]);
                    vals[i] = f(pts[i]);
                }
            }
        }
    }
    size_t best = 0;
    for (size_t i = 1; i <= n; ++i)
        if (vals[i] < vals[best]) best = i;
    res.x = pts[best];
    res.value = vals[best];
    res.iterations = iter;
    return res;
}

} // namespace qdqkd::num
