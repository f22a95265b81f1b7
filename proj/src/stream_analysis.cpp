#include "qdqkd/stream_analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "qdqkd/numerics.hpp"

namespace qdqkd::analysis {

namespace {

// round-half-away-from-zero bin index relative to the histogram center
inline int64_t rel_bin(int64_t delay, int64_t center, int64_t width) {
    const int64_t t = delay - center;
    return t >= 0 ? (t + width / 2) / width : -((-t + width / 2) / width);
}

} // namespace

uint64_t CoincidenceHistogram::window_counts(int64_t center, int64_t width) const {
    if ((center - center_offset_ps) % bin_width_ps != 0)
        throw invalid_input("window center must sit on the bin-center grid");
    if (width < bin_width_ps) throw invalid_input("window narrower than one bin");
    const int64_t half = counts.size() / 2;
    const int64_t kc = (center - center_offset_ps) / bin_width_ps + half;
    const int64_t reach = (width - bin_width_ps) / (2 * bin_width_ps);
    if (kc - reach < 0 || kc + reach >= int64_t(counts.size()))
        throw invalid_input("window outside histogram span");
    uint64_t sum = 0;
    for (int64_t k = kc - reach; k <= kc + reach; ++k) sum += counts[size_t(k)];
    return sum;
}

namespace {

CoincidenceHistogram make_layout(int64_t bin_width_ps, int64_t span_ps,
                                 int64_t center_offset_ps) {
    if (bin_width_ps <= 0) throw invalid_input("bin_width must be > 0");
    if (span_ps <= 0) throw invalid_input("span must be > 0");
    size_t n = size_t((span_ps + bin_width_ps - 1) / bin_width_ps) | 1;
    CoincidenceHistogram h;
    h.bin_width_ps = bin_width_ps;
    h.span_ps = int64_t(n) * bin_width_ps;
    h.center_offset_ps = center_offset_ps;
    h.counts.assign(n, 0);
    return h;
}

} // namespace

CoincidenceHistogram build_histogram(std::span<const DetectionRecord> a,
                                     std::span<const DetectionRecord> b,
                                     int64_t bin_width_ps, int64_t span_ps,
                                     int64_t center_offset_ps) {
    auto check_sorted = [](std::span<const DetectionRecord> s, const char* name) {
        for (size_t i = 1; i < s.size(); ++i)
            if (s[i].time_ps < s[i - 1].time_ps)
                throw invalid_input(std::string("stream '") + name + "' is not time-sorted");
    };
    check_sorted(a, "a");
    check_sorted(b, "b");

    CoincidenceHistogram h = make_layout(bin_width_ps, span_ps, center_offset_ps);
    const int64_t half = int64_t(h.counts.size() / 2);
    const int64_t lo = center_offset_ps - half * bin_width_ps - bin_width_ps / 2;
    const int64_t hi = lo + h.span_ps;

    size_t j_lo = 0;
    for (const auto& ra : a) {
        while (j_lo < b.size() && b[j_lo].time_ps - ra.time_ps < lo) ++j_lo;
        for (size_t j = j_lo; j < b.size(); ++j) {
            const int64_t dt = b[j].time_ps - ra.time_ps;
            if (dt >= hi) break;
            const int64_t k = rel_bin(dt, center_offset_ps, bin_width_ps) + half;
            if (k < 0 || k >= int64_t(h.counts.size())) continue;  // edge ties
            ++h.counts[size_t(k)];
            ++h.total_pairs;
        }
    }
    return h;
}

CoincidenceHistogram histogram_from_delays(std::span<const int64_t> delays_ps,
                                           int64_t bin_width_ps, int64_t span_ps,
                                           int64_t center_offset_ps) {
    CoincidenceHistogram h = make_layout(bin_width_ps, span_ps, center_offset_ps);
    const int64_t half = int64_t(h.counts.size() / 2);
    for (int64_t d : delays_ps) {
        const int64_t k = rel_bin(d, center_offset_ps, bin_width_ps) + half;
        if (k < 0 || k >= int64_t(h.counts.size())) continue;
        ++h.counts[size_t(k)];
        ++h.total_pairs;
    }
    return h;
}

CoincidenceHistogram fold_start_stop(std::span<const DetectionRecord> s,
                                     int64_t period_ps, int64_t bin_width_ps,
                                     int64_t peak_position_ps) {
    if (period_ps <= 0 || bin_width_ps <= 0)
        throw invalid_input("period and bin_width must be > 0");
    auto fold = [&](int64_t t, int64_t shift) {
        return (((t + shift) % period_ps) + period_ps) % period_ps;
    };
    // coarse pass locates the peak so the rotation can move it into place
    std::vector<uint64_t> coarse(size_t(period_ps / 100 + 1), 0);
    for (const auto& r : s) ++coarse[size_t(fold(r.time_ps, 0) / 100)];
    const int64_t peak =
        100 * (std::max_element(coarse.begin(), coarse.end()) - coarse.begin());
    const int64_t shift = ((peak_position_ps - peak) % period_ps + period_ps) % period_ps;
    std::vector<int64_t> delays;
    delays.reserve(s.size());
    for (const auto& r : s) delays.push_back(fold(r.time_ps, shift));
    return histogram_from_delays(delays, bin_width_ps, period_ps, period_ps / 2);
}

namespace {

// True when a window of `width` centered at `center` lies fully in the span.
bool window_fits(const CoincidenceHistogram& h, int64_t center, int64_t width) {
    if ((center - h.center_offset_ps) % h.bin_width_ps != 0) return false;
    const int64_t kc = (center - h.center_offset_ps) / h.bin_width_ps;
    const int64_t reach = (width - h.bin_width_ps) / (2 * h.bin_width_ps);
    return std::abs(kc) + reach <= int64_t(h.counts.size() / 2);
}

// Usable side peaks: |k| in [3, 12] (the two nearest neighbours of the
// center carry blinking residue) whose full window fits in the span.
std::vector<int64_t> usable_side_peaks(const CoincidenceHistogram& h,
                                       int64_t window, int64_t period) {
    std::vector<int64_t> ks;
    for (int64_t k = -12; k <= 12; ++k) {
        if (std::abs(k) < 3) continue;
        if (window_fits(h, k * period, window)) ks.push_back(k);
    }
    return ks;
}

} // namespace

double g2_zero(const CoincidenceHistogram& h, int64_t window_ps, int64_t rep_period_ps) {
    if (window_ps <= 0 || rep_period_ps <= 0)
        throw invalid_input("window and rep_period must be > 0");
    const auto ks = usable_side_peaks(h, window_ps, rep_period_ps);
    if (ks.size() < 3)
        throw invalid_input("fewer than 3 complete side peaks available in span");
    const uint64_t center = h.window_counts(0, window_ps);
    double side_sum = 0.0;
    for (int64_t k : ks)
        side_sum += double(h.window_counts(k * rep_period_ps, window_ps));
    const double side_mean = side_sum / double(ks.size());
    if (side_mean <= 0.0) {
        if (center == 0) return 0.0;
        throw invalid_input("empty side peaks with a nonzero center peak");
    }
    return double(center) / side_mean;
}

BetaEstimate on_fraction_beta(const CoincidenceHistogram& h) {
    if (h.bin_width_ps < 100000)
        throw invalid_input("beta estimate needs bins >= 100 ns");
    const size_t n = h.counts.size();
    if (n < 20) throw invalid_input("too few bins for a plateau estimate");
    if (h.center_offset_ps % h.bin_width_ps != 0)
        throw invalid_input("zero delay must sit on the bin-center grid");
    const int64_t k0s = int64_t(n / 2) - h.center_offset_ps / h.bin_width_ps;
    if (k0s <= 0 || k0s + 1 >= int64_t(n))
        throw invalid_input("zero delay not inside span");
    const size_t k0 = size_t(k0s);
    // the center bin carries the same-pulse antibunching dip; read the
    // bunching amplitude from its two neighbours
    const double amplitude = 0.5 * (double(h.counts[k0 - 1]) + double(h.counts[k0 + 1]));

    auto segment_mean = [&](double from, double to) {
        // fractions of the half-span measured outward from the center bin
        uint64_t sum = 0, cnt = 0;
        const double half = double(n) / 2.0;
        for (size_t k = 0; k < n; ++k) {
            const double d = std::fabs(double(k) - double(k0)) / half;
            if (d >= from && d < to) { sum += h.counts[k]; ++cnt; }
        }
        return std::pair<double, uint64_t>{cnt ? double(sum) / double(cnt) : 0.0, cnt};
    };
    auto [plateau, n_pl] = segment_mean(0.70, 1.01);
    auto [outer_a, n_a] = segment_mean(0.70, 0.85);
    auto [outer_b, n_b] = segment_mean(0.85, 1.01);
    if (n_a < 2 || n_b < 2) throw invalid_input("plateau segments too small");
    // allowance: counting noise plus 5% for the pair-coverage slope and the
    // blink-sampling wiggle (finite number of on/off cycles); a span that
    // ends before the blinking correlation dies differs at the tens of
    // percent level between the two halves
    const double sigma = std::sqrt(outer_a / double(n_a) + outer_b / double(n_b));
    if (std::fabs(outer_a - outer_b) > 5.0 * sigma + 0.05 * std::max(outer_a, outer_b))
        throw invalid_input("plateau not reached within histogram span");
    if (amplitude <= 0.0 || plateau <= 0.0)
        throw invalid_input("empty histogram regions in beta estimate");

    BetaEstimate est;
    est.g2_zero = amplitude / plateau;
    est.beta = 1.0 / est.g2_zero;
    return est;
}

double pair_probability_epsilon(const CoincidenceHistogram& h, int64_t rep_period_ps) {
    const auto ks = usable_side_peaks(h, rep_period_ps, rep_period_ps);
    if (ks.size() < 3)
        throw invalid_input("fewer than 3 complete side peaks available in span");
    const uint64_t center = h.window_counts(0, rep_period_ps);
    if (center == 0) throw invalid_input("center peak area is zero");
    double side_sum = 0.0;
    for (int64_t k : ks)
        side_sum += double(h.window_counts(k * rep_period_ps, rep_period_ps));
    return side_sum / double(ks.size()) / double(center);
}

namespace {

struct MixtureParams {
    double t0 = 0.0;
    double tau1 = 100.0;
    double tau2 = 1000.0;
    double frac1 = 1.0;
};

double mixture_cdf(double t, const MixtureParams& m, double sigma, bool two) {
    double v = m.frac1 * num::emg_cdf(t, m.t0, m.tau1, sigma);
    if (two) v += (1.0 - m.frac1) * num::emg_cdf(t, m.t0, m.tau2, sigma);
    return v;
}

double mixture_pdf(double t, const MixtureParams& m, double sigma, bool two) {
    double v = m.frac1 * num::emg_pdf(t, m.t0, m.tau1, sigma);
    if (two) v += (1.0 - m.frac1) * num::emg_pdf(t, m.t0, m.tau2, sigma);
    return v;
}

// optimizer coordinates: (t0, log tau1 [, log tau2, logit f1]); t0 omitted
// when fixed
MixtureParams unpack(const std::vector<double>& x, bool two, bool fit_t0) {
    MixtureParams m;
    size_t i = 0;
    m.t0 = fit_t0 ? x[i++] : 0.0;
    m.tau1 = std::exp(x[i++]);
    if (two) {
        m.tau2 = std::exp(x[i++]);
        m.frac1 = 1.0 / (1.0 + std::exp(-x[i++]));
    }
    return m;
}

std::vector<double> expected_bin_counts(const CoincidenceHistogram& h,
                                        const MixtureParams& m, double sigma,
                                        bool two, double n_total) {
    const size_t n = h.counts.size();
    std::vector<double> lam(n);
    double prev = mixture_cdf(double(h.bin_start(0)), m, sigma, two), norm = 0.0;
    for (size_t k = 0; k < n; ++k) {
        const double next =
            mixture_cdf(double(h.bin_start(k) + h.bin_width_ps), m, sigma, two);
        lam[k] = std::max(next - prev, 0.0);
        norm += lam[k];
        prev = next;
    }
    if (norm <= 0.0) norm = 1.0;
    for (auto& v : lam) v = std::max(v / norm * n_total, 1e-300);
    return lam;
}

} // namespace

LifetimeFit fit_lifetime(const CoincidenceHistogram& h, LifetimeModel model,
                         double irf_sigma_ps, const FitOptions& opt) {
    const bool two = model == LifetimeModel::Double;
    const bool fit_t0 = irf_sigma_ps > 0.0;
    const double n_total = double(std::accumulate(h.counts.begin(), h.counts.end(),
                                                  uint64_t{0}));
    if (n_total <= 0.0) throw invalid_input("empty histogram");

    // moment-based initialization
    const size_t peak_k = std::max_element(h.counts.begin(), h.counts.end()) -
                          h.counts.begin();
    const double t_peak = double(h.bin_start(peak_k)) + 0.5 * double(h.bin_width_ps);
    double mean_after = 0.0, w_after = 0.0;
    for (size_t k = peak_k; k < h.counts.size(); ++k) {
        const double t = double(h.bin_start(k)) + 0.5 * double(h.bin_width_ps);
        mean_after += double(h.counts[k]) * (t - t_peak);
        w_after += double(h.counts[k]);
    }
    const double tau_init = std::max(mean_after / std::max(w_after, 1.0), 1.0);

    auto nll = [&](const std::vector<double>& x) {
        const MixtureParams m = unpack(x, two, fit_t0);
        if (m.tau1 <= 0 || m.tau2 <= 0) return 1e30;
        const auto lam = expected_bin_counts(h, m, irf_sigma_ps, two, n_total);
        double v = 0.0;
        for (size_t k = 0; k < lam.size(); ++k) {
            v += lam[k];
            if (h.counts[k]) v -= double(h.counts[k]) * std::log(lam[k]);
        }
        return v;
    };

    std::vector<double> x0, scale;
    if (fit_t0) { x0.push_back(t_peak - irf_sigma_ps); scale.push_back(irf_sigma_ps); }
    x0.push_back(std::log(tau_init));
    scale.push_back(0.4);
    if (two) {
        x0.push_back(std::log(tau_init * 6.0));
        scale.push_back(0.5);
        x0.push_back(2.0);  // logit 0.88
        scale.push_back(0.8);
    }
    const auto nm = num::nelder_mead(nll, x0, scale, 1e-12, opt.max_iterations);

    LifetimeFit fit;
    fit.converged = nm.converged;
    fit.iterations = nm.iterations;
    fit.log_likelihood = -nm.value;
    MixtureParams m = unpack(nm.x, two, fit_t0);
    if (two && m.tau2 < m.tau1) {
        std::swap(m.tau1, m.tau2);
        m.frac1 = 1.0 - m.frac1;
    }
    fit.t0_ps = m.t0;
    fit.tau1_ps = m.tau1;
    fit.tau2_ps = two ? m.tau2 : 0.0;
    fit.frac1 = two ? m.frac1 : 1.0;

    // Fisher information in natural parameters (t0 included when fitted):
    // F_ij = sum_k dlam_i dlam_j / lam_k over populated model bins
    std::vector<double> nat;
    if (fit_t0) nat.push_back(m.t0);
    nat.push_back(m.tau1);
    if (two) { nat.push_back(m.tau2); nat.push_back(m.frac1); }
    auto lam_at = [&](const std::vector<double>& natp) {
        MixtureParams mm = m;
        size_t i = 0;
        if (fit_t0) mm.t0 = natp[i++];
        mm.tau1 = natp[i++];
        if (two) { mm.tau2 = natp[i++]; mm.frac1 = natp[i++]; }
        return expected_bin_counts(h, mm, irf_sigma_ps, two, n_total);
    };
    const auto lam0 = lam_at(nat);
    const size_t np = nat.size();
    Eigen::MatrixXd grads(long(lam0.size()), long(np));
    for (size_t i = 0; i < np; ++i) {
        const double step = std::max(1e-4 * std::fabs(nat[i]), 1e-4);
        auto hi = nat, lo = nat;
        hi[i] += step;
        lo[i] -= step;
        const auto lh = lam_at(hi), ll = lam_at(lo);
        for (size_t k = 0; k < lam0.size(); ++k)
            grads(long(k), long(i)) = (lh[k] - ll[k]) / (2.0 * step);
    }
    Eigen::MatrixXd fsh = Eigen::MatrixXd::Zero(long(np), long(np));
    for (size_t k = 0; k < lam0.size(); ++k) {
        if (lam0[k] < 1e-9) continue;  // empty tail bins carry no information
        fsh += grads.row(long(k)).transpose() * grads.row(long(k)) / lam0[k];
    }
    const Eigen::MatrixXd cov = fsh.inverse();
    const long base = fit_t0 ? 1 : 0;
    fit.tau1_err_ps = std::sqrt(std::max(cov(base, base), 0.0));
    if (two) {
        fit.tau2_err_ps = std::sqrt(std::max(cov(base + 1, base + 1), 0.0));
        fit.frac1_err = std::sqrt(std::max(cov(base + 2, base + 2), 0.0));
    }
    return fit;
}

LifetimeFit fit_lifetime_samples(std::span<const double> delays_ps,
                                 LifetimeModel model, double irf_sigma_ps,
                                 const FitOptions& opt) {
    if (delays_ps.empty()) throw invalid_input("no delay samples");
    const bool two = model == LifetimeModel::Double;
    double mean = 0.0;
    for (double t : delays_ps) mean += t;
    mean /= double(delays_ps.size());

    auto nll = [&](const std::vector<double>& x) {
        const MixtureParams m = unpack(x, two, false);
        double v = 0.0;
        for (double t : delays_ps) {
            const double p = mixture_pdf(t, m, irf_sigma_ps, two);
            if (p <= 0.0) return 1e30;
            v -= std::log(p);
        }
        return v;
    };
    std::vector<double> x0{std::log(std::max(mean, 1.0))}, scale{0.3};
    if (two) {
        x0.push_back(std::log(std::max(mean, 1.0) * 6.0));
        scale.push_back(0.5);
        x0.push_back(2.0);
        scale.push_back(0.8);
    }
    const auto nm = num::nelder_mead(nll, x0, scale, 1e-13, opt.max_iterations);

    LifetimeFit fit;
    fit.converged = nm.converged;
    fit.iterations = nm.iterations;
    fit.log_likelihood = -nm.value;
    MixtureParams m = unpack(nm.x, two, false);
    if (two && m.tau2 < m.tau1) {
        std::swap(m.tau1, m.tau2);
        m.frac1 = 1.0 - m.frac1;
    }
    fit.tau1_ps = m.tau1;
    fit.tau2_ps = two ? m.tau2 : 0.0;
    fit.frac1 = two ? m.frac1 : 1.0;
    // observed information from the numeric Hessian in natural parameters
    std::vector<double> nat{m.tau1};
    if (two) { nat.push_back(m.tau2); nat.push_back(m.frac1); }
    auto nll_nat = [&](const std::vector<double>& natp) {
        MixtureParams mm = m;
        mm.tau1 = natp[0];
        if (two) { mm.tau2 = natp[1]; mm.frac1 = natp[2]; }
        double v = 0.0;
        for (double t : delays_ps) {
            const double p = mixture_pdf(t, mm, irf_sigma_ps, two);
            if (p <= 0.0) return 1e30;
            v -= std::log(p);
        }
        return v;
    };
    const size_t np = nat.size();
    Eigen::MatrixXd hess(np, np);
    const double f0 = nll_nat(nat);
    std::vector<double> steps(np);
    for (size_t i = 0; i < np; ++i) steps[i] = std::max(1e-4 * std::fabs(nat[i]), 1e-6);
    for (size_t i = 0; i < np; ++i) {
        for (size_t j = i; j < np; ++j) {
            auto pp = nat, pm = nat, mp = nat, mm2 = nat;
            pp[i] += steps[i]; pp[j] += steps[j];
            pm[i] += steps[i]; pm[j] -= steps[j];
            mp[i] -= steps[i]; mp[j] += steps[j];
            mm2[i] -= steps[i]; mm2[j] -= steps[j];
            double v;
            if (i == j) {
                auto ph = nat, mh = nat;
                ph[i] += steps[i];
                mh[i] -= steps[i];
                v = (nll_nat(ph) - 2.0 * f0 + nll_nat(mh)) / (steps[i] * steps[i]);
            } else {
                v = (nll_nat(pp) - nll_nat(pm) - nll_nat(mp) + nll_nat(mm2)) /
                    (4.0 * steps[i] * steps[j]);
            }
            hess(long(i), long(j)) = hess(long(j), long(i)) = v;
        }
    }
    const Eigen::MatrixXd cov = hess.inverse();
    fit.tau1_err_ps = std::sqrt(std::max(cov(0, 0), 0.0));
    if (two) {
        fit.tau2_err_ps = std::sqrt(std::max(cov(1, 1), 0.0));
        fit.frac1_err = std::sqrt(std::max(cov(2, 2), 0.0));
    }
    return fit;
}

std::string histogram_csv(const CoincidenceHistogram& h) {
    std::string out = "bin_start_ps,counts\n";
    char line[64];
    for (size_t k = 0; k < h.counts.size(); ++k) {
        std::snprintf(line, sizeof line, "%lld,%llu\n",
                      (long long)h.bin_start(k), (unsigned long long)h.counts[k]);
        out += line;
    }
    return out;
}

void write_histogram_csv(const std::string& path, const CoincidenceHistogram& h) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << histogram_csv(h);
}

} // namespace qdqkd::analysis
