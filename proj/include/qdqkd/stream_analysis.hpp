#pragma once

// Time-tagged stream analysis: coincidence histograms, pulsed g2(0),
// long-timescale blinking g2 and on-fraction beta, pair-generation
// probability and IRF-convolved lifetime fitting.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdqkd/detection.hpp"

namespace qdqkd::analysis {

// Bins are CENTERED: an odd number of bins, the middle one centered on
// center_offset, and delays assigned by round-half-away-from-zero relative to
// that center.  This makes stream exchange mirror the histogram exactly.
struct CoincidenceHistogram {
    int64_t bin_width_ps = 0;
    int64_t span_ps = 0;         // n_bins * bin_width, n_bins odd
    int64_t center_offset_ps = 0;
    std::vector<uint64_t> counts;
    uint64_t total_pairs = 0;    // == sum of counts

    int64_t bin_center(size_t k) const {
        return center_offset_ps +
               (int64_t(k) - int64_t(counts.size() / 2)) * bin_width_ps;
    }
    int64_t bin_start(size_t k) const { return bin_center(k) - bin_width_ps / 2; }
    // sum over the bins whose full extent lies inside [center - width/2,
    // center + width/2]; center must sit on the bin-center grid
    uint64_t window_counts(int64_t center, int64_t width) const;
};

// counts[k] = number of pairs with delay t_b - t_a in bin k; O(N) merge over
// the two time-sorted streams.  span is rounded up to an odd bin count.
CoincidenceHistogram build_histogram(std::span<const DetectionRecord> a,
                                     std::span<const DetectionRecord> b,
                                     int64_t bin_width_ps, int64_t span_ps,
                                     int64_t center_offset_ps = 0);

// Delay-value histogram (start-stop analysis) with the same layout.
CoincidenceHistogram histogram_from_delays(std::span<const int64_t> delays_ps,
                                           int64_t bin_width_ps, int64_t span_ps,
                                           int64_t center_offset_ps = 0);

// Start-stop delays of a click stream against the excitation clock, folded
// into one repetition period and cyclically rotated so the decay peak sits
// at peak_position_ps (keeps the jitter-smeared rising edge away from the
// wrap-around boundary).
CoincidenceHistogram fold_start_stop(std::span<const DetectionRecord> s,
                                     int64_t period_ps, int64_t bin_width_ps,
                                     int64_t peak_position_ps = 3000);

// Pulsed antibunching g2(0): center-peak counts in +-window/2 over the mean
// side-peak counts in equal windows.  Side peaks: >= 3 (up to 10) complete
// peaks per side, skipping the two nearest neighbors of the center.
double g2_zero(const CoincidenceHistogram& h, int64_t window_ps = 2000,
               int64_t rep_period_ps = 12500);

struct BetaEstimate {
    double g2_zero = 1.0;  // bunching amplitude normalized by the plateau
    double beta = 1.0;     // 1 / g2_zero
};

// Long-timescale blinking estimate from a histogram with bins >= 100 ns.
// The zero-delay amplitude is read from the two bins adjacent to the
// center bin (the center bin carries the same-pulse antibunching dip).
BetaEstimate on_fraction_beta(const CoincidenceHistogram& h);

// Pair-generation probability from the unpolarized XX x X cross-correlation:
// epsilon = mean side-peak area / center-peak area, full-period peak windows.
double pair_probability_epsilon(const CoincidenceHistogram& h,
                                int64_t rep_period_ps = 12500);

enum class LifetimeModel { Single, Double };

struct LifetimeFit {
    bool converged = false;
    double t0_ps = 0.0;       // peak position (fitted when an IRF is present)
    double tau1_ps = 0.0;
    double tau1_err_ps = 0.0;
    double tau2_ps = 0.0;
    double tau2_err_ps = 0.0;
    double frac1 = 1.0;       // weight of the tau1 component
    double frac1_err = 0.0;
    double log_likelihood = 0.0;
    int iterations = 0;
};

struct FitOptions {
    int max_iterations = 4000;
};

// Binned Poisson maximum-likelihood fit of one or two exponentials convolved
// with a Gaussian IRF; standard errors from the Fisher information.
LifetimeFit fit_lifetime(const CoincidenceHistogram& h, LifetimeModel model,
                         double irf_sigma_ps, const FitOptions& opt = {});

// Unbinned maximum-likelihood fit on raw delays (t0 fixed at zero).
LifetimeFit fit_lifetime_samples(std::span<const double> delays_ps,
                                 LifetimeModel model, double irf_sigma_ps,
                                 const FitOptions& opt = {});

// CSV with header "bin_start_ps,counts".
std::string histogram_csv(const CoincidenceHistogram& h);
void write_histogram_csv(const std::string& path, const CoincidenceHistogram& h);

} // namespace qdqkd::analysis
