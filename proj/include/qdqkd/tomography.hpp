#pragma once

// Two-qubit polarization state tomography: simulation of the 36
// polarization-resolved XX-X coincidence measurements, Poisson
// maximum-likelihood reconstruction over a Cholesky parametrization and the
// window-offset sensitivity study.

#include <cstdint>
#include <string>
#include <vector>

#include "qdqkd/detection.hpp"
#include "qdqkd/quantum_math.hpp"
#include "qdqkd/source_model.hpp"
#include "qdqkd/stream_analysis.hpp"

namespace qdqkd::tomo {

using quantum::Pol;

struct TomographySettings {
    std::vector<std::pair<Pol, Pol>> bases;  // defaults to all 36 pairs
    double window_ps = 2000.0;
    double window_offset_ps = 0.0;
    uint64_t pulses_per_basis = 300000;

    TomographySettings();
};

void validate(const TomographySettings& s);

struct BasisCount {
    Pol basis_a = Pol::H;
    Pol basis_b = Pol::H;
    uint64_t counts = 0;
    double normalization = 1.0;  // per-basis exposure (mean side-peak area)
};

struct TomographyCounts {
    std::vector<BasisCount> entries;
};

// Raw per-basis coincidence histograms plus the tracked peak center, so one
// simulated dataset can be re-counted at several window offsets.
struct BasisHistograms {
    std::vector<analysis::CoincidenceHistogram> hists;  // one per settings basis
    std::vector<std::pair<Pol, Pol>> bases;
    int64_t peak_center_ps = 0;
    int64_t bin_width_ps = 25;
    int64_t rep_period_ps = 12500;
};

BasisHistograms simulate_basis_histograms(const source::SourceParams& src,
                                          const analysis::DetectorParams& det,
                                          const TomographySettings& settings,
                                          uint64_t seed, unsigned threads = 1);

TomographyCounts counts_at_offset(const BasisHistograms& bh, double window_ps,
                                  double window_offset_ps);

// Full simulation at the settings' own window offset.
TomographyCounts simulate_tomography(const source::SourceParams& src,
                                     const analysis::DetectorParams& det,
                                     const TomographySettings& settings,
                                     uint64_t seed, unsigned threads = 1);

// Counts drawn directly from Born probabilities of a known state with equal
// per-basis exposure; used for estimator validation.
TomographyCounts counts_from_state(const quantum::DensityMatrix2Q& rho,
                                   const TomographySettings& settings,
                                   uint64_t events_per_basis, uint64_t seed,
                                   bool poisson_fluctuate = true);

struct MleOptions {
    int restarts = 5;          // random restarts beyond the identity/4 start
    double grad_tol = 1e-8;    // on the count-normalized objective
    int max_iterations = 2000;
};

struct MleResult {
    quantum::DensityMatrix2Q rho;
    bool converged = false;
    double grad_norm = 0.0;
    double log_likelihood = 0.0;  // count-normalized, up to a constant
    int iterations = 0;

    MleResult() : rho(quantum::DensityMatrix2Q::maximally_mixed()) {}
};

MleResult mle_reconstruct(const TomographyCounts& counts, const MleOptions& opt = {});

// Count-normalized Poisson log-likelihood of the counts under rho (same
// normalization as MleResult::log_likelihood).
double log_likelihood(const TomographyCounts& counts, const quantum::DensityMatrix2Q& rho);

// Analytic gradient of the negative log-likelihood at a Cholesky point,
// exposed for the finite-difference cross-check.
std::vector<double> nll_gradient(const TomographyCounts& counts,
                                 const std::vector<double>& cholesky16);
double nll_value(const TomographyCounts& counts, const std::vector<double>& cholesky16);
quantum::DensityMatrix2Q rho_from_cholesky(const std::vector<double>& cholesky16);

struct WindowSensitivityPoint {
    double offset_ps = 0.0;
    double qber = 0.0;
};

// QBER of the reconstructed state per window-center offset, from one shared
// simulated dataset.
std::vector<WindowSensitivityPoint> window_sensitivity(
    const BasisHistograms& bh, double window_ps, const std::vector<double>& offsets_ps,
    const MleOptions& opt = {});

// CSV "basis_a,basis_b,counts,normalization"
std::string counts_csv(const TomographyCounts& counts);
TomographyCounts counts_from_csv(const std::string& text);

} // namespace qdqkd::tomo
