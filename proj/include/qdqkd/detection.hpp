#pragma once

// Detector and measurement-arrangement model: efficiency, Gaussian jitter,
// per-channel dead time and dark counts; click streams for HBT, unpolarized
// cross-correlation and polarization-projected coincidence setups.

#include <cstdint>
#include <string>
#include <vector>

#include "qdqkd/quantum_math.hpp"
#include "qdqkd/source_model.hpp"

namespace qdqkd::analysis {

struct DetectorParams {
    double efficiency = 0.3;
    double jitter_sigma_ps = 250.0;  // ~0.5 ns FWHM-class timing resolution
    double dead_time_ps = 20000.0;
    double dark_count_rate_hz = 200.0;
};

void validate(const DetectorParams& p);

inline constexpr uint8_t kOutcomeUnanalyzed = 255;

struct DetectionRecord {
    uint8_t channel = 0;
    uint8_t outcome = kOutcomeUnanalyzed;  // quantum::Pol code or unanalyzed
    int64_t time_ps = 0;
};

using ClickStream = std::vector<DetectionRecord>;

enum class Arm : uint8_t { XX = 0, X = 1 };

// Hanbury-Brown-Twiss autocorrelation of one arm: 50:50 split onto two
// detectors (channels 0 and 1), no polarization analysis.
struct HbtStreams {
    ClickStream det0, det1;
};
HbtStreams detect_hbt(const std::vector<source::PairEmissionEvent>& events,
                      Arm arm, double rep_period_ps, const DetectorParams& det,
                      uint64_t seed);

// Unpolarized XX (channel 0) x X (channel 1) cross-correlation.
struct CrossStreams {
    ClickStream xx, x;
};
CrossStreams detect_cross(const std::vector<source::PairEmissionEvent>& events,
                          double rep_period_ps, const DetectorParams& det,
                          uint64_t seed, double x_arm_delay_ps = 0.0);

// Polarization-projected coincidence arm pair: each arm passes a projector
// onto one polarization before its detector (XX arm -> basis_a, X arm ->
// basis_b).  Used by the tomography settings.
CrossStreams detect_projected(const std::vector<source::PairEmissionEvent>& events,
                              quantum::Pol basis_a, quantum::Pol basis_b,
                              double rep_period_ps, const DetectorParams& det,
                              uint64_t seed);

// Streaming variant operating on one emission event at a time (per-block
// pipelines); clicks are appended unsorted and must be finalized.
class ClickAccumulator {
public:
    ClickAccumulator(double rep_period_ps, const DetectorParams& det, uint64_t seed);

    void hbt_event(const source::PairEmissionEvent& ev, Arm arm,
                   ClickStream& det0, ClickStream& det1);
    void cross_event(const source::PairEmissionEvent& ev, ClickStream& xx,
                     ClickStream& x, double x_arm_delay_ps = 0.0);
    void projected_event(const source::PairEmissionEvent& ev, quantum::Pol basis_a,
                         quantum::Pol basis_b, ClickStream& a, ClickStream& b);

    Rng& rng() { return rng_; }
    const DetectorParams& det() const { return det_; }

private:
    double period_;
    DetectorParams det_;
    Rng rng_;
};

// Sorts, applies per-channel dead time and injects dark counts over
// [0, duration_ps); all clicks in the stream share one channel id.
void finalize_stream(ClickStream& s, const DetectorParams& det, double duration_ps,
                     uint64_t seed, uint8_t dark_outcome = kOutcomeUnanalyzed);

// "TTAG1" binary timestamp format: little-endian records of
// (u8 channel, u8 outcome_code, i64 time_ps).
void write_ttag(const std::string& path, const ClickStream& s);
ClickStream read_ttag(const std::string& path);

} // namespace qdqkd::analysis
