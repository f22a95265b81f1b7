#pragma once

// Pulse-by-pulse Monte Carlo of the quantum-dot XX-X cascade under two-photon
// excitation: pair generation, cascade timing, FSS phase imprint, the slow
// secondary X decay channel, blinking, multi-photon background and the
// gate-voltage plateau map.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qdqkd/common.hpp"
#include "qdqkd/quantum_math.hpp"

namespace qdqkd::source {

struct SourceParams {
    double rep_rate_hz = 80e6;
    double pair_prob_epsilon = 0.87;
    double xx_lifetime_ps = 72.0;
    double x_lifetime_ps = 252.0;
    double fss_ueV = 0.96;
    double slow_channel_fraction = 0.0;
    double slow_channel_lifetime_ps = 2000.0;
    bool slow_channel_dephased = true;  // detour scrambles polarization (I/4)
    double blink_beta = 1.0;
    double blink_off_mean_us = 1.0;
    double multiphoton_prob_xx = 0.0;
    double multiphoton_prob_x = 0.0;
    double fss_drift_ueV_per_hour = 0.0;

    double rep_period_ps() const { return 1e12 / rep_rate_hz; }
};

void validate(const SourceParams& p);

struct PairEmissionEvent {
    uint64_t pulse_index = 0;
    double xx_emit_time_ps = 0.0;  // relative to the pulse; -1 if absent
    double x_emit_time_ps = 0.0;   //   (absent only for background photons)
    bool source_on = true;
    bool via_slow_channel = false;
    bool background = false;
    bool background_in_x = false;  // background photon channel (XX otherwise)
    quantum::Vec4 joint_state = quantum::Vec4::Zero();

    bool is_pair() const { return !background; }
};

struct SimulationSummary {
    uint64_t n_pulses = 0;
    uint64_t on_pulses = 0;
    uint64_t pairs = 0;
    uint64_t slow_pairs = 0;
    uint64_t background_photons = 0;
};

// Blinking: two-state alternating renewal process with exponential on/off
// durations; stationary on-fraction blink_beta, mean off duration
// blink_off_mean.  Generated sequentially up front so parallel pulse blocks
// see identical state.
class BlinkSchedule {
public:
    BlinkSchedule(const SourceParams& p, double duration_ps, uint64_t seed);
    bool on_at(double t_ps) const;

private:
    bool start_on_ = true;
    std::vector<double> toggles_;
};

using EventSink = std::function<void(const PairEmissionEvent&)>;

// Deterministic per (params, n_pulses, seed); identical whether run through
// the sequential or the parallel entry point.
SimulationSummary simulate_pulses_stream(const SourceParams& p, uint64_t n_pulses,
                                         uint64_t seed, const EventSink& sink);

std::vector<PairEmissionEvent> simulate_pulses(const SourceParams& p,
                                               uint64_t n_pulses, uint64_t seed,
                                               SimulationSummary* summary = nullptr);

// Same stream, blocks distributed over `threads` workers and merged in block
// order.
std::vector<PairEmissionEvent> simulate_pulses_parallel(const SourceParams& p,
                                                        uint64_t n_pulses,
                                                        uint64_t seed,
                                                        unsigned threads,
                                                        SimulationSummary* summary = nullptr);

struct VoltagePlateau {
    double v_low = 0.25;          // blinking-free tuning window
    double v_high = 0.35;
    double v_neutral_low = 0.15;  // charge-neutral configuration
    double v_neutral_high = 0.35;
    double wavelength_shift_range_nm = 0.2;
    double center_wavelength_nm = 790.0;
    double off_plateau_beta = 0.3;
};

void validate(const VoltagePlateau& p);

// Wavelength shifts linearly across the tuning window, clamped at the edges.
double wavelength_at(double voltage, const VoltagePlateau& p);
// 1.0 inside the charge-neutral range, the configured off-plateau value outside.
double on_fraction_at(double voltage, const VoltagePlateau& p);

// Binary event stream, magic "QDEV1": little-endian records of
// u64 pulse_index, f64 xx_emit_time_ps, f64 x_emit_time_ps, u8 flags
// (bit0 source_on, bit1 via_slow_channel, bit2 background, bit3 background
// photon in the X channel), 4 x (f64 re, f64 im) amplitudes.
void write_qdev(const std::string& path, const std::vector<PairEmissionEvent>& events);
std::vector<PairEmissionEvent> read_qdev(const std::string& path);

} // namespace qdqkd::source
