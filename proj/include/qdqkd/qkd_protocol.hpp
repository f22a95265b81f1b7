#pragma once

// BBM92 pipeline over the simulated source and channel: passive basis
// choice, peak-tracking synchronization, sifting, QBER estimation, CASCADE
// reconciliation, Toeplitz privacy amplification, session orchestration with
// drift models, key files and one-time-pad encryption.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdqkd/detection.hpp"
#include "qdqkd/numerics.hpp"
#include "qdqkd/source_model.hpp"

namespace qdqkd::qkd {

inline constexpr double kQberAbortThreshold = 0.11;  // BBM92 security limit
inline constexpr double kFiberDelayPsPerM = 4893.0;  // group delay, n = 1.468

struct ChannelParams {
    double arm_efficiency_alice = 0.22;  // extraction x coupling x detector
    double arm_efficiency_bob = 0.22;
    double fiber_length_m = 350.0;
    double polarization_drift_rad_per_hour = 0.0;  // rotation of Bob's frame
    double initial_misalignment_rad = 0.0;
    double dark_count_rate_hz = 200.0;  // per detector
    // cryostat drift: collection efficiency decays until the re-optimization
    // threshold triggers a reset of the stage position
    double efficiency_decay_per_hour = 0.0;
    double reopt_threshold = 0.8;

    double fiber_delay_ps() const { return fiber_length_m * kFiberDelayPsPerM; }
};

void validate(const ChannelParams& p);

enum class KeyStage : uint8_t { Raw = 0, Sifted = 1, Reconciled = 2, Amplified = 3 };

enum class Basis : uint8_t { HV = 0, DA = 1 };

struct KeyBitMeta {
    uint64_t pulse_index = 0;
    Basis basis = Basis::HV;
};

struct KeyMaterial {
    KeyStage stage = KeyStage::Raw;
    std::vector<uint8_t> bits;       // one 0/1 per entry
    std::vector<KeyBitMeta> meta;    // raw/sifted stages only
    uint64_t session_id = 0;
    uint64_t consumed_bits = 0;      // one-time-pad usage watermark

    uint64_t size_bits() const { return bits.size(); }
};

// Key file: 32-byte header (magic "QKEY1", u8 stage, u16 reserved,
// u64 bit length, u64 session id, u64 consumed bits), then packed bits.
void write_key(const std::string& path, const KeyMaterial& key);
KeyMaterial read_key(const std::string& path);

// ---------------------------------------------------------------------------
// synchronization
// ---------------------------------------------------------------------------

struct SyncResult {
    bool ok = false;            // peak must exceed 5x the accidental floor
    int64_t offset_ps = 0;      // argmax of the cross-correlation
    double peak_to_floor = 0.0;
};

SyncResult synchronize(std::span<const analysis::DetectionRecord> alice,
                       std::span<const analysis::DetectionRecord> bob,
                       int64_t search_span_ps, int64_t bin_ps = 100,
                       std::optional<int64_t> hint_ps = std::nullopt);

// Per-block tracking over long streams (drifting clocks).
std::vector<SyncResult> synchronize_blocks(
    std::span<const analysis::DetectionRecord> alice,
    std::span<const analysis::DetectionRecord> bob, int64_t block_duration_ps,
    int64_t search_span_ps, int64_t bin_ps = 100);

// ---------------------------------------------------------------------------
// sifting and QBER estimation
// ---------------------------------------------------------------------------

struct SiftResult {
    KeyMaterial alice, bob;      // stage Sifted, aligned bit-by-bit
    uint64_t coincidences = 0;   // matched clicks inside the window
    uint64_t basis_matched = 0;  // coincidences with equal bases
};

// Coincidences within window_ps around (offset + window_center_ps); clicks
// carry H/V/D/A outcomes; bit mapping H/D -> 0, V/A -> 1 on both sides.
SiftResult sift(std::span<const analysis::DetectionRecord> alice,
                std::span<const analysis::DetectionRecord> bob, int64_t offset_ps,
                int64_t window_ps, int64_t window_center_ps = 0);

struct QberEstimate {
    double qber = 0.0;
    num::Interval confidence;    // Clopper-Pearson 95%
    uint64_t disclosed = 0;
    uint64_t errors = 0;
};

// Discloses a random sample of the sifted key (removed from both keys).
// Empty blocks yield std::nullopt.
std::optional<QberEstimate> estimate_qber(KeyMaterial& alice, KeyMaterial& bob,
                                          double sample_fraction, uint64_t seed);

// ---------------------------------------------------------------------------
// reconciliation and privacy amplification
// ---------------------------------------------------------------------------

struct ReconcileResult {
    bool ok = false;             // false: aborted (QBER >= threshold) or failed
    bool verified = false;       // hash comparison after correction
    KeyMaterial alice, bob;      // stage Reconciled, identical when ok
    uint64_t leaked_bits = 0;    // every disclosed parity
    uint64_t corrected_errors = 0;
};

// CASCADE, 4 passes, first block size ~ 0.73/QBER, doubling afterwards;
// exact leakage accounting; residual mismatches cleaned by hash-guided
// bisection and verified.
ReconcileResult reconcile(const KeyMaterial& alice, const KeyMaterial& bob,
                          double qber_estimate, uint64_t seed);

// m = max(0, n (1 - h2(qber)) - leaked - 64), Toeplitz universal hashing.
KeyMaterial privacy_amplify(const KeyMaterial& key, double qber,
                            uint64_t leaked_bits, uint64_t seed);

// ---------------------------------------------------------------------------
// one-time pad
// ---------------------------------------------------------------------------

struct insufficient_key : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// XOR with the next unused key bits; consumed bits are marked spent on the
// supplied key and never reused.
std::vector<uint8_t> otp_encrypt(std::span<const uint8_t> message, KeyMaterial& key);
std::vector<uint8_t> otp_decrypt(std::span<const uint8_t> ciphertext, KeyMaterial& key);

// Uncompressed 24-bit BMP helpers (bit-exact round trip).
struct Bitmap24 {
    uint32_t width = 0;
    uint32_t height = 0;
    std::vector<uint8_t> pixels;  // BGR rows, bottom-up, 4-byte row padding
};
void write_bmp(const std::string& path, const Bitmap24& bmp);
Bitmap24 read_bmp(const std::string& path);
std::vector<uint8_t> bmp_bytes(const Bitmap24& bmp);
Bitmap24 bmp_from_bytes(std::span<const uint8_t> bytes);

// ---------------------------------------------------------------------------
// session orchestration
// ---------------------------------------------------------------------------

struct SessionOptions {
    double duration_s = 28800.0;
    double block_s = 60.0;
    uint64_t seed = 1;
    // event-rate acceleration: each wall-clock block is represented by a
    // dense acquisition segment of duration block_s / accel_factor
    double accel_factor = 29000.0;
    double window_ps = 2000.0;
    double window_offset_ps = 0.0;
    double sample_fraction = 0.05;
    unsigned threads = 1;
};

struct BlockReport {
    double start_s = 0.0;
    bool sync_ok = true;
    bool aborted = false;       // QBER above the BBM92 threshold
    double qber = 0.0;          // exact post-reconciliation error fraction
    double raw_bps = 0.0;       // sifted bits per wall-clock second
    double secure_bps = 0.0;    // amplified bits per wall-clock second
    uint64_t leaked_bits = 0;
};

struct SessionReport {
    std::vector<BlockReport> blocks;
    double mean_qber = 0.0;     // weighted by raw bits
    double min_qber = 0.0;
    double mean_raw_bps = 0.0;
    double mean_secure_bps = 0.0;
    uint64_t total_raw_bits = 0;
    uint64_t total_secure_bits = 0;
};

struct SessionResult {
    SessionReport report;
    KeyMaterial alice_raw, bob_raw;            // concatenated sifted keys
    KeyMaterial alice_secure, bob_secure;      // concatenated amplified keys
};

SessionResult run_session(const source::SourceParams& src, const ChannelParams& ch,
                          const analysis::DetectorParams& det,
                          const SessionOptions& opt);

// CSV "block_start_s,qber,raw_bps,secure_bps" and a JSON "blocks"/"totals"
// document.
std::string session_csv(const SessionReport& rep);
std::string session_json(const SessionReport& rep);

} // namespace qdqkd::qkd
