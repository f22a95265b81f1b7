#include "qdqkd/detection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace qdqkd::analysis {

void validate(const DetectorParams& p) {
    if (p.efficiency < 0 || p.efficiency > 1)
        throw invalid_input("detector efficiency must be in [0,1]");
    if (p.jitter_sigma_ps < 0) throw invalid_input("jitter_sigma must be >= 0");
    if (p.dead_time_ps < 0) throw invalid_input("dead_time must be >= 0");
    if (p.dark_count_rate_hz < 0) throw invalid_input("dark_count_rate must be >= 0");
}

ClickAccumulator::ClickAccumulator(double rep_period_ps, const DetectorParams& det,
                                   uint64_t seed)
    : period_(rep_period_ps), det_(det), rng_(derive_seed(seed, 0xde7ec7)) {
    validate(det);
}

namespace {

int64_t click_time(double pulse_time, double emit_ps, double jitter_sigma, Rng& rng) {
    double t = pulse_time + emit_ps;
    if (jitter_sigma > 0) t += rng.gauss(0.0, jitter_sigma);
    return int64_t(std::llround(t));
}

// Born probability of |chi> passing the projector onto pol p, for a
// single-photon state stored in the first two amplitudes.
double single_pass_prob(const quantum::Vec4& state, quantum::Pol p) {
    const quantum::Vec2 k = quantum::pol_ket(p);
    const quantum::complexd amp = std::conj(k(0)) * state(0) + std::conj(k(1)) * state(1);
    return std::norm(amp);
}

} // namespace

void ClickAccumulator::hbt_event(const source::PairEmissionEvent& ev, Arm arm,
                                 ClickStream& det0, ClickStream& det1) {
    const double t_pulse = double(ev.pulse_index) * period_;
    auto emit = [&](double emit_ps) {
        if (!rng_.bernoulli(det_.efficiency)) return;
        ClickStream& s = rng_.bernoulli(0.5) ? det0 : det1;  // 50:50 splitter
        s.push_back({uint8_t(&s == &det1), kOutcomeUnanalyzed,
                     click_time(t_pulse, emit_ps, det_.jitter_sigma_ps, rng_)});
    };
    if (ev.background) {
        if ((arm == Arm::X) == ev.background_in_x)
            emit(arm == Arm::X ? ev.x_emit_time_ps : ev.xx_emit_time_ps);
        return;
    }
    emit(arm == Arm::X ? ev.x_emit_time_ps : ev.xx_emit_time_ps);
}

void ClickAccumulator::cross_event(const source::PairEmissionEvent& ev,
                                   ClickStream& xx, ClickStream& x,
                                   double x_arm_delay_ps) {
    const double t_pulse = double(ev.pulse_index) * period_;
    auto emit = [&](ClickStream& s, double emit_ps, double extra, uint8_t ch) {
        if (!rng_.bernoulli(det_.efficiency)) return;
        s.push_back({ch, kOutcomeUnanalyzed,
                     click_time(t_pulse + extra, emit_ps, det_.jitter_sigma_ps, rng_)});
    };
    if (ev.background) {
        if (ev.background_in_x) emit(x, ev.x_emit_time_ps, x_arm_delay_ps, 1);
        else emit(xx, ev.xx_emit_time_ps, 0.0, 0);
        return;
    }
    emit(xx, ev.xx_emit_time_ps, 0.0, 0);
    emit(x, ev.x_emit_time_ps, x_arm_delay_ps, 1);
}

void ClickAccumulator::projected_event(const source::PairEmissionEvent& ev,
                                       quantum::Pol basis_a, quantum::Pol basis_b,
                                       ClickStream& a, ClickStream& b) {
    const double t_pulse = double(ev.pulse_index) * period_;
    auto emit = [&](ClickStream& s, double emit_ps, quantum::Pol pol, uint8_t ch) {
        if (!rng_.bernoulli(det_.efficiency)) return;
        s.push_back({ch, uint8_t(pol),
                     click_time(t_pulse, emit_ps, det_.jitter_sigma_ps, rng_)});
    };
    if (ev.background) {
        const quantum::Pol pol = ev.background_in_x ? basis_b : basis_a;
        if (rng_.bernoulli(single_pass_prob(ev.joint_state, pol))) {
            if (ev.background_in_x) emit(b, ev.x_emit_time_ps, basis_b, 1);
            else emit(a, ev.xx_emit_time_ps, basis_a, 0);
        }
        return;
    }
    // joint Born sampling through both projectors
    const quantum::Vec4 proj = quantum::product_ket(basis_a, basis_b);
    const double p_ab = std::norm(proj.dot(ev.joint_state));
    // arm marginals
    const quantum::Vec2 ka = quantum::pol_ket(basis_a), kb = quantum::pol_ket(basis_b);
    const quantum::complexd a0 = std::conj(ka(0)) * ev.joint_state(0) +
                                 std::conj(ka(1)) * ev.joint_state(2);
    const quantum::complexd a1 = std::conj(ka(0)) * ev.joint_state(1) +
                                 std::conj(ka(1)) * ev.joint_state(3);
    const double p_a = std::norm(a0) + std::norm(a1);
    const quantum::complexd b0 = std::conj(kb(0)) * ev.joint_state(0) +
                                 std::conj(kb(1)) * ev.joint_state(1);
    const quantum::complexd b1 = std::conj(kb(0)) * ev.joint_state(2) +
                                 std::conj(kb(1)) * ev.joint_state(3);
    const double p_b = std::norm(b0) + std::norm(b1);
    const double u = rng_.u01();
    bool pass_a, pass_b;
    if (u < p_ab) { pass_a = pass_b = true; }
    else if (u < p_a) { pass_a = true; pass_b = false; }
    else if (u < p_a + p_b - p_ab) { pass_a = false; pass_b = true; }
    else { pass_a = pass_b = false; }
    if (pass_a) emit(a, ev.xx_emit_time_ps, basis_a, 0);
    if (pass_b) emit(b, ev.x_emit_time_ps, basis_b, 1);
}

void finalize_stream(ClickStream& s, const DetectorParams& det, double duration_ps,
                     uint64_t seed, uint8_t dark_outcome) {
    Rng rng(derive_seed(seed, 0xdacc));
    if (det.dark_count_rate_hz > 0 && duration_ps > 0) {
        const uint8_t ch = s.empty() ? 0 : s.front().channel;
        const uint64_t n = rng.poisson(det.dark_count_rate_hz * duration_ps * 1e-12);
        for (uint64_t i = 0; i < n; ++i)
            s.push_back({ch, dark_outcome, int64_t(rng.u01() * duration_ps)});
    }
    std::sort(s.begin(), s.end(), [](const DetectionRecord& a, const DetectionRecord& b) {
        return a.time_ps < b.time_ps;
    });
    if (det.dead_time_ps > 0 && !s.empty()) {
        ClickStream kept;
        kept.reserve(s.size());
        int64_t last = std::numeric_limits<int64_t>::min();
        const int64_t dead = int64_t(det.dead_time_ps);
        for (const auto& r : s) {
            if (r.time_ps - last >= dead || last == std::numeric_limits<int64_t>::min()) {
                kept.push_back(r);
                last = r.time_ps;
            }
        }
        s.swap(kept);
    }
}

HbtStreams detect_hbt(const std::vector<source::PairEmissionEvent>& events, Arm arm,
                      double rep_period_ps, const DetectorParams& det, uint64_t seed) {
    ClickAccumulator acc(rep_period_ps, det, seed);
    HbtStreams out;
    uint64_t last_pulse = 0;
    for (const auto& ev : events) {
        acc.hbt_event(ev, arm, out.det0, out.det1);
        last_pulse = std::max(last_pulse, ev.pulse_index);
    }
    const double duration = double(last_pulse + 1) * rep_period_ps;
    for (auto& r : out.det0) r.channel = 0;
    for (auto& r : out.det1) r.channel = 1;
    finalize_stream(out.det0, det, duration, derive_seed(seed, 1));
    finalize_stream(out.det1, det, duration, derive_seed(seed, 2));
    return out;
}

CrossStreams detect_cross(const std::vector<source::PairEmissionEvent>& events,
                          double rep_period_ps, const DetectorParams& det,
                          uint64_t seed, double x_arm_delay_ps) {
    ClickAccumulator acc(rep_period_ps, det, seed);
    CrossStreams out;
    uint64_t last_pulse = 0;
    for (const auto& ev : events) {
        acc.cross_event(ev, out.xx, out.x, x_arm_delay_ps);
        last_pulse = std::max(last_pulse, ev.pulse_index);
    }
    const double duration = double(last_pulse + 1) * rep_period_ps + x_arm_delay_ps;
    finalize_stream(out.xx, det, duration, derive_seed(seed, 1));
    finalize_stream(out.x, det, duration, derive_seed(seed, 2));
    return out;
}

CrossStreams detect_projected(const std::vector<source::PairEmissionEvent>& events,
                              quantum::Pol basis_a, quantum::Pol basis_b,
                              double rep_period_ps, const DetectorParams& det,
                              uint64_t seed) {
    ClickAccumulator acc(rep_period_ps, det, seed);
    CrossStreams out;
    uint64_t last_pulse = 0;
    for (const auto& ev : events) {
        acc.projected_event(ev, basis_a, basis_b, out.xx, out.x);
        last_pulse = std::max(last_pulse, ev.pulse_index);
    }
    const double duration = double(last_pulse + 1) * rep_period_ps;
    finalize_stream(out.xx, det, duration, derive_seed(seed, 1), uint8_t(basis_a));
    finalize_stream(out.x, det, duration, derive_seed(seed, 2), uint8_t(basis_b));
    return out;
}

namespace {

constexpr char kTtagMagic[5] = {'T', 'T', 'A', 'G', '1'};

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

void write_ttag(const std::string& path, const ClickStream& s) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    std::string buf(kTtagMagic, 5);
    for (const auto& r : s) {
        buf.push_back(char(r.channel));
        buf.push_back(char(r.outcome));
        const uint64_t bits = uint64_t(r.time_ps);
        for (int i = 0; i < 8; ++i) buf.push_back(char(bits >> (8 * i)));
        if (buf.size() > 60 * 1024) {
            if (std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
                throw std::runtime_error("write failed: " + path);
            buf.clear();
        }
    }
    if (!buf.empty() && std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw std::runtime_error("write failed: " + path);
}

ClickStream read_ttag(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    char magic[5];
    if (std::fread(magic, 1, 5, f.get()) != 5 || std::memcmp(magic, kTtagMagic, 5) != 0)
        throw std::runtime_error("bad TTAG1 magic in " + path);
    ClickStream out;
    char rec[10];
    size_t offset = 5;
    for (;;) {
        const size_t got = std::fread(rec, 1, sizeof rec, f.get());
        if (got == 0) break;
        if (got != sizeof rec)
            throw std::runtime_error("truncated TTAG1 record at byte offset " +
                                     std::to_string(offset) + " in " + path);
        DetectionRecord r;
        r.channel = uint8_t(rec[0]);
        r.outcome = uint8_t(rec[1]);
        uint64_t bits = 0;
        for (int i = 7; i >= 0; --i) bits = (bits << 8) | uint8_t(rec[2 + i]);
        r.time_ps = int64_t(bits);
        out.push_back(r);
        offset += sizeof rec;
    }
    return out;
}

} // namespace qdqkd::analysis
