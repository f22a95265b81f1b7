#include "qdqkd/source_model.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <future>
#include <thread>

namespace qdqkd::source {

namespace {

constexpr uint64_t kBlockPulses = 1 << 16;
constexpr uint64_t kTagBlink = 0xb11c;
constexpr uint64_t kTagBlock = 0xb10c;

// Haar-random single-qubit ket (normalized complex Gaussian pair).
quantum::Vec2 haar_qubit(Rng& rng) {
    quantum::Vec2 v;
    v(0) = {rng.gauss(), rng.gauss()};
    v(1) = {rng.gauss(), rng.gauss()};
    const double n = v.norm();
    if (n == 0.0) { v(0) = 1.0; return v; }
    return v / n;
}

quantum::Vec4 haar_product_state(Rng& rng) {
    const quantum::Vec2 a = haar_qubit(rng), b = haar_qubit(rng);
    quantum::Vec4 v;
    v << a(0) * b(0), a(0) * b(1), a(1) * b(0), a(1) * b(1);
    return v;
}

} // namespace

void validate(const SourceParams& p) {
    if (!(p.rep_rate_hz > 0)) throw invalid_input("rep_rate must be > 0");
    auto frac = [](double v, const char* n) {
        if (v < 0 || v > 1) throw invalid_input(std::string(n) + " must be in [0,1]");
    };
    frac(p.pair_prob_epsilon, "pair_prob_epsilon");
    frac(p.slow_channel_fraction, "slow_channel_fraction");
    frac(p.multiphoton_prob_xx, "multiphoton_prob_xx");
    frac(p.multiphoton_prob_x, "multiphoton_prob_x");
    if (!(p.xx_lifetime_ps > 0) || !(p.x_lifetime_ps > 0))
        throw invalid_input("lifetimes must be > 0");
    if (!(p.slow_channel_lifetime_ps > p.x_lifetime_ps))
        throw invalid_input("slow_channel_lifetime must exceed x_lifetime");
    if (!(p.blink_beta > 0) || p.blink_beta > 1)
        throw invalid_input("blink_beta must be in (0,1]");
    if (p.blink_beta < 1 && !(p.blink_off_mean_us > 0))
        throw invalid_input("blink_off_mean must be > 0 when blinking");
    if (p.fss_ueV < 0) throw invalid_input("fss_ueV must be >= 0");
}

BlinkSchedule::BlinkSchedule(const SourceParams& p, double duration_ps, uint64_t seed) {
    if (p.blink_beta >= 1.0) return;  // never off
    Rng rng(derive_seed(seed, kTagBlink));
    const double off_mean = p.blink_off_mean_us * 1e6;  // ps
    const double on_mean = off_mean * p.blink_beta / (1.0 - p.blink_beta);
    start_on_ = rng.bernoulli(p.blink_beta);  // stationary start
    bool on = start_on_;
    double t = 0.0;
    while (t < duration_ps) {
        t += rng.expo(on ? on_mean : off_mean);
        toggles_.push_back(t);
        on = !on;
    }
}

bool BlinkSchedule::on_at(double t_ps) const {
    if (toggles_.empty()) return start_on_;
    const size_t idx = std::upper_bound(toggles_.begin(), toggles_.end(), t_ps) -
                       toggles_.begin();
    return (idx % 2 == 0) ? start_on_ : !start_on_;
}

namespace {

struct BlockOutput {
    std::vector<PairEmissionEvent> events;
    uint64_t on_pulses = 0, pairs = 0, slow = 0, background = 0;
};

BlockOutput run_block(const SourceParams& p, const BlinkSchedule& blink,
                      uint64_t first_pulse, uint64_t n, uint64_t seed,
                      uint64_t block_index) {
    BlockOutput out;
    Rng rng(derive_seed(seed, kTagBlock, block_index));
    const double period = p.rep_period_ps();
    for (uint64_t i = 0; i < n; ++i) {
        const uint64_t pulse = first_pulse + i;
        const double t_pulse = double(pulse) * period;
        if (!blink.on_at(t_pulse)) continue;
        ++out.on_pulses;
        // FSS may drift linearly with wall-clock time
        double s_now = p.fss_ueV;
        if (p.fss_drift_ueV_per_hour != 0.0)
            s_now += p.fss_drift_ueV_per_hour * (t_pulse / 3.6e18);
        if (rng.bernoulli(p.pair_prob_epsilon)) {
            PairEmissionEvent ev;
            ev.pulse_index = pulse;
            ev.xx_emit_time_ps = rng.expo(p.xx_lifetime_ps);
            const bool slow = p.slow_channel_fraction > 0 &&
                              rng.bernoulli(p.slow_channel_fraction);
            const double x_delay =
                rng.expo(slow ? p.slow_channel_lifetime_ps : p.x_lifetime_ps);
            ev.x_emit_time_ps = ev.xx_emit_time_ps + x_delay;
            ev.via_slow_channel = slow;
            if (slow && p.slow_channel_dephased) {
                ev.joint_state = haar_product_state(rng);
            } else {
                const double phase = s_now * (x_delay / kPsPerNs) / kHbarUevNs;
                ev.joint_state = quantum::phi_plus_phase(phase).amplitudes;
            }
            out.events.push_back(ev);
            ++out.pairs;
            if (slow) ++out.slow;
        }
        if (p.multiphoton_prob_xx > 0 && rng.bernoulli(p.multiphoton_prob_xx)) {
            PairEmissionEvent bg;
            bg.pulse_index = pulse;
            bg.background = true;
            bg.background_in_x = false;
            bg.xx_emit_time_ps = rng.expo(p.xx_lifetime_ps);
            bg.x_emit_time_ps = -1.0;
            const quantum::Vec2 chi = haar_qubit(rng);
            bg.joint_state << chi(0), chi(1), 0.0, 0.0;
            out.events.push_back(bg);
            ++out.background;
        }
        if (p.multiphoton_prob_x > 0 && rng.bernoulli(p.multiphoton_prob_x)) {
            PairEmissionEvent bg;
            bg.pulse_index = pulse;
            bg.background = true;
            bg.background_in_x = true;
            bg.xx_emit_time_ps = -1.0;
            bg.x_emit_time_ps = rng.expo(p.x_lifetime_ps);
            const quantum::Vec2 chi = haar_qubit(rng);
            bg.joint_state << chi(0), chi(1), 0.0, 0.0;
            out.events.push_back(bg);
            ++out.background;
        }
    }
    return out;
}

} // namespace

SimulationSummary simulate_pulses_stream(const SourceParams& p, uint64_t n_pulses,
                                         uint64_t seed, const EventSink& sink) {
    validate(p);
    if (n_pulses < 1) throw invalid_input("n_pulses must be >= 1");
    BlinkSchedule blink(p, double(n_pulses) * p.rep_period_ps(), seed);
    SimulationSummary sum;
    sum.n_pulses = n_pulses;
    for (uint64_t first = 0, block = 0; first < n_pulses; first += kBlockPulses, ++block) {
        const uint64_t n = std::min<uint64_t>(kBlockPulses, n_pulses - first);
        BlockOutput out = run_block(p, blink, first, n, seed, block);
        sum.on_pulses += out.on_pulses;
        sum.pairs += out.pairs;
        sum.slow_pairs += out.slow;
        sum.background_photons += out.background;
        for (const auto& ev : out.events) sink(ev);
    }
    return sum;
}

std::vector<PairEmissionEvent> simulate_pulses(const SourceParams& p,
                                               uint64_t n_pulses, uint64_t seed,
                                               SimulationSummary* summary) {
    std::vector<PairEmissionEvent> events;
    SimulationSummary sum = simulate_pulses_stream(
        p, n_pulses, seed, [&](const PairEmissionEvent& ev) { events.push_back(ev); });
    if (summary) *summary = sum;
    return events;
}

std::vector<PairEmissionEvent> simulate_pulses_parallel(const SourceParams& p,
                                                        uint64_t n_pulses,
                                                        uint64_t seed,
                                                        unsigned threads,
                                                        SimulationSummary* summary) {
    validate(p);
    if (n_pulses < 1) throw invalid_input("n_pulses must be >= 1");
    if (threads <= 1) return simulate_pulses(p, n_pulses, seed, summary);
    BlinkSchedule blink(p, double(n_pulses) * p.rep_period_ps(), seed);
    const uint64_t n_blocks = (n_pulses + kBlockPulses - 1) / kBlockPulses;
    std::vector<BlockOutput> outputs(n_blocks);
    std::atomic<uint64_t> next{0};
    auto worker = [&] {
        for (;;) {
            const uint64_t b = next.fetch_add(1);
            if (b >= n_blocks) return;
            const uint64_t first = b * kBlockPulses;
            const uint64_t n = std::min<uint64_t>(kBlockPulses, n_pulses - first);
            outputs[b] = run_block(p, blink, first, n, seed, b);
        }
    };
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    SimulationSummary sum;
    sum.n_pulses = n_pulses;
    std::vector<PairEmissionEvent> events;
    for (auto& out : outputs) {
        sum.on_pulses += out.on_pulses;
        sum.pairs += out.pairs;
        sum.slow_pairs += out.slow;
        sum.background_photons += out.background;
        events.insert(events.end(), out.events.begin(), out.events.end());
    }
    if (summary) *summary = sum;
    return events;
}

void validate(const VoltagePlateau& p) {
    if (!(p.v_low < p.v_high)) throw invalid_input("v_low must be < v_high");
    if (p.wavelength_shift_range_nm < 0)
        throw invalid_input("wavelength_shift_range must be >= 0");
}

double wavelength_at(double voltage, const VoltagePlateau& p) {
    validate(p);
    const double center = 0.5 * (p.v_low + p.v_high);
    const double v = std::clamp(voltage, p.v_low, p.v_high);
    const double shift =
        (v - center) / (p.v_high - p.v_low) * p.wavelength_shift_range_nm;
    return p.center_wavelength_nm + shift;
}

double on_fraction_at(double voltage, const VoltagePlateau& p) {
    validate(p);
    if (voltage >= p.v_neutral_low && voltage <= p.v_neutral_high) return 1.0;
    return p.off_plateau_beta;
}

namespace {

constexpr char kQdevMagic[5] = {'Q', 'D', 'E', 'V', '1'};

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(char(v >> (8 * i)));
}
void put_f64(std::string& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(buf, bits);
}

} // namespace

void write_qdev(const std::string& path, const std::vector<PairEmissionEvent>& events) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    std::string buf(kQdevMagic, 5);
    buf.reserve(64 * 1024);
    for (const auto& ev : events) {
        put_u64(buf, ev.pulse_index);
        put_f64(buf, ev.xx_emit_time_ps);
        put_f64(buf, ev.x_emit_time_ps);
        uint8_t flags = (ev.source_on ? 1 : 0) | (ev.via_slow_channel ? 2 : 0) |
                        (ev.background ? 4 : 0) | (ev.background_in_x ? 8 : 0);
        buf.push_back(char(flags));
        for (int i = 0; i < 4; ++i) {
            put_f64(buf, ev.joint_state(i).real());
            put_f64(buf, ev.joint_state(i).imag());
        }
        if (buf.size() > 60 * 1024) {
            if (std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
                throw std::runtime_error("write failed: " + path);
            buf.clear();
        }
    }
    if (!buf.empty() && std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw std::runtime_error("write failed: " + path);
}

namespace {

uint64_t get_u64(const char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | uint8_t(p[i]);
    return v;
}
double get_f64(const char* p) {
    const uint64_t bits = get_u64(p);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace

std::vector<PairEmissionEvent> read_qdev(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    char magic[5];
    if (std::fread(magic, 1, 5, f.get()) != 5 || std::memcmp(magic, kQdevMagic, 5) != 0)
        throw std::runtime_error("bad QDEV1 magic in " + path);
    constexpr size_t kRec = 8 + 8 + 8 + 1 + 64;
    std::vector<PairEmissionEvent> events;
    std::vector<char> rec(kRec);
    size_t offset = 5;
    for (;;) {
        const size_t got = std::fread(rec.data(), 1, kRec, f.get());
        if (got == 0) break;
        if (got != kRec)
            throw std::runtime_error("truncated QDEV1 record at byte offset " +
                                     std::to_string(offset) + " in " + path);
        PairEmissionEvent ev;
        ev.pulse_index = get_u64(&rec[0]);
        ev.xx_emit_time_ps = get_f64(&rec[8]);
        ev.x_emit_time_ps = get_f64(&rec[16]);
        const uint8_t flags = uint8_t(rec[24]);
        ev.source_on = flags & 1;
        ev.via_slow_channel = flags & 2;
        ev.background = flags & 4;
        ev.background_in_x = flags & 8;
        for (int i = 0; i < 4; ++i)
            ev.joint_state(i) = {get_f64(&rec[25 + 16 * i]), get_f64(&rec[33 + 16 * i])};
        events.push_back(ev);
        offset += kRec;
    }
    return events;
}

} // namespace qdqkd::source
