// Acceptance suite: one pass/fail line per criterion, exit code equals the
// number of failed criteria.  Every tolerance is pinned in this file.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "qdqkd/experiment_config.hpp"
#include "qdqkd/qkd_protocol.hpp"
#include "qdqkd/quantum_math.hpp"
#include "qdqkd/source_model.hpp"
#include "qdqkd/stream_analysis.hpp"
#include "qdqkd/tomography.hpp"

using namespace qdqkd;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

struct Criterion {
    std::string name;
    bool ok = true;
    std::vector<std::string> notes;
    Clock::time_point t0 = Clock::now();

    explicit Criterion(std::string n) : name(std::move(n)) {}

    void check(bool cond, const std::string& what) {
        char line[512];
        std::snprintf(line, sizeof line, "    %s %s", cond ? "ok  " : "FAIL",
                      what.c_str());
        notes.push_back(line);
        if (!cond) ok = false;
    }
    void note(const std::string& what) { notes.push_back("         " + what); }

    void finish() {
        const double secs =
            std::chrono::duration<double>(Clock::now() - t0).count();
        std::printf("[%s] %s (%.1f s)\n", ok ? "PASS" : "FAIL", name.c_str(), secs);
        for (const auto& n : notes) std::printf("%s\n", n.c_str());
        std::fflush(stdout);
        if (!ok) ++g_failures;
    }
};

std::string fmt(const char* pattern, double a, double b = 0, double c = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, pattern, a, b, c);
    return buf;
}

cfg::ExperimentConfig shipped_20k() {
    return cfg::load_config(std::string(QDQKD_CONFIG_SRC_DIR) + "/paper-20K.cfg");
}
cfg::ExperimentConfig shipped_5k() {
    return cfg::load_config(std::string(QDQKD_CONFIG_SRC_DIR) + "/paper-5K.cfg");
}

// ---------------------------------------------------------------------------

void criterion_1_min_qber() {
    Criterion c("criterion 1: minimum QBER from the FSS-averaged state");
    const auto rho = quantum::fss_time_averaged_rho({0.96, 230.0, 0.0});
    const double q = quantum::qber_from_rho(rho);
    const double q_oracle = oracles::qber_closed_form(0.96, 230.0);
    c.check(std::fabs(q - 0.027) <= 0.004, fmt("QBER %.4f within 0.027 +- 0.004", q));
    c.check(std::fabs(q - q_oracle) <= 1e-9,
            fmt("matches analytic x^2/(4(1+x^2)) to 1e-9 (delta %.2e)", q - q_oracle));
    const double secs = std::chrono::duration<double>(Clock::now() - c.t0).count();
    c.check(secs < 1.0, fmt("runtime %.3f s < 1 s", secs));
    c.finish();
}

void criterion_2_table_metrics() {
    Criterion c("criterion 2: calculated concurrence/fidelity at 20 K and 5 K");
    const double p20 = quantum::noise_admixture_from_g2(0.034, 0.020);
    const auto rho20 = quantum::fss_time_averaged_rho({0.96, 252.0, p20});
    const double c20 = quantum::concurrence(rho20);
    const double f20 = quantum::bell_fidelity_max(rho20);
    c.check(std::fabs(c20 - 0.900) <= 0.03, fmt("20 K concurrence %.4f = 0.900 +- 0.03", c20));
    c.check(std::fabs(f20 - 0.960) <= 0.02, fmt("20 K fidelity %.4f = 0.960 +- 0.02", f20));
    const double p5 = quantum::noise_admixture_from_g2(0.011, 0.017);
    const auto rho5 = quantum::fss_time_averaged_rho({1.13, 238.0, p5});
    const double f5 = quantum::bell_fidelity_max(rho5);
    c.check(std::fabs(f5 - 0.959) <= 0.02, fmt("5 K fidelity %.4f = 0.959 +- 0.02", f5));
    const double secs = std::chrono::duration<double>(Clock::now() - c.t0).count();
    c.check(secs < 1.0, fmt("runtime %.3f s < 1 s", secs));
    c.finish();
}

void criterion_3_estimators() {
    Criterion c("criterion 3: estimator recovery at 1e7 pulses, single worker");
    auto cfg = shipped_20k();
    auto det = cfg.detector;
    det.dark_count_rate_hz = 0.0;
    const double period = cfg.source.rep_period_ps();

    {  // pair-generation probability, at a rate where dead time stays neutral
        auto src = cfg.source;
        src.slow_channel_fraction = 0.0;
        auto det_eps = det;
        det_eps.efficiency = 0.1;
        const auto events = source::simulate_pulses(src, 10000000, 1001);
        const auto s = analysis::detect_cross(events, period, det_eps, 1002);
        const auto h = analysis::build_histogram(s.xx, s.x, 125, 400000);
        const double eps = analysis::pair_probability_epsilon(h);
        c.check(std::fabs(eps - 0.87) <= 0.01, fmt("epsilon %.4f = 0.87 +- 0.01", eps));
    }
    {  // blink-free on-fraction
        auto src = cfg.source;
        src.multiphoton_prob_xx = src.multiphoton_prob_x = 0.0;
        const auto events = source::simulate_pulses(src, 10000000, 1003);
        auto d0 = det;
        d0.dead_time_ps = 0.0;
        const auto hbt = analysis::detect_hbt(events, analysis::Arm::X, period, d0, 1004);
        const auto h = analysis::build_histogram(hbt.det0, hbt.det1, 100000, 300000000);
        const auto est = analysis::on_fraction_beta(h);
        c.check(std::fabs(est.beta - 1.00) <= 0.02,
                fmt("blink-free beta %.4f = 1.00 +- 0.02", est.beta));
    }
    {  // blinking on-fraction 0.3
        auto src = cfg.source;
        src.multiphoton_prob_xx = src.multiphoton_prob_x = 0.0;
        src.pair_prob_epsilon = 1.0;
        src.blink_beta = 0.3;
        src.blink_off_mean_us = 20.0;
        const auto events = source::simulate_pulses(src, 10000000, 1005);
        auto d0 = det;
        d0.dead_time_ps = 0.0;
        const auto hbt = analysis::detect_hbt(events, analysis::Arm::X, period, d0, 1006);
        const auto h = analysis::build_histogram(hbt.det0, hbt.det1, 100000, 300000000);
        const auto est = analysis::on_fraction_beta(h);
        c.check(std::fabs(est.beta - 0.30) <= 0.01,
                fmt("beta %.4f = 0.30 +- 0.01 (g2(0) %.3f)", est.beta, est.g2_zero));
    }
    {  // antibunching with calibrated multiphoton settings
        auto src = cfg.source;
        src.slow_channel_fraction = 0.0;
        const auto events = source::simulate_pulses(src, 10000000, 1007);
        const auto hbt_x = analysis::detect_hbt(events, analysis::Arm::X, period, det, 1008);
        const auto hx = analysis::build_histogram(hbt_x.det0, hbt_x.det1, 50, 310000);
        const double g2x = analysis::g2_zero(hx);
        c.check(std::fabs(g2x - 0.020) <= 0.005, fmt("g2_X(0) %.4f = 0.020 +- 0.005", g2x));
        const auto hbt_xx = analysis::detect_hbt(events, analysis::Arm::XX, period, det, 1009);
        const auto hxx = analysis::build_histogram(hbt_xx.det0, hbt_xx.det1, 50, 310000);
        const double g2xx = analysis::g2_zero(hxx);
        c.check(std::fabs(g2xx - 0.034) <= 0.006,
                fmt("g2_XX(0) %.4f = 0.034 +- 0.006", g2xx));
    }
    {  // lifetime fits through the detector response; modest click rate so
       // the dead time stays a pure rate effect
        auto src = cfg.source;
        src.slow_channel_fraction = 0.0;
        src.multiphoton_prob_xx = src.multiphoton_prob_x = 0.0;
        auto det_lt = det;
        det_lt.efficiency = 0.1;
        const auto events = source::simulate_pulses(src, 2000000, 1040);
        const auto s = analysis::detect_cross(events, period, det_lt, 1041);
        // X lifetime isolated by the XX -> X start-stop delay (the clock-
        // referenced X trace carries the XX feeding time on top)
        const auto h_x = analysis::build_histogram(s.xx, s.x, 10, 12500);
        const auto fit_x = analysis::fit_lifetime(h_x, analysis::LifetimeModel::Single,
                                                  det.jitter_sigma_ps * std::sqrt(2.0));
        c.check(fit_x.converged && std::fabs(fit_x.tau1_ps - 252.0) <= 2.0 * fit_x.tau1_err_ps,
                fmt("X lifetime %.1f +- %.1f ps covers 252 at 2 sigma", fit_x.tau1_ps,
                    fit_x.tau1_err_ps));
        const auto h_xx = analysis::fold_start_stop(s.xx, 12500, 10);
        const auto fit_xx = analysis::fit_lifetime(h_xx, analysis::LifetimeModel::Single,
                                                   det.jitter_sigma_ps);
        c.check(fit_xx.converged &&
                    std::fabs(fit_xx.tau1_ps - 72.0) <= 2.0 * fit_xx.tau1_err_ps,
                fmt("XX lifetime %.1f +- %.1f ps covers 72 at 2 sigma", fit_xx.tau1_ps,
                    fit_xx.tau1_err_ps));
    }
    const double secs = std::chrono::duration<double>(Clock::now() - c.t0).count();
    c.check(secs < 60.0, fmt("runtime %.1f s < 60 s", secs));
    c.finish();
}

void criterion_4_tomography() {
    Criterion c("criterion 4: tomography reconstruction");
    {  // random-state recovery at one million events
        for (uint64_t seed : {2001u, 2002u}) {
            Rng rng(seed);
            quantum::Mat4 g;
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j)
                    g(i, j) = quantum::complexd(rng.gauss(), rng.gauss());
            quantum::Mat4 m = g * g.adjoint();
            m /= m.trace().real();
            m = 0.5 * (m + m.adjoint());
            const quantum::DensityMatrix2Q rho(m);
            const auto counts = tomo::counts_from_state(rho, tomo::TomographySettings{},
                                                        1000000 / 36, seed + 5);
            const auto mle = tomo::mle_reconstruct(counts);
            const double fid = quantum::state_fidelity(mle.rho, rho);
            c.check(mle.converged && fid > 0.99,
                    fmt("random state recovered with fidelity %.5f > 0.99", fid));
            const quantum::Mat4& mm = mle.rho.matrix();
            Eigen::SelfAdjointEigenSolver<quantum::Mat4> es(mm, Eigen::EigenvaluesOnly);
            c.check((mm - mm.adjoint()).cwiseAbs().maxCoeff() <= 1e-12 &&
                        std::fabs(mm.trace().real() - 1.0) <= 1e-12 &&
                        es.eigenvalues().minCoeff() >= -1e-9,
                    "reconstruction satisfies Hermitian/trace/PSD invariants");
        }
    }
    {  // the 20 K pipeline
        auto cfg = shipped_20k();
        const auto counts = tomo::simulate_tomography(cfg.source, cfg.detector,
                                                      cfg.tomography, 2010, 1);
        const auto mle = tomo::mle_reconstruct(counts);
        const double c_hat = quantum::concurrence(mle.rho);
        const double f_hat = quantum::bell_fidelity_max(mle.rho);
        c.check(mle.converged, "20 K pipeline reconstruction converged");
        c.check(f_hat >= 0.90 && f_hat <= 0.95,
                fmt("20 K max Bell fidelity %.4f in [0.90, 0.95]", f_hat));
        c.check(c_hat >= 0.68 && c_hat <= 0.76,
                fmt("20 K concurrence %.4f in [0.68, 0.76]", c_hat));
        if (!(c_hat >= 0.68 && c_hat <= 0.76)) {
            c.note("the two-qubit bound C >= 2F - 1 forces C >= 0.80 whenever");
            c.note("F >= 0.90, so no density matrix can satisfy both stated");
            c.note(fmt("intervals; the simulated state obeys the bound (C=%.3f, "
                       "2F-1=%.3f)", c_hat, 2.0 * f_hat - 1.0));
        }
        const quantum::Mat4& mm = mle.rho.matrix();
        Eigen::SelfAdjointEigenSolver<quantum::Mat4> es(mm, Eigen::EigenvaluesOnly);
        c.check(es.eigenvalues().minCoeff() >= -1e-9,
                "20 K reconstruction satisfies the PSD invariant");
    }
    c.finish();
}

void criterion_5_window_shift() {
    Criterion c("criterion 5: coincidence-window shift sensitivity");
    auto cfg = shipped_20k();
    const std::vector<double> offsets{-1000.0, -500.0, 0.0, 500.0, 1000.0};
    {  // slow channel enabled (fraction 0.09, depolarized)
        auto settings = cfg.tomography;
        settings.pulses_per_basis = 600000;
        const auto bh =
            tomo::simulate_basis_histograms(cfg.source, cfg.detector, settings, 3001, 1);
        const auto curve = tomo::window_sensitivity(bh, settings.window_ps, offsets);
        const double q0 = curve[2].qber, q_plus = curve[3].qber, q_minus = curve[0].qber;
        c.check(q_plus - q0 >= 0.01,
                fmt("+0.5 ns shift raises QBER by %.3f pp >= 1 pp", 100 * (q_plus - q0)));
        c.check(q_minus <= q0, fmt("-1.0 ns shift lowers QBER (%.4f <= %.4f)", q_minus, q0));
    }
    {  // nothing delay-dependent left: slow channel off, zero splitting
        auto src = cfg.source;
        src.slow_channel_fraction = 0.0;
        src.fss_ueV = 0.0;
        auto settings = cfg.tomography;
        settings.pulses_per_basis = 300000;
        const auto bh = tomo::simulate_basis_histograms(src, cfg.detector, settings, 3002, 1);
        const auto curve = tomo::window_sensitivity(bh, settings.window_ps, offsets);
        double lo = 1.0, hi = 0.0, q0 = curve[2].qber;
        uint64_t total = 0;
        for (const auto& e : tomo::counts_at_offset(bh, settings.window_ps, 0.0).entries)
            total += e.counts;
        for (const auto& pt : curve) {
            lo = std::min(lo, pt.qber);
            hi = std::max(hi, pt.qber);
        }
        // 3 sigma of the per-offset estimate, conservatively on the error bases
        const double sigma = std::sqrt(std::max(q0, 0.005) / (double(total) / 4.0));
        c.check(hi - lo <= 3.0 * sigma * std::sqrt(2.0),
                fmt("flat curve without the slow channel (spread %.4f <= %.4f)",
                    hi - lo, 3.0 * sigma * std::sqrt(2.0)));
    }
    c.finish();
}

void criterion_6_session() {
    Criterion c("criterion 6: eight-hour key-generation session (accelerated)");
    auto cfg = shipped_20k();
    qkd::SessionOptions opt;
    opt.duration_s = cfg.session.duration_s;
    opt.block_s = cfg.session.block_s;
    opt.accel_factor = cfg.session.accel_factor;
    opt.window_ps = cfg.session.window_ps;
    opt.window_offset_ps = cfg.session.window_offset_ps;
    opt.sample_fraction = cfg.session.sample_fraction;
    opt.seed = cfg.session.seed;
    opt.threads = 1;
    const auto res = qkd::run_session(cfg.source, cfg.channel, cfg.detector, opt);

    c.check(std::fabs(res.report.mean_qber - 0.084) <= 0.015,
            fmt("mean QBER %.4f = 0.084 +- 0.015", res.report.mean_qber));
    c.check(res.report.min_qber >= 0.05,
            fmt("minimum block QBER %.4f >= 0.05", res.report.min_qber));
    c.check(std::fabs(res.report.mean_raw_bps - 54.8) <= 5.0,
            fmt("raw rate %.2f bits/s = 54.8 +- 5", res.report.mean_raw_bps));
    const double yield =
        double(res.report.total_secure_bits) / double(res.report.total_raw_bits);
    c.check(yield >= 0.15 && yield <= 0.40,
            fmt("secure/raw yield %.3f in [0.15, 0.40]", yield));
    bool gate_ok = true;
    for (const auto& b : res.report.blocks)
        if (b.qber >= qkd::kQberAbortThreshold && b.secure_bps != 0.0) gate_ok = false;
    c.check(gate_ok, "secure rate identically zero in every block at QBER >= 11%");
    const double secs = std::chrono::duration<double>(Clock::now() - c.t0).count();
    c.check(secs < 600.0, fmt("runtime %.1f s < 600 s", secs));
    c.finish();
}

void criterion_7_protocol_properties() {
    Criterion c("criterion 7: protocol correctness over 100 randomized sessions");
    bool keys_identical = true, leakage_ok = true, gate_ok = true;
    uint64_t sessions_with_key = 0;
    for (uint64_t s = 0; s < 100; ++s) {
        Rng rng(derive_seed(4000, s));
        source::SourceParams src;
        src.pair_prob_epsilon = 0.7 + 0.3 * rng.u01();
        src.xx_lifetime_ps = 72.0;
        src.x_lifetime_ps = 200.0 + 100.0 * rng.u01();
        src.fss_ueV = 0.4 + 1.6 * rng.u01();
        qkd::ChannelParams ch;
        ch.arm_efficiency_alice = ch.arm_efficiency_bob = 0.25;
        ch.dark_count_rate_hz = 0.0;
        ch.initial_misalignment_rad = 0.15 * rng.u01();
        analysis::DetectorParams det;
        det.efficiency = 1.0;
        det.jitter_sigma_ps = 250.0;
        det.dark_count_rate_hz = 0.0;
        qkd::SessionOptions opt;
        opt.duration_s = 120.0;
        opt.block_s = 60.0;
        opt.seed = derive_seed(4100, s);
        const auto res = qkd::run_session(src, ch, det, opt);
        if (res.alice_secure.bits != res.bob_secure.bits) keys_identical = false;
        if (res.report.total_secure_bits > 0) ++sessions_with_key;
        for (const auto& b : res.report.blocks) {
            if (b.qber >= qkd::kQberAbortThreshold && b.secure_bps != 0.0) gate_ok = false;
            if (!b.aborted && b.qber > 0.0 && b.raw_bps > 0.0) {
                const double n = b.raw_bps * opt.block_s;
                if (double(b.leaked_bits) > 1.25 * num::binary_entropy(b.qber) * n)
                    leakage_ok = false;
            }
        }
    }
    c.check(keys_identical, "reconciled/amplified keys bit-identical in all sessions");
    c.check(leakage_ok, "CASCADE leakage <= 1.25 h2(Q) n in every accepted block");
    c.check(gate_ok, "no secure bits from any block at or above the QBER threshold");
    c.check(sessions_with_key >= 90,
            fmt("%.0f of 100 sessions distilled a secure key", double(sessions_with_key)));

    {  // one-time-pad properties
        Rng rng(4242);
        qkd::KeyMaterial key, wrong;
        key.stage = wrong.stage = qkd::KeyStage::Amplified;
        for (int i = 0; i < 600000; ++i) {
            key.bits.push_back(uint8_t(rng.next_u64() & 1));
            wrong.bits.push_back(uint8_t(rng.next_u64() & 1));
        }
        std::vector<uint8_t> msg(64800);
        for (auto& m : msg) m = uint8_t(rng.next_u64());
        auto key_bob = key;
        const auto cipher = qkd::otp_encrypt(msg, key);
        const auto plain = qkd::otp_decrypt(cipher, key_bob);
        c.check(plain == msg, "one-time-pad round trip exact (64.8 kbyte payload)");
        auto garbled = qkd::otp_decrypt(cipher, wrong);
        uint64_t diff = 0;
        for (size_t i = 0; i < msg.size(); ++i)
            diff += uint64_t(std::popcount(uint8_t(garbled[i] ^ msg[i])));
        const double frac = double(diff) / (8.0 * double(msg.size()));
        c.check(std::fabs(frac - 0.5) <= 0.01,
                fmt("wrong-key decryption flips %.4f of bits (0.5 +- 0.01)", frac));
        // consumption never rewinds and reuse is refused
        bool reuse_refused = false;
        try {
            std::vector<uint8_t> too_big(100000);
            (void)qkd::otp_encrypt(too_big, key);
        } catch (const qkd::insufficient_key&) {
            reuse_refused = true;
        }
        c.check(reuse_refused && key.consumed_bits == uint64_t(msg.size()) * 8,
                "key bits are spent once and exhaustion is refused");
    }
    c.finish();
}

void criterion_8_determinism() {
    Criterion c("criterion 8: byte-identical outputs under fixed seeds");
    auto cfg = shipped_20k();
    {  // event stream: sequential vs parallel and repeated runs
        const auto a = source::simulate_pulses_parallel(cfg.source, 400000, 808, 1);
        const auto b = source::simulate_pulses_parallel(cfg.source, 400000, 808, 4);
        bool same = a.size() == b.size();
        for (size_t i = 0; same && i < a.size(); ++i)
            same = a[i].pulse_index == b[i].pulse_index &&
                   a[i].xx_emit_time_ps == b[i].xx_emit_time_ps &&
                   a[i].x_emit_time_ps == b[i].x_emit_time_ps &&
                   a[i].joint_state == b[i].joint_state;
        c.check(same, "single- and multi-worker simulation streams identical");
        source::write_qdev("acc_det_a.qdev", a);
        source::write_qdev("acc_det_b.qdev", b);
        std::ifstream fa("acc_det_a.qdev", std::ios::binary), fb("acc_det_b.qdev", std::ios::binary);
        std::string sa{std::istreambuf_iterator<char>(fa), std::istreambuf_iterator<char>()};
        std::string sb{std::istreambuf_iterator<char>(fb), std::istreambuf_iterator<char>()};
        c.check(!sa.empty() && sa == sb, "serialized event files byte-identical");
        std::remove("acc_det_a.qdev");
        std::remove("acc_det_b.qdev");
    }
    {  // tomography counts across worker counts
        auto settings = cfg.tomography;
        settings.pulses_per_basis = 60000;
        const auto c1 = tomo::simulate_tomography(cfg.source, cfg.detector, settings, 809, 1);
        const auto c4 = tomo::simulate_tomography(cfg.source, cfg.detector, settings, 809, 4);
        c.check(tomo::counts_csv(c1) == tomo::counts_csv(c4),
                "tomography counts identical across worker counts");
    }
    {  // session artifacts across worker counts and repeats
        qkd::SessionOptions opt;
        opt.duration_s = 180.0;
        opt.seed = 810;
        opt.threads = 1;
        const auto r1 = qkd::run_session(cfg.source, cfg.channel, cfg.detector, opt);
        opt.threads = 4;
        const auto r4 = qkd::run_session(cfg.source, cfg.channel, cfg.detector, opt);
        c.check(qkd::session_csv(r1.report) == qkd::session_csv(r4.report) &&
                    r1.alice_raw.bits == r4.alice_raw.bits &&
                    r1.alice_secure.bits == r4.alice_secure.bits,
                "session reports and keys identical across worker counts");
    }
    c.finish();
}

} // namespace

int main() {
    std::printf("acceptance suite\n================\n");
    criterion_1_min_qber();
    criterion_2_table_metrics();
    criterion_3_estimators();
    criterion_4_tomography();
    criterion_5_window_shift();
    criterion_6_session();
    criterion_7_protocol_properties();
    criterion_8_determinism();
    std::printf("================\n%d criterion(s) failed\n", g_failures);
    return g_failures;
}
