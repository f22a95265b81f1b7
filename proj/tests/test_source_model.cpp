#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "qdqkd/source_model.hpp"

using namespace qdqkd;
using source::PairEmissionEvent;
using source::SimulationSummary;
using source::SourceParams;

namespace {

SourceParams clean_params() {
    SourceParams p;
    p.pair_prob_epsilon = 0.87;
    p.xx_lifetime_ps = 72.0;
    p.x_lifetime_ps = 252.0;
    p.fss_ueV = 0.96;
    return p;
}

} // namespace

TEST_CASE("identical seeds give identical streams; different seeds differ") {
    const auto p = clean_params();
    const auto a = source::simulate_pulses(p, 20000, 42);
    const auto b = source::simulate_pulses(p, 20000, 42);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].pulse_index == b[i].pulse_index);
        CHECK(a[i].xx_emit_time_ps == b[i].xx_emit_time_ps);
        CHECK(a[i].x_emit_time_ps == b[i].x_emit_time_ps);
        CHECK(a[i].joint_state == b[i].joint_state);
    }
    const auto c = source::simulate_pulses(p, 20000, 43);
    bool any_diff = c.size() != a.size();
    for (size_t i = 0; !any_diff && i < std::min(a.size(), c.size()); ++i)
        any_diff = a[i].xx_emit_time_ps != c[i].xx_emit_time_ps;
    CHECK(any_diff);
}

TEST_CASE("parallel execution reproduces the sequential stream exactly") {
    auto p = clean_params();
    p.blink_beta = 0.6;
    p.blink_off_mean_us = 0.5;
    p.slow_channel_fraction = 0.09;
    p.multiphoton_prob_xx = 0.015;
    SimulationSummary s1, s4;
    const auto seq = source::simulate_pulses(p, 300000, 7, &s1);
    const auto par = source::simulate_pulses_parallel(p, 300000, 7, 4, &s4);
    REQUIRE(seq.size() == par.size());
    CHECK(s1.on_pulses == s4.on_pulses);
    CHECK(s1.pairs == s4.pairs);
    for (size_t i = 0; i < seq.size(); ++i) {
        CHECK(seq[i].pulse_index == par[i].pulse_index);
        CHECK(seq[i].x_emit_time_ps == par[i].x_emit_time_ps);
        CHECK(seq[i].joint_state == par[i].joint_state);
    }
}

TEST_CASE("blink_beta = 1 keeps the source on for every pulse") {
    SimulationSummary sum;
    source::simulate_pulses(clean_params(), 50000, 3, &sum);
    CHECK(sum.on_pulses == sum.n_pulses);
}

TEST_CASE("pair frequency converges to epsilon") {
    SimulationSummary sum;
    source::simulate_pulses(clean_params(), 2000000, 11, &sum);
    const double eps_hat = double(sum.pairs) / double(sum.on_pulses);
    CHECK(std::fabs(eps_hat - 0.87) < 0.001);
}

TEST_CASE("slow-channel fraction matches the configured value") {
    auto p = clean_params();
    p.slow_channel_fraction = 0.09;
    SimulationSummary sum;
    source::simulate_pulses(p, 1200000, 5, &sum);
    const double frac = double(sum.slow_pairs) / double(sum.pairs);
    CHECK(std::fabs(frac - 0.09) < 0.005);
}

TEST_CASE("cascade delay means match the configured lifetimes within 1%") {
    auto p = clean_params();
    double xx_sum = 0.0, dx_sum = 0.0;
    uint64_t n = 0;
    source::simulate_pulses_stream(p, 1200000, 9, [&](const PairEmissionEvent& ev) {
        if (ev.background) return;
        xx_sum += ev.xx_emit_time_ps;
        dx_sum += ev.x_emit_time_ps - ev.xx_emit_time_ps;
        ++n;
    });
    CHECK(std::fabs(xx_sum / double(n) - 72.0) < 0.72);
    CHECK(std::fabs(dx_sum / double(n) - 252.0) < 2.52);
}

TEST_CASE("x emission always follows the xx emission") {
    auto p = clean_params();
    p.slow_channel_fraction = 0.2;
    source::simulate_pulses_stream(p, 100000, 13, [&](const PairEmissionEvent& ev) {
        if (!ev.background) CHECK(ev.x_emit_time_ps > ev.xx_emit_time_ps);
    });
}

TEST_CASE("zero splitting and a clean channel give exactly phi+") {
    auto p = clean_params();
    p.fss_ueV = 0.0;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    source::simulate_pulses_stream(p, 20000, 17, [&](const PairEmissionEvent& ev) {
        CHECK(ev.joint_state(0).real() == inv_sqrt2);
        CHECK(ev.joint_state(3).real() == inv_sqrt2);
        CHECK(ev.joint_state(3).imag() == 0.0);
        CHECK(std::abs(ev.joint_state(1)) == 0.0);
        CHECK(std::abs(ev.joint_state(2)) == 0.0);
    });
}

TEST_CASE("blinking on-fraction converges to beta within 3 sigma") {
    for (double beta : {0.2, 0.5, 0.8}) {
        auto p = clean_params();
        p.blink_beta = beta;
        p.blink_off_mean_us = 0.4;
        SimulationSummary sum;
        source::simulate_pulses(p, 1000000, 23, &sum);
        const double measured = double(sum.on_pulses) / double(sum.n_pulses);
        // renewal-process variance of the time average, not binomial
        const double on_mean = p.blink_off_mean_us * beta / (1.0 - beta);
        const double tau_c = 1.0 / (1.0 / on_mean + 1.0 / p.blink_off_mean_us);
        const double duration_us = 1e6 * 12.5e-6;  // 1e6 pulses at 80 MHz
        const double sigma =
            std::sqrt(2.0 * beta * beta * (1 - beta) * (1 - beta) * tau_c / duration_us);
        CHECK(std::fabs(measured - beta) < 3.0 * sigma + 1e-3);
    }
}

TEST_CASE("pair emission is independent of blinking") {
    auto p = clean_params();
    p.blink_beta = 0.5;
    p.blink_off_mean_us = 0.3;
    SimulationSummary sum;
    source::simulate_pulses(p, 2000000, 29, &sum);
    CHECK(std::fabs(double(sum.pairs) / double(sum.on_pulses) - 0.87) < 0.002);
}

TEST_CASE("epsilon = 0 with no background yields an empty pair stream") {
    auto p = clean_params();
    p.pair_prob_epsilon = 0.0;
    SimulationSummary sum;
    const auto events = source::simulate_pulses(p, 10000, 31, &sum);
    CHECK(events.empty());
    CHECK(sum.pairs == 0);
}

TEST_CASE("parameter validation") {
    auto p = clean_params();
    p.pair_prob_epsilon = 1.2;
    CHECK_THROWS_AS(source::validate(p), invalid_input);
    p = clean_params();
    p.slow_channel_fraction = 0.1;
    p.slow_channel_lifetime_ps = 100.0;  // below the x lifetime
    CHECK_THROWS_AS(source::validate(p), invalid_input);
    p = clean_params();
    p.blink_beta = 0.0;
    CHECK_THROWS_AS(source::validate(p), invalid_input);
    CHECK_THROWS_AS(source::simulate_pulses(clean_params(), 0, 1), invalid_input);
}

TEST_CASE("voltage plateau: wavelength map and on-fraction") {
    source::VoltagePlateau v;
    CHECK(source::wavelength_at(0.30, v) ==
          doctest::Approx(v.center_wavelength_nm).epsilon(1e-12));
    CHECK(source::on_fraction_at(0.30, v) == doctest::Approx(1.0));
    const double swing =
        source::wavelength_at(0.35, v) - source::wavelength_at(0.25, v);
    CHECK(swing == doctest::Approx(0.2).epsilon(1e-12));
    // clamped at the window edges
    CHECK(source::wavelength_at(1.0, v) == source::wavelength_at(0.35, v));
    CHECK(source::on_fraction_at(0.05, v) == doctest::Approx(0.3));
    CHECK(source::on_fraction_at(0.50, v) == doctest::Approx(0.3));
}

TEST_CASE("QDEV1 files round-trip exactly") {
    auto p = clean_params();
    p.slow_channel_fraction = 0.09;
    p.multiphoton_prob_xx = 0.02;
    p.multiphoton_prob_x = 0.01;
    const auto events = source::simulate_pulses(p, 30000, 37);
    const std::string path = "test_events.qdev";
    source::write_qdev(path, events);
    const auto back = source::read_qdev(path);
    REQUIRE(back.size() == events.size());
    for (size_t i = 0; i < events.size(); ++i) {
        CHECK(back[i].pulse_index == events[i].pulse_index);
        CHECK(back[i].xx_emit_time_ps == events[i].xx_emit_time_ps);
        CHECK(back[i].x_emit_time_ps == events[i].x_emit_time_ps);
        CHECK(back[i].via_slow_channel == events[i].via_slow_channel);
        CHECK(back[i].background == events[i].background);
        CHECK(back[i].background_in_x == events[i].background_in_x);
        CHECK(back[i].joint_state == events[i].joint_state);
    }
    std::filesystem::remove(path);
    CHECK_THROWS(source::read_qdev("does_not_exist.qdev"));
}
