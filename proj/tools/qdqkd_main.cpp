// Command-line front end: reproducible simulation, analysis, tomography, key
// generation and one-time-pad runs over the configured experiment.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "qdqkd/experiment_config.hpp"
#include "qdqkd/qkd_protocol.hpp"
#include "qdqkd/quantum_math.hpp"
#include "qdqkd/stream_analysis.hpp"
#include "qdqkd/tomography.hpp"

namespace {

using namespace qdqkd;

// stable, documented exit codes
enum ExitCode : int {
    kOk = 0,
    kUsage = 2,        // bad arguments or config
    kIoError = 3,      // file problems
    kNoConvergence = 4,
    kSecurityAbort = 5,
};

struct GlobalArgs {
    std::string config;
    uint64_t seed = 1;
    bool seed_set = false;
    std::string out = "out";
    unsigned threads = 1;
    double window_offset_ps = 0.0;
    bool window_offset_set = false;
    bool gnuplot = false;
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << text;
}

void write_hist_gnuplot(const std::string& out_prefix) {
    write_text(out_prefix + ".gp",
               "set datafile separator ','\n"
               "set xlabel 'delay (ps)'\n"
               "set ylabel 'coincidences'\n"
               "plot '" + out_prefix +
                   ".hist.csv' skip 1 using 1:2 with steps notitle\n");
}

cfg::ExperimentConfig load_or_default(const GlobalArgs& g) {
    cfg::ExperimentConfig c;
    if (!g.config.empty()) c = cfg::load_config(cfg::resolve_config_path(g.config));
    if (g.seed_set) c.session.seed = g.seed;
    if (g.window_offset_set) {
        c.session.window_offset_ps = g.window_offset_ps;
        c.tomography.window_offset_ps = g.window_offset_ps;
    }
    return c;
}

int cmd_simulate(const GlobalArgs& g, uint64_t pulses, const std::string& ttag_mode) {
    auto c = load_or_default(g);
    source::SimulationSummary sum;
    auto events = source::simulate_pulses_parallel(c.source, pulses, c.session.seed,
                                                   g.threads, &sum);
    source::write_qdev(g.out + ".qdev", events);
    if (!ttag_mode.empty()) {
        const double period = c.source.rep_period_ps();
        if (ttag_mode == "cross") {
            auto s = analysis::detect_cross(events, period, c.detector, c.session.seed);
            analysis::write_ttag(g.out + ".a.ttag", s.xx);
            analysis::write_ttag(g.out + ".b.ttag", s.x);
        } else if (ttag_mode == "hbt-xx" || ttag_mode == "hbt-x") {
            const auto arm = ttag_mode == "hbt-x" ? analysis::Arm::X : analysis::Arm::XX;
            auto s = analysis::detect_hbt(events, arm, period, c.detector, c.session.seed);
            analysis::write_ttag(g.out + ".a.ttag", s.det0);
            analysis::write_ttag(g.out + ".b.ttag", s.det1);
        } else {
            throw invalid_input("unknown --ttag mode '" + ttag_mode + "'");
        }
    }
    std::printf("pulses=%llu on_fraction=%.6f pairs=%llu slow_pairs=%llu background=%llu\n",
                (unsigned long long)sum.n_pulses,
                double(sum.on_pulses) / double(sum.n_pulses),
                (unsigned long long)sum.pairs, (unsigned long long)sum.slow_pairs,
                (unsigned long long)sum.background_photons);
    return kOk;
}

int cmd_analyze(const GlobalArgs& g, const std::string& kind, const std::string& in_a,
                const std::string& in_b, int64_t bin_ps, int64_t span_ps,
                const std::string& model_name, double irf_sigma, int max_fit_iter) {
    auto c = load_or_default(g);
    const int64_t period = int64_t(std::llround(c.source.rep_period_ps()));
    std::string report;
    char line[160];

    if (kind == "lifetime") {
        auto s = analysis::read_ttag(in_a);
        // start-stop delays against the excitation clock, peak centered
        const int64_t bw = bin_ps > 0 ? bin_ps : 10;
        const auto h = analysis::fold_start_stop(s, period, bw);
        const auto model = model_name == "double" ? analysis::LifetimeModel::Double
                                                  : analysis::LifetimeModel::Single;
        analysis::FitOptions fit_opt;
        if (max_fit_iter > 0) fit_opt.max_iterations = max_fit_iter;
        const auto fit = analysis::fit_lifetime(h, model, irf_sigma, fit_opt);
        analysis::write_histogram_csv(g.out + ".hist.csv", h);
        std::snprintf(line, sizeof line,
                      "converged = %s\ntau1_ps = %.3f\ntau1_err_ps = %.3f\n",
                      fit.converged ? "true" : "false", fit.tau1_ps, fit.tau1_err_ps);
        report += line;
        if (model == analysis::LifetimeModel::Double) {
            std::snprintf(line, sizeof line,
                          "tau2_ps = %.3f\ntau2_err_ps = %.3f\nfrac1 = %.4f\n",
                          fit.tau2_ps, fit.tau2_err_ps, fit.frac1);
            report += line;
        }
        write_text(g.out + ".report.txt", report);
        std::fputs(report.c_str(), stdout);
        return fit.converged ? kOk : kNoConvergence;
    }

    auto a = analysis::read_ttag(in_a);
    auto b = analysis::read_ttag(in_b);
    if (kind == "g2") {
        const int64_t span = span_ps > 0 ? span_ps : 310000;
        auto h = analysis::build_histogram(a, b, bin_ps > 0 ? bin_ps : 50, span);
        const double g2 = analysis::g2_zero(h, 2000, period);
        analysis::write_histogram_csv(g.out + ".hist.csv", h);
        std::snprintf(line, sizeof line, "g2_zero = %.6f\n", g2);
    } else if (kind == "beta") {
        const int64_t bw = bin_ps > 0 ? bin_ps : 100000;
        const int64_t span = span_ps > 0 ? span_ps : 3001 * bw;
        auto h = analysis::build_histogram(a, b, bw, span);
        const auto est = analysis::on_fraction_beta(h);
        analysis::write_histogram_csv(g.out + ".hist.csv", h);
        std::snprintf(line, sizeof line, "g2_zero = %.4f\nbeta = %.4f\n", est.g2_zero,
                      est.beta);
    } else if (kind == "epsilon") {
        const int64_t span = span_ps > 0 ? span_ps : 400000;
        auto h = analysis::build_histogram(a, b, bin_ps > 0 ? bin_ps : 125, span);
        const double eps = analysis::pair_probability_epsilon(h, period);
        analysis::write_histogram_csv(g.out + ".hist.csv", h);
        std::snprintf(line, sizeof line, "epsilon = %.6f\n", eps);
    } else {
        throw invalid_input("unknown analysis kind '" + kind + "'");
    }
    report = line;
    write_text(g.out + ".report.txt", report);
    if (g.gnuplot) write_hist_gnuplot(g.out);
    std::fputs(report.c_str(), stdout);
    return kOk;
}

int cmd_tomography(const GlobalArgs& g) {
    auto c = load_or_default(g);
    const auto counts = tomo::simulate_tomography(c.source, c.detector, c.tomography,
                                                  c.session.seed, g.threads);
    write_text(g.out + ".counts.csv", tomo::counts_csv(counts));
    const auto mle = tomo::mle_reconstruct(counts);
    write_text(g.out + ".rho.txt", quantum::to_text(mle.rho));
    char line[256];
    std::snprintf(line, sizeof line,
                  "converged = %s\nconcurrence = %.6f\nbell_fidelity_max = %.6f\n"
                  "bell_fidelity_root = %.6f\nqber = %.6f\n",
                  mle.converged ? "true" : "false", quantum::concurrence(mle.rho),
                  quantum::bell_fidelity_max(mle.rho),
                  std::sqrt(quantum::bell_fidelity_max(mle.rho)),
                  quantum::qber_from_rho(mle.rho));
    write_text(g.out + ".report.txt", line);
    std::fputs(line, stdout);
    return mle.converged ? kOk : kNoConvergence;
}

int cmd_qkd(const GlobalArgs& g) {
    auto c = load_or_default(g);
    qkd::SessionOptions opt;
    opt.duration_s = c.session.duration_s;
    opt.block_s = c.session.block_s;
    opt.accel_factor = c.session.accel_factor;
    opt.window_ps = c.session.window_ps;
    opt.window_offset_ps = c.session.window_offset_ps;
    opt.sample_fraction = c.session.sample_fraction;
    opt.seed = c.session.seed;
    opt.threads = g.threads;
    const auto res = qkd::run_session(c.source, c.channel, c.detector, opt);
    write_text(g.out + ".report.csv", qkd::session_csv(res.report));
    write_text(g.out + ".report.json", qkd::session_json(res.report));
    if (g.gnuplot)
        write_text(g.out + ".gp",
                   "set datafile separator ','\n"
                   "set xlabel 'time (s)'\n"
                   "set y2tics\n"
                   "set ylabel 'QBER'\n"
                   "set y2label 'key rate (bits/s)'\n"
                   "plot '" + g.out +
                       ".report.csv' skip 1 using 1:2 with lines title 'QBER', \\\n"
                       "     '' skip 1 using 1:3 axes x1y2 with lines title 'raw', \\\n"
                       "     '' skip 1 using 1:4 axes x1y2 with lines title 'secure'\n");
    qkd::write_key(g.out + ".alice.raw.key", res.alice_raw);
    qkd::write_key(g.out + ".bob.raw.key", res.bob_raw);
    qkd::write_key(g.out + ".alice.secure.key", res.alice_secure);
    qkd::write_key(g.out + ".bob.secure.key", res.bob_secure);
    std::printf("blocks=%zu mean_qber=%.4f mean_raw_bps=%.2f mean_secure_bps=%.2f\n",
                res.report.blocks.size(), res.report.mean_qber,
                res.report.mean_raw_bps, res.report.mean_secure_bps);
    bool all_aborted = true;
    for (const auto& b : res.report.blocks)
        if (!b.aborted) all_aborted = false;
    if (all_aborted || res.report.total_secure_bits == 0) return kSecurityAbort;
    return kOk;
}

int cmd_otp(const std::string& op, const std::string& key_path, const std::string& in,
            const std::string& out, bool raw) {
    auto key = qkd::read_key(key_path);
    std::ifstream fi(in, std::ios::binary);
    if (!fi) throw std::runtime_error("cannot open for reading: " + in);
    std::vector<uint8_t> data{std::istreambuf_iterator<char>(fi),
                              std::istreambuf_iterator<char>()};
    const uint64_t consumed_before = key.consumed_bits;

    // bitmaps keep their header in the clear so the scrambled image stays
    // viewable; only the pixel array passes through the pad
    bool as_bitmap = false;
    std::vector<uint8_t> result;
    if (!raw && data.size() > 54 && data[0] == 'B' && data[1] == 'M') {
        try {
            qkd::Bitmap24 bmp = qkd::bmp_from_bytes(data);
            bmp.pixels = op == "encrypt" ? qkd::otp_encrypt(bmp.pixels, key)
                                         : qkd::otp_decrypt(bmp.pixels, key);
            result = qkd::bmp_bytes(bmp);
            as_bitmap = true;
        } catch (const qkd::insufficient_key&) {
            throw;
        } catch (const invalid_input&) {
            as_bitmap = false;  // not a plain 24-bit bitmap; treat as bytes
        }
    }
    if (!as_bitmap)
        result = op == "encrypt" ? qkd::otp_encrypt(data, key)
                                 : qkd::otp_decrypt(data, key);

    std::ofstream fo(out, std::ios::binary);
    if (!fo) throw std::runtime_error("cannot open for writing: " + out);
    fo.write(reinterpret_cast<const char*>(result.data()), long(result.size()));
    fo.close();
    qkd::write_key(key_path, key);  // persist the consumed watermark
    std::printf("%s %zu bytes%s, key bits consumed: %llu (total %llu / %llu)\n",
                op.c_str(), result.size(), as_bitmap ? " (bitmap pixels)" : "",
                (unsigned long long)(key.consumed_bits - consumed_before),
                (unsigned long long)key.consumed_bits,
                (unsigned long long)key.size_bits());
    return kOk;
}

int cmd_bitmap(const std::string& out, uint32_t width, uint32_t height) {
    // demo test pattern: gradient plus concentric rings
    qkd::Bitmap24 bmp;
    bmp.width = width;
    bmp.height = height;
    const uint32_t row = (width * 3 + 3) & ~3u;
    bmp.pixels.assign(row * height, 0);
    for (uint32_t y = 0; y < height; ++y) {
        for (uint32_t x = 0; x < width; ++x) {
            const double dx = double(x) - width / 2.0, dy = double(y) - height / 2.0;
            const double r = std::sqrt(dx * dx + dy * dy);
            uint8_t* px = &bmp.pixels[y * row + x * 3];
            px[0] = uint8_t(255.0 * x / width);
            px[1] = uint8_t(255.0 * y / height);
            px[2] = uint8_t(127.0 + 127.0 * std::sin(r / 6.0));
        }
    }
    qkd::write_bmp(out, bmp);
    std::printf("wrote %ux%u 24-bit bitmap (%zu bytes) to %s\n", width, height,
                qkd::bmp_bytes(bmp).size(), out.c_str());
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantum-dot entangled-photon QKD simulator and analysis toolkit"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config, "experiment config file");
    auto* seed_opt = app.add_option("--seed", g.seed, "master seed");
    app.add_option("--out", g.out, "output path prefix");
    app.add_option("--threads", g.threads, "worker thread cap");
    auto* woff_opt = app.add_option("--window-offset-ps", g.window_offset_ps,
                                    "coincidence window center offset");
    app.add_flag("--gnuplot", g.gnuplot, "emit gnuplot companion scripts");

    uint64_t pulses = 1000000;
    std::string ttag_mode;
    auto* sim = app.add_subcommand("simulate", "emit source events (QDEV1/TTAG1)");
    sim->add_option("--pulses", pulses, "number of excitation pulses");
    sim->add_option("--ttag", ttag_mode, "also write click streams: cross|hbt-xx|hbt-x");

    std::string kind, in_a, in_b, model_name = "single";
    int64_t bin_ps = 0, span_ps = 0;
    double irf_sigma = 0.0;
    auto* ana = app.add_subcommand("analyze", "histogram and estimator reports");
    ana->add_option("--kind", kind, "g2|beta|epsilon|lifetime")->required();
    ana->add_option("--in", in_a, "first TTAG1 stream")->required();
    ana->add_option("--in2", in_b, "second TTAG1 stream");
    ana->add_option("--bin-ps", bin_ps, "histogram bin width");
    ana->add_option("--span-ps", span_ps, "histogram span");
    ana->add_option("--model", model_name, "lifetime model: single|double");
    ana->add_option("--irf-sigma-ps", irf_sigma, "Gaussian IRF sigma for lifetime fits");
    int max_fit_iter = 0;
    ana->add_option("--max-fit-iterations", max_fit_iter,
                    "optimizer iteration cap for lifetime fits");

    auto* tomo_cmd = app.add_subcommand("tomography", "36-basis tomography + MLE");

    auto* qkd_cmd = app.add_subcommand("qkd", "run a BBM92 key-generation session");

    std::string otp_op, key_path, in_file, out_file;
    bool otp_raw = false;
    auto* otp_cmd = app.add_subcommand("otp", "one-time-pad encrypt/decrypt");
    otp_cmd->add_option("op", otp_op, "encrypt|decrypt")->required();
    otp_cmd->add_option("--key", key_path, "QKEY1 key file")->required();
    otp_cmd->add_option("--in", in_file, "input file")->required();
    otp_cmd->add_option("--out-file", out_file, "output file")->required();
    otp_cmd->add_flag("--raw", otp_raw, "treat bitmaps as plain bytes");

    std::string bmp_out = "demo.bmp";
    uint32_t bmp_w = 144, bmp_h = 150;
    auto* bmp_cmd = app.add_subcommand("bitmap", "generate a demo 24-bit bitmap");
    bmp_cmd->add_option("--out-file", bmp_out, "output BMP path");
    bmp_cmd->add_option("--width", bmp_w, "width in pixels");
    bmp_cmd->add_option("--height", bmp_h, "height in pixels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    g.seed_set = seed_opt->count() > 0;
    g.window_offset_set = woff_opt->count() > 0;

    try {
        if (sim->parsed()) {
            if (pulses == 0) {
                std::fprintf(stderr, "error: --pulses must be >= 1\n");
                return kUsage;
            }
            return cmd_simulate(g, pulses, ttag_mode);
        }
        if (ana->parsed()) {
            if (kind != "lifetime" && in_b.empty()) {
                std::fprintf(stderr, "error: --in2 required for kind '%s'\n", kind.c_str());
                return kUsage;
            }
            return cmd_analyze(g, kind, in_a, in_b, bin_ps, span_ps, model_name,
                               irf_sigma, max_fit_iter);
        }
        if (tomo_cmd->parsed()) return cmd_tomography(g);
        if (qkd_cmd->parsed()) return cmd_qkd(g);
        if (otp_cmd->parsed()) {
            if (otp_op != "encrypt" && otp_op != "decrypt") {
                std::fprintf(stderr, "error: otp op must be encrypt or decrypt\n");
                return kUsage;
            }
            return cmd_otp(otp_op, key_path, in_file, out_file, otp_raw);
        }
        if (bmp_cmd->parsed()) return cmd_bitmap(bmp_out, bmp_w, bmp_h);
    } catch (const qkd::insufficient_key& e) {
        std::fprintf(stderr, "security error: %s\n", e.what());
        return kSecurityAbort;
    } catch (const invalid_input& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kUsage;
    } catch (const std::runtime_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kIoError;
    }
    return kUsage;
}
