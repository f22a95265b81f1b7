#include "qdqkd/tomography.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

namespace qdqkd::tomo {

TomographySettings::TomographySettings() {
    for (Pol a : quantum::kAllPols)
        for (Pol b : quantum::kAllPols) bases.emplace_back(a, b);
}

void validate(const TomographySettings& s) {
    if (s.window_ps <= 0) throw invalid_input("tomography window must be > 0");
    if (s.bases.empty()) throw invalid_input("no measurement bases");
    std::vector<std::pair<Pol, Pol>> sorted = s.bases;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw invalid_input("duplicate measurement basis");
    if (s.pulses_per_basis < 1) throw invalid_input("pulses_per_basis must be >= 1");
}

namespace {

constexpr uint64_t kTagCalib = 0xca11b;
constexpr uint64_t kTagBasisSim = 0x70b0;
constexpr uint64_t kTagBasisDet = 0xde70;
constexpr int64_t kBin = 25;            // ps
constexpr int64_t kSpan = 310000;       // covers 12 side peaks both sides
constexpr int64_t kPeriod = 12500;

int64_t snap(double v) { return int64_t(std::llround(v / double(kBin))) * kBin; }

} // namespace

BasisHistograms simulate_basis_histograms(const source::SourceParams& src,
                                          const analysis::DetectorParams& det,
                                          const TomographySettings& settings,
                                          uint64_t seed, unsigned threads) {
    validate(settings);
    source::validate(src);
    analysis::validate(det);
    const double period = src.rep_period_ps();

    // tracked peak from an unpolarized calibration run
    const uint64_t cal_pulses = std::min<uint64_t>(settings.pulses_per_basis, 200000);
    auto cal_events = source::simulate_pulses(src, cal_pulses, derive_seed(seed, kTagCalib));
    auto cal = analysis::detect_cross(cal_events, period, det, derive_seed(seed, kTagCalib, 1));
    auto cal_hist = analysis::build_histogram(cal.xx, cal.x, kBin, 12500, 0);
    const size_t peak_bin = std::max_element(cal_hist.counts.begin(), cal_hist.counts.end()) -
                            cal_hist.counts.begin();

    BasisHistograms bh;
    bh.bases = settings.bases;
    bh.peak_center_ps = cal_hist.bin_center(peak_bin);
    bh.bin_width_ps = kBin;
    bh.rep_period_ps = int64_t(std::llround(period));
    bh.hists.resize(settings.bases.size());

    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= settings.bases.size()) return;
            const auto [pa, pb] = settings.bases[i];
            auto events = source::simulate_pulses(src, settings.pulses_per_basis,
                                                  derive_seed(seed, kTagBasisSim, i));
            auto streams = analysis::detect_projected(events, pa, pb, period, det,
                                                      derive_seed(seed, kTagBasisDet, i));
            bh.hists[i] = analysis::build_histogram(streams.xx, streams.x, kBin, kSpan, 0);
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return bh;
}

TomographyCounts counts_at_offset(const BasisHistograms& bh, double window_ps,
                                  double window_offset_ps) {
    TomographyCounts out;
    const int64_t window = int64_t(std::llround(window_ps));
    const int64_t center = bh.peak_center_ps + snap(window_offset_ps);
    for (size_t i = 0; i < bh.hists.size(); ++i) {
        const auto& h = bh.hists[i];
        const auto fits = [&](int64_t c) {
            if ((c - h.center_offset_ps) % h.bin_width_ps != 0) return false;
            const int64_t kc = (c - h.center_offset_ps) / h.bin_width_ps;
            const int64_t reach = (window - h.bin_width_ps) / (2 * h.bin_width_ps);
            return std::abs(kc) + reach <= int64_t(h.counts.size() / 2);
        };
        BasisCount e;
        e.basis_a = bh.bases[i].first;
        e.basis_b = bh.bases[i].second;
        e.counts = h.window_counts(center, window);
        double side = 0.0;
        int n_side = 0;
        for (int64_t k = -12; k <= 12; ++k) {
            if (std::abs(k) < 3) continue;
            const int64_t c = center + k * bh.rep_period_ps;
            if (!fits(c)) continue;
            side += double(h.window_counts(c, window));
            ++n_side;
        }
        if (n_side == 0 || side <= 0.0)
            throw invalid_input("no side-peak statistics for normalization");
        e.normalization = side / double(n_side);
        out.entries.push_back(e);
    }
    return out;
}

TomographyCounts simulate_tomography(const source::SourceParams& src,
                                     const analysis::DetectorParams& det,
                                     const TomographySettings& settings,
                                     uint64_t seed, unsigned threads) {
    const auto bh = simulate_basis_histograms(src, det, settings, seed, threads);
    return counts_at_offset(bh, settings.window_ps, settings.window_offset_ps);
}

TomographyCounts counts_from_state(const quantum::DensityMatrix2Q& rho,
                                   const TomographySettings& settings,
                                   uint64_t events_per_basis, uint64_t seed,
                                   bool poisson_fluctuate) {
    validate(settings);
    Rng rng(derive_seed(seed, 0xc0157a7e));
    TomographyCounts out;
    for (const auto& [pa, pb] : settings.bases) {
        const quantum::Vec4 proj = quantum::product_ket(pa, pb);
        const double p = std::max(
            0.0, (proj.adjoint() * rho.matrix() * proj)(0).real());
        BasisCount e;
        e.basis_a = pa;
        e.basis_b = pb;
        const double mean = double(events_per_basis) * p;
        e.counts = poisson_fluctuate ? rng.poisson(mean) : uint64_t(std::llround(mean));
        e.normalization = 1.0;
        out.entries.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// maximum-likelihood reconstruction
// ---------------------------------------------------------------------------

namespace {

// parameter layout: diagonals real, sub-diagonal entries (re, im), row-major
struct ParamSlot {
    int r, c;
    bool imag;
};

const std::array<ParamSlot, 16>& param_slots() {
    static const std::array<ParamSlot, 16> slots = [] {
        std::array<ParamSlot, 16> s{};
        int i = 0;
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < r; ++c) {
                s[i++] = {r, c, false};
                s[i++] = {r, c, true};
            }
            s[i++] = {r, r, false};
        }
        return s;
    }();
    return slots;
}

quantum::Mat4 cholesky_from_params(const std::vector<double>& x) {
    quantum::Mat4 t = quantum::Mat4::Zero();
    const auto& slots = param_slots();
    for (int i = 0; i < 16; ++i) {
        const auto& s = slots[i];
        if (s.imag)
            t(s.r, s.c) += quantum::complexd(0.0, x[i]);
        else
            t(s.r, s.c) += x[i];
    }
    return t;
}

struct Prepared {
    std::vector<double> counts;
    std::vector<double> norms;
    std::vector<quantum::Vec4> projectors;
    double total = 0.0;
};

Prepared prepare(const TomographyCounts& tc) {
    if (tc.entries.size() < 16)
        throw invalid_input("tomography needs at least 16 bases (36 supplied normally)");
    Prepared p;
    for (const auto& e : tc.entries) {
        if (e.normalization <= 0) throw invalid_input("normalization must be > 0");
        p.counts.push_back(double(e.counts));
        p.norms.push_back(e.normalization);
        p.projectors.push_back(quantum::product_ket(e.basis_a, e.basis_b));
        p.total += double(e.counts);
    }
    if (p.total <= 0) throw invalid_input("no coincidence counts");
    return p;
}

// count-normalized NLL and gradient at Cholesky point x
double eval_nll(const Prepared& pre, const std::vector<double>& x,
                std::vector<double>* grad) {
    const quantum::Mat4 t = cholesky_from_params(x);
    const double s = t.squaredNorm();
    const size_t nb = pre.projectors.size();
    std::vector<quantum::Vec4> y(nb);
    std::vector<double> p(nb);
    double sum_sp = 0.0;
    for (size_t i = 0; i < nb; ++i) {
        y[i] = t * pre.projectors[i];
        p[i] = std::max(y[i].squaredNorm() / s, 1e-300);
        sum_sp += pre.norms[i] * p[i];
    }
    double nll = 0.0;
    for (size_t i = 0; i < nb; ++i)
        if (pre.counts[i] > 0) nll -= pre.counts[i] * std::log(p[i]);
    nll += pre.total * std::log(sum_sp);
    nll /= pre.total;

    if (grad) {
        grad->assign(16, 0.0);
        const auto& slots = param_slots();
        for (int j = 0; j < 16; ++j) {
            const auto& sl = slots[j];
            const double tr_da = sl.imag ? 2.0 * t(sl.r, sl.c).imag()
                                         : 2.0 * t(sl.r, sl.c).real();
            double acc = 0.0, acc_norm = 0.0;
            for (size_t i = 0; i < nb; ++i) {
                const quantum::complexd v = std::conj(y[i](sl.r)) * pre.projectors[i](sl.c);
                const double inner = sl.imag ? -2.0 * v.imag() : 2.0 * v.real();
                const double dp = (inner - p[i] * tr_da) / s;
                if (pre.counts[i] > 0) acc -= pre.counts[i] / p[i] * dp;
                acc_norm += pre.norms[i] * dp;
            }
            (*grad)[j] = (acc + pre.total * acc_norm / sum_sp) / pre.total;
        }
    }
    return nll;
}

struct BfgsOut {
    std::vector<double> x;
    double value = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

BfgsOut bfgs(const Prepared& pre, std::vector<double> x, double tol, int max_iter) {
    const int n = 16;
    Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(n, n);
    std::vector<double> g(n);
    double f = eval_nll(pre, x, &g);
    BfgsOut out;
    int it = 0;
    for (; it < max_iter; ++it) {
        double gmax = 0.0;
        for (double v : g) gmax = std::max(gmax, std::fabs(v));
        if (gmax <= tol) {
            out.converged = true;
            break;
        }
        Eigen::VectorXd ge(n), d(n);
        for (int i = 0; i < n; ++i) ge(i) = g[i];
        d = -hinv * ge;
        double slope = d.dot(ge);
        if (slope >= 0) {  // not a descent direction; reset curvature
            hinv.setIdentity();
            d = -ge;
            slope = -ge.squaredNorm();
        }
        double step = 1.0;
        std::vector<double> xn(16, 0.0), gn(16, 0.0);
        double fn = f;
        bool ok = false;
        for (int ls = 0; ls < 40; ++ls) {
            for (int i = 0; i < n; ++i) xn[size_t(i)] = x[size_t(i)] + step * d(i);
            fn = eval_nll(pre, xn, nullptr);
            if (fn <= f + 1e-4 * step * slope) {
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if (!ok) break;
        eval_nll(pre, xn, &gn);
        Eigen::VectorXd sv(n), yv(n);
        for (int i = 0; i < n; ++i) {
            sv(i) = xn[size_t(i)] - x[size_t(i)];
            yv(i) = gn[size_t(i)] - g[size_t(i)];
        }
        const double sy = sv.dot(yv);
        if (sy > 1e-14) {
            const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
            const Eigen::MatrixXd v = eye - sv * yv.transpose() / sy;
            hinv = v * hinv * v.transpose() + sv * sv.transpose() / sy;
        }
        x = xn;
        g = gn;
        f = fn;
    }
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::fabs(v));
    out.x = x;
    out.value = f;
    out.grad_norm = gmax;
    out.iterations = it;
    return out;
}

} // namespace

quantum::DensityMatrix2Q rho_from_cholesky(const std::vector<double>& cholesky16) {
    const quantum::Mat4 t = cholesky_from_params(cholesky16);
    quantum::Mat4 a = t.adjoint() * t;
    a /= a.trace().real();
    a = 0.5 * (a + a.adjoint());
    return quantum::DensityMatrix2Q(a);
}

double nll_value(const TomographyCounts& counts, const std::vector<double>& cholesky16) {
    return eval_nll(prepare(counts), cholesky16, nullptr);
}

std::vector<double> nll_gradient(const TomographyCounts& counts,
                                 const std::vector<double>& cholesky16) {
    std::vector<double> g;
    eval_nll(prepare(counts), cholesky16, &g);
    return g;
}

double log_likelihood(const TomographyCounts& counts, const quantum::DensityMatrix2Q& rho) {
    const Prepared pre = prepare(counts);
    double sum_sp = 0.0, ll = 0.0;
    std::vector<double> p(pre.projectors.size());
    for (size_t i = 0; i < pre.projectors.size(); ++i) {
        p[i] = std::max(
            (pre.projectors[i].adjoint() * rho.matrix() * pre.projectors[i])(0).real(),
            1e-300);
        sum_sp += pre.norms[i] * p[i];
    }
    for (size_t i = 0; i < p.size(); ++i)
        if (pre.counts[i] > 0) ll += pre.counts[i] * std::log(p[i]);
    ll -= pre.total * std::log(sum_sp);
    return ll / pre.total;
}

MleResult mle_reconstruct(const TomographyCounts& counts, const MleOptions& opt) {
    const Prepared pre = prepare(counts);
    BfgsOut best;
    bool have = false;
    for (int r = 0; r <= opt.restarts; ++r) {
        std::vector<double> x0(16, 0.0);
        if (r == 0) {
            // identity/4 start: T = I/2
            const auto& slots = param_slots();
            for (int i = 0; i < 16; ++i)
                if (slots[i].r == slots[i].c && !slots[i].imag) x0[size_t(i)] = 0.5;
        } else {
            Rng rng(derive_seed(0x7040, uint64_t(r)));
            double nrm = 0.0;
            for (auto& v : x0) {
                v = rng.gauss() * 0.5;
                nrm += v * v;
            }
            for (auto& v : x0) v /= std::sqrt(nrm);
        }
        BfgsOut run = bfgs(pre, x0, opt.grad_tol, opt.max_iterations);
        if (!have || run.value < best.value) {
            best = run;
            have = true;
        }
    }
    MleResult res;
    res.rho = rho_from_cholesky(best.x);
    res.converged = best.converged;
    res.grad_norm = best.grad_norm;
    res.log_likelihood = -best.value;
    res.iterations = best.iterations;
    return res;
}

std::vector<WindowSensitivityPoint> window_sensitivity(
    const BasisHistograms& bh, double window_ps, const std::vector<double>& offsets_ps,
    const MleOptions& opt) {
    std::vector<WindowSensitivityPoint> out;
    for (double off : offsets_ps) {
        const auto counts = counts_at_offset(bh, window_ps, off);
        const auto mle = mle_reconstruct(counts, opt);
        out.push_back({off, quantum::qber_from_rho(mle.rho)});
    }
    return out;
}

std::string counts_csv(const TomographyCounts& counts) {
    std::string out = "basis_a,basis_b,counts,normalization\n";
    char line[96];
    for (const auto& e : counts.entries) {
        std::snprintf(line, sizeof line, "%c,%c,%llu,%.17g\n",
                      quantum::pol_char(e.basis_a), quantum::pol_char(e.basis_b),
                      (unsigned long long)e.counts, e.normalization);
        out += line;
    }
    return out;
}

TomographyCounts counts_from_csv(const std::string& text) {
    std::istringstream ss(text);
    std::string line;
    if (!std::getline(ss, line) || line.rfind("basis_a,basis_b,", 0) != 0)
        throw invalid_input("counts CSV: missing header");
    TomographyCounts out;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        char a = 0, b = 0;
        unsigned long long c = 0;
        double norm = 0.0;
        if (std::sscanf(line.c_str(), "%c,%c,%llu,%lg", &a, &b, &c, &norm) != 4)
            throw invalid_input("counts CSV: bad line '" + line + "'");
        out.entries.push_back({quantum::pol_from_char(a), quantum::pol_from_char(b),
                               uint64_t(c), norm});
    }
    return out;
}

} // namespace qdqkd::tomo
