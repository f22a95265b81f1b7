#pragma once

// Test-only oracles, deliberately independent of the library implementation
// paths they check: quadrature for the FSS time average, a characteristic-
// polynomial eigenvalue solver for the concurrence product matrix, brute
// force scans and closed-form reference expressions.

#include <array>
#include <cmath>
#include <complex>
#include <vector>

namespace oracles {

using cd = std::complex<double>;

inline constexpr double kHbar = 0.6582119569;  // ueV ns

// q = x^2 / (4 (1 + x^2)), x = S tau / hbar  (S in ueV, tau in ps)
inline double qber_closed_form(double s_uev, double tau_ps) {
    const double x = s_uev * (tau_ps / 1000.0) / kHbar;
    return 0.25 * x * x / (1.0 + x * x);
}

// |rho_HHVV| of the time-averaged cascade state by direct quadrature of
// Int (1/tau) e^{-t/tau} e^{i S t / hbar} dt with n midpoint samples.
inline cd fss_coherence_quadrature(double s_uev, double tau_ps, size_t n = (1u << 20)) {
    const double tau = tau_ps / 1000.0;  // ns
    const double t_max = 60.0 * tau;
    const double dt = t_max / double(n);
    cd acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double t = (double(i) + 0.5) * dt;
        acc += std::exp(-t / tau) * std::polar(1.0, s_uev * t / kHbar) * dt / tau;
    }
    return 0.5 * acc;
}

using cmat4 = std::array<std::array<cd, 4>, 4>;

inline cmat4 matmul4(const cmat4& a, const cmat4& b) {
    cmat4 c{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            for (int k = 0; k < 4; ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
}

// Eigen-decomposition of a 4x4 Hermitian matrix by cyclic Jacobi rotations on
// its 8x8 real-symmetric embedding [[Re, -Im], [Im, Re]]; every eigenvalue
// appears twice.  Returns eigenvalues ascending with 8x1 eigenvectors.
struct Jacobi8 {
    std::array<double, 8> values{};
    std::array<std::array<double, 8>, 8> vectors{};  // column k = eigenvector k
};

inline Jacobi8 jacobi_hermitian4(const cmat4& h) {
    std::array<std::array<double, 8>, 8> a{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            a[i][j] = h[i][j].real();
            a[i][j + 4] = -h[i][j].imag();
            a[i + 4][j] = h[i][j].imag();
            a[i + 4][j + 4] = h[i][j].real();
        }
    Jacobi8 out;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) out.vectors[i][j] = i == j ? 1.0 : 0.0;
    for (int sweep = 0; sweep < 80; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < 8; ++p)
            for (int q = p + 1; q < 8; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-30) break;
        for (int p = 0; p < 8; ++p)
            for (int q = p + 1; q < 8; ++q) {
                if (std::fabs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double cth = 1.0 / std::sqrt(t * t + 1.0), sth = t * cth;
                for (int k = 0; k < 8; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = cth * akp - sth * akq;
                    a[k][q] = sth * akp + cth * akq;
                }
                for (int k = 0; k < 8; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = cth * apk - sth * aqk;
                    a[q][k] = sth * apk + cth * aqk;
                }
                for (int k = 0; k < 8; ++k) {
                    const double vkp = out.vectors[k][p], vkq = out.vectors[k][q];
                    out.vectors[k][p] = cth * vkp - sth * vkq;
                    out.vectors[k][q] = sth * vkp + cth * vkq;
                }
            }
    }
    for (int i = 0; i < 8; ++i) out.values[i] = a[i][i];
    // ascending order, vectors carried along
    for (int i = 0; i < 8; ++i)
        for (int j = i + 1; j < 8; ++j)
            if (out.values[j] < out.values[i]) {
                std::swap(out.values[i], out.values[j]);
                for (int k = 0; k < 8; ++k)
                    std::swap(out.vectors[k][i], out.vectors[k][j]);
            }
    return out;
}

// Hermitian square root of a PSD 4x4 matrix through the Jacobi solver.
inline cmat4 sqrt_psd4(const cmat4& h) {
    const Jacobi8 eig = jacobi_hermitian4(h);
    cmat4 out{};
    // eigenvalues come in duplicate pairs; using all 8 halves each projector
    for (int k = 0; k < 8; ++k) {
        const double lam = std::sqrt(std::max(0.0, eig.values[k]));
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                const cd vi(eig.vectors[i][k], eig.vectors[i + 4][k]);
                const cd vj(eig.vectors[j][k], eig.vectors[j + 4][k]);
                out[i][j] += 0.5 * lam * vi * std::conj(vj);
            }
    }
    return out;
}

// Wootters concurrence by the independent Jacobi path: the spectrum of
// rho * (Y rho* Y) equals that of the Hermitian sqrt(rho) Y rho* Y sqrt(rho).
inline double concurrence_oracle(const cmat4& rho) {
    static const int flip_idx[4] = {3, 2, 1, 0};
    static const double flip_sign[4] = {-1, 1, 1, -1};
    cmat4 flipped{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            flipped[i][j] = flip_sign[i] * flip_sign[j] *
                            std::conj(rho[flip_idx[i]][flip_idx[j]]);
    const cmat4 root = sqrt_psd4(rho);
    const cmat4 herm = matmul4(matmul4(root, flipped), root);
    const Jacobi8 eig = jacobi_hermitian4(herm);
    // duplicated ascending eigenvalues: distinct ones at indices 0,2,4,6
    std::array<double, 4> lam{};
    for (int i = 0; i < 4; ++i)
        lam[i] = std::sqrt(std::max(0.0, 0.5 * (eig.values[2 * i] + eig.values[2 * i + 1])));
    std::sort(lam.begin(), lam.end(), std::greater<>());
    return std::max(0.0, lam[0] - lam[1] - lam[2] - lam[3]);
}

// Expected accidental coincidences per bin between two independent
// Poissonian streams of rates ra, rb over duration T.
inline double poisson_accidentals_per_bin(double rate_a_hz, double rate_b_hz,
                                          double duration_s, double bin_ps) {
    return rate_a_hz * rate_b_hz * duration_s * bin_ps * 1e-12;
}

// Renewal-process blinking: g2(tau) = 1 + (1-beta)/beta exp(-tau/tau_c),
// 1/tau_c = 1/mean_on + 1/mean_off; at short delays g2 -> 1/beta.
inline double blink_g2(double beta, double off_mean_us, double tau_us) {
    if (beta >= 1.0) return 1.0;
    const double on_mean = off_mean_us * beta / (1.0 - beta);
    const double tau_c = 1.0 / (1.0 / on_mean + 1.0 / off_mean_us);
    return 1.0 + (1.0 - beta) / beta * std::exp(-tau_us / tau_c);
}

} // namespace oracles
