#include "qdqkd/quantum_math.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace qdqkd::quantum {

namespace {
const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
}

char pol_char(Pol p) {
    switch (p) {
        case Pol::H: return 'H';
        case Pol::V: return 'V';
        case Pol::D: return 'D';
        case Pol::A: return 'A';
        case Pol::R: return 'R';
        case Pol::L: return 'L';
    }
    return '?';
}

Pol pol_from_char(char c) {
    switch (c) {
        case 'H': return Pol::H;
        case 'V': return Pol::V;
        case 'D': return Pol::D;
        case 'A': return Pol::A;
        case 'R': return Pol::R;
        case 'L': return Pol::L;
    }
    throw invalid_input(std::string("unknown polarization label '") + c + "'");
}

Vec2 pol_ket(Pol p) {
    Vec2 v;
    switch (p) {
        case Pol::H: v << 1, 0; break;
        case Pol::V: v << 0, 1; break;
        case Pol::D: v << kInvSqrt2, kInvSqrt2; break;
        case Pol::A: v << kInvSqrt2, -kInvSqrt2; break;
        case Pol::R: v << kInvSqrt2, complexd(0, kInvSqrt2); break;
        case Pol::L: v << kInvSqrt2, complexd(0, -kInvSqrt2); break;
    }
    return v;
}

Vec4 product_ket(Pol a, Pol b) {
    Vec2 ka = pol_ket(a), kb = pol_ket(b);
    Vec4 v;
    v << ka(0) * kb(0), ka(0) * kb(1), ka(1) * kb(0), ka(1) * kb(1);
    return v;
}

PureState2Q::PureState2Q(const Vec4& amps, bool validate) : amplitudes(amps) {
    if (validate && std::abs(amps.norm() - 1.0) > 1e-12)
        throw invalid_input("pure state norm differs from 1 beyond 1e-12");
}

PureState2Q phi_plus() { return phi_plus_phase(0.0); }

PureState2Q phi_plus_phase(double phi) {
    Vec4 v = Vec4::Zero();
    v(0) = kInvSqrt2;
    v(3) = std::polar(kInvSqrt2, phi);
    return PureState2Q(v);
}

DensityMatrix2Q::DensityMatrix2Q(const Mat4& m) : m_(m) {
    const double herm = (m - m.adjoint()).cwiseAbs().maxCoeff();
    if (herm > kHermTol)
        throw invalid_input("density matrix not Hermitian (max dev " +
                            std::to_string(herm) + ")");
    m_ = 0.5 * (m + m.adjoint());  // exact symmetrization of rounding noise
    const double tr = m_.trace().real();
    if (std::abs(tr - 1.0) > kTraceTol)
        throw invalid_input("density matrix trace differs from 1 (trace " +
                            std::to_string(tr) + ")");
    Eigen::SelfAdjointEigenSolver<Mat4> es(m_, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < kEigTol)
        throw invalid_input("density matrix not positive semidefinite (min eig " +
                            std::to_string(es.eigenvalues().minCoeff()) + ")");
}

DensityMatrix2Q DensityMatrix2Q::from_pure(const PureState2Q& psi) {
    return DensityMatrix2Q(psi.amplitudes * psi.amplitudes.adjoint());
}

DensityMatrix2Q DensityMatrix2Q::maximally_mixed() {
    return DensityMatrix2Q(0.25 * Mat4::Identity());
}

void validate(const FssModelParams& p) {
    if (p.fss_ueV < 0) throw invalid_input("fss_ueV must be >= 0");
    if (!(p.x_lifetime_ps > 0)) throw invalid_input("x_lifetime_ps must be > 0");
    if (p.noise_admixture < 0 || p.noise_admixture > 1)
        throw invalid_input("noise_admixture must be in [0,1]");
}

double noise_admixture_from_g2(double g2_xx0, double g2_x0) {
    return std::clamp(0.5 * (g2_xx0 + g2_x0), 0.0, 1.0);
}

DensityMatrix2Q fss_time_averaged_rho(const FssModelParams& p) {
    validate(p);
    const double x = p.fss_ueV * (p.x_lifetime_ps / kPsPerNs) / kHbarUevNs;
    const complexd c = 0.5 / complexd(1.0, -x);
    Mat4 rho = Mat4::Zero();
    rho(0, 0) = rho(3, 3) = 0.5;
    rho(0, 3) = c;
    rho(3, 0) = std::conj(c);
    const double q = p.noise_admixture;
    rho = (1.0 - q) * rho + q * 0.25 * Mat4::Identity();
    return DensityMatrix2Q(rho);
}

double qber_from_rho(const DensityMatrix2Q& rho) {
    static const std::array<std::pair<Pol, Pol>, 4> error_bases = {
        std::pair{Pol::H, Pol::V}, {Pol::V, Pol::H},
        {Pol::D, Pol::A}, {Pol::A, Pol::D}};
    double q = 0.0;
    for (auto [a, b] : error_bases) {
        Vec4 proj = product_ket(a, b);
        q += (proj.adjoint() * rho.matrix() * proj)(0).real();
    }
    return 0.5 * q;
}

double concurrence(const DensityMatrix2Q& rho) {
    Mat4 flip = Mat4::Zero();  // sigma_y (x) sigma_y
    flip(0, 3) = -1; flip(1, 2) = 1; flip(2, 1) = 1; flip(3, 0) = -1;
    const Mat4 r = rho.matrix() * flip * rho.matrix().conjugate() * flip;
    Eigen::ComplexEigenSolver<Mat4> es(r, false);
    double ev_max = 0.0;
    for (int i = 0; i < 4; ++i)
        ev_max = std::max(ev_max, es.eigenvalues()(i).real());
    std::array<double, 4> lam{};
    for (int i = 0; i < 4; ++i) {
        // rounding noise on degenerate zero eigenvalues blows up under the
        // square root; treat relative-tiny values as exact zeros
        double ev = es.eigenvalues()(i).real();
        if (ev < 1e-12 * ev_max) ev = 0.0;
        lam[i] = std::sqrt(ev);
    }
    std::sort(lam.begin(), lam.end(), std::greater<>());
    return std::max(0.0, lam[0] - lam[1] - lam[2] - lam[3]);
}

double bell_fidelity_max(const DensityMatrix2Q& rho) {
    return 0.5 * (rho(0, 0).real() + rho(3, 3).real()) + std::abs(rho(0, 3));
}

double state_fidelity(const DensityMatrix2Q& rho, const DensityMatrix2Q& sigma) {
    Eigen::SelfAdjointEigenSolver<Mat4> es(rho.matrix());
    Mat4 sqrt_rho = Mat4::Zero();
    for (int i = 0; i < 4; ++i) {
        const double ev = std::max(0.0, es.eigenvalues()(i));
        sqrt_rho += std::sqrt(ev) * es.eigenvectors().col(i) *
                    es.eigenvectors().col(i).adjoint();
    }
    const Mat4 inner = sqrt_rho * sigma.matrix() * sqrt_rho;
    Eigen::SelfAdjointEigenSolver<Mat4> es2(inner, Eigen::EigenvaluesOnly);
    double tr = 0.0;
    for (int i = 0; i < 4; ++i) tr += std::sqrt(std::max(0.0, es2.eigenvalues()(i)));
    return tr * tr;
}

namespace {

void append_double(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += buf;
}

} // namespace

std::string to_text(const DensityMatrix2Q& rho) {
    std::string out;
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            if (c) out += ' ';
            const complexd z = rho(r, c);
            append_double(out, z.real());
            if (!(z.imag() < 0)) out += '+';
            append_double(out, z.imag());
            out += 'j';
        }
        out += '\n';
    }
    return out;
}

DensityMatrix2Q density_from_text(const std::string& text) {
    Mat4 m;
    const char* p = text.c_str();
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            char* end = nullptr;
            const double re = std::strtod(p, &end);
            if (end == p) throw invalid_input("density matrix text: bad real part");
            p = end;
            const double im = std::strtod(p, &end);
            if (end == p) throw invalid_input("density matrix text: bad imaginary part");
            p = end;
            if (*p != 'j') throw invalid_input("density matrix text: missing 'j'");
            ++p;
            m(r, c) = complexd(re, im);
        }
    }
    return DensityMatrix2Q(m);
}

} // namespace qdqkd::quantum
