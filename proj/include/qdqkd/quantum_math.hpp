#pragma once

// Two-qubit polarization algebra for the XX-X cascade: density matrices in
// the fixed (HH, HV, VH, VV) basis, the FSS-time-averaged source state,
// entanglement measures and the projector-sum QBER.

#include <Eigen/Dense>
#include <array>
#include <complex>
#include <iosfwd>
#include <string>

#include "qdqkd/common.hpp"

namespace qdqkd::quantum {

using complexd = std::complex<double>;
using Vec4 = Eigen::Vector4cd;
using Mat4 = Eigen::Matrix4cd;
using Vec2 = Eigen::Vector2cd;

// Single-qubit polarization labels.
enum class Pol : uint8_t { H = 0, V, D, A, R, L };

inline constexpr std::array<Pol, 6> kAllPols = {Pol::H, Pol::V, Pol::D,
                                                Pol::A, Pol::R, Pol::L};

char pol_char(Pol p);
Pol pol_from_char(char c);
Vec2 pol_ket(Pol p);

// |a>|b> product ket in the (HH, HV, VH, VV) basis.
Vec4 product_ket(Pol a, Pol b);

struct PureState2Q {
    Vec4 amplitudes;

    PureState2Q() : amplitudes(Vec4::Zero()) {}
    explicit PureState2Q(const Vec4& amps, bool validate = true);

    double norm() const { return amplitudes.norm(); }
};

PureState2Q phi_plus();                  // (|HH> + |VV>)/sqrt(2)
PureState2Q phi_plus_phase(double phi);  // (|HH> + e^{i phi}|VV>)/sqrt(2)

class DensityMatrix2Q {
public:
    // Validates Hermiticity (1e-12), unit trace (1e-12) and positivity
    // (eigenvalues >= -1e-9; tolerance for eigensolver noise on MLE output).
    explicit DensityMatrix2Q(const Mat4& m);

    static DensityMatrix2Q from_pure(const PureState2Q& psi);
    static DensityMatrix2Q maximally_mixed();

    const Mat4& matrix() const { return m_; }
    complexd operator()(int r, int c) const { return m_(r, c); }

    static constexpr double kHermTol = 1e-12;
    static constexpr double kTraceTol = 1e-12;
    static constexpr double kEigTol = -1e-9;

private:
    Mat4 m_;
};

struct FssModelParams {
    double fss_ueV = 0.0;          // exciton fine structure splitting S
    double x_lifetime_ps = 230.0;  // exciton lifetime T1,X
    double noise_admixture = 0.0;  // white-noise weight p in [0,1]
};

void validate(const FssModelParams& p);

// Noise admixture derived from the two measured autocorrelations.  The mean
// of g2_xx(0) and g2_x(0) equals the accidental-coincidence weight of one
// background photon (either arm) paired with a signal photon, which is what
// ends up as white noise in the two-photon state.
double noise_admixture_from_g2(double g2_xx0, double g2_x0);

// Time-averaged cascade state: rho = (1-p) rho_FSS + p I/4 with
// rho_FSS = Int_0^inf (1/tau) e^{-t/tau} |psi(t)><psi(t)| dt,
// |psi(t)> = (|HH> + e^{i S t/hbar}|VV>)/sqrt(2).
// Closed form: diagonal 1/2 on HH/VV, rho_{HH,VV} = (1/2)/(1 - i S tau/hbar).
DensityMatrix2Q fss_time_averaged_rho(const FssModelParams& p);

// Eq-style QBER: q = 1/2 sum_i <O_i|rho|O_i>,
// O_i in {H_A V_B, V_A H_B, D_A A_B, A_A D_B}.
double qber_from_rho(const DensityMatrix2Q& rho);

// Wootters concurrence.
double concurrence(const DensityMatrix2Q& rho);

// max over phase phi of <phi+(phi)|rho|phi+(phi)>;
// closed form (rho_00 + rho_33)/2 + |rho_03|.
double bell_fidelity_max(const DensityMatrix2Q& rho);

// Uhlmann fidelity F(rho, sigma) = (tr sqrt(sqrt(rho) sigma sqrt(rho)))^2.
double state_fidelity(const DensityMatrix2Q& rho, const DensityMatrix2Q& sigma);

// Text format: 4 lines x 4 entries "re+imj", row-major, 17 significant
// digits; round-trips bit-exactly.
std::string to_text(const DensityMatrix2Q& rho);
DensityMatrix2Q density_from_text(const std::string& text);

} // namespace qdqkd::quantum
