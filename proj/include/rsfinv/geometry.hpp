#pragma once

#include <rsfinv/sbp1d.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace rsfinv {

/// Fault trace y(x) with analytic slope, unit normals of the lower block
/// and the arc-length quadrature along the trace. Rough profiles are
/// band-limited self-similar fractals (power spectrum ~ k^-3), planar
/// profiles have amplitude_ratio = 0.
struct FaultProfile {
    Vec x_coords;              // km, uniform
    Vec y_coords;              // km, fault elevation
    Vec y_slope;               // dy/dx, analytic
    Eigen::Matrix2Xd normal_minus; // outward unit normal of the minus block
    SbpNorm arclength_weights; // quadrature along the trace (km)
    std::uint64_t seed = 0;
    double amplitude_ratio = 0.0; // target RMS slope of the profile
    std::pair<double, double> wavelength_band{0.0, 0.0}; // km

    int size() const { return static_cast<int>(x_coords.size()); }
    double spacing() const { return x_coords(1) - x_coords(0); }
};

namespace detail {

// Fills normals and the arc-length quadrature from x/y/slope.
inline void finish_profile(FaultProfile& p, int norm_order) {
    const int m = p.size();
    p.normal_minus.resize(2, m);
    SbpOperatorSet1D ops(m, p.spacing(), norm_order);
    p.arclength_weights = ops.norm();
    for (int i = 0; i < m; ++i) {
        const double s = std::sqrt(1.0 + p.y_slope(i) * p.y_slope(i));
        p.normal_minus(0, i) = -p.y_slope(i) / s;
        p.normal_minus(1, i) = 1.0 / s;
        p.arclength_weights.weights(i) *= s;
    }
}

} // namespace detail

/// Random-phase Fourier synthesis of a self-similar fault profile over
/// [x0, x1]. Mode amplitudes scale as k^{-3/2} (power ~ k^-3) inside the
/// wavelength band and the overall level is set so the RMS slope of the
/// realization equals amplitude_ratio. Deterministic in the seed.
inline FaultProfile make_fractal_profile(int m, double x0, double x1,
                                         double amplitude_ratio,
                                         std::pair<double, double> band,
                                         std::uint64_t seed, int norm_order = 4) {
    if (m < 2 || x1 <= x0) throw std::invalid_argument("bad fault grid");
    if (amplitude_ratio < 0.0) throw std::invalid_argument("negative amplitude ratio");

    FaultProfile p;
    p.seed = seed;
    p.amplitude_ratio = amplitude_ratio;
    p.wavelength_band = band;
    p.x_coords.resize(m);
    const double L = x1 - x0;
    const double h = L / (m - 1);
    for (int i = 0; i < m; ++i) p.x_coords(i) = x0 + i * h;
    p.y_coords = Vec::Zero(m);
    p.y_slope = Vec::Zero(m);

    if (amplitude_ratio > 0.0) {
        const auto [lmin, lmax] = band;
        if (!(lmin > 0.0 && lmin <= lmax))
            throw std::invalid_argument("bad wavelength band");
        if (lmin < 8.0 * h)
            throw std::invalid_argument("wavelength band unresolvable on this grid");
        const int kmin = static_cast<int>(std::ceil(L / lmax - 1e-9));
        const int kmax = static_cast<int>(std::floor(L / lmin + 1e-9));
        if (kmax < std::max(kmin, 1))
            throw std::invalid_argument("wavelength band contains no modes");

        std::mt19937_64 rng(seed);
        const double twopi = 2.0 * std::numbers::pi;
        std::vector<double> phase, amp;
        double slope_var = 0.0;
        for (int k = std::max(kmin, 1); k <= kmax; ++k) {
            // top 53 bits -> [0,1); avoids distribution implementation drift
            phase.push_back(twopi * ((rng() >> 11) * 0x1.0p-53));
            const double a = std::pow(double(k), -1.5);
            amp.push_back(a);
            slope_var += 0.5 * a * a * (twopi * k / L) * (twopi * k / L);
        }
        const double scale = amplitude_ratio / std::sqrt(slope_var);
        for (std::size_t j = 0; j < amp.size(); ++j) {
            const int k = std::max(kmin, 1) + static_cast<int>(j);
            const double wk = twopi * k / L;
            const double a = scale * amp[j];
            for (int i = 0; i < m; ++i) {
                const double arg = wk * (p.x_coords(i) - x0) + phase[j];
                p.y_coords(i) += a * std::cos(arg);
                p.y_slope(i) -= a * wk * std::sin(arg);
            }
        }
    }

    detail::finish_profile(p, norm_order);
    return p;
}

/// Resolved shear traction on the fault from the background stress:
/// tau0(x) = sigma_yz0 * n_y of the minus-side normal.
inline Vec fault_normal_shear_projection(const FaultProfile& profile, double sigma_yz0) {
    return sigma_yz0 * profile.normal_minus.row(1).transpose();
}

/// One block of the curvilinear grid. Index i runs along the fault
/// direction, j across with physical y increasing; the fault edge is
/// j = n-1 for the minus block and j = 0 for the plus block. Metric
/// fields are the contravariant combinations a_kl = J grad(zeta_k).grad(zeta_l)
/// in the physical-unit reference coordinates (xi = x - x0, eta in km).
struct GridBlock {
    Eigen::MatrixXd x, y;        // km
    Eigen::MatrixXd jac;         // Jacobian determinant, > 0
    Eigen::MatrixXd a11, a12, a22;
    int m = 0, n = 0;
    double dxi = 0.0, deta = 0.0;
};

struct CurvilinearGrid {
    GridBlock minus, plus;
    int m = 0;        // points along the fault
    int n_across = 0; // points across each block
};

namespace detail {

// Transfinite blend between the fault trace and a straight outer edge.
// For the plus block eta = 0 on the fault; for the minus block eta = H on
// the fault, so the blend weight toward the fault is (eta/H) there.
inline GridBlock build_block(const FaultProfile& prof, double y_outer, int n, bool plus) {
    const int m = prof.size();
    GridBlock b;
    b.m = m;
    b.n = n;
    b.dxi = prof.spacing();
    const double H = std::abs(y_outer);
    b.deta = H / (n - 1);
    b.x.resize(m, n);
    b.y.resize(m, n);
    b.jac.resize(m, n);
    b.a11.resize(m, n);
    b.a12.resize(m, n);
    b.a22.resize(m, n);

    for (int i = 0; i < m; ++i) {
        const double yf = prof.y_coords(i);
        const double yp = prof.y_slope(i);
        const double y_eta = plus ? (y_outer - yf) / H : (yf - y_outer) / H;
        if (y_eta <= 0.0)
            throw std::runtime_error("grid mapping folds: fault relief exceeds block depth");
        for (int j = 0; j < n; ++j) {
            const double eta = j * b.deta;
            const double wf = plus ? 1.0 - eta / H : eta / H; // weight on the fault curve
            b.x(i, j) = prof.x_coords(i);
            b.y(i, j) = wf * yf + (1.0 - wf) * y_outer;
            const double y_xi = wf * yp;
            b.jac(i, j) = y_eta;
            b.a11(i, j) = y_eta;
            b.a12(i, j) = -y_xi;
            b.a22(i, j) = (1.0 + y_xi * y_xi) / y_eta;
        }
    }
    return b;
}

} // namespace detail

/// Two-block grid conforming to the fault over [x0,x1] x [y_bot,y_top].
inline CurvilinearGrid build_grid(const FaultProfile& profile, double y_bot,
                                  double y_top, int n_across) {
    if (n_across < 2) throw std::invalid_argument("need at least 2 points across");
    if (!(y_bot < profile.y_coords.minCoeff() && y_top > profile.y_coords.maxCoeff()))
        throw std::invalid_argument("fault trace leaves the domain box");
    CurvilinearGrid g;
    g.m = profile.size();
    g.n_across = n_across;
    g.minus = detail::build_block(profile, y_bot, n_across, false);
    g.plus = detail::build_block(profile, y_top, n_across, true);
    return g;
}

} // namespace rsfinv
