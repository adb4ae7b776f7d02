#pragma once

#include <rsfinv/sbp1d.hpp>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rsfinv {

/// Rate-and-state friction with the slip law. Stresses in MPa, slip
/// velocities in m/s, Dc in m; the impedance kappa that couples into the
/// nonlinear solve is in MPa/(m/s).
struct FrictionModel {
    Vec a, b, Dc;       // per fault point
    Vec sigma_n0;       // initial normal stress, MPa
    Vec tau0;           // initial resolved shear traction, MPa
    Vec tauL;           // external loading, MPa
    Vec psi0;           // initial state
    double f0 = 0.6;
    double V0 = 1e-6; // m/s

    int size() const { return static_cast<int>(a.size()); }

    void validate() const {
        const int n = size();
        if (b.size() != n || Dc.size() != n || sigma_n0.size() != n ||
            tau0.size() != n || tauL.size() != n || psi0.size() != n)
            throw std::invalid_argument("friction model field sizes disagree");
        if ((a.array() <= 0.0).any()) throw std::invalid_argument("direct effect a must be positive");
        if ((Dc.array() <= 0.0).any()) throw std::invalid_argument("Dc must be positive");
        if ((sigma_n0.array() < 0.0).any())
            throw std::invalid_argument("normal stress must be nonnegative");
        if (V0 <= 0.0) throw std::invalid_argument("V0 must be positive");
    }
};

/// Slip-velocity targets per fault point for the nonlinear traction solve.
struct FaultKinematics {
    Vec psi;      // state
    Vec tau_ell;  // load component of the characteristic traction, MPa
    Vec kappa;    // Z+Z-/(Z+ + Z-), MPa/(m/s)
};

namespace detail {

// log of the sinh argument, kept in exponent form to survive large psi/a
struct AsinhArg {
    double t;  // log(x) where x = |V|/(2 V0) exp(psi/a)
    double x;  // exp(t) when representable
    bool big;  // x overflowed or dominates 1
};

inline AsinhArg asinh_arg(double v_abs, double psi, double a, double V0) {
    AsinhArg r;
    r.t = std::log(v_abs / (2.0 * V0)) + psi / a;
    r.big = r.t > 25.0;
    r.x = r.big ? 0.0 : std::exp(r.t);
    return r;
}

inline double asinh_of(const AsinhArg& r) {
    return r.big ? std::numbers::ln2 + r.t : std::asinh(r.x);
}

// x / sqrt(1 + x^2)
inline double ratio_of(const AsinhArg& r) {
    return r.big ? 1.0 : r.x / std::sqrt(1.0 + r.x * r.x);
}

} // namespace detail

/// f(|V|, psi) = a asinh(|V|/(2 V0) e^{psi/a}); f(0, psi) = 0.
inline double friction_coefficient(double v_abs, double psi, const FrictionModel& m, int i) {
    if (v_abs == 0.0) return 0.0;
    return m.a(i) * detail::asinh_of(detail::asinh_arg(v_abs, psi, m.a(i), m.V0));
}

/// F(V, psi) = sigma_n0 f(|V|,psi) sign(V) - tau0 - tauL, F(0) by limit.
inline double friction_force(double v, double psi, const FrictionModel& m, int i) {
    const double base = -m.tau0(i) - m.tauL(i);
    if (v == 0.0) return base;
    const double f = friction_coefficient(std::abs(v), psi, m, i);
    return m.sigma_n0(i) * f * (v > 0.0 ? 1.0 : -1.0) + base;
}

/// Slip law: G(V, psi) = -|V|/Dc (f - f_ss), f_ss = f0 + (a-b) ln(|V|/V0);
/// G(0, psi) = 0 by continuous extension.
inline double state_rate(double v, double psi, const FrictionModel& m, int i) {
    if (v == 0.0) return 0.0;
    const double v_abs = std::abs(v);
    const double f = friction_coefficient(v_abs, psi, m, i);
    const double fss = m.f0 + (m.a(i) - m.b(i)) * std::log(v_abs / m.V0);
    return -(v_abs / m.Dc(i)) * (f - fss);
}

/// All analytic partials of F and G at one fault point. Parameter partials
/// cover p in {a, b, Dc, f0, tau0, sigma_n0}; the ones that vanish
/// identically (F_b, F_Dc, F_f0, G_tau0, G_sigma) are included for uniform
/// gradient assembly.
struct FrictionPartials {
    double F_V = 0, F_psi = 0, G_V = 0, G_psi = 0;
    double F_a = 0, F_b = 0, F_Dc = 0, F_f0 = 0, F_tau0 = -1, F_sigma = 0;
    double G_a = 0, G_b = 0, G_Dc = 0, G_f0 = 0, G_tau0 = 0, G_sigma = 0;
};

inline FrictionPartials partials(double v, double psi, const FrictionModel& m, int i) {
    if (v == 0.0) throw std::invalid_argument("friction partials need V != 0");
    FrictionPartials p;
    const double v_abs = std::abs(v);
    const double sgn = v > 0.0 ? 1.0 : -1.0;
    const double a = m.a(i), b = m.b(i), Dc = m.Dc(i), sig = m.sigma_n0(i);
    const auto arg = detail::asinh_arg(v_abs, psi, a, m.V0);
    const double f = a * detail::asinh_of(arg);
    const double r = detail::ratio_of(arg); // x / sqrt(1+x^2)
    const double lnv = std::log(v_abs / m.V0);
    const double fss = m.f0 + (a - b) * lnv;
    const double df_da = f / a - (psi / a) * r; // asinh(x) - (psi/a) x/sqrt(1+x^2)

    p.F_V = sig * a * r / v_abs;
    p.F_psi = sig * sgn * r;
    p.F_a = sig * sgn * df_da;
    p.F_sigma = f * sgn;

    p.G_V = -(sgn / Dc) * ((f - fss) + a * r - (a - b));
    p.G_psi = -(v_abs / Dc) * r;
    p.G_a = -(v_abs / Dc) * (df_da - lnv);
    p.G_b = -(v_abs / Dc) * lnv;
    p.G_Dc = (v_abs / (Dc * Dc)) * (f - fss);
    p.G_f0 = v_abs / Dc;
    return p;
}

/// Closed-form solution of F(V, psi) = -tau_ell:
/// V = 2 V0 sinh((tau0 + tauL - tau_ell)/(sigma_n0 a)) e^{-psi/a}.
inline double v_tilde_star(double tau_ell, double psi, const FrictionModel& m, int i) {
    const double delta = m.tau0(i) + m.tauL(i) - tau_ell;
    if (delta == 0.0) return 0.0;
    const double s = delta / (m.sigma_n0(i) * m.a(i));
    const double p = psi / m.a(i);
    if (std::abs(s) > 30.0) // combine exponents to avoid overflow
        return (s > 0.0 ? 1.0 : -1.0) * m.V0 * std::exp(std::abs(s) - p);
    return 2.0 * m.V0 * std::sinh(s) * std::exp(-p);
}

/// Bisection for kappa V* + F(V*, psi) = -tau_ell, bracketed between 0 and
/// the frictionless-coupling root v_tilde_star. Converges to an absolute
/// bracket width tol_abs (m/s).
inline Vec solve_v_star(const FaultKinematics& kin, const FrictionModel& m, double tol_abs) {
    if (tol_abs <= 0.0) throw std::invalid_argument("tolerance must be positive");
    const int n = m.size();
    if (kin.psi.size() != n || kin.tau_ell.size() != n || kin.kappa.size() != n)
        throw std::invalid_argument("fault kinematics size mismatch");
    if ((kin.kappa.array() <= 0.0).any())
        throw std::invalid_argument("impedance combination must be positive");

    Vec out(n);
    for (int i = 0; i < n; ++i) {
        const double delta = m.tau0(i) + m.tauL(i) - kin.tau_ell(i);
        if (delta == 0.0) {
            out(i) = 0.0;
            continue;
        }
        if (m.sigma_n0(i) == 0.0) {
            out(i) = delta / kin.kappa(i);
            continue;
        }
        const double vt = v_tilde_star(kin.tau_ell(i), kin.psi(i), m, i);
        double lo = std::min(0.0, vt), hi = std::max(0.0, vt);
        auto g = [&](double v) {
            return kin.kappa(i) * v + friction_force(v, kin.psi(i), m, i) + kin.tau_ell(i);
        };
        // g(0) = -delta, g(vt) = kappa vt: opposite signs in exact arithmetic.
        // When kappa*vt sits below the rounding noise of F the endpoint sign
        // can flip; expand the bracket past vt until the sign change appears.
        auto expand = [&](double& end, double dir) {
            double step = std::max(tol_abs, 1e-15 * std::abs(end));
            for (int it = 0; it < 200; ++it) {
                end += dir * step;
                step *= 2.0;
                if (dir * g(end) >= 0.0) return true;
            }
            return false;
        };
        bool ok = true;
        if (g(lo) > 0.0) ok = expand(lo, -1.0);
        else if (g(hi) < 0.0) ok = expand(hi, 1.0);
        if (!ok || g(lo) > 0.0 || g(hi) < 0.0)
            throw std::runtime_error("V* bracket violated");
        while (hi - lo > tol_abs) {
            const double mid = 0.5 * (lo + hi);
            if (mid <= lo || mid >= hi) break; // bracket at ulp resolution
            (g(mid) < 0.0 ? lo : hi) = mid;
        }
        out(i) = 0.5 * (lo + hi);
    }
    return out;
}

/// Adjoint counterpart: the linearized law is already linear in V^dagger,
/// V* = -(tau_ell + G_V psi) / (kappa + F_V) per point.
inline Vec solve_v_star_adjoint(const Vec& tau_ell_dagger, const Vec& kappa, const Vec& F_V,
                                const Vec& G_V, const Vec& psi_dagger) {
    const int n = static_cast<int>(tau_ell_dagger.size());
    if (kappa.size() != n || F_V.size() != n || G_V.size() != n || psi_dagger.size() != n)
        throw std::invalid_argument("adjoint fault arrays size mismatch");
    Vec out(n);
    for (int i = 0; i < n; ++i) {
        const double den = kappa(i) + F_V(i);
        if (den <= 0.0) throw std::runtime_error("nonpositive kappa + F_V in adjoint solve");
        out(i) = -(tau_ell_dagger(i) + G_V(i) * psi_dagger(i)) / den;
    }
    return out;
}

} // namespace rsfinv
