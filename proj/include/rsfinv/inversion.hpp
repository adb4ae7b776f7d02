#pragma once

#include <rsfinv/adjoint.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rsfinv {

/// Replace one friction field by the embedded coarse iterate
/// p^F = c2f p^C (or the iterate itself when no interpolation is given).
/// Model invariants are revalidated; violations (e.g. interpolated a <= 0)
/// throw, which the line search treats as a rejected trial point.
inline FrictionModel parameter_embed(const Vec& coarse, const InterpolationPair* interp,
                                     FrictionModel model, ParamId param) {
    Vec fine = interp ? Vec(interp->c2f * coarse) : coarse;
    switch (param) {
        case ParamId::a: model.a = fine; break;
        case ParamId::b: model.b = fine; break;
        case ParamId::Dc: model.Dc = fine; break;
        case ParamId::tau0: model.tau0 = fine; break;
        case ParamId::sigma_n0: model.sigma_n0 = fine; break;
        case ParamId::psi0: model.psi0 = fine; break;
        case ParamId::f0: throw std::invalid_argument("f0 is scalar, not a fault field");
    }
    if (static_cast<int>(fine.size()) != model.size())
        throw std::invalid_argument("embedded parameter size mismatch");
    model.validate();
    return model;
}

struct LbfgsIterate {
    int iter = 0;
    double f = 0.0;
    double gnorm = 0.0;
    double step = 0.0;
    Vec x;
};

struct LbfgsOptions {
    int memory = 10;
    double c1 = 1e-4; // sufficient decrease
    double c2 = 0.9;  // curvature
    int max_iters = 100;
    double grad_tol = 0.0; // stop when ||grad||_inf < grad_tol
    int max_line_iters = 30;
    // invoked after every accepted iterate (including the initial one);
    // returning false stops the run gracefully with the trace intact
    std::function<bool(const LbfgsIterate&)> callback;
};

struct LbfgsResult {
    Vec x, grad;
    double f = 0.0;
    bool converged = false;
    std::string stop_reason;
    std::vector<LbfgsIterate> trace;
};

namespace detail {

// cubic minimizer of a 1D model through (a, fa, ga) and (b, fb); falls back
// to bisection when the model is degenerate or the root leaves [a, b]
inline double cubic_step(double a, double fa, double ga, double b, double fb, double gb) {
    const double d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    const double disc = d1 * d1 - ga * gb;
    if (disc >= 0.0) {
        const double d2 = std::sqrt(disc) * (b > a ? 1.0 : -1.0);
        const double t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
        const double lo = std::min(a, b), hi = std::max(a, b);
        const double margin = 0.1 * (hi - lo);
        if (std::isfinite(t) && t > lo + margin && t < hi - margin) return t;
    }
    return 0.5 * (a + b);
}

} // namespace detail

/// Limited-memory BFGS with a strong-Wolfe cubic line search and optional
/// box bounds (iterates projected onto the box). The objective is
/// `f = obj(x, grad)`; it may throw to reject an infeasible trial point,
/// which backtracks the line search. Every accepted step satisfies the
/// strong Wolfe conditions (c1, c2) along the search path.
template <class Obj>
LbfgsResult lbfgs_minimize(Obj&& obj, Vec x0, const LbfgsOptions& opt = {},
                           const Vec* lower = nullptr, const Vec* upper = nullptr) {
    const int n = static_cast<int>(x0.size());
    const double inf = std::numeric_limits<double>::infinity();
    auto project = [&](Vec x) {
        if (lower) x = x.cwiseMax(*lower);
        if (upper) x = x.cwiseMin(*upper);
        return x;
    };
    // projected-gradient norm: ||x - P(x - g)||, equal to ||g|| without bounds
    auto pgnorm = [&](const Vec& x, const Vec& g) {
        const Vec step = x - project(x - g);
        return step.lpNorm<Eigen::Infinity>();
    };
    auto eval = [&](const Vec& x, Vec& g) -> double {
        try {
            return obj(x, g);
        } catch (const std::exception&) {
            g.setZero();
            return inf; // rejected trial point
        }
    };

    LbfgsResult res;
    Vec x = project(std::move(x0));
    Vec g(n);
    double f = eval(x, g);
    if (!std::isfinite(f)) throw std::invalid_argument("objective rejected the initial point");

    std::vector<Vec> S, Y;
    std::vector<double> rho;

    bool interrupted = false;
    auto record = [&](int it, double step) {
        res.trace.push_back(LbfgsIterate{it, f, pgnorm(x, g), step, x});
        if (opt.callback && !opt.callback(res.trace.back())) interrupted = true;
    };
    record(0, 0.0);

    for (int it = 0; it < opt.max_iters && !interrupted; ++it) {
        if (pgnorm(x, g) < opt.grad_tol) {
            res.converged = true;
            res.stop_reason = "gradient norm below tolerance";
            break;
        }

        // two-loop recursion
        Vec q = -g;
        const int m = static_cast<int>(S.size());
        std::vector<double> alpha(m);
        for (int i = m - 1; i >= 0; --i) {
            alpha[i] = rho[i] * S[i].dot(q);
            q -= alpha[i] * Y[i];
        }
        if (m > 0) q *= S.back().dot(Y.back()) / Y.back().squaredNorm();
        for (int i = 0; i < m; ++i) {
            const double beta = rho[i] * Y[i].dot(q);
            q += (alpha[i] - beta) * S[i];
        }
        Vec d = q;
        double g0 = g.dot(d);
        if (g0 >= 0.0) { // safeguard: fall back to steepest descent
            d = -g;
            g0 = g.dot(d);
        }

        // strong Wolfe line search (bracket + zoom, cubic interpolation);
        // with bounds the trial iterate is the projected point
        auto phi = [&](double t, Vec& xt, Vec& gt) {
            xt = project(x + t * d);
            return eval(xt, gt);
        };
        const double f0 = f;
        double t_prev = 0.0, f_prev = f0, g_prev = g0;
        double t = 1.0;
        double lo_t = 0.0, hi_t = 0.0, lo_f = f0, hi_f = 0.0, lo_g = g0, hi_g = 0.0;
        bool bracketed = false, accepted = false;
        Vec xt(n), gt(n);
        double ft = 0.0, gdt = 0.0;

        for (int li = 0; li < opt.max_line_iters; ++li) {
            ft = phi(t, xt, gt);
            gdt = std::isfinite(ft) ? gt.dot(d) : 0.0;
            if (!std::isfinite(ft) || ft > f0 + opt.c1 * t * g0 || (li > 0 && ft >= f_prev)) {
                lo_t = t_prev; lo_f = f_prev; lo_g = g_prev;
                hi_t = t; hi_f = std::isfinite(ft) ? ft : f0 + 1.0; hi_g = gdt;
                bracketed = true;
                break;
            }
            if (std::abs(gdt) <= -opt.c2 * g0) {
                accepted = true;
                break;
            }
            if (gdt >= 0.0) {
                lo_t = t; lo_f = ft; lo_g = gdt;
                hi_t = t_prev; hi_f = f_prev; hi_g = g_prev;
                bracketed = true;
                break;
            }
            t_prev = t; f_prev = ft; g_prev = gdt;
            t *= 2.0;
        }
        if (bracketed && !accepted) {
            for (int zi = 0; zi < opt.max_line_iters; ++zi) {
                t = detail::cubic_step(lo_t, lo_f, lo_g, hi_t, hi_f, hi_g);
                ft = phi(t, xt, gt);
                gdt = std::isfinite(ft) ? gt.dot(d) : 0.0;
                if (!std::isfinite(ft) || ft > f0 + opt.c1 * t * g0 || ft >= lo_f) {
                    hi_t = t; hi_f = std::isfinite(ft) ? ft : lo_f + 1.0; hi_g = gdt;
                } else {
                    if (std::abs(gdt) <= -opt.c2 * g0) {
                        accepted = true;
                        break;
                    }
                    if (gdt * (hi_t - lo_t) >= 0.0) {
                        hi_t = lo_t; hi_f = lo_f; hi_g = lo_g;
                    }
                    lo_t = t; lo_f = ft; lo_g = gdt;
                }
                if (std::abs(hi_t - lo_t) < 1e-14 * std::max(1.0, std::abs(lo_t))) break;
            }
        }
        if (!accepted && bracketed && std::isfinite(ft) && lo_t > 0.0 && lo_f < f0) {
            // sufficient decrease holds at lo even though curvature failed;
            // take it rather than discarding the progress
            t = lo_t;
            ft = phi(t, xt, gt);
            gdt = gt.dot(d);
            accepted = true;
        }
        if (!accepted) {
            res.stop_reason = "line search failure";
            break;
        }

        Vec s = xt - x;
        Vec yv = gt - g;
        x = std::move(xt);
        f = ft;
        g = gt;
        record(it + 1, t);

        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            S.push_back(std::move(s));
            Y.push_back(std::move(yv));
            rho.push_back(1.0 / sy);
            if (static_cast<int>(S.size()) > opt.memory) {
                S.erase(S.begin());
                Y.erase(Y.begin());
                rho.erase(rho.begin());
            }
        }
    }
    if (interrupted) res.stop_reason = "stopped by callback";
    if (res.stop_reason.empty()) res.stop_reason = "max iterations";
    if (pgnorm(x, g) < opt.grad_tol) res.converged = true;

    res.x = std::move(x);
    res.grad = std::move(g);
    res.f = f;
    return res;
}

/// Misfit + coarse-gradient objective for a single fault parameter, built on
/// the forward/adjoint pipeline. An optional additive penalty hook
/// `penalty(p, grad_out) -> value` supports regularization (disabled by
/// default; the reference configuration runs without one).
struct FaultInversion {
    const CurvilinearGrid* grid = nullptr;
    Eigen::MatrixXd mu_minus, mu_plus;
    FrictionModel base;
    ForwardOptions fopt;
    ReceiverSet receivers;
    Eigen::MatrixXd data;
    double t0 = 0.0, dt = 0.0;
    int nsteps = 0;
    ParamId param = ParamId::a;
    const InterpolationPair* interp = nullptr;
    double v_plus0 = 5e-13, v_minus0 = -5e-13;
    std::function<double(const Vec&, Vec&)> penalty;

    double operator()(const Vec& p_coarse, Vec& grad_out) const {
        FrictionModel m = parameter_embed(p_coarse, interp, base, param);
        ForwardProblem fp(*grid, mu_minus, mu_plus, m, fopt);
        GradientReport rep =
            compute_gradient(fp, fp.initial_state(v_plus0, v_minus0), t0, dt, nsteps,
                             receivers, &data, param, interp);
        grad_out = rep.coarse_gradient;
        double f = rep.misfit;
        if (penalty) {
            Vec pg = Vec::Zero(p_coarse.size());
            f += penalty(p_coarse, pg);
            grad_out += pg;
        }
        return f;
    }
};

} // namespace rsfinv
