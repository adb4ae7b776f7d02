#pragma once

#include <rsfinv/forward.hpp>
#include <rsfinv/interpolation.hpp>

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

namespace rsfinv {

/// Per-stage adjoint forcing series, (4 nsteps) x receivers, in forward row
/// order. Velocity misfits force with the residual itself; displacement
/// misfits force with -r_hat where r_hat(t) = int_0^t r dt' + r_hat0 is
/// co-integrated with the same RK4 stage rule as the fields and r_hat0 is
/// chosen so r_hat(T) = 0. A multiplicative window enters once more here
/// (the recorded residuals already carry one factor).
inline Eigen::MatrixXd adjoint_source(const StageHistory& h, const ReceiverSet& rs) {
    const int rows = static_cast<int>(h.residuals.rows());
    const int nrec = static_cast<int>(h.residuals.cols());
    Eigen::MatrixXd r = h.residuals;
    if (rs.window)
        for (int j = 0; j < rows; ++j) r.row(j) *= rs.window(h.stage_times(j));
    if (rs.kind == MeasurementKind::velocity) return r;

    // RK4 stage values of the running integral of r
    Eigen::MatrixXd rhat(rows, nrec);
    Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(nrec);
    for (int n = 0; n < h.nsteps; ++n) {
        const int j = 4 * n;
        rhat.row(j + 0) = c;
        rhat.row(j + 1) = c + 0.5 * h.dt * r.row(j + 0);
        rhat.row(j + 2) = c + 0.5 * h.dt * r.row(j + 1);
        rhat.row(j + 3) = c + h.dt * r.row(j + 2);
        c += (h.dt / 6.0) *
             (r.row(j + 0) + 2.0 * r.row(j + 1) + 2.0 * r.row(j + 2) + r.row(j + 3));
    }
    rhat.rowwise() -= c; // r_hat(T) = 0
    return -rhat;
}

/// Linearized fault targets of the reversed-time adjoint problem. All
/// quantities follow the forward conventions (v = du/dt in reversed time,
/// raw tractions); the friction law is linear with coefficients frozen at
/// the forward stage values (V*, psi):
///   kappa V' + F_V V' + G_V psi' = -tau_ell',  tau*'_+ = -(F_V V' + G_V psi'),
///   state rate (reversed time) = G_psi psi' + F_psi V'.
struct AdjointFaultTargets {
    Vec tau_star_plus, tau_star_minus;
    Vec ustar_rate_plus, ustar_rate_minus;
    Vec v_star;
    Vec tau_ell; // raw units
    Vec psi_rate;
};

inline AdjointFaultTargets adjoint_fault_targets(
    const Vec& v_plus, const Vec& v_minus, const Vec& tau_tilde_plus,
    const Vec& tau_tilde_minus, const Vec& Z_plus, const Vec& Z_minus, const Vec& psi_dagger,
    const Vec& v_star_fwd, const Vec& psi_fwd, const FrictionModel& model, bool locked) {
    const int n = static_cast<int>(psi_dagger.size());
    AdjointFaultTargets t;
    Vec w_plus = Z_plus.array() * v_plus.array() - tau_tilde_plus.array();
    Vec w_minus = Z_minus.array() * v_minus.array() - tau_tilde_minus.array();
    Vec zsum = Z_plus + Z_minus;
    t.tau_ell = (Z_plus.array() * w_minus.array() - Z_minus.array() * w_plus.array()) /
                zsum.array();

    t.v_star.resize(n);
    t.tau_star_plus.resize(n);
    t.psi_rate.resize(n);
    if (locked) {
        t.v_star.setZero();
        t.tau_star_plus = t.tau_ell;
        t.psi_rate.setZero();
    } else {
        for (int i = 0; i < n; ++i) {
            const FrictionPartials p = partials(v_star_fwd(i), psi_fwd(i), model, i);
            const double kappa_raw = Z_plus(i) * Z_minus(i) / zsum(i);
            const double kappa = km_per_m * kappa_raw;
            t.v_star(i) = -(km_per_m * t.tau_ell(i) + p.G_V * psi_dagger(i)) / (kappa + p.F_V);
            t.tau_star_plus(i) = t.tau_ell(i) + kappa_raw * t.v_star(i);
            t.psi_rate(i) = p.G_psi * psi_dagger(i) + p.F_psi * t.v_star(i);
        }
    }
    t.tau_star_minus = -t.tau_star_plus;
    t.ustar_rate_plus = v_plus.array() -
                        (tau_tilde_plus.array() - t.tau_star_plus.array()) / Z_plus.array();
    t.ustar_rate_minus = v_minus.array() -
                         (tau_tilde_minus.array() - t.tau_star_minus.array()) / Z_minus.array();
    return t;
}

/// Stage record of the adjoint run, stored in forward row order (adjoint
/// stage i written to row 4N - 1 - i so it aligns with the forward history).
struct AdjointHistory {
    Eigen::MatrixXd v_star;  // V' at stages
    Eigen::MatrixXd psi;     // psi' at stages
    Vec psi_dagger_0;        // psi'(t = 0), i.e. the adjoint terminal state
};

/// Reversed-time adjoint of a recorded forward run. The state layout and
/// every linear piece (volume operator, SAT, exterior characteristics)
/// coincide with the forward problem; only the fault law and the receiver
/// source differ. Terminal conditions are zero, so integration starts from
/// the zero state.
class AdjointProblem {
public:
    AdjointProblem(const ForwardProblem& fp, const StageHistory& fwd, const ReceiverSet& rs)
        : fp_(fp), fwd_(fwd), source_(adjoint_source(fwd, rs)) {
        if (fwd.nsteps <= 0) throw std::invalid_argument("empty forward history");
        // receiver delta functions as grid forcing: delta = H^{-1} w
        const int nrec = static_cast<int>(rs.receivers.size());
        delta_.reserve(nrec);
        for (const Receiver& r : rs.receivers) {
            const BlockOperators& b = r.plus_block ? fp.ops_plus() : fp.ops_minus();
            DeltaForce d;
            d.plus_block = r.plus_block;
            d.nodes = r.nodes;
            d.weights.resize(r.weights.size());
            for (std::size_t k = 0; k < r.nodes.size(); ++k)
                d.weights(k) = r.weights(k) / b.h_phys(r.nodes[k]);
            delta_.push_back(std::move(d));
        }
    }

    /// RHS at adjoint stage `row` (0-based global, reversed time). Consumes
    /// forward stage 4N - 1 - row.
    Vec rhs(int row, const Vec& yd, StageRecord* rec = nullptr) const {
        const int jf = 4 * fwd_.nsteps - 1 - row;
        if (jf < 0 || jf >= 4 * fwd_.nsteps)
            throw std::invalid_argument("adjoint stage out of range");
        const ForwardOptions& opt = fp_.options();
        const int N = static_cast<int>(fp_.u_minus(yd).size());

        Vec dy = Vec::Zero(fp_.state_size());
        dy.segment(0, N) = fp_.v_minus(yd);
        dy.segment(2 * N, N) = fp_.v_plus(yd);

        Vec acc_m = fp_.ops_minus().d2 * Vec(fp_.u_minus(yd));
        Vec acc_p = fp_.ops_plus().d2 * Vec(fp_.u_plus(yd));

        const auto& segs = fp_.segments();
        std::vector<Vec> tau_tilde(segs.size()), v_edge(segs.size());
        for (std::size_t si = 0; si < segs.size(); ++si) {
            const auto& s = segs[si];
            const BlockOperators& b = s.block == 0 ? fp_.ops_minus() : fp_.ops_plus();
            const EdgeOperators& e = b.side(s.side);
            Vec u = s.block == 0 ? Vec(fp_.u_minus(yd)) : Vec(fp_.u_plus(yd));
            Vec v = s.block == 0 ? Vec(fp_.v_minus(yd)) : Vec(fp_.v_plus(yd));
            Vec tau = e.traction * u;
            Vec ue(s.len), ve(s.len);
            for (int k = 0; k < s.len; ++k) {
                ue(k) = u(e.nodes[k]);
                ve(k) = v(e.nodes[k]);
            }
            Vec ustar = yd.segment(s.offset, s.len);
            tau_tilde[si] = tau.array() + s.gamma.array() * (ustar.array() - ue.array());
            v_edge[si] = ve;
        }

        for (std::size_t si = 0; si < segs.size(); ++si) {
            const auto& s = segs[si];
            if (s.fault) continue;
            auto bt = boundary_targets(v_edge[si], tau_tilde[si], s.Z, opt.R_exterior);
            const BlockOperators& b = s.block == 0 ? fp_.ops_minus() : fp_.ops_plus();
            Vec u = s.block == 0 ? Vec(fp_.u_minus(yd)) : Vec(fp_.u_plus(yd));
            Vec& acc = s.block == 0 ? acc_m : acc_p;
            acc += characteristic_sat(b, s.side, u, yd.segment(s.offset, s.len), bt.tau_star);
            dy.segment(s.offset, s.len) = bt.ustar_rate;
        }

        {
            const auto& sm = segs[3];
            const auto& sp = segs[6];
            auto ft = adjoint_fault_targets(v_edge[6], v_edge[3], tau_tilde[6], tau_tilde[3],
                                            sp.Z, sm.Z, Vec(fp_.psi(yd)),
                                            Vec(fwd_.v_star.row(jf)), Vec(fwd_.psi.row(jf)),
                                            fp_.friction(), opt.locked_fault);
            acc_p += characteristic_sat(fp_.ops_plus(), sp.side, Vec(fp_.u_plus(yd)),
                                        yd.segment(sp.offset, sp.len), ft.tau_star_plus);
            acc_m += characteristic_sat(fp_.ops_minus(), sm.side, Vec(fp_.u_minus(yd)),
                                        yd.segment(sm.offset, sm.len), ft.tau_star_minus);
            dy.segment(sp.offset, sp.len) = ft.ustar_rate_plus;
            dy.segment(sm.offset, sm.len) = ft.ustar_rate_minus;
            dy.segment(fp_.psi_offset(), fp_.fault_points()) = ft.psi_rate;
            if (rec) {
                rec->v_star = ft.v_star;
                rec->psi = fp_.psi(yd);
                rec->tau_ell = ft.tau_ell;
            }
        }

        // receiver source at the matched forward stage
        for (std::size_t k = 0; k < delta_.size(); ++k) {
            const double s = source_(jf, static_cast<int>(k));
            if (s == 0.0) continue;
            Vec& acc = delta_[k].plus_block ? acc_p : acc_m;
            for (std::size_t q = 0; q < delta_[k].nodes.size(); ++q)
                acc(delta_[k].nodes[q]) += s * delta_[k].weights(q);
        }

        dy.segment(N, N) = acc_m / opt.rho;
        dy.segment(3 * N, N) = acc_p / opt.rho;
        return dy;
    }

    /// Full adjoint integration from the zero terminal state, recording V'
    /// and psi' stages in forward row order. Returns the adjoint state at
    /// reversed time T, i.e. physical time 0.
    Vec integrate(AdjointHistory& out) const {
        const int rows = 4 * fwd_.nsteps;
        const int nf = fp_.fault_points();
        out.v_star.resize(rows, nf);
        out.psi.resize(rows, nf);
        Vec y0 = Vec::Zero(fp_.state_size());
        auto f = [&](int row, double, const Vec& ys) {
            StageRecord rec;
            Vec dy = rhs(row, ys, &rec);
            out.v_star.row(rows - 1 - row) = rec.v_star;
            out.psi.row(rows - 1 - row) = rec.psi;
            return dy;
        };
        Vec yT = rk4_run(f, y0, 0.0, fwd_.dt, fwd_.nsteps);
        out.psi_dagger_0 = yT.segment(fp_.psi_offset(), nf);
        return yT;
    }

    const Eigen::MatrixXd& source() const { return source_; }

private:
    struct DeltaForce {
        bool plus_block = true;
        std::vector<int> nodes;
        Vec weights;
    };
    const ForwardProblem& fp_;
    const StageHistory& fwd_;
    Eigen::MatrixXd source_;
    std::vector<DeltaForce> delta_;
};

enum class ParamId { a, b, Dc, f0, tau0, sigma_n0, psi0 };

inline const char* param_name(ParamId p) {
    switch (p) {
        case ParamId::a: return "a";
        case ParamId::b: return "b";
        case ParamId::Dc: return "Dc";
        case ParamId::f0: return "f0";
        case ParamId::tau0: return "tau0";
        case ParamId::sigma_n0: return "sigma_n0";
        case ParamId::psi0: return "psi0";
    }
    return "?";
}

struct GradientReport {
    ParamId param = ParamId::a;
    Vec fine_gradient;   // fault grid function
    Vec coarse_gradient; // coarse parameter grid function
    Vec psi0_gradient;   // fault grid function
    double misfit = 0.0;
    std::uint64_t config_hash = 0;
};

namespace detail {

inline void param_partials(const FrictionPartials& p, ParamId id, double& Fp, double& Gp) {
    switch (id) {
        case ParamId::a: Fp = p.F_a; Gp = p.G_a; return;
        case ParamId::b: Fp = p.F_b; Gp = p.G_b; return;
        case ParamId::Dc: Fp = p.F_Dc; Gp = p.G_Dc; return;
        case ParamId::f0: Fp = p.F_f0; Gp = p.G_f0; return;
        case ParamId::tau0: Fp = p.F_tau0; Gp = p.G_tau0; return;
        case ParamId::sigma_n0: Fp = p.F_sigma; Gp = p.G_sigma; return;
        default: throw std::invalid_argument("psi0 has no friction partials");
    }
}

} // namespace detail

/// Exact discrete misfit gradient from aligned forward/adjoint stage
/// histories:
///   dF/dp    = -sum_j H_T,j H_G (F_p V'_j + G_p psi'_j),
///   dF/dpsi0 = H_G psi'(0),
/// with the friction partials evaluated at the forward stage values. H_G is
/// the physical fault quadrature in meters (consistent with stresses in MPa
/// and slip in m). The coarse gradient is the exact chain rule through
/// p^F = c2f p^C; with a norm-compatible pair this is identical to
/// restricting the gradient density with f2c and applying the coarse
/// quadrature.
inline GradientReport assemble_gradient(const ForwardProblem& fp, const StageHistory& fwd,
                                        const AdjointHistory& adj, ParamId param,
                                        const InterpolationPair* interp = nullptr) {
    const int rows = 4 * fwd.nsteps;
    if (adj.v_star.rows() != rows || adj.psi.rows() != rows ||
        adj.psi_dagger_0.size() != fp.fault_points())
        throw std::invalid_argument("forward and adjoint histories are misaligned");
    const int nf = fp.fault_points();
    Vec w = m_per_km * fp.fault_quadrature(); // km -> m

    GradientReport rep;
    rep.param = param;
    rep.misfit = misfit(fwd);
    // boundary term of the state-constraint multiplier at t = 0; the sign
    // follows the same normalization as the parameter terms below and is
    // pinned by the FD consistency checks
    rep.psi0_gradient = -(w.array() * adj.psi_dagger_0.array());

    if (param == ParamId::psi0) {
        rep.fine_gradient = rep.psi0_gradient;
    } else {
        rep.fine_gradient = Vec::Zero(nf);
        for (int j = 0; j < rows; ++j) {
            const double ht = fwd.time_weight(j);
            for (int i = 0; i < nf; ++i) {
                const FrictionPartials p =
                    partials(fwd.v_star(j, i), fwd.psi(j, i), fp.friction(), i);
                double Fp = 0.0, Gp = 0.0;
                detail::param_partials(p, param, Fp, Gp);
                rep.fine_gradient(i) -=
                    ht * w(i) * (Fp * adj.v_star(j, i) + Gp * adj.psi(j, i));
            }
        }
    }
    rep.coarse_gradient =
        interp ? Vec(interp->c2f.transpose() * rep.fine_gradient) : rep.fine_gradient;
    return rep;
}

/// Forward solve + adjoint solve + gradient assembly in one call.
inline GradientReport compute_gradient(const ForwardProblem& fp, const Vec& y0, double t0,
                                       double dt, int nsteps, const ReceiverSet& receivers,
                                       const Eigen::MatrixXd* data, ParamId param,
                                       const InterpolationPair* interp = nullptr) {
    StageHistory fwd;
    rk4_integrate(fp, y0, t0, dt, nsteps, &receivers, data, fwd);
    AdjointProblem ap(fp, fwd, receivers);
    AdjointHistory adj;
    ap.integrate(adj);
    return assemble_gradient(fp, fwd, adj, param, interp);
}

/// Coarse-parameter / fine-fault transfer pair: Gregory quadrature on the
/// coarse grid (usable at small m_p), SBP quadrature on the fine grid.
inline InterpolationPair fault_interpolation(int coarse_n, int fine_n, double length,
                                             int order) {
    SbpNorm cn = gregory_norm(coarse_n, length / (coarse_n - 1));
    SbpNorm fn = SbpOperatorSet1D(fine_n, length / (fine_n - 1), order).norm();
    return build_interpolation(coarse_n, fine_n, cn, fn);
}

/// One-sided FD validation curve for a coarse-grid gradient. `misfit_at`
/// maps a coarse parameter vector to the discrete misfit (one full forward
/// solve); perturbations are applied one component at a time and may run
/// concurrently. The error norm is parameter-normalized:
///   e(d) = ||g - D+F(d)||_p / ||g||_p,  ||v||_p = ||v / pbar||_inf.
template <class MisfitFn>
Vec fd_gradient_check(MisfitFn&& misfit_at, const Vec& p_coarse, const Vec& grad_coarse,
                      const Vec& deltas, int jobs = 1) {
    const int np = static_cast<int>(p_coarse.size());
    if (grad_coarse.size() != np) throw std::invalid_argument("gradient size mismatch");
    if (jobs < 1) jobs = 1;
    const double F0 = misfit_at(p_coarse);

    Vec pbar = p_coarse.cwiseAbs();
    for (int i = 0; i < np; ++i)
        if (pbar(i) == 0.0) pbar(i) = 1.0;

    Vec err(deltas.size());
    for (int di = 0; di < deltas.size(); ++di) {
        const double d = deltas(di);
        Vec fd(np);
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        auto worker = [&] {
            for (int i = next.fetch_add(1); i < np; i = next.fetch_add(1)) {
                Vec p = p_coarse;
                p(i) += d;
                fd(i) = (misfit_at(p) - F0) / d;
            }
        };
        const int nt = std::min(jobs, np);
        for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();

        const double gn = (grad_coarse.array() / pbar.array()).abs().maxCoeff();
        err(di) = ((grad_coarse - fd).array() / pbar.array()).abs().maxCoeff() / gn;
    }
    return err;
}

} // namespace rsfinv
