#pragma once

#include <rsfinv/friction.hpp>
#include <rsfinv/geometry.hpp>
#include <rsfinv/operators2d.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rsfinv {

// Unit conventions: coordinates in km, displacement in m, velocity in m/s,
// shear modulus in MPa, density numerically equal to kg/m^3 (= MPa s^2/km^2).
// Tractions inside the scheme are "raw": mu du[m]/dn[km] = 1000 x MPa, and
// the impedance Z = sqrt(rho mu) in MPa s/km pairs with v in m/s in the same
// raw unit. Conversions to MPa happen only at the friction interface.
inline constexpr double km_per_m = 1e-3;
inline constexpr double m_per_km = 1e3;

struct ForwardOptions {
    int order = 4;
    double rho = 2670.0;          // MPa s^2/km^2
    // Dirichlet penalty multiplier: gamma = gamma_scale * mu / (sigma0 h).
    // Below ~1 the semi-discrete scheme loses energy stability; above ~4 the
    // penalty modes leave the RK4 stability region at CFL 0.25.
    double gamma_scale = 2.0;
    double R_exterior = 0.0;      // reflection coefficient on outer edges
    double bisection_tol = 1e-13; // m/s
    bool locked_fault = false;    // welded interface (linear problem)
    double instability_factor = 1e10;
};

/// Characteristic boundary targets for one exterior segment:
///   tau* = (R-1)/2 (Z v - tau~),  du*/dt = (R+1)/2 (v - tau~/Z),
/// which preserves the outgoing characteristic Z du*/dt - tau* = Z v - tau~.
struct BoundaryTargets {
    Vec tau_star;
    Vec ustar_rate;
};

inline BoundaryTargets boundary_targets(const Vec& v_edge, const Vec& tau_tilde,
                                        const Vec& Z, double R) {
    if (R != -1.0 && R != 0.0 && R != 1.0)
        throw std::invalid_argument("reflection coefficient must be -1, 0 or 1");
    BoundaryTargets t;
    t.tau_star = 0.5 * (R - 1.0) * (Z.array() * v_edge.array() - tau_tilde.array());
    t.ustar_rate = 0.5 * (R + 1.0) * (v_edge.array() - tau_tilde.array() / Z.array());
    return t;
}

/// Rate-and-state fault targets for the two coincident fault edges.
/// w_pm are the outgoing characteristics Z v - tau~ per side (outward
/// traction convention), V* solves kappa V* + F(V*, psi) = -tau_ell and the
/// traction targets balance: tau*_plus = -F, tau*_minus = +F.
struct FaultTargets {
    Vec tau_star_plus, tau_star_minus;
    Vec ustar_rate_plus, ustar_rate_minus;
    Vec v_star;  // slip velocity, m/s
    Vec tau_ell; // raw traction units (1000 x MPa)
    Vec psi_rate;
};

inline FaultTargets fault_targets(const Vec& v_plus, const Vec& v_minus,
                                  const Vec& tau_tilde_plus, const Vec& tau_tilde_minus,
                                  const Vec& Z_plus, const Vec& Z_minus, const Vec& psi,
                                  const FrictionModel& model, double tol, bool locked) {
    const int n = static_cast<int>(psi.size());
    FaultTargets t;
    Vec w_plus = Z_plus.array() * v_plus.array() - tau_tilde_plus.array();
    Vec w_minus = Z_minus.array() * v_minus.array() - tau_tilde_minus.array();
    Vec zsum = Z_plus + Z_minus;
    t.tau_ell = (Z_plus.array() * w_minus.array() - Z_minus.array() * w_plus.array()) /
                zsum.array();

    if (locked) {
        t.v_star = Vec::Zero(n);
        t.tau_star_plus = t.tau_ell;
        t.tau_star_minus = -t.tau_ell;
        t.psi_rate = Vec::Zero(n);
    } else {
        FaultKinematics kin;
        kin.psi = psi;
        // raw -> MPa and MPa/(m/s) for the friction solve
        kin.tau_ell = km_per_m * t.tau_ell;
        kin.kappa = km_per_m * (Z_plus.array() * Z_minus.array() / zsum.array());
        t.v_star = solve_v_star(kin, model, tol);
        t.tau_star_plus.resize(n);
        t.tau_star_minus.resize(n);
        t.psi_rate.resize(n);
        for (int i = 0; i < n; ++i) {
            // tau*+ = -F(V*,psi) = tau_ell + kappa V* at the root; the second
            // form is used because F is logarithmically stiff in V, so the
            // absolute V* tolerance would otherwise leak O(sigma a ln) traction
            // errors on near-frozen fault sections. Both forms have the same
            // linearization through the implicit function V*(tau_ell, psi).
            const double kappa_raw = Z_plus(i) * Z_minus(i) / zsum(i);
            t.tau_star_plus(i) = t.tau_ell(i) + kappa_raw * t.v_star(i);
            t.tau_star_minus(i) = -t.tau_star_plus(i);
            t.psi_rate(i) = state_rate(t.v_star(i), psi(i), model, i);
        }
    }
    t.ustar_rate_plus = v_plus.array() -
                        (tau_tilde_plus.array() - t.tau_star_plus.array()) / Z_plus.array();
    t.ustar_rate_minus = v_minus.array() -
                         (tau_tilde_minus.array() - t.tau_star_minus.array()) / Z_minus.array();
    return t;
}

/// SAT contribution of one segment to the momentum equation (before the
/// 1/rho factor): H_phys^{-1} (R^T W (tau* - T u) - T^T W (u* - R u)).
inline Vec characteristic_sat(const BlockOperators& b, EdgeSide sd, const Vec& u,
                              const Vec& ustar, const Vec& tau_star) {
    const EdgeOperators& e = b.side(sd);
    const int ne = static_cast<int>(e.nodes.size());
    Vec tau = e.traction * u;
    Vec du(ne);
    for (int k = 0; k < ne; ++k) du(k) = ustar(k) - u(e.nodes[k]);

    Vec out = Vec::Zero(b.N);
    for (int k = 0; k < ne; ++k)
        out(e.nodes[k]) += e.w_phys(k) * (tau_star(k) - tau(k));
    out -= e.traction.transpose() * Vec(e.w_phys.array() * du.array());
    return out.array() / b.h_phys.array();
}

struct StageRecord {
    Vec v_star;  // m/s
    Vec psi;
    Vec tau_ell; // raw units (diagnostic)
};

/// Two-block forward problem with a rate-and-state fault.
class ForwardProblem {
public:
    ForwardProblem(const CurvilinearGrid& grid, const Eigen::MatrixXd& mu_minus,
                   const Eigen::MatrixXd& mu_plus, FrictionModel friction,
                   ForwardOptions opt = {})
        : grid_(grid), friction_(std::move(friction)), opt_(opt),
          ops_m_(build_block_operators(grid.minus, mu_minus, opt.order)),
          ops_p_(build_block_operators(grid.plus, mu_plus, opt.order)) {
        friction_.validate();
        if (friction_.size() != grid.m)
            throw std::invalid_argument("friction model size must match fault grid");
        if (opt_.rho <= 0.0) throw std::invalid_argument("density must be positive");

        mu_m_ = flatten(ops_m_, mu_minus);
        mu_p_ = flatten(ops_p_, mu_plus);

        // state layout: [u-, v-, u+, v+, u* segments, psi]
        N_ = ops_m_.N;
        int off = 4 * N_;
        auto add_segment = [&](int block, EdgeSide side, bool fault) {
            const BlockOperators& b = block == 0 ? ops_m_ : ops_p_;
            Segment s;
            s.block = block;
            s.side = side;
            s.fault = fault;
            s.offset = off;
            s.len = static_cast<int>(b.side(side).nodes.size());
            const Vec& mu = block == 0 ? mu_m_ : mu_p_;
            s.Z.resize(s.len);
            s.gamma.resize(s.len);
            const bool xi_edge = side == EdgeSide::west || side == EdgeSide::east;
            const double h_perp = xi_edge ? grid_block(block).dxi : grid_block(block).deta;
            const double sigma0 = detail::boundary_norm_weights(opt_.order)[0];
            for (int k = 0; k < s.len; ++k) {
                const int id = b.side(side).nodes[k];
                s.Z(k) = std::sqrt(opt_.rho * mu(id));
                s.gamma(k) = opt_.gamma_scale * mu(id) / (sigma0 * h_perp);
            }
            off += s.len;
            segments_.push_back(s);
        };
        add_segment(0, EdgeSide::west, false);
        add_segment(0, EdgeSide::east, false);
        add_segment(0, EdgeSide::south, false);
        add_segment(0, EdgeSide::north, true); // fault, minus side
        add_segment(1, EdgeSide::west, false);
        add_segment(1, EdgeSide::east, false);
        add_segment(1, EdgeSide::south, true); // fault, plus side
        add_segment(1, EdgeSide::north, false);
        psi_offset_ = off;
        size_ = off + grid_.m;
    }

    int state_size() const { return size_; }
    int psi_offset() const { return psi_offset_; }
    int fault_points() const { return grid_.m; }
    const BlockOperators& ops_minus() const { return ops_m_; }
    const BlockOperators& ops_plus() const { return ops_p_; }
    const CurvilinearGrid& grid() const { return grid_; }
    const FrictionModel& friction() const { return friction_; }
    FrictionModel& friction() { return friction_; }
    const ForwardOptions& options() const { return opt_; }

    struct Segment {
        int block = 0;
        EdgeSide side = EdgeSide::west;
        int offset = 0, len = 0;
        bool fault = false;
        Vec Z, gamma;
    };
    const std::vector<Segment>& segments() const { return segments_; }

    // field accessors on a packed state
    auto u_minus(Vec& y) const { return y.segment(0, N_); }
    auto v_minus(Vec& y) const { return y.segment(N_, N_); }
    auto u_plus(Vec& y) const { return y.segment(2 * N_, N_); }
    auto v_plus(Vec& y) const { return y.segment(3 * N_, N_); }
    auto u_minus(const Vec& y) const { return y.segment(0, N_); }
    auto v_minus(const Vec& y) const { return y.segment(N_, N_); }
    auto u_plus(const Vec& y) const { return y.segment(2 * N_, N_); }
    auto v_plus(const Vec& y) const { return y.segment(3 * N_, N_); }
    auto psi(const Vec& y) const { return y.segment(psi_offset_, grid_.m); }

    /// At-rest state with uniform creep velocities (m/s) and psi0.
    Vec initial_state(double v_plus_mps, double v_minus_mps) const {
        Vec y = Vec::Zero(size_);
        y.segment(N_, N_).setConstant(v_minus_mps);
        y.segment(3 * N_, N_).setConstant(v_plus_mps);
        y.segment(psi_offset_, grid_.m) = friction_.psi0;
        return y;
    }

    /// Semi-discrete right-hand side. Optional extra momentum sources (per
    /// block, physical acceleration units after the 1/rho factor is applied
    /// here, i.e. given as force densities in MPa/km) support adjoint and
    /// verification runs.
    Vec rhs(double t, const Vec& y, StageRecord* rec = nullptr,
            const Vec* force_minus = nullptr, const Vec* force_plus = nullptr) const {
        (void)t;
        Vec dy = Vec::Zero(size_);
        dy.segment(0, N_) = v_minus(y);
        dy.segment(2 * N_, N_) = v_plus(y);

        Vec acc_m = ops_m_.d2 * Vec(u_minus(y));
        Vec acc_p = ops_p_.d2 * Vec(u_plus(y));

        // per-segment edge fields
        std::vector<Vec> tau_tilde(segments_.size()), v_edge(segments_.size());
        for (std::size_t si = 0; si < segments_.size(); ++si) {
            const Segment& s = segments_[si];
            const BlockOperators& b = block_ops(s.block);
            const EdgeOperators& e = b.side(s.side);
            Vec u = s.block == 0 ? Vec(u_minus(y)) : Vec(u_plus(y));
            Vec v = s.block == 0 ? Vec(v_minus(y)) : Vec(v_plus(y));
            Vec tau = e.traction * u;
            Vec ue(s.len), ve(s.len);
            for (int k = 0; k < s.len; ++k) {
                ue(k) = u(e.nodes[k]);
                ve(k) = v(e.nodes[k]);
            }
            Vec ustar = y.segment(s.offset, s.len);
            tau_tilde[si] = tau.array() + s.gamma.array() * (ustar.array() - ue.array());
            v_edge[si] = ve;
        }

        // exterior segments
        for (std::size_t si = 0; si < segments_.size(); ++si) {
            const Segment& s = segments_[si];
            if (s.fault) continue;
            auto bt = boundary_targets(v_edge[si], tau_tilde[si], s.Z, opt_.R_exterior);
            Vec ustar = y.segment(s.offset, s.len);
            Vec& acc = s.block == 0 ? acc_m : acc_p;
            acc += characteristic_sat(block_ops(s.block), s.side,
                                      s.block == 0 ? Vec(u_minus(y)) : Vec(u_plus(y)), ustar,
                                      bt.tau_star);
            dy.segment(s.offset, s.len) = bt.ustar_rate;
        }

        // fault pair: segment 3 (minus north) and 6 (plus south)
        {
            const Segment& sm = segments_[3];
            const Segment& sp = segments_[6];
            auto ft = fault_targets(v_edge[6], v_edge[3], tau_tilde[6], tau_tilde[3], sp.Z,
                                    sm.Z, Vec(psi(y)), friction_, opt_.bisection_tol,
                                    opt_.locked_fault);
            acc_p += characteristic_sat(ops_p_, sp.side, Vec(u_plus(y)),
                                        y.segment(sp.offset, sp.len), ft.tau_star_plus);
            acc_m += characteristic_sat(ops_m_, sm.side, Vec(u_minus(y)),
                                        y.segment(sm.offset, sm.len), ft.tau_star_minus);
            dy.segment(sp.offset, sp.len) = ft.ustar_rate_plus;
            dy.segment(sm.offset, sm.len) = ft.ustar_rate_minus;
            dy.segment(psi_offset_, grid_.m) = ft.psi_rate;
            if (rec) {
                rec->v_star = ft.v_star;
                rec->psi = psi(y);
                rec->tau_ell = ft.tau_ell;
            }
        }

        if (force_minus) acc_m += *force_minus;
        if (force_plus) acc_p += *force_plus;
        dy.segment(N_, N_) = acc_m / opt_.rho;
        dy.segment(3 * N_, N_) = acc_p / opt_.rho;
        return dy;
    }

    /// Discrete mechanical energy of the semi-bounded penalty formulation:
    /// volume terms plus, per edge, (u*-u)^T W (gamma/2 (u*-u) + T u).
    /// The cross term makes the R = 0 edge rate exactly
    /// -Z v^2/2 - tau~^2/(2Z) <= 0; gamma above the borrowing bound keeps
    /// the whole form nonnegative.
    double energy(const Vec& y) const {
        double E = 0.0;
        for (int blk : {0, 1}) {
            const BlockOperators& b = block_ops(blk);
            Vec u = blk == 0 ? Vec(u_minus(y)) : Vec(u_plus(y));
            Vec v = blk == 0 ? Vec(v_minus(y)) : Vec(v_plus(y));
            E += 0.5 * opt_.rho * v.dot(Vec(b.h_phys.array() * v.array()));
            E += 0.5 * u.dot(b.stiffness * u);
        }
        for (const Segment& s : segments_) {
            const EdgeOperators& e = block_ops(s.block).side(s.side);
            Vec u = s.block == 0 ? Vec(u_minus(y)) : Vec(u_plus(y));
            Vec tau = e.traction * u;
            for (int k = 0; k < s.len; ++k) {
                const double d = y(s.offset + k) - u(e.nodes[k]);
                E += e.w_phys(k) * d * (0.5 * s.gamma(k) * d + tau(k));
            }
        }
        return E;
    }

    /// Fault quadrature (physical arc length) used for misfits/gradients.
    Vec fault_quadrature() const {
        const EdgeOperators& e = ops_p_.side(EdgeSide::south);
        return e.w_phys;
    }

private:
    const GridBlock& grid_block(int blk) const { return blk == 0 ? grid_.minus : grid_.plus; }
    const BlockOperators& block_ops(int blk) const { return blk == 0 ? ops_m_ : ops_p_; }

    static Vec flatten(const BlockOperators& b, const Eigen::MatrixXd& f) {
        Vec out(b.N);
        for (int j = 0; j < b.n; ++j)
            for (int i = 0; i < b.m; ++i) out(b.id(i, j)) = f(i, j);
        return out;
    }

    CurvilinearGrid grid_;
    FrictionModel friction_;
    ForwardOptions opt_;
    BlockOperators ops_m_, ops_p_;
    Vec mu_m_, mu_p_;
    int N_ = 0, psi_offset_ = 0, size_ = 0;
    std::vector<Segment> segments_;
};

enum class MeasurementKind { displacement, velocity };

/// Point receiver: discrete Dirac weights with tensor moment conditions up
/// to the SBP order, no smoothness conditions. Measurements inherit the
/// field units (m or m/s).
struct Receiver {
    double x = 0.0, y = 0.0;
    bool plus_block = true;
    std::vector<int> nodes;
    Vec weights; // measurement = sum_k weights_k * field(node_k), field in km
};

struct ReceiverSet {
    std::vector<Receiver> receivers;
    MeasurementKind kind = MeasurementKind::velocity;
    std::function<double(double)> window; // optional multiplicative w(t)

    int size() const { return static_cast<int>(receivers.size()); }
};

inline Receiver build_receiver(const CurvilinearGrid& grid, double xr, double yr, int order) {
    Receiver r;
    r.x = xr;
    r.y = yr;
    // block by elevation relative to the fault trace
    int ic = 0;
    double best = std::numeric_limits<double>::max();
    const GridBlock& anyb = grid.plus;
    for (int i = 0; i < grid.m; ++i) {
        const double d = std::abs(anyb.x(i, 0) - xr);
        if (d < best) {
            best = d;
            ic = i;
        }
    }
    r.plus_block = yr >= grid.plus.y(ic, 0);
    const GridBlock& b = r.plus_block ? grid.plus : grid.minus;

    // nearest node
    int bi = 0, bj = 0;
    best = std::numeric_limits<double>::max();
    for (int j = 0; j < b.n; ++j)
        for (int i = 0; i < b.m; ++i) {
            const double d = std::hypot(b.x(i, j) - xr, b.y(i, j) - yr);
            if (d < best) {
                best = d;
                bi = i;
                bj = j;
            }
        }

    const int w = order + 1;
    const int i0 = std::clamp(bi - w / 2, 0, b.m - w);
    const int j0 = std::clamp(bj - w / 2, 0, b.n - w);
    const double h = b.dxi;

    Eigen::MatrixXd M(w * w, w * w);
    std::vector<int> ids(w * w);
    for (int dj = 0; dj < w; ++dj)
        for (int di = 0; di < w; ++di) {
            const int col = di + w * dj;
            const int i = i0 + di, j = j0 + dj;
            ids[col] = i + b.m * j;
            const double sx = (b.x(i, j) - xr) / h, sy = (b.y(i, j) - yr) / h;
            for (int q = 0; q < w; ++q)
                for (int p = 0; p < w; ++p)
                    M(p + w * q, col) = std::pow(sx, p) * std::pow(sy, q);
        }
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(w * w);
    rhs(0) = 1.0;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
    if (!lu.isInvertible())
        throw std::runtime_error("receiver moment system is singular");
    Vec wts = lu.solve(rhs);

    r.nodes.assign(ids.begin(), ids.end());
    r.weights = wts;
    return r;
}

inline ReceiverSet build_receivers(const CurvilinearGrid& grid,
                                   const std::vector<std::pair<double, double>>& positions,
                                   MeasurementKind kind, int order) {
    ReceiverSet rs;
    rs.kind = kind;
    for (auto [x, y] : positions) rs.receivers.push_back(build_receiver(grid, x, y, order));
    return rs;
}

inline double measure(const ForwardProblem& fp, const ReceiverSet& rs, const Receiver& r,
                      const Vec& y) {
    Vec field = r.plus_block
                    ? (rs.kind == MeasurementKind::displacement ? Vec(fp.u_plus(y))
                                                                : Vec(fp.v_plus(y)))
                    : (rs.kind == MeasurementKind::displacement ? Vec(fp.u_minus(y))
                                                                : Vec(fp.v_minus(y)));
    double out = 0.0;
    for (std::size_t k = 0; k < r.nodes.size(); ++k) out += r.weights(k) * field(r.nodes[k]);
    return out;
}

/// Per-stage record of the forward integration: RK4 stage nodes
/// c = [0, 1/2, 1/2, 1] with weights b = [1/6, 1/3, 1/3, 1/6]; row 4n+s
/// holds stage s of step n.
struct StageHistory {
    Eigen::MatrixXd v_star;       // (4 nsteps) x fault points, m/s
    Eigen::MatrixXd psi;          // (4 nsteps) x fault points
    Eigen::MatrixXd measurements; // (4 nsteps) x receivers (m or m/s)
    Eigen::MatrixXd residuals;    // (4 nsteps) x receivers
    Vec stage_times;
    double dt = 0.0;
    int nsteps = 0;

    static constexpr double stage_node(int s) {
        constexpr double c[4] = {0.0, 0.5, 0.5, 1.0};
        return c[s];
    }
    static constexpr double stage_weight(int s) {
        constexpr double b[4] = {1.0 / 6, 1.0 / 3, 1.0 / 3, 1.0 / 6};
        return b[s];
    }
    double time_weight(int row) const { return dt * stage_weight(row % 4); }
};

/// Fully discrete misfit F = 1/2 sum_k sum_j H_T,j |r_j^(k)|^2.
inline double misfit(const StageHistory& h) {
    double F = 0.0;
    for (int j = 0; j < h.residuals.rows(); ++j)
        F += 0.5 * h.time_weight(j) * h.residuals.row(j).squaredNorm();
    return F;
}

/// Generic classical RK4 driver. `f(stage_row, t_s, y_s)` is evaluated on
/// each stage approximation (row = 4n + s) and may record whatever it needs.
/// `blowup` > 0 aborts once |y|_inf exceeds blowup (instability detector).
template <class Rhs>
Vec rk4_run(Rhs&& f, Vec y, double t0, double dt, int nsteps, double blowup = 0.0) {
    if (dt <= 0.0 || nsteps <= 0) throw std::invalid_argument("bad time discretization");
    Vec k1, k2, k3, k4;
    for (int n = 0; n < nsteps; ++n) {
        const double t = t0 + n * dt;
        k1 = f(4 * n + 0, t, y);
        Vec y2 = y + 0.5 * dt * k1;
        k2 = f(4 * n + 1, t + 0.5 * dt, y2);
        Vec y3 = y + 0.5 * dt * k2;
        k3 = f(4 * n + 2, t + 0.5 * dt, y3);
        Vec y4 = y + dt * k3;
        k4 = f(4 * n + 3, t + dt, y4);
        y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (blowup > 0.0 && (!y.allFinite() || y.lpNorm<Eigen::Infinity>() > blowup))
            throw std::runtime_error("time integration unstable at t = " +
                                     std::to_string(t + dt));
    }
    return y;
}

/// Forward integration with stage recording. `data` (optional) holds
/// per-stage observed values, (4 nsteps) x receivers; missing data means
/// zero observations (residual = measurement).
inline Vec rk4_integrate(const ForwardProblem& fp, const Vec& y0, double t0, double dt,
                         int nsteps, const ReceiverSet* receivers,
                         const Eigen::MatrixXd* data, StageHistory& hist) {
    const int nf = fp.fault_points();
    const int nr = receivers ? receivers->size() : 0;
    if (data && (data->rows() < 4 * nsteps || data->cols() != nr))
        throw std::invalid_argument("data series shorter than the simulation");

    hist.dt = dt;
    hist.nsteps = nsteps;
    hist.v_star.resize(4 * nsteps, nf);
    hist.psi.resize(4 * nsteps, nf);
    hist.measurements.resize(4 * nsteps, nr);
    hist.residuals.resize(4 * nsteps, nr);
    hist.stage_times.resize(4 * nsteps);

    auto f = [&](int row, double ts, const Vec& ys) {
        StageRecord rec;
        Vec dy = fp.rhs(ts, ys, &rec);
        hist.v_star.row(row) = rec.v_star;
        hist.psi.row(row) = rec.psi;
        hist.stage_times(row) = ts;
        for (int k = 0; k < nr; ++k) {
            const double mval = measure(fp, *receivers, receivers->receivers[k], ys);
            hist.measurements(row, k) = mval;
            double r = mval - (data ? (*data)(row, k) : 0.0);
            if (receivers->window) r *= receivers->window(ts);
            hist.residuals(row, k) = r;
        }
        return dy;
    };
    const double blowup =
        fp.options().instability_factor * std::max(y0.lpNorm<Eigen::Infinity>(), 1e-6);
    return rk4_run(f, y0, t0, dt, nsteps, blowup);
}

} // namespace rsfinv
