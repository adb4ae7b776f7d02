#pragma once

#include <rsfinv/geometry.hpp>
#include <rsfinv/sbp1d.hpp>

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace rsfinv {

enum class EdgeSide { west = 0, east = 1, south = 2, north = 3 };

/// One boundary edge of a block: node ids (flattened), physical edge
/// quadrature (includes the arc-length density s), the outward traction
/// operator in physical units (stress per unit physical arc length) and s
/// itself per edge node.
struct EdgeOperators {
    std::vector<int> nodes;
    Vec w_phys;
    Vec s;
    SpMat traction; // n_edge x N, outward conormal mu du/dn
};

/// Curvilinear SBP operators on one grid block. Nodes are flattened as
/// id = i + m*j (i along the fault direction). The metric entering the
/// operators uses the discrete xi-derivative of the coordinates so that
/// the mixed-derivative commutation, and with it the freestream identity,
/// holds to round-off.
struct BlockOperators {
    int m = 0, n = 0, N = 0, order = 2;
    SpMat d_xi, d_eta; // first derivatives on the flattened block
    Vec h_ref;         // reference quadrature H_xi x H_eta
    Vec h_phys;        // physical volume quadrature h_ref * J
    Vec jac;
    Vec a11, a12, a22; // contravariant metric combos, flattened
    SpMat stiffness;   // A(mu), symmetric positive semi-definite
    SpMat d2;          // D_II(mu) = H_phys^{-1} (sum_e R^T W T - A)
    std::array<EdgeOperators, 4> edge;

    int id(int i, int j) const { return i + m * j; }
    const EdgeOperators& side(EdgeSide s) const { return edge[static_cast<int>(s)]; }
};

namespace detail {

inline SpMat kron_identity_left(int reps, const SpMat& a) {
    // I_reps (x) a
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < a.outerSize(); ++k)
        for (SpMat::InnerIterator it(a, k); it; ++it)
            for (int r = 0; r < reps; ++r)
                t.emplace_back(it.row() + r * a.rows(), it.col() + r * a.cols(), it.value());
    SpMat out(a.rows() * reps, a.cols() * reps);
    out.setFromTriplets(t.begin(), t.end());
    return out;
}

inline SpMat kron_identity_right(const SpMat& a, int reps) {
    // a (x) I_reps
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < a.outerSize(); ++k)
        for (SpMat::InnerIterator it(a, k); it; ++it)
            for (int r = 0; r < reps; ++r)
                t.emplace_back(it.row() * reps + r, it.col() * reps + r, it.value());
    SpMat out(a.rows() * reps, a.cols() * reps);
    out.setFromTriplets(t.begin(), t.end());
    return out;
}

inline SpMat diag_sparse(const Vec& d) {
    SpMat out(d.size(), d.size());
    std::vector<Eigen::Triplet<double>> t;
    for (int i = 0; i < d.size(); ++i) t.emplace_back(i, i, d(i));
    out.setFromTriplets(t.begin(), t.end());
    return out;
}

} // namespace detail

inline BlockOperators build_block_operators(const GridBlock& gb,
                                            const Eigen::MatrixXd& mu, int order) {
    if (mu.rows() != gb.m || mu.cols() != gb.n)
        throw std::invalid_argument("shear modulus grid does not match the block");
    if ((mu.array() <= 0.0).any())
        throw std::invalid_argument("shear modulus must be positive");

    BlockOperators b;
    b.m = gb.m;
    b.n = gb.n;
    b.N = gb.m * gb.n;
    b.order = order;

    SbpOperatorSet1D ox(gb.m, gb.dxi, order);
    SbpOperatorSet1D oe(gb.n, gb.deta, order);
    b.d_xi = detail::kron_identity_left(gb.n, ox.d1());
    b.d_eta = detail::kron_identity_right(oe.d1(), gb.m);

    // discrete metric: y_xi from D1, y_eta is exact for the linear blend
    Vec yflat(b.N), muflat(b.N);
    for (int j = 0; j < gb.n; ++j)
        for (int i = 0; i < gb.m; ++i) {
            yflat(b.id(i, j)) = gb.y(i, j);
            muflat(b.id(i, j)) = mu(i, j);
        }
    Vec yxi = b.d_xi * yflat;
    Vec yeta = b.d_eta * yflat;

    b.jac.resize(b.N);
    b.a11.resize(b.N);
    b.a12.resize(b.N);
    b.a22.resize(b.N);
    b.h_ref.resize(b.N);
    for (int j = 0; j < gb.n; ++j)
        for (int i = 0; i < gb.m; ++i) {
            const int id = b.id(i, j);
            const double ye = yeta(id);
            if (ye <= 0.0) throw std::runtime_error("grid mapping folds");
            b.jac(id) = ye;
            b.a11(id) = ye;
            b.a12(id) = -yxi(id);
            b.a22(id) = (1.0 + yxi(id) * yxi(id)) / ye;
            b.h_ref(id) = ox.norm().weights(i) * oe.norm().weights(j);
        }
    b.h_phys = b.h_ref.array() * b.jac.array();

    // stiffness A = sum_kl D_k^T H (mu a_kl) D_l
    {
        Vec w11 = b.h_ref.array() * muflat.array() * b.a11.array();
        Vec w12 = b.h_ref.array() * muflat.array() * b.a12.array();
        Vec w22 = b.h_ref.array() * muflat.array() * b.a22.array();
        SpMat A = b.d_xi.transpose() * detail::diag_sparse(w11) * b.d_xi;
        SpMat C = b.d_xi.transpose() * detail::diag_sparse(w12) * b.d_eta;
        A += SpMat(C + SpMat(C.transpose()));
        A += SpMat(b.d_eta.transpose() * detail::diag_sparse(w22) * b.d_eta);
        b.stiffness = A;
    }

    // edges: nodes, physical quadrature, outward physical traction
    auto build_edge = [&](EdgeSide sd) {
        EdgeOperators e;
        const bool xi_edge = (sd == EdgeSide::west || sd == EdgeSide::east);
        const int ne = xi_edge ? gb.n : gb.m;
        e.nodes.resize(ne);
        e.w_phys.resize(ne);
        e.s.resize(ne);
        const double sign = (sd == EdgeSide::east || sd == EdgeSide::north) ? 1.0 : -1.0;

        for (int k = 0; k < ne; ++k) {
            int id;
            if (xi_edge)
                id = b.id(sd == EdgeSide::west ? 0 : gb.m - 1, k);
            else
                id = b.id(k, sd == EdgeSide::south ? 0 : gb.n - 1);
            e.nodes[k] = id;
            // arc length density s = |dX/dtangent| along the edge
            e.s(k) = xi_edge ? b.jac(id) : std::sqrt(1.0 + b.a12(id) * b.a12(id));
            e.w_phys(k) = (xi_edge ? oe.norm().weights(k) : ox.norm().weights(k)) * e.s(k);
        }
        // T = sign * mu/s * (c1 D_xi + c2 D_eta) restricted to edge rows
        std::vector<Eigen::Triplet<double>> t;
        SpMat dxiT = b.d_xi.transpose(); // column-major access to rows of d_xi
        SpMat detaT = b.d_eta.transpose();
        for (int k = 0; k < ne; ++k) {
            const int id = e.nodes[k];
            const double c1 = xi_edge ? b.a11(id) : b.a12(id);
            const double c2 = xi_edge ? b.a12(id) : b.a22(id);
            const double f = sign * muflat(id) / e.s(k);
            for (SpMat::InnerIterator it(dxiT, id); it; ++it)
                t.emplace_back(k, it.row(), f * c1 * it.value());
            for (SpMat::InnerIterator it(detaT, id); it; ++it)
                t.emplace_back(k, it.row(), f * c2 * it.value());
        }
        e.traction.resize(ne, b.N);
        e.traction.setFromTriplets(t.begin(), t.end());
        return e;
    };
    for (EdgeSide sd : {EdgeSide::west, EdgeSide::east, EdgeSide::south, EdgeSide::north})
        b.edge[static_cast<int>(sd)] = build_edge(sd);

    // D_II = H_phys^{-1} (sum_e R^T W T - A)
    {
        std::vector<Eigen::Triplet<double>> t;
        for (const auto& e : b.edge) {
            SpMat bt = e.traction;
            for (int k = 0; k < bt.outerSize(); ++k)
                for (SpMat::InnerIterator it(bt, k); it; ++it)
                    t.emplace_back(e.nodes[it.row()], it.col(),
                                   e.w_phys(it.row()) * it.value());
        }
        SpMat B(b.N, b.N);
        B.setFromTriplets(t.begin(), t.end());
        SpMat M = B - b.stiffness;
        b.d2 = detail::diag_sparse(b.h_phys.cwiseInverse()) * M;
    }
    return b;
}

} // namespace rsfinv
