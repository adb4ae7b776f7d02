#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <stdexcept>
#include <vector>

namespace rsfinv {

using Vec = Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;

/// Diagonal SBP quadrature on a uniform 1D grid.
struct SbpNorm {
    Vec weights;   // quadrature weight per grid point
    int order = 2; // interior accuracy order of the operator family

    int size() const { return static_cast<int>(weights.size()); }

    double dot(const Vec& u, const Vec& v) const {
        return (u.array() * weights.array() * v.array()).sum();
    }
};

/// 1D SBP operator set: quadrature H, first derivative D1 and the
/// boundary-compatible variable-coefficient second derivative
///   D2(mu) = H^{-1} (-D1^T H mu D1 + e_R mu_R s_R^T - e_L mu_L s_L^T),
/// where s_L, s_R are the first/last rows of D1. The construction
/// satisfies the SBP identity of the Laplacian with zero remainder.
class SbpOperatorSet1D {
public:
    SbpOperatorSet1D(int n, double spacing, int order);

    int size() const { return n_; }
    double spacing() const { return h_; }
    int order() const { return order_; }
    int closure_rows() const { return closure_; }
    const SbpNorm& norm() const { return norm_; }
    const SpMat& d1() const { return d1_; }

    /// Second-derivative operator for a strictly positive coefficient field.
    SpMat build_d2_variable(const Vec& mu) const;

    /// d/dx stencil applied at the left/right boundary row (traction rows).
    Vec boundary_derivative_row(bool right) const;

private:
    void build_closure();

    int n_;
    double h_;
    int order_;
    int closure_;
    SbpNorm norm_;
    SpMat d1_;
};

namespace detail {

inline std::vector<double> interior_d1_stencil(int order) {
    switch (order) {
        case 2: return {-0.5, 0.0, 0.5};
        case 4: return {1.0 / 12, -2.0 / 3, 0.0, 2.0 / 3, -1.0 / 12};
        case 6: return {-1.0 / 60, 3.0 / 20, -3.0 / 4, 0.0, 3.0 / 4, -3.0 / 20, 1.0 / 60};
        default: throw std::invalid_argument("unsupported SBP order (use 2, 4 or 6)");
    }
}

inline std::vector<double> boundary_norm_weights(int order) {
    switch (order) {
        case 2: return {0.5};
        case 4: return {17.0 / 48, 59.0 / 48, 43.0 / 48, 49.0 / 48};
        case 6:
            return {13649.0 / 43200, 12013.0 / 8640, 2711.0 / 4320,
                    5359.0 / 4320,   7877.0 / 8640,  43801.0 / 43200};
        default: throw std::invalid_argument("unsupported SBP order (use 2, 4 or 6)");
    }
}

/// Boundary closure block of Q = H D1 (unit spacing), solved from the
/// antisymmetry and accuracy conditions for the given diagonal norm.
/// Returns an r x w dense block, r = closure rows, w = r + order/2.
inline Eigen::MatrixXd d1_closure_block(int order) {
    const auto sigma = boundary_norm_weights(order);
    const auto c = interior_d1_stencil(order);
    const int p = order / 2;
    const int r = static_cast<int>(sigma.size());
    const int w = r + p;

    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(r, w);
    Q(0, 0) = -0.5;
    // Entries coupling closure rows to interior rows, fixed by antisymmetry
    // against the interior stencil: Q(j, j+k) = c[k+p] for interior row j.
    for (int i = 0; i < r; ++i) {
        for (int j = r; j < w; ++j) {
            if (j - i <= p) Q(i, j) = -c[(i - j) + p];
        }
    }

    if (order == 2) return Q; // [-1/2, 1/2]

    // Remaining unknowns: strict upper triangle of the r x r corner.
    const int nu = r * (r - 1) / 2;
    auto idx = [&](int i, int j) {
        // index of unknown q_{ij}, i < j < r
        int k = 0;
        for (int a = 0; a < i; ++a) k += r - 1 - a;
        return k + (j - i - 1);
    };

    // Accuracy: sum_j Q(i,j) j^k = sigma_i * k * i^(k-1), k = 0..p.
    const int neq = r * (p + 1);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(neq, nu);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(neq);
    int row = 0;
    for (int i = 0; i < r; ++i) {
        for (int k = 0; k <= p; ++k, ++row) {
            double rhs = (k == 0) ? 0.0 : sigma[i] * k * std::pow(double(i), k - 1);
            // subtract contributions of fixed entries
            for (int j = 0; j < w; ++j) {
                const double xj = std::pow(double(j), k);
                if (j < r && j != i) {
                    if (i < j)
                        A(row, idx(i, j)) += xj;
                    else
                        A(row, idx(j, i)) -= xj; // q_{ij} = -q_{ji}
                } else {
                    rhs -= Q(i, j) * xj;
                }
            }
            b(row) = rhs;
        }
    }
    // solve in extended precision; closure entries feed 1/h-scaled stencils
    using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    using VecL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
    MatL Al = A.cast<long double>();
    VecL bl = b.cast<long double>();
    VecL ql = (Al.transpose() * Al).ldlt().solve(Al.transpose() * bl);
    for (int it = 0; it < 3; ++it)
        ql += (Al.transpose() * Al).ldlt().solve(Al.transpose() * (bl - Al * ql));
    Eigen::VectorXd q = ql.cast<double>();
    if ((A * q - b).lpNorm<Eigen::Infinity>() > 1e-11)
        throw std::runtime_error("SBP D1 closure equations inconsistent");

    for (int i = 0; i < r; ++i)
        for (int j = i + 1; j < r; ++j) {
            Q(i, j) = q(idx(i, j));
            Q(j, i) = -q(idx(i, j));
        }
    return Q;
}

} // namespace detail

inline SbpOperatorSet1D::SbpOperatorSet1D(int n, double spacing, int order)
    : n_(n), h_(spacing), order_(order) {
    if (order != 2 && order != 4 && order != 6)
        throw std::invalid_argument("unsupported SBP order (use 2, 4 or 6)");
    if (spacing <= 0.0) throw std::invalid_argument("grid spacing must be positive");
    const auto sigma = detail::boundary_norm_weights(order);
    closure_ = static_cast<int>(sigma.size());
    const int p = order / 2;
    if (n < 2 * closure_ + 2 * p)
        throw std::invalid_argument("grid too small for SBP boundary closure");

    norm_.order = order;
    norm_.weights = Vec::Constant(n, h_);
    for (int i = 0; i < closure_; ++i) {
        norm_.weights(i) = sigma[i] * h_;
        norm_.weights(n - 1 - i) = sigma[i] * h_;
    }

    build_closure();
}

inline void SbpOperatorSet1D::build_closure() {
    const auto c = detail::interior_d1_stencil(order_);
    const int p = order_ / 2;
    const Eigen::MatrixXd Q = detail::d1_closure_block(order_);
    const int r = closure_;
    const int w = static_cast<int>(Q.cols());

    std::vector<Eigen::Triplet<double>> trips;
    // closure rows, D1 = H^{-1} Q; H(unit) = sigma
    const auto sigma = detail::boundary_norm_weights(order_);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
            if (Q(i, j) != 0.0) {
                const double v = Q(i, j) / (sigma[i] * h_);
                trips.emplace_back(i, j, v);
                trips.emplace_back(n_ - 1 - i, n_ - 1 - j, -v);
            }
    for (int i = r; i < n_ - r; ++i)
        for (int k = -p; k <= p; ++k)
            if (c[k + p] != 0.0) trips.emplace_back(i, i + k, c[k + p] / h_);

    d1_.resize(n_, n_);
    d1_.setFromTriplets(trips.begin(), trips.end());
}

inline Vec SbpOperatorSet1D::boundary_derivative_row(bool right) const {
    Vec row = Vec::Zero(n_);
    const Eigen::MatrixXd Q = detail::d1_closure_block(order_);
    const auto sigma = detail::boundary_norm_weights(order_);
    for (int j = 0; j < Q.cols(); ++j) {
        const double v = Q(0, j) / (sigma[0] * h_);
        if (right)
            row(n_ - 1 - j) = -v;
        else
            row(j) = v;
    }
    return row;
}

inline SpMat SbpOperatorSet1D::build_d2_variable(const Vec& mu) const {
    if (mu.size() != n_) throw std::invalid_argument("coefficient size mismatch");
    if ((mu.array() <= 0.0).any())
        throw std::invalid_argument("second-derivative coefficient must be positive");

    SpMat Hmu(n_, n_);
    std::vector<Eigen::Triplet<double>> dt;
    for (int i = 0; i < n_; ++i) dt.emplace_back(i, i, norm_.weights(i) * mu(i));
    Hmu.setFromTriplets(dt.begin(), dt.end());

    SpMat A = d1_.transpose() * Hmu * d1_; // stiffness form, symmetric PSD
    SpMat B(n_, n_);
    std::vector<Eigen::Triplet<double>> bt;
    // boundary traction terms: mu * du/dx at the first/last row of D1
    for (int k = 0; k < d1_.outerSize(); ++k)
        for (SpMat::InnerIterator it(d1_, k); it; ++it) {
            if (it.row() == 0) bt.emplace_back(0, it.col(), -mu(0) * it.value());
            if (it.row() == n_ - 1) bt.emplace_back(n_ - 1, it.col(), mu(n_ - 1) * it.value());
        }
    B.setFromTriplets(bt.begin(), bt.end());

    SpMat M = B - A;
    SpMat Hinv(n_, n_);
    std::vector<Eigen::Triplet<double>> ht;
    for (int i = 0; i < n_; ++i) ht.emplace_back(i, i, 1.0 / norm_.weights(i));
    Hinv.setFromTriplets(ht.begin(), ht.end());
    return Hinv * M;
}

} // namespace rsfinv
