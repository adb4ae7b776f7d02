#pragma once

#include <rsfinv/sbp1d.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace rsfinv {

/// Coarse/fine grid transfer pair. The operators are adjoint to each other
/// in the respective quadratures,
///   f2c = H_C^{-1} c2f^T H_F,
/// which makes gradient restriction from the fine fault grid to the coarse
/// parameter grid exact. Both directions reproduce constants and linears
/// when the two quadratures integrate those exactly on a common interval.
struct InterpolationPair {
    SpMat c2f;
    SpMat f2c;
    SbpNorm coarse_norm;
    SbpNorm fine_norm;

    int coarse_size() const { return static_cast<int>(f2c.rows()); }
    int fine_size() const { return static_cast<int>(c2f.rows()); }
};

namespace detail {

// Re-impose the per-row interpolation conditions (sum = 1, first moment =
// target coordinate) by an orthogonal projection of each row block.
inline void project_rows(Eigen::VectorXd& p, int fine_n, int width,
                         const std::vector<int>& start, const Vec& xc, const Vec& xf) {
    for (int i = 0; i < fine_n; ++i) {
        Eigen::MatrixXd M(2, width);
        for (int s = 0; s < width; ++s) {
            M(0, s) = 1.0;
            M(1, s) = xc(start[i] + s);
        }
        Eigen::Vector2d target(1.0, xf(i));
        Eigen::VectorXd row = p.segment(i * width, width);
        Eigen::Vector2d defect = target - M * row;
        p.segment(i * width, width) =
            row + M.transpose() * (M * M.transpose()).ldlt().solve(defect);
    }
}

} // namespace detail

/// Third-order Gregory quadrature: trapezoid rule with endpoint-corrected
/// weights (3/8, 7/6, 23/24). Positive, exact through degree 2, defined for
/// any n >= 6, which makes it usable on coarse parameter grids that are too
/// small for a wide SBP boundary closure.
inline SbpNorm gregory_norm(int n, double spacing) {
    if (n < 6) throw std::invalid_argument("Gregory norm needs at least 6 points");
    if (spacing <= 0.0) throw std::invalid_argument("grid spacing must be positive");
    SbpNorm norm;
    norm.order = 3;
    norm.weights = Vec::Constant(n, spacing);
    const double edge[3] = {3.0 / 8, 7.0 / 6, 23.0 / 24};
    for (int i = 0; i < 3; ++i) {
        norm.weights(i) = edge[i] * spacing;
        norm.weights(n - 1 - i) = edge[i] * spacing;
    }
    return norm;
}

inline InterpolationPair build_interpolation(int coarse_n, int fine_n,
                                             const SbpNorm& coarse_norm,
                                             const SbpNorm& fine_norm) {
    if (coarse_n < 2 || fine_n < coarse_n)
        throw std::invalid_argument("interpolation needs 2 <= coarse_n <= fine_n");
    if (coarse_norm.size() != coarse_n || fine_norm.size() != fine_n)
        throw std::invalid_argument("norm size does not match grid size");

    const double len_c = coarse_norm.weights.sum();
    const double len_f = fine_norm.weights.sum();
    if (std::abs(len_c - len_f) > 1e-3 * std::max(len_c, len_f))
        throw std::invalid_argument("interpolation norms cover incompatible intervals");

    // Normalized parameter coordinate shared by both grids.
    Vec xc(coarse_n), xf(fine_n);
    for (int j = 0; j < coarse_n; ++j) xc(j) = double(j) / (coarse_n - 1);
    for (int i = 0; i < fine_n; ++i) xf(i) = double(i) / (fine_n - 1);

    Eigen::VectorXd p, best_p;
    std::vector<int> start(fine_n), best_start;
    int width = std::min(4, coarse_n);
    int best_width = width;
    double best_res = std::numeric_limits<double>::max();

    for (; width <= std::min(8, coarse_n); width += 2) {
        // Support of fine row i: `width` coarse nodes around its cell.
        for (int i = 0; i < fine_n; ++i) {
            int cell = std::min(int(xf(i) * (coarse_n - 1)), coarse_n - 2);
            start[i] = std::clamp(cell - (width / 2 - 1), 0, coarse_n - width);
        }

        // Piecewise-linear initial guess.
        p = Eigen::VectorXd::Zero(fine_n * width);
        for (int i = 0; i < fine_n; ++i) {
            int cell = std::min(int(xf(i) * (coarse_n - 1)), coarse_n - 2);
            const double t = (xf(i) - xc(cell)) * (coarse_n - 1);
            p(i * width + (cell - start[i])) = 1.0 - t;
            p(i * width + (cell + 1 - start[i])) = t;
        }

        // Constraints: per-row consistency (constants, linears) and the
        // column moment conditions that make f2c consistent as well.
        const int neq = 2 * fine_n + 2 * coarse_n;
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(neq, fine_n * width);
        Eigen::VectorXd b = Eigen::VectorXd::Zero(neq);
        for (int i = 0; i < fine_n; ++i) {
            for (int s = 0; s < width; ++s) {
                A(2 * i, i * width + s) = 1.0;
                A(2 * i + 1, i * width + s) = xc(start[i] + s);
            }
            b(2 * i) = 1.0;
            b(2 * i + 1) = xf(i);
        }
        for (int i = 0; i < fine_n; ++i)
            for (int s = 0; s < width; ++s) {
                const int j = start[i] + s;
                A(2 * fine_n + 2 * j, i * width + s) = fine_norm.weights(i);
                A(2 * fine_n + 2 * j + 1, i * width + s) = fine_norm.weights(i) * xf(i);
            }
        for (int j = 0; j < coarse_n; ++j) {
            b(2 * fine_n + 2 * j) = coarse_norm.weights(j);
            b(2 * fine_n + 2 * j + 1) = coarse_norm.weights(j) * xc(j);
        }

        // Minimum-norm correction of the initial guess; if the moment
        // conditions are only approximately compatible the defect lands
        // there, and the final row projection keeps c2f exact.
        Eigen::VectorXd d = A.completeOrthogonalDecomposition().solve(b - A * p);
        p += d;
        detail::project_rows(p, fine_n, width, start, xc, xf);

        const double col_res = (A.bottomRows(2 * coarse_n) * p - b.tail(2 * coarse_n))
                                   .lpNorm<Eigen::Infinity>();
        if (col_res < best_res) {
            best_res = col_res;
            best_p = p;
            best_start = start;
            best_width = width;
        }
        if (col_res < 1e-12 * len_c) break;
    }
    p = best_p;
    start = best_start;
    width = best_width;

    InterpolationPair pair;
    pair.coarse_norm = coarse_norm;
    pair.fine_norm = fine_norm;

    std::vector<Eigen::Triplet<double>> tc, tf;
    for (int i = 0; i < fine_n; ++i)
        for (int s = 0; s < width; ++s) {
            const double v = p(i * width + s);
            if (v == 0.0) continue;
            const int j = start[i] + s;
            tc.emplace_back(i, j, v);
            tf.emplace_back(j, i, v * fine_norm.weights(i) / coarse_norm.weights(j));
        }
    pair.c2f.resize(fine_n, coarse_n);
    pair.c2f.setFromTriplets(tc.begin(), tc.end());
    pair.f2c.resize(coarse_n, fine_n);
    pair.f2c.setFromTriplets(tf.begin(), tf.end());
    return pair;
}

/// Trivial pair for m_p = m runs: both operators are the identity.
inline InterpolationPair identity_interpolation(const SbpNorm& norm) {
    InterpolationPair pair;
    pair.coarse_norm = norm;
    pair.fine_norm = norm;
    SpMat id(norm.size(), norm.size());
    id.setIdentity();
    pair.c2f = id;
    pair.f2c = id;
    return pair;
}

} // namespace rsfinv
