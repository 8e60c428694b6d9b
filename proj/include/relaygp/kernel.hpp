#pragma once

#include <cmath>
#include <stdexcept>

#include "relaygp/linalg.hpp"

namespace relaygp {

// Squared pairwise distances |r_i - r_j|^2 over a set of scalar inputs.
// Symmetric, zero diagonal, entries >= 0.
struct SqDistMatrix {
    Mat entries;
};

inline SqDistMatrix sq_dist_matrix(const Vec& inputs) {
    const Eigen::Index n = inputs.size();
    SqDistMatrix sq;
    sq.entries.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        sq.entries(i, i) = 0.0;
        for (Eigen::Index j = 0; j < i; ++j) {
            const double delta = inputs(i) - inputs(j);
            sq.entries(i, j) = delta * delta;
            sq.entries(j, i) = sq.entries(i, j);
        }
    }
    return sq;
}

// Squared-exponential kernel exp(-|x - y|^2 / (2 d^2)).
inline double se_kernel(double x, double y, double d) {
    if (!(d > 0.0)) throw std::invalid_argument("se_kernel: length-scale d must be positive");
    const double delta = x - y;
    return std::exp(-delta * delta / (2.0 * d * d));
}

// Kernel Gram matrix over a set of inputs together with the maintained
// inverse of (K + jitter*I). `jitter` records the regularization that the
// factorization actually needed (it may exceed the requested value after
// escalation).
struct GramState {
    Vec inputs;
    Mat K;       // unit diagonal, no jitter included
    Mat K_inv;   // inverse of K + jitter*I
    double jitter = 0.0;
    double d = 1.0;
};

inline Mat se_gram(const Vec& inputs, double d) {
    if (!(d > 0.0)) throw std::invalid_argument("se_gram: length-scale d must be positive");
    const Eigen::Index n = inputs.size();
    const double inv2d2 = 1.0 / (2.0 * d * d);
    Mat K(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        K(i, i) = 1.0;
        for (Eigen::Index j = 0; j < i; ++j) {
            const double delta = inputs(i) - inputs(j);
            K(i, j) = std::exp(-delta * delta * inv2d2);
            K(j, i) = K(i, j);
        }
    }
    return K;
}

inline GramState gram_matrix(const Vec& inputs, double d, double jitter) {
    if (inputs.size() < 1) throw std::invalid_argument("gram_matrix: need at least one input");
    GramState state;
    state.inputs = inputs;
    state.d = d;
    state.K = se_gram(inputs, d);
    SpdChol f = spd_factor(state.K, jitter);
    state.K_inv = f.inverse();
    state.jitter = f.jitter;
    return state;
}

// Analytic derivative of the Gram matrix with respect to the length-scale:
// dK/dd = (1/d^3) * Sq (.) K, elementwise. (Differentiating
// exp(-delta^2/(2 d^2)) gives delta^2/d^3 times the kernel value.)
inline Mat gram_derivative(const GramState& state, const SqDistMatrix& sq) {
    if (sq.entries.rows() != state.K.rows() || sq.entries.cols() != state.K.cols())
        throw std::invalid_argument("gram_derivative: dimension mismatch between state and sq");
    const double inv_d3 = 1.0 / (state.d * state.d * state.d);
    return inv_d3 * sq.entries.cwiseProduct(state.K);
}

// Inverse of the matrix with row/column 1 deleted, computed from the full
// inverse alone: Kbar^-1 = [K^-1]_22 - (1/[K^-1]_11) [K^-1]_21 [K^-1]_21^T.
inline Mat downsize_inverse(const Mat& K_inv, double pivot_tol = 1e-12) {
    const Eigen::Index n = K_inv.rows();
    if (n < 2) throw std::invalid_argument("downsize_inverse: need n >= 2");
    const double pivot = K_inv(0, 0);
    if (!(pivot > pivot_tol))
        throw degeneracy_error("downsize_inverse: leading inverse entry below tolerance");
    const Vec col = K_inv.block(1, 0, n - 1, 1);
    Mat result = K_inv.block(1, 1, n - 1, n - 1);
    result.noalias() -= (1.0 / pivot) * (col * col.transpose());
    return result;
}

// Inverse of the bordered matrix [[Kbar, k], [k^T, k_self]] from Kbar^-1 via
// the Schur complement gamma = k_self - k^T Kbar^-1 k. O(S^2).
inline Mat upsize_inverse(const Mat& Kbar_inv, const Vec& k_vec, double k_self,
                          double schur_tol = 1e-12) {
    const Eigen::Index m = Kbar_inv.rows();
    if (k_vec.size() != m) throw std::invalid_argument("upsize_inverse: border length mismatch");
    const Vec u = Kbar_inv * k_vec;
    const double gamma = k_self - k_vec.dot(u);
    if (!(gamma > schur_tol))
        throw degeneracy_error("upsize_inverse: non-positive Schur complement");
    Mat result(m + 1, m + 1);
    const double inv_gamma = 1.0 / gamma;
    result.topLeftCorner(m, m) = Kbar_inv;
    result.topLeftCorner(m, m).noalias() += inv_gamma * (u * u.transpose());
    result.block(0, m, m, 1) = -inv_gamma * u;
    result.block(m, 0, 1, m) = result.block(0, m, m, 1).transpose();
    result(m, m) = inv_gamma;
    return result;
}

}  // namespace relaygp
