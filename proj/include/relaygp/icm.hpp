#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "relaygp/gp.hpp"

namespace relaygp {

struct IcmConfig {
    int J = 50;             // iteration cap, always honored
    double tol = 1e-8;      // absolute log-posterior improvement; <= 0 disables early stop
    double jitter0 = kJitterFloor;
};

struct IcmTraceRow {
    double theta1;
    double theta2;
    double d;
    double log_post;
};

// Joint MAP estimate from cycling the three conditional-mode updates.
// The trace log-posterior is non-decreasing across iterations (1e-9 slack).
struct IcmResult {
    Vec f_map;
    HyperParams hp;
    std::vector<IcmTraceRow> trace;
    int iterations_run = 0;
    bool converged = false;
    double final_jitter = 0.0;
};

// Conditional mode of f | theta, d: M = (K^-1 + sigma_v^-2 I)^-1 (K^-1 M0 + sigma_v^-2 y),
// evaluated in the solver-friendly equivalent form
//   M = (K + (j + sigma_v^2) I)^-1 (sigma_v^2 M0 + (K + j I) y),
// which stays exact in the sigma_v^2 -> 0 limit.
inline Vec update_f(const TrainingSet& train, const HyperParams& hp, const HyperPriors& priors,
                    const GramState& gram) {
    const Eigen::Index n = train.inputs.size();
    if (gram.K.rows() != n) throw std::invalid_argument("update_f: gram/training size mismatch");
    const double sv2 = priors.noise_var_v;
    Mat A = gram.K;
    A.diagonal().array() += gram.jitter + sv2;
    SpdChol fac = spd_factor(A, 0.0);
    Vec rhs = gram.K * train.targets + gram.jitter * train.targets;
    if (sv2 > 0.0) rhs.noalias() += sv2 * mean_vector(hp, train.inputs);
    return fac.solve(rhs);
}

// Conditional mode of theta | f, d: the 2x2 SPD system
//   (X^T K^-1 X + Sigma_theta^-1) theta = X^T K^-1 f,  X = [1, r].
inline std::pair<double, double> update_theta(const Vec& f, const GramState& gram,
                                              const Vec& inputs, const HyperPriors& priors) {
    const Eigen::Index n = inputs.size();
    if (f.size() != n || gram.K_inv.rows() != n)
        throw std::invalid_argument("update_theta: dimension mismatch");
    Mat X(n, 2);
    X.col(0).setOnes();
    X.col(1) = inputs;
    const Mat B = gram.K_inv * X;
    Eigen::Matrix2d A = X.transpose() * B;
    A(0, 0) += 1.0 / priors.sigma_theta(0);
    A(1, 1) += 1.0 / priors.sigma_theta(1);
    const Eigen::Vector2d b = B.transpose() * f;
    const double det = A(0, 0) * A(1, 1) - A(0, 1) * A(1, 0);
    if (!(std::abs(det) > 1e-300) || !std::isfinite(det))
        throw degeneracy_error("update_theta: singular 2x2 system");
    const double t1 = (A(1, 1) * b(0) - A(0, 1) * b(1)) / det;
    const double t2 = (A(0, 0) * b(1) - A(1, 0) * b(0)) / det;
    if (!std::isfinite(t1) || !std::isfinite(t2))
        throw degeneracy_error("update_theta: non-finite solution");
    return {t1, t2};
}

namespace detail {

// Maximizes phi over [lo, hi]: coarse uniform grid, then golden-section
// refinement inside the best grid cell. Returns the best point actually
// evaluated, so the result is never worse than any grid point.
template <class F>
std::pair<double, double> grid_golden_max(F&& phi, double lo, double hi, int grid_n,
                                          double width_tol) {
    double best_x = std::numeric_limits<double>::quiet_NaN();
    double best_val = -std::numeric_limits<double>::infinity();
    auto consider = [&](double x) {
        const double v = phi(x);
        if (v > best_val) {
            best_val = v;
            best_x = x;
        }
        return v;
    };

    int best_idx = -1;
    const double step = (hi - lo) / (grid_n - 1);
    for (int i = 0; i < grid_n; ++i) {
        const double x = lo + i * step;
        const double v = phi(x);
        if (v > best_val) {
            best_val = v;
            best_x = x;
            best_idx = i;
        }
    }
    if (best_idx < 0) return {best_x, best_val};

    double a = lo + std::max(0, best_idx - 1) * step;
    double b = lo + std::min(grid_n - 1, best_idx + 1) * step;
    constexpr double rho = 0.3819660112501051;  // 2 - golden ratio
    double x1 = a + rho * (b - a);
    double x2 = b - rho * (b - a);
    double f1 = consider(x1);
    double f2 = consider(x2);
    while (b - a > width_tol) {
        if (f1 > f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + rho * (b - a);
            f1 = consider(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - rho * (b - a);
            f2 = consider(x2);
        }
    }
    return {best_x, best_val};
}

inline constexpr int kDGridPoints = 200;
inline constexpr double kDGridMargin = 1e-3;
inline constexpr double kDGoldenWidth = 1e-6;

}  // namespace detail

// Conditional mode of d | f, theta: argmax over (d_lo, d_hi) of
//   -1/2 log|K(d) + j I| - 1/2 (f - mu)^T (K(d) + j I)^-1 (f - mu),
// by 200-point grid then golden-section refinement. The incumbent hp.d is
// kept as a candidate so coordinate ascent cannot regress.
inline double update_d(const Vec& f, const HyperParams& hp, const Vec& inputs,
                       const SqDistMatrix& sq, const HyperPriors& priors,
                       double jitter = kJitterFloor) {
    if (sq.entries.rows() != inputs.size())
        throw std::invalid_argument("update_d: sq/input size mismatch");
    if (!(priors.d_lo < priors.d_hi)) throw std::invalid_argument("update_d: invalid d bounds");
    const Vec v = f - mean_vector(hp, inputs);
    auto phi = [&](double d) -> double {
        Mat K = se_gram(inputs, d);
        try {
            SpdChol fac = spd_factor(K, jitter, /*escalate=*/false);
            return -0.5 * (fac.log_det() + v.dot(fac.solve(v)));
        } catch (const singularity_error&) {
            return -std::numeric_limits<double>::infinity();
        }
    };
    const double lo = priors.d_lo + detail::kDGridMargin;
    const double hi = priors.d_hi - detail::kDGridMargin;
    auto [best_x, best_val] =
        detail::grid_golden_max(phi, lo, hi, detail::kDGridPoints, detail::kDGoldenWidth);
    if (hp.d > priors.d_lo && hp.d < priors.d_hi) {
        const double inc = phi(hp.d);
        if (inc > best_val) {
            best_val = inc;
            best_x = hp.d;
        }
    }
    if (!std::isfinite(best_val))
        throw degeneracy_error("update_d: objective not finite anywhere on the grid");
    return best_x;
}

namespace detail {

// Exact-duplicate grouping of training inputs. With Z the n x m assignment
// matrix (Z_ik = 1 iff input i belongs to group k) and C = Z^T Z the counts,
// every ICM quantity reduces to m x m algebra through the push-through
// identities
//   (Z Ktil Z^T + a I)^-1 Z = Z (a I + Ktil C)^-1,
//   Z^T (Z Ktil Z^T + a I)^-1 = (a I + C Ktil)^-1 Z^T,
// with the symmetric core S(a) = a I + C^1/2 Ktil C^1/2 carrying the
// factorizations. The iterate keeps the form f = Z q + beta * y, which the
// f-update preserves exactly, so no n x n matrix is ever formed.
struct DedupView {
    bool active = false;
    Eigen::Index n = 0;
    Eigen::Index m = 0;
    Vec u;                           // unique inputs, ascending
    Vec c;                           // group sizes
    Vec ybar;                        // group target means
    std::vector<Eigen::Index> map;   // original index -> group
    double ssw = 0.0;                // || y - Z ybar ||^2
    double y_sqnorm = 0.0;
};

inline DedupView make_dedup(const Vec& inputs, const Vec& targets) {
    DedupView dd;
    dd.n = inputs.size();
    std::vector<Eigen::Index> order(dd.n);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::sort(order.begin(), order.end(),
              [&](Eigen::Index a, Eigen::Index b) { return inputs(a) < inputs(b); });
    dd.map.assign(dd.n, 0);
    std::vector<double> uniq, sums, counts;
    for (Eigen::Index pos = 0; pos < dd.n; ++pos) {
        const Eigen::Index i = order[pos];
        if (uniq.empty() || inputs(i) != uniq.back()) {
            uniq.push_back(inputs(i));
            sums.push_back(0.0);
            counts.push_back(0.0);
        }
        dd.map[i] = static_cast<Eigen::Index>(uniq.size()) - 1;
        sums.back() += targets(i);
        counts.back() += 1.0;
    }
    dd.m = static_cast<Eigen::Index>(uniq.size());
    dd.u = Eigen::Map<const Vec>(uniq.data(), dd.m);
    dd.c = Eigen::Map<const Vec>(counts.data(), dd.m);
    dd.ybar.resize(dd.m);
    for (Eigen::Index k = 0; k < dd.m; ++k) dd.ybar(k) = sums[k] / counts[k];
    dd.y_sqnorm = targets.squaredNorm();
    double ssw = 0.0;
    for (Eigen::Index i = 0; i < dd.n; ++i) {
        const double r = targets(i) - dd.ybar(dd.map[i]);
        ssw += r * r;
    }
    dd.ssw = ssw;
    dd.active = (2 * dd.m <= dd.n);
    return dd;
}

// Compressed iterate representation f = Z q + beta y.
struct CompressedIterate {
    Vec q;
    double beta = 0.0;
};

struct CompressedCore {
    Mat Ktil;      // kernel gram on unique inputs (no jitter)
    SpdChol S;     // factor of j I + C^1/2 Ktil C^1/2
    double d = 0.0;
    double jitter = 0.0;
};

inline CompressedCore compressed_core(const DedupView& dd, double d, double jitter,
                                      bool escalate) {
    CompressedCore core;
    core.d = d;
    core.Ktil = se_gram(dd.u, d);
    const Vec csq = dd.c.cwiseSqrt();
    Mat Sm = csq.asDiagonal() * core.Ktil * csq.asDiagonal();
    core.S = spd_factor(Sm, std::max(jitter, 1e-300), escalate);
    core.jitter = core.S.jitter;
    return core;
}

// W x = C^1/2 S^-1 C^1/2 x  ==  Z^T (K + j I)^-1 Z x.
inline Vec compressed_w_apply(const DedupView& dd, const CompressedCore& core, const Vec& x) {
    const Vec csq = dd.c.cwiseSqrt();
    const Vec scaled = csq.cwiseProduct(x);
    return csq.cwiseProduct(core.S.solve(scaled));
}

inline double compressed_log_post(const DedupView& dd, const CompressedCore& core,
                                  const CompressedIterate& it, const HyperParams& hp,
                                  const HyperPriors& priors) {
    if (!(hp.d > priors.d_lo && hp.d < priors.d_hi))
        return -std::numeric_limits<double>::infinity();
    const double sv2 = priors.noise_var_v;
    const double j = core.jitter;
    const Vec fbar = it.q + it.beta * dd.ybar;

    // y - f = (1 - beta) y - Z q, so the data misfit needs only group sums.
    const double one_minus_b = 1.0 - it.beta;
    const Vec cy = dd.c.cwiseProduct(dd.ybar);
    const double resid_sq = one_minus_b * one_minus_b * dd.y_sqnorm -
                            2.0 * one_minus_b * it.q.dot(cy) +
                            it.q.dot(dd.c.cwiseProduct(it.q));
    const double lik =
        log_normal_quad(resid_sq / sv2, static_cast<double>(dd.n) * std::log(sv2), dd.n);

    const Vec mu = (hp.theta1 + hp.theta2 * dd.u.array()).matrix();
    const Vec vbar = fbar - mu;
    const double quad =
        vbar.dot(compressed_w_apply(dd, core, vbar)) + it.beta * it.beta * dd.ssw / j;
    const double logdet =
        static_cast<double>(dd.n - dd.m) * std::log(j) + core.S.log_det();
    const double prior_f = log_normal_quad(quad, logdet, dd.n);

    const double th_quad = hp.theta1 * hp.theta1 / priors.sigma_theta(0) +
                           hp.theta2 * hp.theta2 / priors.sigma_theta(1);
    const double th_logdet = std::log(priors.sigma_theta(0)) + std::log(priors.sigma_theta(1));
    const double prior_th = log_normal_quad(th_quad, th_logdet, 2);

    return lik + prior_f + prior_th - std::log(priors.d_hi - priors.d_lo);
}

}  // namespace detail

// Full ICM loop: update_f -> update_theta -> update_d per iteration, Gram
// state rebuilt whenever d moves, trace recorded every iteration. When the
// training inputs contain exact duplicates (constellation-induced), the
// mathematically identical compressed engine above replaces the dense
// updates; results agree to solver roundoff.
inline IcmResult run_icm(const TrainingSet& train, const HyperPriors& priors,
                         const HyperParams& init = HyperParams{}, int J = 50, double tol = 1e-8,
                         double jitter0 = kJitterFloor);

namespace detail {

inline IcmResult run_icm_dense(const TrainingSet& train, const HyperPriors& priors,
                               const HyperParams& init, int J, double tol, double jitter0) {
    IcmResult res;
    const SqDistMatrix sq = sq_dist_matrix(train.inputs);
    GramState gram = gram_matrix(train.inputs, init.d, jitter0);
    double jit = gram.jitter;
    HyperParams hp = init;
    Vec f = train.targets;
    double lp_prev = log_joint_posterior(f, hp, train, priors, jit);
    for (int iter = 1; iter <= J; ++iter) {
        try {
            f = update_f(train, hp, priors, gram);
            const auto [t1, t2] = update_theta(f, gram, train.inputs, priors);
            hp.theta1 = t1;
            hp.theta2 = t2;
            const double d_new = update_d(f, hp, train.inputs, sq, priors, jit);
            if (d_new != hp.d) {
                hp.d = d_new;
                gram = gram_matrix(train.inputs, d_new, jit);
                jit = gram.jitter;
            }
        } catch (const singularity_error& e) {
            throw singularity_error("icm iteration " + std::to_string(iter) + ": " + e.what(),
                                    e.final_jitter());
        } catch (const degeneracy_error& e) {
            throw degeneracy_error("icm iteration " + std::to_string(iter) + ": " + e.what());
        }
        const double lp = log_joint_posterior(f, hp, train, priors, jit);
        res.trace.push_back({hp.theta1, hp.theta2, hp.d, lp});
        res.iterations_run = iter;
        const double improvement = lp - lp_prev;
        lp_prev = lp;
        if (tol > 0.0 && improvement < tol) {
            res.converged = true;
            break;
        }
    }
    res.f_map = std::move(f);
    res.hp = hp;
    res.final_jitter = jit;
    return res;
}

inline IcmResult run_icm_compressed(const TrainingSet& train, const HyperPriors& priors,
                                    const HyperParams& init, int J, double tol, double jitter0,
                                    const DedupView& dd) {
    IcmResult res;
    const double sv2 = priors.noise_var_v;
    CompressedCore core = compressed_core(dd, init.d, jitter0, true);
    double jit = core.jitter;
    HyperParams hp = init;
    CompressedIterate it;
    it.q = Vec::Zero(dd.m);
    it.beta = 1.0;  // f = y at initialization
    double lp_prev = compressed_log_post(dd, core, it, hp, priors);
    const Vec cy = dd.c.cwiseProduct(dd.ybar);
    Mat Xt(dd.m, 2);
    Xt.col(0).setOnes();
    Xt.col(1) = dd.u;

    for (int iter = 1; iter <= J; ++iter) {
        try {
            // f-update: M = Z q + beta y, with
            // q = (sj I + Ktil C)^-1 (sv2 mu + (1 - beta) Ktil C ybar), sj = j + sv2,
            // routed through the symmetric core sj I + C^1/2 Ktil C^1/2.
            const double sj = jit + sv2;
            const double beta = jit / sj;
            const Vec mu = (hp.theta1 + hp.theta2 * dd.u.array()).matrix();
            const Vec rhs = sv2 * mu + (1.0 - beta) * (core.Ktil * cy);
            const Vec csq = dd.c.cwiseSqrt();
            const Mat S2m = csq.asDiagonal() * core.Ktil * csq.asDiagonal();
            const SpdChol S2 = spd_factor(S2m, sj, false);
            const Vec scaled_rhs = csq.cwiseProduct(rhs);
            it.q = S2.solve(scaled_rhs).cwiseQuotient(csq);
            it.beta = beta;

            // theta-update on the compressed system.
            const Vec fbar = it.q + it.beta * dd.ybar;
            Eigen::Matrix2d A;
            Eigen::Vector2d b;
            {
                const Vec w0 = compressed_w_apply(dd, core, Xt.col(0));
                const Vec w1 = compressed_w_apply(dd, core, Xt.col(1));
                A(0, 0) = Xt.col(0).dot(w0) + 1.0 / priors.sigma_theta(0);
                A(0, 1) = Xt.col(0).dot(w1);
                A(1, 0) = A(0, 1);
                A(1, 1) = Xt.col(1).dot(w1) + 1.0 / priors.sigma_theta(1);
                b(0) = w0.dot(fbar);
                b(1) = w1.dot(fbar);
            }
            const double det = A(0, 0) * A(1, 1) - A(0, 1) * A(1, 0);
            if (!(std::abs(det) > 1e-300) || !std::isfinite(det))
                throw degeneracy_error("update_theta: singular 2x2 system");
            hp.theta1 = (A(1, 1) * b(0) - A(0, 1) * b(1)) / det;
            hp.theta2 = (A(0, 0) * b(1) - A(1, 0) * b(0)) / det;

            // d-update on the compressed objective (the beta^2 ssw / j term is
            // d-independent and drops out of the comparison).
            const Vec mu2 = (hp.theta1 + hp.theta2 * dd.u.array()).matrix();
            const Vec vbar = fbar - mu2;
            const Vec cv = csq.cwiseProduct(vbar);
            const double logj_tail = static_cast<double>(dd.n - dd.m) * std::log(jit);
            auto phi = [&](double d) -> double {
                Mat Kt = se_gram(dd.u, d);
                Mat Sm = csq.asDiagonal() * Kt * csq.asDiagonal();
                try {
                    SpdChol fac = spd_factor(Sm, jit, false);
                    return -0.5 * (logj_tail + fac.log_det() + cv.dot(fac.solve(cv)));
                } catch (const singularity_error&) {
                    return -std::numeric_limits<double>::infinity();
                }
            };
            const double lo = priors.d_lo + kDGridMargin;
            const double hi = priors.d_hi - kDGridMargin;
            auto [best_x, best_val] = grid_golden_max(phi, lo, hi, kDGridPoints, kDGoldenWidth);
            if (hp.d > priors.d_lo && hp.d < priors.d_hi) {
                const double inc = phi(hp.d);
                if (inc > best_val) {
                    best_val = inc;
                    best_x = hp.d;
                }
            }
            if (!std::isfinite(best_val))
                throw degeneracy_error("update_d: objective not finite anywhere on the grid");
            if (best_x != hp.d) {
                hp.d = best_x;
                core = compressed_core(dd, best_x, jit, true);
                jit = core.jitter;
            }
        } catch (const singularity_error& e) {
            throw singularity_error("icm iteration " + std::to_string(iter) + ": " + e.what(),
                                    e.final_jitter());
        } catch (const degeneracy_error& e) {
            throw degeneracy_error("icm iteration " + std::to_string(iter) + ": " + e.what());
        }
        const double lp = compressed_log_post(dd, core, it, hp, priors);
        res.trace.push_back({hp.theta1, hp.theta2, hp.d, lp});
        res.iterations_run = iter;
        const double improvement = lp - lp_prev;
        lp_prev = lp;
        if (tol > 0.0 && improvement < tol) {
            res.converged = true;
            break;
        }
    }

    res.f_map.resize(dd.n);
    for (Eigen::Index i = 0; i < dd.n; ++i)
        res.f_map(i) = it.q(dd.map[i]) + it.beta * train.targets(i);
    res.hp = hp;
    res.final_jitter = jit;
    return res;
}

}  // namespace detail

inline IcmResult run_icm(const TrainingSet& train, const HyperPriors& priors,
                         const HyperParams& init, int J, double tol, double jitter0) {
    if (J < 1) throw std::invalid_argument("run_icm: J must be >= 1");
    if (train.inputs.size() != train.targets.size() || train.inputs.size() < 1)
        throw std::invalid_argument("run_icm: invalid training set");
    if (!(priors.noise_var_v > 0.0))
        throw std::invalid_argument("run_icm: estimator needs sigma_v^2 > 0");
    const detail::DedupView dd = detail::make_dedup(train.inputs, train.targets);
    if (dd.active && jitter0 > 0.0)
        return detail::run_icm_compressed(train, priors, init, J, tol, jitter0, dd);
    return detail::run_icm_dense(train, priors, init, J, tol, jitter0);
}

inline IcmResult run_icm(const TrainingSet& train, const HyperPriors& priors,
                         const HyperParams& init, const IcmConfig& cfg) {
    return run_icm(train, priors, init, cfg.J, cfg.tol, cfg.jitter0);
}

}  // namespace relaygp
