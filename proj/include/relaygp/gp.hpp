#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

#include "relaygp/kernel.hpp"

namespace relaygp {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// Linear-mean GP hyperparameters: mu(r) = theta1 + theta2 * r, SE length-scale d.
struct HyperParams {
    double theta1 = 0.0;
    double theta2 = 1.0;
    double d = 1.0;
};

// Prior hyper-structure: theta ~ N(0, diag(sigma_theta)), d ~ U(d_lo, d_hi),
// plus the destination noise variance the estimator is told.
struct HyperPriors {
    Eigen::Vector2d sigma_theta{1.0, 100.0};
    double d_lo = 0.0;
    double d_hi = 10.0;
    double noise_var_v = 0.0;
};

// Scalar predictor inputs r with channel-compensated destination targets y.
struct TrainingSet {
    Vec inputs;
    Vec targets;
};

inline Vec mean_vector(const HyperParams& hp, const Vec& inputs) {
    return (hp.theta1 + hp.theta2 * inputs.array()).matrix();
}

// GP predictive mean and variance at a query point, mean-corrected:
//   mean = mu(q) + k*^T (K + sigma_v^2 I)^-1 (y - mu(r))
//   var  = k(q,q) - k*^T (K + sigma_v^2 I)^-1 k*   (clamped at 0)
inline std::pair<Vec, Vec> gp_predict_batch(const TrainingSet& train, const HyperParams& hp,
                                            const HyperPriors& priors, const Vec& queries,
                                            double jitter = 0.0) {
    if (train.inputs.size() != train.targets.size() || train.inputs.size() < 1)
        throw std::invalid_argument("gp_predict: invalid training set");
    if (priors.noise_var_v < 0.0)
        throw std::invalid_argument("gp_predict: negative noise variance");
    const Eigen::Index n = train.inputs.size();
    Mat A = se_gram(train.inputs, hp.d);
    A.diagonal().array() += priors.noise_var_v;
    SpdChol f = spd_factor(A, jitter);
    const Vec resid = train.targets - mean_vector(hp, train.inputs);
    const Vec alpha = f.solve(resid);

    Vec means(queries.size()), vars(queries.size());
    Vec kstar(n);
    for (Eigen::Index q = 0; q < queries.size(); ++q) {
        for (Eigen::Index i = 0; i < n; ++i)
            kstar(i) = se_kernel(queries(q), train.inputs(i), hp.d);
        means(q) = hp.theta1 + hp.theta2 * queries(q) + kstar.dot(alpha);
        const double v = 1.0 - kstar.dot(f.solve(kstar));
        vars(q) = v > 0.0 ? v : 0.0;
    }
    return {std::move(means), std::move(vars)};
}

inline std::pair<double, double> gp_predict(const TrainingSet& train, const HyperParams& hp,
                                            const HyperPriors& priors, double query,
                                            double jitter = 0.0) {
    Vec q(1);
    q(0) = query;
    auto [m, v] = gp_predict_batch(train, hp, priors, q, jitter);
    return {m(0), v(0)};
}

namespace detail {

inline double log_normal_quad(double quad_form, double log_det, Eigen::Index n) {
    return -0.5 * (static_cast<double>(n) * std::log(kTwoPi) + log_det + quad_form);
}

}  // namespace detail

// Log joint posterior of (f, theta, d) for one relay under the zero-forcing
// observation model:
//   log N(y; f, sigma_v^2 I) + log N(f; mu, K + jitter I)
//   + log N(theta; 0, Sigma_theta) + log U(d; d_lo, d_hi).
// Fully normalized; -inf when d leaves the uniform prior's support.
inline double log_joint_posterior(const Vec& f, const HyperParams& hp, const TrainingSet& train,
                                  const HyperPriors& priors, double jitter = kJitterFloor) {
    const Eigen::Index n = train.inputs.size();
    if (f.size() != n || train.targets.size() != n)
        throw std::invalid_argument("log_joint_posterior: dimension mismatch");
    if (!(priors.noise_var_v > 0.0))
        throw std::invalid_argument("log_joint_posterior: needs sigma_v^2 > 0");
    if (!(hp.d > priors.d_lo && hp.d < priors.d_hi))
        return -std::numeric_limits<double>::infinity();

    const double sv2 = priors.noise_var_v;
    const double lik_quad = (train.targets - f).squaredNorm() / sv2;
    const double lik = detail::log_normal_quad(lik_quad, n * std::log(sv2), n);

    Mat K = se_gram(train.inputs, hp.d);
    SpdChol fac = spd_factor(K, jitter);
    const Vec v = f - mean_vector(hp, train.inputs);
    const double prior_f = detail::log_normal_quad(v.dot(fac.solve(v)), fac.log_det(), n);

    const double th_quad = hp.theta1 * hp.theta1 / priors.sigma_theta(0) +
                           hp.theta2 * hp.theta2 / priors.sigma_theta(1);
    const double th_logdet = std::log(priors.sigma_theta(0)) + std::log(priors.sigma_theta(1));
    const double prior_th = detail::log_normal_quad(th_quad, th_logdet, 2);

    const double prior_d = -std::log(priors.d_hi - priors.d_lo);

    return lik + prior_f + prior_th + prior_d;
}

}  // namespace relaygp
