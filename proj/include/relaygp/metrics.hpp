#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "relaygp/pipeline.hpp"

namespace relaygp {

inline Vec truth_on_grid(const RelayFunctionSpec& truth_fn, const Vec& grid) {
    Vec out(grid.size());
    for (Eigen::Index i = 0; i < grid.size(); ++i)
        out(i) = apply_relay_function(truth_fn, grid(i));
    return out;
}

// Mean absolute deviation from the true relay function over covered grid
// points.
inline double mean_abs_error(const Vec& est, const RelayFunctionSpec& truth_fn, const Vec& grid,
                             const std::vector<char>& mask) {
    if (est.size() != grid.size() || static_cast<Eigen::Index>(mask.size()) != grid.size())
        throw std::invalid_argument("mean_abs_error: size mismatch");
    double sum = 0.0;
    int covered = 0;
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        sum += std::abs(est(i) - apply_relay_function(truth_fn, grid(i)));
        ++covered;
    }
    if (covered == 0) throw std::invalid_argument("mean_abs_error: no covered grid points");
    return sum / covered;
}

// Total absolute deviation normalized by the total magnitude of the truth.
inline double relative_total_error(const Vec& est, const RelayFunctionSpec& truth_fn,
                                   const Vec& grid, const std::vector<char>& mask) {
    if (est.size() != grid.size() || static_cast<Eigen::Index>(mask.size()) != grid.size())
        throw std::invalid_argument("relative_total_error: size mismatch");
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const double truth = apply_relay_function(truth_fn, grid(i));
        num += std::abs(est(i) - truth);
        den += std::abs(truth);
    }
    if (!(den > 0.0))
        throw std::invalid_argument("relative_total_error: truth vanishes on covered points");
    return num / den;
}

// Precomputed detector hypotheses z_m = f(s_m h_used) g_used, one per
// constellation symbol, with f either the exact relay function or the
// grid-aggregated estimate looked up at the nearest grid point.
inline Vec detect_hypotheses(const RelayFunctionSpec& fn, double h_used, double g_used,
                             const Constellation& c) {
    Vec z(c.points.size());
    for (Eigen::Index m = 0; m < c.points.size(); ++m)
        z(m) = apply_relay_function(fn, c.points(m) * h_used) * g_used;
    return z;
}

inline Vec detect_hypotheses(const GridAggregate& agg, double h_used, double g_used,
                             const Constellation& c) {
    const Eigen::Index S = agg.grid.size();
    if (S < 1) throw std::invalid_argument("detect_hypotheses: empty grid");
    Vec z(c.points.size());
    for (Eigen::Index m = 0; m < c.points.size(); ++m) {
        const double x = c.points(m) * h_used;
        Eigen::Index best = 0;
        double best_dist = std::abs(x - agg.grid(0));
        for (Eigen::Index i = 1; i < S; ++i) {
            const double dist = std::abs(x - agg.grid(i));
            if (dist < best_dist) {
                best_dist = dist;
                best = i;
            }
        }
        z(m) = agg.m(best) * g_used;
    }
    return z;
}

// Minimum-distance symbol decision; ties go to the lower index.
inline int ml_detect(double y, const Vec& hypotheses) {
    int best = 0;
    double best_dist = (y - hypotheses(0)) * (y - hypotheses(0));
    for (Eigen::Index m = 1; m < hypotheses.size(); ++m) {
        const double dist = (y - hypotheses(m)) * (y - hypotheses(m));
        if (dist < best_dist) {
            best_dist = dist;
            best = static_cast<int>(m);
        }
    }
    return best;
}

inline int ml_detect(double y, const RelayFunctionSpec& fn, double h_used, double g_used,
                     const Constellation& c) {
    return ml_detect(y, detect_hypotheses(fn, h_used, g_used, c));
}

inline int ml_detect(double y, const GridAggregate& agg, double h_used, double g_used,
                     const Constellation& c) {
    return ml_detect(y, detect_hypotheses(agg, h_used, g_used, c));
}

struct BerPoint {
    double snr_db = 0.0;
    std::string mode;
    double ber = 0.0;
    std::int64_t bits = 0;
};

inline const std::vector<std::string>& ber_modes() {
    static const std::vector<std::string> modes = {
        "genie", "approachI-perfect", "approachI-imperfect", "approachII-perfect",
        "approachII-imperfect"};
    return modes;
}

// End-to-end BER study. Per SNR point the relay function is first estimated
// on training frames (full-information and frame-by-frame pipelines, under
// perfect and imperfect CSI), then fresh payload symbols are detected. The
// genie detector uses the true function and channels and lower-bounds the
// rest. Payload draws per trial are shared across SNR points and detector
// modes, so curves are paired.
inline std::vector<BerPoint> ber_study(std::uint64_t master_seed, const Constellation& c,
                                       const RelayFunctionSpec& fn, int T, int K,
                                       double channel_err_var, double noise_split,
                                       const std::vector<double>& snr_db,
                                       std::int64_t payload_bits, int trials,
                                       const HyperPriors& priors, const IcmConfig& icm_config) {
    if (snr_db.empty()) throw std::invalid_argument("ber_study: empty SNR list");
    if (trials < 1 || payload_bits < 1) throw std::invalid_argument("ber_study: bad sizes");
    const std::int64_t n_sym =
        (payload_bits + c.bits_per_symbol - 1) / c.bits_per_symbol;
    const int M = static_cast<int>(c.points.size());

    const auto& modes = ber_modes();
    std::vector<std::int64_t> errors(modes.size() * snr_db.size(), 0);
    std::vector<std::int64_t> bits(modes.size() * snr_db.size(), 0);

    for (int trial = 0; trial < trials; ++trial) {
        const std::uint64_t batch_seed =
            Rng::derive_seed(master_seed, {stream::kInstance, static_cast<std::uint64_t>(trial)});
        for (std::size_t si = 0; si < snr_db.size(); ++si) {
            const NoiseVars nv = snr_to_noise(snr_db[si], noise_split);

            FrameBatch perfect = make_frame_batch(batch_seed, c, T, K, {fn}, channel_err_var,
                                                  CsiMode::Perfect, nv.sigma_w2, nv.sigma_v2);
            FrameBatch imperfect = make_frame_batch(batch_seed, c, T, K, {fn}, channel_err_var,
                                                    CsiMode::Imperfect, nv.sigma_w2, nv.sigma_v2);
            const ChannelRealization& ch = perfect.channels[0];

            RelayFunctionSpec truth = fn;
            if (truth.kind == RelayKind::Demod) truth.demod_h = ch.h;

            const RelayEstimate full_p = approach_full(perfect, 0, priors, icm_config);
            const RelayEstimate full_i = approach_full(imperfect, 0, priors, icm_config);
            const RelayEstimate fbf_p =
                approach_frame_by_frame(perfect, 0, 0, priors, icm_config);
            const RelayEstimate fbf_i =
                approach_frame_by_frame(imperfect, 0, 0, priors, icm_config);
            // Every mode detects against the true channel reference so the
            // curves isolate the function-estimation error alone. Referencing
            // each mode's own channel estimates instead would cancel the CSI
            // error algebraically: a relay trained on y / g_hat learns
            // (g / g_hat) f, and multiplying back by g_hat at detection
            // restores g f exactly, collapsing all curves onto each other.
            Vec hyp[5];
            hyp[0] = detect_hypotheses(truth, ch.h, ch.g, c);
            hyp[1] = detect_hypotheses(full_p.aggregate, ch.h, ch.g, c);
            hyp[2] = detect_hypotheses(full_i.aggregate, ch.h, ch.g, c);
            hyp[3] = detect_hypotheses(fbf_p.aggregate, ch.h, ch.g, c);
            hyp[4] = detect_hypotheses(fbf_i.aggregate, ch.h, ch.g, c);

            // Payload regenerated from the same substream at every SNR: the
            // standard-normal draws repeat and only the scale changes.
            Rng pay = Rng::substream(master_seed,
                                     {stream::kPayload, static_cast<std::uint64_t>(trial)});
            const double sd_w = std::sqrt(nv.sigma_w2);
            const double sd_v = std::sqrt(nv.sigma_v2);
            for (std::int64_t j = 0; j < n_sym; ++j) {
                const int tx = static_cast<int>(pay.uniform_int(M));
                const double r = c.points(tx) * ch.h + sd_w * pay.normal();
                const double y = apply_relay_function(truth, r) * ch.g + sd_v * pay.normal();
                for (std::size_t mode = 0; mode < modes.size(); ++mode) {
                    const int det = ml_detect(y, hyp[mode]);
                    const unsigned diff = c.labels[static_cast<std::size_t>(tx)] ^
                                          c.labels[static_cast<std::size_t>(det)];
                    errors[mode * snr_db.size() + si] += std::popcount(diff);
                    bits[mode * snr_db.size() + si] += c.bits_per_symbol;
                }
            }
        }
    }

    std::vector<BerPoint> out;
    out.reserve(modes.size() * snr_db.size());
    for (std::size_t mode = 0; mode < modes.size(); ++mode) {
        for (std::size_t si = 0; si < snr_db.size(); ++si) {
            const std::size_t at = mode * snr_db.size() + si;
            out.push_back({snr_db[si], modes[mode],
                           static_cast<double>(errors[at]) / static_cast<double>(bits[at]),
                           bits[at]});
        }
    }
    return out;
}

}  // namespace relaygp
