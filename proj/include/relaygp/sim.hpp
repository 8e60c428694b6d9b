#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "relaygp/linalg.hpp"
#include "relaygp/rng.hpp"

namespace relaygp {

// RNG substream tags; every independent draw purpose gets its own stream so
// changing one knob (say SNR) never perturbs unrelated draws.
namespace stream {
inline constexpr std::uint64_t kChannels = 0x11;
inline constexpr std::uint64_t kSymbols = 0x22;
inline constexpr std::uint64_t kNoise = 0x33;
inline constexpr std::uint64_t kPayload = 0x44;
inline constexpr std::uint64_t kInstance = 0x55;
}  // namespace stream

struct Constellation {
    Vec points;                         // strictly increasing, unit average power
    int bits_per_symbol = 0;
    std::vector<unsigned> labels;       // Gray label of points[i]
};

inline bool is_power_of_two(int m) { return m > 0 && (m & (m - 1)) == 0; }

inline Constellation make_pam(int M) {
    if (M < 2 || !is_power_of_two(M)) throw std::invalid_argument("make_pam: M must be 2,4,8,...");
    Constellation c;
    c.points.resize(M);
    const double scale = 1.0 / std::sqrt((static_cast<double>(M) * M - 1.0) / 3.0);
    for (int i = 0; i < M; ++i) c.points(i) = (2.0 * i - M + 1.0) * scale;
    c.bits_per_symbol = 0;
    for (int m = M; m > 1; m >>= 1) ++c.bits_per_symbol;
    c.labels.resize(M);
    for (int i = 0; i < M; ++i) c.labels[i] = static_cast<unsigned>(i) ^ (static_cast<unsigned>(i) >> 1);
    return c;
}

// Nearest constellation point to x; ties go to the lower index.
inline int nearest_symbol(const Constellation& c, double x) {
    int best = 0;
    double best_dist = std::abs(x - c.points(0));
    for (int i = 1; i < c.points.size(); ++i) {
        const double dist = std::abs(x - c.points(i));
        if (dist < best_dist) {
            best_dist = dist;
            best = i;
        }
    }
    return best;
}

struct ChannelRealization {
    double h = 1.0;       // source -> relay gain
    double g = 1.0;       // relay -> destination gain
    double h_hat = 1.0;
    double g_hat = 1.0;
    double sigma_h2 = 0.0;
    double sigma_g2 = 0.0;
};

enum class CsiMode { Perfect, Imperfect };

namespace detail {

// Additive estimate error truncated to keep the estimate usable: redraw until
// the estimate clears 0.05, clamp if the draw budget runs out.
inline double truncated_estimate(Rng& rng, double truth, double sigma2) {
    const double sd = std::sqrt(sigma2);
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double est = truth + rng.normal(0.0, sd);
        if (est > 0.05) return est;
    }
    return 0.05;
}

}  // namespace detail

// True gains first for every relay, estimate errors after, so perfect and
// imperfect runs from the same stream share identical truth.
inline std::vector<ChannelRealization> draw_channels(Rng& rng, int L, double sigma2,
                                                     CsiMode csi) {
    if (L < 1) throw std::invalid_argument("draw_channels: L must be >= 1");
    if (sigma2 < 0.0) throw std::invalid_argument("draw_channels: sigma2 must be >= 0");
    const double rayleigh_scale = 1.0 / std::sqrt(2.0);  // unit mean-square gains
    std::vector<ChannelRealization> out(L);
    for (int l = 0; l < L; ++l) {
        do { out[l].h = rng.rayleigh(rayleigh_scale); } while (!(out[l].h > 0.0));
        do { out[l].g = rng.rayleigh(rayleigh_scale); } while (!(out[l].g > 0.0));
    }
    for (int l = 0; l < L; ++l) {
        if (csi == CsiMode::Imperfect && sigma2 > 0.0) {
            out[l].h_hat = detail::truncated_estimate(rng, out[l].h, sigma2);
            out[l].g_hat = detail::truncated_estimate(rng, out[l].g, sigma2);
            out[l].sigma_h2 = sigma2;
            out[l].sigma_g2 = sigma2;
        } else {
            out[l].h_hat = out[l].h;
            out[l].g_hat = out[l].g;
        }
    }
    return out;
}

enum class RelayKind { Abs, Linear, Tanh, Demod };

struct RelayFunctionSpec {
    RelayKind kind = RelayKind::Abs;
    double a = 1.0;                // Linear slope / Tanh amplitude
    double b = 0.5;                // Linear offset
    double w = 2.0;                // Tanh rate
    double phi = 0.0;              // Tanh phase
    Constellation constellation;   // Demod quantizer alphabet
    double demod_h = 1.0;          // Demod scale, the frame's true h
};

inline RelayFunctionSpec abs_relay() { return RelayFunctionSpec{}; }

inline RelayFunctionSpec linear_relay(double a = 1.0, double b = 0.5) {
    RelayFunctionSpec spec;
    spec.kind = RelayKind::Linear;
    spec.a = a;
    spec.b = b;
    return spec;
}

inline RelayFunctionSpec tanh_relay(double a = 1.0, double w = 2.0, double phi = 0.0) {
    RelayFunctionSpec spec;
    spec.kind = RelayKind::Tanh;
    spec.a = a;
    spec.w = w;
    spec.phi = phi;
    return spec;
}

inline RelayFunctionSpec demod_relay(const Constellation& c, double h = 1.0) {
    RelayFunctionSpec spec;
    spec.kind = RelayKind::Demod;
    spec.constellation = c;
    spec.demod_h = h;
    return spec;
}

inline double apply_relay_function(const RelayFunctionSpec& spec, double x) {
    switch (spec.kind) {
        case RelayKind::Abs:
            return std::abs(x);
        case RelayKind::Linear:
            return spec.a * x + spec.b;
        case RelayKind::Tanh:
            return spec.a * std::tanh(spec.w * x + spec.phi);
        case RelayKind::Demod: {
            if (spec.constellation.points.size() == 0)
                throw std::invalid_argument("apply_relay_function: Demod without constellation");
            const double h = spec.demod_h;
            return h * spec.constellation.points(nearest_symbol(spec.constellation, x / h));
        }
    }
    throw std::logic_error("apply_relay_function: unreachable");
}

// One frame through one relay chain:
//   r_k = s_k h + w_k,  w_k ~ N(0, sigma_w2)   (relay receive noise)
//   y_k = f(r_k) g + v_k, v_k ~ N(0, sigma_v2) (destination noise)
// The Demod variant quantizes against the frame's true h regardless of what
// the caller stamped into the spec.
inline std::pair<Vec, Vec> simulate_frame(const Vec& s_frame, const ChannelRealization& ch,
                                          const RelayFunctionSpec& spec, double sigma_w2,
                                          double sigma_v2, Rng& rng) {
    if (sigma_w2 < 0.0 || sigma_v2 < 0.0)
        throw std::invalid_argument("simulate_frame: negative noise variance");
    RelayFunctionSpec used = spec;
    if (used.kind == RelayKind::Demod) used.demod_h = ch.h;
    const double sd_w = std::sqrt(sigma_w2);
    const double sd_v = std::sqrt(sigma_v2);
    const Eigen::Index K = s_frame.size();
    Vec r(K), y(K);
    for (Eigen::Index k = 0; k < K; ++k) {
        r(k) = s_frame(k) * ch.h + sd_w * rng.normal();
        y(k) = apply_relay_function(used, r(k)) * ch.g + sd_v * rng.normal();
    }
    return {std::move(r), std::move(y)};
}

// Deterministic predictor inputs under the zero-forcing view of relay noise.
inline Vec zf_inputs(const Vec& s_frame, double h_hat) { return s_frame * h_hat; }

struct NoiseVars {
    double sigma_v2 = 0.0;
    double sigma_w2 = 0.0;
};

inline NoiseVars snr_to_noise(double snr_db, double split) {
    if (!(split >= 0.0 && split <= 1.0))
        throw std::invalid_argument("snr_to_noise: split must be in [0,1]");
    const double total = std::pow(10.0, -snr_db / 10.0);
    return {(1.0 - split) * total, split * total};
}

enum class PilotSchedule { Random, Sweep };

// A block of T frames, K symbols each, through L relays over one channel
// draw. Pilots, channels, and noise come from separate substreams of the
// batch seed, so changing the noise scale or relay functions never moves the
// other draws.
struct FrameBatch {
    Mat s;                                     // T x K pilot symbols
    Eigen::MatrixXi s_idx;                     // constellation index behind each pilot
    std::vector<Mat> r;                        // per relay, T x K received at relay
    std::vector<Mat> y;                        // per relay, T x K received at destination
    std::vector<ChannelRealization> channels;  // per relay
    double sigma_w2 = 0.0;
    double sigma_v2 = 0.0;
    CsiMode csi = CsiMode::Perfect;
    Constellation constellation;
};

inline FrameBatch make_frame_batch(std::uint64_t seed, const Constellation& c, int T, int K,
                                   const std::vector<RelayFunctionSpec>& relays,
                                   double channel_err_var, CsiMode csi, double sigma_w2,
                                   double sigma_v2,
                                   PilotSchedule schedule = PilotSchedule::Random) {
    if (T < 1 || K < 1) throw std::invalid_argument("make_frame_batch: T and K must be >= 1");
    if (relays.empty()) throw std::invalid_argument("make_frame_batch: no relay functions");
    const int L = static_cast<int>(relays.size());
    const int M = static_cast<int>(c.points.size());

    FrameBatch batch;
    batch.constellation = c;
    batch.sigma_w2 = sigma_w2;
    batch.sigma_v2 = sigma_v2;
    batch.csi = csi;

    Rng ch_rng = Rng::substream(seed, {stream::kChannels});
    batch.channels = draw_channels(ch_rng, L, channel_err_var, csi);

    Rng sym_rng = Rng::substream(seed, {stream::kSymbols});
    batch.s.resize(T, K);
    batch.s_idx.resize(T, K);
    for (int t = 0; t < T; ++t) {
        for (int k = 0; k < K; ++k) {
            const int idx = (schedule == PilotSchedule::Random)
                                ? static_cast<int>(sym_rng.uniform_int(M))
                                : (t * K + k) % M;
            batch.s_idx(t, k) = idx;
            batch.s(t, k) = c.points(idx);
        }
    }

    batch.r.assign(L, Mat(T, K));
    batch.y.assign(L, Mat(T, K));
    for (int l = 0; l < L; ++l) {
        for (int t = 0; t < T; ++t) {
            Rng noise_rng = Rng::substream(
                seed, {stream::kNoise, static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(t)});
            auto [r, y] = simulate_frame(batch.s.row(t).transpose(), batch.channels[l],
                                         relays[l], sigma_w2, sigma_v2, noise_rng);
            batch.r[l].row(t) = r.transpose();
            batch.y[l].row(t) = y.transpose();
        }
    }
    return batch;
}

}  // namespace relaygp
