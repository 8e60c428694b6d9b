#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "relaygp/icm.hpp"
#include "relaygp/kernel.hpp"
#include "relaygp/sim.hpp"

namespace relaygp {

struct capacity_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Approach { FullInfo, FrameByFrame, SlidingWindow };

inline const char* approach_name(Approach a) {
    switch (a) {
        case Approach::FullInfo: return "full";
        case Approach::FrameByFrame: return "frame";
        case Approach::SlidingWindow: return "sliding";
    }
    return "?";
}

// Running mean and covariance of grid-quantized function estimates across
// frames. The mean uses per-coordinate counts so uncovered cells simply carry
// their previous value instead of decaying toward it; the covariance uses the
// global frame count with zero deviation on uncovered cells, which keeps it
// a convex combination of outer products and hence PSD.
struct GridAggregate {
    Vec grid;
    Vec m;
    Mat Phi;
    Vec cell_count;
    int count = 0;
};

inline GridAggregate make_aggregate(const Vec& grid) {
    GridAggregate agg;
    agg.grid = grid;
    agg.m = Vec::Zero(grid.size());
    agg.Phi = Mat::Zero(grid.size(), grid.size());
    agg.cell_count = Vec::Zero(grid.size());
    return agg;
}

// Nearest-grid assignment with per-cell averaging; ties go to the lower grid
// index. The mask marks cells that received at least one value.
inline std::pair<Vec, std::vector<char>> quantize_to_grid(const Vec& inputs, const Vec& values,
                                                          const Vec& grid) {
    if (inputs.size() != values.size())
        throw std::invalid_argument("quantize_to_grid: inputs/values size mismatch");
    const Eigen::Index S = grid.size();
    if (S < 1) throw std::invalid_argument("quantize_to_grid: empty grid");
    for (Eigen::Index i = 1; i < S; ++i)
        if (!(grid(i - 1) < grid(i)))
            throw std::invalid_argument("quantize_to_grid: grid must be strictly ascending");
    Vec sums = Vec::Zero(S);
    Vec counts = Vec::Zero(S);
    for (Eigen::Index i = 0; i < inputs.size(); ++i) {
        const double x = inputs(i);
        const double* lo = std::lower_bound(grid.data(), grid.data() + S, x);
        Eigen::Index idx = lo - grid.data();
        if (idx == S) {
            idx = S - 1;
        } else if (idx > 0 && std::abs(x - grid(idx - 1)) <= std::abs(x - grid(idx))) {
            idx -= 1;
        }
        sums(idx) += values(i);
        counts(idx) += 1.0;
    }
    Vec out = Vec::Zero(S);
    std::vector<char> mask(static_cast<std::size_t>(S), 0);
    for (Eigen::Index i = 0; i < S; ++i) {
        if (counts(i) > 0.0) {
            out(i) = sums(i) / counts(i);
            mask[static_cast<std::size_t>(i)] = 1;
        }
    }
    return {std::move(out), std::move(mask)};
}

inline void aggregate_update(GridAggregate& agg, const Vec& ftilde,
                             const std::vector<char>& mask) {
    const Eigen::Index S = agg.grid.size();
    if (ftilde.size() != S || static_cast<Eigen::Index>(mask.size()) != S)
        throw std::invalid_argument("aggregate_update: size mismatch");
    agg.count += 1;
    for (Eigen::Index i = 0; i < S; ++i) {
        if (mask[static_cast<std::size_t>(i)]) {
            agg.cell_count(i) += 1.0;
            agg.m(i) += (ftilde(i) - agg.m(i)) / agg.cell_count(i);
        }
    }
    Vec dev = Vec::Zero(S);
    for (Eigen::Index i = 0; i < S; ++i)
        if (mask[static_cast<std::size_t>(i)]) dev(i) = ftilde(i) - agg.m(i);
    agg.Phi += (dev * dev.transpose() - agg.Phi) / static_cast<double>(agg.count);
}

struct RelayEstimate {
    Vec f_map;                        // at the last-used training inputs
    Vec inputs;                       // those inputs
    HyperParams hp;
    GridAggregate aggregate;
    Approach approach = Approach::FullInfo;
    CsiMode csi_mode = CsiMode::Perfect;
    std::vector<IcmTraceRow> trace;   // cold-start ICM trace (first run)
    int icm_iterations = 0;           // summed over frames / windows
    int window_rebuilds = 0;          // sliding only: degeneracy recoveries
};

// Grid spanning the convex hull of the ZF predictor points. The default is
// one point per constellation symbol at s_m * h_hat; any other size gives an
// equally spaced partition of the same hull.
inline Vec estimation_grid(const Constellation& c, double h_used, int grid_size) {
    const int M = static_cast<int>(c.points.size());
    if (grid_size == 0 || grid_size == M) {
        Vec g = c.points * h_used;
        std::sort(g.data(), g.data() + g.size());
        return g;
    }
    if (grid_size < 2) throw std::invalid_argument("estimation_grid: need at least 2 points");
    const double lo = c.points(0) * h_used;
    const double hi = c.points(M - 1) * h_used;
    const double a = std::min(lo, hi);
    const double b = std::max(lo, hi);
    Vec g(grid_size);
    for (int i = 0; i < grid_size; ++i)
        g(i) = a + (b - a) * static_cast<double>(i) / (grid_size - 1);
    return g;
}

namespace detail {

struct PipelineData {
    Vec inputs;    // stacked ZF inputs, frame-major
    Vec targets;   // stacked y / g_hat
    double h_used = 1.0;
    double g_used = 1.0;
    HyperPriors priors;  // noise_var_v rescaled to the normalized targets
};

inline PipelineData pipeline_data(const FrameBatch& batch, int relay_index,
                                  const HyperPriors& priors) {
    if (relay_index < 0 || relay_index >= static_cast<int>(batch.channels.size()))
        throw std::invalid_argument("pipeline: relay index out of range");
    const ChannelRealization& ch = batch.channels[static_cast<std::size_t>(relay_index)];
    PipelineData data;
    data.h_used = ch.h_hat;
    data.g_used = ch.g_hat;
    const Eigen::Index T = batch.s.rows();
    const Eigen::Index K = batch.s.cols();
    data.inputs.resize(T * K);
    data.targets.resize(T * K);
    const Mat& y = batch.y[static_cast<std::size_t>(relay_index)];
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index k = 0; k < K; ++k) {
            data.inputs(t * K + k) = batch.s(t, k) * data.h_used;
            data.targets(t * K + k) = y(t, k) / data.g_used;
        }
    }
    data.priors = priors;
    data.priors.noise_var_v = batch.sigma_v2 / (data.g_used * data.g_used);
    return data;
}

}  // namespace detail

// Full-information estimation: one ICM run over every stacked pilot.
inline RelayEstimate approach_full(const FrameBatch& batch, int relay_index,
                                   const HyperPriors& priors, const IcmConfig& icm_config,
                                   int grid_size = 0, Eigen::Index capacity = 4096) {
    detail::PipelineData data = detail::pipeline_data(batch, relay_index, priors);
    if (data.inputs.size() > capacity)
        throw capacity_error("approach_full: " + std::to_string(data.inputs.size()) +
                             " stacked points exceed the capacity cap " +
                             std::to_string(capacity));
    RelayEstimate est;
    est.approach = Approach::FullInfo;
    est.csi_mode = batch.csi;
    const IcmResult res =
        run_icm({data.inputs, data.targets}, data.priors, HyperParams{}, icm_config);
    est.f_map = res.f_map;
    est.inputs = data.inputs;
    est.hp = res.hp;
    est.trace = res.trace;
    est.icm_iterations = res.iterations_run;
    const Vec grid = estimation_grid(batch.constellation, data.h_used, grid_size);
    est.aggregate = make_aggregate(grid);
    auto [ftilde, mask] = quantize_to_grid(data.inputs, est.f_map, grid);
    aggregate_update(est.aggregate, ftilde, mask);
    return est;
}

// Frame-by-frame estimation: independent ICM per frame, warm-started
// hyperparameters, estimates folded onto the fixed grid by the running
// mean/covariance recursions.
inline RelayEstimate approach_frame_by_frame(const FrameBatch& batch, int relay_index,
                                             int grid_size, const HyperPriors& priors,
                                             const IcmConfig& icm_config) {
    detail::PipelineData data = detail::pipeline_data(batch, relay_index, priors);
    const Eigen::Index T = batch.s.rows();
    const Eigen::Index K = batch.s.cols();
    RelayEstimate est;
    est.approach = Approach::FrameByFrame;
    est.csi_mode = batch.csi;
    const Vec grid = estimation_grid(batch.constellation, data.h_used, grid_size);
    est.aggregate = make_aggregate(grid);
    HyperParams hp;
    for (Eigen::Index t = 0; t < T; ++t) {
        const Vec in = data.inputs.segment(t * K, K);
        const Vec tg = data.targets.segment(t * K, K);
        const IcmResult res = run_icm({in, tg}, data.priors, hp, icm_config);
        hp = res.hp;
        est.icm_iterations += res.iterations_run;
        if (t == 0) est.trace = res.trace;
        auto [ftilde, mask] = quantize_to_grid(in, res.f_map, grid);
        aggregate_update(est.aggregate, ftilde, mask);
        if (t == T - 1) {
            est.f_map = res.f_map;
            est.inputs = in;
        }
    }
    est.hp = hp;
    return est;
}

// Sliding-window estimation: the window inverse advances one symbol at a
// time through the rank-one downsize/upsize identities and is only ever
// re-factorized at a window start (ICM may move d there) or after a
// degeneracy recovery with escalated jitter.
inline RelayEstimate approach_sliding(const FrameBatch& batch, int relay_index, int window,
                                      double overlap_frac, int grid_size,
                                      const HyperPriors& priors, const IcmConfig& icm_config) {
    if (window < 2) throw std::invalid_argument("approach_sliding: window must be >= 2");
    if (!(overlap_frac >= 0.0 && overlap_frac < 1.0))
        throw std::invalid_argument("approach_sliding: overlap must be in [0,1)");
    detail::PipelineData data = detail::pipeline_data(batch, relay_index, priors);
    const Eigen::Index N = data.inputs.size();
    if (window > N) throw std::invalid_argument("approach_sliding: window exceeds the stream");
    const Eigen::Index stride =
        std::max<Eigen::Index>(1, static_cast<Eigen::Index>(
                                      std::llround(window * (1.0 - overlap_frac))));

    RelayEstimate est;
    est.approach = Approach::SlidingWindow;
    est.csi_mode = batch.csi;
    const Vec grid = estimation_grid(batch.constellation, data.h_used, grid_size);
    est.aggregate = make_aggregate(grid);

    HyperParams hp;
    double jitter = icm_config.jitter0;
    Eigen::Index start = 0;  // window covers [start, start + window)
    Vec win_in = data.inputs.segment(0, window);
    GramState gram = gram_matrix(win_in, hp.d, jitter);
    jitter = gram.jitter;

    auto run_window = [&](Eigen::Index w_start) {
        const Vec in = data.inputs.segment(w_start, window);
        const Vec tg = data.targets.segment(w_start, window);
        const IcmResult res = run_icm({in, tg}, data.priors, hp, icm_config);
        const bool d_moved = res.hp.d != hp.d;
        hp = res.hp;
        est.icm_iterations += res.iterations_run;
        if (est.trace.empty()) est.trace = res.trace;
        auto [ftilde, mask] = quantize_to_grid(in, res.f_map, grid);
        aggregate_update(est.aggregate, ftilde, mask);
        est.f_map = res.f_map;
        est.inputs = in;
        if (d_moved) {
            gram = gram_matrix(in, hp.d, jitter);
            jitter = gram.jitter;
        }
    };

    run_window(0);
    for (Eigen::Index next = window; next < N; ++next) {
        // Advance by one symbol: drop the oldest input, append data.inputs(next).
        const Eigen::Index new_start = next - window + 1;
        const Vec kept = data.inputs.segment(new_start, window - 1);
        const double x_new = data.inputs(next);
        try {
            Mat kbar_inv = downsize_inverse(gram.K_inv);
            Vec k_vec(window - 1);
            for (Eigen::Index i = 0; i < window - 1; ++i)
                k_vec(i) = se_kernel(kept(i), x_new, gram.d);
            gram.K_inv = upsize_inverse(kbar_inv, k_vec, 1.0 + jitter);
            Mat K_new(window, window);
            K_new.topLeftCorner(window - 1, window - 1) =
                gram.K.bottomRightCorner(window - 1, window - 1);
            K_new.topRightCorner(window - 1, 1) = k_vec;
            K_new.bottomLeftCorner(1, window - 1) = k_vec.transpose();
            K_new(window - 1, window - 1) = 1.0;
            gram.K = std::move(K_new);
            Vec in_new(window);
            in_new.head(window - 1) = kept;
            in_new(window - 1) = x_new;
            gram.inputs = std::move(in_new);
        } catch (const degeneracy_error&) {
            jitter = (jitter < kJitterFloor) ? kJitterFloor
                                             : std::min(10.0 * jitter, kJitterCeiling);
            Vec in_new(window);
            in_new.head(window - 1) = kept;
            in_new(window - 1) = x_new;
            gram = gram_matrix(in_new, gram.d, jitter);
            jitter = gram.jitter;
            est.window_rebuilds += 1;
        }
        start = new_start;
        const Eigen::Index seen = next + 1;
        if ((seen - window) % stride == 0) run_window(start);
    }
    est.hp = hp;
    return est;
}

}  // namespace relaygp
