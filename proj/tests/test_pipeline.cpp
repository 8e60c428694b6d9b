#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "relaygp/metrics.hpp"
#include "relaygp/pipeline.hpp"

using namespace relaygp;

namespace {

FrameBatch tanh_batch(std::uint64_t seed, int T, int K, CsiMode csi, double snr_db) {
    const Constellation c = make_pam(16);
    const NoiseVars nv = snr_to_noise(snr_db, 0.5);
    return make_frame_batch(seed, c, T, K, {tanh_relay()}, 0.2, csi, nv.sigma_w2,
                            nv.sigma_v2);
}

}  // namespace

TEST_CASE("quantize_to_grid passes exact grid points through") {
    Vec grid = Vec::LinSpaced(5, -2.0, 2.0);
    Vec values(5);
    values << 1.0, -1.0, 0.5, 2.0, 0.0;
    const auto [out, mask] = quantize_to_grid(grid, values, grid);
    for (Eigen::Index i = 0; i < 5; ++i) {
        CHECK(out(i) == values(i));
        CHECK(mask[static_cast<std::size_t>(i)] == 1);
    }
}

TEST_CASE("quantize_to_grid averages collisions and flags coverage") {
    Vec grid(3);
    grid << 0.0, 1.0, 2.0;
    Vec inputs(3);
    inputs << 0.9, 1.1, 0.1;
    Vec values(3);
    values << 2.0, 4.0, 7.0;
    const auto [out, mask] = quantize_to_grid(inputs, values, grid);
    CHECK(out(0) == Catch::Approx(7.0));
    CHECK(out(1) == Catch::Approx(3.0));
    CHECK(out(2) == 0.0);
    CHECK(mask[0] == 1);
    CHECK(mask[1] == 1);
    CHECK(mask[2] == 0);
}

TEST_CASE("quantize_to_grid ties go to the lower grid index") {
    Vec grid(3);
    grid << 0.0, 1.0, 2.0;
    Vec inputs(2);
    inputs << 0.5, 1.5;
    Vec values(2);
    values << 10.0, 20.0;
    const auto [out, mask] = quantize_to_grid(inputs, values, grid);
    CHECK(mask[0] == 1);
    CHECK(out(0) == Catch::Approx(10.0));
    CHECK(mask[1] == 1);
    CHECK(out(1) == Catch::Approx(20.0));
    CHECK(mask[2] == 0);
}

TEST_CASE("quantize_to_grid matches a brute-force oracle") {
    Rng rng(61);
    Vec grid = Vec::LinSpaced(9, -2.0, 2.0);
    const Eigen::Index n = 40;
    Vec inputs(n), values(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        inputs(i) = rng.uniform(-2.5, 2.5);
        values(i) = rng.uniform(-1.0, 1.0);
    }
    const auto [out, mask] = quantize_to_grid(inputs, values, grid);

    Vec sums = Vec::Zero(9), counts = Vec::Zero(9);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < 9; ++j)
            if (std::abs(inputs(i) - grid(j)) < std::abs(inputs(i) - grid(best))) best = j;
        sums(best) += values(i);
        counts(best) += 1.0;
    }
    for (Eigen::Index j = 0; j < 9; ++j) {
        if (counts(j) > 0.0) {
            REQUIRE(mask[static_cast<std::size_t>(j)] == 1);
            CHECK(out(j) == Catch::Approx(sums(j) / counts(j)).margin(1e-12));
        } else {
            CHECK(mask[static_cast<std::size_t>(j)] == 0);
        }
    }
}

TEST_CASE("quantize_to_grid rejects malformed grids") {
    Vec grid(2);
    grid << 1.0, 1.0;
    Vec x = Vec::Zero(1), v = Vec::Zero(1);
    CHECK_THROWS_AS(quantize_to_grid(x, v, grid), std::invalid_argument);
    Vec empty;
    CHECK_THROWS_AS(quantize_to_grid(x, v, empty), std::invalid_argument);
    Vec mismatched = Vec::Zero(2);
    Vec good = Vec::LinSpaced(3, 0.0, 2.0);
    CHECK_THROWS_AS(quantize_to_grid(mismatched, v, good), std::invalid_argument);
}

TEST_CASE("aggregate mean recursion equals the batch mean per covered cell") {
    Rng rng(62);
    const Eigen::Index S = 6;
    Vec grid = Vec::LinSpaced(S, -1.0, 1.0);
    GridAggregate agg = make_aggregate(grid);
    std::vector<std::vector<double>> contributions(static_cast<std::size_t>(S));
    for (int round = 0; round < 10; ++round) {
        Vec ftilde = Vec::Zero(S);
        std::vector<char> mask(static_cast<std::size_t>(S), 0);
        for (Eigen::Index i = 0; i < S; ++i) {
            if (rng.uniform() < 0.6) {
                mask[static_cast<std::size_t>(i)] = 1;
                ftilde(i) = rng.uniform(-2.0, 2.0);
                contributions[static_cast<std::size_t>(i)].push_back(ftilde(i));
            }
        }
        aggregate_update(agg, ftilde, mask);
    }
    CHECK(agg.count == 10);
    for (Eigen::Index i = 0; i < S; ++i) {
        const auto& c = contributions[static_cast<std::size_t>(i)];
        if (c.empty()) {
            CHECK(agg.m(i) == 0.0);
            CHECK(agg.cell_count(i) == 0.0);
        } else {
            double mean = 0.0;
            for (double v : c) mean += v;
            mean /= static_cast<double>(c.size());
            CHECK(agg.m(i) == Catch::Approx(mean).margin(1e-12));
            CHECK(agg.cell_count(i) == static_cast<double>(c.size()));
        }
    }
}

TEST_CASE("aggregate covariance stays positive semidefinite") {
    Rng rng(63);
    const Eigen::Index S = 5;
    GridAggregate agg = make_aggregate(Vec::LinSpaced(S, 0.0, 4.0));
    for (int round = 0; round < 25; ++round) {
        Vec ftilde = Vec::Zero(S);
        std::vector<char> mask(static_cast<std::size_t>(S), 0);
        for (Eigen::Index i = 0; i < S; ++i) {
            if (rng.uniform() < 0.7) {
                mask[static_cast<std::size_t>(i)] = 1;
                ftilde(i) = rng.uniform(-1.0, 1.0);
            }
        }
        aggregate_update(agg, ftilde, mask);
        Eigen::SelfAdjointEigenSolver<Mat> eig(agg.Phi);
        CHECK(eig.eigenvalues().minCoeff() >= -1e-10);
        CHECK(max_norm(agg.Phi - agg.Phi.transpose()) < 1e-14);
    }
}

TEST_CASE("aggregate keeps previous means on uncovered cells") {
    GridAggregate agg = make_aggregate(Vec::LinSpaced(3, 0.0, 2.0));
    Vec f1(3);
    f1 << 1.0, 2.0, 3.0;
    aggregate_update(agg, f1, {1, 1, 1});
    Vec f2(3);
    f2 << 5.0, 0.0, 7.0;
    aggregate_update(agg, f2, {1, 0, 1});
    CHECK(agg.m(0) == Catch::Approx(3.0));
    CHECK(agg.m(1) == Catch::Approx(2.0));  // untouched by the second round
    CHECK(agg.m(2) == Catch::Approx(5.0));
}

TEST_CASE("estimation_grid default puts one point per symbol") {
    const Constellation c = make_pam(4);
    const Vec g = estimation_grid(c, 1.3, 0);
    REQUIRE(g.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(g(i) == Catch::Approx(c.points(i) * 1.3));
    const Vec g2 = estimation_grid(c, 1.3, 4);
    CHECK((g - g2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("estimation_grid other sizes span the hull uniformly") {
    const Constellation c = make_pam(4);
    const Vec g = estimation_grid(c, 0.9, 7);
    REQUIRE(g.size() == 7);
    CHECK(g(0) == Catch::Approx(c.points(0) * 0.9));
    CHECK(g(6) == Catch::Approx(c.points(3) * 0.9));
    for (int i = 1; i < 7; ++i)
        CHECK(g(i) - g(i - 1) == Catch::Approx(g(1) - g(0)).margin(1e-12));
    CHECK_THROWS_AS(estimation_grid(c, 1.0, 1), std::invalid_argument);
}

TEST_CASE("approach_full on a single frame equals frame-by-frame") {
    const FrameBatch batch = tanh_batch(71, 1, 12, CsiMode::Perfect, 10.0);
    HyperPriors priors;
    IcmConfig cfg;
    cfg.J = 8;
    cfg.tol = 0.0;
    const RelayEstimate full = approach_full(batch, 0, priors, cfg);
    const RelayEstimate fbf = approach_frame_by_frame(batch, 0, 0, priors, cfg);
    CHECK((full.f_map - fbf.f_map).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(full.hp.theta1 == Catch::Approx(fbf.hp.theta1).margin(1e-15));
    CHECK(full.hp.d == Catch::Approx(fbf.hp.d).margin(1e-15));
    CHECK((full.aggregate.m - fbf.aggregate.m).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(max_norm(full.aggregate.Phi - fbf.aggregate.Phi) < 1e-15);
    CHECK(full.icm_iterations == fbf.icm_iterations);
}

TEST_CASE("approach_full enforces its capacity cap") {
    const FrameBatch batch = tanh_batch(72, 2, 12, CsiMode::Perfect, 10.0);
    HyperPriors priors;
    IcmConfig cfg;
    CHECK_THROWS_AS(approach_full(batch, 0, priors, cfg, 0, 16), capacity_error);
    CHECK_THROWS_AS(approach_full(batch, 5, priors, cfg), std::invalid_argument);
}

TEST_CASE("sliding window with zero overlap reproduces frame-by-frame") {
    const int T = 6, K = 16;
    const FrameBatch batch = tanh_batch(73, T, K, CsiMode::Imperfect, 5.0);
    HyperPriors priors;
    IcmConfig cfg;
    cfg.J = 6;
    cfg.tol = 1e-8;
    const RelayEstimate fbf = approach_frame_by_frame(batch, 0, 0, priors, cfg);
    const RelayEstimate sw = approach_sliding(batch, 0, K, 0.0, 0, priors, cfg);
    // Window == frame and stride == window makes the window sequence exactly
    // the frame sequence, with the same warm starts.
    CHECK(sw.aggregate.count == fbf.aggregate.count);
    CHECK((sw.aggregate.m - fbf.aggregate.m).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(max_norm(sw.aggregate.Phi - fbf.aggregate.Phi) < 1e-15);
    CHECK(sw.hp.theta1 == Catch::Approx(fbf.hp.theta1).margin(1e-15));
    CHECK(sw.hp.theta2 == Catch::Approx(fbf.hp.theta2).margin(1e-15));
    CHECK(sw.hp.d == Catch::Approx(fbf.hp.d).margin(1e-15));
    CHECK((sw.f_map - fbf.f_map).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("sliding window overlap improves on frame-by-frame coverage cadence") {
    const FrameBatch batch = tanh_batch(74, 4, 16, CsiMode::Perfect, 10.0);
    HyperPriors priors;
    IcmConfig cfg;
    cfg.J = 5;
    const RelayEstimate sw = approach_sliding(batch, 0, 16, 0.5, 0, priors, cfg);
    // stride 8 over 64 samples: window starts 0, 8, ..., 48.
    CHECK(sw.aggregate.count == 7);
    CHECK(sw.approach == Approach::SlidingWindow);
    CHECK(sw.window_rebuilds >= 0);
    CHECK(sw.aggregate.cell_count.maxCoeff() > 0.0);
    CHECK(std::isfinite(sw.hp.d));
}

TEST_CASE("sliding window rejects invalid geometry") {
    const FrameBatch batch = tanh_batch(75, 2, 8, CsiMode::Perfect, 10.0);
    HyperPriors priors;
    IcmConfig cfg;
    CHECK_THROWS_AS(approach_sliding(batch, 0, 1, 0.0, 0, priors, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(approach_sliding(batch, 0, 8, 1.0, 0, priors, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(approach_sliding(batch, 0, 8, -0.1, 0, priors, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(approach_sliding(batch, 0, 17, 0.0, 0, priors, cfg),
                    std::invalid_argument);
}

TEST_CASE("full information is at least as accurate as frame-by-frame") {
    HyperPriors priors;
    IcmConfig cfg;
    cfg.J = 20;
    std::vector<double> mae_full, mae_fbf;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const FrameBatch batch = tanh_batch(800 + seed, 8, 16, CsiMode::Perfect, 10.0);
        RelayFunctionSpec truth = tanh_relay();
        const RelayEstimate full = approach_full(batch, 0, priors, cfg);
        const RelayEstimate fbf = approach_frame_by_frame(batch, 0, 0, priors, cfg);
        std::vector<char> mask_full(static_cast<std::size_t>(full.aggregate.grid.size()));
        std::vector<char> mask_fbf(static_cast<std::size_t>(fbf.aggregate.grid.size()));
        for (Eigen::Index i = 0; i < full.aggregate.grid.size(); ++i) {
            mask_full[static_cast<std::size_t>(i)] = full.aggregate.cell_count(i) > 0.0;
            mask_fbf[static_cast<std::size_t>(i)] = fbf.aggregate.cell_count(i) > 0.0;
        }
        mae_full.push_back(
            mean_abs_error(full.aggregate.m, truth, full.aggregate.grid, mask_full));
        mae_fbf.push_back(
            mean_abs_error(fbf.aggregate.m, truth, fbf.aggregate.grid, mask_fbf));
    }
    std::sort(mae_full.begin(), mae_full.end());
    std::sort(mae_fbf.begin(), mae_fbf.end());
    CHECK(mae_full[2] <= mae_fbf[2] + 1e-9);
}

TEST_CASE("pipelines are deterministic") {
    const FrameBatch batch = tanh_batch(76, 3, 12, CsiMode::Imperfect, 5.0);
    HyperPriors priors;
    IcmConfig cfg;
    cfg.J = 5;
    const RelayEstimate a = approach_sliding(batch, 0, 12, 0.5, 0, priors, cfg);
    const RelayEstimate b = approach_sliding(batch, 0, 12, 0.5, 0, priors, cfg);
    CHECK((a.aggregate.m - b.aggregate.m).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.hp.d == b.hp.d);
    CHECK(a.icm_iterations == b.icm_iterations);
}
