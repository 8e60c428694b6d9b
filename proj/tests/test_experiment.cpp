#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "relaygp/experiment.hpp"

using namespace relaygp;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// metrics.csv minus its wallclock column, the one legitimately
// non-deterministic field.
std::string strip_last_column(const std::string& csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        const auto comma = line.rfind(',');
        out << line.substr(0, comma) << '\n';
    }
    return out.str();
}

ExperimentConfig small_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.constellation_size = 4;
    cfg.frames = 4;
    cfg.symbols_per_frame = 8;
    cfg.icm_iters = 5;
    cfg.snr_db = {0.0, 10.0};
    cfg.window = 8;
    cfg.overlap = 0.5;
    cfg.trials = 2;
    cfg.payload_bits = 500;
    cfg.master_seed = 4242;
    cfg.output_dir = out_dir;
    return cfg;
}

}  // namespace

TEST_CASE("parse_config_text with empty input keeps the documented defaults") {
    const ExperimentConfig cfg = parse_config_text("");
    CHECK(cfg.constellation_size == 16);
    CHECK(cfg.frames == 16);
    CHECK(cfg.symbols_per_frame == 32);
    CHECK(cfg.relays == 1);
    CHECK(cfg.icm_iters == 50);
    CHECK(cfg.icm_tol == 1e-8);
    REQUIRE(cfg.snr_db.size() == 2);
    CHECK(cfg.snr_db[0] == 0.0);
    CHECK(cfg.snr_db[1] == 10.0);
    CHECK(cfg.csi_modes.size() == 2);
    CHECK(cfg.approaches.size() == 3);
    CHECK(cfg.relay_functions.size() == 4);
    CHECK(cfg.channel_err_var == 0.2);
    CHECK(cfg.noise_split == 0.5);
    CHECK(cfg.window == 32);
    CHECK(cfg.overlap == 0.5);
    CHECK(cfg.grid_size == 0);
    CHECK(cfg.trials == 1);
    CHECK(cfg.payload_bits == 10000);
    CHECK(cfg.master_seed == 12345);
    CHECK(cfg.output_dir == ".");
}

TEST_CASE("parse_config_text reads keys, comments, and lists") {
    const std::string text =
        "# comment line\n"
        "constellation_size = 4\n"
        "frames=8   # trailing comment\n"
        "symbols_per_frame = 16\n"
        "\n"
        "snr_db = 0, 5, 10\n"
        "csi_mode = imperfect\n"
        "approach = sliding\n"
        "relay_function = abs, tanh\n"
        "window = 16\n"
        "overlap = 0.25\n"
        "master_seed = 999\n"
        "output_dir = results/run1\n";
    const ExperimentConfig cfg = parse_config_text(text);
    CHECK(cfg.constellation_size == 4);
    CHECK(cfg.frames == 8);
    CHECK(cfg.symbols_per_frame == 16);
    REQUIRE(cfg.snr_db.size() == 3);
    CHECK(cfg.snr_db[1] == 5.0);
    REQUIRE(cfg.csi_modes.size() == 1);
    CHECK(cfg.csi_modes[0] == CsiMode::Imperfect);
    REQUIRE(cfg.approaches.size() == 1);
    CHECK(cfg.approaches[0] == Approach::SlidingWindow);
    REQUIRE(cfg.relay_functions.size() == 2);
    CHECK(cfg.relay_functions[0] == RelayKind::Abs);
    CHECK(cfg.relay_functions[1] == RelayKind::Tanh);
    CHECK(cfg.window == 16);
    CHECK(cfg.overlap == 0.25);
    CHECK(cfg.master_seed == 999);
    CHECK(cfg.output_dir == "results/run1");
}

TEST_CASE("parse_config_text reports offending lines") {
    try {
        parse_config_text("frames = 4\nnot_a_key = 3\n");
        FAIL("expected config_error");
    } catch (const config_error& e) {
        const std::string what = e.what();
        CHECK(what.find("line 2") != std::string::npos);
        CHECK(what.find("not_a_key") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config_text("frames = abc\n"), config_error);
    CHECK_THROWS_AS(parse_config_text("frames = 4.5\n"), config_error);
    CHECK_THROWS_AS(parse_config_text("just a sentence\n"), config_error);
    CHECK_THROWS_AS(parse_config_text("= 4\n"), config_error);
    CHECK_THROWS_AS(parse_config_text("csi_mode = sometimes\n"), config_error);
    CHECK_THROWS_AS(parse_config_text("approach = psychic\n"), config_error);
    CHECK_THROWS_AS(parse_config_text("relay_function = cubic\n"), config_error);
}

TEST_CASE("validate_config rejects out-of-domain settings") {
    auto broken = [](auto mutate) {
        ExperimentConfig cfg;
        mutate(cfg);
        return cfg;
    };
    CHECK_THROWS_AS(
        validate_config(broken([](ExperimentConfig& c) { c.constellation_size = 3; })),
        config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.frames = 0; })),
                    config_error);
    CHECK_THROWS_AS(
        validate_config(broken([](ExperimentConfig& c) { c.symbols_per_frame = 0; })),
        config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.icm_iters = 0; })),
                    config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.icm_tol = -1.0; })),
                    config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.snr_db.clear(); })),
                    config_error);
    CHECK_THROWS_AS(
        validate_config(broken([](ExperimentConfig& c) { c.noise_split = 1.5; })),
        config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.window = 1; })),
                    config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) {
                        c.frames = 2;
                        c.symbols_per_frame = 4;
                        c.window = 9;
                    })),
                    config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.overlap = 1.0; })),
                    config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.grid_size = 1; })),
                    config_error);
    CHECK_THROWS_AS(validate_config(broken([](ExperimentConfig& c) { c.trials = 0; })),
                    config_error);
    CHECK_THROWS_AS(
        validate_config(broken([](ExperimentConfig& c) { c.payload_bits = 0; })),
        config_error);
    CHECK_THROWS_AS(
        validate_config(broken([](ExperimentConfig& c) { c.channel_err_var = -0.1; })),
        config_error);
    CHECK_NOTHROW(validate_config(ExperimentConfig{}));
}

TEST_CASE("relay_spec_for applies configured shape parameters") {
    ExperimentConfig cfg;
    cfg.linear_a = 2.0;
    cfg.linear_b = -0.25;
    cfg.tanh_a = 1.5;
    cfg.tanh_w = 3.0;
    cfg.tanh_phi = 0.1;
    const Constellation c = make_pam(4);
    const RelayFunctionSpec lin = relay_spec_for(cfg, RelayKind::Linear, c);
    CHECK(apply_relay_function(lin, 1.0) == Catch::Approx(1.75));
    const RelayFunctionSpec th = relay_spec_for(cfg, RelayKind::Tanh, c);
    CHECK(apply_relay_function(th, 0.2) ==
          Catch::Approx(1.5 * std::tanh(3.0 * 0.2 + 0.1)));
    const RelayFunctionSpec dm = relay_spec_for(cfg, RelayKind::Demod, c);
    CHECK(dm.constellation.points.size() == 4);
}

TEST_CASE("cell ids name function, approach, csi, and snr") {
    detail::CellKey key{RelayKind::Tanh, CsiMode::Perfect, Approach::FullInfo, 10.0};
    CHECK(detail::cell_id(key) == "tanh_full_perfect_snr10");
    key = {RelayKind::Demod, CsiMode::Imperfect, Approach::SlidingWindow, -2.5};
    CHECK(detail::cell_id(key) == "demod_sliding_imperfect_snrm2p5");
    CHECK(detail::snr_token(0.0) == "0");
    CHECK(detail::snr_token(12.0) == "12");
}

TEST_CASE("run_experiment writes the full CSV set") {
    const fs::path dir = fs::path("test_out_experiment");
    fs::remove_all(dir);
    const ExperimentConfig cfg = small_config(dir.string());
    run_experiment(cfg);

    REQUIRE(fs::exists(dir / "metrics.csv"));
    REQUIRE(fs::exists(dir / "ber.csv"));

    const std::string metrics = read_file(dir / "metrics.csv");
    std::istringstream in(metrics);
    std::string header;
    std::getline(in, header);
    CHECK(header == "function,approach,csi,snr_db,trial,mae,rel_total_err,ber,wallclock_ms");

    int rows = 0;
    std::set<std::string> combos;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++rows;
        std::istringstream cols(line);
        std::string fn, ap, csi;
        std::getline(cols, fn, ',');
        std::getline(cols, ap, ',');
        std::getline(cols, csi, ',');
        combos.insert(fn + "/" + ap + "/" + csi);
    }
    // 4 functions x 2 csi x 3 approaches x 2 snr x 2 trials
    CHECK(rows == 96);
    CHECK(combos.size() == 24);

    const std::string ber = read_file(dir / "ber.csv");
    std::istringstream bin(ber);
    std::getline(bin, header);
    CHECK(header == "snr_db,mode,ber,bits");
    int ber_rows = 0;
    while (std::getline(bin, line))
        if (!line.empty()) ++ber_rows;
    CHECK(ber_rows == static_cast<int>(ber_modes().size() * cfg.snr_db.size()));

    // Every cell gets a trial-0 trace and estimate table.
    CHECK(fs::exists(dir / "trace_tanh_full_perfect_snr10.csv"));
    CHECK(fs::exists(dir / "estimate_tanh_full_perfect_snr10.csv"));
    CHECK(fs::exists(dir / "trace_abs_sliding_imperfect_snr0.csv"));
    CHECK(fs::exists(dir / "estimate_linear_frame_imperfect_snr0.csv"));
    int trace_files = 0, estimate_files = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("trace_", 0) == 0) ++trace_files;
        if (name.rfind("estimate_", 0) == 0) ++estimate_files;
    }
    CHECK(trace_files == 48);
    CHECK(estimate_files == 48);

    const std::string est = read_file(dir / "estimate_tanh_full_perfect_snr10.csv");
    std::istringstream ein(est);
    std::getline(ein, header);
    CHECK(header == "grid,est_mean,est_var,truth");
    int est_rows = 0;
    while (std::getline(ein, line))
        if (!line.empty()) ++est_rows;
    CHECK(est_rows == cfg.constellation_size);

    const std::string tr = read_file(dir / "trace_tanh_full_perfect_snr10.csv");
    std::istringstream tin(tr);
    std::getline(tin, header);
    CHECK(header == "iter,theta1,theta2,d,log_post");
}

TEST_CASE("run_experiment is byte-deterministic modulo wallclock") {
    const fs::path dir1 = fs::path("test_out_det1");
    const fs::path dir2 = fs::path("test_out_det2");
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    ExperimentConfig cfg = small_config(dir1.string());
    cfg.relay_functions = {RelayKind::Tanh, RelayKind::Abs};
    cfg.trials = 1;
    run_experiment(cfg);
    cfg.output_dir = dir2.string();
    run_experiment(cfg, 2);  // thread count must not change results

    CHECK(strip_last_column(read_file(dir1 / "metrics.csv")) ==
          strip_last_column(read_file(dir2 / "metrics.csv")));
    CHECK(read_file(dir1 / "ber.csv") == read_file(dir2 / "ber.csv"));
    for (const auto& entry : fs::directory_iterator(dir1)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("trace_", 0) == 0 || name.rfind("estimate_", 0) == 0) {
            CHECK(read_file(dir1 / name) == read_file(dir2 / name));
        }
    }
}

TEST_CASE("parse_config reports missing files") {
    CHECK_THROWS_AS(parse_config("definitely_not_here.cfg"), config_error);
}
