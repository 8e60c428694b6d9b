#pragma once

#include <atomic>
#include <chrono>
#include <climits>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "relaygp/metrics.hpp"

namespace relaygp {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    int constellation_size = 16;
    int frames = 16;             // T
    int symbols_per_frame = 32;  // K
    int relays = 1;              // L
    int icm_iters = 50;          // J
    double icm_tol = 1e-8;
    std::vector<double> snr_db = {0.0, 10.0};
    std::vector<CsiMode> csi_modes = {CsiMode::Perfect, CsiMode::Imperfect};
    std::vector<Approach> approaches = {Approach::FullInfo, Approach::FrameByFrame,
                                        Approach::SlidingWindow};
    std::vector<RelayKind> relay_functions = {RelayKind::Abs, RelayKind::Linear, RelayKind::Tanh,
                                              RelayKind::Demod};
    double linear_a = 1.0;
    double linear_b = 0.5;
    double tanh_a = 1.0;
    double tanh_w = 2.0;
    double tanh_phi = 0.0;
    double channel_err_var = 0.2;
    double noise_split = 0.5;
    int window = 32;
    double overlap = 0.5;
    int grid_size = 0;  // 0: one grid point per constellation symbol
    int trials = 1;
    std::int64_t payload_bits = 10000;
    std::uint64_t master_seed = 12345;
    std::string output_dir = ".";
};

struct MetricsRow {
    std::string function;
    std::string approach;
    std::string csi;
    double snr_db = 0.0;
    int trial = 0;
    double mae = 0.0;
    double rel_total_err = 0.0;
    double ber = 0.0;
    std::int64_t wallclock_ms = 0;
};

inline const char* relay_kind_name(RelayKind k) {
    switch (k) {
        case RelayKind::Abs: return "abs";
        case RelayKind::Linear: return "linear";
        case RelayKind::Tanh: return "tanh";
        case RelayKind::Demod: return "demod";
    }
    return "?";
}

inline const char* csi_name(CsiMode m) {
    return m == CsiMode::Perfect ? "perfect" : "imperfect";
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) parts.push_back(cur);
    }
    return parts;
}

template <class T>
T parse_number(const std::string& value, int line, const std::string& key);

template <>
inline double parse_number<double>(const std::string& value, int line, const std::string& key) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size())
        throw config_error("line " + std::to_string(line) + ": key '" + key +
                           "' expects a number, got '" + value + "'");
    return out;
}

template <>
inline std::int64_t parse_number<std::int64_t>(const std::string& value, int line,
                                               const std::string& key) {
    std::size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size())
        throw config_error("line " + std::to_string(line) + ": key '" + key +
                           "' expects an integer, got '" + value + "'");
    return out;
}

template <>
inline int parse_number<int>(const std::string& value, int line, const std::string& key) {
    const std::int64_t wide = parse_number<std::int64_t>(value, line, key);
    if (wide < INT_MIN || wide > INT_MAX)
        throw config_error("line " + std::to_string(line) + ": key '" + key +
                           "' out of integer range");
    return static_cast<int>(wide);
}

template <>
inline std::uint64_t parse_number<std::uint64_t>(const std::string& value, int line,
                                                 const std::string& key) {
    std::size_t used = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size())
        throw config_error("line " + std::to_string(line) + ": key '" + key +
                           "' expects an unsigned integer, got '" + value + "'");
    return out;
}

inline std::string fmt_g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& cfg) {
    auto fail = [](const std::string& msg) { throw config_error("config: " + msg); };
    if (cfg.constellation_size < 2 || !is_power_of_two(cfg.constellation_size))
        fail("constellation_size must be a power of two >= 2");
    if (cfg.frames < 1) fail("frames must be >= 1");
    if (cfg.symbols_per_frame < 1) fail("symbols_per_frame must be >= 1");
    if (cfg.relays < 1) fail("relays must be >= 1");
    if (cfg.icm_iters < 1) fail("icm_iters must be >= 1");
    if (cfg.icm_tol < 0.0) fail("icm_tol must be >= 0");
    if (cfg.snr_db.empty()) fail("snr_db must list at least one value");
    if (cfg.csi_modes.empty()) fail("csi_mode selects nothing");
    if (cfg.approaches.empty()) fail("approach selects nothing");
    if (cfg.relay_functions.empty()) fail("relay_function selects nothing");
    if (cfg.channel_err_var < 0.0) fail("channel_err_var must be >= 0");
    if (!(cfg.noise_split >= 0.0 && cfg.noise_split <= 1.0)) fail("noise_split must be in [0,1]");
    if (cfg.window < 2) fail("window must be >= 2");
    if (cfg.window > cfg.frames * cfg.symbols_per_frame)
        fail("window exceeds the total symbol stream");
    if (!(cfg.overlap >= 0.0 && cfg.overlap < 1.0)) fail("overlap must be in [0,1)");
    if (cfg.grid_size != 0 && cfg.grid_size < 2) fail("grid_size must be 0 (default) or >= 2");
    if (cfg.trials < 1) fail("trials must be >= 1");
    if (cfg.payload_bits < 1) fail("payload_bits must be >= 1");
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const auto hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string stripped = detail::trim(raw);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw config_error("line " + std::to_string(line) + ": expected key=value, got '" +
                               stripped + "'");
        const std::string key = detail::trim(stripped.substr(0, eq));
        const std::string value = detail::trim(stripped.substr(eq + 1));
        if (key.empty())
            throw config_error("line " + std::to_string(line) + ": empty key");

        if (key == "constellation_size") cfg.constellation_size = detail::parse_number<int>(value, line, key);
        else if (key == "frames") cfg.frames = detail::parse_number<int>(value, line, key);
        else if (key == "symbols_per_frame") cfg.symbols_per_frame = detail::parse_number<int>(value, line, key);
        else if (key == "relays") cfg.relays = detail::parse_number<int>(value, line, key);
        else if (key == "icm_iters") cfg.icm_iters = detail::parse_number<int>(value, line, key);
        else if (key == "icm_tol") cfg.icm_tol = detail::parse_number<double>(value, line, key);
        else if (key == "linear_a") cfg.linear_a = detail::parse_number<double>(value, line, key);
        else if (key == "linear_b") cfg.linear_b = detail::parse_number<double>(value, line, key);
        else if (key == "tanh_a") cfg.tanh_a = detail::parse_number<double>(value, line, key);
        else if (key == "tanh_w") cfg.tanh_w = detail::parse_number<double>(value, line, key);
        else if (key == "tanh_phi") cfg.tanh_phi = detail::parse_number<double>(value, line, key);
        else if (key == "channel_err_var") cfg.channel_err_var = detail::parse_number<double>(value, line, key);
        else if (key == "noise_split") cfg.noise_split = detail::parse_number<double>(value, line, key);
        else if (key == "window") cfg.window = detail::parse_number<int>(value, line, key);
        else if (key == "overlap") cfg.overlap = detail::parse_number<double>(value, line, key);
        else if (key == "grid_size") cfg.grid_size = detail::parse_number<int>(value, line, key);
        else if (key == "trials") cfg.trials = detail::parse_number<int>(value, line, key);
        else if (key == "payload_bits") cfg.payload_bits = detail::parse_number<std::int64_t>(value, line, key);
        else if (key == "master_seed") cfg.master_seed = detail::parse_number<std::uint64_t>(value, line, key);
        else if (key == "output_dir") cfg.output_dir = value;
        else if (key == "snr_db") {
            cfg.snr_db.clear();
            for (const auto& part : detail::split_list(value))
                cfg.snr_db.push_back(detail::parse_number<double>(part, line, key));
        } else if (key == "csi_mode") {
            if (value == "perfect") cfg.csi_modes = {CsiMode::Perfect};
            else if (value == "imperfect") cfg.csi_modes = {CsiMode::Imperfect};
            else if (value == "both") cfg.csi_modes = {CsiMode::Perfect, CsiMode::Imperfect};
            else
                throw config_error("line " + std::to_string(line) +
                                   ": csi_mode must be perfect|imperfect|both");
        } else if (key == "approach") {
            if (value == "full") cfg.approaches = {Approach::FullInfo};
            else if (value == "frame") cfg.approaches = {Approach::FrameByFrame};
            else if (value == "sliding") cfg.approaches = {Approach::SlidingWindow};
            else if (value == "all")
                cfg.approaches = {Approach::FullInfo, Approach::FrameByFrame,
                                  Approach::SlidingWindow};
            else
                throw config_error("line " + std::to_string(line) +
                                   ": approach must be full|frame|sliding|all");
        } else if (key == "relay_function") {
            if (value == "all") {
                cfg.relay_functions = {RelayKind::Abs, RelayKind::Linear, RelayKind::Tanh,
                                       RelayKind::Demod};
            } else {
                cfg.relay_functions.clear();
                for (const auto& part : detail::split_list(value)) {
                    if (part == "abs") cfg.relay_functions.push_back(RelayKind::Abs);
                    else if (part == "linear") cfg.relay_functions.push_back(RelayKind::Linear);
                    else if (part == "tanh") cfg.relay_functions.push_back(RelayKind::Tanh);
                    else if (part == "demod") cfg.relay_functions.push_back(RelayKind::Demod);
                    else
                        throw config_error("line " + std::to_string(line) +
                                           ": relay_function must list abs|linear|tanh|demod or 'all'");
                }
            }
        } else {
            throw config_error("line " + std::to_string(line) + ": unknown key '" + key + "'");
        }
    }
    validate_config(cfg);
    return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

inline RelayFunctionSpec relay_spec_for(const ExperimentConfig& cfg, RelayKind kind,
                                        const Constellation& c) {
    switch (kind) {
        case RelayKind::Abs: return abs_relay();
        case RelayKind::Linear: return linear_relay(cfg.linear_a, cfg.linear_b);
        case RelayKind::Tanh: return tanh_relay(cfg.tanh_a, cfg.tanh_w, cfg.tanh_phi);
        case RelayKind::Demod: return demod_relay(c);
    }
    throw std::logic_error("relay_spec_for: unreachable");
}

// BER study over the configured SNR grid in the five canonical detector
// modes. Multi-function configs fall back to the Linear relay: BER against a
// non-injective relay function measures the relay, not the estimator.
inline std::vector<BerPoint> ber_curve(const ExperimentConfig& cfg) {
    const Constellation c = make_pam(cfg.constellation_size);
    RelayKind kind = RelayKind::Linear;
    if (cfg.relay_functions.size() == 1) kind = cfg.relay_functions[0];
    const RelayFunctionSpec fn = relay_spec_for(cfg, kind, c);
    const HyperPriors priors;
    const IcmConfig icm{cfg.icm_iters, cfg.icm_tol, kJitterFloor};
    return ber_study(cfg.master_seed, c, fn, cfg.frames, cfg.symbols_per_frame,
                     cfg.channel_err_var, cfg.noise_split, cfg.snr_db, cfg.payload_bits,
                     cfg.trials, priors, icm);
}

namespace detail {

struct CellKey {
    RelayKind fn;
    CsiMode csi;
    Approach ap;
    double snr_db;
};

inline std::string snr_token(double snr) {
    char plain[40];
    std::snprintf(plain, sizeof plain, "%g", snr);
    std::string out;
    for (const char* p = plain; *p; ++p) {
        if (*p == '.') out.push_back('p');
        else if (*p == '-') out.push_back('m');
        else if (*p != '+') out.push_back(*p);
    }
    return out;
}

inline std::string cell_id(const CellKey& key) {
    return std::string(relay_kind_name(key.fn)) + "_" + approach_name(key.ap) + "_" +
           csi_name(key.csi) + "_snr" + snr_token(key.snr_db);
}

struct EstimateTable {
    Vec grid;
    Vec mean;
    Vec var;
    Vec truth;
};

struct TaskOutput {
    MetricsRow row;
    bool detailed = false;  // trial 0 carries trace + estimate table
    std::vector<IcmTraceRow> trace;
    EstimateTable table;
};

inline TaskOutput run_cell_trial(const ExperimentConfig& cfg, const CellKey& key, int trial,
                                 const Constellation& c) {
    const auto t0 = std::chrono::steady_clock::now();

    const RelayFunctionSpec fn = relay_spec_for(cfg, key.fn, c);
    const NoiseVars nv = snr_to_noise(key.snr_db, cfg.noise_split);
    const std::uint64_t batch_seed =
        Rng::derive_seed(cfg.master_seed, {stream::kInstance, static_cast<std::uint64_t>(trial)});
    const std::vector<RelayFunctionSpec> specs(static_cast<std::size_t>(cfg.relays), fn);
    const FrameBatch batch =
        make_frame_batch(batch_seed, c, cfg.frames, cfg.symbols_per_frame, specs,
                         cfg.channel_err_var, key.csi, nv.sigma_w2, nv.sigma_v2);

    const HyperPriors priors;
    const IcmConfig icm{cfg.icm_iters, cfg.icm_tol, kJitterFloor};
    RelayEstimate est;
    switch (key.ap) {
        case Approach::FullInfo:
            est = approach_full(batch, 0, priors, icm, cfg.grid_size);
            break;
        case Approach::FrameByFrame:
            est = approach_frame_by_frame(batch, 0, cfg.grid_size, priors, icm);
            break;
        case Approach::SlidingWindow:
            est = approach_sliding(batch, 0, cfg.window, cfg.overlap, cfg.grid_size, priors, icm);
            break;
    }

    RelayFunctionSpec truth = fn;
    if (truth.kind == RelayKind::Demod) truth.demod_h = batch.channels[0].h;

    std::vector<char> mask(static_cast<std::size_t>(est.aggregate.grid.size()), 0);
    for (Eigen::Index i = 0; i < est.aggregate.cell_count.size(); ++i)
        if (est.aggregate.cell_count(i) > 0.0) mask[static_cast<std::size_t>(i)] = 1;

    TaskOutput out;
    out.row.function = relay_kind_name(key.fn);
    out.row.approach = approach_name(key.ap);
    out.row.csi = csi_name(key.csi);
    out.row.snr_db = key.snr_db;
    out.row.trial = trial;
    out.row.mae = mean_abs_error(est.aggregate.m, truth, est.aggregate.grid, mask);
    out.row.rel_total_err = relative_total_error(est.aggregate.m, truth, est.aggregate.grid, mask);

    // Paired payload detection with the estimated function against the true
    // channel reference, so the BER column reflects the function-estimation
    // error alone (detecting with each run's own channel estimates would
    // cancel the CSI error against the training-side division by g_hat).
    {
        const ChannelRealization& ch = batch.channels[0];
        const Vec hyp = detect_hypotheses(est.aggregate, ch.h, ch.g, c);
        Rng pay = Rng::substream(cfg.master_seed,
                                 {stream::kPayload, static_cast<std::uint64_t>(trial)});
        const std::int64_t n_sym =
            (cfg.payload_bits + c.bits_per_symbol - 1) / c.bits_per_symbol;
        const double sd_w = std::sqrt(nv.sigma_w2);
        const double sd_v = std::sqrt(nv.sigma_v2);
        std::int64_t errors = 0;
        for (std::int64_t j = 0; j < n_sym; ++j) {
            const int tx = static_cast<int>(pay.uniform_int(c.points.size()));
            const double r = c.points(tx) * ch.h + sd_w * pay.normal();
            const double y = apply_relay_function(truth, r) * ch.g + sd_v * pay.normal();
            const int det = ml_detect(y, hyp);
            errors += std::popcount(c.labels[static_cast<std::size_t>(tx)] ^
                                    c.labels[static_cast<std::size_t>(det)]);
        }
        out.row.ber = static_cast<double>(errors) /
                      static_cast<double>(n_sym * c.bits_per_symbol);
    }

    if (trial == 0) {
        out.detailed = true;
        out.trace = est.trace;
        out.table.grid = est.aggregate.grid;
        out.table.mean = est.aggregate.m;
        out.table.truth = truth_on_grid(truth, est.aggregate.grid);
        if (key.ap == Approach::FullInfo) {
            const PipelineData data = pipeline_data(batch, 0, priors);
            const auto [means, vars] = gp_predict_batch({data.inputs, data.targets}, est.hp,
                                                        data.priors, est.aggregate.grid,
                                                        kJitterFloor);
            out.table.var = vars;
        } else {
            out.table.var = est.aggregate.Phi.diagonal();
        }
    }

    const auto t1 = std::chrono::steady_clock::now();
    out.row.wallclock_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
    return out;
}

}  // namespace detail

// Executes the configured cross-product of relay functions, CSI modes,
// approaches, and SNR points; writes metrics.csv, ber.csv, and per-cell
// trace/estimate files into output_dir. Trials run on `jobs` threads with a
// deterministic ordered reduction, so outputs are independent of scheduling
// (the wallclock_ms column is the one measured, non-deterministic value).
inline void run_experiment(const ExperimentConfig& cfg, int jobs = 1) {
    validate_config(cfg);
    const Constellation c = make_pam(cfg.constellation_size);

    std::vector<detail::CellKey> cells;
    for (RelayKind fn : cfg.relay_functions)
        for (CsiMode csi : cfg.csi_modes)
            for (Approach ap : cfg.approaches)
                for (double snr : cfg.snr_db) cells.push_back({fn, csi, ap, snr});

    struct Task {
        std::size_t cell;
        int trial;
    };
    std::vector<Task> tasks;
    tasks.reserve(cells.size() * static_cast<std::size_t>(cfg.trials));
    for (std::size_t ci = 0; ci < cells.size(); ++ci)
        for (int trial = 0; trial < cfg.trials; ++trial) tasks.push_back({ci, trial});

    std::vector<detail::TaskOutput> outputs(tasks.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            outputs[i] = detail::run_cell_trial(cfg, cells[tasks[i].cell], tasks[i].trial, c);
    } else {
        std::atomic<std::size_t> cursor{0};
        std::atomic<bool> failed{false};
        std::exception_ptr first_error;
        std::mutex err_mu;
        auto worker = [&]() {
            while (!failed.load(std::memory_order_relaxed)) {
                const std::size_t i = cursor.fetch_add(1);
                if (i >= tasks.size()) return;
                try {
                    outputs[i] =
                        detail::run_cell_trial(cfg, cells[tasks[i].cell], tasks[i].trial, c);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    failed.store(true, std::memory_order_relaxed);
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    namespace fs = std::filesystem;
    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);

    {
        std::ofstream out(out_dir / "metrics.csv");
        if (!out) throw std::runtime_error("run_experiment: cannot write metrics.csv");
        out << "function,approach,csi,snr_db,trial,mae,rel_total_err,ber,wallclock_ms\n";
        for (const auto& o : outputs) {
            out << o.row.function << ',' << o.row.approach << ',' << o.row.csi << ','
                << detail::fmt_g17(o.row.snr_db) << ',' << o.row.trial << ','
                << detail::fmt_g17(o.row.mae) << ',' << detail::fmt_g17(o.row.rel_total_err)
                << ',' << detail::fmt_g17(o.row.ber) << ',' << o.row.wallclock_ms << '\n';
        }
    }

    {
        const std::vector<BerPoint> curve = ber_curve(cfg);
        std::ofstream out(out_dir / "ber.csv");
        if (!out) throw std::runtime_error("run_experiment: cannot write ber.csv");
        out << "snr_db,mode,ber,bits\n";
        for (const auto& p : curve)
            out << detail::fmt_g17(p.snr_db) << ',' << p.mode << ',' << detail::fmt_g17(p.ber)
                << ',' << p.bits << '\n';
    }

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (!outputs[i].detailed) continue;
        const std::string id = detail::cell_id(cells[tasks[i].cell]);
        {
            std::ofstream out(out_dir / ("trace_" + id + ".csv"));
            if (!out) throw std::runtime_error("run_experiment: cannot write trace CSV");
            out << "iter,theta1,theta2,d,log_post\n";
            for (std::size_t it = 0; it < outputs[i].trace.size(); ++it) {
                const auto& row = outputs[i].trace[it];
                out << (it + 1) << ',' << detail::fmt_g17(row.theta1) << ','
                    << detail::fmt_g17(row.theta2) << ',' << detail::fmt_g17(row.d) << ','
                    << detail::fmt_g17(row.log_post) << '\n';
            }
        }
        {
            const auto& tb = outputs[i].table;
            std::ofstream out(out_dir / ("estimate_" + id + ".csv"));
            if (!out) throw std::runtime_error("run_experiment: cannot write estimate CSV");
            out << "grid,est_mean,est_var,truth\n";
            for (Eigen::Index r = 0; r < tb.grid.size(); ++r)
                out << detail::fmt_g17(tb.grid(r)) << ',' << detail::fmt_g17(tb.mean(r)) << ','
                    << detail::fmt_g17(tb.var(r)) << ',' << detail::fmt_g17(tb.truth(r)) << '\n';
        }
    }
}

}  // namespace relaygp
