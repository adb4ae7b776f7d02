#pragma once

#include <rsfinv/adjoint.hpp>
#include <rsfinv/inversion.hpp>
#include <rsfinv/io.hpp>

#include <atomic>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rsfinv {

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3 };

struct Logger {
    LogLevel level = LogLevel::info;

    void log(LogLevel lv, const std::string& msg) const {
        if (lv < level) return;
        static const char* names[] = {"debug", "info", "warn", "error"};
        std::fprintf(stderr, "[%s] %s\n", names[static_cast<int>(lv)], msg.c_str());
    }
    void debug(const std::string& m) const { log(LogLevel::debug, m); }
    void info(const std::string& m) const { log(LogLevel::info, m); }
    void warn(const std::string& m) const { log(LogLevel::warn, m); }
    void error(const std::string& m) const { log(LogLevel::error, m); }
};

inline LogLevel log_level_from_name(const std::string& s) {
    if (s == "debug") return LogLevel::debug;
    if (s == "info") return LogLevel::info;
    if (s == "warn") return LogLevel::warn;
    if (s == "error") return LogLevel::error;
    throw std::invalid_argument("unknown log level '" + s + "'");
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateResult {
    StageHistory hist;
    bool aborted = false;      // instability detected; outputs are partial
    int stages_completed = 0;  // filled stage rows in hist
    std::vector<std::filesystem::path> files;
};

/// Forward run with stage recording plus snapshot/slip archiving. Emits
/// per-receiver seismograms, a stage-subsampled fault V* space-time table,
/// slip profiles at regular intervals, field snapshots at the listed times,
/// and a manifest tying every file to the config hash.
inline SimulateResult cmd_simulate(const RunConfig& cfg, const std::filesystem::path& outdir,
                                   const Logger& log = {}) {
    cfg.validate();
    std::filesystem::create_directories(outdir);
    AssembledRun run = assemble_run(cfg);
    ForwardProblem fp(run.grid, run.mu_minus, run.mu_plus, run.friction, run.options);
    const int nsteps = cfg.nsteps();
    const int nrec = run.receivers.size();
    const int nf = fp.fault_points();
    log.info("simulate: m = " + std::to_string(cfg.m) + ", " + std::to_string(nsteps) +
             " steps, " + std::to_string(nrec) + " receivers");

    SimulateResult res;
    StageHistory& h = res.hist;
    h.dt = cfg.dt;
    h.nsteps = nsteps;
    h.v_star.setZero(4 * nsteps, nf);
    h.psi.setZero(4 * nsteps, nf);
    h.measurements.setZero(4 * nsteps, nrec);
    h.residuals.setZero(4 * nsteps, nrec);
    h.stage_times.setZero(4 * nsteps);

    // slip and snapshot archives, captured at step starts (stage row 4n)
    auto slip_of = [&](const Vec& y) {
        const auto& segs = fp.segments();
        Vec s(nf);
        for (int i = 0; i < nf; ++i)
            s(i) = y(segs[6].offset + i) - y(segs[3].offset + i);
        return s;
    };
    std::vector<std::pair<double, Vec>> slips;
    std::vector<std::pair<double, Vec>> snapshots; // full state copies
    std::vector<double> snap_left(cfg.snapshot_times.begin(), cfg.snapshot_times.end());
    double next_slip = 0.0;

    auto stage = [&](int row, double ts, const Vec& ys) {
        if (row % 4 == 0) {
            if (ts + 1e-12 >= next_slip) {
                slips.emplace_back(ts, slip_of(ys));
                next_slip += cfg.slip_interval;
            }
            for (auto it = snap_left.begin(); it != snap_left.end();)
                if (std::abs(*it - ts) <= 0.5 * cfg.dt + 1e-12) {
                    snapshots.emplace_back(ts, ys);
                    it = snap_left.erase(it);
                } else {
                    ++it;
                }
        }
        StageRecord rec;
        Vec dy = fp.rhs(ts, ys, &rec);
        h.v_star.row(row) = rec.v_star;
        h.psi.row(row) = rec.psi;
        h.stage_times(row) = ts;
        for (int k = 0; k < nrec; ++k) {
            const double mv = measure(fp, run.receivers, run.receivers.receivers[k], ys);
            h.measurements(row, k) = mv;
            h.residuals(row, k) = mv;
        }
        res.stages_completed = row + 1;
        return dy;
    };

    Vec y0 = fp.initial_state(cfg.v_init, -cfg.v_init);
    const double blowup =
        run.options.instability_factor * std::max(y0.lpNorm<Eigen::Infinity>(), 1e-6);
    Vec yT;
    try {
        yT = rk4_run(stage, y0, 0.0, cfg.dt, nsteps, blowup);
    } catch (const std::runtime_error& e) {
        res.aborted = true;
        log.warn(std::string("instability abort: ") + e.what() + "; flagging partial outputs");
    }
    const int rows = res.aborted ? (res.stages_completed / 4) * 4 : 4 * nsteps;

    // seismograms: time + one column per receiver, all completed stage rows
    {
        std::vector<std::string> hd{"time"};
        for (int k = 0; k < nrec; ++k) hd.push_back("rec_" + std::to_string(k));
        Eigen::MatrixXd tbl(rows, 1 + nrec);
        tbl.col(0) = h.stage_times.head(rows);
        tbl.rightCols(nrec) = h.measurements.topRows(rows);
        write_csv(outdir / "receivers.csv", hd, tbl);
        write_sidecar(outdir / "receivers.csv", cfg.hash(),
                      "receiver seismograms at RK stage times",
                      json{{"measurement", cfg.misfit_kind},
                           {"aborted", res.aborted},
                           {"stage_rows", rows}});
        res.files.push_back(outdir / "receivers.csv");
        res.files.push_back(outdir / "receivers.csv.json");
    }
    // receiver positions
    {
        auto pos = cutout_positions(cfg.layout);
        Eigen::MatrixXd tbl(static_cast<Eigen::Index>(pos.size()), 2);
        for (std::size_t k = 0; k < pos.size(); ++k) {
            tbl(static_cast<Eigen::Index>(k), 0) = pos[k].first;
            tbl(static_cast<Eigen::Index>(k), 1) = pos[k].second;
        }
        write_csv(outdir / "receiver_positions.csv", {"x", "y"}, tbl);
        res.files.push_back(outdir / "receiver_positions.csv");
    }
    // fault slip velocity, stage-subsampled
    {
        const int stride = cfg.fault_stride;
        const int nrows = (rows + stride - 1) / stride;
        std::vector<std::string> hd{"time"};
        for (int i = 0; i < nf; ++i) hd.push_back("x_" + std::to_string(i));
        Eigen::MatrixXd tbl(nrows, 1 + nf);
        for (int r = 0; r < nrows; ++r) {
            tbl(r, 0) = h.stage_times(r * stride);
            tbl.row(r).tail(nf) = h.v_star.row(r * stride);
        }
        write_csv(outdir / "fault_vstar.csv", hd, tbl);
        write_sidecar(outdir / "fault_vstar.csv", cfg.hash(),
                      "fault slip velocity V* over stage-subsampled time",
                      json{{"stride", stride}, {"aborted", res.aborted}});
        res.files.push_back(outdir / "fault_vstar.csv");
        res.files.push_back(outdir / "fault_vstar.csv.json");
    }
    // slip profiles
    {
        std::vector<std::string> hd{"time"};
        for (int i = 0; i < nf; ++i) hd.push_back("x_" + std::to_string(i));
        Eigen::MatrixXd tbl(static_cast<Eigen::Index>(slips.size()), 1 + nf);
        for (std::size_t r = 0; r < slips.size(); ++r) {
            tbl(static_cast<Eigen::Index>(r), 0) = slips[r].first;
            tbl.row(static_cast<Eigen::Index>(r)).tail(nf) = slips[r].second;
        }
        write_csv(outdir / "slip_profiles.csv", hd, tbl);
        write_sidecar(outdir / "slip_profiles.csv", cfg.hash(),
                      "fault slip [[u]] profiles at regular intervals",
                      json{{"interval_s", cfg.slip_interval}, {"aborted", res.aborted}});
        res.files.push_back(outdir / "slip_profiles.csv");
        res.files.push_back(outdir / "slip_profiles.csv.json");
    }
    // field snapshots + gnuplot stub
    for (std::size_t si = 0; si < snapshots.size(); ++si) {
        const auto& [ts, ys] = snapshots[si];
        const Eigen::Index N2 = 2 * static_cast<Eigen::Index>(run.grid.m) *
                                run.grid.n_across;
        Eigen::MatrixXd tbl(N2, 5);
        Eigen::Index r = 0;
        for (int blk : {0, 1}) {
            const GridBlock& gb = blk == 0 ? run.grid.minus : run.grid.plus;
            auto u = blk == 0 ? fp.u_minus(ys) : fp.u_plus(ys);
            auto v = blk == 0 ? fp.v_minus(ys) : fp.v_plus(ys);
            for (int j = 0; j < gb.n; ++j)
                for (int i = 0; i < gb.m; ++i, ++r) {
                    const int id = i + gb.m * j;
                    tbl(r, 0) = blk;
                    tbl(r, 1) = gb.x(i, j);
                    tbl(r, 2) = gb.y(i, j);
                    tbl(r, 3) = u(id);
                    tbl(r, 4) = v(id);
                }
        }
        const auto p = outdir / ("snapshot_" + std::to_string(si) + ".csv");
        write_csv(p, {"block", "x", "y", "u", "v"}, tbl);
        write_sidecar(p, cfg.hash(), "field snapshot", json{{"time_s", ts}});
        res.files.push_back(p);
        res.files.push_back(outdir / ("snapshot_" + std::to_string(si) + ".csv.json"));
    }
    if (!snapshots.empty()) {
        std::ofstream gp(outdir / "plot_snapshots.gp");
        gp << "# gnuplot stub: splot the velocity field of a snapshot\n"
              "set datafile separator ','\n"
              "set view map\n"
              "splot 'snapshot_0.csv' using 2:3:5 with points pt 5 ps 0.5 palette\n";
        res.files.push_back(outdir / "plot_snapshots.gp");
    }
    // run summary
    {
        json j;
        j["config_hash"] = hex64(cfg.hash());
        j["aborted"] = res.aborted;
        j["stage_rows"] = rows;
        j["nsteps"] = nsteps;
        j["receivers"] = nrec;
        j["units"] = units_block();
        std::ofstream out(outdir / "run.json");
        out << j.dump(2) << "\n";
        res.files.push_back(outdir / "run.json");
    }
    write_manifest(outdir, cfg.hash(), res.files);
    return res;
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

struct MakeDataResult {
    StageHistory hist;
    std::filesystem::path data_file;
};

/// Synthetic-data generation at the configured truth parameters. With
/// source_m > 0 the forward run uses the finer fault grid while keeping dt,
/// T and the physical receiver positions, producing stage-aligned
/// high-resolution data usable by a coarser inversion run.
inline MakeDataResult cmd_make_data(const RunConfig& cfg, const std::filesystem::path& outdir,
                                    int source_m = 0, const Logger& log = {}) {
    cfg.validate();
    std::filesystem::create_directories(outdir);
    RunConfig rcfg = cfg;
    if (source_m > 0) rcfg.m = source_m;
    rcfg.validate();
    log.info("make-data: forward run at m = " + std::to_string(rcfg.m));
    AssembledRun run = assemble_run(rcfg);
    ForwardProblem fp(run.grid, run.mu_minus, run.mu_plus, run.friction, run.options);

    MakeDataResult res;
    rk4_integrate(fp, fp.initial_state(rcfg.v_init, -rcfg.v_init), 0.0, rcfg.dt,
                  rcfg.nsteps(), &run.receivers, nullptr, res.hist);

    const int nrec = run.receivers.size();
    std::vector<std::string> hd{"time"};
    for (int k = 0; k < nrec; ++k) hd.push_back("rec_" + std::to_string(k));
    Eigen::MatrixXd tbl(res.hist.measurements.rows(), 1 + nrec);
    tbl.col(0) = res.hist.stage_times;
    tbl.rightCols(nrec) = res.hist.measurements;
    res.data_file = outdir / "data.csv";
    write_csv(res.data_file, hd, tbl);
    write_sidecar(res.data_file, cfg.hash(), "synthetic receiver data at RK stage times",
                  json{{"measurement", cfg.misfit_kind},
                       {"physics_hash", hex64(cfg.physics_hash())},
                       {"source_m", rcfg.m},
                       {"dt", cfg.dt},
                       {"nsteps", cfg.nsteps()}});
    write_manifest(outdir, cfg.hash(), {res.data_file, outdir / "data.csv.json"},
                   json{{"physics_hash", hex64(cfg.physics_hash())}});
    return res;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

struct GradCheckResult {
    Vec deltas, errors;
    Vec gradient;
    double misfit = 0.0;
    bool passed = false;
};

/// Coarse truth parameter sampled from the config's two-zone layout.
inline Vec coarse_truth(const RunConfig& cfg, ParamId param) {
    Vec p(cfg.m_p);
    for (int j = 0; j < cfg.m_p; ++j) {
        const double x = cfg.x0 + (cfg.x1 - cfg.x0) * double(j) / (cfg.m_p - 1);
        const bool vw = x >= cfg.vw_x0 && x <= cfg.vw_x1;
        switch (param) {
            case ParamId::a: p(j) = vw ? cfg.a_vw : cfg.a_vs; break;
            case ParamId::b: p(j) = cfg.b; break;
            case ParamId::Dc: p(j) = vw ? cfg.dc_vw : cfg.dc_vs; break;
            case ParamId::sigma_n0: p(j) = cfg.sigma_n0; break;
            case ParamId::psi0: p(j) = cfg.psi0; break;
            case ParamId::tau0:
            default:
                throw std::invalid_argument("coarse truth undefined for this parameter");
        }
    }
    return p;
}

/// Adjoint-vs-FD gradient verification at 1.1x the coarse truth of the
/// configured parameter, against synthetic data from the truth run. Writes
/// the e(delta) curve and passes when its minimum is at or below the
/// configured threshold.
inline GradCheckResult cmd_grad_check(const RunConfig& cfg,
                                      const std::filesystem::path& outdir, int jobs = 1,
                                      const Logger& log = {}) {
    cfg.validate();
    std::filesystem::create_directories(outdir);
    const ParamId param = param_from_name(cfg.invert_param);
    AssembledRun run = assemble_run(cfg);
    InterpolationPair interp =
        fault_interpolation(cfg.m_p, cfg.m, cfg.x1 - cfg.x0, cfg.order);

    log.info("grad-check: generating truth data (" + std::to_string(cfg.nsteps()) +
             " steps, " + std::to_string(run.receivers.size()) + " receivers)");
    Eigen::MatrixXd data;
    {
        ForwardProblem fp(run.grid, run.mu_minus, run.mu_plus, run.friction, run.options);
        StageHistory h;
        rk4_integrate(fp, fp.initial_state(cfg.v_init, -cfg.v_init), 0.0, cfg.dt,
                      cfg.nsteps(), &run.receivers, nullptr, h);
        data = h.measurements;
    }

    FaultInversion obj;
    obj.grid = &run.grid;
    obj.mu_minus = run.mu_minus;
    obj.mu_plus = run.mu_plus;
    obj.base = run.friction;
    obj.fopt = run.options;
    obj.receivers = run.receivers;
    obj.data = data;
    obj.dt = cfg.dt;
    obj.nsteps = cfg.nsteps();
    obj.param = param;
    obj.interp = &interp;
    obj.v_plus0 = cfg.v_init;
    obj.v_minus0 = -cfg.v_init;

    Vec p0 = 1.1 * coarse_truth(cfg, param);
    GradCheckResult res;
    log.info("grad-check: adjoint gradient at the perturbed iterate");
    res.misfit = obj(p0, res.gradient);

    auto F = [&](const Vec& p) {
        Vec g_unused;
        FrictionModel m = parameter_embed(p, &interp, run.friction, param);
        ForwardProblem fp(run.grid, run.mu_minus, run.mu_plus, m, run.options);
        StageHistory h;
        rk4_integrate(fp, fp.initial_state(cfg.v_init, -cfg.v_init), 0.0, cfg.dt,
                      cfg.nsteps(), &run.receivers, &data, h);
        return misfit(h);
    };
    res.deltas = Eigen::Map<const Vec>(cfg.deltas.data(),
                                       static_cast<Eigen::Index>(cfg.deltas.size()));
    log.info("grad-check: " + std::to_string(cfg.deltas.size() * cfg.m_p) +
             " perturbed forward solves on " + std::to_string(jobs) + " threads");
    res.errors = fd_gradient_check(F, p0, res.gradient, res.deltas, jobs);
    res.passed = res.errors.minCoeff() <= cfg.check_threshold;

    Eigen::MatrixXd tbl(res.deltas.size(), 2);
    tbl.col(0) = res.deltas;
    tbl.col(1) = res.errors;
    write_csv(outdir / "gradcheck.csv", {"delta", "relative_error"}, tbl);
    write_sidecar(outdir / "gradcheck.csv", cfg.hash(),
                  "parameter-normalized relative error between adjoint and FD gradients",
                  json{{"parameter", cfg.invert_param},
                       {"threshold", cfg.check_threshold},
                       {"min_error", res.errors.minCoeff()},
                       {"passed", res.passed}});
    write_manifest(outdir, cfg.hash(), {outdir / "gradcheck.csv", outdir / "gradcheck.csv.json"});
    log.info("grad-check: min error " + format_double(res.errors.minCoeff()) +
             (res.passed ? " (pass)" : " (FAIL)"));
    return res;
}

// ---------------------------------------------------------------------------
// invert
// ---------------------------------------------------------------------------

struct InvertResult {
    LbfgsResult lbfgs;
    Vec fine_parameter;
    std::filesystem::path trace_file;
};

/// L-BFGS inversion of the configured parameter against a data manifest
/// produced by make-data. Every accepted iterate is archived immediately, so
/// an interrupted run (stop flag, e.g. from SIGINT) leaves a resumable
/// snapshot; `initial_override` supports resuming from an iterate file.
inline InvertResult cmd_invert(const RunConfig& cfg, const std::filesystem::path& outdir,
                               const std::filesystem::path& data_dir,
                               const std::atomic<bool>* stop_flag = nullptr,
                               const std::optional<Vec>& initial_override = std::nullopt,
                               const Logger& log = {}) {
    cfg.validate();
    std::filesystem::create_directories(outdir);
    // data manifest consistency
    {
        std::ifstream in(data_dir / "manifest.json");
        if (!in) throw std::runtime_error("data manifest missing in " + data_dir.string());
        json j = json::parse(in);
        // compatibility keys on the physics hash: inversion-driver settings
        // may differ from the data-generation config, the physics may not
        const std::string want = hex64(cfg.physics_hash());
        const std::string got = j.value("physics_hash", j.value("config_hash", "?"));
        if (got != want)
            throw std::runtime_error("data manifest physics hash " + got +
                                     " does not match config hash " + want);
        auto problems = verify_manifest(data_dir);
        if (!problems.empty())
            throw std::runtime_error("data manifest inconsistent: " + problems.front());
    }
    CsvFile data_csv = read_csv(data_dir / "data.csv");
    const int nrec = static_cast<int>(data_csv.header.size()) - 1;
    if (nrec < 1 || data_csv.data.rows() != 4 * cfg.nsteps())
        throw std::runtime_error("data.csv shape does not match the configured run");
    Eigen::MatrixXd data = data_csv.data.rightCols(nrec);

    const ParamId param = param_from_name(cfg.invert_param);
    AssembledRun run = assemble_run(cfg);
    if (run.receivers.size() != nrec)
        throw std::runtime_error("receiver count differs between config and data");
    InterpolationPair interp =
        fault_interpolation(cfg.m_p, cfg.m, cfg.x1 - cfg.x0, cfg.order);

    FaultInversion obj;
    obj.grid = &run.grid;
    obj.mu_minus = run.mu_minus;
    obj.mu_plus = run.mu_plus;
    obj.base = run.friction;
    obj.fopt = run.options;
    obj.receivers = run.receivers;
    obj.data = data;
    obj.dt = cfg.dt;
    obj.nsteps = cfg.nsteps();
    obj.param = param;
    obj.interp = &interp;
    obj.v_plus0 = cfg.v_init;
    obj.v_minus0 = -cfg.v_init;

    Vec p0 = initial_override ? *initial_override : Vec(Vec::Constant(cfg.m_p, cfg.initial_value));
    Vec lower = Vec::Constant(cfg.m_p, cfg.lower_bound);
    if ((p0.array() < lower.array()).any())
        throw std::invalid_argument("initial guess violates the lower bound " +
                                    format_double(cfg.lower_bound));

    LbfgsOptions opt;
    opt.max_iters = cfg.max_iterations;
    opt.grad_tol = cfg.grad_tol;
    std::vector<LbfgsIterate> archived;
    opt.callback = [&](const LbfgsIterate& it) {
        archived.push_back(it);
        // immediate snapshot: iterate file + rewritten trace
        char name[32];
        std::snprintf(name, sizeof(name), "iterate_%04d.csv", it.iter);
        Eigen::MatrixXd col(it.x.size(), 1);
        col.col(0) = it.x;
        write_csv(outdir / name, {cfg.invert_param}, col);
        Eigen::MatrixXd tr(static_cast<Eigen::Index>(archived.size()), 4);
        for (std::size_t k = 0; k < archived.size(); ++k) {
            tr(static_cast<Eigen::Index>(k), 0) = archived[k].iter;
            tr(static_cast<Eigen::Index>(k), 1) = archived[k].f;
            tr(static_cast<Eigen::Index>(k), 2) = archived[k].gnorm;
            tr(static_cast<Eigen::Index>(k), 3) = archived[k].step;
        }
        write_csv(outdir / "trace.csv", {"iter", "misfit", "gradient_norm", "step"}, tr);
        log.info("iter " + std::to_string(it.iter) + ": misfit " + format_double(it.f) +
                 ", |grad| " + format_double(it.gnorm));
        return !(stop_flag && stop_flag->load());
    };

    InvertResult res;
    res.lbfgs = lbfgs_minimize(obj, p0, opt, &lower, nullptr);
    log.info("invert: " + res.lbfgs.stop_reason + ", final misfit " +
             format_double(res.lbfgs.f));

    res.fine_parameter = interp.c2f * res.lbfgs.x;
    res.trace_file = outdir / "trace.csv";
    {
        Eigen::MatrixXd fin(res.fine_parameter.size(), 2);
        for (int i = 0; i < res.fine_parameter.size(); ++i) {
            fin(i, 0) = cfg.x0 + (cfg.x1 - cfg.x0) * double(i) / (cfg.m - 1);
            fin(i, 1) = res.fine_parameter(i);
        }
        write_csv(outdir / "final_parameter.csv", {"x", cfg.invert_param}, fin);
        write_sidecar(outdir / "final_parameter.csv", cfg.hash(),
                      "inverted fault parameter embedded on the fine fault grid",
                      json{{"parameter", cfg.invert_param},
                           {"stop_reason", res.lbfgs.stop_reason},
                           {"final_misfit", res.lbfgs.f},
                           {"iterations", static_cast<int>(res.lbfgs.trace.size()) - 1}});
    }
    std::vector<std::filesystem::path> files{outdir / "trace.csv",
                                             outdir / "final_parameter.csv",
                                             outdir / "final_parameter.csv.json"};
    for (std::size_t k = 0; k < archived.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "iterate_%04d.csv", archived[k].iter);
        files.push_back(outdir / name);
    }
    write_manifest(outdir, cfg.hash(), files);
    return res;
}

} // namespace rsfinv
