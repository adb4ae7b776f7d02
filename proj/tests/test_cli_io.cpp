#include <catch2/catch_amalgamated.hpp>

#include <rsfinv/cli.hpp>

#include <filesystem>
#include <fstream>
#include <random>

using namespace rsfinv;
namespace fs = std::filesystem;

namespace {

Logger quiet() {
    Logger l;
    l.level = LogLevel::error;
    return l;
}

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / "rsfinv_test" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// Reduced desk-scale configuration used across the end-to-end cases.
RunConfig small_config() {
    RunConfig cfg;
    cfg.m = 41;
    cfg.m_p = 11;
    cfg.dt = 0.05;
    cfg.T = 2.0;
    return cfg;
}

} // namespace

TEST_CASE("toml: parsing, diagnostics and canonical serialization") {
    const std::string text = R"(# comment
[alpha]
x = 1.5            # trailing comment
name = "a # not a comment"
flag = true
arr = [1, 2.5, "s"]

[beta]
n = 42
)";
    TomlTable t = parse_toml(text);
    REQUIRE(t.size() == 2);
    REQUIRE(std::get<double>(t["alpha"]["x"].v) == 1.5);
    REQUIRE(std::get<std::string>(t["alpha"]["name"].v) == "a # not a comment");
    REQUIRE(std::get<bool>(t["alpha"]["flag"].v) == true);
    REQUIRE(std::get<std::int64_t>(t["beta"]["n"].v) == 42);
    auto& arr = std::get<std::vector<std::variant<double, std::int64_t, bool, std::string>>>(
        t["alpha"]["arr"].v);
    REQUIRE(arr.size() == 3);
    REQUIRE(std::get<std::int64_t>(arr[0]) == 1);
    REQUIRE(std::get<double>(arr[1]) == 2.5);

    // serialization is canonical and reparses to the same table
    const std::string s1 = serialize_toml(t);
    REQUIRE(serialize_toml(parse_toml(s1)) == s1);

    SECTION("errors carry line numbers") {
        REQUIRE_THROWS_WITH(parse_toml("[a]\nx = \n"),
                            Catch::Matchers::ContainsSubstring("line 2"));
        REQUIRE_THROWS_WITH(parse_toml("x = 1\n"),
                            Catch::Matchers::ContainsSubstring("line 1"));
        REQUIRE_THROWS_WITH(parse_toml("[a]\ny = 1\nz == 2\n"),
                            Catch::Matchers::ContainsSubstring("line 3"));
        REQUIRE_THROWS_WITH(parse_toml("[a]\nv = [1, 2\n"),
                            Catch::Matchers::ContainsSubstring("line 2"));
    }
}

TEST_CASE("config: lossless round trip and reorder-stable hash") {
    RunConfig cfg;
    cfg.m = 87;
    cfg.dt = 0.0071234567890123456;
    cfg.a_vw = 0.009000000000000123;
    cfg.fault_kind = "fractal";
    cfg.amplitude_ratio = 0.002;
    cfg.seed = 987654321;
    cfg.snapshot_times = {1.0, 2.5, 1e-3};

    const std::string text = cfg.serialize();
    RunConfig back = RunConfig::parse(text);
    REQUIRE(back.serialize() == text); // lossless, including 17-digit floats
    REQUIRE(back.hash() == cfg.hash());

    SECTION("hash is invariant under key and section reordering") {
        // swap two keys inside [discretization] and move the section last
        std::string shuffled = "[receivers]\nspacing = 2\n[discretization]\n"
                               "dt = 0.0071234567890123456\nm = 87\nm_p = 11\nT = 6\n"
                               "order = 4\n";
        std::string unshuffled = "[discretization]\nm = 87\nm_p = 11\n"
                                 "dt = 0.0071234567890123456\nT = 6\norder = 4\n"
                                 "[receivers]\nspacing = 2\n";
        REQUIRE(RunConfig::parse(shuffled).hash() == RunConfig::parse(unshuffled).hash());
    }
    SECTION("hash changes with content") {
        RunConfig other = cfg;
        other.dt = 0.005;
        REQUIRE(other.hash() != cfg.hash());
    }
    SECTION("validation rejects malformed configs") {
        RunConfig bad = cfg;
        bad.order = 3;
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
        bad = cfg;
        bad.m_p = bad.m + 1;
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
        REQUIRE_THROWS_AS(RunConfig::parse("[receivers]\nmisfit = \"fancy\"\n"),
                          std::invalid_argument);
    }
}

TEST_CASE("receiver cut-out layouts reproduce the published counts") {
    ReceiverLayout r88; // defaults: outer [-9,9]^2, inner [-7,7]x[-3,3], 2 km
    REQUIRE(cutout_positions(r88).size() == 88);

    ReceiverLayout r325;
    r325.spacing = 1.0;
    r325.inner[0] = -6.0;
    r325.inner[1] = 7.0;
    r325.inner[2] = -2.0;
    r325.inner[3] = 2.0;
    REQUIRE(cutout_positions(r325).size() == 325);

    // no duplicates, all inside the outer box, none strictly inside the inner
    for (auto [x, y] : cutout_positions(r88)) {
        REQUIRE(x >= -9.0);
        REQUIRE(x <= 9.0);
        REQUIRE(!(x > -7.0 + 1e-9 && x < 7.0 - 1e-9 && y > -3.0 + 1e-9 && y < 3.0 - 1e-9));
    }
}

TEST_CASE("csv: 17-significant-digit round trip is bitwise lossless") {
    std::mt19937_64 rng(77);
    std::normal_distribution<double> dist;
    Eigen::MatrixXd m(40, 3);
    for (int i = 0; i < m.rows(); ++i) {
        m(i, 0) = dist(rng) * std::pow(10.0, (i % 17) * 38 - 300);
        m(i, 1) = dist(rng);
        m(i, 2) = -dist(rng) * 1e300;
    }
    m(0, 0) = 0.0;
    m(1, 0) = 5e-324; // denormal
    auto dir = fresh_dir("csv");
    write_csv(dir / "t.csv", {"a", "b", "c"}, m);
    CsvFile back = read_csv(dir / "t.csv");
    REQUIRE(back.header == std::vector<std::string>{"a", "b", "c"});
    REQUIRE(back.data.rows() == m.rows());
    REQUIRE((back.data.array() == m.array()).all());
}

TEST_CASE("checkpoint: 64-byte header, exact round trip, corruption detected") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> dist;
    StageHistory h;
    h.dt = 0.01;
    h.nsteps = 3;
    h.v_star.resize(12, 7);
    h.psi.resize(12, 7);
    h.measurements.resize(12, 2);
    h.residuals.resize(12, 2);
    h.stage_times.resize(12);
    for (int i = 0; i < 12; ++i) {
        h.stage_times(i) = dist(rng);
        for (int j = 0; j < 7; ++j) {
            h.v_star(i, j) = dist(rng);
            h.psi(i, j) = dist(rng);
        }
        for (int j = 0; j < 2; ++j) {
            h.measurements(i, j) = dist(rng);
            h.residuals(i, j) = dist(rng);
        }
    }
    auto dir = fresh_dir("ckpt");
    write_checkpoint(dir / "h.bin", h, 424242);

    std::uint64_t n = 0;
    StageHistory b = read_checkpoint(dir / "h.bin", &n);
    REQUIRE(n == 424242);
    REQUIRE(b.dt == h.dt);
    REQUIRE(b.nsteps == h.nsteps);
    REQUIRE((b.stage_times.array() == h.stage_times.array()).all());
    REQUIRE((b.v_star.array() == h.v_star.array()).all());
    REQUIRE((b.psi.array() == h.psi.array()).all());
    REQUIRE((b.measurements.array() == h.measurements.array()).all());
    REQUIRE((b.residuals.array() == h.residuals.array()).all());

    SECTION("bad magic") {
        std::fstream f(dir / "h.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
        f.close();
        REQUIRE_THROWS_WITH(read_checkpoint(dir / "h.bin"),
                            Catch::Matchers::ContainsSubstring("magic"));
    }
    SECTION("truncation") {
        auto sz = fs::file_size(dir / "h.bin");
        fs::resize_file(dir / "h.bin", sz - 16);
        REQUIRE_THROWS_WITH(read_checkpoint(dir / "h.bin"),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }
}

TEST_CASE("manifest: consistency verified, tampering detected") {
    auto dir = fresh_dir("manifest");
    Eigen::MatrixXd m(2, 1);
    m << 1.0, 2.0;
    write_csv(dir / "a.csv", {"v"}, m);
    write_sidecar(dir / "a.csv", 0xabcdull, "test table");
    write_manifest(dir, 0xabcdull, {dir / "a.csv", dir / "a.csv.json"});
    REQUIRE(verify_manifest(dir).empty());

    SECTION("content tampering") {
        std::ofstream(dir / "a.csv", std::ios::app) << "3.0\n";
        auto problems = verify_manifest(dir);
        REQUIRE(problems.size() == 1);
        REQUIRE(problems[0].find("hash mismatch") != std::string::npos);
    }
    SECTION("missing file") {
        fs::remove(dir / "a.csv");
        REQUIRE(!verify_manifest(dir).empty());
    }
    SECTION("sidecar pointing at a different config") {
        write_sidecar(dir / "a.csv", 0x9999ull, "test table");
        write_manifest(dir, 0xabcdull, {dir / "a.csv", dir / "a.csv.json"});
        auto problems = verify_manifest(dir);
        REQUIRE(problems.size() == 1);
        REQUIRE(problems[0].find("config hash") != std::string::npos);
    }
}

TEST_CASE("simulate: quiescent run stays locked, outputs are consistent") {
    RunConfig cfg = small_config();
    cfg.load_amplitude = 0.0; // no nucleation pulse
    auto dir = fresh_dir("quiescent");
    auto res = cmd_simulate(cfg, dir, quiet());
    REQUIRE(!res.aborted);
    REQUIRE(res.hist.v_star.cwiseAbs().maxCoeff() < 1e-6);
    REQUIRE(verify_manifest(dir).empty());
    REQUIRE(fs::exists(dir / "receivers.csv"));
    REQUIRE(fs::exists(dir / "fault_vstar.csv"));
    REQUIRE(fs::exists(dir / "slip_profiles.csv"));

    // stage-subsampled V* table matches the history rows it samples
    CsvFile v = read_csv(dir / "fault_vstar.csv");
    REQUIRE(v.data.cols() == 1 + cfg.m);
    for (Eigen::Index r = 0; r < v.data.rows(); ++r)
        for (int i = 0; i < cfg.m; ++i)
            REQUIRE(v.data(r, 1 + i) == res.hist.v_star(r * cfg.fault_stride, i));
}

TEST_CASE("simulate: nucleation localizes at the configured center") {
    RunConfig cfg;
    cfg.m = 61;
    cfg.dt = 0.025;
    cfg.T = 4.0;
    auto dir = fresh_dir("nucleation");
    auto res = cmd_simulate(cfg, dir, quiet());
    REQUIRE(!res.aborted);

    int row = -1, imax = -1;
    for (int r = 0; r < res.hist.v_star.rows() && row < 0; ++r) {
        int im;
        if (res.hist.v_star.row(r).cwiseAbs().maxCoeff(&im) > 1e-3) {
            row = r;
            imax = im;
        }
    }
    REQUIRE(row >= 0); // rupture nucleates within the window
    const double x = cfg.x0 + (cfg.x1 - cfg.x0) * double(imax) / (cfg.m - 1);
    REQUIRE(std::abs(x - cfg.load_xc) <= 1.0);
    // and grows into a full rupture
    REQUIRE(res.hist.v_star.cwiseAbs().maxCoeff() > 1.0);
}

TEST_CASE("simulate: planar symmetric config gives equal-and-opposite seismograms") {
    RunConfig cfg = small_config();
    auto dir = fresh_dir("antisym");
    auto res = cmd_simulate(cfg, dir, quiet());
    REQUIRE(!res.aborted);

    auto pos = cutout_positions(cfg.layout);
    const double scale = res.hist.measurements.cwiseAbs().maxCoeff();
    REQUIRE(scale > 0.0);
    int pairs = 0;
    for (std::size_t k = 0; k < pos.size(); ++k)
        for (std::size_t l = k + 1; l < pos.size(); ++l)
            if (pos[k].first == pos[l].first && pos[k].second == -pos[l].second) {
                ++pairs;
                const double diff =
                    (res.hist.measurements.col(static_cast<Eigen::Index>(k)) +
                     res.hist.measurements.col(static_cast<Eigen::Index>(l)))
                        .lpNorm<Eigen::Infinity>();
                REQUIRE(diff < 1e-12 * scale);
            }
    REQUIRE(pairs == 44); // every receiver has a mirror partner
}

TEST_CASE("invert pipeline: manifest reuse, truth convergence, interrupts, bounds") {
    // constant-a truth so the coarse embedding reproduces it exactly
    RunConfig cfg = small_config();
    cfg.a_vw = cfg.a_vs = 0.013;
    cfg.initial_value = 0.013;
    cfg.grad_tol = 1e-18;
    auto ddir = fresh_dir("invert_data");
    cmd_make_data(cfg, ddir, 0, quiet());
    REQUIRE(verify_manifest(ddir).empty());

    SECTION("zero misfit and immediate convergence at the true parameters") {
        auto odir = fresh_dir("invert_truth");
        auto res = cmd_invert(cfg, odir, ddir, nullptr, std::nullopt, quiet());
        // zero up to the roundoff of embedding the constant through c2f
        // (per-node deviation ~3e-18 relative, misfit ~1e-39)
        REQUIRE(res.lbfgs.trace.front().f <= 1e-30);
        REQUIRE(res.lbfgs.converged);
        REQUIRE(res.lbfgs.trace.size() == 1);
        REQUIRE(fs::exists(odir / "trace.csv"));
        REQUIRE(verify_manifest(odir).empty());
    }
    SECTION("manifest hash mismatch is rejected") {
        RunConfig other = cfg;
        other.dt = 0.04;
        auto odir = fresh_dir("invert_mismatch");
        REQUIRE_THROWS_WITH(cmd_invert(other, odir, ddir, nullptr, std::nullopt, quiet()),
                            Catch::Matchers::ContainsSubstring("hash"));
    }
    SECTION("bound-violating initial guess is rejected with a diagnostic") {
        RunConfig bad = cfg;
        bad.initial_value = 1e-6; // below lower_bound = 1e-4
        auto odir = fresh_dir("invert_bad_init");
        REQUIRE_THROWS_WITH(cmd_invert(bad, odir, ddir, nullptr, std::nullopt, quiet()),
                            Catch::Matchers::ContainsSubstring("lower bound"));
    }
    SECTION("stop flag leaves a resumable snapshot with the trace intact") {
        RunConfig off = cfg;
        off.initial_value = 0.0132; // off-truth so iterations would continue
        off.grad_tol = 0.0;
        std::atomic<bool> stop{true};
        auto odir = fresh_dir("invert_stop");
        auto res = cmd_invert(off, odir, ddir, &stop, std::nullopt, quiet());
        REQUIRE(res.lbfgs.stop_reason == "stopped by callback");
        REQUIRE(fs::exists(odir / "iterate_0000.csv"));
        REQUIRE(fs::exists(odir / "trace.csv"));
        // resuming from the snapshot reproduces the archived iterate
        CsvFile snap = read_csv(odir / "iterate_0000.csv");
        REQUIRE((Vec(snap.data.col(0)).array() == res.lbfgs.trace.front().x.array()).all());
    }
}

TEST_CASE("make-data: high-resolution source grid leaves a misfit floor at truth") {
    RunConfig cfg = small_config();
    cfg.a_vw = cfg.a_vs = 0.013;
    cfg.T = 1.0;
    cfg.dt = 0.025; // CFL bound of the finer source grid
    auto ddir = fresh_dir("hires_data");
    cmd_make_data(cfg, ddir, 61, quiet());

    CsvFile data = read_csv(ddir / "data.csv");
    REQUIRE(data.data.rows() == 4 * cfg.nsteps()); // stage-aligned with the coarse run

    // evaluate the coarse-run misfit at the true parameters
    AssembledRun run = assemble_run(cfg);
    ForwardProblem fp(run.grid, run.mu_minus, run.mu_plus, run.friction, run.options);
    Eigen::MatrixXd obs = data.data.rightCols(data.data.cols() - 1);
    StageHistory h;
    rk4_integrate(fp, fp.initial_state(cfg.v_init, -cfg.v_init), 0.0, cfg.dt, cfg.nsteps(),
                  &run.receivers, &obs, h);
    const double floor = misfit(h);
    REQUIRE(floor > 0.0); // resolution mismatch leaves residuals

    // whereas same-grid data reproduces zero misfit exactly
    auto ddir2 = fresh_dir("samegrid_data");
    cmd_make_data(cfg, ddir2, 0, quiet());
    CsvFile d2 = read_csv(ddir2 / "data.csv");
    Eigen::MatrixXd obs2 = d2.data.rightCols(d2.data.cols() - 1);
    StageHistory h2;
    rk4_integrate(fp, fp.initial_state(cfg.v_init, -cfg.v_init), 0.0, cfg.dt, cfg.nsteps(),
                  &run.receivers, &obs2, h2);
    REQUIRE(misfit(h2) == 0.0);
}

TEST_CASE("grad-check: verdict machinery on the small configuration") {
    RunConfig cfg = small_config();
    cfg.deltas = {1e-9, 1e-8, 1e-7, 1e-6};
    auto dir = fresh_dir("gradcheck");
    auto res = cmd_grad_check(cfg, dir, 4, quiet());
    REQUIRE(res.passed);
    REQUIRE(res.errors.minCoeff() <= cfg.check_threshold);
    REQUIRE(fs::exists(dir / "gradcheck.csv"));
    REQUIRE(verify_manifest(dir).empty());

    // an unattainable threshold flips the verdict without touching the curve
    RunConfig strict = cfg;
    strict.check_threshold = 1e-300;
    auto dir2 = fresh_dir("gradcheck_strict");
    auto res2 = cmd_grad_check(strict, dir2, 4, quiet());
    REQUIRE(!res2.passed);
    REQUIRE((res2.errors.array() == res.errors.array()).all());
}
