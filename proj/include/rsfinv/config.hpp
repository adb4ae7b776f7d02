#pragma once

#include <rsfinv/forward.hpp>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace rsfinv {

/// 17 significant digits: the shortest fixed precision that round-trips any
/// IEEE double through decimal text.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// FNV-1a 64-bit over a byte string.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Minimal TOML subset: [section] headers, key = value with values being
// floats, integers, booleans, quoted strings, or flat arrays of those.
// Comments (#) and blank lines allowed. Errors carry line numbers.
// ---------------------------------------------------------------------------

struct TomlValue {
    std::variant<double, std::int64_t, bool, std::string,
                 std::vector<std::variant<double, std::int64_t, bool, std::string>>>
        v;
};

using TomlSection = std::map<std::string, TomlValue>;
using TomlTable = std::map<std::string, TomlSection>;

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::variant<double, std::int64_t, bool, std::string>
parse_scalar(const std::string& tok, int line) {
    if (tok.empty()) throw std::invalid_argument("line " + std::to_string(line) + ": empty value");
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok.front() == '"') {
        if (tok.size() < 2 || tok.back() != '"')
            throw std::invalid_argument("line " + std::to_string(line) + ": unterminated string");
        return tok.substr(1, tok.size() - 2);
    }
    // integer when it parses fully without . e E inf nan
    const bool looks_int = tok.find_first_of(".eEin") == std::string::npos;
    char* end = nullptr;
    if (looks_int) {
        const long long i = std::strtoll(tok.c_str(), &end, 10);
        if (end && *end == '\0') return static_cast<std::int64_t>(i);
    }
    const double d = std::strtod(tok.c_str(), &end);
    if (!end || *end != '\0')
        throw std::invalid_argument("line " + std::to_string(line) + ": bad value '" + tok + "'");
    return d;
}

} // namespace detail

inline TomlTable parse_toml(const std::string& text) {
    TomlTable table;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        // strip comments outside quotes
        bool quoted = false;
        std::string s;
        for (char c : raw) {
            if (c == '"') quoted = !quoted;
            if (c == '#' && !quoted) break;
            s += c;
        }
        s = detail::trim(s);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']')
                throw std::invalid_argument("line " + std::to_string(line) +
                                            ": malformed section header");
            section = detail::trim(s.substr(1, s.size() - 2));
            if (section.empty())
                throw std::invalid_argument("line " + std::to_string(line) + ": empty section");
            table[section]; // create even if empty
            continue;
        }
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("line " + std::to_string(line) + ": expected key = value");
        const std::string key = detail::trim(s.substr(0, eq));
        std::string val = detail::trim(s.substr(eq + 1));
        if (key.empty())
            throw std::invalid_argument("line " + std::to_string(line) + ": empty key");
        if (section.empty())
            throw std::invalid_argument("line " + std::to_string(line) +
                                        ": key outside any [section]");
        TomlValue out;
        if (!val.empty() && val.front() == '[') {
            if (val.back() != ']')
                throw std::invalid_argument("line " + std::to_string(line) +
                                            ": unterminated array");
            std::vector<std::variant<double, std::int64_t, bool, std::string>> arr;
            std::string body = val.substr(1, val.size() - 2);
            std::string tok;
            bool q = false;
            for (char c : body) {
                if (c == '"') q = !q;
                if (c == ',' && !q) {
                    arr.push_back(detail::parse_scalar(detail::trim(tok), line));
                    tok.clear();
                } else {
                    tok += c;
                }
            }
            if (!detail::trim(tok).empty())
                arr.push_back(detail::parse_scalar(detail::trim(tok), line));
            out.v = std::move(arr);
        } else {
            auto sc = detail::parse_scalar(val, line);
            std::visit([&](auto&& x) { out.v = x; }, sc);
        }
        table[section][key] = std::move(out);
    }
    return table;
}

inline std::string serialize_toml(const TomlTable& table) {
    std::string out;
    auto emit_scalar = [](const std::variant<double, std::int64_t, bool, std::string>& s) {
        if (std::holds_alternative<double>(s)) return format_double(std::get<double>(s));
        if (std::holds_alternative<std::int64_t>(s))
            return std::to_string(std::get<std::int64_t>(s));
        if (std::holds_alternative<bool>(s)) return std::string(std::get<bool>(s) ? "true" : "false");
        return '"' + std::get<std::string>(s) + '"';
    };
    for (const auto& [sec, kv] : table) { // std::map: canonical sorted order
        out += "[" + sec + "]\n";
        for (const auto& [k, val] : kv) {
            out += k + " = ";
            if (auto* arr = std::get_if<
                    std::vector<std::variant<double, std::int64_t, bool, std::string>>>(&val.v)) {
                out += "[";
                for (std::size_t i = 0; i < arr->size(); ++i) {
                    if (i) out += ", ";
                    out += emit_scalar((*arr)[i]);
                }
                out += "]";
            } else {
                std::visit(
                    [&](auto&& x) {
                        using T = std::decay_t<decltype(x)>;
                        if constexpr (!std::is_same_v<
                                          T, std::vector<std::variant<double, std::int64_t, bool,
                                                                      std::string>>>)
                            out += emit_scalar(x);
                    },
                    val.v);
            }
            out += "\n";
        }
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Receivers fill a `spacing`-spaced lattice over the outer rectangle with
/// the open interior of the inner rectangle cut out (lattice points on the
/// inner boundary are kept). Boxes are [x0, x1, y0, y1] in km.
struct ReceiverLayout {
    double outer[4] = {-9.0, 9.0, -9.0, 9.0};
    double inner[4] = {-7.0, 7.0, -3.0, 3.0};
    double spacing = 2.0;
};

inline std::vector<std::pair<double, double>> cutout_positions(const ReceiverLayout& r) {
    if (r.spacing <= 0.0) throw std::invalid_argument("receiver spacing must be positive");
    std::vector<std::pair<double, double>> pos;
    const double eps = 1e-9 * r.spacing;
    const int nx = static_cast<int>(std::floor((r.outer[1] - r.outer[0]) / r.spacing + eps));
    const int ny = static_cast<int>(std::floor((r.outer[3] - r.outer[2]) / r.spacing + eps));
    for (int j = 0; j <= ny; ++j)
        for (int i = 0; i <= nx; ++i) {
            const double x = r.outer[0] + i * r.spacing;
            const double y = r.outer[2] + j * r.spacing;
            const bool interior = x > r.inner[0] + eps && x < r.inner[1] - eps &&
                                  y > r.inner[2] + eps && y < r.inner[3] - eps;
            if (!interior) pos.emplace_back(x, y);
        }
    return pos;
}

struct RunConfig {
    // [domain]
    double x0 = -15.0, x1 = 15.0, y_bot = -15.0, y_top = 15.0;
    // [fault]
    std::string fault_kind = "planar"; // or "fractal"
    double amplitude_ratio = 0.002;    // used when fractal
    double wavelength_min = 1.2, wavelength_max = 30.0;
    std::uint64_t seed = 1;
    // [material]
    double mu = 32038.1;  // MPa
    double rho = 2670.0;  // kg/m^3
    // [friction] two-zone Table-style layout: VW zone inside [vw_x0, vw_x1]
    double f0 = 0.6, V0 = 1e-6;
    double b = 0.011;
    double a_vw = 0.009, a_vs = 0.013;
    double dc_vw = 0.2, dc_vs = 1.0;
    double vw_x0 = -5.0, vw_x1 = 6.0;
    double sigma_n0 = 120.0, sigma_yz0 = 72.0; // MPa
    double psi0 = 0.7243;
    double v_init = 5e-13; // m/s, plus side (minus side gets the negative)
    // [loading] Gaussian nucleation pulse, MPa / km
    double load_amplitude = 25.0, load_xc = 3.0, load_d = 2.0;
    // [discretization]
    int m = 101, m_p = 11;
    double dt = 0.005, T = 6.0;
    int order = 4;
    // [receivers]
    ReceiverLayout layout;
    std::string misfit_kind = "velocity"; // or "displacement"
    // [inversion]
    std::string invert_param = "a";
    double initial_value = 0.0135;
    double lower_bound = 1e-4;
    int max_iterations = 100;
    double grad_tol = 0.0;
    // [gradcheck]
    std::vector<double> deltas = {1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5};
    double check_threshold = 1e-4;
    // [output]
    std::vector<double> snapshot_times;
    double slip_interval = 0.25; // s between archived slip profiles
    int fault_stride = 4;        // stage rows between archived V* rows

    int n_across() const { return (m + 1) / 2; }
    int nsteps() const { return static_cast<int>(std::llround(T / dt)); }

    void validate() const {
        auto req = [](bool ok, const std::string& msg) {
            if (!ok) throw std::invalid_argument("config: " + msg);
        };
        req(x1 > x0 && y_top > 0.0 && y_bot < 0.0, "domain box malformed");
        req(fault_kind == "planar" || fault_kind == "fractal", "fault.kind unknown");
        req(m >= 5 && m_p >= 2 && m_p <= m, "discretization sizes malformed");
        req(dt > 0.0 && T > 0.0, "time discretization malformed");
        req(order == 2 || order == 4 || order == 6, "order must be 2, 4 or 6");
        req(misfit_kind == "velocity" || misfit_kind == "displacement",
            "receivers.misfit unknown");
        req(a_vw > 0.0 && a_vs > 0.0 && dc_vw > 0.0 && dc_vs > 0.0, "friction fields");
        req(rho > 0.0 && mu > 0.0, "material constants");
        req(!deltas.empty(), "gradcheck.deltas empty");
        req(fault_stride >= 1 && slip_interval > 0.0, "output controls malformed");
    }

    TomlTable to_table() const {
        TomlTable t;
        auto d = [](double x) { TomlValue v; v.v = x; return v; };
        auto i = [](std::int64_t x) { TomlValue v; v.v = x; return v; };
        auto s = [](const std::string& x) { TomlValue v; v.v = x; return v; };
        auto da = [](const std::vector<double>& xs) {
            TomlValue v;
            std::vector<std::variant<double, std::int64_t, bool, std::string>> arr;
            for (double x : xs) arr.emplace_back(x);
            v.v = std::move(arr);
            return v;
        };
        t["domain"] = {{"x0", d(x0)}, {"x1", d(x1)}, {"y_bot", d(y_bot)}, {"y_top", d(y_top)}};
        t["fault"] = {{"kind", s(fault_kind)},
                      {"amplitude_ratio", d(amplitude_ratio)},
                      {"wavelength_min", d(wavelength_min)},
                      {"wavelength_max", d(wavelength_max)},
                      {"seed", i(static_cast<std::int64_t>(seed))}};
        t["material"] = {{"mu", d(mu)}, {"rho", d(rho)}};
        t["friction"] = {{"f0", d(f0)},         {"V0", d(V0)},
                         {"b", d(b)},           {"a_vw", d(a_vw)},
                         {"a_vs", d(a_vs)},     {"dc_vw", d(dc_vw)},
                         {"dc_vs", d(dc_vs)},   {"vw_x0", d(vw_x0)},
                         {"vw_x1", d(vw_x1)},   {"sigma_n0", d(sigma_n0)},
                         {"sigma_yz0", d(sigma_yz0)}, {"psi0", d(psi0)},
                         {"v_init", d(v_init)}};
        t["loading"] = {{"amplitude", d(load_amplitude)}, {"x_c", d(load_xc)},
                        {"d", d(load_d)}};
        t["discretization"] = {{"m", i(m)}, {"m_p", i(m_p)}, {"dt", d(dt)},
                               {"T", d(T)}, {"order", i(order)}};
        t["receivers"] = {{"outer", da({layout.outer[0], layout.outer[1], layout.outer[2],
                                        layout.outer[3]})},
                          {"inner", da({layout.inner[0], layout.inner[1], layout.inner[2],
                                        layout.inner[3]})},
                          {"spacing", d(layout.spacing)},
                          {"misfit", s(misfit_kind)}};
        t["inversion"] = {{"param", s(invert_param)},
                          {"initial_value", d(initial_value)},
                          {"lower_bound", d(lower_bound)},
                          {"max_iterations", i(max_iterations)},
                          {"grad_tol", d(grad_tol)}};
        t["gradcheck"] = {{"deltas", da(deltas)}, {"threshold", d(check_threshold)}};
        t["output"] = {{"snapshot_times", da(snapshot_times)},
                       {"slip_interval", d(slip_interval)},
                       {"fault_stride", i(fault_stride)}};
        return t;
    }

    std::string serialize() const { return serialize_toml(to_table()); }

    /// Canonical hash: parse -> sorted canonical serialization -> FNV-1a,
    /// so reordering keys or sections in the file does not change it.
    std::uint64_t hash() const { return fnv1a64(serialize()); }

    /// Hash of the sections that determine the simulated physics and the
    /// measurement layout. Two configs with equal physics hashes produce
    /// interchangeable data files even if driver settings (inversion,
    /// gradcheck, output) differ.
    std::uint64_t physics_hash() const {
        TomlTable t = to_table();
        t.erase("inversion");
        t.erase("gradcheck");
        t.erase("output");
        return fnv1a64(serialize_toml(t));
    }

    static RunConfig from_table(const TomlTable& t) {
        RunConfig c;
        auto get = [&](const std::string& sec, const std::string& key, auto& dst) {
            auto si = t.find(sec);
            if (si == t.end()) return;
            auto ki = si->second.find(key);
            if (ki == si->second.end()) return;
            using T = std::decay_t<decltype(dst)>;
            const TomlValue& v = ki->second;
            auto fail = [&] {
                throw std::invalid_argument("config: [" + sec + "] " + key + " has wrong type");
            };
            if constexpr (std::is_same_v<T, double>) {
                if (auto* x = std::get_if<double>(&v.v)) dst = *x;
                else if (auto* ix = std::get_if<std::int64_t>(&v.v)) dst = double(*ix);
                else fail();
            } else if constexpr (std::is_same_v<T, int>) {
                if (auto* x = std::get_if<std::int64_t>(&v.v)) dst = static_cast<int>(*x);
                else fail();
            } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                if (auto* x = std::get_if<std::int64_t>(&v.v))
                    dst = static_cast<std::uint64_t>(*x);
                else fail();
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (auto* x = std::get_if<std::string>(&v.v)) dst = *x;
                else fail();
            } else if constexpr (std::is_same_v<T, std::vector<double>>) {
                auto* arr = std::get_if<
                    std::vector<std::variant<double, std::int64_t, bool, std::string>>>(&v.v);
                if (!arr) fail();
                dst.clear();
                for (const auto& e : *arr) {
                    if (auto* x = std::get_if<double>(&e)) dst.push_back(*x);
                    else if (auto* ix = std::get_if<std::int64_t>(&e)) dst.push_back(double(*ix));
                    else fail();
                }
            }
        };
        get("domain", "x0", c.x0);
        get("domain", "x1", c.x1);
        get("domain", "y_bot", c.y_bot);
        get("domain", "y_top", c.y_top);
        get("fault", "kind", c.fault_kind);
        get("fault", "amplitude_ratio", c.amplitude_ratio);
        get("fault", "wavelength_min", c.wavelength_min);
        get("fault", "wavelength_max", c.wavelength_max);
        get("fault", "seed", c.seed);
        get("material", "mu", c.mu);
        get("material", "rho", c.rho);
        get("friction", "f0", c.f0);
        get("friction", "V0", c.V0);
        get("friction", "b", c.b);
        get("friction", "a_vw", c.a_vw);
        get("friction", "a_vs", c.a_vs);
        get("friction", "dc_vw", c.dc_vw);
        get("friction", "dc_vs", c.dc_vs);
        get("friction", "vw_x0", c.vw_x0);
        get("friction", "vw_x1", c.vw_x1);
        get("friction", "sigma_n0", c.sigma_n0);
        get("friction", "sigma_yz0", c.sigma_yz0);
        get("friction", "psi0", c.psi0);
        get("friction", "v_init", c.v_init);
        get("loading", "amplitude", c.load_amplitude);
        get("loading", "x_c", c.load_xc);
        get("loading", "d", c.load_d);
        get("discretization", "m", c.m);
        get("discretization", "m_p", c.m_p);
        get("discretization", "dt", c.dt);
        get("discretization", "T", c.T);
        get("discretization", "order", c.order);
        std::vector<double> box;
        get("receivers", "outer", box);
        if (box.size() == 4) for (int k = 0; k < 4; ++k) c.layout.outer[k] = box[k];
        box.clear();
        get("receivers", "inner", box);
        if (box.size() == 4) for (int k = 0; k < 4; ++k) c.layout.inner[k] = box[k];
        get("receivers", "spacing", c.layout.spacing);
        get("receivers", "misfit", c.misfit_kind);
        get("inversion", "param", c.invert_param);
        get("inversion", "initial_value", c.initial_value);
        get("inversion", "lower_bound", c.lower_bound);
        get("inversion", "max_iterations", c.max_iterations);
        get("inversion", "grad_tol", c.grad_tol);
        get("gradcheck", "deltas", c.deltas);
        get("gradcheck", "threshold", c.check_threshold);
        get("output", "snapshot_times", c.snapshot_times);
        get("output", "slip_interval", c.slip_interval);
        get("output", "fault_stride", c.fault_stride);
        c.validate();
        return c;
    }

    static RunConfig parse(const std::string& text) { return from_table(parse_toml(text)); }
};

// ---------------------------------------------------------------------------
// Config -> problem builders
// ---------------------------------------------------------------------------

inline FaultProfile make_profile(const RunConfig& c) {
    const bool fractal = c.fault_kind == "fractal";
    return make_fractal_profile(c.m, c.x0, c.x1, fractal ? c.amplitude_ratio : 0.0,
                                {fractal ? c.wavelength_min : 1.0,
                                 fractal ? c.wavelength_max : c.x1 - c.x0},
                                c.seed, c.order);
}

inline FrictionModel make_friction(const RunConfig& c, const FaultProfile& prof) {
    const int mm = prof.size();
    FrictionModel f;
    f.f0 = c.f0;
    f.V0 = c.V0;
    f.a.resize(mm);
    f.b = Vec::Constant(mm, c.b);
    f.Dc.resize(mm);
    f.sigma_n0 = Vec::Constant(mm, c.sigma_n0);
    f.tau0 = fault_normal_shear_projection(prof, c.sigma_yz0);
    f.tauL.resize(mm);
    f.psi0 = Vec::Constant(mm, c.psi0);
    for (int i = 0; i < mm; ++i) {
        const double x = prof.x_coords(i);
        const bool vw = x >= c.vw_x0 && x <= c.vw_x1;
        f.a(i) = vw ? c.a_vw : c.a_vs;
        f.Dc(i) = vw ? c.dc_vw : c.dc_vs;
        const double dx = x - c.load_xc;
        f.tauL(i) = c.load_amplitude * std::exp(-dx * dx / (2.0 * c.load_d * c.load_d));
    }
    return f;
}

inline ForwardOptions make_options(const RunConfig& c) {
    ForwardOptions opt;
    opt.order = c.order;
    opt.rho = c.rho;
    return opt;
}

inline MeasurementKind misfit_kind_of(const RunConfig& c) {
    return c.misfit_kind == "displacement" ? MeasurementKind::displacement
                                           : MeasurementKind::velocity;
}

/// Full problem assembly for one run: grid, receivers, forward problem.
struct AssembledRun {
    FaultProfile profile;
    CurvilinearGrid grid;
    ReceiverSet receivers;
    Eigen::MatrixXd mu_minus, mu_plus;
    FrictionModel friction;
    ForwardOptions options;
};

inline AssembledRun assemble_run(const RunConfig& c) {
    c.validate();
    AssembledRun r;
    r.profile = make_profile(c);
    r.grid = build_grid(r.profile, c.y_bot, c.y_top, c.n_across());
    r.receivers =
        build_receivers(r.grid, cutout_positions(c.layout), misfit_kind_of(c), c.order);
    r.mu_minus = Eigen::MatrixXd::Constant(r.grid.minus.m, r.grid.minus.n, c.mu);
    r.mu_plus = Eigen::MatrixXd::Constant(r.grid.plus.m, r.grid.plus.n, c.mu);
    r.friction = make_friction(c, r.profile);
    r.options = make_options(c);
    return r;
}

inline ParamId param_from_name(const std::string& name) {
    if (name == "a") return ParamId::a;
    if (name == "b") return ParamId::b;
    if (name == "Dc") return ParamId::Dc;
    if (name == "tau0") return ParamId::tau0;
    if (name == "sigma_n0") return ParamId::sigma_n0;
    if (name == "psi0") return ParamId::psi0;
    throw std::invalid_argument("unknown parameter '" + name + "'");
}

} // namespace rsfinv
