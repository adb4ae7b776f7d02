#pragma once

#include <rsfinv/config.hpp>
#include <rsfinv/forward.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsfinv {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// CSV: 17-significant-digit floats, lossless round trip
// ---------------------------------------------------------------------------

inline void write_csv(const std::filesystem::path& path,
                      const std::vector<std::string>& header, const Eigen::MatrixXd& data) {
    if (header.size() != static_cast<std::size_t>(data.cols()))
        throw std::invalid_argument("csv header width mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    for (std::size_t k = 0; k < header.size(); ++k)
        out << (k ? "," : "") << header[k];
    out << "\n";
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
        for (Eigen::Index j = 0; j < data.cols(); ++j)
            out << (j ? "," : "") << format_double(data(i, j));
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct CsvFile {
    std::vector<std::string> header;
    Eigen::MatrixXd data;
};

inline CsvFile read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    CsvFile f;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty csv " + path.string());
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) f.header.push_back(tok);
    }
    std::vector<double> vals;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::size_t cols = 0;
        while (std::getline(ss, tok, ',')) {
            char* end = nullptr;
            vals.push_back(std::strtod(tok.c_str(), &end));
            if (!end || *end != '\0')
                throw std::runtime_error("bad number '" + tok + "' in " + path.string());
            ++cols;
        }
        if (cols != f.header.size())
            throw std::runtime_error("ragged csv row in " + path.string());
        ++rows;
    }
    f.data.resize(rows, f.header.size());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < f.header.size(); ++j)
            f.data(i, j) = vals[i * f.header.size() + j];
    return f;
}

// ---------------------------------------------------------------------------
// JSON sidecars and the run manifest
// ---------------------------------------------------------------------------

/// Standard units block declared in every sidecar.
inline json units_block() {
    return json{{"coordinates", "km"}, {"time", "s"},       {"displacement", "m"},
                {"velocity", "m/s"},   {"stress", "MPa"},   {"slip", "m"},
                {"slip_velocity", "m/s"}};
}

inline void write_sidecar(const std::filesystem::path& csv_path, std::uint64_t config_hash,
                          const std::string& description, json extra = json::object()) {
    json j;
    j["file"] = csv_path.filename().string();
    j["config_hash"] = hex64(config_hash);
    j["description"] = description;
    j["units"] = units_block();
    for (auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream out(csv_path.string() + ".json");
    if (!out) throw std::runtime_error("cannot open sidecar for " + csv_path.string());
    out << j.dump(2) << "\n";
}

inline std::uint64_t hash_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return fnv1a64(ss.str());
}

/// manifest.json: config hash + per-file content hashes of every artifact
/// emitted by the run, written last.
inline void write_manifest(const std::filesystem::path& dir, std::uint64_t config_hash,
                           const std::vector<std::filesystem::path>& files,
                           json extra = json::object()) {
    json j;
    j["config_hash"] = hex64(config_hash);
    for (auto& [k, v] : extra.items()) j[k] = v;
    j["files"] = json::object();
    for (const auto& f : files) j["files"][f.filename().string()] = hex64(hash_file(f));
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot open manifest in " + dir.string());
    out << j.dump(2) << "\n";
}

/// Checks that every file listed in the manifest exists, hashes to the
/// recorded value, and that every sidecar carries the manifest's config
/// hash. Returns a list of human-readable problems (empty = consistent).
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
    std::vector<std::string> problems;
    std::ifstream in(dir / "manifest.json");
    if (!in) return {"manifest.json missing in " + dir.string()};
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) return {"manifest.json is not valid JSON"};
    const std::string chash = j.value("config_hash", "");
    for (auto& [name, want] : j["files"].items()) {
        const auto p = dir / name;
        if (!std::filesystem::exists(p)) {
            problems.push_back(name + ": missing");
            continue;
        }
        const std::string got = hex64(hash_file(p));
        if (got != want.get<std::string>())
            problems.push_back(name + ": content hash mismatch");
        if (p.extension() == ".json") {
            std::ifstream sin(p);
            json side = json::parse(sin, nullptr, false);
            if (!side.is_discarded() && side.contains("config_hash") &&
                side["config_hash"] != chash)
                problems.push_back(name + ": config hash differs from manifest");
        }
    }
    return problems;
}

// ---------------------------------------------------------------------------
// Binary stage-history checkpoint: fixed 64-byte header followed by
// little-endian float64 arrays (stage_times, v_star, psi, measurements,
// residuals; matrices row-major).
// ---------------------------------------------------------------------------

struct CheckpointHeader {
    char magic[8];            // "RSFINV\0\0"
    std::uint32_t version;    // format version
    std::uint32_t reserved;
    std::uint64_t state_size; // N, full packed state length of the run
    std::uint64_t stage_count;
    std::uint64_t fault_points;
    std::uint64_t receiver_count;
    char pad[16];
};
static_assert(sizeof(CheckpointHeader) == 64);

namespace detail {

inline void write_f64(std::ofstream& out, const double* p, std::size_t n) {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint writer assumes a little-endian host");
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 8));
}

inline void read_f64(std::ifstream& in, double* p, std::size_t n) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 8));
    if (!in) throw std::runtime_error("checkpoint truncated");
}

inline void write_rowmajor(std::ofstream& out, const Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Eigen::RowVectorXd row = m.row(i);
        write_f64(out, row.data(), static_cast<std::size_t>(row.size()));
    }
}

inline void read_rowmajor(std::ifstream& in, Eigen::MatrixXd& m) {
    Eigen::RowVectorXd row(m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        read_f64(in, row.data(), static_cast<std::size_t>(row.size()));
        m.row(i) = row;
    }
}

} // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const StageHistory& h,
                             std::uint64_t state_size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    CheckpointHeader hd{};
    std::memcpy(hd.magic, "RSFINV\0\0", 8);
    hd.version = 1;
    hd.state_size = state_size;
    hd.stage_count = static_cast<std::uint64_t>(h.stage_times.size());
    hd.fault_points = static_cast<std::uint64_t>(h.v_star.cols());
    hd.receiver_count = static_cast<std::uint64_t>(h.measurements.cols());
    out.write(reinterpret_cast<const char*>(&hd), sizeof(hd));
    const double meta[2] = {h.dt, static_cast<double>(h.nsteps)};
    detail::write_f64(out, meta, 2);
    detail::write_f64(out, h.stage_times.data(), hd.stage_count);
    detail::write_rowmajor(out, h.v_star);
    detail::write_rowmajor(out, h.psi);
    detail::write_rowmajor(out, h.measurements);
    detail::write_rowmajor(out, h.residuals);
    if (!out) throw std::runtime_error("checkpoint write failed for " + path.string());
}

inline StageHistory read_checkpoint(const std::filesystem::path& path,
                                    std::uint64_t* state_size = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    CheckpointHeader hd{};
    in.read(reinterpret_cast<char*>(&hd), sizeof(hd));
    if (!in || std::memcmp(hd.magic, "RSFINV\0\0", 8) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path.string());
    if (hd.version != 1) throw std::runtime_error("unsupported checkpoint version");
    StageHistory h;
    double meta[2];
    detail::read_f64(in, meta, 2);
    h.dt = meta[0];
    h.nsteps = static_cast<int>(meta[1]);
    h.stage_times.resize(static_cast<Eigen::Index>(hd.stage_count));
    detail::read_f64(in, h.stage_times.data(), hd.stage_count);
    const auto rows = static_cast<Eigen::Index>(hd.stage_count);
    h.v_star.resize(rows, static_cast<Eigen::Index>(hd.fault_points));
    h.psi.resize(rows, static_cast<Eigen::Index>(hd.fault_points));
    h.measurements.resize(rows, static_cast<Eigen::Index>(hd.receiver_count));
    h.residuals.resize(rows, static_cast<Eigen::Index>(hd.receiver_count));
    detail::read_rowmajor(in, h.v_star);
    detail::read_rowmajor(in, h.psi);
    detail::read_rowmajor(in, h.measurements);
    detail::read_rowmajor(in, h.residuals);
    if (state_size) *state_size = hd.state_size;
    return h;
}

} // namespace rsfinv
