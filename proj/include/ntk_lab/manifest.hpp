#ifndef NTK_LAB_MANIFEST_HPP
#define NTK_LAB_MANIFEST_HPP

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>
#include <openssl/evp.h>

#include "ntk_lab/errors.hpp"

namespace ntk_lab::manifest {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string read_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read '" + p.string() + "'");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::string utc_now() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

/// Lists every file under `dir` (except the manifest itself) with size and sha256, sorted by path.
inline json build(const fs::path& dir, const json& config, const std::string& version, double wall_seconds,
                  int exit_code) {
    const std::string config_hash = sha256_hex(config.dump());
    json files = json::array();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
        const std::string bytes = read_bytes(p);
        files.push_back({{"path", fs::relative(p, dir).generic_string()},
                         {"size", bytes.size()},
                         {"sha256", sha256_hex(bytes)}});
    }
    return {{"run_id", config_hash.substr(0, 12)},
            {"config_sha256", config_hash},
            {"tool_version", version},
            {"created", utc_now()},
            {"wall_time_seconds", wall_seconds},
            {"exit_code", exit_code},
            {"files", files}};
}

inline void write(const fs::path& dir, const json& m) {
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    os << m.dump(2) << '\n';
    if (!os) throw IoError("cannot write manifest in '" + dir.string() + "'");
}

/// Recomputes checksums and returns the paths whose size or digest no longer match.
inline std::vector<std::string> verify(const fs::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("no manifest in '" + dir.string() + "'");
    const json m = json::parse(is);
    std::vector<std::string> bad;
    for (const auto& f : m.at("files")) {
        const fs::path p = dir / f.at("path").get<std::string>();
        if (!fs::exists(p)) {
            bad.push_back(f["path"]);
            continue;
        }
        const std::string bytes = read_bytes(p);
        if (bytes.size() != f["size"].get<std::size_t>() || sha256_hex(bytes) != f["sha256"]) bad.push_back(f["path"]);
    }
    return bad;
}

}  // namespace ntk_lab::manifest

#endif
