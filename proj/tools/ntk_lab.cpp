#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ntk_lab/experiments.hpp"
#include "ntk_lab/manifest.hpp"

using namespace ntk_lab;
using nlohmann::json;

#ifndef NTK_LAB_PRESET_DIR
#define NTK_LAB_PRESET_DIR "presets"
#endif

namespace {

int fail(int code, const std::string& kind, const std::string& message, const json& extra = json::object()) {
    json e{{"error", kind}, {"message", message}, {"exit_code", code}};
    e.update(extra);
    std::cerr << e.dump() << '\n';
    return code;
}

json load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config '" + path + "'");
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("", std::string("not valid JSON: ") + e.what());
    }
}

int run_command(std::string config_path, std::string out, int jobs, const std::string& preset) {
    if (!preset.empty()) config_path = std::string(NTK_LAB_PRESET_DIR) + "/" + preset + ".json";
    if (config_path.empty()) throw ConfigError("", "no config given (pass a path or --preset)");
    json cfg = load_config(config_path);
    schema::validate_config(cfg);
    if (const char* env = std::getenv("NTK_LAB_SEED")) {
        char* end = nullptr;
        const unsigned long long s = std::strtoull(env, &end, 10);
        if (!*env || *end) throw ConfigError("/seed", std::string("NTK_LAB_SEED is not an unsigned integer: ") + env);
        cfg["seed"] = s;
    }
    if (out.empty()) out = cfg.value("output", std::string("runs/") + cfg["experiment"].get<std::string>());

    const auto t0 = std::chrono::steady_clock::now();
    const auto rr = experiments::run(cfg, out, jobs, &std::cerr);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest::write(out, manifest::build(out, cfg, experiments::kToolVersion, wall, rr.exit_code));
    if (rr.exit_code == 3)
        return fail(3, "numerical_abort", "training aborted in one or more cells", {{"cells", rr.summary["aborted"]}});
    std::cout << out << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ntk-lab: gradient-flow and neural tangent kernel experiments"};
    app.require_subcommand(1);

    std::string config_path, out, preset, rundir;
    int jobs = 1;
    auto* run = app.add_subcommand("run", "run an experiment config");
    run->add_option("config", config_path, "config JSON");
    run->add_option("--out", out, "output directory");
    run->add_option("--jobs", jobs, "worker threads for sweep cells")->check(CLI::PositiveNumber);
    run->add_option("--preset", preset, "use a shipped preset instead of a config path");
    auto* cmp = app.add_subcommand("compare", "compare predictors of a finished run");
    cmp->add_option("rundir", rundir, "run directory")->required();
    auto* sch = app.add_subcommand("schema", "print the config JSON schema");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail(2, "usage", e.what());
    }

    try {
        if (sch->parsed()) {
            std::cout << schema::config_schema().dump(2) << '\n';
            return 0;
        }
        if (cmp->parsed()) {
            std::cout << experiments::compare_run(rundir).dump(2) << '\n';
            return 0;
        }
        return run_command(config_path, out, jobs, preset);
    } catch (const ConfigError& e) {
        return fail(2, "config", e.message(), {{"path", e.path()}});
    } catch (const InvalidInput& e) {
        return fail(2, "invalid_input", e.what());
    } catch (const NumericalError& e) {
        return fail(3, "numerical", e.what());
    } catch (const IoError& e) {
        return fail(4, "io", e.what());
    } catch (const ParseError& e) {
        return fail(4, "parse", e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(4, "io", e.what());
    } catch (const std::exception& e) {
        return fail(1, "internal", e.what());
    }
}
