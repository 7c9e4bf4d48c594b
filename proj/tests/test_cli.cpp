#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string cli = MFG_CLI_PATH;
const fs::path configs = MFG_CONFIG_DIR;

fs::path work_dir() {
    const fs::path p = fs::temp_directory_path() / "mfg_cli_test";
    fs::create_directories(p);
    return p;
}

int run(const std::string& args) {
    const int rc = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

json slurp_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

}  // namespace

// [DERIVED] The conditioned wide-control model satisfies all three structural
// inequalities and the cone condition, so `check` passes with exit 0 and the
// report carries three passing rows.
TEST_CASE("check passes on the conditioned model") {
    const fs::path out = work_dir() / "check_pass";
    REQUIRE(run("check --config " + (configs / "lq_conditioned.json").string() + " --out " +
                out.string()) == 0);
    const json rep = slurp_json(out / "conditions.json");
    REQUIRE(rep.at("property_S").size() == 3);
    for (const auto& row : rep.at("property_S")) CHECK(row.at("pass").get<bool>());
    CHECK(rep.at("cone_condition").at("pass").get<bool>());
    CHECK(rep.at("pass").get<bool>());
}

// [DERIVED] The stationary benchmark sits on the cone-condition boundary (its
// constant is undefined), so `check` reports failure with exit 2 but still
// writes the report.
TEST_CASE("check fails with exit 2 on the boundary model") {
    const fs::path out = work_dir() / "check_fail";
    CHECK(run("check --config " + (configs / "lq_stationary.json").string() + " --out " +
              out.string()) == 2);
    const json rep = slurp_json(out / "conditions.json");
    CHECK_FALSE(rep.at("pass").get<bool>());
}

// [TRIVIAL] Schema contract: a config without a seed is rejected with exit 4
// and no artifacts are produced.
TEST_CASE("missing seed is a config error") {
    const fs::path dir = work_dir();
    const fs::path cfg = dir / "no_seed.json";
    {
        json j = json::parse(slurp(configs / "lq_conditioned.json"));
        j["solver"].erase("seed");
        std::ofstream(cfg) << j.dump(2);
    }
    const fs::path out = dir / "no_seed_out";
    CHECK(run("check --config " + cfg.string() + " --out " + out.string()) == 4);
    CHECK_FALSE(fs::exists(out));
}

// [TRIVIAL] Usage errors: unreadable config path and missing required flag.
TEST_CASE("usage errors exit with code 4") {
    CHECK(run("check --config /nonexistent/path.json") == 4);
    CHECK(run("check") == 4);
    CHECK(run("not-a-command --config x.json") == 4);
}

// [DERIVED] Identical config and seed produce byte-identical artifacts.
TEST_CASE("artifacts are byte-identical per seed") {
    const fs::path dir = work_dir();
    const std::string cfg = (configs / "lq_mean_field.json").string();
    REQUIRE(run("solve-mfg --config " + cfg + " --out " + (dir / "det_a").string()) == 0);
    REQUIRE(run("solve-mfg --config " + cfg + " --out " + (dir / "det_b").string()) == 0);
    CHECK(slurp(dir / "det_a/trajectory.csv") == slurp(dir / "det_b/trajectory.csv"));
    CHECK(slurp(dir / "det_a/diagnostics.json") == slurp(dir / "det_b/diagnostics.json"));
}

// [DERIVED] The MFG_SEED environment variable overrides the config seed, which
// changes the sampled noise and hence the artifact bytes.
TEST_CASE("seed override changes the artifacts") {
    const fs::path dir = work_dir();
    const std::string cfg = (configs / "lq_mean_field.json").string();
    REQUIRE(run("solve-mfg --config " + cfg + " --out " + (dir / "seed_base").string()) == 0);
    const int rc = std::system(("MFG_SEED=99 " + cli + " solve-mfg --config " + cfg + " --out " +
                                (dir / "seed_over").string() + " > /dev/null 2>&1")
                                   .c_str());
    REQUIRE(WEXITSTATUS(rc) == 0);
    CHECK(slurp(dir / "seed_base/trajectory.csv") != slurp(dir / "seed_over/trajectory.csv"));
}

// [DERIVED] The Riccati benchmark on the stationary model: the error table has
// the documented header and its adjoint column stays below 3%.
TEST_CASE("bench-lq error table stays below the benchmark bound") {
    const fs::path out = work_dir() / "bench";
    REQUIRE(run("bench-lq --config " + (configs / "lq_stationary.json").string() + " --out " +
                out.string()) == 0);
    const auto rows = read_csv(out / "bench.csv");
    REQUIRE(rows.size() >= 2);
    REQUIRE(rows[0] == std::vector<std::string>{"k", "t", "rel_err_P", "rel_err_v"});
    double max_p = 0.0;
    for (std::size_t r = 1; r < rows.size(); ++r) max_p = std::max(max_p, std::stod(rows[r][2]));
    CHECK(max_p <= 0.03);
}

// [DERIVED] Master report on the stationary benchmark (closed form
// V = x^2/2 + (T-t)/2): second spatial derivative 1 within 3%, FD-mode
// residual within 0.05, terminal gap within 1e-3, and a measure-free model has
// an identically zero measure gradient.
TEST_CASE("master-residual report matches the closed form") {
    const fs::path out = work_dir() / "master";
    REQUIRE(run("master-residual --config " + (configs / "lq_stationary.json").string() +
                " --out " + out.string()) == 0);
    const json rep = slurp_json(out / "master.json");
    CHECK(std::abs(rep.at("dxV")[0].get<double>() - 1.0) <= 0.03);
    CHECK(std::abs(rep.at("dxxV")[0][0].get<double>() - 1.0) <= 0.03);
    CHECK(std::abs(rep.at("dtV_identity").get<double>() + 0.5) <= 0.025);
    CHECK(std::abs(rep.at("residual_fd").get<double>()) <= 0.05);
    CHECK(rep.at("terminal_gap").get<double>() <= 1e-3);
    for (const auto& g : rep.at("lfd_grad")) CHECK(g[0].get<double>() == 0.0);
}

// [DERIVED] Flow artifacts on the mean-field model: documented headers, and at
// the initial node the Jacobian block is exactly the identity and the Gateaux
// block exactly the (unit) direction.
TEST_CASE("flows emits the flow tables") {
    const fs::path out = work_dir() / "flows";
    REQUIRE(run("flows --config " + (configs / "lq_mean_field.json").string() + " --out " +
                out.string()) == 0);
    const auto jac = read_csv(out / "flow_jacobian.csv");
    REQUIRE(jac[0][0] == "k");
    REQUIRE(jac[0][2] == "mean_dX_00");
    CHECK(std::stod(jac[1][2]) == 1.0);
    const auto gx = read_csv(out / "flow_gateaux.csv");
    CHECK(std::stod(gx[1][2]) == 1.0);
    const auto kf = read_csv(out / "kernel_flow.csv");
    REQUIRE(kf[0][0] == "y_index");
    // 8 y-grid points, K + 1 = 21 rows each
    CHECK(kf.size() == 1 + 8 * 21);
}

// [DERIVED] solve-control writes the trajectory of a frozen-control companion
// started at the probe point: the initial node has zero spread and mean equal
// to the probe, and its cost lands in the diagnostics.
TEST_CASE("solve-control starts the companion at the probe") {
    const fs::path out = work_dir() / "control";
    REQUIRE(run("solve-control --config " + (configs / "lq_mean_field.json").string() +
                " --out " + out.string()) == 0);
    const auto rows = read_csv(out / "trajectory.csv");
    CHECK(std::stod(rows[1][2]) == 0.5);  // mean_x_0 at k = 0
    CHECK(std::stod(rows[1][3]) == 0.0);  // std_x_0 at k = 0
    const json dj = slurp_json(out / "diagnostics.json");
    CHECK(std::isfinite(dj.at("cost").get<double>()));
}

// [DERIVED] The nonlinear demo family parses and solves through the CLI.
TEST_CASE("nonlinear demo config runs end to end") {
    const fs::path out = work_dir() / "nonlinear";
    REQUIRE(run("solve-mfg --config " + (configs / "nonlinear_demo.json").string() + " --out " +
                out.string()) == 0);
    const json dj = slurp_json(out / "diagnostics.json");
    CHECK(dj.at("max_first_order_residual").get<double>() <= 1e-6);
}
