// Configuration-driven command-line entry point: condition checks, MFG and
// frozen-control solves, flow systems, master-equation residual reports and an
// LQ benchmark against the Riccati oracle. One JSON config per run; CSV for
// bulk numeric output, JSON for reports. Exit codes: 0 success, 2 condition
// check failed, 3 solver failure, 4 config/usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <mfg/master.hpp>
#include <mfg/riccati.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using json = nlohmann::json;
using namespace mfg;
namespace fs = std::filesystem;

namespace {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// scalar | flat array | nested array -> matrix (shape checked by the model builders)
Mat mat_from_json(const json& j) {
    if (j.is_number()) return Mat::Constant(1, 1, j.get<double>());
    if (!j.is_array() || j.empty()) throw config_error("matrix field: expected number or array");
    if (j[0].is_number()) {
        Mat m(1, j.size());
        for (std::size_t c = 0; c < j.size(); ++c) m(0, c) = j[c].get<double>();
        return m;
    }
    const std::size_t rows = j.size(), cols = j[0].size();
    Mat m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!j[r].is_array() || j[r].size() != cols)
            throw config_error("matrix field: ragged rows");
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
    }
    return m;
}

Vec vec_from_json(const json& j) {
    if (j.is_number()) return Vec::Constant(1, j.get<double>());
    Vec v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v(i) = j[i].get<double>();
    return v;
}

struct RunConfig {
    CoefficientModel model;
    std::optional<LQSpec> lq;
    TimeGrid grid{0.0, 1.0, 50};
    SolverConfig solver;
    // initial cloud
    Vec cloud_mean;
    double cloud_sd = 1.0;
    std::uint64_t cloud_seed = 2;
    // probes
    std::vector<Vec> probe_x;
    std::size_t y_count = 8;
    double delta_t = 0.025;
    Vec direction;  // gateaux direction (broadcast over particles)
    fs::path out = "artifacts";
    int threads = 1;
};

template <typename T>
T field_or(const json& j, const std::string& key, T def) {
    if (!j.contains(key)) return def;
    return j.at(key).get<T>();
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw config_error(std::string("config parse error: ") + e.what());
    }
    try {
        RunConfig rc;
        const json& jm = j.at("model");
        const std::string family = jm.at("family").get<std::string>();
        if (family == "lq") {
            LQSpec s;
            s.A = mat_from_json(jm.at("A"));
            s.n = static_cast<int>(s.A.rows());
            s.B = mat_from_json(jm.at("B"));
            s.d = static_cast<int>(s.B.cols());
            s.Abar = jm.contains("Abar") ? mat_from_json(jm.at("Abar")) : Mat::Zero(s.n, s.n);
            s.Qx = mat_from_json(jm.at("Qx"));
            s.Qv = mat_from_json(jm.at("Qv"));
            s.Qg = mat_from_json(jm.at("Qg"));
            s.kappa = field_or(jm, "kappa", 0.0);
            s.sigma0 = mat_from_json(jm.at("sigma0"));
            rc.lq = s;
            rc.model = build_lq_model(s);
        } else if (family == "nonlinear-demo") {
            NonlinearDemoSpec s;
            s.alpha = field_or(jm, "alpha", s.alpha);
            s.c_m = field_or(jm, "c_m", s.c_m);
            s.q_x = field_or(jm, "q_x", s.q_x);
            s.q_v = field_or(jm, "q_v", s.q_v);
            s.q_g = field_or(jm, "q_g", s.q_g);
            s.sigma = field_or(jm, "sigma", s.sigma);
            if (jm.contains("declared_L_b0"))
                s.declared_L_b0_override = jm.at("declared_L_b0").get<double>();
            rc.model = build_nonlinear_demo(s);
        } else {
            throw config_error("unknown model family: " + family);
        }

        const json& jg = j.at("grid");
        rc.grid = TimeGrid(jg.at("t").get<double>(), jg.at("T").get<double>(),
                           jg.at("K").get<std::size_t>());

        const json& js = j.at("solver");
        rc.solver.N = js.at("N").get<std::size_t>();
        rc.solver.K = rc.grid.K;
        if (!js.contains("seed") && std::getenv("MFG_SEED") == nullptr)
            throw config_error("solver.seed is mandatory");
        rc.solver.seed = field_or<std::uint64_t>(js, "seed", 0);
        rc.solver.picard_max = field_or(js, "picard_max", rc.solver.picard_max);
        rc.solver.picard_tol = field_or(js, "picard_tol", rc.solver.picard_tol);
        rc.solver.damping = field_or(js, "damping", rc.solver.damping);
        rc.solver.basis_degree = field_or(js, "basis_degree", rc.solver.basis_degree);
        rc.solver.cone_tol = field_or(js, "cone_tol", rc.solver.cone_tol);
        rc.solver.stride = field_or<std::size_t>(js, "stride", rc.solver.stride);

        const json ji = j.value("initial", json::object());
        rc.cloud_mean = ji.contains("mean") ? vec_from_json(ji.at("mean"))
                                            : Vec::Zero(rc.model.n);
        if (rc.cloud_mean.size() != rc.model.n)
            throw config_error("initial.mean dimension mismatch");
        rc.cloud_sd = field_or(ji, "sd", 1.0);
        rc.cloud_seed = field_or<std::uint64_t>(ji, "seed", 2);

        const json jp = j.value("probes", json::object());
        if (jp.contains("x"))
            for (const auto& px : jp.at("x")) rc.probe_x.push_back(vec_from_json(px));
        if (rc.probe_x.empty()) rc.probe_x.push_back(Vec::Zero(rc.model.n));
        for (const auto& px : rc.probe_x)
            if (px.size() != rc.model.n) throw config_error("probes.x dimension mismatch");
        rc.y_count = field_or<std::size_t>(jp, "y_count", rc.y_count);
        rc.delta_t = field_or(jp, "delta_t", rc.delta_t);
        rc.direction = jp.contains("direction") ? vec_from_json(jp.at("direction"))
                                                : Vec::Ones(rc.model.n);

        rc.out = j.value("out", std::string("artifacts"));
        rc.threads = j.value("threads", 1);
        return rc;
    } catch (const json::exception& e) {
        throw config_error(std::string("config schema error: ") + e.what());
    }
}

void apply_env_overrides(RunConfig& rc) {
    if (const char* s = std::getenv("MFG_SEED")) rc.solver.seed = std::stoull(s);
    if (const char* t = std::getenv("MFG_THREADS")) rc.threads = std::stoi(t);
}

std::vector<Vec> make_cloud(const RunConfig& rc) {
    std::mt19937_64 rng(rc.cloud_seed);
    std::normal_distribution<double> nd(0.0, rc.cloud_sd);
    std::vector<Vec> out(rc.solver.N, rc.cloud_mean);
    for (auto& p : out)
        for (int c = 0; c < rc.model.n; ++c) p(c) += nd(rng);
    return out;
}

// fixed shortest-roundtrip formatting keeps artifacts byte-identical per seed
std::string fmt(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

std::ofstream open_artifact(const fs::path& dir, const std::string& name) {
    fs::create_directories(dir);
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw config_error("cannot write artifact: " + (dir / name).string());
    return out;
}

json row_to_json(const ConditionRow& r) {
    return json{{"name", r.name},     {"lhs", r.lhs},   {"rhs", r.rhs},
                {"margin", r.margin}, {"pass", r.pass}, {"evaluable", r.evaluable}};
}

json vec_to_json(const Vec& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json mat_to_json(const Mat& m) {
    json a = json::array();
    for (int r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        a.push_back(row);
    }
    return a;
}

json diagnostics_to_json(const Diagnostics& d) {
    return json{{"picard_iterations", d.picard_iterations},
                {"fixed_point_gap", d.fixed_point_gap},
                {"sweeps", d.sweeps},
                {"sweep_gap", d.sweep_gap},
                {"cone_violations", d.cone_violations},
                {"cone_K", std::isnan(d.cone_K) ? json(nullptr) : json(d.cone_K)},
                {"max_first_order_residual", d.max_first_order_residual},
                {"max_terminal_residual", d.max_terminal_residual},
                {"property_S_pass", d.property_S_pass}};
}

// trajectory CSV: one row per time node with cloud summary statistics.
// columns: k, t, mean_x_<c>, std_x_<c>, mean_p_<c>, mean_v_<c>
void write_trajectory_csv(std::ofstream& out, const FBSDESolution& sol) {
    const int n = sol.n, d = sol.d;
    out << "k,t";
    for (int c = 0; c < n; ++c) out << ",mean_x_" << c;
    for (int c = 0; c < n; ++c) out << ",std_x_" << c;
    for (int c = 0; c < n; ++c) out << ",mean_p_" << c;
    for (int c = 0; c < d; ++c) out << ",mean_v_" << c;
    out << "\n";
    const double N = static_cast<double>(sol.X[0].size());
    for (std::size_t k = 0; k <= sol.grid.K; ++k) {
        Vec mx = Vec::Zero(n), mp = Vec::Zero(n), mv = Vec::Zero(d), sx = Vec::Zero(n);
        for (std::size_t i = 0; i < sol.X[k].size(); ++i) {
            mx += sol.X[k][i];
            mp += sol.P[k][i];
            mv += sol.v[k][i];
        }
        mx /= N;
        mp /= N;
        mv /= N;
        for (const auto& x : sol.X[k]) sx += (x - mx).cwiseAbs2();
        sx = (sx / N).cwiseSqrt();
        out << k << ',' << fmt(sol.grid.node(k));
        for (int c = 0; c < n; ++c) out << ',' << fmt(mx(c));
        for (int c = 0; c < n; ++c) out << ',' << fmt(sx(c));
        for (int c = 0; c < n; ++c) out << ',' << fmt(mp(c));
        for (int c = 0; c < d; ++c) out << ',' << fmt(mv(c));
        out << "\n";
    }
}

// flow CSV: one row per time node with the particle-mean flow blocks.
// columns: k, t, mean_dX_<r><c>, mean_dP_<r><c>, mean_dv_<r><c>
void write_flow_csv(std::ofstream& out, const TimeGrid& grid, const FlowResult& flow, int n,
                    int d) {
    const int r = flow.r;
    out << "k,t";
    for (int a = 0; a < n; ++a)
        for (int c = 0; c < r; ++c) out << ",mean_dX_" << a << c;
    for (int a = 0; a < n; ++a)
        for (int c = 0; c < r; ++c) out << ",mean_dP_" << a << c;
    for (int a = 0; a < d; ++a)
        for (int c = 0; c < r; ++c) out << ",mean_dv_" << a << c;
    out << "\n";
    const auto mean_block = [](const std::vector<Mat>& blocks) {
        Mat m = Mat::Zero(blocks[0].rows(), blocks[0].cols());
        for (const auto& b : blocks) m += b;
        return Mat(m / static_cast<double>(blocks.size()));
    };
    for (std::size_t k = 0; k <= grid.K; ++k) {
        const Mat mx = mean_block(flow.dX[k]);
        const Mat mp = mean_block(flow.dP[k]);
        const Mat mv = mean_block(flow.dv[k]);
        out << k << ',' << fmt(grid.node(k));
        for (int a = 0; a < n; ++a)
            for (int c = 0; c < r; ++c) out << ',' << fmt(mx(a, c));
        for (int a = 0; a < n; ++a)
            for (int c = 0; c < r; ++c) out << ',' << fmt(mp(a, c));
        for (int a = 0; a < d; ++a)
            for (int c = 0; c < r; ++c) out << ',' << fmt(mv(a, c));
        out << "\n";
    }
}

int cmd_check(const RunConfig& rc) {
    const ConditionReport rep = full_condition_report(rc.model.consts);
    json out;
    out["model"] = rc.model.name;
    out["property_S"] = json::array();
    for (const auto& r : rep.property_S) out["property_S"].push_back(row_to_json(r));
    out["cone_condition"] = row_to_json(rep.cone_condition);
    out["cone_K"] = std::isnan(rep.cone_K) ? json(nullptr) : json(rep.cone_K);
    out["c1"] = rep.c1;
    out["c2"] = rep.c2;
    out["notes"] = rep.notes;
    bool pass = rep.cone_condition.pass;
    for (const auto& r : rep.property_S) pass = pass && r.pass;
    out["pass"] = pass;
    auto f = open_artifact(rc.out, "conditions.json");
    f << out.dump(2) << "\n";
    std::cout << (pass ? "conditions: pass" : "conditions: FAIL") << "\n";
    return pass ? 0 : 2;
}

int cmd_solve_mfg(const RunConfig& rc) {
    auto sol = solve_mfg(rc.model, rc.grid, EmpiricalMeasure(make_cloud(rc)), rc.solver);
    auto csv = open_artifact(rc.out, "trajectory.csv");
    write_trajectory_csv(csv, sol);
    auto dj = open_artifact(rc.out, "diagnostics.json");
    dj << diagnostics_to_json(sol.diagnostics).dump(2) << "\n";
    std::cout << "solve-mfg: picard_iterations=" << sol.diagnostics.picard_iterations
              << " gap=" << fmt(sol.diagnostics.fixed_point_gap) << "\n";
    return 0;
}

int cmd_solve_control(const RunConfig& rc) {
    auto eq = solve_mfg(rc.model, rc.grid, EmpiricalMeasure(make_cloud(rc)), rc.solver);
    auto paths = std::make_shared<BrownianPaths>(rc.solver.N, rc.grid.K, rc.model.n,
                                                 rc.solver.seed ^ 0x517CC1B727220A95ull);
    std::vector<Vec> x0(rc.solver.N, rc.probe_x[0]);
    auto sol = solve_control_frozen(rc.model, rc.grid, x0, eq.measure_flow, paths, rc.solver);
    auto csv = open_artifact(rc.out, "trajectory.csv");
    write_trajectory_csv(csv, sol);
    json dj = diagnostics_to_json(sol.diagnostics);
    dj["cost"] = cost_of(rc.model, sol);
    auto f = open_artifact(rc.out, "diagnostics.json");
    f << dj.dump(2) << "\n";
    std::cout << "solve-control: cost=" << fmt(dj["cost"].get<double>()) << "\n";
    return 0;
}

int cmd_flows(const RunConfig& rc) {
    auto sol = solve_mfg(rc.model, rc.grid, EmpiricalMeasure(make_cloud(rc)), rc.solver);
    auto lin = build_linearization(rc.model, sol);

    auto jac = jacobian_x(lin);
    auto jf = open_artifact(rc.out, "flow_jacobian.csv");
    write_flow_csv(jf, rc.grid, jac, rc.model.n, rc.model.d);

    std::vector<Vec> eta(rc.solver.N, rc.direction);
    auto gx = gateaux_xi(lin, eta);
    auto gf = open_artifact(rc.out, "flow_gateaux.csv");
    write_flow_csv(gf, rc.grid, gx, rc.model.n, rc.model.d);

    if (rc.model.mean_field) {
        // kernel flows at a quantile y-grid of the initial cloud
        const auto strata = quantile_strata(sol.X[0], rc.y_count);
        auto kf_csv = open_artifact(rc.out, "kernel_flow.csv");
        kf_csv << "y_index";
        for (int c = 0; c < rc.model.n; ++c) kf_csv << ",y_" << c;
        kf_csv << ",k,t";
        for (int a = 0; a < rc.model.n; ++a)
            for (int c = 0; c < rc.model.n; ++c) kf_csv << ",mean_ddX_" << a << c;
        kf_csv << "\n";
        for (std::size_t q = 0; q < strata.size(); ++q) {
            auto kf = kernel_flow(rc.model, lin, strata[q].y);
            for (std::size_t k = 0; k <= rc.grid.K; ++k) {
                Mat m = Mat::Zero(rc.model.n, rc.model.n);
                for (const auto& b : kf.dd.dX[k]) m += b;
                m /= static_cast<double>(kf.dd.dX[k].size());
                kf_csv << q;
                for (int c = 0; c < rc.model.n; ++c) kf_csv << ',' << fmt(strata[q].y(c));
                kf_csv << ',' << k << ',' << fmt(rc.grid.node(k));
                for (int a = 0; a < rc.model.n; ++a)
                    for (int c = 0; c < rc.model.n; ++c) kf_csv << ',' << fmt(m(a, c));
                kf_csv << "\n";
            }
        }
    }
    std::cout << "flows: done\n";
    return 0;
}

int cmd_master(const RunConfig& rc) {
    MasterOptions opts;
    opts.y_count = rc.y_count;
    opts.delta_t = rc.delta_t;
    opts.with_second_order = rc.model.has_second_measure_derivs();
    auto rep = master_residual(rc.model, rc.grid, rc.probe_x[0], EmpiricalMeasure(make_cloud(rc)),
                               rc.solver, opts);
    json out;
    out["V"] = rep.vd.V;
    out["dxV"] = vec_to_json(rep.vd.dxV);
    out["dxxV"] = mat_to_json(rep.vd.dxxV);
    out["dtV_identity"] = rep.vd.dtV;
    out["dtV_fd"] = rep.dtV_fd;
    out["residual_identity"] = rep.residual_identity;
    out["residual_fd"] = rep.residual_fd;
    out["terminal_gap"] = rep.terminal_gap;
    out["growth_margin"] =
        std::isnan(rep.growth_margin) ? json(nullptr) : json(rep.growth_margin);
    out["y_grid"] = json::array();
    out["lfd_grad"] = json::array();
    for (std::size_t q = 0; q < rep.vd.y_grid.size(); ++q) {
        out["y_grid"].push_back(vec_to_json(rep.vd.y_grid[q]));
        out["lfd_grad"].push_back(vec_to_json(rep.vd.lfd_grad[q]));
    }
    if (!rep.vd.lfd_hess.empty()) {
        out["lfd_hess"] = json::array();
        for (const auto& h : rep.vd.lfd_hess) out["lfd_hess"].push_back(mat_to_json(h));
    }
    auto f = open_artifact(rc.out, "master.json");
    f << out.dump(2) << "\n";
    std::cout << "master-residual: residual_fd=" << fmt(rep.residual_fd)
              << " terminal_gap=" << fmt(rep.terminal_gap) << "\n";
    return 0;
}

int cmd_bench_lq(const RunConfig& rc) {
    if (!rc.lq) throw config_error("bench-lq requires an lq model");
    auto cloud = make_cloud(rc);
    Vec m0 = Vec::Zero(rc.model.n);
    for (const auto& p : cloud) m0 += p;
    m0 /= static_cast<double>(cloud.size());
    auto ric = solve_riccati(*rc.lq, rc.grid, m0);
    auto sol = solve_mfg(rc.model, rc.grid, EmpiricalMeasure(cloud), rc.solver);

    auto csv = open_artifact(rc.out, "bench.csv");
    // node-wise floored RMS relative errors: rms(a - ref) / (1 + rms(ref))
    csv << "k,t,rel_err_P,rel_err_v\n";
    double max_p = 0.0;
    const double N = static_cast<double>(sol.X[0].size());
    for (std::size_t k = 0; k <= rc.grid.K; ++k) {
        double dp = 0.0, dv = 0.0, np = 0.0, nv = 0.0;
        for (std::size_t i = 0; i < sol.X[k].size(); ++i) {
            const Vec pref = ric.dx_value(k, sol.X[k][i]);
            const Vec vref = ric.feedback(k, sol.X[k][i]);
            dp += (sol.P[k][i] - pref).squaredNorm();
            dv += (sol.v[k][i] - vref).squaredNorm();
            np += pref.squaredNorm();
            nv += vref.squaredNorm();
        }
        const double ep = std::sqrt(dp / N) / (1.0 + std::sqrt(np / N));
        const double ev = std::sqrt(dv / N) / (1.0 + std::sqrt(nv / N));
        max_p = std::max(max_p, ep);
        csv << k << ',' << fmt(rc.grid.node(k)) << ',' << fmt(ep) << ',' << fmt(ev) << "\n";
    }
    std::cout << "bench-lq: max_rel_err_P=" << fmt(max_p) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mean field game FBSDE solver"};
    app.require_subcommand(1);
    std::string config_path, out_override;
    int threads_override = 0;
    const std::vector<std::string> names = {"check",  "solve-mfg",       "solve-control",
                                            "flows",  "master-residual", "bench-lq"};
    for (const auto& name : names) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path)->required();
        sub->add_option("--out", out_override);
        sub->add_option("--threads", threads_override);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 4;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    RunConfig rc;
    try {
        rc = load_config(config_path);
        apply_env_overrides(rc);
        if (!out_override.empty()) rc.out = out_override;
        if (threads_override > 0) rc.threads = threads_override;
        if (rc.threads < 1) throw config_error("threads must be >= 1");
        Eigen::setNbThreads(rc.threads);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 4;
    } catch (const invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 4;
    }

    try {
        if (cmd == "check") return cmd_check(rc);
        if (cmd == "solve-mfg") return cmd_solve_mfg(rc);
        if (cmd == "solve-control") return cmd_solve_control(rc);
        if (cmd == "flows") return cmd_flows(rc);
        if (cmd == "master-residual") return cmd_master(rc);
        if (cmd == "bench-lq") return cmd_bench_lq(rc);
        std::cerr << "unknown command\n";
        return 4;
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 4;
    } catch (const invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        // solver / model / capability failures: diagnostics always written
        std::cerr << "solver error: " << e.what() << "\n";
        try {
            auto f = open_artifact(rc.out, "diagnostics.json");
            f << json{{"error", e.what()}}.dump(2) << "\n";
        } catch (...) {
        }
        return 3;
    }
}
