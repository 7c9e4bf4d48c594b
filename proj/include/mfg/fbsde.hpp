#pragma once

// Particle solvers for the MFG forward-backward system and the frozen-measure
// control system. Scheme: explicit Euler-Maruyama forward pass driven by the
// current decoupling-field estimate; backward pass by least-squares Monte
// Carlo with an implicit-in-P one-step solve; the two passes are iterated
// ("sweeps") to a fixed point of the decoupling field. The mean field closure
// m(s) = law(X(s)) is an outer Picard iteration on the measure flow.

#include <mfg/common.hpp>
#include <mfg/conditions.hpp>
#include <mfg/hamiltonian.hpp>
#include <mfg/measures.hpp>
#include <mfg/model.hpp>
#include <mfg/regression.hpp>

#include <memory>
#include <optional>
#include <sstream>
#include <vector>

namespace mfg {

struct SolverConfig {
    std::size_t N = 1000;       // particles
    std::size_t K = 50;         // time steps
    int picard_max = 60;        // outer measure-flow iterations
    double picard_tol = 1e-8;   // W2 gap between successive measure flows
    double damping = 1.0;       // damping on decoupling-field coefficients
    int basis_degree = 2;       // regression basis total degree
    std::uint64_t seed = 1;
    double cone_tol = 1e-6;
    std::size_t stride = 0;     // subsample stride for independent-copy sums
    int sweep_max = 600;        // inner decoupling-field sweeps
    double sweep_tol = 1e-12;
    double newton_tol = 1e-10;

    void validate() const {
        if (N < 1 || K < 1) throw invalid_argument("SolverConfig: N, K >= 1");
        if (!(damping > 0.0) || damping > 1.0)
            throw invalid_argument("SolverConfig: damping in (0, 1]");
        if (!(picard_tol > 0.0)) throw invalid_argument("SolverConfig: picard_tol > 0");
    }
};

struct Diagnostics {
    int picard_iterations = 0;
    double fixed_point_gap = 0.0;      // final measure-flow W2 gap
    int sweeps = 0;                     // inner sweeps of the last solve
    double sweep_gap = 0.0;
    int cone_violations = -1;           // -1: cone constant undefined
    double cone_K = std::numeric_limits<double>::quiet_NaN();
    double max_first_order_residual = 0.0;
    double max_terminal_residual = 0.0;
    std::vector<double> gap_history;
    bool property_S_pass = true;
};

// Per-node decoupling-field data: the regression degree actually used and the
// fitted coefficient blocks for P (nb x n) and Q (nb x n*n, column-major in
// the Q entries).
struct NodeField {
    int degree_used = 0;
    Mat coefP;
    Mat coefQ;
};

struct FBSDESolution {
    TimeGrid grid{0.0, 1.0, 1};
    SolverConfig config;
    int n = 1, d = 1;
    std::vector<std::vector<Vec>> X, P, v;  // [k][i]
    std::vector<std::vector<Mat>> Q;        // [k][i], n x n
    std::vector<EmpiricalMeasure> measure_flow;  // K+1 clouds
    std::vector<NodeField> fields;               // K+1 nodes
    Diagnostics diagnostics;
    std::shared_ptr<BrownianPaths> paths;
};

namespace detail {

// Decoupled control evaluator: closed-form feedback for LQ models (the gain
// matrix -Qv^{-1} B' is precomputed once), Newton minimization otherwise.
struct ControlOp {
    const CoefficientModel* model = nullptr;
    bool lq = false;
    Mat gain;  // d x n, v = gain * p
    double tol = 1e-10;

    ControlOp(const CoefficientModel& m, double newton_tol) : model(&m), tol(newton_tol) {
        if (m.lq) {
            lq = true;
            gain = -m.lq->Qv.ldlt().solve(m.lq->B.transpose());
        }
    }
    Vec operator()(double s, const Vec& x, const MeasureCtx& ctx, const Vec& p,
                   std::optional<Vec> warm = std::nullopt) const {
        if (lq) return gain * p;
        return minimize_lagrangian(*model, s, x, ctx, p, tol, 50, std::move(warm)).v_hat;
    }
};

inline Vec control_from_p(const CoefficientModel& model, double s, const Vec& x,
                          const MeasureCtx& ctx, const Vec& p, double tol,
                          std::optional<Vec> warm = std::nullopt) {
    return ControlOp(model, tol)(s, x, ctx, p, std::move(warm));
}

// Implicit one-step backward solve:
//   p = Ehat + dt * (D_xH(s, x, m, p) + sigma1_term), fixed point in p.
inline Vec implicit_p(const CoefficientModel& model, const ControlOp& control, double s,
                      const Vec& x, const MeasureCtx& ctx, const Vec& Ehat,
                      const Vec& sigma1_term, double dt) {
    Vec p = Ehat;
    Vec v = control(s, x, ctx, p);
    for (int it = 0; it < 200; ++it) {
        const Vec dxH = model.Dxb(s, x, ctx, v).transpose() * p + model.Dxf(s, x, ctx, v);
        Vec pn = Ehat + dt * (dxH + sigma1_term);
        const double gap = (pn - p).norm();
        p = pn;
        v = control(s, x, ctx, p, v);
        if (gap <= 1e-14 * (1.0 + p.norm())) break;
        if (it == 199) throw solver_error("implicit backward step did not converge");
    }
    return p;
}

}  // namespace detail

// Frozen-measure control solve. x0: initial state per particle. measure_flow:
// cloud per node (K+1). warm: optional decoupling field to start the sweeps.
inline FBSDESolution solve_control_frozen(const CoefficientModel& model, const TimeGrid& grid,
                                          const std::vector<Vec>& x0,
                                          const std::vector<EmpiricalMeasure>& measure_flow,
                                          std::shared_ptr<BrownianPaths> paths,
                                          const SolverConfig& config,
                                          const std::vector<NodeField>* warm = nullptr) {
    config.validate();
    const std::size_t N = x0.size(), K = grid.K;
    const int n = model.n;
    const double dt = grid.dt;
    if (measure_flow.size() != K + 1)
        throw invalid_argument("solve_control_frozen: measure flow must have K+1 nodes");
    if (paths->particles() < N || paths->steps() < K)
        throw invalid_argument("solve_control_frozen: path table too small");

    std::vector<MeasureCtx> ctx;
    ctx.reserve(K + 1);
    for (std::size_t k = 0; k <= K; ++k) ctx.emplace_back(measure_flow[k]);

    FBSDESolution sol;
    sol.grid = grid;
    sol.config = config;
    sol.n = n;
    sol.d = model.d;
    sol.paths = paths;
    sol.measure_flow = measure_flow;
    sol.X.assign(K + 1, std::vector<Vec>(N, Vec::Zero(n)));
    sol.P = sol.X;
    sol.v.assign(K + 1, std::vector<Vec>(N, Vec::Zero(model.d)));
    sol.Q.assign(K + 1, std::vector<Mat>(N, Mat::Zero(n, n)));
    sol.fields.assign(K + 1, NodeField{});

    std::vector<NodeField> field = warm ? *warm : std::vector<NodeField>(K + 1, NodeField{});
    const bool have_warm = warm != nullptr;
    std::vector<std::vector<Vec>>& X = sol.X;
    std::vector<std::vector<Vec>> Pfit(K + 1, std::vector<Vec>(N, Vec::Zero(n)));
    std::vector<std::vector<Vec>> Pfit_prev;
    std::vector<std::vector<Vec>> X_prev;
    std::vector<NodeRegression> reg(K + 1);
    bool field_ready = have_warm;
    const detail::ControlOp control(model, config.newton_tol);

    // Anderson acceleration state for the decoupling-field fixed point. The
    // sweep map field -> (forward pass; backward pass) -> field need not be a
    // contraction on long horizons, so plain (even damped) iteration can
    // diverge; Anderson mixing on the stacked coefficient vector solves the
    // affine fixed-point equation GMRES-style and converges regardless.
    auto flatten = [&](const std::vector<NodeField>& f) {
        Eigen::Index total = 0;
        for (const auto& nf : f) total += nf.coefP.size();
        Vec out(total);
        Eigen::Index pos = 0;
        for (const auto& nf : f) {
            out.segment(pos, nf.coefP.size()) =
                Eigen::Map<const Vec>(nf.coefP.data(), nf.coefP.size());
            pos += nf.coefP.size();
        }
        return out;
    };
    auto unflatten = [&](const Vec& vals, std::vector<NodeField>& f) {
        Eigen::Index pos = 0;
        for (auto& nf : f) {
            Eigen::Map<Vec>(nf.coefP.data(), nf.coefP.size()) =
                vals.segment(pos, nf.coefP.size());
            pos += nf.coefP.size();
        }
    };
    auto degree_signature = [&](const std::vector<NodeField>& f) {
        std::vector<int> sig;
        sig.reserve(f.size());
        for (const auto& nf : f) sig.push_back(nf.degree_used);
        return sig;
    };
    const std::size_t anderson_depth = 8;
    std::vector<Vec> hist_dR, hist_dG;
    Vec prev_r, prev_g;
    std::vector<int> prev_sig;
    bool have_prev_res = false;

    double sweep_gap = std::numeric_limits<double>::infinity();
    int sweep = 0;
    for (; sweep < config.sweep_max; ++sweep) {
        const bool have_input = field_ready;
        const Vec x_in = have_input ? flatten(field) : Vec();
        const std::vector<int> in_sig = have_input ? degree_signature(field) : std::vector<int>();
        // ---- forward pass -------------------------------------------------
        X[0] = x0;
        for (std::size_t k = 0; k < K; ++k) {
            const double s = grid.node(k);
            const bool has_field = field_ready && field[k].coefP.size() > 0;
            const PolyBasis pb(n, has_field ? field[k].degree_used : 0);
            for (std::size_t i = 0; i < N; ++i) {
                Vec p = Vec::Zero(n);
                if (has_field) p = field[k].coefP.transpose() * pb.eval(X[k][i]);
                const Vec vi = control(s, X[k][i], ctx[k], p);
                X[k + 1][i] = X[k][i] + dt * model.b(s, X[k][i], ctx[k], vi) +
                              model.sigma(s, X[k][i], ctx[k]) * paths->increment(i, k, dt);
                if (!is_finite(X[k + 1][i]))
                    throw solver_error("solve_control_frozen: non-finite state");
            }
        }

        // ---- backward pass ------------------------------------------------
        for (std::size_t k = 0; k <= K; ++k) reg[k] = NodeRegression(X[k], config.basis_degree);

        // terminal node
        {
            Mat T(static_cast<Eigen::Index>(N), n);
            for (std::size_t i = 0; i < N; ++i)
                T.row(static_cast<Eigen::Index>(i)) = model.Dxg(X[K][i], ctx[K]).transpose();
            Mat coef = reg[K].fit(T);
            field[K].degree_used = reg[K].degree_used();
            field[K].coefP = coef;
            field[K].coefQ = Mat::Zero(static_cast<Eigen::Index>(reg[K].basis().size()),
                                       static_cast<Eigen::Index>(n) * n);
            Mat fit = reg[K].predict(coef);
            for (std::size_t i = 0; i < N; ++i)
                Pfit[K][i] = fit.row(static_cast<Eigen::Index>(i)).transpose();
        }

        for (std::size_t k = K; k-- > 0;) {
            const double s = grid.node(k);
            const auto Ni = static_cast<Eigen::Index>(N);
            // conditional expectation of P(k+1) given X(k)
            Mat Ynext(Ni, n);
            for (std::size_t i = 0; i < N; ++i)
                Ynext.row(static_cast<Eigen::Index>(i)) = Pfit[k + 1][i].transpose();
            const Mat e_coef = reg[k].fit(Ynext);
            const Mat Ehat = reg[k].predict(e_coef);

            // martingale integrand: Q(k) = E[P(k+1) dB' | X(k)] / dt
            Mat Yq(Ni, static_cast<Eigen::Index>(n) * n);
            for (std::size_t i = 0; i < N; ++i) {
                const Vec dB = paths->increment(i, k, dt);
                const Mat Qi = Pfit[k + 1][i] * dB.transpose() / dt;
                for (int a = 0; a < n; ++a)
                    for (int bcol = 0; bcol < n; ++bcol)
                        Yq(static_cast<Eigen::Index>(i), a + n * bcol) = Qi(a, bcol);
            }
            const Mat q_coef = reg[k].fit(Yq);
            const Mat Qhat = reg[k].predict(q_coef);

            const auto s1 = model.sigma1 ? model.sigma1(s) : std::vector<Mat>();
            Mat targets(Ni, n);
            for (std::size_t i = 0; i < N; ++i) {
                Mat Qi(n, n);
                for (int a = 0; a < n; ++a)
                    for (int bcol = 0; bcol < n; ++bcol)
                        Qi(a, bcol) = Qhat(static_cast<Eigen::Index>(i), a + n * bcol);
                Vec s1term = Vec::Zero(n);
                for (int j = 0; j < n; ++j)
                    if (!s1.empty() && s1[static_cast<std::size_t>(j)].size() > 0)
                        s1term += s1[static_cast<std::size_t>(j)].transpose() * Qi.col(j);
                const Vec Ei = Ehat.row(static_cast<Eigen::Index>(i)).transpose();
                targets.row(static_cast<Eigen::Index>(i)) =
                    detail::implicit_p(model, control, s, X[k][i], ctx[k], Ei, s1term, dt)
                        .transpose();
            }
            Mat coef = reg[k].fit(targets);
            field[k].degree_used = reg[k].degree_used();
            field[k].coefP = coef;
            field[k].coefQ = q_coef;
            const Mat fit = reg[k].predict(coef);
            for (std::size_t i = 0; i < N; ++i)
                Pfit[k][i] = fit.row(static_cast<Eigen::Index>(i)).transpose();
        }
        field_ready = true;

        // ---- Anderson mixing of the coefficient update --------------------
        const std::vector<int> out_sig = degree_signature(field);
        const Vec g = flatten(field);
        if (!have_input || in_sig != out_sig || x_in.size() != g.size()) {
            // no comparable input iterate: take the plain update, reset history
            hist_dR.clear();
            hist_dG.clear();
            have_prev_res = false;
        } else {
            const Vec r = g - x_in;
            if (have_prev_res) {
                hist_dR.push_back(r - prev_r);
                hist_dG.push_back(g - prev_g);
                if (hist_dR.size() > anderson_depth) {
                    hist_dR.erase(hist_dR.begin());
                    hist_dG.erase(hist_dG.begin());
                }
            }
            prev_r = r;
            prev_g = g;
            have_prev_res = true;
            if (!hist_dR.empty()) {
                const auto m = static_cast<Eigen::Index>(hist_dR.size());
                Mat R(g.size(), m), G(g.size(), m);
                for (Eigen::Index c = 0; c < m; ++c) {
                    R.col(c) = hist_dR[static_cast<std::size_t>(c)];
                    G.col(c) = hist_dG[static_cast<std::size_t>(c)];
                }
                const Vec gamma = R.colPivHouseholderQr().solve(r);
                Vec mixed = g - G * gamma;
                // guard against wild extrapolation from an ill-conditioned fit
                if (is_finite(mixed) && (mixed - g).norm() <= 1e3 * (1.0 + g.norm())) {
                    unflatten(mixed, field);
                    for (std::size_t k = 0; k <= K; ++k) {
                        const Mat fit = reg[k].predict(field[k].coefP);
                        for (std::size_t i = 0; i < N; ++i)
                            Pfit[k][i] = fit.row(static_cast<Eigen::Index>(i)).transpose();
                    }
                }
            } else if (config.damping < 1.0) {
                Vec mixed = x_in + config.damping * r;
                unflatten(mixed, field);
                for (std::size_t k = 0; k <= K; ++k) {
                    const Mat fit = reg[k].predict(field[k].coefP);
                    for (std::size_t i = 0; i < N; ++i)
                        Pfit[k][i] = fit.row(static_cast<Eigen::Index>(i)).transpose();
                }
            }
        }

        // ---- convergence of the decoupling-field fixed point --------------
        if (!X_prev.empty()) {
            double gap = 0.0;
            for (std::size_t k = 0; k <= K; ++k)
                for (std::size_t i = 0; i < N; ++i) {
                    gap = std::max(gap, (X[k][i] - X_prev[k][i]).cwiseAbs().maxCoeff());
                    gap = std::max(gap, (Pfit[k][i] - Pfit_prev[k][i]).cwiseAbs().maxCoeff());
                }
            sweep_gap = gap;
            if (gap <= config.sweep_tol) break;
        }
        X_prev = X;
        Pfit_prev = Pfit;
    }
    if (sweep == config.sweep_max) {
        std::ostringstream os;
        os << "solve_control_frozen: decoupling sweeps did not converge (gap " << sweep_gap
           << ")";
        throw solver_error(os.str());
    }
    sol.diagnostics.sweeps = sweep + 1;
    sol.diagnostics.sweep_gap = sweep_gap;

    // ---- final consistent storage -----------------------------------------
    // One more forward pass with the converged field, then evaluate the stored
    // fields at the final states so that (X, P, Q, v) are mutually consistent.
    X[0] = x0;
    for (std::size_t k = 0; k <= K; ++k) {
        const double s = grid.node(k);
        const PolyBasis basis(n, field[k].degree_used);
        for (std::size_t i = 0; i < N; ++i) {
            const Vec bx = basis.eval(X[k][i]);
            sol.P[k][i] = field[k].coefP.transpose() * bx;
            Mat Qi(n, n);
            const Vec qrow = field[k].coefQ.transpose() * bx;
            for (int a = 0; a < n; ++a)
                for (int bcol = 0; bcol < n; ++bcol) Qi(a, bcol) = qrow(a + n * bcol);
            sol.Q[k][i] = Qi;
            sol.v[k][i] = control(s, X[k][i], ctx[k], sol.P[k][i]);
            if (k < K) {
                X[k + 1][i] = X[k][i] + dt * model.b(s, X[k][i], ctx[k], sol.v[k][i]) +
                              model.sigma(s, X[k][i], ctx[k]) * paths->increment(i, k, dt);
            }
        }
    }
    sol.fields = field;

    // ---- diagnostics -------------------------------------------------------
    double res = 0.0, term = 0.0;
    for (std::size_t k = 0; k <= K; ++k) {
        const double s = grid.node(k);
        for (std::size_t i = 0; i < N; ++i) {
            const Vec r = model.Dvb(s, X[k][i], ctx[k], sol.v[k][i]).transpose() * sol.P[k][i] +
                          model.Dvf(s, X[k][i], ctx[k], sol.v[k][i]);
            res = std::max(res, r.norm());
        }
    }
    for (std::size_t i = 0; i < N; ++i)
        term = std::max(term, (sol.P[K][i] - model.Dxg(X[K][i], ctx[K])).norm());
    sol.diagnostics.max_first_order_residual = res;
    sol.diagnostics.max_terminal_residual = term;

    auto [cone_pass, coneK] = check_cone_condition(model.consts);
    sol.diagnostics.cone_K = coneK;
    if (!std::isnan(coneK)) {
        int viol = 0;
        for (std::size_t k = 0; k <= K; ++k) {
            const double w2 = ctx[k].w2;
            for (std::size_t i = 0; i < N; ++i)
                if (sol.P[k][i].norm() >
                    coneK * (1.0 + X[k][i].norm() + w2) + config.cone_tol)
                    ++viol;
        }
        sol.diagnostics.cone_violations = viol;
    }
    return sol;
}

// MFG solve: outer Picard iteration on the measure flow m(s) = law(X(s)).
inline FBSDESolution solve_mfg(const CoefficientModel& model, const TimeGrid& grid,
                               const EmpiricalMeasure& mu0, const SolverConfig& config) {
    config.validate();
    const std::size_t K = grid.K;
    const int n = model.n;
    if (mu0.dim() != n) throw invalid_argument("solve_mfg: initial cloud dimension mismatch");

    // initial particles: the cloud itself if it matches N, else bootstrap
    std::vector<Vec> x0;
    if (mu0.size() == config.N) {
        x0 = mu0.particles();
    } else {
        std::seed_seq seq{config.seed, static_cast<std::uint64_t>(0xB00757AAull)};
        std::mt19937_64 rng(seq);
        std::uniform_int_distribution<std::size_t> pick(0, mu0.size() - 1);
        x0.reserve(config.N);
        for (std::size_t i = 0; i < config.N; ++i) x0.push_back(mu0.particle(pick(rng)));
    }
    const std::size_t N = x0.size();
    auto paths = std::make_shared<BrownianPaths>(N, K, n, config.seed);

    const bool sPass = [&] {
        auto rep = check_property_S(model.consts);
        for (const auto& row : rep.property_S)
            if (!row.pass) return false;
        return true;
    }();

    // warm-start flow: simulate with p = 0 (uncontrolled-feedback state)
    std::vector<EmpiricalMeasure> flow;
    {
        std::vector<std::vector<Vec>> Xw(K + 1, x0);
        EmpiricalMeasure m0(x0);
        for (std::size_t k = 0; k < K; ++k) {
            const double s = grid.node(k);
            EmpiricalMeasure mk(Xw[k]);
            MeasureCtx c(mk);
            const detail::ControlOp control(model, config.newton_tol);
            for (std::size_t i = 0; i < N; ++i) {
                const Vec vi = control(s, Xw[k][i], c, Vec::Zero(n));
                Xw[k + 1][i] = Xw[k][i] + grid.dt * model.b(s, Xw[k][i], c, vi) +
                               model.sigma(s, Xw[k][i], c) * paths->increment(i, k, grid.dt);
            }
        }
        for (std::size_t k = 0; k <= K; ++k) flow.emplace_back(Xw[k]);
    }

    FBSDESolution sol;
    std::vector<NodeField> warm;
    std::vector<double> gap_history;
    bool converged = false;
    int iter = 0;
    for (; iter < config.picard_max; ++iter) {
        sol = solve_control_frozen(model, grid, x0, flow, paths, config,
                                   warm.empty() ? nullptr : &warm);
        warm = sol.fields;
        if (!model.mean_field) {
            // coefficients never read the measure: the fixed point is immediate
            std::vector<EmpiricalMeasure> nf;
            for (std::size_t k = 0; k <= K; ++k) nf.emplace_back(sol.X[k]);
            sol.measure_flow = nf;
            gap_history.push_back(0.0);
            converged = true;
            ++iter;
            break;
        }
        double gap = 0.0;
        std::vector<EmpiricalMeasure> nf;
        for (std::size_t k = 0; k <= K; ++k) {
            nf.emplace_back(sol.X[k]);
            gap = std::max(gap, w2_empirical(nf.back(), flow[k]).value);
        }
        gap_history.push_back(gap);
        flow = std::move(nf);
        if (gap <= config.picard_tol) {
            converged = true;
            ++iter;
            break;
        }
    }
    if (!converged) {
        std::ostringstream os;
        os << "solve_mfg: Picard iteration did not reach tol " << config.picard_tol << " after "
           << iter << " iterations (last gap "
           << (gap_history.empty() ? -1.0 : gap_history.back()) << ")";
        throw solver_error(os.str());
    }
    // store the final measure flow = law of the final trajectories
    std::vector<EmpiricalMeasure> nf;
    for (std::size_t k = 0; k <= K; ++k) nf.emplace_back(sol.X[k]);
    sol.measure_flow = std::move(nf);
    sol.diagnostics.picard_iterations = iter;
    sol.diagnostics.fixed_point_gap = gap_history.empty() ? 0.0 : gap_history.back();
    sol.diagnostics.gap_history = gap_history;
    sol.diagnostics.property_S_pass = sPass;
    return sol;
}

// Cost functional along a solved trajectory bundle: trapezoidal running cost
// plus terminal cost, averaged over particles with a deterministic reduction.
inline double cost_of(const CoefficientModel& model, const FBSDESolution& sol) {
    const std::size_t K = sol.grid.K, N = sol.X[0].size();
    std::vector<MeasureCtx> ctx;
    ctx.reserve(K + 1);
    for (std::size_t k = 0; k <= K; ++k) ctx.emplace_back(sol.measure_flow[k]);
    return pairwise_sum_indexed(N, [&](std::size_t i) {
               double acc = 0.0;
               for (std::size_t k = 0; k <= K; ++k) {
                   const double w = (k == 0 || k == K) ? 0.5 : 1.0;
                   acc += w * sol.grid.dt *
                          model.f(sol.grid.node(k), sol.X[k][i], ctx[k], sol.v[k][i]);
               }
               return acc + model.g(sol.X[K][i], ctx[K]);
           }) /
           static_cast<double>(N);
}

struct ValueResult {
    double V = 0.0;
    FBSDESolution equilibrium;  // MFG solve for the measure flow
    FBSDESolution companion;    // frozen-control solve started at x
};

// V(t, x, mu): companion particles started at x with independent noise, solved
// against the converged equilibrium flow.
inline ValueResult value_detail(const CoefficientModel& model, const TimeGrid& grid, const Vec& x,
                                const EmpiricalMeasure& mu0, const SolverConfig& config) {
    ValueResult out;
    out.equilibrium = solve_mfg(model, grid, mu0, config);
    SolverConfig cc = config;
    auto cpaths = std::make_shared<BrownianPaths>(config.N, grid.K, model.n,
                                                  config.seed ^ 0x517CC1B727220A95ull);
    std::vector<Vec> x0(config.N, x);
    out.companion = solve_control_frozen(model, grid, x0, out.equilibrium.measure_flow, cpaths, cc);
    out.V = cost_of(model, out.companion);
    return out;
}

inline double value(const CoefficientModel& model, const TimeGrid& grid, const Vec& x,
                    const EmpiricalMeasure& mu0, const SolverConfig& config) {
    return value_detail(model, grid, x, mu0, config).V;
}

struct StabilityProbe {
    std::vector<double> eps;          // perturbation sizes
    std::vector<double> diff_ratios;  // sup-node rms difference / (eps * rms(eta))
    std::vector<double> xi_scales;    // initial-cloud scalings probed
    std::vector<double> growth_ratios;  // sup-node (rms X + rms P) / (1 + rms xi)
};

inline StabilityProbe growth_and_stability_probe(const CoefficientModel& model,
                                                 const TimeGrid& grid,
                                                 const SolverConfig& config) {
    StabilityProbe probe;
    std::seed_seq seq{config.seed, static_cast<std::uint64_t>(0x6A09E667ull)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> nd;
    std::vector<Vec> xi(config.N), eta(config.N);
    for (std::size_t i = 0; i < config.N; ++i) {
        Vec a(model.n), b(model.n);
        for (int c = 0; c < model.n; ++c) {
            a(c) = nd(rng);
            b(c) = nd(rng);
        }
        xi[i] = a;
        eta[i] = b;
    }
    auto rms = [&](const std::vector<Vec>& vs) {
        return std::sqrt(pairwise_sum_indexed(vs.size(),
                                              [&](std::size_t i) { return vs[i].squaredNorm(); }) /
                         static_cast<double>(vs.size()));
    };
    auto solve_from = [&](const std::vector<Vec>& pts) {
        return solve_mfg(model, grid, EmpiricalMeasure(pts), config);
    };
    auto sup_diff = [&](const FBSDESolution& a, const FBSDESolution& b) {
        double m = 0.0;
        for (std::size_t k = 0; k <= grid.K; ++k) {
            double accX = 0.0, accP = 0.0;
            for (std::size_t i = 0; i < a.X[k].size(); ++i) {
                accX += (a.X[k][i] - b.X[k][i]).squaredNorm();
                accP += (a.P[k][i] - b.P[k][i]).squaredNorm();
            }
            m = std::max(m, std::sqrt((accX + accP) / static_cast<double>(a.X[k].size())));
        }
        return m;
    };
    const auto base = solve_from(xi);
    const double eta_rms = rms(eta);
    for (double e : {0.1, 0.01, 0.001}) {
        std::vector<Vec> xp = xi;
        for (std::size_t i = 0; i < xp.size(); ++i) xp[i] += e * eta[i];
        const auto pert = solve_from(xp);
        probe.eps.push_back(e);
        probe.diff_ratios.push_back(sup_diff(pert, base) / (e * eta_rms));
    }
    for (double scale : {0.0, 1.0, 10.0}) {
        std::vector<Vec> xs = xi;
        for (auto& p : xs) p *= scale;
        const auto s = solve_from(xs);
        double m = 0.0;
        for (std::size_t k = 0; k <= grid.K; ++k) m = std::max(m, rms(s.X[k]) + rms(s.P[k]));
        probe.xi_scales.push_back(scale);
        probe.growth_ratios.push_back(m / (1.0 + scale * rms(xi)));
    }
    return probe;
}

}  // namespace mfg
