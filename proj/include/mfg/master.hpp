#pragma once

// Value functional derivatives and the master-equation residual. The spatial
// derivatives are read off the frozen companion bundle (D_xV = P(t),
// D_x^2V = D_xP(t)); the measure derivatives are time-quadratures of the
// kernel flows against the cost gradients; the temporal derivative is
// assembled from the master-equation identity, with an independent finite-difference
// estimate (re-solving from a shifted start time on common noise) used for the
// reported residual.

#include <mfg/conditions.hpp>
#include <mfg/fbsde.hpp>
#include <mfg/flows.hpp>
#include <mfg/hamiltonian.hpp>

#include <cmath>
#include <utility>
#include <vector>

namespace mfg {

struct ValueDerivatives {
    double V = 0.0;
    Vec dxV;
    Mat dxxV;
    std::vector<Vec> y_grid;
    std::vector<Vec> lfd_grad;  // D_y dV/dnu at each y-grid point
    std::vector<Mat> lfd_hess;  // D_y^2 dV/dnu at each y-grid point (may be empty)
    double dtV = 0.0;
};

// D_xV and D_x^2V: the initial-node companion adjoint and its state Jacobian,
// averaged over the companion particles (they share the start point x, so the
// average only smooths the fitted values).
inline std::pair<Vec, Mat> dx_value(LinearizationData& lin_x) {
    const FBSDESolution& comp = *lin_x.base;
    const std::size_t N = lin_x.particles();
    const int n = lin_x.model->n;
    Vec dxV = Vec::Zero(n);
    for (const auto& p : comp.P[0]) dxV += p;
    dxV /= static_cast<double>(N);
    const FlowResult jac = jacobian_x(lin_x);
    Mat dxxV = Mat::Zero(n, n);
    for (const auto& m : jac.dP[0]) dxxV += m;
    dxxV /= static_cast<double>(N);
    return {std::move(dxV), std::move(dxxV)};
}

// D_y dV/dnu (t, x, mu)(y): time quadrature (trapezoid) of the cost gradients
// against the kernel flows -- the frozen-bundle flow for the local terms, and
// the companion / equilibrium populations for the independent-copy kernel
// terms -- plus the terminal-cost block.
inline Vec lfd_value_at(const LinearizationData& lin_x, const KernelFlowBundle& kf) {
    const CoefficientModel& model = *lin_x.model;
    const FBSDESolution& comp = *lin_x.base;  // companion started at x
    if (!kf.d) throw invalid_argument("lfd_value_at: kernel flow lacks the frozen bundle");
    if (!kf.companion) throw invalid_argument("lfd_value_at: kernel flow lacks its companion");
    const std::size_t K = lin_x.steps(), N = lin_x.particles();
    const int n = model.n;
    const double dt = comp.grid.dt;
    const auto& Xy = kf.companion->X;  // population started at y
    const std::size_t Ndd = kf.dd.dX[0].size();
    const auto sub_y = detail::copy_subset(Xy[0].size(), comp.config.stride);
    const auto sub_e = detail::copy_subset(Ndd, comp.config.stride);
    const double inv_y = 1.0 / static_cast<double>(sub_y.size());
    const double inv_e = 1.0 / static_cast<double>(sub_e.size());
    // equilibrium positions: the dd flow lives on the base cloud of the
    // equilibrium bundle, whose measure flow the companion was frozen against
    const auto& Xe_flow = comp.measure_flow;

    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(n);
    for (std::size_t k = 0; k <= K; ++k) {
        const double s = comp.grid.node(k);
        const MeasureCtx& ctx = lin_x.ctx[k];
        const double w = (k == 0 || k == K) ? 0.5 : 1.0;
        Eigen::RowVectorXd node = Eigen::RowVectorXd::Zero(n);
        for (std::size_t i = 0; i < N; ++i) {
            const Vec& x = comp.X[k][i];
            const Vec& v = comp.v[k][i];
            node += model.Dxf(s, x, ctx, v).transpose() * kf.d->dX[k][i];
            node += model.Dvf(s, x, ctx, v).transpose() * kf.d->dv[k][i];
            if (model.lfd_f_y) {
                for (std::size_t c = 0; c < sub_y.size(); ++c)
                    node += inv_y * model.lfd_f_y(s, x, ctx, v, Xy[k][sub_y[c]]).transpose() *
                            kf.jac.dX[k][sub_y[c]];
                for (std::size_t c = 0; c < sub_e.size(); ++c)
                    node += inv_e *
                            model.lfd_f_y(s, x, ctx, v, Xe_flow[k].particle(sub_e[c])).transpose() *
                            kf.dd.dX[k][sub_e[c]];
            }
        }
        acc += w * dt * node / static_cast<double>(N);
    }
    Eigen::RowVectorXd term = Eigen::RowVectorXd::Zero(n);
    const MeasureCtx& ctxT = lin_x.ctx[K];
    for (std::size_t i = 0; i < N; ++i) {
        const Vec& x = comp.X[K][i];
        term += model.Dxg(x, ctxT).transpose() * kf.d->dX[K][i];
        if (model.lfd_g_y) {
            for (std::size_t c = 0; c < sub_y.size(); ++c)
                term += inv_y * model.lfd_g_y(x, ctxT, Xy[K][sub_y[c]]).transpose() *
                        kf.jac.dX[K][sub_y[c]];
            for (std::size_t c = 0; c < sub_e.size(); ++c)
                term += inv_e * model.lfd_g_y(x, ctxT, Xe_flow[K].particle(sub_e[c])).transpose() *
                        kf.dd.dX[K][sub_e[c]];
        }
    }
    acc += term / static_cast<double>(N);
    return acc.transpose();
}

namespace detail {
// row of n^2 pair-layout entries (b + n*c) -> n x n matrix
inline Mat unpair(const Eigen::RowVectorXd& row, int n) {
    Mat out(n, n);
    for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c) out(b, c) = row(b + n * c);
    return out;
}
}  // namespace detail

// D_y^2 dV/dnu (t, x, mu)(y): the same quadrature against the y-derivative
// flows, the companion's second-order state flow, and the second measure
// kernels of the costs contracted bilinearly with the companion Jacobian.
inline Mat lfd2_value_at(const LinearizationData& lin_x, const KernelFlowYDeriv& yd) {
    const CoefficientModel& model = *lin_x.model;
    const FBSDESolution& comp = *lin_x.base;
    if (!yd.d) throw invalid_argument("lfd2_value_at: y-derivative lacks the frozen bundle");
    if (!yd.companion) throw invalid_argument("lfd2_value_at: y-derivative lacks its companion");
    const std::size_t K = lin_x.steps(), N = lin_x.particles();
    const int n = model.n;
    const int r = n * n;
    const double dt = comp.grid.dt;
    const auto& Xy = yd.companion->X;
    const std::size_t Ndd = yd.dd.dX[0].size();
    const auto sub_y = detail::copy_subset(Xy[0].size(), comp.config.stride);
    const auto sub_e = detail::copy_subset(Ndd, comp.config.stride);
    const double inv_y = 1.0 / static_cast<double>(sub_y.size());
    const double inv_e = 1.0 / static_cast<double>(sub_e.size());
    const auto& Xe_flow = comp.measure_flow;

    const auto pack = [&](const Mat& m) {
        Eigen::RowVectorXd row(r);
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c) row(b + n * c) = m(b, c);
        return row;
    };

    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(r);
    for (std::size_t k = 0; k <= K; ++k) {
        const double s = comp.grid.node(k);
        const MeasureCtx& ctx = lin_x.ctx[k];
        const double w = (k == 0 || k == K) ? 0.5 : 1.0;
        Eigen::RowVectorXd node = Eigen::RowVectorXd::Zero(r);
        for (std::size_t i = 0; i < N; ++i) {
            const Vec& x = comp.X[k][i];
            const Vec& v = comp.v[k][i];
            node += model.Dxf(s, x, ctx, v).transpose() * yd.d->dX[k][i];
            node += model.Dvf(s, x, ctx, v).transpose() * yd.d->dv[k][i];
            if (model.lfd_f_y) {
                for (std::size_t c = 0; c < sub_y.size(); ++c)
                    node += inv_y * model.lfd_f_y(s, x, ctx, v, Xy[k][sub_y[c]]).transpose() *
                            yd.hess.dX[k][sub_y[c]];
                for (std::size_t c = 0; c < sub_e.size(); ++c)
                    node += inv_e *
                            model.lfd_f_y(s, x, ctx, v, Xe_flow[k].particle(sub_e[c])).transpose() *
                            yd.dd.dX[k][sub_e[c]];
            }
            if (model.lfd2_f_y) {
                for (std::size_t c = 0; c < sub_y.size(); ++c) {
                    const Mat& W = yd.jac.dX[k][sub_y[c]];
                    node += inv_y * pack(W.transpose() *
                                         model.lfd2_f_y(s, x, ctx, v, Xy[k][sub_y[c]]) * W);
                }
            }
        }
        acc += w * dt * node / static_cast<double>(N);
    }
    Eigen::RowVectorXd term = Eigen::RowVectorXd::Zero(r);
    const MeasureCtx& ctxT = lin_x.ctx[K];
    for (std::size_t i = 0; i < N; ++i) {
        const Vec& x = comp.X[K][i];
        term += model.Dxg(x, ctxT).transpose() * yd.d->dX[K][i];
        if (model.lfd_g_y) {
            for (std::size_t c = 0; c < sub_y.size(); ++c)
                term += inv_y * model.lfd_g_y(x, ctxT, Xy[K][sub_y[c]]).transpose() *
                        yd.hess.dX[K][sub_y[c]];
            for (std::size_t c = 0; c < sub_e.size(); ++c)
                term += inv_e * model.lfd_g_y(x, ctxT, Xe_flow[K].particle(sub_e[c])).transpose() *
                        yd.dd.dX[K][sub_e[c]];
        }
        if (model.lfd2_g_y) {
            for (std::size_t c = 0; c < sub_y.size(); ++c) {
                const Mat& W = yd.jac.dX[K][sub_y[c]];
                term += inv_y * pack(W.transpose() * model.lfd2_g_y(x, ctxT, Xy[K][sub_y[c]]) * W);
            }
        }
    }
    acc += term / static_cast<double>(N);
    return detail::unpair(acc, n);
}

// Right-hand side of the master equation at (t, x, mu):
//   1/2 Tr[sigma sigma' D_x^2V] + H(t, x, mu, D_xV)
//   + int { D_pH(t, y, mu, D_xV(t, y, mu))' lfd_grad(y)
//           + 1/2 Tr[sigma sigma'(t, y, mu) lfd_hess(y)] } dmu(y),
// with the cloud itself as quadrature: D_xV(t, y_j, mu) is the equilibrium
// adjoint at particle j and D_pH its stored optimal drift, while lfd_grad /
// lfd_hess are taken at each particle's stratum representative.
inline double master_rhs(const CoefficientModel& model, const FBSDESolution& eq, const Vec& x,
                         const Vec& dxV, const Mat& dxxV,
                         const std::vector<QuantileStratum>& strata,
                         const std::vector<Vec>& lfd_grad, const std::vector<Mat>& lfd_hess) {
    if (strata.size() != lfd_grad.size())
        throw invalid_argument("master_rhs: one gradient per stratum");
    if (!lfd_hess.empty() && lfd_hess.size() != strata.size())
        throw invalid_argument("master_rhs: one hessian per stratum when present");
    const double t = eq.grid.t;
    const MeasureCtx ctx0(eq.measure_flow[0]);
    const Mat sg = model.sigma(t, x, ctx0);
    double rhs = 0.5 * (sg * sg.transpose() * dxxV).trace();
    const auto mr = minimize_lagrangian(model, t, x, ctx0, dxV);
    rhs += lagrangian(model, t, x, ctx0, mr.v_hat, dxV);
    const double invN = 1.0 / static_cast<double>(eq.X[0].size());
    for (std::size_t q = 0; q < strata.size(); ++q) {
        for (std::size_t j : strata[q].members) {
            const Vec& yj = eq.X[0][j];
            // D_pH(t, y_j, mu, P_j) = b(t, y_j, mu, v_j): the equilibrium
            // control is the Hamiltonian minimizer at its own adjoint
            double term = model.b(t, yj, ctx0, eq.v[0][j]).dot(lfd_grad[q]);
            if (!lfd_hess.empty()) {
                const Mat sgy = model.sigma(t, yj, ctx0);
                term += 0.5 * (sgy * sgy.transpose() * lfd_hess[q]).trace();
            }
            rhs += invN * term;
        }
    }
    return rhs;
}

// Temporal derivative from the master-equation identity.
inline double dt_value(const CoefficientModel& model, const FBSDESolution& eq, const Vec& x,
                       const Vec& dxV, const Mat& dxxV, const std::vector<QuantileStratum>& strata,
                       const std::vector<Vec>& lfd_grad, const std::vector<Mat>& lfd_hess) {
    return -master_rhs(model, eq, x, dxV, dxxV, strata, lfd_grad, lfd_hess);
}

struct MasterOptions {
    std::size_t y_count = 32;      // kernel-flow y-grid size (quantile strata)
    double delta_t = 0.025;        // start-time shift of the finite-difference estimate
    bool with_second_order = true; // include lfd_hess (needs the higher-order callbacks)
};

struct MasterReport {
    ValueDerivatives vd;             // dtV assembled from the identity
    double dtV_fd = 0.0;             // independent FD-in-t estimate
    double residual_identity = 0.0;  // tautologically ~0 (sanity)
    double residual_fd = 0.0;        // the reported residual
    double terminal_gap = 0.0;       // |V(T, x, mu) - g(x, mu)|
    double growth_margin = std::numeric_limits<double>::quiet_NaN();  // K(1+|x|+W2) - |dxV|
};

// Full pipeline: equilibrium + companion solves, spatial derivatives, kernel
// flows on a quantile y-grid, measure derivatives, temporal derivative, and
// the residual in both modes.
inline MasterReport master_residual(const CoefficientModel& model, const TimeGrid& grid,
                                    const Vec& x, const EmpiricalMeasure& mu0,
                                    const SolverConfig& config,
                                    const MasterOptions& opts = MasterOptions{}) {
    MasterReport rep;
    double rhs = 0.0;
    // the flow phase works on multi-gigabyte per-particle state at benchmark
    // scale, so everything it touches is scoped to die before the
    // finite-difference re-solves below allocate their own bundles
    {
        ValueResult vr = value_detail(model, grid, x, mu0, config);
        rep.vd.V = vr.V;
        const auto strata = quantile_strata(vr.equilibrium.X[0], opts.y_count);

        // node-0 slice of the equilibrium: all master_rhs reads; on
        // measure-free models the rest of the equilibrium bundle is released
        // before the companion linearization peaks
        FBSDESolution eq0;
        eq0.grid = vr.equilibrium.grid;
        eq0.X.push_back(vr.equilibrium.X[0]);
        eq0.v.push_back(vr.equilibrium.v[0]);
        eq0.measure_flow.push_back(vr.equilibrium.measure_flow[0]);
        if (!model.mean_field) {
            vr.equilibrium = FBSDESolution{};
            // the martingale integrand is not read past the solve
            vr.companion.Q.clear();
        }

        {
            LinearizationData lin_x = build_linearization(model, vr.companion);
            std::tie(rep.vd.dxV, rep.vd.dxxV) = dx_value(lin_x);
            if (model.mean_field) {
                const bool second = opts.with_second_order;
                LinearizationData lin_xi = build_linearization(model, vr.equilibrium);
                for (const auto& st : strata) {
                    rep.vd.y_grid.push_back(st.y);
                    const auto kf = kernel_flow(model, lin_xi, st.y, &lin_x);
                    rep.vd.lfd_grad.push_back(lfd_value_at(lin_x, kf));
                    if (second) {
                        const auto yd = kernel_flow_yderiv(model, lin_xi, st.y, &lin_x);
                        rep.vd.lfd_hess.push_back(lfd2_value_at(lin_x, yd));
                    }
                }
            } else {
                for (const auto& st : strata) {
                    rep.vd.y_grid.push_back(st.y);
                    rep.vd.lfd_grad.push_back(Vec::Zero(model.n));
                    if (opts.with_second_order)
                        rep.vd.lfd_hess.push_back(Mat::Zero(model.n, model.n));
                }
            }
        }

        rhs = master_rhs(model, eq0, x, rep.vd.dxV, rep.vd.dxxV, strata, rep.vd.lfd_grad,
                         rep.vd.lfd_hess);
    }
    rep.vd.dtV = -rhs;
    rep.residual_identity = rep.vd.dtV + rhs;

    // independent temporal derivative: re-solve from t + delta on the same
    // initial cloud and seeds. The shifted grid keeps the step count K, so
    // each per-particle normal draw stays attached to the same step index and
    // the estimate is a smooth function of the start time under common random
    // numbers; its Monte Carlo error then enters the quotient as a bounded
    // t-derivative instead of being amplified by 1/delta.
    const double delta = opts.delta_t;
    const double horizon = grid.T - grid.t - delta;
    if (!(horizon > 0.0)) throw invalid_argument("master_residual: delta_t exceeds the horizon");
    const TimeGrid grid2(grid.t + delta, grid.T, grid.K);
    rep.dtV_fd = (value(model, grid2, x, mu0, config) - rep.vd.V) / delta;
    rep.residual_fd = rep.dtV_fd + rhs;

    // terminal condition: value over a vanishing horizon against the terminal cost
    const TimeGrid gridT(grid.T - 1e-6, grid.T, 1);
    rep.terminal_gap =
        std::abs(value(model, gridT, x, mu0, config) - model.g(x, MeasureCtx(mu0)));

    const auto [cone_ok, coneK] = check_cone_condition(model.consts);
    if (cone_ok)
        rep.growth_margin =
            coneK * (1.0 + x.norm() + w2_to_dirac(mu0)) - rep.vd.dxV.norm();
    return rep;
}

}  // namespace mfg
