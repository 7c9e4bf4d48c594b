#pragma once

// Linear Jacobian/kernel flow systems solved along a converged base solution.
//
// Every first-order flow here is the exact directional derivative of the
// discrete solver: the forward Euler pass, the per-node least-squares fits and
// the implicit backward step are each differentiated in closed form (see
// NodeRegression::dfit), so discrete identities between flows — linearity,
// the state/measure decomposition, the frozen-control consistency — hold to
// solver tolerance rather than discretization order. Measure-coupling terms
// (independent-copy expectations against the displaced cloud) appear either
// self-consistently (the flow's own state displacement drives them) or as
// fixed precomputed sources, which is enough to express all the first-order
// systems: the state Jacobian, the direction flow on the equilibrium bundle,
// its zero-initial measure part, and the y-kernel flows with their lifting
// reductions.

#include <mfg/common.hpp>
#include <mfg/fbsde.hpp>
#include <mfg/measures.hpp>
#include <mfg/model.hpp>
#include <mfg/regression.hpp>

#include <algorithm>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <vector>

namespace mfg {

struct FlowResult {
    int r = 0;                           // number of directions
    std::vector<std::vector<Mat>> dX;    // [k][i]: n x r
    std::vector<std::vector<Mat>> dP;    // [k][i]: n x r
    std::vector<std::vector<Mat>> dv;    // [k][i]: d x r
    std::vector<std::vector<Mat>> dQ;    // [k][i]: n x (n*r), direction blocks
    int sweeps = 0;
    double gap = 0.0;
};

// Additive source terms for the linear systems, per node/particle. Any empty
// container contributes zero. `sig` is probe-independent (the diffusion's
// measure term does not read the particle state).
struct ExtraSources {
    int r = 0;
    std::vector<std::vector<Mat>> b;    // [k][i]: n x r, forward drift
    std::vector<std::vector<Mat>> sig;  // [k][col]: n x r, forward diffusion
    std::vector<std::vector<Mat>> H;    // [k][i]: n x r, backward drift
    std::vector<std::vector<Mat>> vf;   // [k][i]: d x r, condition (stored point)
    std::vector<std::vector<Mat>> vs;   // [k][i]: d x r, condition (target point)
    std::vector<Mat> g;                 // [i]: n x r, terminal
};

namespace detail {

// Per-node linearization point of the converged backward pass. Starred
// quantities are evaluated at the implicit targets (p*, v*) that the fits
// smoothed, plain ones at the stored fitted field values.
struct NodeLin {
    NodeRegression reg;
    std::vector<Mat> grad;  // [i]: nb x n basis gradients
    Mat e_coef, R_e;        // fit of P(k+1) and its residual (k < K)
    Mat q_coef, R_q;        // fit of the martingale integrand (k < K)
    Mat p_coef, R_p;        // fit of the implicit / terminal targets
    std::vector<Vec> p_star, v_star;
    std::vector<Mat> Dxb_f, Dvb_f, Avv_f_inv, Mv_f;      // stored-point matrices
    std::vector<Mat> Mx_s, Mv_s, Dvb_s, Avv_s_inv, Msolve_inv;  // target-point
    std::vector<Mat> sigma1;  // [col]: n x n
};

}  // namespace detail

class LinearizationData {
public:
    const CoefficientModel* model = nullptr;
    const FBSDESolution* base = nullptr;
    std::vector<MeasureCtx> ctx;
    std::vector<detail::NodeLin> node;   // K+1
    std::vector<std::size_t> subset;     // copy-index subset for E~ terms

    // self-source kernel cache, built on demand; [k][i]: n x (S*n) blocks
    bool self_built = false;
    std::vector<std::vector<Mat>> Kb, KH;
    std::vector<std::vector<Mat>> KVf, KVs;  // d x (S*n); empty when callbacks absent
    std::vector<Mat> Kg;                     // [i]: n x (S*n), terminal node
    std::vector<std::vector<Mat>> Ksig;      // [k][col]: n x (S*n)
    bool has_KV = false;

    std::size_t particles() const { return base->X[0].size(); }
    std::size_t steps() const { return base->grid.K; }
};

namespace detail {

inline std::vector<std::size_t> copy_subset(std::size_t N, std::size_t stride_cfg,
                                            std::size_t threshold = 1024) {
    std::size_t stride = stride_cfg;
    if (stride == 0) stride = N > threshold ? (N + threshold - 1) / threshold : 1;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < N; j += stride) idx.push_back(j);
    return idx;
}

inline Mat weighted_t3(const T3& t, const Vec& w) {
    Mat out = Mat::Zero(t.empty() ? 0 : t.front().rows(), t.empty() ? 0 : t.front().cols());
    for (std::size_t a = 0; a < t.size(); ++a) out += w(static_cast<Eigen::Index>(a)) * t[a];
    return out;
}

}  // namespace detail

inline LinearizationData build_linearization(const CoefficientModel& model,
                                             const FBSDESolution& base) {
    LinearizationData lin;
    lin.model = &model;
    lin.base = &base;
    const std::size_t K = base.grid.K, N = base.X[0].size();
    const int n = model.n, d = model.d;
    const double dt = base.grid.dt;
    lin.ctx.reserve(K + 1);
    for (std::size_t k = 0; k <= K; ++k) lin.ctx.emplace_back(base.measure_flow[k]);
    lin.subset = detail::copy_subset(N, base.config.stride);
    lin.node.resize(K + 1);
    const detail::ControlOp control(model, base.config.newton_tol);

    for (std::size_t k = 0; k <= K; ++k) {
        auto& nl = lin.node[k];
        nl.reg = NodeRegression(base.X[k], base.config.basis_degree);
        nl.grad.resize(N);
        for (std::size_t i = 0; i < N; ++i) nl.grad[i] = nl.reg.basis().grad(base.X[k][i]);
        nl.sigma1 = model.sigma1 ? model.sigma1(base.grid.node(k)) : std::vector<Mat>();
        if (nl.sigma1.empty()) nl.sigma1.assign(static_cast<std::size_t>(n), Mat());
    }

    // terminal node: targets are D_x g
    {
        auto& nl = lin.node[K];
        const auto Ni = static_cast<Eigen::Index>(N);
        Mat Y(Ni, n);
        nl.p_star.resize(N);
        for (std::size_t i = 0; i < N; ++i) {
            nl.p_star[i] = model.Dxg(base.X[K][i], lin.ctx[K]);
            Y.row(static_cast<Eigen::Index>(i)) = nl.p_star[i].transpose();
        }
        nl.p_coef = nl.reg.fit(Y);
        nl.R_p = Y - nl.reg.design() * nl.p_coef;
        nl.v_star = base.v[K];
    }

    // interior nodes: replay the backward pass around the stored trajectories
    for (std::size_t k = K; k-- > 0;) {
        auto& nl = lin.node[k];
        const double s = base.grid.node(k);
        const auto Ni = static_cast<Eigen::Index>(N);
        Mat Ynext(Ni, n);
        for (std::size_t i = 0; i < N; ++i)
            Ynext.row(static_cast<Eigen::Index>(i)) = base.P[k + 1][i].transpose();
        nl.e_coef = nl.reg.fit(Ynext);
        nl.R_e = Ynext - nl.reg.design() * nl.e_coef;
        const Mat Ehat = nl.reg.design() * nl.e_coef;

        Mat Yq(Ni, static_cast<Eigen::Index>(n) * n);
        for (std::size_t i = 0; i < N; ++i) {
            const Vec dB = base.paths->increment(i, k, dt);
            const Mat Qi = base.P[k + 1][i] * dB.transpose() / dt;
            for (int a = 0; a < n; ++a)
                for (int c = 0; c < n; ++c)
                    Yq(static_cast<Eigen::Index>(i), a + n * c) = Qi(a, c);
        }
        nl.q_coef = nl.reg.fit(Yq);
        nl.R_q = Yq - nl.reg.design() * nl.q_coef;
        const Mat Qhat = nl.reg.design() * nl.q_coef;

        nl.p_star.resize(N);
        nl.v_star.resize(N);
        Mat T(Ni, n);
        for (std::size_t i = 0; i < N; ++i) {
            Mat Qi(n, n);
            for (int a = 0; a < n; ++a)
                for (int c = 0; c < n; ++c) Qi(a, c) = Qhat(static_cast<Eigen::Index>(i), a + n * c);
            Vec s1term = Vec::Zero(n);
            for (int j = 0; j < n; ++j)
                if (nl.sigma1[static_cast<std::size_t>(j)].size() > 0)
                    s1term += nl.sigma1[static_cast<std::size_t>(j)].transpose() * Qi.col(j);
            const Vec Ei = Ehat.row(static_cast<Eigen::Index>(i)).transpose();
            nl.p_star[i] =
                detail::implicit_p(model, control, s, base.X[k][i], lin.ctx[k], Ei, s1term, dt);
            nl.v_star[i] = control(s, base.X[k][i], lin.ctx[k], nl.p_star[i]);
            T.row(static_cast<Eigen::Index>(i)) = nl.p_star[i].transpose();
        }
        nl.p_coef = nl.reg.fit(T);
        nl.R_p = T - nl.reg.design() * nl.p_coef;
    }

    // derivative matrices at the stored and target points
    for (std::size_t k = 0; k <= K; ++k) {
        auto& nl = lin.node[k];
        const double s = base.grid.node(k);
        nl.Dxb_f.resize(N);
        nl.Dvb_f.resize(N);
        nl.Avv_f_inv.resize(N);
        nl.Mv_f.resize(N);
        if (k < K) {
            nl.Mx_s.resize(N);
            nl.Mv_s.resize(N);
            nl.Dvb_s.resize(N);
            nl.Avv_s_inv.resize(N);
            nl.Msolve_inv.resize(N);
        }
        for (std::size_t i = 0; i < N; ++i) {
            const Vec& x = base.X[k][i];
            const auto build = [&](const Vec& v, const Vec& p, Mat& Dxb, Mat& Dvb, Mat& Avv_inv,
                                   Mat& Mv, Mat* Mx) {
                Dxb = model.Dxb(s, x, lin.ctx[k], v);
                Dvb = model.Dvb(s, x, lin.ctx[k], v);
                Mat Avv = model.Dvvf(s, x, lin.ctx[k], v);
                const T3 dvvb = model.Dvvb ? model.Dvvb(s, x, lin.ctx[k], v) : T3();
                if (!dvvb.empty()) Avv += detail::weighted_t3(dvvb, p);
                Eigen::LDLT<Mat> ldlt(Avv);
                if (ldlt.info() != Eigen::Success || !(Avv.diagonal().minCoeff() > 0.0) ||
                    ldlt.isNegative()) {
                    std::ostringstream os;
                    os << "flow linearization: singular control curvature at node " << k
                       << ", particle " << i;
                    throw solver_error(os.str());
                }
                Avv_inv = ldlt.solve(Mat::Identity(d, d));
                Mv = model.DvDxf(s, x, lin.ctx[k], v);
                const T3 dvdxb = model.DvDxb ? model.DvDxb(s, x, lin.ctx[k], v) : T3();
                if (!dvdxb.empty()) Mv += detail::weighted_t3(dvdxb, p);
                if (Mx) {
                    *Mx = model.Dxxf(s, x, lin.ctx[k], v);
                    const T3 dxxb = model.Dxxb ? model.Dxxb(s, x, lin.ctx[k], v) : T3();
                    if (!dxxb.empty()) *Mx += detail::weighted_t3(dxxb, p);
                }
            };
            build(base.v[k][i], base.P[k][i], nl.Dxb_f[i], nl.Dvb_f[i], nl.Avv_f_inv[i],
                  nl.Mv_f[i], nullptr);
            if (k < K) {
                Mat Dxb_s;
                build(nl.v_star[i], nl.p_star[i], Dxb_s, nl.Dvb_s[i], nl.Avv_s_inv[i], nl.Mv_s[i],
                      &nl.Mx_s[i]);
                const Mat M = Mat::Identity(n, n) - dt * Dxb_s.transpose() +
                              dt * nl.Mv_s[i] * nl.Avv_s_inv[i] * nl.Dvb_s[i].transpose();
                Eigen::PartialPivLU<Mat> lu(M);
                nl.Msolve_inv[i] = lu.solve(Mat::Identity(n, n));
                if (!is_finite(nl.Msolve_inv[i])) {
                    std::ostringstream os;
                    os << "flow linearization: singular implicit-step matrix at node " << k
                       << ", particle " << i;
                    throw solver_error(os.str());
                }
            }
        }
    }
    return lin;
}

// Build the self-source kernel cache: independent-copy derivative kernels of
// the coefficients against displacements of the base cloud itself, evaluated
// once and contracted with the flow state every sweep.
inline void ensure_self_kernels(LinearizationData& lin) {
    if (lin.self_built) return;
    const CoefficientModel& model = *lin.model;
    const FBSDESolution& base = *lin.base;
    const std::size_t K = lin.steps(), N = lin.particles(), S = lin.subset.size();
    const int n = model.n, d = model.d;
    const auto Sn = static_cast<Eigen::Index>(S) * n;
    lin.has_KV = static_cast<bool>(model.lfd_Dvb_y) || static_cast<bool>(model.lfd_Dvf_y);

    lin.Kb.assign(K + 1, {});
    lin.KH.assign(K + 1, {});
    if (lin.has_KV) {
        lin.KVf.assign(K + 1, {});
        lin.KVs.assign(K + 1, {});
    }
    lin.Ksig.assign(K + 1, {});
    for (std::size_t k = 0; k <= K; ++k) {
        const double s = base.grid.node(k);
        const auto& nl = lin.node[k];
        if (k < K && model.lfd_b_y) {
            lin.Kb[k].assign(N, Mat::Zero(n, Sn));
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t c = 0; c < S; ++c)
                    lin.Kb[k][i].middleCols(static_cast<Eigen::Index>(c) * n, n) = model.lfd_b_y(
                        s, base.X[k][i], lin.ctx[k], base.v[k][i], base.X[k][lin.subset[c]]);
        }
        if (k < K && (model.lfd_Dxb_y || model.lfd_Dxf_y)) {
            lin.KH[k].assign(N, Mat::Zero(n, Sn));
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t c = 0; c < S; ++c) {
                    Mat block = Mat::Zero(n, n);
                    const Vec& y = base.X[k][lin.subset[c]];
                    if (model.lfd_Dxf_y)
                        block += model.lfd_Dxf_y(s, base.X[k][i], lin.ctx[k], nl.v_star[i], y);
                    if (model.lfd_Dxb_y)
                        block += detail::weighted_t3(
                            model.lfd_Dxb_y(s, base.X[k][i], lin.ctx[k], nl.v_star[i], y),
                            nl.p_star[i]);
                    lin.KH[k][i].middleCols(static_cast<Eigen::Index>(c) * n, n) = block;
                }
        }
        if (lin.has_KV) {
            lin.KVf[k].assign(N, Mat::Zero(d, Sn));
            lin.KVs[k].assign(N, Mat::Zero(d, Sn));
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t c = 0; c < S; ++c) {
                    const Vec& y = base.X[k][lin.subset[c]];
                    const auto eval = [&](const Vec& v, const Vec& p) {
                        Mat block = Mat::Zero(d, n);
                        if (model.lfd_Dvf_y)
                            block += model.lfd_Dvf_y(s, base.X[k][i], lin.ctx[k], v, y);
                        if (model.lfd_Dvb_y)
                            block += detail::weighted_t3(
                                model.lfd_Dvb_y(s, base.X[k][i], lin.ctx[k], v, y), p);
                        return block;
                    };
                    lin.KVf[k][i].middleCols(static_cast<Eigen::Index>(c) * n, n) =
                        eval(base.v[k][i], base.P[k][i]);
                    if (k < K)
                        lin.KVs[k][i].middleCols(static_cast<Eigen::Index>(c) * n, n) =
                            eval(nl.v_star[i], nl.p_star[i]);
                }
        }
        if (k < K && model.lfd_sigma0_y) {
            lin.Ksig[k].assign(static_cast<std::size_t>(n), Mat::Zero(n, Sn));
            for (std::size_t c = 0; c < S; ++c) {
                const T3 t = model.lfd_sigma0_y(s, lin.ctx[k], base.X[k][lin.subset[c]]);
                for (int col = 0; col < n; ++col)
                    lin.Ksig[k][static_cast<std::size_t>(col)].middleCols(
                        static_cast<Eigen::Index>(c) * n, n) = t[static_cast<std::size_t>(col)];
            }
        }
    }
    if (model.lfd_Dxg_y) {
        lin.Kg.assign(N, Mat::Zero(n, Sn));
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < S; ++c)
                lin.Kg[i].middleCols(static_cast<Eigen::Index>(c) * n, n) =
                    model.lfd_Dxg_y(base.X[K][i], lin.ctx[K], base.X[K][lin.subset[c]]);
    }
    lin.self_built = true;
}

// Precompute the additive sources produced by a fixed displacement field of a
// (possibly different) cloud: positions[k][j] with weights[k][j] (n x r).
inline ExtraSources make_fixed_sources(const LinearizationData& lin,
                                       const std::vector<std::vector<Vec>>& positions,
                                       const std::vector<std::vector<Mat>>& weights) {
    const CoefficientModel& model = *lin.model;
    const FBSDESolution& base = *lin.base;
    const std::size_t K = lin.steps(), N = lin.particles();
    if (positions.size() != K + 1 || weights.size() != K + 1)
        throw invalid_argument("make_fixed_sources: cloud must cover all K+1 nodes");
    const int n = model.n, d = model.d;
    const int r = static_cast<int>(weights[0][0].cols());
    const auto sub = detail::copy_subset(positions[0].size(), base.config.stride);
    const double inv = 1.0 / static_cast<double>(sub.size());

    ExtraSources src;
    src.r = r;
    const bool wantH = static_cast<bool>(model.lfd_Dxb_y) || static_cast<bool>(model.lfd_Dxf_y);
    const bool wantV = static_cast<bool>(model.lfd_Dvb_y) || static_cast<bool>(model.lfd_Dvf_y);
    if (model.lfd_b_y) src.b.assign(K + 1, std::vector<Mat>(N, Mat::Zero(n, r)));
    if (model.lfd_sigma0_y)
        src.sig.assign(K + 1, std::vector<Mat>(static_cast<std::size_t>(n), Mat::Zero(n, r)));
    if (wantH) src.H.assign(K + 1, std::vector<Mat>(N, Mat::Zero(n, r)));
    if (wantV) {
        src.vf.assign(K + 1, std::vector<Mat>(N, Mat::Zero(d, r)));
        src.vs.assign(K + 1, std::vector<Mat>(N, Mat::Zero(d, r)));
    }
    if (model.lfd_Dxg_y) src.g.assign(N, Mat::Zero(n, r));

    for (std::size_t k = 0; k <= K; ++k) {
        const double s = base.grid.node(k);
        const auto& nl = lin.node[k];
        if (model.lfd_sigma0_y && k < K) {
            for (std::size_t c = 0; c < sub.size(); ++c) {
                const T3 t = model.lfd_sigma0_y(s, lin.ctx[k], positions[k][sub[c]]);
                for (int col = 0; col < n; ++col)
                    src.sig[k][static_cast<std::size_t>(col)] +=
                        inv * t[static_cast<std::size_t>(col)] * weights[k][sub[c]];
            }
        }
        if (!model.lfd_b_y && !wantH && !wantV) continue;
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t c = 0; c < sub.size(); ++c) {
                const Vec& y = positions[k][sub[c]];
                const Mat& W = weights[k][sub[c]];
                if (model.lfd_b_y && k < K)
                    src.b[k][i] +=
                        inv * model.lfd_b_y(s, base.X[k][i], lin.ctx[k], base.v[k][i], y) * W;
                if (wantH && k < K) {
                    Mat block = Mat::Zero(n, n);
                    if (model.lfd_Dxf_y)
                        block += model.lfd_Dxf_y(s, base.X[k][i], lin.ctx[k], nl.v_star[i], y);
                    if (model.lfd_Dxb_y)
                        block += detail::weighted_t3(
                            model.lfd_Dxb_y(s, base.X[k][i], lin.ctx[k], nl.v_star[i], y),
                            nl.p_star[i]);
                    src.H[k][i] += inv * block * W;
                }
                if (wantV) {
                    const auto eval = [&](const Vec& v, const Vec& p) {
                        Mat block = Mat::Zero(d, n);
                        if (model.lfd_Dvf_y)
                            block += model.lfd_Dvf_y(s, base.X[k][i], lin.ctx[k], v, y);
                        if (model.lfd_Dvb_y)
                            block += detail::weighted_t3(
                                model.lfd_Dvb_y(s, base.X[k][i], lin.ctx[k], v, y), p);
                        return block;
                    };
                    src.vf[k][i] += inv * eval(base.v[k][i], base.P[k][i]) * W;
                    if (k < K) src.vs[k][i] += inv * eval(nl.v_star[i], nl.p_star[i]) * W;
                }
            }
        }
    }
    if (model.lfd_Dxg_y) {
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < sub.size(); ++c)
                src.g[i] += inv *
                            model.lfd_Dxg_y(base.X[K][i], lin.ctx[K], positions[K][sub[c]]) *
                            weights[K][sub[c]];
    }
    return src;
}

// Solve one linear flow system. dx0: initial derivative per particle (n x r).
// self_source: the base cloud's own flow state drives the measure terms
// (equilibrium-bundle systems). fixed: precomputed additive sources.
inline FlowResult solve_linear_flow(LinearizationData& lin, const std::vector<Mat>& dx0,
                                    bool self_source,
                                    const std::vector<const ExtraSources*>& fixed = {}) {
    const CoefficientModel& model = *lin.model;
    const FBSDESolution& base = *lin.base;
    const std::size_t K = lin.steps(), N = lin.particles();
    const int n = model.n, d = model.d;
    const double dt = base.grid.dt;
    if (dx0.size() != N) throw invalid_argument("solve_linear_flow: one initial block per particle");
    const int r = static_cast<int>(dx0[0].cols());
    if (self_source && model.mean_field) ensure_self_kernels(lin);
    const bool use_self = self_source && model.mean_field;
    const std::size_t S = lin.subset.size();

    FlowResult out;
    out.r = r;
    out.dX.assign(K + 1, std::vector<Mat>(N, Mat::Zero(n, r)));
    out.dP = out.dX;
    out.dv.assign(K + 1, std::vector<Mat>(N, Mat::Zero(d, r)));
    out.dQ.assign(K + 1, std::vector<Mat>(N, Mat::Zero(n, static_cast<Eigen::Index>(n) * r)));

    auto& dX = out.dX;
    auto& dPfit = out.dP;
    auto& dv = out.dv;
    // field-coefficient derivative per node and direction (nb_k x n)
    std::vector<std::vector<Mat>> dcoef(K + 1);
    for (std::size_t k = 0; k <= K; ++k)
        dcoef[k].assign(static_cast<std::size_t>(r),
                        Mat::Zero(static_cast<Eigen::Index>(lin.node[k].reg.basis().size()), n));

    const auto fixed_at = [&](const std::vector<std::vector<Mat>>& arr, std::size_t k,
                              std::size_t i) -> const Mat* {
        if (arr.empty() || arr[k].empty()) return nullptr;
        return &arr[k][i];
    };
    // contraction of a kernel row block against the current subset weights
    Mat Wstack;  // (S*n) x r, rebuilt per node per sweep
    const auto self_contract = [&](const std::vector<std::vector<Mat>>& kern, std::size_t k,
                                   std::size_t i, Eigen::Index rows) -> Mat {
        if (!use_self || kern.empty() || kern[k].empty()) return Mat::Zero(rows, r);
        return kern[k][i] * Wstack / static_cast<double>(S);
    };

    auto flatten = [&]() {
        Eigen::Index total = 0;
        for (std::size_t k = 0; k <= K; ++k)
            for (const auto& m : dcoef[k]) total += m.size();
        Vec v(total);
        Eigen::Index pos = 0;
        for (std::size_t k = 0; k <= K; ++k)
            for (const auto& m : dcoef[k]) {
                v.segment(pos, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
                pos += m.size();
            }
        return v;
    };
    auto unflatten = [&](const Vec& v) {
        Eigen::Index pos = 0;
        for (std::size_t k = 0; k <= K; ++k)
            for (auto& m : dcoef[k]) {
                Eigen::Map<Vec>(m.data(), m.size()) = v.segment(pos, m.size());
                pos += m.size();
            }
    };

    const std::size_t anderson_depth = 8;
    std::vector<Vec> hist_dR, hist_dG;
    Vec prev_r, prev_g;
    bool have_prev = false;
    std::vector<std::vector<Mat>> dX_prev, dP_prev;
    double gap = std::numeric_limits<double>::infinity();
    int sweep = 0;
    for (; sweep < base.config.sweep_max; ++sweep) {
        const Vec x_in = flatten();

        // ---- forward pass -------------------------------------------------
        for (std::size_t i = 0; i < N; ++i) dX[0][i] = dx0[i];
        for (std::size_t k = 0; k <= K; ++k) {
            const auto& nl = lin.node[k];
            if (use_self) {
                Wstack.resize(static_cast<Eigen::Index>(S) * n, r);
                for (std::size_t c = 0; c < S; ++c)
                    Wstack.middleRows(static_cast<Eigen::Index>(c) * n, n) =
                        dX[k][lin.subset[c]];
            }
            for (std::size_t i = 0; i < N; ++i) {
                const Vec Bi = nl.reg.basis().eval(base.X[k][i]);
                Mat dPhat = nl.p_coef.transpose() * (nl.grad[i] * dX[k][i]);
                for (int rho = 0; rho < r; ++rho)
                    dPhat.col(rho) += dcoef[k][static_cast<std::size_t>(rho)].transpose() * Bi;

                Mat Sv = self_contract(lin.KVf, k, i, d);
                for (const auto* f : fixed)
                    if (const Mat* m = fixed_at(f->vf, k, i)) Sv += *m;
                dv[k][i] = -nl.Avv_f_inv[i] *
                           (nl.Mv_f[i].transpose() * dX[k][i] + nl.Dvb_f[i].transpose() * dPhat +
                            Sv);

                if (k < K) {
                    Mat Sb = self_contract(lin.Kb, k, i, n);
                    for (const auto* f : fixed)
                        if (const Mat* m = fixed_at(f->b, k, i)) Sb += *m;
                    Mat dstep = dX[k][i] + dt * (nl.Dxb_f[i] * dX[k][i] + nl.Dvb_f[i] * dv[k][i] +
                                                 Sb);
                    const Vec dB = base.paths->increment(i, k, dt);
                    for (int col = 0; col < n; ++col) {
                        Mat diff = Mat::Zero(n, r);
                        if (nl.sigma1[static_cast<std::size_t>(col)].size() > 0)
                            diff += nl.sigma1[static_cast<std::size_t>(col)] * dX[k][i];
                        if (use_self && !lin.Ksig.empty() && !lin.Ksig[k].empty())
                            diff += lin.Ksig[k][static_cast<std::size_t>(col)] * Wstack /
                                    static_cast<double>(S);
                        for (const auto* f : fixed)
                            if (!f->sig.empty() && !f->sig[k].empty())
                                diff += f->sig[k][static_cast<std::size_t>(col)];
                        dstep += dB(col) * diff;
                    }
                    dX[k + 1][i] = dstep;
                    if (!is_finite(dX[k + 1][i]))
                        throw solver_error("solve_linear_flow: non-finite flow state");
                }
            }
        }

        // ---- backward pass ------------------------------------------------
        // terminal node
        {
            const auto& nl = lin.node[K];
            const auto Ni = static_cast<Eigen::Index>(N);
            if (use_self) {
                Wstack.resize(static_cast<Eigen::Index>(S) * n, r);
                for (std::size_t c = 0; c < S; ++c)
                    Wstack.middleRows(static_cast<Eigen::Index>(c) * n, n) =
                        dX[K][lin.subset[c]];
            }
            std::vector<Mat> dT(N);
            for (std::size_t i = 0; i < N; ++i) {
                Mat t = model.Dxxg(base.X[K][i], lin.ctx[K]) * dX[K][i];
                if (use_self && !lin.Kg.empty())
                    t += lin.Kg[i] * Wstack / static_cast<double>(S);
                for (const auto* f : fixed)
                    if (!f->g.empty()) t += f->g[i];
                dT[i] = t;
            }
            for (int rho = 0; rho < r; ++rho) {
                Mat dA(Ni, static_cast<Eigen::Index>(nl.reg.basis().size()));
                Mat dY(Ni, n);
                for (std::size_t i = 0; i < N; ++i) {
                    dA.row(static_cast<Eigen::Index>(i)) =
                        (nl.grad[i] * dX[K][i].col(rho)).transpose();
                    dY.row(static_cast<Eigen::Index>(i)) = dT[i].col(rho).transpose();
                }
                dcoef[K][static_cast<std::size_t>(rho)] = nl.reg.dfit(nl.p_coef, nl.R_p, dA, dY);
            }
            for (std::size_t i = 0; i < N; ++i) {
                const Vec Bi = nl.reg.basis().eval(base.X[K][i]);
                Mat dp = nl.p_coef.transpose() * (nl.grad[i] * dX[K][i]);
                for (int rho = 0; rho < r; ++rho)
                    dp.col(rho) += dcoef[K][static_cast<std::size_t>(rho)].transpose() * Bi;
                dPfit[K][i] = dp;
            }
        }

        for (std::size_t k = K; k-- > 0;) {
            const auto& nl = lin.node[k];
            const auto Ni = static_cast<Eigen::Index>(N);
            const auto nb = static_cast<Eigen::Index>(nl.reg.basis().size());
            if (use_self) {
                Wstack.resize(static_cast<Eigen::Index>(S) * n, r);
                for (std::size_t c = 0; c < S; ++c)
                    Wstack.middleRows(static_cast<Eigen::Index>(c) * n, n) =
                        dX[k][lin.subset[c]];
            }
            std::vector<Mat> de(static_cast<std::size_t>(r)), dq(static_cast<std::size_t>(r));
            std::vector<Mat> dA(static_cast<std::size_t>(r));
            for (int rho = 0; rho < r; ++rho) {
                Mat dAr(Ni, nb), dY(Ni, n), dYq(Ni, static_cast<Eigen::Index>(n) * n);
                for (std::size_t i = 0; i < N; ++i) {
                    dAr.row(static_cast<Eigen::Index>(i)) =
                        (nl.grad[i] * dX[k][i].col(rho)).transpose();
                    dY.row(static_cast<Eigen::Index>(i)) = dPfit[k + 1][i].col(rho).transpose();
                    const Vec dB = base.paths->increment(i, k, dt);
                    const Mat Qi = dPfit[k + 1][i].col(rho) * dB.transpose() / dt;
                    for (int a = 0; a < n; ++a)
                        for (int c = 0; c < n; ++c)
                            dYq(static_cast<Eigen::Index>(i), a + n * c) = Qi(a, c);
                }
                de[static_cast<std::size_t>(rho)] = nl.reg.dfit(nl.e_coef, nl.R_e, dAr, dY);
                dq[static_cast<std::size_t>(rho)] = nl.reg.dfit(nl.q_coef, nl.R_q, dAr, dYq);
                dA[static_cast<std::size_t>(rho)] = std::move(dAr);
            }

            std::vector<Mat> dT(N);
            for (std::size_t i = 0; i < N; ++i) {
                const Vec Bi = nl.reg.basis().eval(base.X[k][i]);
                const Mat gdx = nl.grad[i] * dX[k][i];  // nb x r
                Mat dEhat = nl.e_coef.transpose() * gdx;
                Mat dQout = Mat::Zero(n, static_cast<Eigen::Index>(n) * r);
                Mat s1dQ = Mat::Zero(n, r);
                for (int rho = 0; rho < r; ++rho) {
                    dEhat.col(rho) += de[static_cast<std::size_t>(rho)].transpose() * Bi;
                    Vec qflat = dq[static_cast<std::size_t>(rho)].transpose() * Bi +
                                nl.q_coef.transpose() * gdx.col(rho);
                    Mat dQi(n, n);
                    for (int a = 0; a < n; ++a)
                        for (int c = 0; c < n; ++c) dQi(a, c) = qflat(a + n * c);
                    dQout.middleCols(static_cast<Eigen::Index>(rho) * n, n) = dQi;
                    for (int col = 0; col < n; ++col)
                        if (nl.sigma1[static_cast<std::size_t>(col)].size() > 0)
                            s1dQ.col(rho) +=
                                nl.sigma1[static_cast<std::size_t>(col)].transpose() * dQi.col(col);
                }
                out.dQ[k][i] = dQout;

                Mat SH = self_contract(lin.KH, k, i, n);
                for (const auto* f : fixed)
                    if (const Mat* m = fixed_at(f->H, k, i)) SH += *m;
                Mat Svs = self_contract(lin.KVs, k, i, d);
                for (const auto* f : fixed)
                    if (const Mat* m = fixed_at(f->vs, k, i)) Svs += *m;

                const Mat rhs =
                    dEhat + dt * (nl.Mx_s[i] * dX[k][i] -
                                  nl.Mv_s[i] * nl.Avv_s_inv[i] *
                                      (nl.Mv_s[i].transpose() * dX[k][i] + Svs) +
                                  SH + s1dQ);
                dT[i] = nl.Msolve_inv[i] * rhs;
            }
            for (int rho = 0; rho < r; ++rho) {
                Mat dY(Ni, n);
                for (std::size_t i = 0; i < N; ++i)
                    dY.row(static_cast<Eigen::Index>(i)) = dT[i].col(rho).transpose();
                dcoef[k][static_cast<std::size_t>(rho)] =
                    nl.reg.dfit(nl.p_coef, nl.R_p, dA[static_cast<std::size_t>(rho)], dY);
            }
            for (std::size_t i = 0; i < N; ++i) {
                const Vec Bi = nl.reg.basis().eval(base.X[k][i]);
                Mat dp = nl.p_coef.transpose() * (nl.grad[i] * dX[k][i]);
                for (int rho = 0; rho < r; ++rho)
                    dp.col(rho) += dcoef[k][static_cast<std::size_t>(rho)].transpose() * Bi;
                dPfit[k][i] = dp;
            }
        }

        // ---- Anderson mixing / convergence --------------------------------
        const Vec g = flatten();
        const Vec res = g - x_in;
        if (have_prev) {
            hist_dR.push_back(res - prev_r);
            hist_dG.push_back(g - prev_g);
            if (hist_dR.size() > anderson_depth) {
                hist_dR.erase(hist_dR.begin());
                hist_dG.erase(hist_dG.begin());
            }
        }
        prev_r = res;
        prev_g = g;
        have_prev = true;
        if (!hist_dR.empty()) {
            const auto m = static_cast<Eigen::Index>(hist_dR.size());
            Mat R(g.size(), m), G(g.size(), m);
            for (Eigen::Index c = 0; c < m; ++c) {
                R.col(c) = hist_dR[static_cast<std::size_t>(c)];
                G.col(c) = hist_dG[static_cast<std::size_t>(c)];
            }
            const Vec gamma = R.colPivHouseholderQr().solve(res);
            Vec mixed = g - G * gamma;
            if (is_finite(mixed) && (mixed - g).norm() <= 1e3 * (1.0 + g.norm())) unflatten(mixed);
        }

        if (!dX_prev.empty()) {
            double scale = 1.0, gmax = 0.0;
            for (std::size_t k = 0; k <= K; ++k)
                for (std::size_t i = 0; i < N; ++i) {
                    scale = std::max(scale, dX[k][i].cwiseAbs().maxCoeff());
                    gmax = std::max(gmax, (dX[k][i] - dX_prev[k][i]).cwiseAbs().maxCoeff());
                    gmax = std::max(gmax, (dPfit[k][i] - dP_prev[k][i]).cwiseAbs().maxCoeff());
                }
            gap = gmax / scale;
            if (gap <= base.config.sweep_tol) {
                ++sweep;
                break;
            }
        }
        dX_prev = dX;
        dP_prev = dPfit;
    }
    if (gap > base.config.sweep_tol && sweep >= base.config.sweep_max) {
        std::ostringstream os;
        os << "solve_linear_flow: sweeps did not converge (gap " << gap << ")";
        throw solver_error(os.str());
    }
    out.sweeps = sweep;
    out.gap = gap;
    return out;
}

// ---- public flow operations -------------------------------------------------

// State Jacobian D_x Theta along the base bundle (identity initial block, no
// measure sources: the measure flow is frozen).
inline FlowResult jacobian_x(LinearizationData& lin) {
    const std::size_t N = lin.particles();
    const int n = lin.model->n;
    std::vector<Mat> dx0(N, Mat::Identity(n, n));
    return solve_linear_flow(lin, dx0, false);
}

// Directional derivative along eta of the equilibrium bundle (self-consistent
// measure displacement).
inline FlowResult gateaux_xi(LinearizationData& lin, const std::vector<Vec>& eta) {
    const std::size_t N = lin.particles();
    if (eta.size() != N) throw invalid_argument("gateaux_xi: one direction per particle");
    std::vector<Mat> dx0(N);
    for (std::size_t i = 0; i < N; ++i) dx0[i] = eta[i];
    return solve_linear_flow(lin, dx0, true);
}

struct GateauxDecomposition {
    FlowResult state_part;    // initial-state variation: eta enters, sources off
    FlowResult measure_part;  // zero-initial part driven by the total displacement
    double max_residual = 0.0;  // node-wise deviation from the direct flow
};

// Split the directional derivative into its state and measure parts and verify
// the decomposition identity against the direct flow.
inline GateauxDecomposition decompose_gateaux(LinearizationData& lin,
                                              const std::vector<Vec>& eta) {
    const std::size_t N = lin.particles(), K = lin.steps();
    std::vector<Mat> dx0(N);
    for (std::size_t i = 0; i < N; ++i) dx0[i] = eta[i];
    GateauxDecomposition dec;
    dec.state_part = solve_linear_flow(lin, dx0, false);

    // the measure part's sources are driven by the *total* displacement
    // state_part + measure_part; feed the state part as a fixed source and let
    // the engine's self-consistent term supply the rest
    const ExtraSources from_state =
        make_fixed_sources(lin, lin.base->X, dec.state_part.dX);
    std::vector<Mat> zero0(N, Mat::Zero(lin.model->n, 1));
    dec.measure_part = solve_linear_flow(lin, zero0, true, {&from_state});

    const FlowResult direct = gateaux_xi(lin, eta);
    double dev = 0.0, scale = 1.0;
    for (std::size_t k = 0; k <= K; ++k)
        for (std::size_t i = 0; i < N; ++i) {
            const Mat sum_dX = dec.state_part.dX[k][i] + dec.measure_part.dX[k][i];
            const Mat sum_dP = dec.state_part.dP[k][i] + dec.measure_part.dP[k][i];
            dev = std::max(dev, (sum_dX - direct.dX[k][i]).cwiseAbs().maxCoeff());
            dev = std::max(dev, (sum_dP - direct.dP[k][i]).cwiseAbs().maxCoeff());
            scale = std::max(scale, direct.dX[k][i].cwiseAbs().maxCoeff());
        }
    dec.max_residual = dev / scale;
    return dec;
}

// Direction flow of the frozen bundle: the companion started at x keeps its
// own initial state fixed while the equilibrium displacement moves the measure
// flow it is driven by. lin_x: linearization of the frozen companion solve,
// lin_xi: linearization of the equilibrium it was frozen against.
inline FlowResult gateaux_frozen(LinearizationData& lin_x, LinearizationData& lin_xi,
                                 const std::vector<Vec>& eta) {
    const FlowResult eq_flow = gateaux_xi(lin_xi, eta);
    const ExtraSources src = make_fixed_sources(lin_x, lin_xi.base->X, eq_flow.dX);
    std::vector<Mat> zero0(lin_x.particles(), Mat::Zero(lin_x.model->n, 1));
    return solve_linear_flow(lin_x, zero0, false, {&src});
}

// ---- kernel flows -----------------------------------------------------------

struct KernelFlowBundle {
    Vec y;
    FlowResult dd;                // measure-kernel flow on the equilibrium bundle
    std::optional<FlowResult> d;  // measure-kernel flow on the frozen bundle
    std::shared_ptr<FBSDESolution> companion;  // population started at y
    FlowResult jac;                            // its state Jacobian (the D_y weights)
};

// Kernel flow at probe point y: a companion population is started at y on the
// *same* Brownian paths (so its copies are jointly sampled with the base
// cloud), its state Jacobian supplies the D_y weights of the measure-kernel
// sources, and the zero-initial linear systems are solved on the equilibrium
// bundle (self-coupled) and, when lin_x is given, on the frozen bundle
// (source-only).
inline KernelFlowBundle kernel_flow(const CoefficientModel& model, LinearizationData& lin_xi,
                                    const Vec& y, LinearizationData* lin_x = nullptr) {
    const FBSDESolution& eq = *lin_xi.base;
    const int n = model.n;
    std::vector<Vec> y0(lin_xi.particles(), y);
    auto comp = std::make_shared<FBSDESolution>(
        solve_control_frozen(model, eq.grid, y0, eq.measure_flow, eq.paths, eq.config));
    LinearizationData lin_y = build_linearization(model, *comp);
    FlowResult jac_y = jacobian_x(lin_y);

    KernelFlowBundle out;
    out.y = y;
    const ExtraSources driver_xi = make_fixed_sources(lin_xi, comp->X, jac_y.dX);
    std::vector<Mat> zero_xi(lin_xi.particles(), Mat::Zero(n, n));
    out.dd = solve_linear_flow(lin_xi, zero_xi, true, {&driver_xi});
    if (lin_x != nullptr) {
        const ExtraSources driver_x = make_fixed_sources(*lin_x, comp->X, jac_y.dX);
        const ExtraSources from_dd = make_fixed_sources(*lin_x, eq.X, out.dd.dX);
        std::vector<Mat> zero_x(lin_x->particles(), Mat::Zero(n, n));
        out.d = solve_linear_flow(*lin_x, zero_x, false, {&driver_x, &from_dd});
    }
    out.companion = std::move(comp);
    out.jac = std::move(jac_y);
    return out;
}

// ---- second-order flows -----------------------------------------------------

namespace detail {

// Symmetric quadratic form of a coefficient's second-derivative tensors in the
// first-order flow columns: for each output component m and direction pair
// (a, b) of the r = n^2 layout (a + n*b),
//   out(m, a + n*b) = dXa' Txx[m] dXb + dXa' Txv[m] dvb + dXb' Txv[m] dva
//                     + dva' Tvv[m] dvb,
// with any empty tensor contributing zero.
inline Mat quad_form(const T3& Txx, const T3& Txv, const T3& Tvv, const Mat& dX, const Mat& dv) {
    const auto n = dX.cols();
    const auto m = static_cast<Eigen::Index>(std::max({Txx.size(), Txv.size(), Tvv.size()}));
    Mat out = Mat::Zero(m, n * n);
    for (Eigen::Index comp = 0; comp < m; ++comp) {
        const auto c = static_cast<std::size_t>(comp);
        for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = 0; b < n; ++b) {
                double acc = 0.0;
                if (c < Txx.size() && Txx[c].size() > 0)
                    acc += dX.col(a).dot(Txx[c] * dX.col(b));
                if (c < Txv.size() && Txv[c].size() > 0)
                    acc += dX.col(a).dot(Txv[c] * dv.col(b)) + dX.col(b).dot(Txv[c] * dv.col(a));
                if (c < Tvv.size() && Tvv[c].size() > 0)
                    acc += dv.col(a).dot(Tvv[c] * dv.col(b));
                out(comp, a + n * b) = acc;
            }
    }
    return out;
}

// p-weighted slice of a fourth-order tensor: out[i] = sum_m p(m) T[m][i].
inline T3 weighted_t4(const T4& t, const Vec& p) {
    if (t.empty()) return T3();
    T3 out(t.front().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = Mat::Zero(t.front()[i].rows(), t.front()[i].cols());
        for (std::size_t m = 0; m < t.size(); ++m) out[i] += p(static_cast<Eigen::Index>(m)) * t[m][i];
    }
    return out;
}

// cross terms of the adjoint-drift and optimality-condition quadratics with
// the first-order adjoint flow: for component rows given by `rows(m)` deliver
//   out(i, a + n*b) += dPa_m rows(m)(i-th entry against dXb / dvb) + (a <-> b)
inline void add_p_cross(Mat& out, const T3& Tx, const T3& Tv, const Mat& dP, const Mat& dX,
                        const Mat& dv, bool transpose_rows) {
    const auto n = dX.cols();
    const auto m = static_cast<Eigen::Index>(std::max(Tx.size(), Tv.size()));
    for (Eigen::Index mm = 0; mm < m; ++mm) {
        const auto c = static_cast<std::size_t>(mm);
        for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = 0; b < n; ++b) {
                Vec term = Vec::Zero(out.rows());
                if (c < Tx.size() && Tx[c].size() > 0) {
                    const Mat M = transpose_rows ? Mat(Tx[c].transpose()) : Tx[c];
                    term += dP(mm, a) * (M * dX.col(b)) + dP(mm, b) * (M * dX.col(a));
                }
                if (c < Tv.size() && Tv[c].size() > 0) {
                    const Mat M = transpose_rows ? Mat(Tv[c].transpose()) : Tv[c];
                    term += dP(mm, a) * (M * dv.col(b)) + dP(mm, b) * (M * dv.col(a));
                }
                out.col(a + n * b) += term;
            }
    }
}

}  // namespace detail

// Second-order state flow D_x^2 Theta along the frozen bundle: the linear
// system of the first-order engine driven by source terms quadratic in the
// state Jacobian flow, with the model's third-derivative tensors as kernels.
// Directions are laid out as pairs (a, b) -> column a + n*b; the result is
// symmetric under a <-> b because every source is. Models without third
// derivatives cannot form the sources.
inline FlowResult hessian_x(LinearizationData& lin) {
    const CoefficientModel& model = *lin.model;
    const FBSDESolution& base = *lin.base;
    if (!model.Dxxxb || !model.DxxDvb || !model.DxDvvb || !model.Dvvvb || !model.Dxxxf ||
        !model.DxxDvf || !model.DxDvvf || !model.Dvvvf || !model.Dxxxg)
        throw capability_error("hessian_x: model lacks third-derivative callbacks");
    const std::size_t K = lin.steps(), N = lin.particles();
    const int n = model.n;
    const int r = n * n;

    FlowResult jac = jacobian_x(lin);

    ExtraSources src;
    src.r = r;
    src.b.assign(K + 1, std::vector<Mat>(N));
    src.H.assign(K + 1, std::vector<Mat>(N));
    src.vf.assign(K + 1, std::vector<Mat>(N));
    src.vs.assign(K + 1, std::vector<Mat>(N));
    src.g.assign(N, Mat());
    for (std::size_t k = 0; k <= K; ++k) {
        const double s = base.grid.node(k);
        const auto& nl = lin.node[k];
        for (std::size_t i = 0; i < N; ++i) {
            const Vec& x = base.X[k][i];
            const Mat& dX = jac.dX[k][i];
            const Mat& dvf = jac.dv[k][i];
            const Mat& dP = jac.dP[k][i];

            // forward drift quadratic at the stored point
            src.b[k][i] = detail::quad_form(model.Dxxb(s, x, lin.ctx[k], base.v[k][i]),
                                            model.DvDxb(s, x, lin.ctx[k], base.v[k][i]),
                                            model.Dvvb(s, x, lin.ctx[k], base.v[k][i]), dX, dvf);

            // optimality-condition quadratic: components indexed by v, with the
            // adjoint entering linearly (cross terms via D_vD_xb, D_v^2b)
            const auto condition_quad = [&](const Vec& v, const Vec& p) {
                // condition component j: (x, x) block from D_x^2 D_v tensors
                T3 cond_xx(static_cast<std::size_t>(model.d));
                const T4 b_xx = model.DxxDvb(s, x, lin.ctx[k], v);
                const T3 f_xx = model.DxxDvf(s, x, lin.ctx[k], v);
                for (int j = 0; j < model.d; ++j) {
                    Mat M = f_xx[static_cast<std::size_t>(j)];
                    for (int m = 0; m < n; ++m)
                        M += p(m) * b_xx[static_cast<std::size_t>(m)][static_cast<std::size_t>(j)];
                    cond_xx[static_cast<std::size_t>(j)] = M;
                }
                // (x, v) and (v, v) blocks from the D_vD_v tensors
                T3 cond_xv(static_cast<std::size_t>(model.d)), cond_vv(static_cast<std::size_t>(model.d));
                const T4 b_xvv = model.DxDvvb(s, x, lin.ctx[k], v);
                const T3 f_xvv = model.DxDvvf(s, x, lin.ctx[k], v);
                const T4 b_vvv = model.Dvvvb(s, x, lin.ctx[k], v);
                const T3 f_vvv = model.Dvvvf(s, x, lin.ctx[k], v);
                for (int j = 0; j < model.d; ++j) {
                    Mat Mxv = Mat::Zero(n, model.d);
                    for (int c = 0; c < n; ++c)
                        for (int j2 = 0; j2 < model.d; ++j2) {
                            double acc = f_xvv[static_cast<std::size_t>(c)](j, j2);
                            for (int m = 0; m < n; ++m)
                                acc += p(m) * b_xvv[static_cast<std::size_t>(m)]
                                                   [static_cast<std::size_t>(c)](j, j2);
                            Mxv(c, j2) = acc;
                        }
                    cond_xv[static_cast<std::size_t>(j)] = Mxv;
                    Mat Mvv = Mat::Zero(model.d, model.d);
                    for (int j1 = 0; j1 < model.d; ++j1)
                        for (int j2 = 0; j2 < model.d; ++j2) {
                            double acc = f_vvv[static_cast<std::size_t>(j1)](j, j2);
                            for (int m = 0; m < n; ++m)
                                acc += p(m) * b_vvv[static_cast<std::size_t>(m)]
                                                   [static_cast<std::size_t>(j1)](j, j2);
                            Mvv(j1, j2) = acc;
                        }
                    cond_vv[static_cast<std::size_t>(j)] = Mvv;
                }
                Mat out = detail::quad_form(cond_xx, cond_xv, cond_vv, dX, dvf);
                // adjoint cross terms: d^2G/dp dx = (DvDxb)', d^2G/dp dv = Dvvb
                detail::add_p_cross(out, model.DvDxb(s, x, lin.ctx[k], v),
                                    model.Dvvb(s, x, lin.ctx[k], v), dP, dX, dvf, true);
                return out;
            };
            src.vf[k][i] = condition_quad(base.v[k][i], base.P[k][i]);
            if (k < K)
                src.vs[k][i] = condition_quad(nl.v_star[i], nl.p_star[i]);
            else
                src.vs[k][i] = Mat::Zero(model.d, r);

            // adjoint-drift quadratic at the starred point
            if (k < K) {
                const Vec& vs = nl.v_star[i];
                const Vec& ps = nl.p_star[i];
                const T3 Hxx_b = detail::weighted_t4(model.Dxxxb(s, x, lin.ctx[k], vs), ps);
                const T3 f_xxx = model.Dxxxf(s, x, lin.ctx[k], vs);
                T3 Hxx(static_cast<std::size_t>(n));
                const T4 b_xxv = model.DxxDvb(s, x, lin.ctx[k], vs);
                const T3 f_xxv = model.DxxDvf(s, x, lin.ctx[k], vs);
                const T4 b_xvv = model.DxDvvb(s, x, lin.ctx[k], vs);
                const T3 f_xvv = model.DxDvvf(s, x, lin.ctx[k], vs);
                T3 Hxv(static_cast<std::size_t>(n)), Hvv(static_cast<std::size_t>(n));
                for (int i2 = 0; i2 < n; ++i2) {
                    Hxx[static_cast<std::size_t>(i2)] =
                        (Hxx_b.empty() ? Mat::Zero(n, n) : Hxx_b[static_cast<std::size_t>(i2)]) +
                        f_xxx[static_cast<std::size_t>(i2)];
                    Mat Mxv = Mat::Zero(n, model.d);
                    for (int c = 0; c < n; ++c)
                        for (int j = 0; j < model.d; ++j) {
                            double acc = f_xxv[static_cast<std::size_t>(j)](i2, c);
                            for (int m = 0; m < n; ++m)
                                acc += ps(m) * b_xxv[static_cast<std::size_t>(m)]
                                                    [static_cast<std::size_t>(j)](i2, c);
                            Mxv(c, j) = acc;
                        }
                    Hxv[static_cast<std::size_t>(i2)] = Mxv;
                    Mat Mvv = Mat::Zero(model.d, model.d);
                    for (int j1 = 0; j1 < model.d; ++j1)
                        for (int j2 = 0; j2 < model.d; ++j2) {
                            double acc = f_xvv[static_cast<std::size_t>(i2)](j1, j2);
                            for (int m = 0; m < n; ++m)
                                acc += ps(m) * b_xvv[static_cast<std::size_t>(m)]
                                                    [static_cast<std::size_t>(i2)](j1, j2);
                            Mvv(j1, j2) = acc;
                        }
                    Hvv[static_cast<std::size_t>(i2)] = Mvv;
                }
                Mat out = detail::quad_form(Hxx, Hxv, Hvv, dX, dvf);
                detail::add_p_cross(out, model.Dxxb(s, x, lin.ctx[k], vs),
                                    model.DvDxb(s, x, lin.ctx[k], vs), dP, dX, dvf, false);
                src.H[k][i] = out;
            } else {
                src.H[k][i] = Mat::Zero(n, r);
            }
        }
    }
    // terminal quadratic D_x^3 g
    for (std::size_t i = 0; i < N; ++i)
        src.g[i] = detail::quad_form(model.Dxxxg(base.X[K][i], lin.ctx[K]), T3(), T3(),
                                     jac.dX[K][i], jac.dv[K][i]);

    std::vector<Mat> zero0(N, Mat::Zero(n, r));
    return solve_linear_flow(lin, zero0, false, {&src});
}

// ---- y-derivatives of the kernel flows --------------------------------------

// Sources produced by the *second* measure kernels of the coefficients under a
// fixed displacement field: each copy j of `positions` contributes its kernel
// contracted bilinearly with weights[k][j] (n x n, one column per
// y-coordinate), giving r = n^2 source columns in the (b, c) -> b + n*c pair
// layout. These are the (D_y X)^{(x)2} terms of the second-order kernel
// systems; missing second-kernel callbacks contribute zero.
inline ExtraSources make_fixed_sources_quad(const LinearizationData& lin,
                                            const std::vector<std::vector<Vec>>& positions,
                                            const std::vector<std::vector<Mat>>& weights) {
    const CoefficientModel& model = *lin.model;
    const FBSDESolution& base = *lin.base;
    const std::size_t K = lin.steps(), N = lin.particles();
    if (positions.size() != K + 1 || weights.size() != K + 1)
        throw invalid_argument("make_fixed_sources_quad: cloud must cover all K+1 nodes");
    const int n = model.n, d = model.d;
    const int r = n * n;
    const auto sub = detail::copy_subset(positions[0].size(), base.config.stride);
    const double inv = 1.0 / static_cast<double>(sub.size());

    ExtraSources src;
    src.r = r;
    const bool wantH = static_cast<bool>(model.lfd2_Dxb_y) || static_cast<bool>(model.lfd2_Dxf_y);
    const bool wantV = static_cast<bool>(model.lfd2_Dvb_y) || static_cast<bool>(model.lfd2_Dvf_y);
    if (model.lfd2_b_y) src.b.assign(K + 1, std::vector<Mat>(N, Mat::Zero(n, r)));
    if (model.lfd2_sigma0_y)
        src.sig.assign(K + 1, std::vector<Mat>(static_cast<std::size_t>(n), Mat::Zero(n, r)));
    if (wantH) src.H.assign(K + 1, std::vector<Mat>(N, Mat::Zero(n, r)));
    if (wantV) {
        src.vf.assign(K + 1, std::vector<Mat>(N, Mat::Zero(d, r)));
        src.vs.assign(K + 1, std::vector<Mat>(N, Mat::Zero(d, r)));
    }
    if (model.lfd2_Dxg_y) src.g.assign(N, Mat::Zero(n, r));

    for (std::size_t k = 0; k <= K; ++k) {
        const double s = base.grid.node(k);
        const auto& nl = lin.node[k];
        if (model.lfd2_sigma0_y && k < K) {
            for (std::size_t c = 0; c < sub.size(); ++c) {
                const T4 t = model.lfd2_sigma0_y(s, lin.ctx[k], positions[k][sub[c]]);
                const Mat& W = weights[k][sub[c]];
                for (int col = 0; col < n; ++col)
                    src.sig[k][static_cast<std::size_t>(col)] +=
                        inv * detail::quad_form(t[static_cast<std::size_t>(col)], T3(), T3(), W, W);
            }
        }
        if (!model.lfd2_b_y && !wantH && !wantV) continue;
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t c = 0; c < sub.size(); ++c) {
                const Vec& y = positions[k][sub[c]];
                const Mat& W = weights[k][sub[c]];
                if (model.lfd2_b_y && k < K)
                    src.b[k][i] += inv * detail::quad_form(
                                             model.lfd2_b_y(s, base.X[k][i], lin.ctx[k],
                                                            base.v[k][i], y),
                                             T3(), T3(), W, W);
                if (wantH && k < K) {
                    T3 eff(static_cast<std::size_t>(n), Mat::Zero(n, n));
                    if (model.lfd2_Dxf_y) {
                        const T3 t = model.lfd2_Dxf_y(s, base.X[k][i], lin.ctx[k], nl.v_star[i], y);
                        for (std::size_t j = 0; j < eff.size(); ++j) eff[j] += t[j];
                    }
                    if (model.lfd2_Dxb_y) {
                        const T3 t = detail::weighted_t4(
                            model.lfd2_Dxb_y(s, base.X[k][i], lin.ctx[k], nl.v_star[i], y),
                            nl.p_star[i]);
                        for (std::size_t j = 0; j < eff.size(); ++j) eff[j] += t[j];
                    }
                    src.H[k][i] += inv * detail::quad_form(eff, T3(), T3(), W, W);
                }
                if (wantV) {
                    const auto eval = [&](const Vec& v, const Vec& p) {
                        T3 eff(static_cast<std::size_t>(d), Mat::Zero(n, n));
                        if (model.lfd2_Dvf_y) {
                            const T3 t = model.lfd2_Dvf_y(s, base.X[k][i], lin.ctx[k], v, y);
                            for (std::size_t j = 0; j < eff.size(); ++j) eff[j] += t[j];
                        }
                        if (model.lfd2_Dvb_y) {
                            const T3 t = detail::weighted_t4(
                                model.lfd2_Dvb_y(s, base.X[k][i], lin.ctx[k], v, y), p);
                            for (std::size_t j = 0; j < eff.size(); ++j) eff[j] += t[j];
                        }
                        return detail::quad_form(eff, T3(), T3(), W, W);
                    };
                    src.vf[k][i] += inv * eval(base.v[k][i], base.P[k][i]);
                    if (k < K) src.vs[k][i] += inv * eval(nl.v_star[i], nl.p_star[i]);
                }
            }
        }
    }
    if (model.lfd2_Dxg_y) {
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < sub.size(); ++c)
                src.g[i] += inv * detail::quad_form(
                                      model.lfd2_Dxg_y(base.X[K][i], lin.ctx[K],
                                                       positions[K][sub[c]]),
                                      T3(), T3(), weights[K][sub[c]], weights[K][sub[c]]);
    }
    return src;
}

struct KernelFlowYDeriv {
    Vec y;
    FlowResult dd;                // y-derivative of the equilibrium-bundle kernel flow
    std::optional<FlowResult> d;  // y-derivative of the frozen-bundle kernel flow
    std::shared_ptr<FBSDESolution> companion;  // population started at y
    FlowResult jac;                            // its state Jacobian
    FlowResult hess;                           // its second-order state flow
};

// y-derivative of the kernel flows at probe point y: the same companion
// population as kernel_flow supplies both its state Jacobian (contracted with
// the second measure kernels) and its second-order state flow (contracted with
// the first kernels) as fixed drivers; the equilibrium-bundle system is
// self-coupled, and the frozen-bundle system additionally sees the
// equilibrium-bundle solution through the first kernels of the base cloud.
inline KernelFlowYDeriv kernel_flow_yderiv(const CoefficientModel& model,
                                           LinearizationData& lin_xi, const Vec& y,
                                           LinearizationData* lin_x = nullptr) {
    if (!model.has_second_measure_derivs())
        throw capability_error("kernel_flow_yderiv: model lacks second measure derivatives");
    const FBSDESolution& eq = *lin_xi.base;
    const int n = model.n;
    std::vector<Vec> y0(lin_xi.particles(), y);
    auto comp = std::make_shared<FBSDESolution>(
        solve_control_frozen(model, eq.grid, y0, eq.measure_flow, eq.paths, eq.config));
    LinearizationData lin_y = build_linearization(model, *comp);
    FlowResult jac_y = jacobian_x(lin_y);
    FlowResult hess_y = hessian_x(lin_y);

    KernelFlowYDeriv out;
    out.y = y;
    const ExtraSources lin_driver = make_fixed_sources(lin_xi, comp->X, hess_y.dX);
    const ExtraSources quad_driver = make_fixed_sources_quad(lin_xi, comp->X, jac_y.dX);
    std::vector<Mat> zero_xi(lin_xi.particles(), Mat::Zero(n, n * n));
    out.dd = solve_linear_flow(lin_xi, zero_xi, true, {&lin_driver, &quad_driver});
    if (lin_x != nullptr) {
        const ExtraSources lin_x_driver = make_fixed_sources(*lin_x, comp->X, hess_y.dX);
        const ExtraSources quad_x_driver = make_fixed_sources_quad(*lin_x, comp->X, jac_y.dX);
        const ExtraSources from_dd = make_fixed_sources(*lin_x, eq.X, out.dd.dX);
        std::vector<Mat> zero_x(lin_x->particles(), Mat::Zero(n, n * n));
        out.d = solve_linear_flow(*lin_x, zero_x, false, {&lin_x_driver, &quad_x_driver, &from_dd});
    }
    out.companion = std::move(comp);
    out.jac = std::move(jac_y);
    out.hess = std::move(hess_y);
    return out;
}

// Quantile stratification of a cloud along its first coordinate: probe points
// for the kernel-flow y-grid together with the particles each one represents.
struct QuantileStratum {
    Vec y;                             // stratum representative (median member)
    std::vector<std::size_t> members;  // particle indices in the stratum
};

inline std::vector<QuantileStratum> quantile_strata(const std::vector<Vec>& cloud,
                                                    std::size_t count) {
    if (count == 0 || cloud.empty()) throw invalid_argument("quantile_strata: empty input");
    count = std::min(count, cloud.size());
    std::vector<std::size_t> order(cloud.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return cloud[a](0) < cloud[b](0); });
    std::vector<QuantileStratum> out(count);
    for (std::size_t q = 0; q < count; ++q) {
        const std::size_t lo = q * cloud.size() / count;
        const std::size_t hi = (q + 1) * cloud.size() / count;
        for (std::size_t j = lo; j < hi; ++j) out[q].members.push_back(order[j]);
        out[q].y = cloud[order[lo + (hi - lo) / 2]];
    }
    return out;
}

// Cloud reduction of a family of kernel flows: contract each stratum's flow
// with the summed direction mass of its members,
//   lift_i(s) ~ (1/N) sum_q flow_q(s, y_q) sum_{j in stratum q} eta_j.
struct LiftedFlow {
    std::vector<std::vector<Vec>> X, P;  // [k][i]
};

inline LiftedFlow lift_kernel_flows(const std::vector<FlowResult>& flows,
                                    const std::vector<QuantileStratum>& strata,
                                    const std::vector<Vec>& eta) {
    if (flows.size() != strata.size())
        throw invalid_argument("lift_kernel_flows: one flow per stratum");
    const std::size_t K1 = flows.front().dX.size(), N = flows.front().dX[0].size();
    const auto n = static_cast<Eigen::Index>(flows.front().dX[0][0].rows());
    const double invN = 1.0 / static_cast<double>(eta.size());
    LiftedFlow out;
    out.X.assign(K1, std::vector<Vec>(N, Vec::Zero(n)));
    out.P = out.X;
    std::vector<Vec> mass(strata.size());
    for (std::size_t q = 0; q < strata.size(); ++q) {
        mass[q] = Vec::Zero(n);
        for (std::size_t j : strata[q].members) mass[q] += eta[j];
    }
    for (std::size_t k = 0; k < K1; ++k)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t q = 0; q < strata.size(); ++q) {
                out.X[k][i] += invN * flows[q].dX[k][i] * mass[q];
                out.P[k][i] += invN * flows[q].dP[k][i] * mass[q];
            }
    return out;
}

}  // namespace mfg
