#pragma once

// Lagrangian L(s,x,m,v,p) = p.b + f, the Hamiltonian minimizer v_hat solving
// D_vb' p + D_vf = 0 (Newton with damped-gradient fallback), and the envelope
// derivatives D_pH = b(.,v_hat), D_xH = D_xb(.,v_hat)' p + D_xf(.,v_hat).

#include <mfg/common.hpp>
#include <mfg/model.hpp>

#include <optional>
#include <sstream>

namespace mfg {

struct MinimizerResult {
    Vec v_hat;
    int iterations = 0;
    double residual = std::numeric_limits<double>::infinity();  // |D_vL|
    bool converged = false;
};

inline double lagrangian(const CoefficientModel& model, double s, const Vec& x,
                         const MeasureCtx& m, const Vec& v, const Vec& p) {
    const double val = p.dot(model.b(s, x, m, v)) + model.f(s, x, m, v);
    if (!is_finite(val)) {
        std::ostringstream os;
        os << "lagrangian: non-finite value at s=" << s;
        throw model_error(os.str());
    }
    return val;
}

// Gradient of L in v: D_vb(s,x,m,v)' p + D_vf(s,x,m,v).
inline Vec dv_lagrangian(const CoefficientModel& model, double s, const Vec& x,
                         const MeasureCtx& m, const Vec& v, const Vec& p) {
    return model.Dvb(s, x, m, v).transpose() * p + model.Dvf(s, x, m, v);
}

// Hessian of L in v: sum_i p_i D_vv b_i + D_vv f.
inline Mat dvv_lagrangian(const CoefficientModel& model, double s, const Vec& x,
                          const MeasureCtx& m, const Vec& v, const Vec& p) {
    Mat h = model.Dvvf(s, x, m, v);
    auto dvvb = model.Dvvb(s, x, m, v);
    for (int i = 0; i < model.n; ++i) h += p(i) * dvvb[static_cast<std::size_t>(i)];
    return h;
}

inline MinimizerResult minimize_lagrangian(const CoefficientModel& model, double s, const Vec& x,
                                           const MeasureCtx& m, const Vec& p, double tol = 1e-10,
                                           int max_iters = 50,
                                           std::optional<Vec> warm_start = std::nullopt) {
    MinimizerResult res;
    Vec v = warm_start ? *warm_start : Vec(Vec::Zero(model.d));
    for (int it = 0; it < max_iters; ++it) {
        Vec grad = dv_lagrangian(model, s, x, m, v, p);
        if (!is_finite(grad)) throw model_error("minimize_lagrangian: non-finite gradient");
        res.residual = grad.norm();
        res.iterations = it;
        if (res.residual <= tol) {
            res.v_hat = v;
            res.converged = true;
            return res;
        }
        Mat hess = dvv_lagrangian(model, s, x, m, v, p);
        Eigen::SelfAdjointEigenSolver<Mat> eig(hess);
        if (eig.eigenvalues().minCoeff() < 1e-10) {
            // Outside the certified convexity region: damped gradient step with a
            // simple backtracking line search on L.
            double step = 1.0;
            const double base = lagrangian(model, s, x, m, v, p);
            Vec cand = v - step * grad;
            while (step > 1e-12 && lagrangian(model, s, x, m, cand, p) > base - 0.25 * step * grad.squaredNorm()) {
                step *= 0.5;
                cand = v - step * grad;
            }
            v = cand;
        } else {
            v -= hess.ldlt().solve(grad);
        }
    }
    Vec grad = dv_lagrangian(model, s, x, m, v, p);
    res.residual = grad.norm();
    res.iterations = max_iters;
    res.v_hat = v;
    res.converged = res.residual <= tol;
    if (!res.converged) {
        std::ostringstream os;
        os << "minimize_lagrangian: no convergence after " << max_iters
           << " iterations, residual " << res.residual;
        throw solver_error(os.str());
    }
    return res;
}

inline Vec dpH(const CoefficientModel& model, double s, const Vec& x, const MeasureCtx& m,
               const Vec& p, double tol = 1e-10, std::optional<Vec> warm_start = std::nullopt) {
    auto r = minimize_lagrangian(model, s, x, m, p, tol, 50, std::move(warm_start));
    return model.b(s, x, m, r.v_hat);
}

inline Vec dxH(const CoefficientModel& model, double s, const Vec& x, const MeasureCtx& m,
               const Vec& p, double tol = 1e-10, std::optional<Vec> warm_start = std::nullopt) {
    auto r = minimize_lagrangian(model, s, x, m, p, tol, 50, std::move(warm_start));
    return model.Dxb(s, x, m, r.v_hat).transpose() * p + model.Dxf(s, x, m, r.v_hat);
}

}  // namespace mfg
