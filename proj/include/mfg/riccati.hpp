#pragma once

// Linear-quadratic reference oracle. Integrates the matrix Riccati ODE
//   pi' = pi S pi - pi A - A' pi - Qx - kappa I - sum_j sigma1^j' pi sigma1^j,
//   pi(T) = Qg,  S = B Qv^{-1} B',
// together with the linear offset eta, the constant offset c and the
// equilibrium mean path when mean-field coupling (Abar, kappa) is present.
// Classical RK4 backward in time, with a Picard loop coupling the forward mean
// path to the backward offsets.

#include <mfg/common.hpp>
#include <mfg/model.hpp>

#include <vector>

namespace mfg {

struct RiccatiSolution {
    TimeGrid grid;
    LQSpec spec;
    Mat S;                     // B Qv^{-1} B'
    std::vector<Mat> pi;       // K+1 nodes
    std::vector<Vec> eta;      // K+1 nodes
    std::vector<Vec> mean;     // equilibrium mean path, K+1 nodes
    std::vector<double> c;     // value offset, K+1 nodes

    double value(std::size_t k, const Vec& x) const {
        return 0.5 * x.dot(pi[k] * x) + eta[k].dot(x) + c[k];
    }
    Vec dx_value(std::size_t k, const Vec& x) const { return pi[k] * x + eta[k]; }
    const Mat& dxx_value(std::size_t k) const { return pi[k]; }
    Vec feedback(std::size_t k, const Vec& x) const {
        return -spec.Qv.ldlt().solve(spec.B.transpose() * (pi[k] * x + eta[k]));
    }

    // HJB residual with the time derivative assembled from the closed-form ODE
    // right-hand sides at node k (consistency of value/feedback assembly).
    double hjb_residual(std::size_t k, const Vec& x) const {
        const int n = spec.n;
        const Mat& P = pi[k];
        const Vec& e = eta[k];
        const Vec& mu = mean[k];
        Mat dpi = P * S * P - P * spec.A - spec.A.transpose() * P - spec.Qx -
                  spec.kappa * Mat::Identity(n, n);
        Vec deta = -(spec.A - S * P).transpose() * e - P * spec.Abar * mu + spec.kappa * mu;
        double trace_q = 0.0, trace_l = 0.0, trace_c = 0.0;
        for (int j = 0; j < n; ++j) {
            const Mat& s1 = spec.sigma1[static_cast<std::size_t>(j)];
            const Vec s0 = spec.sigma0.col(j);
            dpi -= s1.transpose() * P * s1;
            deta -= s1.transpose() * P * s0;
            trace_c += s0.dot(P * s0);
            const Vec sx = s0 + s1 * x;
            trace_q += sx.dot(P * sx);
            (void)trace_l;
        }
        const double dc = -(e.dot(spec.Abar * mu) - 0.5 * e.dot(S * e) +
                            0.5 * spec.kappa * mu.squaredNorm() + 0.5 * trace_c);
        const double dsV = 0.5 * x.dot(dpi * x) + deta.dot(x) + dc;
        const Vec dxV = P * x + e;
        const double ham = dxV.dot(spec.A * x + spec.Abar * mu) - 0.5 * dxV.dot(S * dxV) +
                           0.5 * x.dot(spec.Qx * x) + 0.5 * spec.kappa * (x - mu).squaredNorm();
        return dsV + ham + 0.5 * trace_q;
    }
};

inline RiccatiSolution solve_riccati(const LQSpec& spec_in, const TimeGrid& grid,
                                     const Vec& initial_mean = Vec()) {
    LQSpec spec = spec_in;
    const int n = spec.n;
    auto fix = [&](Mat& m, int r, int cc) {
        if (m.size() == 0) m = Mat::Zero(r, cc);
    };
    fix(spec.A, n, n);
    fix(spec.Abar, n, n);
    fix(spec.B, n, spec.d);
    fix(spec.Qx, n, n);
    fix(spec.Qv, spec.d, spec.d);
    fix(spec.Qg, n, n);
    fix(spec.sigma0, n, n);
    if (spec.sigma1.empty()) spec.sigma1.assign(static_cast<std::size_t>(n), Mat::Zero(n, n));
    Eigen::SelfAdjointEigenSolver<Mat> qv_eig(spec.Qv);
    if (qv_eig.eigenvalues().minCoeff() <= 0.0)
        throw invalid_argument("solve_riccati: Q_v must be positive definite");

    RiccatiSolution sol{grid, spec, Mat(), {}, {}, {}, {}};
    sol.S = spec.B * spec.Qv.ldlt().solve(spec.B.transpose());
    const Mat S = sol.S;
    const std::size_t K = grid.K;
    const double dt = grid.dt;

    auto dpi_rhs = [&](const Mat& P) -> Mat {
        Mat d = P * S * P - P * spec.A - spec.A.transpose() * P - spec.Qx -
                spec.kappa * Mat::Identity(n, n);
        for (int j = 0; j < n; ++j) {
            const Mat& s1 = spec.sigma1[static_cast<std::size_t>(j)];
            if (s1.size() > 0 && s1.norm() > 0.0) d -= s1.transpose() * P * s1;
        }
        return d;
    };

    // Backward RK4 for pi (autonomous): also store half-node values for the
    // coupled stages of eta, c and the mean path.
    std::vector<Mat> pi(K + 1), pi_half(K);
    pi[K] = spec.Qg;
    auto rk4_back_pi = [&](const Mat& start, double h) -> Mat {
        const Mat k1 = dpi_rhs(start);
        const Mat k2 = dpi_rhs(start - 0.5 * h * k1);
        const Mat k3 = dpi_rhs(start - 0.5 * h * k2);
        const Mat k4 = dpi_rhs(start - h * k3);
        return start - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    };
    for (std::size_t k = K; k-- > 0;) {
        pi_half[k] = rk4_back_pi(pi[k + 1], 0.5 * dt);
        pi[k] = rk4_back_pi(pi[k + 1], dt);
        if (!is_finite(pi[k]) || pi[k].norm() > 1e8)
            throw solver_error("solve_riccati: Riccati blow-up detected");
    }
    sol.pi = pi;

    const bool coupled = spec.Abar.norm() > 0.0 || spec.kappa != 0.0;
    Vec mu0 = initial_mean.size() == n ? initial_mean : Vec(Vec::Zero(n));

    std::vector<Vec> mu(K + 1, mu0), mu_half(K, mu0);
    std::vector<Vec> eta(K + 1, Vec::Zero(n)), eta_half(K, Vec::Zero(n));
    std::vector<double> c(K + 1, 0.0);

    auto deta_rhs = [&](const Mat& P, const Vec& e, const Vec& m) -> Vec {
        Vec d = -(spec.A - S * P).transpose() * e - P * spec.Abar * m + spec.kappa * m;
        for (int j = 0; j < n; ++j) {
            const Mat& s1 = spec.sigma1[static_cast<std::size_t>(j)];
            if (s1.size() > 0 && s1.norm() > 0.0) d -= s1.transpose() * P * spec.sigma0.col(j);
        }
        return d;
    };
    auto dc_rhs = [&](const Mat& P, const Vec& e, const Vec& m) -> double {
        double trace_c = 0.0;
        for (int j = 0; j < n; ++j) trace_c += spec.sigma0.col(j).dot(P * spec.sigma0.col(j));
        return -(e.dot(spec.Abar * m) - 0.5 * e.dot(S * e) + 0.5 * spec.kappa * m.squaredNorm() +
                 0.5 * trace_c);
    };
    auto dmu_rhs = [&](const Mat& P, const Vec& e, const Vec& m) -> Vec {
        return (spec.A + spec.Abar) * m - S * (P * m + e);
    };

    const int max_picard = coupled ? 400 : 1;
    for (int pic = 0; pic < max_picard; ++pic) {
        // backward sweep for eta and c (RK4; quarter-step inputs by linear
        // interpolation of the stored half/node values)
        eta[K] = Vec::Zero(n);
        c[K] = 0.0;
        for (std::size_t k = K; k-- > 0;) {
            const Mat& P1 = pi[k + 1];
            const Mat& Ph = pi_half[k];
            const Mat& P0 = pi[k];
            const Vec& m1 = mu[k + 1];
            const Vec& mh = mu_half[k];
            const Vec& m0 = mu[k];
            {
                // half step to the midpoint (store eta_half)
                const Mat Pq = 0.5 * (P1 + Ph);
                const Vec mq = 0.5 * (m1 + mh);
                const Vec k1 = deta_rhs(P1, eta[k + 1], m1);
                const Vec k2 = deta_rhs(Pq, eta[k + 1] - 0.25 * dt * k1, mq);
                const Vec k3 = deta_rhs(Pq, eta[k + 1] - 0.25 * dt * k2, mq);
                const Vec k4 = deta_rhs(Ph, eta[k + 1] - 0.5 * dt * k3, mh);
                eta_half[k] = eta[k + 1] - (dt / 12.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            {
                const Vec k1 = deta_rhs(P1, eta[k + 1], m1);
                const Vec k2 = deta_rhs(Ph, eta[k + 1] - 0.5 * dt * k1, mh);
                const Vec k3 = deta_rhs(Ph, eta[k + 1] - 0.5 * dt * k2, mh);
                const Vec k4 = deta_rhs(P0, eta[k + 1] - dt * k3, m0);
                eta[k] = eta[k + 1] - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            {
                const double k1 = dc_rhs(P1, eta[k + 1], m1);
                const double k2 = dc_rhs(Ph, eta_half[k], mh);
                const double k3 = k2;
                const double k4 = dc_rhs(P0, eta[k], m0);
                c[k] = c[k + 1] - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        if (!coupled) break;
        // forward sweep for the mean path
        double gap = 0.0;
        std::vector<Vec> mu_new(K + 1), mu_half_new(K);
        mu_new[0] = mu0;
        for (std::size_t k = 0; k < K; ++k) {
            const Vec k1 = dmu_rhs(pi[k], eta[k], mu_new[k]);
            const Vec k2 = dmu_rhs(pi_half[k], eta_half[k], mu_new[k] + 0.5 * dt * k1);
            const Vec k3 = dmu_rhs(pi_half[k], eta_half[k], mu_new[k] + 0.5 * dt * k2);
            const Vec k4 = dmu_rhs(pi[k + 1], eta[k + 1], mu_new[k] + dt * k3);
            // midpoint value used only as an interpolation node for the next
            // Picard sweep (second-order accuracy suffices there)
            mu_half_new[k] = mu_new[k] + (dt / 12.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            mu_new[k + 1] = mu_new[k] + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        for (std::size_t k = 0; k <= K; ++k) {
            gap = std::max(gap, (mu_new[k] - mu[k]).norm());
            mu[k] = mu_new[k];
            if (k < K) mu_half[k] = mu_half_new[k];
        }
        if (gap < 1e-13) break;
        if (pic == max_picard - 1)
            throw solver_error("solve_riccati: mean-path Picard iteration did not converge");
    }

    sol.eta = eta;
    sol.mean = mu;
    sol.c = c;
    return sol;
}

}  // namespace mfg
