#pragma once

// Global polynomial least-squares regression used for the conditional
// expectations of the backward passes. Exact for linear-quadratic models,
// deterministic (fixed particle order, dense normal equations, LDLT), and
// algorithmically differentiable: the directional derivative of the fitted
// coefficients under perturbations of both the design points and the targets
// is available in closed form, which the flow systems rely on.

#include <mfg/common.hpp>

#include <vector>

namespace mfg {

// Monomial basis of total degree <= degree on R^dim, graded lexicographic order
// (constant first). Degree 0 is the plain-average fallback for degenerate
// clouds (all particles at one point), where the conditional expectation is the
// mean.
struct PolyBasis {
    int dim = 1;
    int degree = 2;
    std::vector<std::vector<int>> exps;  // multi-indices

    PolyBasis() = default;
    PolyBasis(int dim_, int degree_) : dim(dim_), degree(degree_) {
        std::vector<int> cur(static_cast<std::size_t>(dim), 0);
        for (int total = 0; total <= degree; ++total) enumerate(cur, 0, total);
    }

    std::size_t size() const { return exps.size(); }

    Vec eval(const Vec& x) const {
        Vec out(static_cast<Eigen::Index>(exps.size()));
        for (std::size_t b = 0; b < exps.size(); ++b) {
            double t = 1.0;
            for (int c = 0; c < dim; ++c) t *= ipow(x(c), exps[b][static_cast<std::size_t>(c)]);
            out(static_cast<Eigen::Index>(b)) = t;
        }
        return out;
    }

    // grad(x)(b, c) = d basis_b / d x_c
    Mat grad(const Vec& x) const {
        Mat out(static_cast<Eigen::Index>(exps.size()), dim);
        for (std::size_t b = 0; b < exps.size(); ++b) {
            for (int c = 0; c < dim; ++c) {
                const int e = exps[b][static_cast<std::size_t>(c)];
                if (e == 0) {
                    out(static_cast<Eigen::Index>(b), c) = 0.0;
                    continue;
                }
                double t = static_cast<double>(e) * ipow(x(c), e - 1);
                for (int c2 = 0; c2 < dim; ++c2)
                    if (c2 != c) t *= ipow(x(c2), exps[b][static_cast<std::size_t>(c2)]);
                out(static_cast<Eigen::Index>(b), c) = t;
            }
        }
        return out;
    }

    // hess(x)[c1](b, c2) = d^2 basis_b / d x_{c1} d x_{c2}
    std::vector<Mat> hess(const Vec& x) const {
        std::vector<Mat> out(static_cast<std::size_t>(dim));
        for (int c1 = 0; c1 < dim; ++c1) {
            Mat h(static_cast<Eigen::Index>(exps.size()), dim);
            for (std::size_t b = 0; b < exps.size(); ++b) {
                for (int c2 = 0; c2 < dim; ++c2) {
                    double t = 1.0;
                    bool zero = false;
                    for (int c = 0; c < dim; ++c) {
                        int e = exps[b][static_cast<std::size_t>(c)];
                        if (c == c1) {
                            if (e == 0) { zero = true; break; }
                            t *= static_cast<double>(e);
                            --e;
                        }
                        if (c == c2) {
                            if (e == 0) { zero = true; break; }
                            t *= static_cast<double>(e);
                            --e;
                        }
                        t *= ipow(x(c), e);
                    }
                    h(static_cast<Eigen::Index>(b), c2) = zero ? 0.0 : t;
                }
            }
            out[static_cast<std::size_t>(c1)] = h;
        }
        return out;
    }

private:
    static double ipow(double x, int e) {
        double r = 1.0;
        for (int i = 0; i < e; ++i) r *= x;
        return r;
    }
    void enumerate(std::vector<int>& cur, int pos, int remaining) {
        if (pos == dim - 1) {
            cur[static_cast<std::size_t>(pos)] = remaining;
            exps.push_back(cur);
            return;
        }
        for (int e = remaining; e >= 0; --e) {
            cur[static_cast<std::size_t>(pos)] = e;
            enumerate(cur, pos + 1, remaining - e);
        }
        cur[static_cast<std::size_t>(pos)] = 0;
    }
};

// Least-squares fit of (possibly vector-valued) targets on the basis evaluated
// at a particle cloud. The basis degree is reduced automatically when the
// normal matrix is numerically rank-deficient (e.g. all particles coincide),
// and the degree actually used is recorded so downstream passes (flows, the
// frozen-control consistency check) can reuse the identical operator.
class NodeRegression {
public:
    NodeRegression() = default;

    // points: N particle positions; requested_degree: basis degree cap.
    NodeRegression(const std::vector<Vec>& points, int requested_degree) {
        const int dim = static_cast<int>(points.front().size());
        for (int deg = requested_degree; deg >= 0; --deg) {
            basis_ = PolyBasis(dim, deg);
            const auto nb = static_cast<Eigen::Index>(basis_.size());
            Mat G = Mat::Zero(nb, nb);
            A_.resize(static_cast<Eigen::Index>(points.size()), nb);
            for (std::size_t i = 0; i < points.size(); ++i)
                A_.row(static_cast<Eigen::Index>(i)) = basis_.eval(points[i]).transpose();
            G = A_.transpose() * A_;
            Eigen::SelfAdjointEigenSolver<Mat> eig(G);
            const double lmax = eig.eigenvalues().maxCoeff();
            const double lmin = eig.eigenvalues().minCoeff();
            if (deg == 0 || (lmin > 0.0 && lmin >= 1e-10 * lmax)) {
                G_ = G;
                ldlt_.compute(G);
                degree_used_ = deg;
                return;
            }
        }
    }

    int degree_used() const { return degree_used_; }
    const PolyBasis& basis() const { return basis_; }
    const Mat& design() const { return A_; }

    // coefficients (nb x m) for targets Y (N x m)
    Mat fit(const Mat& Y) const { return ldlt_.solve(A_.transpose() * Y); }

    // fitted values at the design points
    Mat predict(const Mat& coef) const { return A_ * coef; }

    double predict_scalar(const Vec& x, const Vec& coef) const { return basis_.eval(x).dot(coef); }
    Vec predict_vec(const Vec& x, const Mat& coef) const {
        return coef.transpose() * basis_.eval(x);
    }

    // Directional derivative of the fitted coefficients:
    //   d coef = G^{-1} [ dA' (Y - A coef) + A' (dY - dA coef) ],
    // where dA(i,:) = (grad basis(x_i) . dx_i)'. Inputs: coef and residual
    // R = Y - A coef from the base fit, dA and dY the perturbations.
    Mat dfit(const Mat& coef, const Mat& R, const Mat& dA, const Mat& dY) const {
        return ldlt_.solve(dA.transpose() * R + A_.transpose() * (dY - dA * coef));
    }

private:
    PolyBasis basis_;
    Mat A_;
    Mat G_;
    Eigen::LDLT<Mat> ldlt_;
    int degree_used_ = 0;
};

}  // namespace mfg
