#pragma once

// Shared aliases, error types and deterministic reductions used across the
// library. All cross-particle reductions go through pairwise_sum so results are
// reproducible bit-for-bit for a given input order.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfg {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown when inputs violate documented preconditions.
using std::invalid_argument;

// Model evaluation produced a non-finite value, solver diverged, etc.
struct model_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct solver_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Requested operation needs callbacks the model does not provide.
struct capability_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline bool is_finite(double x) { return std::isfinite(x); }

inline bool is_finite(const Vec& v) { return v.allFinite(); }

inline bool is_finite(const Mat& m) { return m.allFinite(); }

// Index-ascending pairwise-tree summation. Deterministic for a fixed input
// order and considerably more accurate than naive left-to-right accumulation.
inline double pairwise_sum(std::span<const double> vals) {
    const std::size_t n = vals.size();
    if (n == 0) return 0.0;
    if (n <= 8) {
        double acc = 0.0;
        for (double v : vals) acc += v;
        return acc;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(vals.subspan(0, half)) + pairwise_sum(vals.subspan(half));
}

inline double pairwise_sum(const std::vector<double>& vals) {
    return pairwise_sum(std::span<const double>(vals));
}

// Pairwise-tree sum of f(i) for i in [0, n).
template <typename F>
double pairwise_sum_indexed(std::size_t n, F&& f) {
    if (n == 0) return 0.0;
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = f(i);
    return pairwise_sum(vals);
}

// Component-wise pairwise-tree sum of vector-valued terms.
template <typename F>
Vec pairwise_sum_vec(std::size_t n, Eigen::Index dim, F&& f) {
    Vec out(dim);
    std::vector<std::vector<double>> comp(static_cast<std::size_t>(dim), std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        Vec v = f(i);
        for (Eigen::Index c = 0; c < dim; ++c) comp[static_cast<std::size_t>(c)][i] = v(c);
    }
    for (Eigen::Index c = 0; c < dim; ++c) out(c) = pairwise_sum(comp[static_cast<std::size_t>(c)]);
    return out;
}

// Component-wise pairwise-tree sum of matrix-valued terms.
template <typename F>
Mat pairwise_sum_mat(std::size_t n, Eigen::Index rows, Eigen::Index cols, F&& f) {
    Mat out(rows, cols);
    std::vector<Mat> terms(n);
    for (std::size_t i = 0; i < n; ++i) terms[i] = f(i);
    std::vector<double> comp(n);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
            for (std::size_t i = 0; i < n; ++i) comp[i] = terms[i](r, c);
            out(r, c) = pairwise_sum(comp);
        }
    return out;
}

}  // namespace mfg
