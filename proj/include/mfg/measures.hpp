#pragma once

// Empirical probability measures on R^n with uniform weights, 2-Wasserstein
// diagnostics (exact sorted matching in 1-D, sliced estimate otherwise) and the
// lifting between linear functional derivatives and Gateaux derivatives of
// measure functionals.

#include <mfg/common.hpp>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

namespace mfg {

class EmpiricalMeasure {
public:
    explicit EmpiricalMeasure(std::vector<Vec> particles) : particles_(std::move(particles)) {
        if (particles_.empty()) throw invalid_argument("EmpiricalMeasure: empty particle cloud");
        dim_ = particles_.front().size();
        for (std::size_t i = 0; i < particles_.size(); ++i) {
            if (particles_[i].size() != dim_)
                throw invalid_argument("EmpiricalMeasure: inconsistent particle dimensions");
            if (!is_finite(particles_[i])) {
                std::ostringstream os;
                os << "EmpiricalMeasure: non-finite particle " << i;
                throw invalid_argument(os.str());
            }
        }
    }

    const std::vector<Vec>& particles() const { return particles_; }
    std::size_t size() const { return particles_.size(); }
    Eigen::Index dim() const { return dim_; }
    const Vec& particle(std::size_t i) const { return particles_[i]; }

private:
    std::vector<Vec> particles_;
    Eigen::Index dim_ = 0;
};

// Mean of the cloud; deterministic pairwise-tree reduction over a canonically
// sorted index stream so the result is bit-identical under particle
// permutations.
inline Vec mean_of(const EmpiricalMeasure& m) {
    const std::size_t n = m.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const Vec& pa = m.particle(a);
        const Vec& pb = m.particle(b);
        for (Eigen::Index c = 0; c < pa.size(); ++c) {
            if (pa(c) != pb(c)) return pa(c) < pb(c);
        }
        return false;
    });
    Vec s = pairwise_sum_vec(n, m.dim(), [&](std::size_t i) { return m.particle(order[i]); });
    return s / static_cast<double>(n);
}

// (1/N) sum |x_i|^2, permutation-invariant bit-for-bit (sorted index stream).
inline double second_moment(const EmpiricalMeasure& m) {
    const std::size_t n = m.size();
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) sq[i] = m.particle(i).squaredNorm();
    std::sort(sq.begin(), sq.end());
    return pairwise_sum(sq) / static_cast<double>(n);
}

// W2(m, delta_0) = sqrt(second moment); analytically forced for a Dirac target.
inline double w2_to_dirac(const EmpiricalMeasure& m) { return std::sqrt(second_moment(m)); }

struct W2Result {
    double value = 0.0;
    bool exact = false;  // true: 1-D sorted matching; false: sliced estimate
    int projections = 0; // number of random projections used in sliced mode
};

namespace detail {

inline double w2_sorted_1d(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const std::size_t na = a.size(), nb = b.size();
    // Uniform clouds of possibly different sizes: match quantile functions on the
    // merged uniform grid (exact for empirical measures).
    const std::size_t n = std::lcm(na, nb);
    if (n <= 4 * std::max(na, nb)) {
        std::vector<double> terms(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double d = a[k * na / n] - b[k * nb / n];
            terms[k] = d * d;
        }
        return std::sqrt(pairwise_sum(terms) / static_cast<double>(n));
    }
    // Large lcm: integrate the squared quantile difference piecewise.
    std::vector<double> cuts;
    cuts.reserve(na + nb + 1);
    for (std::size_t i = 0; i <= na; ++i) cuts.push_back(static_cast<double>(i) / na);
    for (std::size_t j = 0; j <= nb; ++j) cuts.push_back(static_cast<double>(j) / nb);
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    std::vector<double> terms;
    terms.reserve(cuts.size());
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
        const double lo = cuts[k], hi = cuts[k + 1];
        const double mid = 0.5 * (lo + hi);
        const auto ia = std::min(na - 1, static_cast<std::size_t>(mid * na));
        const auto ib = std::min(nb - 1, static_cast<std::size_t>(mid * nb));
        const double d = a[ia] - b[ib];
        terms.push_back((hi - lo) * d * d);
    }
    return std::sqrt(pairwise_sum(terms));
}

}  // namespace detail

// 2-Wasserstein distance between uniform clouds. n = 1: exact sorted matching.
// n > 1: sliced-W2 estimate (diagnostic only) with seeded random projections.
inline W2Result w2_empirical(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                             int projections = 64, std::uint64_t seed = 0x5711CEDu) {
    if (a.dim() != b.dim()) throw invalid_argument("w2_empirical: dimension mismatch");
    W2Result res;
    if (a.dim() == 1) {
        std::vector<double> xa(a.size()), xb(b.size());
        for (std::size_t i = 0; i < a.size(); ++i) xa[i] = a.particle(i)(0);
        for (std::size_t i = 0; i < b.size(); ++i) xb[i] = b.particle(i)(0);
        res.value = detail::w2_sorted_1d(std::move(xa), std::move(xb));
        res.exact = true;
        return res;
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> sq(static_cast<std::size_t>(projections));
    for (int p = 0; p < projections; ++p) {
        Vec dir(a.dim());
        for (Eigen::Index c = 0; c < a.dim(); ++c) dir(c) = nd(rng);
        dir.normalize();
        std::vector<double> xa(a.size()), xb(b.size());
        for (std::size_t i = 0; i < a.size(); ++i) xa[i] = dir.dot(a.particle(i));
        for (std::size_t i = 0; i < b.size(); ++i) xb[i] = dir.dot(b.particle(i));
        const double w = detail::w2_sorted_1d(std::move(xa), std::move(xb));
        sq[static_cast<std::size_t>(p)] = w * w;
    }
    res.value = std::sqrt(pairwise_sum(sq) / projections);
    res.exact = false;
    res.projections = projections;
    return res;
}

// Evaluation rule for independent-copy expectations E~[h(x, x~)]: full O(N^2)
// pairwise by default, subsampled (stride over the copy index) when requested
// or when the cloud exceeds the pairwise threshold.
class IndependentCopyContext {
public:
    explicit IndependentCopyContext(const EmpiricalMeasure& base, std::size_t stride = 0,
                                    std::size_t pairwise_threshold = 4096)
        : base_(base) {
        stride_ = stride;
        if (stride_ == 0) stride_ = base.size() > pairwise_threshold
                                        ? (base.size() + pairwise_threshold - 1) / pairwise_threshold
                                        : 1;
    }

    const EmpiricalMeasure& base() const { return base_; }
    std::size_t stride() const { return stride_; }

    // (1/(N*M)) sum_i sum_{j in strided copy set} h(x_i, x_j)
    template <typename H>
    double pairwise_scalar(H&& h) const {
        const std::size_t n = base_.size();
        std::vector<std::size_t> copies = copy_indices();
        std::vector<double> rows(n);
        std::vector<double> inner(copies.size());
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < copies.size(); ++k)
                inner[k] = h(base_.particle(i), base_.particle(copies[k]));
            rows[i] = pairwise_sum(inner) / static_cast<double>(copies.size());
        }
        return pairwise_sum(rows) / static_cast<double>(n);
    }

    // E~ over the copy variable only, for a fixed outer point x:
    // (1/M) sum_{j in copy set} h(x_j)  (vector-valued)
    template <typename H>
    Vec copy_average_vec(Eigen::Index dim, H&& h) const {
        std::vector<std::size_t> copies = copy_indices();
        return pairwise_sum_vec(copies.size(), dim,
                                [&](std::size_t k) { return h(base_.particle(copies[k]), copies[k]); }) /
               static_cast<double>(copies.size());
    }

    template <typename H>
    Mat copy_average_mat(Eigen::Index rows, Eigen::Index cols, H&& h) const {
        std::vector<std::size_t> copies = copy_indices();
        return pairwise_sum_mat(copies.size(), rows, cols,
                                [&](std::size_t k) { return h(base_.particle(copies[k]), copies[k]); }) /
               static_cast<double>(copies.size());
    }

    std::vector<std::size_t> copy_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t j = 0; j < base_.size(); j += stride_) idx.push_back(j);
        return idx;
    }

private:
    const EmpiricalMeasure& base_;
    std::size_t stride_ = 1;
};

// Lifting identity: the Gateaux derivative of K(X) = k(L(X)) at omega is
// D_y (dk/dnu)(L(X))(X(omega)). Returns that vector field at each particle.
inline std::vector<Vec> gateaux_from_lfd(
    const std::function<Vec(const EmpiricalMeasure&, const Vec&)>& lfd_grad,
    const EmpiricalMeasure& m) {
    std::vector<Vec> out;
    out.reserve(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        Vec v = lfd_grad(m, m.particle(i));
        if (!is_finite(v)) {
            std::ostringstream os;
            os << "gateaux_from_lfd: non-finite evaluation at particle " << i;
            throw model_error(os.str());
        }
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace mfg
