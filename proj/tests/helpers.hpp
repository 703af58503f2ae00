#pragma once

#include <deconv/model.hpp>
#include <deconv/random.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace testutil {

using deconv::Matrix;
using deconv::Vector;

inline Matrix random_matrix(deconv::Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = 0.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(lo, hi);
    return m;
}

inline Vector random_vector(deconv::Rng& rng, Eigen::Index n, double lo = 0.0, double hi = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
    return v;
}

inline Vector random_simplex(deconv::Rng& rng, Eigen::Index q) {
    Vector v = random_vector(rng, q, 0.05, 1.0);
    return v / v.sum();
}

// Gaussian elimination with partial pivoting on a dense copy.
inline Vector gauss_solve(Matrix a, Vector b) {
    const Eigen::Index n = a.rows();
    for (Eigen::Index k = 0; k < n; ++k) {
        Eigen::Index piv = k;
        for (Eigen::Index i = k + 1; i < n; ++i)
            if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
        a.row(k).swap(a.row(piv));
        std::swap(b(k), b(piv));
        for (Eigen::Index i = k + 1; i < n; ++i) {
            const double f = a(i, k) / a(k, k);
            for (Eigen::Index j = k; j < n; ++j) a(i, j) -= f * a(k, j);
            b(i) -= f * b(k);
        }
    }
    Vector x(n);
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        double s = b(i);
        for (Eigen::Index j = i + 1; j < n; ++j) s -= a(i, j) * x(j);
        x(i) = s / a(i, i);
    }
    return x;
}

inline deconv::Labels labels(const std::string& prefix, std::size_t n) {
    deconv::Labels out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

// Exhaustive knee scan written from the geometric definition: the index of
// maximal perpendicular distance to the chord, first hit from the outer end.
inline std::size_t knee_scan(const std::vector<double>& s, std::size_t outer, std::size_t middle, bool unit) {
    const long step = middle > outer ? 1 : -1;
    const double x0 = static_cast<double>(outer), y0 = s[outer];
    const double x1 = static_cast<double>(middle), y1 = s[middle];
    std::size_t best = outer;
    double best_d = -1.0;
    for (long k = static_cast<long>(outer);; k += step) {
        double d;
        if (unit) {
            const double u = (static_cast<double>(k) - x0) / (x1 - x0);
            const double v = y1 != y0 ? (s[static_cast<std::size_t>(k)] - y0) / (y1 - y0) : 0.0;
            d = y1 != y0 ? std::abs(u - v) / std::sqrt(2.0) : 0.0;
        } else {
            const double num = std::abs((y1 - y0) * static_cast<double>(k) - (x1 - x0) * s[static_cast<std::size_t>(k)] +
                                        x1 * y0 - y1 * x0);
            d = num / std::hypot(x1 - x0, y1 - y0);
        }
        if (d > best_d + 1e-12 * std::max(1.0, best_d)) {
            best_d = d;
            best = static_cast<std::size_t>(k);
        }
        if (static_cast<std::size_t>(k) == middle) break;
    }
    return best;
}

// Random strictly increasing sequence with a slope change at a random point.
inline std::vector<double> two_slope_sequence(deconv::Rng& rng) {
    const std::size_t n = 20 + rng.index(181);
    const std::size_t brk = 3 + rng.index(n - 6);
    const double a = rng.uniform(0.01, 0.2), b = rng.uniform(0.01, 0.2) * (rng.uniform() < 0.5 ? 10.0 : 0.1);
    std::vector<double> out(n);
    double v = rng.uniform(0.0, 4.0);
    for (std::size_t i = 0; i < n; ++i) {
        v += (i < brk ? a : b) * rng.uniform(0.5, 1.5);
        out[i] = v;
    }
    return out;
}

} // namespace testutil
