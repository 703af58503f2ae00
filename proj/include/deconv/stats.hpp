#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace deconv {

struct SampleMoments {
    double mean = 0.0;
    double variance = 0.0; ///< unbiased (n - 1 denominator)
    std::size_t n = 0;
};

inline SampleMoments moments(std::span<const double> x) {
    SampleMoments m;
    m.n = x.size();
    if (m.n == 0) {
        return m;
    }
    for (double v : x) {
        m.mean += v;
    }
    m.mean /= static_cast<double>(m.n);
    if (m.n > 1) {
        for (double v : x) {
            m.variance += (v - m.mean) * (v - m.mean);
        }
        m.variance /= static_cast<double>(m.n - 1);
    }
    return m;
}

struct TTestResult {
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0; ///< two-sided
};

/**
 * Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
 * When both variances are zero the test degenerates: equal means give p = 1,
 * different means p = 0.
 */
inline TTestResult welch_t_test(const SampleMoments& a, const SampleMoments& b) {
    TTestResult r;
    const double va = a.variance / static_cast<double>(a.n);
    const double vb = b.variance / static_cast<double>(b.n);
    const double se2 = va + vb;
    const double diff = a.mean - b.mean;
    if (!(se2 > 0)) {
        if (diff == 0) {
            return r;
        }
        r.t = diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.df = static_cast<double>(a.n + b.n - 2);
        r.p_value = 0.0;
        return r;
    }
    r.t = diff / std::sqrt(se2);
    const double denom = (a.n > 1 ? va * va / static_cast<double>(a.n - 1) : 0.0) +
                         (b.n > 1 ? vb * vb / static_cast<double>(b.n - 1) : 0.0);
    r.df = se2 * se2 / denom;
    if (r.t == 0) {
        r.p_value = 1.0;
        return r;
    }
    boost::math::students_t dist(r.df);
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    if (r.p_value > 1.0) {
        r.p_value = 1.0;
    }
    return r;
}

/// Two-sided standard-normal tail probability of |z|.
inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

inline double median(std::vector<double> v) {
    if (v.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) {
        return upper;
    }
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

} // namespace deconv
