#pragma once

#include "error.hpp"

#include <cmath>
#include <string>

/**
 * @file loss.hpp
 * @brief Per-residual loss functions.
 */

namespace deconv {

enum class LossType {
    squared_l2,
    absolute_l1,
    huber,           ///< parameter is the half-length M
    eps_insensitive, ///< parameter is the tube half-width epsilon ("hinge")
};

struct LossKind {
    LossType type = LossType::squared_l2;
    double param = 0.0;

    static LossKind squared() { return {LossType::squared_l2, 0.0}; }
    static LossKind absolute() { return {LossType::absolute_l1, 0.0}; }

    static LossKind huber(double m) {
        if (!(m > 0) || !std::isfinite(m)) {
            throw UsageError("Huber half-length M must be positive");
        }
        return {LossType::huber, m};
    }

    static LossKind eps_insensitive(double eps) {
        if (!(eps >= 0) || !std::isfinite(eps)) {
            throw UsageError("epsilon-insensitive margin must be non-negative");
        }
        return {LossType::eps_insensitive, eps};
    }

    bool has_param() const { return type == LossType::huber || type == LossType::eps_insensitive; }

    LossKind with_param(double p) const {
        switch (type) {
        case LossType::huber:
            return huber(p);
        case LossType::eps_insensitive:
            return eps_insensitive(p);
        default:
            return *this;
        }
    }

    bool operator==(const LossKind&) const = default;
};

inline std::string loss_name(LossType t) {
    switch (t) {
    case LossType::squared_l2:
        return "l2";
    case LossType::absolute_l1:
        return "l1";
    case LossType::huber:
        return "huber";
    case LossType::eps_insensitive:
        return "hinge";
    }
    return "?";
}

inline LossType parse_loss_type(const std::string& s) {
    if (s == "l2") return LossType::squared_l2;
    if (s == "l1") return LossType::absolute_l1;
    if (s == "huber") return LossType::huber;
    if (s == "hinge" || s == "eps" || s == "eps_insensitive") return LossType::eps_insensitive;
    throw UsageError("unknown loss '" + s + "' (expected l2, l1, huber or hinge)");
}

inline double loss_value(const LossKind& kind, double r) {
    const double a = std::abs(r);
    switch (kind.type) {
    case LossType::squared_l2:
        return r * r;
    case LossType::absolute_l1:
        return a;
    case LossType::huber:
        return a <= kind.param ? r * r : kind.param * (2.0 * a - kind.param);
    case LossType::eps_insensitive:
        return a <= kind.param ? 0.0 : a - kind.param;
    }
    return 0.0;
}

/// Value and first two derivatives of a per-residual term.
struct LossTerms {
    double value = 0.0;
    double d1 = 0.0;
    double d2 = 0.0;
};

/**
 * @brief Continuously differentiable surrogate used inside the optimizer.
 *
 * L2 and Huber are returned exactly. The kinks of L1 and the epsilon-insensitive
 * loss are replaced by a quadratic of width `gamma`; the surrogate lies below
 * the true loss by at most gamma/2 per residual.
 */
inline LossTerms smoothed_loss(const LossKind& kind, double r, double gamma) {
    const double a = std::abs(r);
    const double s = r < 0 ? -1.0 : 1.0;
    switch (kind.type) {
    case LossType::squared_l2:
        return {r * r, 2.0 * r, 2.0};
    case LossType::huber: {
        const double m = kind.param;
        if (a <= m) {
            return {r * r, 2.0 * r, 2.0};
        }
        return {m * (2.0 * a - m), 2.0 * m * s, 0.0};
    }
    case LossType::absolute_l1:
    case LossType::eps_insensitive: {
        const double eps = kind.type == LossType::absolute_l1 ? 0.0 : kind.param;
        const double u = a - eps;
        if (u < 0) {
            return {0.0, 0.0, 0.0};
        }
        if (u <= gamma) {
            return {u * u / (2.0 * gamma), s * u / gamma, 1.0 / gamma};
        }
        return {u - 0.5 * gamma, s, 0.0};
    }
    }
    return {};
}

/// True when the optimizer needs a smoothing continuation for this loss.
inline bool loss_is_nonsmooth(const LossKind& kind) {
    return kind.type == LossType::absolute_l1 || kind.type == LossType::eps_insensitive;
}

} // namespace deconv
