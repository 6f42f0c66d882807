#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <limits>
#include <vector>

#include "ionflux/errors.hpp"

namespace ionflux {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// f(t, y, dy) writes dy/dt into dy (already sized like y).
template <class F>
concept VectorField = requires(F& f, double t, const VectorXd& y, VectorXd& dy) { f(t, y, dy); };

struct IntegrationConfig {
    double rtol = 1e-6;
    double atol = 1e-8;
    double initial_step = 0.0;  // 0 selects the step automatically
    long max_steps = 100000;
    bool dense_output = true;   // false clips steps to land on every target
    Eigen::Index error_components = 0;  // leading components in the error norm; 0 = all
    Eigen::Index active_components = 0; // leading components the field reads; the rest are
                                        // quadratures that only need the final combination; 0 = all

    void validate() const {
        if (!(rtol > 0.0) || !(atol > 0.0)) throw InvalidInputError("integration tolerances must be positive");
        if (max_steps < 1) throw InvalidInputError("max_steps must be positive");
    }
};

struct IntegrationStats {
    long accepted = 0;
    long rejected = 0;
    long evaluations = 0;
};

namespace dp45 {

inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
inline constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                        a76 = 11.0 / 84;
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                        e6 = 22.0 / 525, e7 = -1.0 / 40;
inline constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                        d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                        d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;

}  // namespace dp45

// One Dormand-Prince step. k[0] must hold f(t, y) on entry; on exit k[6]
// holds f(t + h, y_new) (first-same-as-last) and err the embedded estimate.
// Stage inputs and err are formed for the leading m components only (m <= 0
// means all); the field must not read the others.
template <VectorField F>
void dopri_step(F& f, double t, const VectorXd& y, double h, std::array<VectorXd, 7>& k, VectorXd& y_new,
                VectorXd& err, VectorXd& tmp, Eigen::Index m = 0) {
    using namespace dp45;
    if (m <= 0 || m > y.size()) m = y.size();
    const auto Y = y.head(m);
    auto T = tmp.head(m);
    T = Y + h * (a21 * k[0].head(m));
    f(t + c2 * h, tmp, k[1]);
    T = Y + h * (a31 * k[0].head(m) + a32 * k[1].head(m));
    f(t + c3 * h, tmp, k[2]);
    T = Y + h * (a41 * k[0].head(m) + a42 * k[1].head(m) + a43 * k[2].head(m));
    f(t + c4 * h, tmp, k[3]);
    T = Y + h * (a51 * k[0].head(m) + a52 * k[1].head(m) + a53 * k[2].head(m) + a54 * k[3].head(m));
    f(t + c5 * h, tmp, k[4]);
    T = Y + h * (a61 * k[0].head(m) + a62 * k[1].head(m) + a63 * k[2].head(m) + a64 * k[3].head(m) +
                 a65 * k[4].head(m));
    f(t + h, tmp, k[5]);
    y_new = y + h * (a71 * k[0] + a73 * k[2] + a74 * k[3] + a75 * k[4] + a76 * k[5]);
    f(t + h, y_new, k[6]);
    err.head(m) = h * (e1 * k[0].head(m) + e3 * k[2].head(m) + e4 * k[3].head(m) + e5 * k[4].head(m) +
                       e6 * k[5].head(m) + e7 * k[6].head(m));
    if (m < err.size()) err.tail(err.size() - m).setZero();
}

// Quartic continuous extension of an accepted step from (t, y) to (t + h, y1).
struct DenseStep {
    std::array<VectorXd, 5> r;
    double t0 = 0.0;
    double h = 0.0;

    void build(const VectorXd& y0, const VectorXd& y1, double t, double step, const std::array<VectorXd, 7>& k) {
        using namespace dp45;
        t0 = t;
        h = step;
        r[0] = y0;
        r[1] = y1 - y0;
        r[2] = h * k[0] - r[1];
        r[3] = r[1] - h * k[6] - r[2];
        r[4] = h * (d1 * k[0] + d3 * k[2] + d4 * k[3] + d5 * k[4] + d6 * k[5] + d7 * k[6]);
    }
    VectorXd operator()(double t) const {
        const double s = (t - t0) / h;
        const double s1 = 1.0 - s;
        return r[0] + s * (r[1] + s1 * (r[2] + s * (r[3] + s1 * r[4])));
    }
};

namespace detail {

inline double rms_norm(const VectorXd& e, const VectorXd& y0, const VectorXd& y1, double rtol, double atol,
                       Eigen::Index m) {
    const Eigen::Index n = (m > 0 && m < e.size()) ? m : e.size();
    if (n == 0) return 0.0;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double sc = atol + rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
        const double v = e[i] / sc;
        sum += v * v;
    }
    return std::sqrt(sum / static_cast<double>(n));
}

inline std::vector<double> to_std(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace detail

// Adaptive DOPRI 5(4) with PI step control, advanced one accepted step at a
// time. Buffers and the step size persist across reset() calls, so a sequence
// of short segments (for instance between adjoint jumps) avoids reallocation
// and repeated step-size selection.
template <VectorField F>
class DopriStepper {
public:
    DopriStepper(F& f, const IntegrationConfig& cfg, IntegrationStats& stats) : f_(f), cfg_(cfg), st_(stats) {
        cfg_.validate();
    }

    // Starts a segment at (t, y) heading towards t_end. The previous step size
    // is reused when one exists.
    void reset(double t, const VectorXd& y, double t_end) {
        const Eigen::Index n = y.size();
        if (y_.size() != n) {
            for (auto& v : k_) v.resize(n);
            y_new_.resize(n);
            err_.resize(n);
            tmp_.resize(n);
            h_ = 0.0;
        }
        y_ = y;
        t_ = t;
        dir_ = t_end >= t ? 1.0 : -1.0;
        steps_ = 0;
        last_rejected_ = false;
        f_(t_, y_, k_[0]);
        ++st_.evaluations;
        const double span = std::abs(t_end - t);
        if (h_ == 0.0) h_ = cfg_.initial_step != 0.0 ? std::abs(cfg_.initial_step) : initial_step(span);
        h_ = std::min(h_, span);
    }

    // Takes one accepted step that does not pass t_stop; returns its size.
    double step(double t_stop) {
        constexpr double safe = 0.9, fac_min = 0.2, fac_max = 10.0, beta = 0.04;
        const double expo = 0.2 - beta * 0.75;
        const Eigen::Index m = cfg_.error_components;
        for (;;) {
            if (++steps_ > cfg_.max_steps)
                throw IntegrationFailureError("maximum number of steps exceeded", t_, detail::to_std(y_));
            if (h_ < 1e-14 * std::max(1.0, std::abs(t_)))
                throw IntegrationFailureError("step size underflow", t_, detail::to_std(y_));
            const double remaining = dir_ * (t_stop - t_);
            const double step = std::min(h_, remaining);
            const bool to_stop = step >= remaining;
            dopri_step(f_, t_, y_, dir_ * step, k_, y_new_, err_, tmp_, cfg_.active_components);
            st_.evaluations += 6;
            const double e = detail::rms_norm(err_, y_, y_new_, cfg_.rtol, cfg_.atol, m);
            if (!std::isfinite(e) || !y_new_.head(m > 0 ? m : y_new_.size()).allFinite()) {
                ++st_.rejected;
                h_ = step * fac_min;
                last_rejected_ = true;
                continue;
            }
            const double fac11 = std::pow(std::max(e, 1e-300), expo);
            if (e > 1.0) {
                ++st_.rejected;
                h_ = step / std::min(1.0 / fac_min, fac11 / safe);
                last_rejected_ = true;
                continue;
            }
            double fac = fac11 / std::pow(fac_old_, beta);
            fac = std::clamp(fac / safe, 1.0 / fac_max, 1.0 / fac_min);
            double h_new = step / fac;
            if (last_rejected_) h_new = std::min(h_new, step);
            fac_old_ = std::max(e, 1e-4);
            ++st_.accepted;
            if (cfg_.dense_output) dense_.build(y_, y_new_, t_, dir_ * step, k_);
            y_.swap(y_new_);
            std::swap(k_[0], k_[6]);
            t_ = to_stop ? t_stop : t_ + dir_ * step;
            // A step clipped to t_stop says nothing about the attainable size.
            h_ = to_stop && step < h_ ? std::max(h_, h_new) : h_new;
            last_rejected_ = false;
            return step;
        }
    }

    double t() const { return t_; }
    const VectorXd& y() const { return y_; }
    const DenseStep& dense() const { return dense_; }

private:
    double initial_step(double span) {
        const Eigen::Index m = cfg_.error_components;
        const double d0 = detail::rms_norm(y_, y_, y_, cfg_.rtol, cfg_.atol, m);
        const double d1 = detail::rms_norm(k_[0], y_, y_, cfg_.rtol, cfg_.atol, m);
        double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        h0 = std::min(h0, span);
        tmp_ = y_ + dir_ * h0 * k_[0];
        f_(t_ + dir_ * h0, tmp_, k_[1]);
        ++st_.evaluations;
        const double d2 = detail::rms_norm(k_[1] - k_[0], y_, y_, cfg_.rtol, cfg_.atol, m) / h0;
        const double dm = std::max(d1, d2);
        const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
        return std::min({100.0 * h0, h1, span});
    }

    F& f_;
    IntegrationConfig cfg_;
    IntegrationStats& st_;
    std::array<VectorXd, 7> k_;
    VectorXd y_, y_new_, err_, tmp_;
    DenseStep dense_;
    double t_ = 0.0, h_ = 0.0, dir_ = 1.0, fac_old_ = 1e-4;
    long steps_ = 0;
    bool last_rejected_ = false;
};

// Adaptive DOPRI 5(4). targets must be monotone in the direction of
// integration starting from t0 (backward integration allowed); row i of the
// result is y(targets[i]).
template <VectorField F>
MatrixXd integrate_dopri(F& f, double t0, const VectorXd& y0, const std::vector<double>& targets,
                         const IntegrationConfig& cfg = {}, IntegrationStats* stats = nullptr) {
    cfg.validate();
    MatrixXd out(static_cast<Eigen::Index>(targets.size()), y0.size());
    if (targets.empty()) return out;
    const double t_end = targets.back();
    const double dir = t_end >= t0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double prev = i == 0 ? t0 : targets[i - 1];
        if (!std::isfinite(targets[i]) || dir * (targets[i] - prev) < 0.0)
            throw InvalidInputError("integration targets must be monotone in the integration direction");
    }
    std::size_t next = 0;
    while (next < targets.size() && targets[next] == t0) out.row(static_cast<Eigen::Index>(next++)) = y0.transpose();
    if (next == targets.size()) return out;

    IntegrationStats local;
    DopriStepper<F> stepper(f, cfg, stats ? *stats : local);
    stepper.reset(t0, y0, t_end);
    while (next < targets.size()) {
        stepper.step(cfg.dense_output ? t_end : targets[next]);
        const double t = stepper.t();
        while (next < targets.size() && dir * (targets[next] - t) <= 0.0) {
            const double tt = targets[next];
            if (tt == t || !cfg.dense_output)
                out.row(static_cast<Eigen::Index>(next)) = stepper.y().transpose();
            else
                out.row(static_cast<Eigen::Index>(next)) = stepper.dense()(tt).transpose();
            ++next;
        }
    }
    return out;
}

// Fixed-step DOPRI (fifth-order solution only), used for convergence studies.
template <VectorField F>
VectorXd integrate_dopri_fixed(F& f, double t0, const VectorXd& y0, double t1, long steps) {
    if (steps < 1) throw InvalidInputError("fixed-step integration needs at least one step");
    const Eigen::Index n = y0.size();
    std::array<VectorXd, 7> k;
    for (auto& v : k) v.resize(n);
    VectorXd y = y0, y_new(n), err(n), tmp(n);
    const double h = (t1 - t0) / static_cast<double>(steps);
    for (long s = 0; s < steps; ++s) {
        const double t = t0 + static_cast<double>(s) * h;
        f(t, y, k[0]);
        dopri_step(f, t, y, h, k, y_new, err, tmp);
        y.swap(y_new);
    }
    return y;
}

}  // namespace ionflux
