#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "ionflux/errors.hpp"

namespace ionflux {

using Eigen::VectorXd;

// Fully connected tanh network: `layers` linear maps, tanh after all but the last.
struct MlpShape {
    Eigen::Index input = 0;
    Eigen::Index width = 0;
    Eigen::Index output = 0;
    int layers = 5;

    Eigen::Index fan_in(int l) const { return l == 0 ? input : width; }
    Eigen::Index fan_out(int l) const { return l == layers - 1 ? output : width; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (int l = 0; l < layers; ++l) n += static_cast<std::size_t>(fan_out(l) * fan_in(l) + fan_out(l));
        return n;
    }
    // Offset of layer l's weights; its bias follows the weights.
    std::size_t offset(int l) const {
        std::size_t n = 0;
        for (int k = 0; k < l; ++k) n += static_cast<std::size_t>(fan_out(k) * fan_in(k) + fan_out(k));
        return n;
    }
    void validate() const {
        if (input < 1 || width < 1 || output < 1 || layers < 2) throw InvalidInputError("invalid network shape");
    }
};

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Activations kept for the reverse pass.
struct MlpCache {
    std::vector<VectorXd> act;  // act[0] = input, act[l] = tanh output of layer l-1
    VectorXd out;
};

inline const VectorXd& mlp_forward(const MlpShape& s, std::span<const double> theta, const VectorXd& x, MlpCache& c) {
    c.act.resize(static_cast<std::size_t>(s.layers));
    c.act[0] = x;
    for (int l = 0; l < s.layers; ++l) {
        const auto off = s.offset(l);
        const auto fo = s.fan_out(l), fi = s.fan_in(l);
        RowMajorMap w(theta.data() + off, fo, fi);
        Eigen::Map<const VectorXd> b(theta.data() + off + static_cast<std::size_t>(fo * fi), fo);
        if (l + 1 < s.layers)
            c.act[static_cast<std::size_t>(l) + 1] = (w * c.act[static_cast<std::size_t>(l)] + b).array().tanh().matrix();
        else
            c.out.noalias() = w * c.act[static_cast<std::size_t>(l)] + b;
    }
    return c.out;
}

// Reverse pass: adds (d out / d theta)^T g into g_theta (if non-null) and
// returns (d out / d x)^T g.
inline VectorXd mlp_backward(const MlpShape& s, std::span<const double> theta, const MlpCache& c, const VectorXd& g,
                             double* g_theta) {
    VectorXd delta = g;
    for (int l = s.layers - 1; l >= 0; --l) {
        const auto off = s.offset(l);
        const auto fo = s.fan_out(l), fi = s.fan_in(l);
        RowMajorMap w(theta.data() + off, fo, fi);
        const VectorXd& in = c.act[static_cast<std::size_t>(l)];
        if (g_theta) {
            RowMajorMutMap gw(g_theta + off, fo, fi);
            Eigen::Map<VectorXd> gb(g_theta + off + static_cast<std::size_t>(fo * fi), fo);
            gw.noalias() += delta * in.transpose();
            gb += delta;
        }
        VectorXd back = w.transpose() * delta;
        if (l > 0) back.array() *= 1.0 - in.array().square();
        delta.swap(back);
    }
    return delta;
}

// Kaiming-style uniform fan-in initialization with the tanh gain; zero biases;
// the final layer starts at zero so the untrained field vanishes.
inline std::vector<double> mlp_initialize(const MlpShape& s, std::uint64_t seed) {
    std::vector<double> theta(s.parameter_count(), 0.0);
    std::mt19937_64 rng(seed);
    for (int l = 0; l + 1 < s.layers; ++l) {
        const double bound = (5.0 / 3.0) * std::sqrt(3.0 / static_cast<double>(s.fan_in(l)));
        std::uniform_real_distribution<double> u(-bound, bound);
        const auto off = s.offset(l);
        const auto nw = static_cast<std::size_t>(s.fan_out(l) * s.fan_in(l));
        for (std::size_t i = 0; i < nw; ++i) theta[off + i] = u(rng);
    }
    return theta;
}

}  // namespace ionflux
