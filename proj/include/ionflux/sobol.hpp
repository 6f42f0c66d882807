#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ionflux/errors.hpp"

namespace ionflux {

// Unscrambled Sobol sequence with Joe-Kuo (new-joe-kuo-6.21201) direction
// numbers, 32-bit resolution, Gray-code ordering. The origin is skipped, so
// the first 1-D points are 0.5, 0.75, 0.25, 0.375, ...
class SobolSequence {
public:
    static constexpr int max_dims = 16;
    static constexpr int bits = 32;

    explicit SobolSequence(int dims) : dims_(dims), state_(static_cast<std::size_t>(dims), 0u) {
        if (dims < 1 || dims > max_dims)
            throw UnsupportedDimensionError("Sobol dimension " + std::to_string(dims) + " outside 1.." +
                                            std::to_string(max_dims));
        struct Poly {
            unsigned s, a;
            std::array<std::uint32_t, 6> m;
        };
        static constexpr std::array<Poly, max_dims - 1> table{{
            {1, 0, {1}},
            {2, 1, {1, 3}},
            {3, 1, {1, 3, 1}},
            {3, 2, {1, 1, 1}},
            {4, 1, {1, 1, 3, 3}},
            {4, 4, {1, 3, 5, 13}},
            {5, 2, {1, 1, 5, 5, 17}},
            {5, 4, {1, 1, 5, 5, 5}},
            {5, 7, {1, 1, 7, 11, 19}},
            {5, 11, {1, 1, 5, 1, 1}},
            {5, 13, {1, 1, 1, 3, 11}},
            {5, 14, {1, 3, 5, 5, 31}},
            {6, 1, {1, 3, 3, 9, 7, 49}},
            {6, 13, {1, 1, 1, 15, 21, 21}},
            {6, 16, {1, 3, 1, 13, 27, 49}},
        }};
        directions_.resize(static_cast<std::size_t>(dims));
        for (int i = 0; i < bits; ++i) directions_[0][static_cast<std::size_t>(i)] = 1u << (31 - i);
        for (int j = 1; j < dims; ++j) {
            const auto& p = table[static_cast<std::size_t>(j - 1)];
            auto& v = directions_[static_cast<std::size_t>(j)];
            for (unsigned i = 0; i < p.s; ++i) v[i] = p.m[i] << (31 - i);
            for (unsigned i = p.s; i < static_cast<unsigned>(bits); ++i) {
                v[i] = v[i - p.s] ^ (v[i - p.s] >> p.s);
                for (unsigned k = 1; k < p.s; ++k) v[i] ^= ((p.a >> (p.s - 1 - k)) & 1u) * v[i - k];
            }
        }
    }

    int dims() const { return dims_; }

    // Next point; the first call returns the point after the origin.
    std::vector<double> next() {
        std::uint64_t c = index_++;
        int b = 0;
        while (c & 1u) {
            c >>= 1;
            ++b;
        }
        if (b >= bits) throw UnsupportedDimensionError("Sobol sequence exhausted");
        std::vector<double> out(static_cast<std::size_t>(dims_));
        for (std::size_t j = 0; j < out.size(); ++j) {
            state_[j] ^= directions_[j][static_cast<std::size_t>(b)];
            out[j] = std::ldexp(static_cast<double>(state_[j]), -bits);
        }
        return out;
    }

    void skip(std::uint64_t n) {
        for (std::uint64_t i = 0; i < n; ++i) next();
    }

private:
    int dims_;
    std::vector<std::uint32_t> state_;
    std::vector<std::array<std::uint32_t, bits>> directions_;
    std::uint64_t index_ = 0;
};

// Maps u in [0,1] to a log-uniform concentration on [lo, hi].
inline double log_uniform(double u, double lo, double hi) {
    return std::pow(10.0, std::log10(lo) + u * (std::log10(hi) - std::log10(lo)));
}

}  // namespace ionflux
