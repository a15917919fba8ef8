// Generic helpers over parameter structs.
//
// A parameter struct exposes `visit(f)` calling `f(name, matrix)` for every
// trainable array in a fixed order. Gradients live in a second instance of
// the same struct, so clone, accumulate and update are plain value operations.

#pragma once

#include "bdcp/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

namespace bdcp {

template <class P>
concept ParameterSet = requires(P p) {
    p.visit([](std::string_view, Matrix&) {});
};

template <ParameterSet P>
P zeros_like(const P& params) {
    P out = params;
    out.visit([](std::string_view, Matrix& m) { m.setZero(); });
    return out;
}

template <ParameterSet P>
std::vector<Matrix*> param_list(P& params) {
    std::vector<Matrix*> out;
    params.visit([&](std::string_view, Matrix& m) { out.push_back(&m); });
    return out;
}

template <ParameterSet P>
std::vector<const Matrix*> param_list(const P& params) {
    std::vector<const Matrix*> out;
    const_cast<P&>(params).visit([&](std::string_view, Matrix& m) { out.push_back(&m); });
    return out;
}

/// dst += scale * src, matched by visit order.
template <ParameterSet P>
void axpy(P& dst, double scale, const P& src) {
    auto d = param_list(dst);
    auto s = param_list(src);
    for (size_t i = 0; i < d.size(); ++i) *d[i] += scale * *s[i];
}

template <ParameterSet P>
bool all_finite(const P& params) {
    for (const Matrix* m : param_list(params))
        if (!m->allFinite()) return false;
    return true;
}

template <ParameterSet P>
double squared_norm(const P& params) {
    double s = 0.0;
    for (const Matrix* m : param_list(params)) s += m->squaredNorm();
    return s;
}

/// FNV-1a over the raw bytes of every array; used to detect mutation.
template <ParameterSet P>
std::uint64_t checksum(const P& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Matrix* m : param_list(params)) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
        const size_t n = static_cast<size_t>(m->size()) * sizeof(double);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

template <ParameterSet P>
size_t parameter_count(const P& params) {
    size_t n = 0;
    for (const Matrix* m : param_list(params)) n += static_cast<size_t>(m->size());
    return n;
}

} // namespace bdcp
