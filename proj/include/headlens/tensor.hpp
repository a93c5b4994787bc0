#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "headlens/common.hpp"

namespace headlens::ad {

// Dense row-major tensor. The scalar type selects the precision mode:
// float for training, double for gradient-check and oracle runs.
template <typename S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> shp, S fill = S(0)) : shape(std::move(shp)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static int64_t numel_of(const std::vector<int> &shp) {
        int64_t n = 1;
        for (int d : shp) {
            check_contract(d >= 0, "tensor dimension must be nonnegative");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    bool is_scalar() const { return numel() == 1; }
    S scalar() const {
        check_contract(is_scalar(), "tensor is not a scalar");
        return data[0];
    }

    S &at2(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    S at2(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

    bool all_finite() const {
        for (S v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    bool same_shape(const TensorT &o) const { return shape == o.shape; }

    template <typename T2>
    TensorT<T2> cast() const {
        TensorT<T2> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T2>(data[i]);
        return out;
    }
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

template <typename S>
std::string shape_str(const TensorT<S> &t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

// A named weight: value plus a gradient buffer of identical shape.
template <typename S>
struct ParameterT {
    std::string name;
    TensorT<S> value;
    TensorT<S> grad;
    bool trainable = true;

    ParameterT() = default;
    ParameterT(std::string n, TensorT<S> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), trainable(train) {
        grad = TensorT<S>(value.shape);
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

using ParameterF = ParameterT<float>;
using ParameterD = ParameterT<double>;

// ---- raw kernels -----------------------------------------------------------
// Accumulation order in every kernel is ascending index so results are
// bit-reproducible and match naive reference loops in tests.

// c[m,n] += a[m,k] * b[k,n]; the 4-way p unroll keeps the per-element add
// order identical to the plain ascending-p loop.
template <typename S>
void matmul_acc(const S *__restrict__ a, const S *__restrict__ b, S *__restrict__ c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S *__restrict__ arow = a + static_cast<size_t>(i) * k;
        S *__restrict__ crow = c + static_cast<size_t>(i) * n;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const S a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
            const S *__restrict__ b0 = b + static_cast<size_t>(p) * n;
            const S *__restrict__ b1 = b0 + n;
            const S *__restrict__ b2 = b1 + n;
            const S *__restrict__ b3 = b2 + n;
            for (int j = 0; j < n; ++j) {
                S acc = crow[j];
                acc += a0 * b0[j];
                acc += a1 * b1[j];
                acc += a2 * b2[j];
                acc += a3 * b3[j];
                crow[j] = acc;
            }
        }
        for (; p < k; ++p) {
            const S av = arow[p];
            const S *__restrict__ brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Deterministic exponential. The float variant is a fixed polynomial (no libm
// call) so float artifacts do not depend on the host math library and hot
// loops vectorize; the double variant keeps full libm accuracy for oracle and
// gradient-check runs.
inline float det_exp(float x) {
    x = std::min(x, 88.3762626647949f);
    x = std::max(x, -87.3365478515625f);
    float fx = std::floor(x * 1.44269504088896341f + 0.5f);
    const float r = (x - fx * 0.693359375f) - fx * -2.12194440e-4f;
    const float r2 = r * r;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r2 + r + 1.0f;
    const int n = static_cast<int>(fx);
    const uint32_t bits = static_cast<uint32_t>(n + 127) << 23;
    float scale;
    static_assert(sizeof(scale) == sizeof(bits));
    std::memcpy(&scale, &bits, sizeof(bits));
    return p * scale;
}

inline double det_exp(double x) { return std::exp(x); }

template <typename S>
void transpose(const S *a, S *at, int m, int n) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) at[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * n + j];
    }
}

}  // namespace headlens::ad
