// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace gistlm {

// Small dense kernels shared by the attention paths and the model. All
// matrices are row-major. The inner loops run over contiguous memory with
// multi-row register blocking so the compiler can vectorize them.

/// c[m,n] += a[m,p] * b[p,n]   (or overwrite when accumulate is false)
template <typename Real>
void matmul(const Real* a, const Real* b, Real* c, int64_t m, int64_t p, int64_t n,
            bool accumulate = false) {
    if (!accumulate) {
        std::fill(c, c + m * n, Real(0));
    }
    int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const Real* a0 = a + i * p;
        const Real* a1 = a0 + p;
        const Real* a2 = a1 + p;
        const Real* a3 = a2 + p;
        Real* c0 = c + i * n;
        Real* c1 = c0 + n;
        Real* c2 = c1 + n;
        Real* c3 = c2 + n;
        for (int64_t l = 0; l < p; ++l) {
            const Real v0 = a0[l], v1 = a1[l], v2 = a2[l], v3 = a3[l];
            const Real* brow = b + l * n;
            for (int64_t j = 0; j < n; ++j) {
                const Real bv = brow[j];
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        const Real* arow = a + i * p;
        Real* crow = c + i * n;
        for (int64_t l = 0; l < p; ++l) {
            const Real av = arow[l];
            const Real* brow = b + l * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

namespace detail {

template <typename Real>
std::vector<Real>& transpose_scratch() {
    thread_local std::vector<Real> scratch;
    return scratch;
}

}  // namespace detail

/// c[m,n] += a[m,p] * b[n,p]^T. Internally transposes b once and runs the
/// row-blocked kernel, which beats strided dot products for all but tiny
/// shapes.
template <typename Real>
void matmul_nt(const Real* a, const Real* b, Real* c, int64_t m, int64_t p, int64_t n,
               bool accumulate = false) {
    std::vector<Real>& bt = detail::transpose_scratch<Real>();
    bt.resize(p * n);
    for (int64_t j = 0; j < n; ++j) {
        const Real* brow = b + j * p;
        for (int64_t l = 0; l < p; ++l) {
            bt[l * n + j] = brow[l];
        }
    }
    matmul(a, bt.data(), c, m, p, n, accumulate);
}

/// c[p,n] += a[m,p]^T * b[m,n]
template <typename Real>
void matmul_tn(const Real* a, const Real* b, Real* c, int64_t m, int64_t p, int64_t n,
               bool accumulate = false) {
    if (!accumulate) {
        std::fill(c, c + p * n, Real(0));
    }
    int64_t i = 0;
    for (; i + 2 <= m; i += 2) {
        const Real* a0 = a + i * p;
        const Real* a1 = a0 + p;
        const Real* b0 = b + i * n;
        const Real* b1 = b0 + n;
        for (int64_t l = 0; l < p; ++l) {
            const Real v0 = a0[l], v1 = a1[l];
            Real* crow = c + l * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += v0 * b0[j] + v1 * b1[j];
            }
        }
    }
    for (; i < m; ++i) {
        const Real* arow = a + i * p;
        const Real* brow = b + i * n;
        for (int64_t l = 0; l < p; ++l) {
            const Real av = arow[l];
            Real* crow = c + l * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

template <typename Real>
void fill_normal(std::vector<Real>& v, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Real& x : v) {
        x = static_cast<Real>(dist(rng));
    }
}

}  // namespace gistlm
