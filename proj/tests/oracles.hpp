#pragma once

// Plain scalar reference implementations used to check the library. None of
// these call into aga; inputs are row-major std::vector<double>.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
    Vec c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

inline Vec softmax_rows(const Vec& x, std::size_t m, std::size_t n) {
    Vec y(x.size());
    for (std::size_t i = 0; i < m; ++i) {
        double mx = x[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(x[i * n + j] - mx);
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = std::exp(x[i * n + j] - mx) / z;
    }
    return y;
}

inline double dot(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
    return s;
}

inline double cosine(const double* a, const double* b, std::size_t d) {
    return dot(a, b, d) / (std::sqrt(dot(a, a, d)) * std::sqrt(dot(b, b, d)));
}

/// Two-way InfoNCE where row j of a pairs with row j of b.
inline double symmetric_info_nce(const Vec& a, const Vec& b, std::size_t L, std::size_t d, double tau) {
    double total = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
        double za = 0.0, zb = 0.0;
        for (std::size_t k = 0; k < L; ++k) {
            za += std::exp(cosine(&a[j * d], &b[k * d], d) / tau);
            zb += std::exp(cosine(&b[j * d], &a[k * d], d) / tau);
        }
        const double pos = cosine(&a[j * d], &b[j * d], d) / tau;
        total += (pos - std::log(za)) + (pos - std::log(zb));
    }
    return -total / (2.0 * static_cast<double>(L));
}

struct Grouping {
    Vec s_hat, s_tilde, alpha, grouped;
};

/// Rows of `src` group the rows of `dst`: similarity, row min-max (constant
/// row -> ones), keep >= sigma, row-normalize, weighted sum of `dst` rows.
inline Grouping group(const Vec& src, std::size_t R, const Vec& dst, std::size_t K, std::size_t d, double sigma) {
    Grouping g{Vec(R * K), Vec(R * K), Vec(R * K), Vec(R * d, 0.0)};
    for (std::size_t r = 0; r < R; ++r) {
        Vec s(K);
        for (std::size_t k = 0; k < K; ++k) s[k] = dot(&src[r * d], &dst[k * d], d);
        const double lo = *std::min_element(s.begin(), s.end());
        const double hi = *std::max_element(s.begin(), s.end());
        double kept = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double v = hi == lo ? 1.0 : (s[k] - lo) / (hi - lo);
            g.s_hat[r * K + k] = v;
            g.s_tilde[r * K + k] = v >= sigma ? v : 0.0;
            kept += g.s_tilde[r * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) {
            g.alpha[r * K + k] = g.s_tilde[r * K + k] / kept;
            for (std::size_t c = 0; c < d; ++c) g.grouped[r * d + c] += g.alpha[r * K + k] * dst[k * d + c];
        }
    }
    return g;
}

/// Single-head attention with row-vector projections: softmax(QWq (KWk)^T / sqrt d) KWv.
inline Vec attention(const Vec& q, std::size_t J, const Vec& kv, std::size_t K, const Vec& wq, const Vec& wk,
                     const Vec& wv, std::size_t d) {
    const auto Q = matmul(q, wq, J, d, d), Km = matmul(kv, wk, K, d, d), V = matmul(kv, wv, K, d, d);
    Vec scores(J * K);
    for (std::size_t j = 0; j < J; ++j)
        for (std::size_t k = 0; k < K; ++k) scores[j * K + k] = dot(&Q[j * d], &Km[k * d], d) / std::sqrt(double(d));
    return matmul(softmax_rows(scores, J, K), V, J, K, d);
}

/// EMA after T identical updates: m + gamma^T (sigma0 - m).
inline double gate_after(double sigma0, double m, double gamma, int T) {
    return m + std::pow(gamma, T) * (sigma0 - m);
}

/// ROC-AUC by counting ordered (positive, negative) pairs, ties worth one half.
inline double roc_auc_pairs(const Vec& scores, const std::vector<bool>& pos) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = 0; j < scores.size(); ++j)
            if (pos[i] && !pos[j]) {
                den += 1.0;
                num += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
            }
    return num / den;
}

/// Prec@K with ties in score broken by lower candidate index.
inline double precision_at_k(const Vec& scores, std::size_t Q, std::size_t P, const std::vector<std::size_t>& qcat,
                             const std::vector<std::size_t>& ccat, std::size_t K) {
    double total = 0.0;
    for (std::size_t q = 0; q < Q; ++q) {
        std::vector<std::size_t> chosen;
        std::vector<bool> used(P, false);
        for (std::size_t r = 0; r < K; ++r) {
            std::size_t best = P;
            for (std::size_t p = 0; p < P; ++p)
                if (!used[p] && (best == P || scores[q * P + p] > scores[q * P + best])) best = p;
            used[best] = true;
            chosen.push_back(best);
        }
        std::size_t hits = 0;
        for (auto p : chosen) hits += ccat[p] == qcat[q];
        total += static_cast<double>(hits) / static_cast<double>(K);
    }
    return total / static_cast<double>(Q);
}

inline Vec random_vec(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Vec v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

}  // namespace oracle
