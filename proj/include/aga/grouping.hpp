#pragma once

// Similarity grouping: token->patch and patch->token groups from a sparsified,
// row-normalized similarity matrix, with EMA threshold gates.
//
// Rows of the raw similarity matrix index tokens and columns index patches.
// The patch->token direction runs the same pipeline on the transpose.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aga/autodiff.hpp"

namespace aga {

inline DiffTensor similarity_matrix(const DiffTensor& token_embeds, const DiffTensor& patch_embeds) {
    detail::require_matrix(token_embeds, "similarity_matrix");
    detail::require_matrix(patch_embeds, "similarity_matrix");
    if (token_embeds.cols() != patch_embeds.cols())
        throw ShapeError("similarity_matrix: embedding dims differ, tokens " +
                         shape_str(token_embeds.shape()) + " vs patches " +
                         shape_str(patch_embeds.shape()));
    return matmul(token_embeds, transpose(patch_embeds));
}

/// Per-row min-max scaling into [0, 1]. A constant row maps to all ones and
/// passes no gradient.
inline DiffTensor minmax_rows(const DiffTensor& s) {
    detail::require_matrix(s, "minmax_rows");
    const std::size_t m = s.rows(), n = s.cols();
    if (n == 0) throw ShapeError("minmax_rows: empty rows");
    auto x = s.data();
    std::vector<double> y(m * n);
    std::vector<std::size_t> amin(m), amax(m);
    std::vector<double> span_(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        std::size_t lo = 0, hi = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (row[j] < row[lo]) lo = j;
            if (row[j] > row[hi]) hi = j;
        }
        amin[i] = lo;
        amax[i] = hi;
        span_[i] = row[hi] - row[lo];
        for (std::size_t j = 0; j < n; ++j)
            y[i * n + j] = span_[i] > 0.0 ? (row[j] - row[lo]) / span_[i] : 1.0;
    }
    auto is = s.node_id();
    return s.tape().push(
        "minmax_rows", s.shape(), std::move(y), {is},
        [=, amin = std::move(amin), amax = std::move(amax), span_ = std::move(span_)](Tape& tp,
                                                                                   std::size_t self) {
            const auto& g = tp.out_grad(self);
            const auto& Y = tp.value(self);
            auto gs = tp.grad_acc(is);
            for (std::size_t i = 0; i < m; ++i) {
                if (!(span_[i] > 0.0)) continue;
                const double inv = 1.0 / span_[i];
                double to_min = 0.0, to_max = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gj = g[i * n + j];
                    gs[i * n + j] += gj * inv;
                    to_min += gj * (Y[i * n + j] - 1.0) * inv;
                    to_max -= gj * Y[i * n + j] * inv;
                }
                gs[i * n + amin[i]] += to_min;
                gs[i * n + amax[i]] += to_max;
            }
        });
}

/// Keep entries >= sigma, zero the rest. The keep-mask is a constant.
inline DiffTensor sparsify(const DiffTensor& s_hat, double sigma) {
    if (!(sigma >= 0.0 && sigma <= 1.0))
        throw ContractError("sparsify: sigma " + std::to_string(sigma) + " outside [0, 1]");
    auto x = s_hat.data();
    std::vector<bool> drop(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) drop[i] = !(x[i] >= sigma);
    return masked_fill(s_hat, drop, 0.0);
}

/// Row-normalize a sparsified matrix so that each row is a distribution.
inline DiffTensor alignment_weights(const DiffTensor& s_tilde) {
    detail::require_matrix(s_tilde, "alignment_weights");
    const std::size_t m = s_tilde.rows(), n = s_tilde.cols();
    auto totals = row_sum(s_tilde);
    for (std::size_t i = 0; i < m; ++i)
        if (!(totals.data()[i] > 0.0))
            throw ContractError("alignment_weights: row " + std::to_string(i) + " has no surviving entries");
    return div(s_tilde, broadcast_col(totals, n));
}

/// Row j of the result is sum_k alpha[j, k] * source[k].
inline DiffTensor group_embed(const DiffTensor& alpha, const DiffTensor& source_embeds) {
    detail::require_matrix(alpha, "group_embed");
    detail::require_matrix(source_embeds, "group_embed");
    if (alpha.cols() != source_embeds.rows())
        throw ShapeError("group_embed: weights " + shape_str(alpha.shape()) + " vs sources " +
                         shape_str(source_embeds.shape()));
    return matmul(alpha, source_embeds);
}

/// EMA threshold for one grouping direction. Never part of the gradient graph.
struct GateState {
    double sigma = 0.0;
    double gamma = 0.99;
    std::size_t step_count = 0;
    std::vector<std::pair<std::size_t, double>> trajectory;

    GateState() = default;
    GateState(double sigma0, double momentum) : sigma(sigma0), gamma(momentum) { validate(); }

    void validate() const {
        if (!(sigma >= 0.0 && sigma <= 1.0))
            throw ContractError("GateState: sigma " + std::to_string(sigma) + " outside [0, 1]");
        if (!(gamma >= 0.0 && gamma < 1.0))
            throw ContractError("GateState: gamma " + std::to_string(gamma) + " outside [0, 1)");
    }

    void update(double batch_mean) {
        validate();
        sigma = gamma * sigma + (1.0 - gamma) * batch_mean;
        ++step_count;
        trajectory.emplace_back(step_count, sigma);
    }
};

/// Arithmetic mean of every entry of every normalized matrix in the batch.
inline double pooled_mean(std::span<const DiffTensor> s_hat_batch) {
    if (s_hat_batch.empty()) throw ContractError("gate_update: empty batch");
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& s : s_hat_batch) {
        for (double v : s.data()) total += v;
        count += s.size();
    }
    if (count == 0) throw ContractError("gate_update: batch has no entries");
    return total / static_cast<double>(count);
}

inline GateState gate_update(GateState g, std::span<const DiffTensor> s_hat_batch) {
    g.update(pooled_mean(s_hat_batch));
    return g;
}

struct AlignmentState {
    DiffTensor s, s_hat, s_tilde, alpha;  // token rows: [M_i x N]
    DiffTensor s_hat_v, s_tilde_v, alpha_v;  // patch rows: [N x M_i]
};

struct GroupEmbeddings {
    DiffTensor tgv;  // [M_i x d], one per token
    DiffTensor pgl;  // [N x d], one per patch
};

struct Grouping {
    AlignmentState state;
    GroupEmbeddings groups;
};

/// Both grouping directions for one pair under fixed thresholds.
inline Grouping group_pair(const DiffTensor& token_embeds, const DiffTensor& patch_embeds,
                           double sigma_tg, double sigma_vg) {
    Grouping out;
    auto& st = out.state;
    st.s = similarity_matrix(token_embeds, patch_embeds);
    st.s_hat = minmax_rows(st.s);
    st.s_tilde = sparsify(st.s_hat, sigma_tg);
    st.alpha = alignment_weights(st.s_tilde);
    out.groups.tgv = group_embed(st.alpha, patch_embeds);

    st.s_hat_v = minmax_rows(transpose(st.s));
    st.s_tilde_v = sparsify(st.s_hat_v, sigma_vg);
    st.alpha_v = alignment_weights(st.s_tilde_v);
    out.groups.pgl = group_embed(st.alpha_v, token_embeds);
    return out;
}

/// Groups one pair with the gates' current thresholds, then steps both gates
/// on this pair's normalized matrices.
inline Grouping compute_groups(const DiffTensor& token_embeds, const DiffTensor& patch_embeds,
                               GateState& gate_tg, GateState& gate_vg) {
    auto out = group_pair(token_embeds, patch_embeds, gate_tg.sigma, gate_vg.sigma);
    gate_tg = gate_update(std::move(gate_tg), std::span(&out.state.s_hat, 1));
    gate_vg = gate_update(std::move(gate_vg), std::span(&out.state.s_hat_v, 1));
    return out;
}

}  // namespace aga
