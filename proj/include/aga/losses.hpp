#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aga/autodiff.hpp"
#include "aga/rng.hpp"

namespace aga {

struct Temperatures {
    double tau1 = 0.3;  // global
    double tau2 = 0.3;  // instance-aware group alignment
    double tau3 = 0.1;  // cross-modal grouped alignment

    void validate() const {
        for (auto [v, field] : {std::pair{tau1, "tau1"}, {tau2, "tau2"}, {tau3, "tau3"}})
            if (!(v > 0.0)) throw ContractError(std::string("loss config field '") + field + "': must be positive");
    }
};

struct LossWeights {
    double lambda1 = 0.5;
    double lambda2 = 0.5;
    double lambda3 = 0.5;

    void validate() const {
        for (auto [v, field] : {std::pair{lambda1, "lambda1"}, {lambda2, "lambda2"}, {lambda3, "lambda3"}})
            if (!(v >= 0.0)) throw ContractError(std::string("loss config field '") + field + "': must be non-negative");
        if (lambda1 == 0.0 && lambda2 == 0.0 && lambda3 == 0.0)
            throw ContractError("loss config fields 'lambda1', 'lambda2', 'lambda3': must not all be zero");
    }
};

struct LossBreakdown {
    double l_g = 0.0;
    double l_tf = 0.0;
    double l_vf = 0.0;
    double l_gla = 0.0;
    double l_gva = 0.0;
    double l_total = 0.0;
};

inline double combine(const LossBreakdown& c, const LossWeights& w) {
    return w.lambda1 * c.l_g + (w.lambda2 / 2.0) * (c.l_tf + c.l_vf) +
           (w.lambda3 / 2.0) * (c.l_gla + c.l_gva);
}

/// Fills l_total from the five components.
inline LossBreakdown total_loss(LossBreakdown parts, const LossWeights& w) {
    parts.l_total = combine(parts, w);
    return parts;
}

/// Differentiable counterpart of total_loss; absent terms are skipped.
inline DiffTensor total_loss(const DiffTensor& l_g, const DiffTensor* l_tf, const DiffTensor* l_vf,
                             const DiffTensor* l_gla, const DiffTensor* l_gva, const LossWeights& w) {
    auto total = scale(l_g, w.lambda1);
    if (l_tf && l_vf) total = total + scale(*l_tf + *l_vf, w.lambda2 / 2.0);
    if (l_gla && l_gva) total = total + scale(*l_gla + *l_gva, w.lambda3 / 2.0);
    return total;
}

/// Pairwise cosine similarities between the rows of a and b.
inline DiffTensor cosine_matrix(const DiffTensor& a, const DiffTensor& b) {
    return matmul(l2_normalize(a), transpose(l2_normalize(b)));
}

inline DiffTensor cosine(const DiffTensor& a, const DiffTensor& b) {
    if (a.size() != b.size())
        throw ShapeError("cosine: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto ra = reshape(a, {1, a.size()});
    auto rb = reshape(b, {1, b.size()});
    return reshape(cosine_matrix(ra, rb), {});
}

/// Two-way InfoNCE where row j of `a` is the positive for row j of `b`:
///   -(1/2L) sum_j [ log softmax_k(cos(a_j, b_k)/tau)_j + log softmax_k(cos(b_j, a_k)/tau)_j ]
inline DiffTensor symmetric_info_nce(const DiffTensor& a, const DiffTensor& b, double tau) {
    detail::require_matrix(a, "symmetric_info_nce");
    detail::require_same_shape(a, b, "symmetric_info_nce");
    if (a.rows() == 0) throw ShapeError("symmetric_info_nce: no rows");
    if (!(tau > 0.0)) throw ContractError("symmetric_info_nce: temperature must be positive");
    auto logits = scale(cosine_matrix(a, b), 1.0 / tau);
    auto forward = sum(diagonal(row_log_softmax(logits)));
    auto backward = sum(diagonal(row_log_softmax(transpose(logits))));
    return scale(forward + backward, -1.0 / (2.0 * static_cast<double>(a.rows())));
}

/// Batch-level global contrastive loss over [b x d] global embeddings.
inline DiffTensor global_loss(const DiffTensor& global_imgs, const DiffTensor& global_txts, double tau1) {
    return symmetric_info_nce(global_imgs, global_txts, tau1);
}

/// In-sequence alignment of local embeddings with their group embeddings for
/// one pair; the other rows of the same pair are the only negatives.
inline DiffTensor iga_loss(const DiffTensor& locals, const DiffTensor& groups, double tau2) {
    return symmetric_info_nce(groups, locals, tau2);
}

inline DiffTensor grouped_crossmodal_loss(const DiffTensor& groups, const DiffTensor& crossmodal,
                                          double tau3) {
    return symmetric_info_nce(groups, crossmodal, tau3);
}

/// Projections for one cross-attention direction. Rows are projected as x * W.
struct BcgaParams {
    Parameter wq, wk, wv;

    static BcgaParams init(const std::string& prefix, std::size_t d, Rng& rng) {
        BcgaParams p{Parameter(prefix + "/wq", {d, d}), Parameter(prefix + "/wk", {d, d}),
                     Parameter(prefix + "/wv", {d, d})};
        const double a = 1.0 / std::sqrt(static_cast<double>(d));
        std::uniform_real_distribution<double> u(-a, a);
        for (auto* w : {&p.wq, &p.wk, &p.wv})
            for (auto& v : w->data) v = u(rng);
        return p;
    }

    std::vector<Parameter*> all() { return {&wq, &wk, &wv}; }
};

struct BcgaLeaves {
    DiffTensor wq, wk, wv;
    BcgaLeaves(Tape& t, BcgaParams& p) : wq(t.param(p.wq)), wk(t.param(p.wk)), wv(t.param(p.wv)) {}
};

/// Scaled dot-product cross-attention: each query row attends over all
/// key/value rows; the output map applied to the weighted values is identity.
inline DiffTensor bcga_attend(const DiffTensor& queries, const DiffTensor& keys_values, const BcgaLeaves& p) {
    detail::require_matrix(queries, "bcga_attend");
    detail::require_matrix(keys_values, "bcga_attend");
    const std::size_t d = p.wq.rows();
    if (queries.cols() != d || keys_values.cols() != d)
        throw ShapeError("bcga_attend: queries " + shape_str(queries.shape()) + ", keys/values " +
                         shape_str(keys_values.shape()) + ", projections " + shape_str(p.wq.shape()));
    if (queries.rows() == 0 || keys_values.rows() == 0) throw ShapeError("bcga_attend: empty input");
    auto q = matmul(queries, p.wq);
    auto k = matmul(keys_values, p.wk);
    auto v = matmul(keys_values, p.wv);
    auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    return matmul(row_softmax(scores), v);
}

}  // namespace aga
