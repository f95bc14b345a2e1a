#pragma once

// Toy image and text encoders. They only need to produce local embeddings
// ([N x d] patches, [M_max x d] tokens) and global embeddings ([d]) that are
// differentiable with respect to their parameters.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aga/autodiff.hpp"
#include "aga/rng.hpp"

namespace aga {

struct EncoderConfig {
    std::size_t patch_features = 8;  // C
    std::size_t hidden = 32;         // h
    std::size_t embed_dim = 16;      // d
    std::size_t vocab = 64;
    std::size_t mix_window = 3;

    void validate() const {
        auto positive = [](std::size_t v, const char* field) {
            if (v == 0) throw ContractError(std::string("encoder config field '") + field + "': must be positive");
        };
        positive(patch_features, "patch_features");
        positive(hidden, "hidden");
        positive(embed_dim, "embed_dim");
        positive(vocab, "vocab");
        if (mix_window % 2 == 0) throw ContractError("encoder config field 'mix_window': must be odd");
    }
};

struct ImageSample {
    std::size_t num_patches = 0;  // N
    std::size_t features = 0;     // C
    std::vector<double> patches;  // N x C, row-major

    double at(std::size_t n, std::size_t c) const { return patches[n * features + c]; }
};

struct TextSample {
    std::vector<std::int32_t> token_ids;  // M_max
    std::vector<std::uint8_t> mask;       // 1 marks a real token

    std::size_t max_len() const { return token_ids.size(); }

    std::vector<std::size_t> positions() const {
        std::vector<std::size_t> pos;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) pos.push_back(i);
        return pos;
    }

    std::size_t length() const { return positions().size(); }
};

struct EncoderParams {
    Parameter patch_proj, patch_proj_bias;
    Parameter patch_head, patch_head_bias;
    Parameter token_table;
    Parameter token_head, token_head_bias;
    std::size_t mix_window = 3;

    static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
        cfg.validate();
        const auto C = cfg.patch_features, h = cfg.hidden, d = cfg.embed_dim;
        EncoderParams p;
        p.patch_proj = Parameter("enc/patch_proj", {C, h});
        p.patch_proj_bias = Parameter("enc/patch_proj_bias", {h});
        p.patch_head = Parameter("enc/patch_head", {h, d});
        p.patch_head_bias = Parameter("enc/patch_head_bias", {d});
        p.token_table = Parameter("enc/token_table", {cfg.vocab, h});
        p.token_head = Parameter("enc/token_head", {h, d});
        p.token_head_bias = Parameter("enc/token_head_bias", {d});
        p.mix_window = cfg.mix_window;

        auto fill_uniform = [&rng](Parameter& w, std::size_t fan_in) {
            const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> u(-a, a);
            for (auto& v : w.data) v = u(rng);
        };
        fill_uniform(p.patch_proj, C);
        fill_uniform(p.patch_proj_bias, C);
        fill_uniform(p.patch_head, h);
        fill_uniform(p.patch_head_bias, h);
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto& v : p.token_table.data) v = nd(rng);
        fill_uniform(p.token_head, h);
        fill_uniform(p.token_head_bias, h);
        return p;
    }

    std::vector<Parameter*> all() {
        return {&patch_proj, &patch_proj_bias, &patch_head, &patch_head_bias,
                &token_table, &token_head, &token_head_bias};
    }

    std::size_t patch_features() const { return patch_proj.shape[0]; }
    std::size_t hidden() const { return patch_proj.shape[1]; }
    std::size_t embed_dim() const { return patch_head.shape[1]; }
    std::size_t vocab() const { return token_table.shape[0]; }
};

/// Encoder parameters bound to one tape.
struct EncoderLeaves {
    DiffTensor patch_proj, patch_proj_bias, patch_head, patch_head_bias;
    DiffTensor token_table, token_head, token_head_bias;
    std::size_t mix_window = 3;
    std::size_t vocab = 0;

    EncoderLeaves(Tape& t, EncoderParams& p)
        : patch_proj(t.param(p.patch_proj)),
          patch_proj_bias(t.param(p.patch_proj_bias)),
          patch_head(t.param(p.patch_head)),
          patch_head_bias(t.param(p.patch_head_bias)),
          token_table(t.param(p.token_table)),
          token_head(t.param(p.token_head)),
          token_head_bias(t.param(p.token_head_bias)),
          mix_window(p.mix_window),
          vocab(p.vocab()) {}
};

struct ImageEncoding {
    DiffTensor patches;  // [N x d]
    DiffTensor global;   // [d]
};

struct TextEncoding {
    DiffTensor tokens;       // [M_max x d], zero rows at padding
    DiffTensor real_tokens;  // [M_i x d], real rows only, in order
    DiffTensor global;       // [d]
    std::vector<std::size_t> positions;
};

inline void require_finite(std::span<const double> xs, const char* what) {
    for (double x : xs)
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
}

inline ImageEncoding encode_image(const ImageSample& img, const EncoderLeaves& p) {
    auto& t = p.patch_proj.tape();
    if (img.num_patches == 0 || img.features == 0)
        throw ShapeError("encode_image: empty image");
    if (img.patches.size() != img.num_patches * img.features)
        throw ShapeError("encode_image: patch buffer does not match N x C");
    if (img.features != p.patch_proj.rows())
        throw ShapeError("encode_image: image has C=" + std::to_string(img.features) +
                         ", encoder expects C=" + std::to_string(p.patch_proj.rows()));
    require_finite(img.patches, "encode_image");

    auto x = t.constant({img.num_patches, img.features}, img.patches);
    auto hidden = tanh(add_row(matmul(x, p.patch_proj), p.patch_proj_bias));
    auto patches = add_row(matmul(hidden, p.patch_head), p.patch_head_bias);
    // The global embedding shares the local head so both live in one space.
    auto g = add_row(matmul(mean_rows(hidden), p.patch_head), p.patch_head_bias);
    return {patches, reshape(g, {g.cols()})};
}

/// Row-stochastic window-mean operator over `len` tokens with half-sample
/// symmetric reflection at both ends (index -1 maps to 0, len maps to len-1).
inline std::vector<double> window_mix_matrix(std::size_t len, std::size_t window) {
    std::vector<double> mix(len * len, 0.0);
    const auto half = static_cast<std::ptrdiff_t>(window / 2);
    const auto L = static_cast<std::ptrdiff_t>(len);
    const double w = 1.0 / static_cast<double>(window);
    for (std::ptrdiff_t i = 0; i < L; ++i)
        for (std::ptrdiff_t o = -half; o <= half; ++o) {
            std::ptrdiff_t j = i + o;
            while (j < 0 || j >= L) j = j < 0 ? -j - 1 : 2 * L - j - 1;
            mix[static_cast<std::size_t>(i * L + j)] += w;
        }
    return mix;
}

inline TextEncoding encode_text(const TextSample& txt, const EncoderLeaves& p) {
    auto& t = p.token_table.tape();
    if (txt.mask.size() != txt.token_ids.size())
        throw ShapeError("encode_text: mask and token_ids differ in length");
    auto pos = txt.positions();
    if (pos.empty()) throw ContractError("encode_text: mask has no real tokens");
    std::vector<std::size_t> ids;
    ids.reserve(pos.size());
    for (auto i : pos) {
        const auto id = txt.token_ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= p.vocab)
            throw ContractError("encode_text: token id " + std::to_string(id) + " outside vocabulary");
        ids.push_back(static_cast<std::size_t>(id));
    }
    const std::size_t len = pos.size();
    auto looked_up = gather_rows(p.token_table, ids);
    auto mix = t.constant({len, len}, window_mix_matrix(len, p.mix_window));
    auto hidden = tanh(matmul(mix, looked_up));
    auto real = add_row(matmul(hidden, p.token_head), p.token_head_bias);
    auto full = scatter_rows(real, pos, txt.max_len());
    auto g = add_row(matmul(mean_rows(hidden), p.token_head), p.token_head_bias);
    return {full, real, reshape(g, {g.cols()}), std::move(pos)};
}

}  // namespace aga
