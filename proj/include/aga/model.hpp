#pragma once

// Full forward pass: encoders -> grouping -> all loss terms for one batch.

#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aga/encoders.hpp"
#include "aga/grouping.hpp"
#include "aga/losses.hpp"
#include "aga/rng.hpp"
#include "aga/synth.hpp"

namespace aga {

struct Variant {
    enum class Kind { full, global_only, no_bcga, fixed_threshold };

    Kind kind = Kind::full;
    double sigma_tg = 0.0;  // fixed_threshold only
    double sigma_vg = 0.0;

    static Variant full() { return {}; }
    static Variant global_only() { return {Kind::global_only}; }
    static Variant no_bcga() { return {Kind::no_bcga}; }
    static Variant fixed(double tg, double vg) { return {Kind::fixed_threshold, tg, vg}; }

    bool uses_grouping() const { return kind != Kind::global_only; }
    bool uses_bcga() const { return kind == Kind::full || kind == Kind::fixed_threshold; }
    bool updates_gates() const { return kind == Kind::full || kind == Kind::no_bcga; }

    /// Accepts "full", "global-only", "no-bcga" and "fixed:<sigma_tg>,<sigma_vg>".
    static Variant parse(const std::string& s) {
        if (s == "full") return full();
        if (s == "global-only" || s == "global_only") return global_only();
        if (s == "no-bcga" || s == "no_bcga") return no_bcga();
        if (s.rfind("fixed:", 0) == 0) {
            const auto body = s.substr(6);
            const auto comma = body.find(',');
            if (comma == std::string::npos) throw ContractError("variant: expected fixed:<tg>,<vg>");
            try {
                std::size_t used = 0;
                const auto a = body.substr(0, comma), b = body.substr(comma + 1);
                const double tg = std::stod(a, &used);
                if (used != a.size()) throw std::invalid_argument(a);
                const double vg = std::stod(b, &used);
                if (used != b.size()) throw std::invalid_argument(b);
                if (!(tg >= 0.0 && tg <= 1.0 && vg >= 0.0 && vg <= 1.0))
                    throw ContractError("variant: fixed thresholds must lie in [0, 1]");
                return fixed(tg, vg);
            } catch (const std::logic_error& e) {
                if (auto* ce = dynamic_cast<const ContractError*>(&e)) throw *ce;
                throw ContractError("variant: cannot parse thresholds in '" + s + "'");
            }
        }
        throw ContractError("variant: unknown variant '" + s + "'");
    }

    std::string str() const {
        switch (kind) {
            case Kind::full: return "full";
            case Kind::global_only: return "global-only";
            case Kind::no_bcga: return "no-bcga";
            case Kind::fixed_threshold: {
                char buf[96];
                std::snprintf(buf, sizeof buf, "fixed:%.17g,%.17g", sigma_tg, sigma_vg);
                return buf;
            }
        }
        return "full";
    }
};

struct Model {
    EncoderParams enc;
    BcgaParams lv;  // TGV queries attend over PGL
    BcgaParams vl;  // PGL queries attend over TGV

    static Model init(const EncoderConfig& cfg, Rng& rng) {
        Model m;
        m.enc = EncoderParams::init(cfg, rng);
        m.lv = BcgaParams::init("bcga_lv", cfg.embed_dim, rng);
        m.vl = BcgaParams::init("bcga_vl", cfg.embed_dim, rng);
        return m;
    }

    std::vector<Parameter*> params() {
        auto out = enc.all();
        for (auto* p : lv.all()) out.push_back(p);
        for (auto* p : vl.all()) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto* p : params()) p->zero_grad();
    }
};

struct ModelLeaves {
    EncoderLeaves enc;
    std::optional<BcgaLeaves> lv, vl;

    ModelLeaves(Tape& t, Model& m, bool with_bcga) : enc(t, m.enc) {
        if (with_bcga) {
            lv.emplace(t, m.lv);
            vl.emplace(t, m.vl);
        }
    }
};

struct PairForward {
    ImageEncoding image;
    TextEncoding text;
    std::optional<Grouping> grouping;
    std::optional<DiffTensor> u, w;  // cross-modal TGV / PGL
};

struct BatchForward {
    DiffTensor total;
    LossBreakdown values;
    std::vector<PairForward> pairs;
    std::vector<DiffTensor> s_hat_t, s_hat_v;
};

struct LossSettings {
    Temperatures temps;
    LossWeights weights;
};

inline bool all_finite(const LossBreakdown& b) {
    for (double v : {b.l_g, b.l_tf, b.l_vf, b.l_gla, b.l_gva, b.l_total})
        if (!std::isfinite(v)) return false;
    return true;
}

/// Builds the total loss of a batch on `tape`. Thresholds are snapshots; no
/// gate is modified here. Throws NumericError naming the first pair whose
/// loss terms are not finite.
inline BatchForward forward_batch(Tape& tape, Model& model, std::span<const LabeledPair* const> batch,
                                  double sigma_tg, double sigma_vg, const Variant& variant,
                                  const LossSettings& ls) {
    if (batch.empty()) throw ContractError("forward_batch: empty batch");
    ls.temps.validate();
    ls.weights.validate();
    ModelLeaves leaves(tape, model, variant.uses_bcga());
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    BatchForward out;
    std::vector<DiffTensor> g_img, g_txt, tf, vf, gla, gva;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& pair = *batch[i];
        PairForward pf;
        try {
            pf.image = encode_image(pair.image, leaves.enc);
            pf.text = encode_text(pair.text, leaves.enc);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at batch pair " + std::to_string(i));
        }
        g_img.push_back(pf.image.global);
        g_txt.push_back(pf.text.global);
        if (variant.uses_grouping()) {
            const auto& tokens = pf.text.real_tokens;
            const auto& patches = pf.image.patches;
            pf.grouping = group_pair(tokens, patches, sigma_tg, sigma_vg);
            const auto& grp = pf.grouping->groups;
            tf.push_back(iga_loss(tokens, grp.tgv, ls.temps.tau2));
            vf.push_back(iga_loss(patches, grp.pgl, ls.temps.tau2));
            out.s_hat_t.push_back(pf.grouping->state.s_hat);
            out.s_hat_v.push_back(pf.grouping->state.s_hat_v);
            if (variant.uses_bcga()) {
                pf.u = bcga_attend(grp.tgv, grp.pgl, *leaves.lv);
                pf.w = bcga_attend(grp.pgl, grp.tgv, *leaves.vl);
                gla.push_back(grouped_crossmodal_loss(grp.tgv, *pf.u, ls.temps.tau3));
                gva.push_back(grouped_crossmodal_loss(grp.pgl, *pf.w, ls.temps.tau3));
            }
            for (const auto* term : {&tf.back(), &vf.back()})
                if (!std::isfinite(term->item()))
                    throw NumericError("non-finite alignment loss at batch pair " + std::to_string(i));
            if (variant.uses_bcga() && !(std::isfinite(gla.back().item()) && std::isfinite(gva.back().item())))
                throw NumericError("non-finite grouped cross-modal loss at batch pair " + std::to_string(i));
        }
        out.pairs.push_back(std::move(pf));
    }

    auto mean_of = [&](const std::vector<DiffTensor>& terms) {
        auto acc = terms.front();
        for (std::size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
        return scale(acc, inv_b);
    };

    auto l_g = global_loss(concat_rows(g_img), concat_rows(g_txt), ls.temps.tau1);
    if (!std::isfinite(l_g.item())) throw NumericError("non-finite global loss in batch");
    out.values.l_g = l_g.item();
    std::optional<DiffTensor> l_tf, l_vf, l_gla, l_gva;
    if (!tf.empty()) {
        l_tf = mean_of(tf);
        l_vf = mean_of(vf);
        out.values.l_tf = l_tf->item();
        out.values.l_vf = l_vf->item();
    }
    if (!gla.empty()) {
        l_gla = mean_of(gla);
        l_gva = mean_of(gva);
        out.values.l_gla = l_gla->item();
        out.values.l_gva = l_gva->item();
    }
    out.total = total_loss(l_g, l_tf ? &*l_tf : nullptr, l_vf ? &*l_vf : nullptr, l_gla ? &*l_gla : nullptr,
                           l_gva ? &*l_gva : nullptr, ls.weights);
    out.values.l_total = out.total.item();
    return out;
}

}  // namespace aga
