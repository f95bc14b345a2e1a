#pragma once

// Self-check battery behind `aga verify`: gradient checks, scalar reference
// equivalences and invariant sweeps, grouped by module.

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aga/evaluation.hpp"
#include "aga/gradcheck.hpp"
#include "aga/grouping.hpp"
#include "aga/losses.hpp"
#include "aga/model.hpp"
#include "aga/trainer.hpp"

namespace aga {

struct CheckResult {
    std::string group;
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct Check {
    std::string group;
    std::string name;
    std::function<std::string(bool& ok)> run;  // sets ok, returns a one-line detail
};

// ---------------------------------------------------------------------------
// Shared fixtures

/// Random pair with `tokens` real tokens padded to `max_len`, N patches of C features.
inline LabeledPair random_pair(Rng& rng, std::size_t tokens, std::size_t max_len, std::size_t patches,
                               std::size_t features, std::size_t vocab, std::size_t label) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_int_distribution<std::int32_t> id(1, static_cast<std::int32_t>(vocab) - 1);
    LabeledPair p;
    p.label = label;
    p.image.num_patches = patches;
    p.image.features = features;
    for (std::size_t i = 0; i < patches * features; ++i) p.image.patches.push_back(nd(rng));
    p.text.token_ids.assign(max_len, 0);
    p.text.mask.assign(max_len, 0);
    for (std::size_t i = 0; i < tokens; ++i) {
        p.text.token_ids[i] = id(rng);
        p.text.mask[i] = 1;
    }
    return p;
}

struct MicroBatch {
    Model model;
    std::vector<LabeledPair> pairs;
};

/// Small model and b pairs with M_i in {3, 4}, N = 6, d = 4.
inline MicroBatch micro_batch(std::uint64_t seed, std::size_t b = 2) {
    auto rng = make_stream(seed, "init");
    EncoderConfig ec;
    ec.patch_features = 3;
    ec.hidden = 5;
    ec.embed_dim = 4;
    ec.vocab = 12;
    MicroBatch mb{Model::init(ec, rng), {}};
    for (std::size_t i = 0; i < b; ++i)
        mb.pairs.push_back(random_pair(rng, 3 + i % 2, 5, 6, ec.patch_features, ec.vocab, i));
    return mb;
}

inline LossBuilder micro_batch_loss(MicroBatch& mb, double sigma_tg, double sigma_vg,
                                    const Variant& variant = Variant::full(), const LossSettings& ls = {}) {
    return [&mb, sigma_tg, sigma_vg, variant, ls](Tape& t) {
        std::vector<const LabeledPair*> batch;
        for (const auto& p : mb.pairs) batch.push_back(&p);
        return forward_batch(t, mb.model, batch, sigma_tg, sigma_vg, variant, ls).total;
    };
}

// ---------------------------------------------------------------------------
// Scalar reference for the grouping pipeline (plain loops, no tape)

struct ReferenceGrouping {
    std::vector<double> s_hat, alpha, groups;  // row-major
};

/// rows: [R x d], cols: [K x d]. Produces the weights over `cols` for each row
/// of `rows` and the grouped embeddings (alpha * cols).
inline ReferenceGrouping reference_grouping(const std::vector<double>& rows, std::size_t R,
                                            const std::vector<double>& cols, std::size_t K, std::size_t d,
                                            double sigma) {
    ReferenceGrouping out;
    out.s_hat.assign(R * K, 0.0);
    out.alpha.assign(R * K, 0.0);
    out.groups.assign(R * d, 0.0);
    for (std::size_t i = 0; i < R; ++i) {
        std::vector<double> s(K, 0.0);
        for (std::size_t j = 0; j < K; ++j)
            for (std::size_t k = 0; k < d; ++k) s[j] += rows[i * d + k] * cols[j * d + k];
        double lo = s[0], hi = s[0];
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            const double sh = hi > lo ? (s[j] - lo) / (hi - lo) : 1.0;
            out.s_hat[i * K + j] = sh;
            if (sh >= sigma) {
                out.alpha[i * K + j] = sh;
                total += sh;
            }
        }
        for (std::size_t j = 0; j < K; ++j) {
            out.alpha[i * K + j] /= total;
            for (std::size_t k = 0; k < d; ++k) out.groups[i * d + k] += out.alpha[i * K + j] * cols[j * d + k];
        }
    }
    return out;
}

inline std::vector<double> transpose_values(const std::vector<double>& x, std::size_t r, std::size_t c) {
    std::vector<double> t(x.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) t[j * r + i] = x[i * c + j];
    return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Battery

namespace detail {

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline std::string gradcheck_detail(const GradCheckReport& r, double tol, bool& ok) {
    ok = r.max_rel_error <= tol;
    return "max rel err " + fmt("%.3g", r.max_rel_error) + " (" + r.worst_param + "[" +
           std::to_string(r.worst_index) + "]), tol " + fmt("%.0e", tol);
}

inline Parameter random_param(const std::string& name, Shape shape, Rng& rng, double scale = 1.0) {
    Parameter p(name, std::move(shape));
    std::normal_distribution<double> nd(0.0, scale);
    for (auto& v : p.data) v = nd(rng);
    return p;
}

inline std::vector<Check> substrate_checks() {
    std::vector<Check> out;
    out.push_back({"substrate", "op-gradients", [](bool& ok) {
        auto rng = make_stream(11, "verify");
        auto a = random_param("a", {3, 4}, rng), b = random_param("b", {4, 3}, rng);
        auto c = random_param("c", {3, 3}, rng), r = random_param("r", {3}, rng);
        std::vector<double> w(9);
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto& v : w) v = nd(rng);
        LossBuilder f = [&](Tape& t) {
            auto A = t.param(a), B = t.param(b), Cm = t.param(c), R = t.param(r);
            auto x = add_row(matmul(A, B), R);
            auto y = row_softmax(tanh(x) * Cm) + row_log_softmax(transpose(x));
            auto z = l2_normalize(y) / add_scalar(exp(scale(Cm, 0.1)), 1.0);
            auto mx = row_max(x) - row_min(Cm);
            auto g = gather_rows(concat_rows({z, Cm}), {0, 4, 2});
            auto q = log(add_scalar(mul(Cm, Cm), 1.0));
            auto total = sum(mul(t.constant({3, 3}, w), g + q)) + mean(mx) + sum(diagonal(z));
            return total + sum(mean_rows(scatter_rows(z, {0, 2, 4}, 5)));
        };
        std::vector<Parameter*> ps{&a, &b, &c, &r};
        return gradcheck_detail(check_gradients(f, ps), 1e-6, ok);
    }});
    out.push_back({"substrate", "masked-softmax", [](bool& ok) {
        auto rng = make_stream(12, "verify");
        auto a = random_param("a", {3, 4}, rng);
        std::vector<bool> mask{false, true, false, false, true, false, false, false, false, false, true, true};
        LossBuilder f = [&](Tape& t) {
            auto A = t.param(a);
            return sum(mul(row_softmax(A, mask), A));
        };
        std::vector<Parameter*> ps{&a};
        auto rep = check_gradients(f, ps);
        Tape t;
        auto sm = row_softmax(t.param(a), mask);
        bool zeros = true;
        for (std::size_t i = 0; i < mask.size(); ++i) zeros = zeros && (!mask[i] || sm.data()[i] == 0.0);
        auto d = gradcheck_detail(rep, 1e-6, ok);
        ok = ok && zeros;
        return d + (zeros ? ", masked entries zero" : ", masked entries NOT zero");
    }});
    return out;
}

inline std::vector<Check> encoder_checks() {
    std::vector<Check> out;
    out.push_back({"encoders", "gradients", [](bool& ok) {
        auto mb = micro_batch(21, 1);
        auto& pair = mb.pairs[0];
        LossBuilder f = [&](Tape& t) {
            EncoderLeaves l(t, mb.model.enc);
            auto im = encode_image(pair.image, l);
            auto tx = encode_text(pair.text, l);
            return sum(mul(im.patches, im.patches)) + sum(tanh(tx.tokens)) + sum(mul(im.global, tx.global));
        };
        auto ps = mb.model.enc.all();
        return gradcheck_detail(check_gradients(f, ps), 1e-6, ok);
    }});
    out.push_back({"encoders", "pad-invariance", [](bool& ok) {
        auto mb = micro_batch(22, 1);
        auto txt = mb.pairs[0].text;
        TextSample padded;
        padded.token_ids = {0, txt.token_ids[0], 0, txt.token_ids[1], txt.token_ids[2], 0, 0};
        padded.mask = {0, 1, 0, 1, 1, 0, 0};
        for (auto& id : padded.token_ids)
            if (id == 0) id = 7;  // padding ids must not matter
        txt.token_ids.resize(3);
        txt.mask.resize(3);
        Tape t;
        EncoderLeaves l(t, mb.model.enc);
        auto a = encode_text(txt, l), b = encode_text(padded, l);
        const double dr = max_abs_diff(a.real_tokens.data(), b.real_tokens.data());
        const double dg = max_abs_diff(a.global.data(), b.global.data());
        double pad = 0.0;
        for (std::size_t i = 0; i < padded.max_len(); ++i)
            if (!padded.mask[i])
                for (std::size_t k = 0; k < b.tokens.cols(); ++k)
                    pad = std::max(pad, std::abs(b.tokens.data()[i * b.tokens.cols() + k]));
        ok = dr == 0.0 && dg == 0.0 && pad == 0.0;
        return "real rows diff " + fmt("%.3g", dr) + ", global diff " + fmt("%.3g", dg) + ", pad rows " +
               fmt("%.3g", pad);
    }});
    return out;
}

inline std::vector<Check> grouping_checks() {
    std::vector<Check> out;
    out.push_back({"grouping", "scalar-reference", [](bool& ok) {
        auto rng = make_stream(31, "verify");
        std::uniform_int_distribution<std::size_t> dim(1, 8), wide(1, 12);
        std::uniform_real_distribution<double> sg(0.0, 1.0);
        std::normal_distribution<double> nd(0.0, 1.0);
        double worst = 0.0;
        for (int trial = 0; trial < 40; ++trial) {
            const std::size_t M = dim(rng), N = wide(rng), d = dim(rng);
            std::vector<double> T(M * d), V(N * d);
            for (auto& v : T) v = nd(rng);
            for (auto& v : V) v = nd(rng);
            const double stg = sg(rng), svg = sg(rng);
            Tape t;
            auto g = group_pair(t.constant({M, d}, T), t.constant({N, d}, V), stg, svg);
            auto rt = reference_grouping(T, M, V, N, d, stg);
            auto rv = reference_grouping(V, N, T, M, d, svg);
            for (double e : {max_abs_diff(g.state.alpha.data(), rt.alpha), max_abs_diff(g.groups.tgv.data(), rt.groups),
                             max_abs_diff(g.state.alpha_v.data(), rv.alpha), max_abs_diff(g.groups.pgl.data(), rv.groups)})
                worst = std::max(worst, e);
        }
        ok = worst <= 1e-10;
        return "max abs diff " + fmt("%.3g", worst) + " over 40 random pairs";
    }});
    out.push_back({"grouping", "nonempty-groups", [](bool& ok) {
        auto rng = make_stream(32, "verify");
        std::uniform_int_distribution<std::size_t> dim(1, 8);
        std::normal_distribution<double> nd(0.0, 1.0);
        std::size_t failures = 0;
        double worst_sum = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t M = dim(rng), N = dim(rng);
            std::vector<double> S(M * N);
            for (auto& v : S) v = nd(rng);
            for (double sigma : {0.0, 0.25, 0.5, 0.75, 1.0}) {
                Tape t;
                auto s_hat = minmax_rows(t.constant({M, N}, S));
                auto alpha = alignment_weights(sparsify(s_hat, sigma));
                for (std::size_t i = 0; i < M; ++i) {
                    std::size_t best = 0;
                    double total = 0.0;
                    for (std::size_t j = 0; j < N; ++j) {
                        if (S[i * N + j] > S[i * N + best]) best = j;
                        total += alpha.data()[i * N + j];
                    }
                    failures += alpha.data()[i * N + best] <= 0.0;
                    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
                }
            }
        }
        ok = failures == 0 && worst_sum <= 1e-9;
        return std::to_string(failures) + " empty arg-max entries, max |row sum - 1| " + fmt("%.3g", worst_sum);
    }});
    out.push_back({"grouping", "gate-closed-form", [](bool& ok) {
        double worst = 0.0;
        for (double gamma : {0.99, 0.999})
            for (double m : {0.1, 0.6}) {
                GateState g(0.0, gamma);
                for (int i = 0; i < 200; ++i) g.update(m);
                worst = std::max(worst, std::abs(std::abs(g.sigma - m) - std::pow(gamma, 200) * m));
            }
        ok = worst <= 1e-10;
        return "max deviation " + fmt("%.3g", worst);
    }});
    out.push_back({"grouping", "gradients", [](bool& ok) {
        auto rng = make_stream(33, "verify");
        auto tok = random_param("tokens", {4, 3}, rng), pat = random_param("patches", {6, 3}, rng);
        auto w1 = random_param("w1", {4, 3}, rng), w2 = random_param("w2", {6, 3}, rng);
        LossBuilder f = [&](Tape& t) {
            auto g = group_pair(t.param(tok), t.param(pat), 0.3, 0.4);
            return sum(mul(g.groups.tgv, t.constant(w1.shape, w1.data))) +
                   sum(mul(g.groups.pgl, t.constant(w2.shape, w2.data)));
        };
        std::vector<Parameter*> ps{&tok, &pat};
        return gradcheck_detail(check_gradients(f, ps), 1e-6, ok);
    }});
    return out;
}

inline std::vector<Check> loss_checks() {
    std::vector<Check> out;
    out.push_back({"losses", "closed-forms", [](bool& ok) {
        const double tau = 0.3;
        Tape t;
        auto one = global_loss(t.constant({1, 2}, {0.3, -1.2}), t.constant({1, 2}, {2.0, 0.5}), tau).item();
        auto iga = iga_loss(t.constant({1, 3}, {1, 2, 3}), t.constant({1, 3}, {-1, 0, 4}), 0.3).item();
        auto two = global_loss(t.constant({2, 2}, {1, 0, 0, 1}), t.constant({2, 2}, {1, 0, 0, 1}), tau).item();
        const double expect = std::log1p(std::exp(-1.0 / tau));
        const double err = std::max({std::abs(one), std::abs(iga), std::abs(two - expect)});
        ok = err <= 1e-10;
        return "max deviation " + fmt("%.3g", err);
    }});
    out.push_back({"losses", "bcga-gradients", [](bool& ok) {
        auto rng = make_stream(41, "verify");
        auto bp = BcgaParams::init("bcga", 4, rng);
        auto q = random_param("q", {3, 4}, rng), kv = random_param("kv", {5, 4}, rng);
        LossBuilder f = [&](Tape& t) {
            BcgaLeaves l(t, bp);
            auto qq = t.param(q);
            return grouped_crossmodal_loss(qq, bcga_attend(qq, t.param(kv), l), 0.1);
        };
        auto ps = bp.all();
        ps.push_back(&q);
        ps.push_back(&kv);
        return gradcheck_detail(check_gradients(f, ps), 1e-6, ok);
    }});
    out.push_back({"losses", "total-gradients", [](bool& ok) {
        // Denominator floor 1e-6 sits well above central-difference noise (~1e-11).
        auto mb = micro_batch(42);
        auto ps = mb.model.params();
        auto d = gradcheck_detail(check_gradients(micro_batch_loss(mb, 0.3, 0.3), ps, 1e-5, 1e-6), 1e-4, ok);
        return d + ", floor 1e-6";
    }});
    return out;
}

inline Corpus tiny_corpus(std::uint64_t seed) {
    WorldConfig wc;
    wc.num_classes = 2;
    wc.grid_rows = 4;
    wc.grid_cols = 4;
    wc.region_max = 2;
    wc.vocab = 32;
    return generate_corpus(seed, wc, {12, 2, 6});
}

inline TrainConfig tiny_train_config(const Corpus& c, std::uint64_t seed) {
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seed = seed;
    tc.encoder.vocab = c.world.config.vocab;
    tc.encoder.patch_features = c.world.config.patch_features;
    tc.encoder.hidden = 8;
    tc.encoder.embed_dim = 4;
    return tc;
}

inline std::vector<Check> trainer_checks() {
    std::vector<Check> out;
    out.push_back({"trainer", "determinism", [](bool& ok) {
        auto corpus = tiny_corpus(51);
        auto tc = tiny_train_config(corpus, 51);
        auto run = [&] {
            std::string log;
            auto s = init_state(tc, corpus.train.size());
            FitSinks sinks;
            sinks.on_step = [&](std::size_t st, const LossBreakdown& b) { log += loss_record_json(st, b) + "\n"; };
            fit(s, tc, corpus.train, sinks);
            return log;
        };
        const auto a = run(), b = run();
        ok = !a.empty() && a == b;
        return ok ? "identical loss logs" : "loss logs differ";
    }});
    out.push_back({"trainer", "checkpoint-resume", [](bool& ok) {
        auto corpus = tiny_corpus(52);
        auto tc = tiny_train_config(corpus, 52);
        auto full = init_state(tc, corpus.train.size());
        fit(full, tc, corpus.train);
        auto part = init_state(tc, corpus.train.size());
        fit(part, tc, corpus.train, {}, 4);
        auto resumed = state_from_table(read_table(ByteReader(encode_checkpoint(part).buffer())));
        fit(resumed, tc, corpus.train);
        ok = encode_checkpoint(full).buffer() == encode_checkpoint(resumed).buffer();
        return ok ? "resumed run is bitwise identical" : "resumed run diverges";
    }});
    return out;
}

inline std::vector<Check> evaluation_checks() {
    std::vector<Check> out;
    out.push_back({"evaluation", "roc-auc", [](bool& ok) {
        const double perfect = roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, {false, false, true, true});
        const double ties = roc_auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, {false, true, false, true});
        // Positives at 0.4 and 0.8 against negatives 0.1, 0.6: 3 of 4 pairs ordered.
        const double mixed = roc_auc(std::vector<double>{0.1, 0.4, 0.6, 0.8}, {false, true, false, true});
        ok = perfect == 1.0 && ties == 0.5 && mixed == 0.75;
        return "perfect " + fmt("%.3g", perfect) + ", ties " + fmt("%.3g", ties) + ", mixed " + fmt("%.3g", mixed);
    }});
    out.push_back({"evaluation", "precision-monotone", [](bool& ok) {
        auto rng = make_stream(61, "verify");
        std::normal_distribution<double> nd(0.0, 1.0);
        Matrix s(6, 9), e(6, 9);
        for (std::size_t i = 0; i < s.data.size(); ++i) {
            s.data[i] = nd(rng);
            e.data[i] = std::exp(3.0 * s.data[i]) + 2.0;
        }
        std::vector<std::size_t> q{0, 1, 2, 0, 1, 2}, c{0, 1, 2, 0, 1, 2, 0, 1, 2};
        auto a = retrieval_from_scores(s, q, c, {1, 3, 5});
        auto b = retrieval_from_scores(e, q, c, {1, 3, 5});
        ok = a.rankings == b.rankings && a.precision == b.precision;
        return ok ? "rankings unchanged under monotone transform" : "rankings changed";
    }});
    return out;
}

}  // namespace detail

inline std::vector<Check> verification_checks() {
    std::vector<Check> all;
    for (auto&& group : {detail::substrate_checks(), detail::encoder_checks(), detail::grouping_checks(),
                         detail::loss_checks(), detail::trainer_checks(), detail::evaluation_checks()})
        for (auto& c : group) all.push_back(c);
    return all;
}

/// Runs every check whose "group/name" contains `filter` (empty runs all).
/// Exceptions inside a check count as failures.
inline std::vector<CheckResult> run_verification(const std::string& filter = "") {
    std::vector<CheckResult> out;
    for (const auto& c : verification_checks()) {
        const auto id = c.group + "/" + c.name;
        if (!filter.empty() && id.find(filter) == std::string::npos) continue;
        CheckResult r{c.group, c.name, false, "", 0.0};
        const auto t0 = std::chrono::steady_clock::now();
        try {
            r.detail = c.run(r.passed);
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("threw: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace aga
