#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aga/binary_io.hpp"
#include "aga/model.hpp"

namespace aga {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// Decoupled-weight-decay Adam. Parameters that no backward pass reached in
/// the current step are skipped entirely, moments included.
struct AdamW {
    AdamWConfig cfg;
    std::size_t t = 0;
    std::map<std::string, std::vector<double>> m, v;

    void step(const std::vector<Parameter*>& params) {
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (auto* p : params) {
            if (!p->has_grad) continue;
            auto& mp = m[p->name];
            auto& vp = v[p->name];
            if (mp.empty()) mp.assign(p->size(), 0.0);
            if (vp.empty()) vp.assign(p->size(), 0.0);
            for (std::size_t i = 0; i < p->size(); ++i) {
                const double g = p->grad[i];
                mp[i] = cfg.beta1 * mp[i] + (1.0 - cfg.beta1) * g;
                vp[i] = cfg.beta2 * vp[i] + (1.0 - cfg.beta2) * g * g;
                p->data[i] *= 1.0 - cfg.lr * cfg.weight_decay;
                p->data[i] -= cfg.lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + cfg.eps);
            }
        }
    }
};

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 16;
    AdamWConfig optim;
    LossSettings loss;
    double gamma_tg = 0.99;
    double gamma_vg = 0.99;
    double sigma0 = 0.0;
    Variant variant;
    std::uint64_t seed = 0;
    EncoderConfig encoder;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only

    void validate() const {
        if (batch_size == 0) throw ContractError("train config field 'batch_size': must be >= 1");
        if (!(optim.lr > 0.0)) throw ContractError("train config field 'lr': must be > 0");
        if (!(gamma_tg >= 0.0 && gamma_tg < 1.0)) throw ContractError("train config field 'gamma_tg': must be in [0, 1)");
        if (!(gamma_vg >= 0.0 && gamma_vg < 1.0)) throw ContractError("train config field 'gamma_vg': must be in [0, 1)");
        if (!(sigma0 >= 0.0 && sigma0 <= 1.0)) throw ContractError("train config field 'sigma0': must be in [0, 1]");
        loss.temps.validate();
        loss.weights.validate();
        encoder.validate();
    }
};

struct TrainerState {
    Model model;
    GateState gate_tg, gate_vg;
    AdamW optim;
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::size_t cursor = 0;  // position inside the current epoch's order
    std::vector<std::size_t> order;
    Rng shuffle_rng;
    Variant variant;         // recorded for evaluation reports
    std::uint64_t seed = 0;
};

/// Fresh state: parameters from the "init" stream, gates at sigma0 (or the
/// fixed thresholds), shuffle stream seeded.
inline TrainerState init_state(const TrainConfig& cfg, std::size_t corpus_size) {
    cfg.validate();
    TrainerState s;
    auto init_rng = make_stream(cfg.seed, "init");
    s.model = Model::init(cfg.encoder, init_rng);
    const bool fixed = cfg.variant.kind == Variant::Kind::fixed_threshold;
    s.gate_tg = GateState(fixed ? cfg.variant.sigma_tg : cfg.sigma0, cfg.gamma_tg);
    s.gate_vg = GateState(fixed ? cfg.variant.sigma_vg : cfg.sigma0, cfg.gamma_vg);
    s.optim.cfg = cfg.optim;
    s.shuffle_rng = make_stream(cfg.seed, "shuffle");
    s.variant = cfg.variant;
    s.seed = cfg.seed;
    s.order.resize(corpus_size);
    std::iota(s.order.begin(), s.order.end(), std::size_t{0});
    return s;
}

/// One optimization step: forward with the pre-step gate thresholds, backward,
/// AdamW update, then one EMA step per gate from this batch's normalized matrices.
inline LossBreakdown train_step(std::span<const LabeledPair* const> batch, TrainerState& s,
                                const TrainConfig& cfg) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    s.model.zero_grad();
    Tape tape;
    auto fwd = forward_batch(tape, s.model, batch, s.gate_tg.sigma, s.gate_vg.sigma, cfg.variant, cfg.loss);
    if (!all_finite(fwd.values)) throw NumericError("non-finite total loss");
    tape.backward(fwd.total);
    s.optim.step(s.model.params());
    if (cfg.variant.updates_gates()) {
        s.gate_tg.update(pooled_mean(fwd.s_hat_t));
        s.gate_vg.update(pooled_mean(fwd.s_hat_v));
    }
    ++s.step;
    return fwd.values;
}

// ---------------------------------------------------------------------------
// Checkpoint: "AGAK", u32 version, u32 entry count, then per entry
// (u32 name length, name, u32 rank, u64 extents..., f64 payload).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    Shape shape;
    std::vector<double> data;
};

using TensorTable = std::map<std::string, NamedTensor>;

namespace detail {

// mt19937_64 state words are split into 32-bit halves so they survive a float64 payload.
inline NamedTensor rng_to_tensor(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    std::istringstream is(os.str());
    std::vector<double> words;
    std::uint64_t w = 0;
    while (is >> w) {
        words.push_back(static_cast<double>(w >> 32));
        words.push_back(static_cast<double>(w & 0xffffffffULL));
    }
    return {{words.size()}, words};
}

inline Rng rng_from_tensor(const NamedTensor& t) {
    std::ostringstream os;
    for (std::size_t i = 0; i + 1 < t.data.size(); i += 2) {
        const auto hi = static_cast<std::uint64_t>(t.data[i]);
        const auto lo = static_cast<std::uint64_t>(t.data[i + 1]);
        os << ((hi << 32) | lo) << ' ';
    }
    Rng rng;
    std::istringstream is(os.str());
    is >> rng;
    if (!is && !is.eof()) throw FormatError("checkpoint: corrupt rng state");
    return rng;
}

inline NamedTensor gate_to_tensor(const GateState& g) {
    return {{3}, {g.sigma, g.gamma, static_cast<double>(g.step_count)}};
}

inline NamedTensor trajectory_to_tensor(const GateState& g) {
    NamedTensor t{{g.trajectory.size(), 2}, {}};
    for (const auto& [step, sigma] : g.trajectory) {
        t.data.push_back(static_cast<double>(step));
        t.data.push_back(sigma);
    }
    return t;
}

}  // namespace detail

inline TensorTable to_table(TrainerState& s) {
    TensorTable tab;
    for (auto* p : s.model.params()) {
        tab["param/" + p->name] = {p->shape, p->data};
        if (auto it = s.optim.m.find(p->name); it != s.optim.m.end()) {
            tab["adam_m/" + p->name] = {p->shape, it->second};
            tab["adam_v/" + p->name] = {p->shape, s.optim.v.at(p->name)};
        }
    }
    tab["meta/mix_window"] = {{1}, {static_cast<double>(s.model.enc.mix_window)}};
    tab["adam/t"] = {{1}, {static_cast<double>(s.optim.t)}};
    tab["adam/config"] = {{5}, {s.optim.cfg.lr, s.optim.cfg.beta1, s.optim.cfg.beta2, s.optim.cfg.eps,
                                s.optim.cfg.weight_decay}};
    tab["gate_tg/state"] = detail::gate_to_tensor(s.gate_tg);
    tab["gate_vg/state"] = detail::gate_to_tensor(s.gate_vg);
    tab["gate_tg/trajectory"] = detail::trajectory_to_tensor(s.gate_tg);
    tab["gate_vg/trajectory"] = detail::trajectory_to_tensor(s.gate_vg);
    tab["train/progress"] = {{3}, {static_cast<double>(s.step), static_cast<double>(s.epoch),
                                   static_cast<double>(s.cursor)}};
    std::vector<double> order(s.order.begin(), s.order.end());
    tab["train/order"] = {{order.size()}, order};
    tab["rng/shuffle"] = detail::rng_to_tensor(s.shuffle_rng);
    tab["meta/variant"] = {{3}, {static_cast<double>(s.variant.kind), s.variant.sigma_tg, s.variant.sigma_vg}};
    tab["meta/seed"] = {{2}, {static_cast<double>(s.seed >> 32), static_cast<double>(s.seed & 0xffffffffULL)}};
    return tab;
}

inline ByteWriter encode_checkpoint(TrainerState& s) {
    const auto tab = to_table(s);
    ByteWriter w;
    w.bytes("AGAK");
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(tab.size()));
    for (const auto& [name, t] : tab) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto e : t.shape) w.u64(e);
        for (auto v : t.data) w.f64(v);
    }
    return w;
}

inline void save_checkpoint(const std::string& path, TrainerState& s) { encode_checkpoint(s).save(path); }

inline TensorTable read_table(ByteReader r) {
    r.expect_magic("AGAK");
    if (const auto v = r.u32(); v != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(v));
    TensorTable tab;
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.str();
        NamedTensor t;
        t.shape.resize(r.u32());
        for (auto& e : t.shape) e = static_cast<std::size_t>(r.u64());
        const auto n = numel(t.shape);
        if (n > (std::size_t{1} << 32)) throw FormatError("checkpoint: tensor '" + name + "' too large");
        t.data.resize(n);
        for (auto& v : t.data) v = r.f64();
        tab.emplace(std::move(name), std::move(t));
    }
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
    return tab;
}

inline TrainerState state_from_table(const TensorTable& tab) {
    auto get = [&](const std::string& name) -> const NamedTensor& {
        auto it = tab.find(name);
        if (it == tab.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
        return it->second;
    };
    auto shape_of = [&](const std::string& name, std::size_t axis) { return get("param/" + name).shape.at(axis); };

    EncoderConfig ec;
    ec.patch_features = shape_of("enc/patch_proj", 0);
    ec.hidden = shape_of("enc/patch_proj", 1);
    ec.embed_dim = shape_of("enc/patch_head", 1);
    ec.vocab = shape_of("enc/token_table", 0);
    ec.mix_window = static_cast<std::size_t>(get("meta/mix_window").data.at(0));

    TrainerState s;
    auto scratch = make_stream(0, "init");
    s.model = Model::init(ec, scratch);
    for (auto* p : s.model.params()) {
        const auto& t = get("param/" + p->name);
        if (t.shape != p->shape)
            throw FormatError("checkpoint: tensor '" + p->name + "' has shape " + shape_str(t.shape) +
                              ", expected " + shape_str(p->shape));
        p->data = t.data;
        if (auto it = tab.find("adam_m/" + p->name); it != tab.end()) {
            s.optim.m[p->name] = it->second.data;
            s.optim.v[p->name] = get("adam_v/" + p->name).data;
        }
    }
    const auto& oc = get("adam/config").data;
    s.optim.cfg = {oc.at(0), oc.at(1), oc.at(2), oc.at(3), oc.at(4)};
    s.optim.t = static_cast<std::size_t>(get("adam/t").data.at(0));
    auto load_gate = [&](const std::string& prefix) {
        const auto& st = get(prefix + "/state").data;
        GateState g(st.at(0), st.at(1));
        g.step_count = static_cast<std::size_t>(st.at(2));
        const auto& tr = get(prefix + "/trajectory").data;
        for (std::size_t i = 0; i + 1 < tr.size(); i += 2)
            g.trajectory.emplace_back(static_cast<std::size_t>(tr[i]), tr[i + 1]);
        return g;
    };
    s.gate_tg = load_gate("gate_tg");
    s.gate_vg = load_gate("gate_vg");
    const auto& pr = get("train/progress").data;
    s.step = static_cast<std::size_t>(pr.at(0));
    s.epoch = static_cast<std::size_t>(pr.at(1));
    s.cursor = static_cast<std::size_t>(pr.at(2));
    for (double v : get("train/order").data) s.order.push_back(static_cast<std::size_t>(v));
    s.shuffle_rng = detail::rng_from_tensor(get("rng/shuffle"));
    const auto& mv = get("meta/variant").data;
    const auto kind = static_cast<int>(mv.at(0));
    if (kind < 0 || kind > static_cast<int>(Variant::Kind::fixed_threshold))
        throw FormatError("checkpoint: unknown variant code " + std::to_string(kind));
    s.variant = {static_cast<Variant::Kind>(kind), mv.at(1), mv.at(2)};
    const auto& ms = get("meta/seed").data;
    s.seed = (static_cast<std::uint64_t>(ms.at(0)) << 32) | static_cast<std::uint64_t>(ms.at(1));
    return s;
}

inline TrainerState load_checkpoint(const std::string& path) {
    return state_from_table(read_table(ByteReader::load(path)));
}

// ---------------------------------------------------------------------------
// Logging formats

inline std::string loss_record_json(std::size_t step, const LossBreakdown& b) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["l_g"] = b.l_g;
    j["l_tf"] = b.l_tf;
    j["l_vf"] = b.l_vf;
    j["l_gla"] = b.l_gla;
    j["l_gva"] = b.l_gva;
    j["l_total"] = b.l_total;
    return j.dump();
}

inline std::string gate_csv_line(std::size_t step, double sigma_tg, double sigma_vg) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g", step, sigma_tg, sigma_vg);
    return buf;
}

inline constexpr const char* kGateCsvHeader = "step,sigma_tg,sigma_vg";

struct FitSinks {
    std::function<void(std::size_t step, const LossBreakdown&)> on_step;
    std::function<void(std::size_t step, double sigma_tg, double sigma_vg)> on_gates;
    std::function<void(TrainerState&)> on_checkpoint;
};

/// Runs the epoch loop from `s` until all epochs are done or `max_steps`
/// further steps have been taken. Each epoch starts with a seeded shuffle.
inline void fit(TrainerState& s, const TrainConfig& cfg, const std::vector<LabeledPair>& train,
                const FitSinks& sinks = {}, std::size_t max_steps = static_cast<std::size_t>(-1)) {
    cfg.validate();
    if (train.empty()) throw ContractError("fit: empty training set");
    if (s.order.size() != train.size())
        throw ContractError("fit: state was initialised for " + std::to_string(s.order.size()) +
                            " pairs, corpus has " + std::to_string(train.size()));
    if (s.step == 0 && sinks.on_gates) sinks.on_gates(0, s.gate_tg.sigma, s.gate_vg.sigma);
    std::size_t taken = 0;
    while (s.epoch < cfg.epochs && taken < max_steps) {
        if (s.cursor == 0) std::shuffle(s.order.begin(), s.order.end(), s.shuffle_rng);
        const std::size_t end = std::min(s.cursor + cfg.batch_size, train.size());
        std::vector<const LabeledPair*> batch;
        for (std::size_t i = s.cursor; i < end; ++i) batch.push_back(&train[s.order[i]]);
        LossBreakdown values;
        try {
            values = train_step(batch, s, cfg);
        } catch (const NumericError& e) {
            std::string where = e.what();
            // Map the in-batch index back to the corpus index for the diagnostic.
            const auto at = where.rfind("batch pair ");
            if (at != std::string::npos) {
                const auto k = std::stoul(where.substr(at + 11));
                where += " (training pair " + std::to_string(s.order[s.cursor + k]) + ", step " +
                         std::to_string(s.step + 1) + ")";
            }
            throw NumericError(where);
        }
        s.cursor = end;
        if (s.cursor >= train.size()) {
            s.cursor = 0;
            ++s.epoch;
        }
        ++taken;
        if (sinks.on_step) sinks.on_step(s.step, values);
        if (sinks.on_gates) sinks.on_gates(s.step, s.gate_tg.sigma, s.gate_vg.sigma);
        if (sinks.on_checkpoint && cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0)
            sinks.on_checkpoint(s);
    }
}

}  // namespace aga
