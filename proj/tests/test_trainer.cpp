#include <gtest/gtest.h>

#include "aga/trainer.hpp"
#include "aga/verify.hpp"

using namespace aga;
using detail::tiny_corpus;
using detail::tiny_train_config;

namespace {

struct Run {
    std::vector<std::string> losses;
    std::vector<std::string> gates;
    std::vector<LossBreakdown> values;
};

Run run_fit(TrainerState& s, const TrainConfig& cfg, const std::vector<LabeledPair>& train,
            std::size_t max_steps = static_cast<std::size_t>(-1)) {
    Run r;
    FitSinks sinks;
    sinks.on_step = [&](std::size_t step, const LossBreakdown& b) {
        r.losses.push_back(loss_record_json(step, b));
        r.values.push_back(b);
    };
    sinks.on_gates = [&](std::size_t step, double tg, double vg) { r.gates.push_back(gate_csv_line(step, tg, vg)); };
    fit(s, cfg, train, sinks, max_steps);
    return r;
}

std::vector<std::uint8_t> checkpoint_bytes(TrainerState& s) { return encode_checkpoint(s).buffer(); }

}  // namespace

TEST(Fit, SameSeedSameLogs) {
    const auto c = tiny_corpus(1);
    const auto cfg = tiny_train_config(c, 1);
    auto a = init_state(cfg, c.train.size()), b = init_state(cfg, c.train.size());
    const auto ra = run_fit(a, cfg, c.train), rb = run_fit(b, cfg, c.train);
    EXPECT_EQ(ra.losses.size(), 6u);  // 12 pairs, batch 4, 2 epochs
    EXPECT_EQ(ra.losses, rb.losses);
    EXPECT_EQ(ra.gates, rb.gates);
    EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
}

TEST(Fit, ZeroEpochsLeavesInitialState) {
    const auto c = tiny_corpus(2);
    auto cfg = tiny_train_config(c, 2);
    cfg.epochs = 0;
    auto s = init_state(cfg, c.train.size()), fresh = init_state(cfg, c.train.size());
    const auto r = run_fit(s, cfg, c.train);
    EXPECT_TRUE(r.losses.empty());
    EXPECT_EQ(s.step, 0u);
    EXPECT_EQ(checkpoint_bytes(s), checkpoint_bytes(fresh));
}

TEST(Fit, GlobalOnlyLogsZeroGroupedLossesAndLeavesBcgaUntouched) {
    const auto c = tiny_corpus(3);
    auto cfg = tiny_train_config(c, 3);
    cfg.variant = Variant::global_only();
    auto s = init_state(cfg, c.train.size());
    const auto before = s.model.lv.wq.data;
    const auto r = run_fit(s, cfg, c.train);
    for (const auto& v : r.values) {
        EXPECT_EQ(v.l_tf, 0.0);
        EXPECT_EQ(v.l_vf, 0.0);
        EXPECT_EQ(v.l_gla, 0.0);
        EXPECT_EQ(v.l_gva, 0.0);
        EXPECT_GT(v.l_g, 0.0);
    }
    EXPECT_EQ(s.model.lv.wq.data, before);
    EXPECT_EQ(s.gate_tg.step_count, 0u);
}

TEST(Fit, NoBcgaKeepsInstanceLossesOnly) {
    const auto c = tiny_corpus(4);
    auto cfg = tiny_train_config(c, 4);
    cfg.variant = Variant::no_bcga();
    auto s = init_state(cfg, c.train.size());
    for (const auto& v : run_fit(s, cfg, c.train).values) {
        EXPECT_GT(v.l_tf, 0.0);
        EXPECT_EQ(v.l_gla, 0.0);
        EXPECT_EQ(v.l_gva, 0.0);
    }
}

TEST(Fit, FixedThresholdGatesNeverMove) {
    const auto v = Variant::parse("fixed:0.00277,0.01031");
    EXPECT_NEAR(v.sigma_tg, 1.0 / 361.0, 1e-5);
    EXPECT_NEAR(v.sigma_vg, 1.0 / 97.0, 1e-5);
    const auto c = tiny_corpus(5);
    auto cfg = tiny_train_config(c, 5);
    cfg.variant = Variant::fixed(1.0 / 361.0, 1.0 / 97.0);
    auto s = init_state(cfg, c.train.size());
    run_fit(s, cfg, c.train);
    EXPECT_EQ(s.gate_tg.sigma, 1.0 / 361.0);
    EXPECT_EQ(s.gate_vg.sigma, 1.0 / 97.0);
}

TEST(Fit, ResumeIsBitwiseIdentical) {
    const auto c = tiny_corpus(6);
    auto cfg = tiny_train_config(c, 6);
    cfg.epochs = 3;
    auto whole = init_state(cfg, c.train.size());
    const auto rw = run_fit(whole, cfg, c.train);

    auto first = init_state(cfg, c.train.size());
    auto r1 = run_fit(first, cfg, c.train, 4);  // stops mid-epoch
    auto resumed = state_from_table(read_table(ByteReader(checkpoint_bytes(first))));
    const auto r2 = run_fit(resumed, cfg, c.train);
    r1.losses.insert(r1.losses.end(), r2.losses.begin(), r2.losses.end());
    EXPECT_EQ(r1.losses, rw.losses);
    EXPECT_EQ(checkpoint_bytes(resumed), checkpoint_bytes(whole));
}

TEST(Fit, LossDecreasesOnQuietCorpus) {
    WorldConfig wc;
    wc.patch_noise = 0.0;
    const auto c = generate_corpus(7, wc, {20, 1, 1});
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 20;
    cfg.seed = 7;
    cfg.encoder.vocab = wc.vocab;
    cfg.encoder.patch_features = wc.patch_features;
    auto s = init_state(cfg, c.train.size());
    const auto r = run_fit(s, cfg, c.train);
    ASSERT_EQ(r.values.size(), 50u);
    EXPECT_LT(r.values.back().l_total, r.values.front().l_total);
}

TEST(Fit, GateTrajectoryStaysInsideBatchMeanHull) {
    const auto c = tiny_corpus(8);
    const auto cfg = tiny_train_config(c, 8);
    auto s = init_state(cfg, c.train.size());
    const auto r = run_fit(s, cfg, c.train);
    EXPECT_EQ(r.gates.front(), gate_csv_line(0, 0.0, 0.0));
    for (const auto& [step, sigma] : s.gate_tg.trajectory) {
        EXPECT_GE(sigma, 0.0);
        EXPECT_LE(sigma, 1.0);
    }
    EXPECT_EQ(s.gate_tg.trajectory.size(), s.step);
}

TEST(Fit, NonFiniteInputAbortsWithPairIndex) {
    auto c = tiny_corpus(9);
    c.train[5].image.patches[0] = std::numeric_limits<double>::infinity();
    auto cfg = tiny_train_config(c, 9);
    cfg.batch_size = 12;
    auto s = init_state(cfg, c.train.size());
    try {
        fit(s, cfg, c.train);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("training pair 5"), std::string::npos) << e.what();
    }
}

TEST(Fit, MismatchedCorpusRejected) {
    const auto c = tiny_corpus(10);
    const auto cfg = tiny_train_config(c, 10);
    auto s = init_state(cfg, 3);
    EXPECT_THROW(fit(s, cfg, c.train), ContractError);
}

TEST(AdamW, SkipsParametersWithoutGradient) {
    Parameter used("used", {2}), idle("idle", {2});
    used.data = {1.0, -1.0};
    idle.data = {3.0, 4.0};
    used.grad = {0.5, -0.5};
    used.has_grad = true;
    AdamW opt;
    opt.cfg.lr = 0.1;
    opt.step({&used, &idle});
    EXPECT_EQ(idle.data, (std::vector<double>{3.0, 4.0}));
    EXPECT_EQ(opt.m.count("idle"), 0u);
    // The first bias-corrected step moves each weight by about lr against its gradient sign.
    EXPECT_NEAR(used.data[0], 1.0 * (1.0 - 0.1 * 1e-4) - 0.1, 1e-7);
    EXPECT_NEAR(used.data[1], -1.0 * (1.0 - 0.1 * 1e-4) + 0.1, 1e-7);
}

TEST(Checkpoint, CorruptBytesRejected) {
    const auto c = tiny_corpus(11);
    auto s = init_state(tiny_train_config(c, 11), c.train.size());
    auto bytes = checkpoint_bytes(s);
    bytes.pop_back();
    EXPECT_THROW(read_table(ByteReader(bytes)), FormatError);
    bytes = checkpoint_bytes(s);
    bytes[4] = 9;  // version
    EXPECT_THROW(read_table(ByteReader(bytes)), FormatError);
}

TEST(Checkpoint, RecordsVariantAndSeed) {
    const auto c = tiny_corpus(12);
    auto cfg = tiny_train_config(c, 0xDEADBEEFCAFEull);
    cfg.variant = Variant::fixed(0.25, 0.5);
    auto s = init_state(cfg, c.train.size());
    const auto back = state_from_table(read_table(ByteReader(checkpoint_bytes(s))));
    EXPECT_EQ(back.seed, 0xDEADBEEFCAFEull);
    EXPECT_EQ(back.variant.str(), "fixed:0.25,0.5");
}

TEST(Logging, RecordFormats) {
    EXPECT_EQ(gate_csv_line(3, 0.5, 0.25), "3,0.5,0.25");
    const auto j = nlohmann::json::parse(loss_record_json(2, {1, 2, 3, 4, 5, 6}));
    EXPECT_EQ(j["step"], 2);
    EXPECT_EQ(j["l_total"], 6.0);
    EXPECT_EQ(j.size(), 7u);
}

TEST(Variant, ParseRejectsGarbage) {
    EXPECT_THROW(Variant::parse("partial"), ContractError);
    EXPECT_THROW(Variant::parse("fixed:0.1"), ContractError);
    EXPECT_THROW(Variant::parse("fixed:0.1,x"), ContractError);
    EXPECT_THROW(Variant::parse("fixed:0.1,2"), ContractError);
    for (const char* s : {"full", "global-only", "no-bcga"}) EXPECT_EQ(Variant::parse(s).str(), s);
}
