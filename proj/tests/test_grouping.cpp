#include <gtest/gtest.h>

#include "aga/gradcheck.hpp"
#include "aga/grouping.hpp"
#include "oracles.hpp"

using namespace aga;

namespace {

std::vector<double> values(const DiffTensor& t) { return {t.data().begin(), t.data().end()}; }

void expect_near_all(std::span<const double> a, const std::vector<double>& b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(Similarity, OrthonormalMatchedRowsGiveIdentity) {
    Tape t;
    auto e = t.constant({2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(values(similarity_matrix(e, e)), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Similarity, BilinearInTokens) {
    std::mt19937_64 rng(1);
    auto T = oracle::random_vec(rng, 6), V = oracle::random_vec(rng, 8);
    Tape t;
    auto s = similarity_matrix(t.constant({3, 2}, T), t.constant({4, 2}, V));
    for (auto& v : T) v *= 2.5;
    auto s2 = similarity_matrix(t.constant({3, 2}, T), t.constant({4, 2}, V));
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(s2.data()[i], 2.5 * s.data()[i], 1e-12);
    std::vector<double> ref(12);
    for (std::size_t m = 0; m < 3; ++m)
        for (std::size_t n = 0; n < 4; ++n) ref[m * 4 + n] = (T[m * 2] * V[n * 2] + T[m * 2 + 1] * V[n * 2 + 1]) / 2.5;
    expect_near_all(s.data(), ref, 1e-12);
}

TEST(MinmaxRows, ForcedArithmeticAndConstantRow) {
    Tape t;
    EXPECT_EQ(values(minmax_rows(t.constant({2, 3}, {1, 2, 3, 4, 4, 4}))), (std::vector<double>{0, 0.5, 1, 1, 1, 1}));
}

TEST(MinmaxRows, ConstantRowPassesNoGradient) {
    Tape t;
    auto x = t.variable({1, 3}, {2, 2, 2});
    t.backward(sum(mul(minmax_rows(x), t.constant({1, 3}, {1, 2, 3}))));
    EXPECT_EQ(x.grad(), (std::vector<double>{0, 0, 0}));
}

TEST(MinmaxRows, OracleAndGradient) {
    std::mt19937_64 rng(2);
    Parameter s("s", {5, 7});
    s.data = oracle::random_vec(rng, 35);
    // min-max of the raw similarity equals the oracle's s_hat on identity columns
    Tape t;
    auto y = minmax_rows(t.param(s));
    for (std::size_t r = 0; r < 5; ++r) {
        const auto b = s.data.begin() + r * 7;
        const double lo = *std::min_element(b, b + 7), hi = *std::max_element(b, b + 7);
        for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(y.data()[r * 7 + j], (s.data[r * 7 + j] - lo) / (hi - lo), 1e-15);
    }
    const auto w = oracle::random_vec(rng, 35);
    LossBuilder f = [&](Tape& tp) { return sum(mul(minmax_rows(tp.param(s)), tp.constant({5, 7}, w))); };
    std::vector<Parameter*> ps{&s};
    EXPECT_LE(finite_difference_check(f, ps), 1e-6);
}

TEST(MinmaxRows, InvariantToPositiveAffineRowMaps) {
    std::mt19937_64 rng(3);
    auto x = oracle::random_vec(rng, 12);
    auto z = x;
    for (auto& v : z) v = 3.0 * v - 7.0;
    Tape t;
    expect_near_all(minmax_rows(t.constant({3, 4}, z)).data(), values(minmax_rows(t.constant({3, 4}, x))), 1e-12);
}

TEST(Sparsify, ForcedCases) {
    Tape t;
    auto x = t.constant({2, 3}, {0, 0.5, 1, 0.2, 1, 0.9});
    EXPECT_EQ(values(sparsify(x, 0.0)), values(x));
    EXPECT_EQ(values(sparsify(x, 1.0)), (std::vector<double>{0, 0, 1, 0, 1, 0}));
    EXPECT_EQ(values(sparsify(t.constant({1, 3}, {0, 0.5, 1}), 0.4)), (std::vector<double>{0, 0.5, 1}));
    EXPECT_THROW(sparsify(x, 1.5), ContractError);
    EXPECT_THROW(sparsify(x, -0.1), ContractError);
}

TEST(Sparsify, SurvivorsShrinkAsSigmaGrows) {
    std::mt19937_64 rng(4);
    Tape t;
    auto s_hat = minmax_rows(t.constant({6, 9}, oracle::random_vec(rng, 54)));
    std::size_t last = 55;
    for (double sigma = 0.0; sigma <= 1.0; sigma += 0.05) {
        std::size_t alive = 0;
        for (double v : sparsify(s_hat, sigma).data()) alive += v > 0.0;
        EXPECT_LE(alive, last);
        last = alive;
    }
}

TEST(AlignmentWeights, ForcedArithmetic) {
    Tape t;
    auto a = alignment_weights(t.constant({2, 3}, {0, 0.5, 1, 0, 1, 0}));
    expect_near_all(a.data(), {0, 1.0 / 3.0, 2.0 / 3.0, 0, 1, 0}, 1e-15);
    EXPECT_THROW(alignment_weights(t.constant({1, 2}, {0, 0})), ContractError);
}

TEST(GroupEmbed, OneHotAndUniform) {
    Tape t;
    auto src = t.constant({3, 2}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(values(group_embed(t.constant({1, 3}, {0, 1, 0}), src)), (std::vector<double>{3, 4}));
    auto centroid = group_embed(t.constant({1, 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3}), src);
    expect_near_all(centroid.data(), {3, 4}, 1e-15);
}

TEST(GroupPair, MatchesScalarOracleBothDirections) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t M = dim(rng), N = dim(rng) + 4, d = dim(rng);
        const auto T = oracle::random_vec(rng, M * d), V = oracle::random_vec(rng, N * d);
        const double stg = u(rng), svg = u(rng);
        Tape t;
        auto g = group_pair(t.constant({M, d}, T), t.constant({N, d}, V), stg, svg);
        const auto ot = oracle::group(T, M, V, N, d, stg), ov = oracle::group(V, N, T, M, d, svg);
        expect_near_all(g.state.s_hat.data(), ot.s_hat, 1e-12);
        expect_near_all(g.state.alpha.data(), ot.alpha, 1e-10);
        expect_near_all(g.groups.tgv.data(), ot.grouped, 1e-10);
        expect_near_all(g.state.alpha_v.data(), ov.alpha, 1e-10);
        expect_near_all(g.groups.pgl.data(), ov.grouped, 1e-10);
    }
}

TEST(GroupPair, OrthonormalMatchedEmbeddingsAlignToThemselves) {
    Tape t;
    auto e = t.constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    for (double sigma : {0.0, 0.5, 1.0}) {
        auto g = group_pair(e, e, 1.0, sigma);
        EXPECT_EQ(values(g.groups.tgv), values(e));
    }
}

TEST(GroupPair, ArgmaxAlwaysSurvives) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        const auto S = oracle::random_vec(rng, 20);
        for (double sigma : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            Tape t;
            auto a = alignment_weights(sparsify(minmax_rows(t.constant({4, 5}, S)), sigma));
            for (std::size_t r = 0; r < 4; ++r) {
                const auto best = std::max_element(S.begin() + r * 5, S.begin() + r * 5 + 5) - (S.begin() + r * 5);
                EXPECT_GT(a.data()[r * 5 + best], 0.0);
                double total = 0.0;
                for (std::size_t j = 0; j < 5; ++j) total += a.data()[r * 5 + j];
                EXPECT_NEAR(total, 1.0, 1e-12);
            }
        }
    }
}

TEST(GroupPair, GradientAwayFromThreshold) {
    std::mt19937_64 rng(7);
    Parameter tok("tok", {3, 4}), pat("pat", {5, 4});
    tok.data = oracle::random_vec(rng, 12);
    pat.data = oracle::random_vec(rng, 20);
    const auto w1 = oracle::random_vec(rng, 12), w2 = oracle::random_vec(rng, 20);
    LossBuilder f = [&](Tape& t) {
        auto g = group_pair(t.param(tok), t.param(pat), 0.35, 0.45);
        return sum(mul(g.groups.tgv, t.constant({3, 4}, w1))) + sum(mul(g.groups.pgl, t.constant({5, 4}, w2)));
    };
    std::vector<Parameter*> ps{&tok, &pat};
    EXPECT_LE(finite_difference_check(f, ps), 1e-6);
}

TEST(Gate, ForcedArithmetic) {
    GateState g(0.5, 0.99);
    g.update(0.3);
    EXPECT_NEAR(g.sigma, 0.498, 1e-15);
    EXPECT_EQ(g.trajectory.size(), 1u);
    EXPECT_EQ(g.trajectory[0].first, 1u);
}

TEST(Gate, FixedPoint) {
    for (double gamma : {0.0, 0.5, 0.99, 0.999}) {
        GateState g(0.42, gamma);
        for (int i = 0; i < 10; ++i) g.update(0.42);
        EXPECT_NEAR(g.sigma, 0.42, 1e-15);
    }
}

TEST(Gate, ClosedFormAfterConstantBatches) {
    for (double gamma : {0.99, 0.999})
        for (double m : {0.05, 0.7}) {
            GateState g(0.0, gamma);
            for (int i = 0; i < 200; ++i) g.update(m);
            EXPECT_NEAR(g.sigma, oracle::gate_after(0.0, m, gamma, 200), 1e-12);
        }
}

TEST(Gate, RejectsBadMomentumAndSigma) {
    EXPECT_THROW(GateState(0.5, 1.0), ContractError);
    EXPECT_THROW(GateState(1.5, 0.9), ContractError);
}

TEST(Gate, PooledMeanOverBatch) {
    Tape t;
    std::vector<DiffTensor> batch{t.constant({1, 2}, {0, 1}), t.constant({2, 2}, {1, 1, 0.5, 0.5})};
    EXPECT_DOUBLE_EQ(pooled_mean(batch), 4.0 / 6.0);
    EXPECT_THROW(pooled_mean(std::span<const DiffTensor>{}), ContractError);
}

TEST(ComputeGroups, UpdatesBothGatesOnce) {
    std::mt19937_64 rng(8);
    Tape t;
    auto tok = t.constant({3, 2}, oracle::random_vec(rng, 6));
    auto pat = t.constant({4, 2}, oracle::random_vec(rng, 8));
    GateState tg(0.0, 0.99), vg(0.0, 0.999);
    auto g = compute_groups(tok, pat, tg, vg);
    double mt = 0.0, mv = 0.0;
    for (double v : g.state.s_hat.data()) mt += v / 12.0;
    for (double v : g.state.s_hat_v.data()) mv += v / 12.0;
    EXPECT_NEAR(tg.sigma, 0.01 * mt, 1e-15);
    EXPECT_NEAR(vg.sigma, 0.001 * mv, 1e-15);
    EXPECT_EQ(tg.step_count, 1u);
}
