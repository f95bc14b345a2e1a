#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "aga/synth.hpp"

using namespace aga;

namespace {

WorldConfig quiet_world() {
    WorldConfig c;
    c.patch_noise = 0.0;
    return c;
}

std::set<std::size_t> all_patches(const LabeledPair& p) {
    std::set<std::size_t> out;
    for (const auto& g : p.planted.groups) out.insert(g.patches.begin(), g.patches.end());
    return out;
}

}  // namespace

TEST(World, SameSeedSameWorld) {
    EXPECT_TRUE(build_world(3, WorldConfig{}) == build_world(3, WorldConfig{}));
    EXPECT_FALSE(build_world(3, WorldConfig{}) == build_world(4, WorldConfig{}));
}

TEST(World, ConceptTokensAreDisjointAndNeverPad) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto w = build_world(seed, WorldConfig{});
        std::set<std::int32_t> seen;
        std::size_t total = 0;
        for (const auto& c : w.concepts)
            for (auto t : c.tokens) {
                seen.insert(t);
                ++total;
                EXPECT_NE(t, kPadToken);
            }
        EXPECT_EQ(seen.size(), total);
        for (auto d : w.distractors) EXPECT_EQ(seen.count(d), 0u);
        EXPECT_FALSE(w.distractors.empty());
    }
}

TEST(SamplePair, ZeroNoisePatchesEqualSignatures) {
    const auto w = build_world(1, quiet_world());
    auto rng = make_stream(1, "corpus");
    for (int i = 0; i < 50; ++i) {
        const auto p = sample_pair(w, rng);
        const auto planted = all_patches(p);
        const std::size_t C = w.config.patch_features;
        for (std::size_t n = 0; n < p.image.num_patches; ++n) {
            if (!planted.count(n)) {
                for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(p.image.at(n, c), 0.0);
            }
        }
        for (const auto& g : p.planted.groups) {
            const auto tok = p.text.token_ids[g.token_position];
            const Concept* owner = nullptr;
            for (const auto& k : w.concepts)
                if (std::find(k.tokens.begin(), k.tokens.end(), tok) != k.tokens.end()) owner = &k;
            ASSERT_NE(owner, nullptr);
            for (auto n : g.patches)
                for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(p.image.at(n, c), owner->signature[c]);
        }
    }
}

TEST(SamplePair, PlantedSetsAreInBoundsRectangularAndOnRealTokens) {
    const WorldConfig cfg;
    const auto w = build_world(2, cfg);
    auto rng = make_stream(2, "corpus");
    for (int i = 0; i < 200; ++i) {
        const auto p = sample_pair(w, rng);
        ASSERT_FALSE(p.planted.groups.empty());
        for (const auto& g : p.planted.groups) {
            EXPECT_EQ(p.text.mask[g.token_position], 1);
            const auto sz = g.patches.size();
            EXPECT_GE(sz, cfg.region_min * cfg.region_min);
            EXPECT_LE(sz, cfg.region_max * cfg.region_max);
            for (auto n : g.patches) EXPECT_LT(n, cfg.num_patches());
        }
        // Distinct concepts own disjoint regions.
        std::map<std::vector<std::size_t>, int> regions;
        for (const auto& g : p.planted.groups) regions[g.patches] = 1;
        std::set<std::size_t> cells;
        std::size_t total = 0;
        for (const auto& [r, _] : regions) {
            cells.insert(r.begin(), r.end());
            total += r.size();
        }
        EXPECT_EQ(cells.size(), total);
    }
}

TEST(SamplePair, NoDistractorsAtRateZero) {
    auto cfg = WorldConfig{};
    cfg.distractor_rate = 0.0;
    const auto w = build_world(5, cfg);
    auto rng = make_stream(5, "corpus");
    for (int i = 0; i < 1000; ++i) {
        const auto p = sample_pair(w, rng);
        EXPECT_EQ(p.planted.groups.size(), p.text.length());
    }
}

TEST(SamplePair, ConceptTokensBelongToTheLabel) {
    const auto w = build_world(6, WorldConfig{});
    auto rng = make_stream(6, "corpus");
    for (int i = 0; i < 100; ++i) {
        const auto p = sample_pair(w, rng);
        std::set<std::int32_t> own;
        for (auto k : w.class_concepts[p.label]) own.insert(w.concepts[k].tokens.begin(), w.concepts[k].tokens.end());
        for (const auto& g : p.planted.groups) EXPECT_EQ(own.count(p.text.token_ids[g.token_position]), 1u);
    }
}

TEST(Splits, CountsAndClassBalance) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto c = generate_corpus(seed, WorldConfig{}, {200, 20, 50});
        EXPECT_EQ(c.train.size(), 200u);
        EXPECT_EQ(c.val.size(), 20u);
        EXPECT_EQ(c.test.size(), 50u);
        std::vector<std::size_t> counts(3, 0);
        for (const auto& p : c.train) ++counts[p.label];
        for (auto n : counts) EXPECT_NEAR(static_cast<double>(n), 200.0 / 3.0, 0.1 * 200.0 / 3.0);
    }
}

TEST(Splits, ZeroSizeRejected) {
    EXPECT_THROW(generate_corpus(0, WorldConfig{}, {0, 1, 1}), ContractError);
}

TEST(Corpus, SameSeedSameBytes) {
    const auto a = encode_corpus(generate_corpus(9, WorldConfig{}, {30, 5, 10})).buffer();
    const auto b = encode_corpus(generate_corpus(9, WorldConfig{}, {30, 5, 10})).buffer();
    EXPECT_EQ(a, b);
    EXPECT_NE(a, encode_corpus(generate_corpus(10, WorldConfig{}, {30, 5, 10})).buffer());
}

TEST(Corpus, RoundTripIsExact) {
    const auto c = generate_corpus(11, WorldConfig{}, {30, 5, 10});
    const auto bytes = encode_corpus(c).buffer();
    const auto back = decode_corpus(ByteReader(bytes));
    EXPECT_TRUE(back.world == c.world);
    ASSERT_EQ(back.train.size(), c.train.size());
    for (std::size_t i = 0; i < c.train.size(); ++i) {
        EXPECT_EQ(back.train[i].image.patches, c.train[i].image.patches);
        EXPECT_EQ(back.train[i].text.token_ids, c.train[i].text.token_ids);
        EXPECT_EQ(back.train[i].planted.groups.size(), c.train[i].planted.groups.size());
    }
    EXPECT_EQ(encode_corpus(back).buffer(), bytes);

    const auto path = (std::filesystem::temp_directory_path() / "aga_corpus_roundtrip.agac").string();
    save_corpus(path, c);
    EXPECT_EQ(encode_corpus(load_corpus(path)).buffer(), bytes);
    std::filesystem::remove(path);
}

TEST(Corpus, TruncatedOrForeignBytesRejected) {
    auto bytes = encode_corpus(generate_corpus(12, WorldConfig{}, {3, 3, 3})).buffer();
    bytes.resize(bytes.size() / 2);
    EXPECT_THROW(decode_corpus(ByteReader(bytes)), FormatError);
    EXPECT_THROW(decode_corpus(ByteReader({'N', 'O', 'P', 'E', 1, 0, 0, 0})), FormatError);
}

TEST(WorldConfig, InvalidFieldsAreNamed) {
    auto expect_field = [](WorldConfig c, const std::string& field) {
        try {
            c.validate();
            FAIL() << field;
        } catch (const ContractError& e) {
            EXPECT_NE(std::string(e.what()).find("'" + field + "'"), std::string::npos) << e.what();
        }
    };
    WorldConfig c;
    c.region_max = 7;
    expect_field(c, "region_max");
    c = {};
    c.vocab = 10;
    expect_field(c, "vocab");
    c = {};
    c.distractor_rate = 1.0;
    expect_field(c, "distractor_rate");
    c = {};
    c.max_tokens = 3;
    expect_field(c, "max_tokens");
}
