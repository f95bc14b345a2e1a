#pragma once

// Synthetic paired corpus with planted token <-> patch correspondences.
//
// Each class owns a few concepts. A concept is a disjoint set of token ids plus
// a patch signature. An image of class c carries the signature of each of c's
// concepts over a random rectangular region of the patch grid; its report lists
// the concept tokens, interleaved with random distractor tokens.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "aga/autodiff.hpp"
#include "aga/binary_io.hpp"
#include "aga/encoders.hpp"
#include "aga/rng.hpp"

namespace aga {

inline constexpr std::int32_t kPadToken = 0;

struct WorldConfig {
    std::uint64_t seed = 0;
    std::size_t num_classes = 3;
    std::size_t concepts_per_class = 2;
    std::size_t tokens_per_concept = 3;
    std::size_t vocab = 64;
    std::size_t grid_rows = 6;
    std::size_t grid_cols = 6;
    std::size_t max_tokens = 24;
    std::size_t patch_features = 8;
    std::size_t region_min = 2;
    std::size_t region_max = 3;
    double patch_noise = 0.1;
    double distractor_rate = 0.2;
    double concept_presence = 0.5;  // per-concept inclusion probability in a sample

    std::size_t num_patches() const { return grid_rows * grid_cols; }
    std::size_t num_concepts() const { return num_classes * concepts_per_class; }

    void validate() const {
        auto fail = [](const std::string& field, const std::string& why) {
            throw ContractError("world config field '" + field + "': " + why);
        };
        if (num_classes == 0) fail("num_classes", "must be positive");
        if (concepts_per_class == 0) fail("concepts_per_class", "must be positive");
        if (tokens_per_concept == 0) fail("tokens_per_concept", "must be positive");
        if (grid_rows == 0) fail("grid_rows", "must be positive");
        if (grid_cols == 0) fail("grid_cols", "must be positive");
        if (patch_features == 0) fail("patch_features", "must be positive");
        if (region_min == 0) fail("region_min", "must be positive");
        if (region_max < region_min) fail("region_max", "must be >= region_min");
        if (region_max > std::min(grid_rows, grid_cols)) fail("region_max", "larger than the patch grid");
        if (concepts_per_class * region_max * region_max > num_patches())
            fail("region_max", "concept regions cannot fit disjointly on the grid");
        if (max_tokens < concepts_per_class * tokens_per_concept)
            fail("max_tokens", "too small for the concept tokens of one class");
        const std::size_t concept_ids = num_concepts() * tokens_per_concept;
        if (vocab < concept_ids + 2)
            fail("vocab", "needs at least " + std::to_string(concept_ids + 2) +
                              " ids (pad, concept tokens, one distractor)");
        if (!(patch_noise >= 0.0)) fail("patch_noise", "must be non-negative");
        if (!(distractor_rate >= 0.0 && distractor_rate < 1.0)) fail("distractor_rate", "must be in [0, 1)");
        if (!(concept_presence > 0.0 && concept_presence <= 1.0)) fail("concept_presence", "must be in (0, 1]");
    }
};

struct Concept {
    std::vector<std::int32_t> tokens;
    std::vector<double> signature;  // C
};

struct WorldSpec {
    WorldConfig config;
    std::vector<Concept> concepts;
    std::vector<std::vector<std::size_t>> class_concepts;
    std::vector<std::int32_t> distractors;
    std::vector<std::vector<std::int32_t>> prompts;  // one token sequence per class

    bool operator==(const WorldSpec& o) const {
        auto same_concepts = concepts.size() == o.concepts.size() &&
                             std::equal(concepts.begin(), concepts.end(), o.concepts.begin(),
                                        [](const Concept& a, const Concept& b) {
                                            return a.tokens == b.tokens && a.signature == b.signature;
                                        });
        return same_concepts && class_concepts == o.class_concepts && distractors == o.distractors &&
               prompts == o.prompts;
    }
};

struct PlantedGroup {
    std::size_t token_position = 0;
    std::vector<std::size_t> patches;
};

struct PlantedAlignment {
    std::vector<PlantedGroup> groups;
};

struct LabeledPair {
    ImageSample image;
    TextSample text;
    std::size_t label = 0;
    PlantedAlignment planted;
};

struct Corpus {
    WorldSpec world;
    std::vector<LabeledPair> train, val, test;
};

inline WorldSpec build_world(std::uint64_t seed, WorldConfig cfg) {
    cfg.seed = seed;
    cfg.validate();
    auto rng = make_stream(seed, "world");
    WorldSpec w;
    w.config = cfg;

    std::vector<std::int32_t> ids(cfg.vocab - 1);
    std::iota(ids.begin(), ids.end(), 1);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::size_t next = 0;
    for (std::size_t c = 0; c < cfg.num_concepts(); ++c) {
        Concept k;
        for (std::size_t t = 0; t < cfg.tokens_per_concept; ++t) k.tokens.push_back(ids[next++]);
        k.signature.resize(cfg.patch_features);
        for (auto& v : k.signature) v = nd(rng);
        w.concepts.push_back(std::move(k));
    }
    w.distractors.assign(ids.begin() + static_cast<std::ptrdiff_t>(next), ids.end());
    std::sort(w.distractors.begin(), w.distractors.end());

    for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
        std::vector<std::size_t> owned;
        std::vector<std::int32_t> prompt;
        for (std::size_t j = 0; j < cfg.concepts_per_class; ++j) {
            const auto idx = cls * cfg.concepts_per_class + j;
            owned.push_back(idx);
            prompt.insert(prompt.end(), w.concepts[idx].tokens.begin(), w.concepts[idx].tokens.end());
        }
        w.class_concepts.push_back(std::move(owned));
        w.prompts.push_back(std::move(prompt));
    }
    return w;
}

inline TextSample make_text(const std::vector<std::int32_t>& tokens, std::size_t max_tokens) {
    if (tokens.empty() || tokens.size() > max_tokens)
        throw ContractError("make_text: token count " + std::to_string(tokens.size()) +
                            " outside [1, " + std::to_string(max_tokens) + "]");
    TextSample t;
    t.token_ids.assign(max_tokens, kPadToken);
    t.mask.assign(max_tokens, 0);
    std::copy(tokens.begin(), tokens.end(), t.token_ids.begin());
    std::fill_n(t.mask.begin(), tokens.size(), 1);
    return t;
}

inline LabeledPair sample_pair(const WorldSpec& world, Rng& rng, std::size_t label) {
    const auto& cfg = world.config;
    if (label >= cfg.num_classes) throw ContractError("sample_pair: label out of range");
    const std::size_t N = cfg.num_patches(), C = cfg.patch_features;
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    LabeledPair pair;
    pair.label = label;
    pair.image.num_patches = N;
    pair.image.features = C;
    pair.image.patches.assign(N * C, 0.0);

    // A random nonempty subset of the class's concepts. If every concept of a
    // class were always present, its tokens could not be told apart by region.
    std::vector<std::size_t> concepts;
    const auto& owned = world.class_concepts[label];
    while (concepts.empty())
        for (auto k : owned)
            if (coin(rng) < cfg.concept_presence) concepts.push_back(k);
    std::shuffle(concepts.begin(), concepts.end(), rng);

    // Place one rectangle per concept, disjoint from earlier ones. An early
    // rectangle can block every later position, so a stuck layout restarts.
    std::vector<std::vector<std::size_t>> regions;
    std::uniform_int_distribution<std::size_t> side(cfg.region_min, cfg.region_max);
    for (int layout = 0; regions.size() < concepts.size(); ++layout) {
        if (layout == 100) throw ContractError("sample_pair: could not place disjoint regions");
        regions.clear();
        std::vector<std::uint8_t> taken(N, 0);
        for (std::size_t c = 0; c < concepts.size(); ++c) {
            std::vector<std::size_t> cells;
            for (int attempt = 0; cells.empty() && attempt < 1000; ++attempt) {
                const auto h = side(rng), w = side(rng);
                const auto r0 = std::uniform_int_distribution<std::size_t>(0, cfg.grid_rows - h)(rng);
                const auto c0 = std::uniform_int_distribution<std::size_t>(0, cfg.grid_cols - w)(rng);
                for (std::size_t r = r0; r < r0 + h; ++r)
                    for (std::size_t q = c0; q < c0 + w; ++q) cells.push_back(r * cfg.grid_cols + q);
                if (std::any_of(cells.begin(), cells.end(), [&](std::size_t i) { return taken[i]; }))
                    cells.clear();
            }
            if (cells.empty()) break;
            for (auto i : cells) taken[i] = 1;
            regions.push_back(std::move(cells));
        }
    }
    for (std::size_t c = 0; c < concepts.size(); ++c)
        for (auto n : regions[c])
            std::copy(world.concepts[concepts[c]].signature.begin(),
                      world.concepts[concepts[c]].signature.end(),
                      pair.image.patches.begin() + static_cast<std::ptrdiff_t>(n * C));
    for (auto& v : pair.image.patches) v += cfg.patch_noise * noise(rng);

    // Report: concept tokens in concept order, each possibly followed by a distractor.
    std::vector<std::int32_t> tokens;
    std::vector<std::size_t> owner;  // region index per token, or npos for distractors
    constexpr auto npos = static_cast<std::size_t>(-1);
    std::uniform_int_distribution<std::size_t> pick(0, world.distractors.size() - 1);
    for (std::size_t c = 0; c < concepts.size(); ++c)
        for (auto tok : world.concepts[concepts[c]].tokens) {
            tokens.push_back(tok);
            owner.push_back(c);
            if (coin(rng) < cfg.distractor_rate) {
                tokens.push_back(world.distractors[pick(rng)]);
                owner.push_back(npos);
            }
        }
    while (tokens.size() > cfg.max_tokens) {
        auto it = std::find(owner.rbegin(), owner.rend(), npos);
        const auto at = static_cast<std::size_t>(std::distance(it, owner.rend())) - 1;
        tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(at));
        owner.erase(owner.begin() + static_cast<std::ptrdiff_t>(at));
    }
    pair.text = make_text(tokens, cfg.max_tokens);
    for (std::size_t i = 0; i < owner.size(); ++i)
        if (owner[i] != npos) pair.planted.groups.push_back({i, regions[owner[i]]});
    return pair;
}

inline LabeledPair sample_pair(const WorldSpec& world, Rng& rng) {
    std::uniform_int_distribution<std::size_t> cls(0, world.config.num_classes - 1);
    return sample_pair(world, rng, cls(rng));
}

struct SplitSizes {
    std::size_t train = 200, val = 20, test = 50;
};

/// Each split cycles through the classes, then shuffles, so class counts
/// differ by at most one.
inline Corpus make_splits(const WorldSpec& world, const SplitSizes& sizes, Rng& rng) {
    if (sizes.train == 0 || sizes.val == 0 || sizes.test == 0)
        throw ContractError("make_splits: split sizes must be positive");
    Corpus corpus;
    corpus.world = world;
    auto fill = [&](std::vector<LabeledPair>& out, std::size_t n) {
        std::vector<std::size_t> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = i % world.config.num_classes;
        std::shuffle(labels.begin(), labels.end(), rng);
        for (auto l : labels) out.push_back(sample_pair(world, rng, l));
    };
    fill(corpus.train, sizes.train);
    fill(corpus.val, sizes.val);
    fill(corpus.test, sizes.test);
    return corpus;
}

inline Corpus generate_corpus(std::uint64_t seed, const WorldConfig& cfg, const SplitSizes& sizes) {
    auto world = build_world(seed, cfg);
    auto rng = make_stream(seed, "corpus");
    return make_splits(world, sizes, rng);
}

// ---------------------------------------------------------------------------
// Serialization: "AGAC", u32 version, world, then the three splits.

inline constexpr std::uint32_t kCorpusVersion = 1;

inline void write_world(ByteWriter& w, const WorldSpec& world) {
    const auto& c = world.config;
    w.u64(c.seed);
    for (auto v : {c.num_classes, c.concepts_per_class, c.tokens_per_concept, c.vocab, c.grid_rows,
                   c.grid_cols, c.max_tokens, c.patch_features, c.region_min, c.region_max})
        w.u32(static_cast<std::uint32_t>(v));
    w.f64(c.patch_noise);
    w.f64(c.distractor_rate);
    w.f64(c.concept_presence);
    w.u32(static_cast<std::uint32_t>(world.concepts.size()));
    for (const auto& k : world.concepts) {
        w.u32(static_cast<std::uint32_t>(k.tokens.size()));
        for (auto t : k.tokens) w.i32(t);
        for (auto v : k.signature) w.f64(v);
    }
    for (const auto& owned : world.class_concepts) {
        w.u32(static_cast<std::uint32_t>(owned.size()));
        for (auto i : owned) w.u32(static_cast<std::uint32_t>(i));
    }
    w.u32(static_cast<std::uint32_t>(world.distractors.size()));
    for (auto t : world.distractors) w.i32(t);
    for (const auto& p : world.prompts) {
        w.u32(static_cast<std::uint32_t>(p.size()));
        for (auto t : p) w.i32(t);
    }
}

inline WorldSpec read_world(ByteReader& r) {
    WorldSpec world;
    auto& c = world.config;
    c.seed = r.u64();
    for (auto* v : {&c.num_classes, &c.concepts_per_class, &c.tokens_per_concept, &c.vocab, &c.grid_rows,
                    &c.grid_cols, &c.max_tokens, &c.patch_features, &c.region_min, &c.region_max})
        *v = r.u32();
    c.patch_noise = r.f64();
    c.distractor_rate = r.f64();
    c.concept_presence = r.f64();
    try {
        c.validate();
    } catch (const ContractError& e) {
        throw FormatError(std::string("corpus world: ") + e.what());
    }
    const auto nconcepts = r.u32();
    if (nconcepts != c.num_concepts()) throw FormatError("corpus world: concept count mismatch");
    for (std::uint32_t i = 0; i < nconcepts; ++i) {
        Concept k;
        k.tokens.resize(r.u32());
        for (auto& t : k.tokens) t = r.i32();
        k.signature.resize(c.patch_features);
        for (auto& v : k.signature) v = r.f64();
        world.concepts.push_back(std::move(k));
    }
    world.class_concepts.resize(c.num_classes);
    for (auto& owned : world.class_concepts) {
        owned.resize(r.u32());
        for (auto& i : owned) i = r.u32();
    }
    world.distractors.resize(r.u32());
    for (auto& t : world.distractors) t = r.i32();
    world.prompts.resize(c.num_classes);
    for (auto& p : world.prompts) {
        p.resize(r.u32());
        for (auto& t : p) t = r.i32();
    }
    return world;
}

inline void write_pairs(ByteWriter& w, const std::vector<LabeledPair>& pairs) {
    w.u64(pairs.size());
    for (const auto& p : pairs) {
        w.u32(static_cast<std::uint32_t>(p.label));
        for (auto v : p.image.patches) w.f64(v);
        for (auto t : p.text.token_ids) w.i32(t);
        for (auto m : p.text.mask) w.u8(m);
        w.u32(static_cast<std::uint32_t>(p.planted.groups.size()));
        for (const auto& g : p.planted.groups) {
            w.u32(static_cast<std::uint32_t>(g.token_position));
            w.u32(static_cast<std::uint32_t>(g.patches.size()));
            for (auto n : g.patches) w.u32(static_cast<std::uint32_t>(n));
        }
    }
}

inline std::vector<LabeledPair> read_pairs(ByteReader& r, const WorldConfig& c) {
    const auto n = r.u64();
    std::vector<LabeledPair> pairs;
    pairs.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 20)));
    for (std::uint64_t i = 0; i < n; ++i) {
        LabeledPair p;
        p.label = r.u32();
        if (p.label >= c.num_classes) throw FormatError("corpus pair: label out of range");
        p.image.num_patches = c.num_patches();
        p.image.features = c.patch_features;
        p.image.patches.resize(c.num_patches() * c.patch_features);
        for (auto& v : p.image.patches) v = r.f64();
        p.text.token_ids.resize(c.max_tokens);
        for (auto& t : p.text.token_ids) t = r.i32();
        p.text.mask.resize(c.max_tokens);
        for (auto& m : p.text.mask) m = r.u8();
        p.planted.groups.resize(r.u32());
        for (auto& g : p.planted.groups) {
            g.token_position = r.u32();
            g.patches.resize(r.u32());
            for (auto& q : g.patches) {
                q = r.u32();
                if (q >= c.num_patches()) throw FormatError("corpus pair: planted patch out of range");
            }
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline ByteWriter encode_corpus(const Corpus& corpus) {
    ByteWriter w;
    w.bytes("AGAC");
    w.u32(kCorpusVersion);
    write_world(w, corpus.world);
    write_pairs(w, corpus.train);
    write_pairs(w, corpus.val);
    write_pairs(w, corpus.test);
    return w;
}

inline void save_corpus(const std::string& path, const Corpus& corpus) { encode_corpus(corpus).save(path); }

inline Corpus decode_corpus(ByteReader r) {
    r.expect_magic("AGAC");
    if (const auto v = r.u32(); v != kCorpusVersion)
        throw FormatError("unsupported corpus version " + std::to_string(v));
    Corpus corpus;
    corpus.world = read_world(r);
    corpus.train = read_pairs(r, corpus.world.config);
    corpus.val = read_pairs(r, corpus.world.config);
    corpus.test = read_pairs(r, corpus.world.config);
    if (!r.at_end()) throw FormatError("trailing bytes after corpus");
    return corpus;
}

inline Corpus load_corpus(const std::string& path) { return decode_corpus(ByteReader::load(path)); }

}  // namespace aga
