// aga: generate corpora, train variants, evaluate checkpoints, run self-checks.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "aga/aga.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string sha1_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr);
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Same digest `git hash-object` reports for the file.
std::string git_blob_sha1(const std::string& path) {
    const auto content = read_file(path);
    return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::size_t thread_cap() {
    const char* env = std::getenv("AGA_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw UsageError(std::string("AGA_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + path.string());
    out << text;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir);
}

struct Manifest {
    ordered_json j;
    fs::path path;

    Manifest(const std::string& out_dir, const std::string& command_line, const aga::RunConfig& cfg,
             std::uint64_t seed) {
        path = fs::path(out_dir) / "manifest.json";
        j["command_line"] = command_line;
        j["config_hash"] = sha1_hex(aga::render_config(cfg));
        j["seed"] = seed;
        j["threads"] = thread_cap();
        j["started_at"] = utc_now();
        j["finished_at"] = nullptr;
        j["corpus_sha1"] = nullptr;
        j["outputs"] = ordered_json::object();
    }

    void save() const { write_text(path, j.dump(2) + "\n"); }

    void finish() {
        j["finished_at"] = utc_now();
        save();
    }
};

aga::RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    aga::RunConfig cfg = config_path.empty() ? aga::RunConfig{} : aga::load_config(config_path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw aga::ConfigError("--set expects key=value, got '" + kv + "'");
        aga::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

ordered_json world_json(const aga::WorldSpec& w) {
    ordered_json j;
    const auto& c = w.config;
    j["config"] = {{"seed", c.seed},
                   {"num_classes", c.num_classes},
                   {"concepts_per_class", c.concepts_per_class},
                   {"tokens_per_concept", c.tokens_per_concept},
                   {"vocab", c.vocab},
                   {"grid_rows", c.grid_rows},
                   {"grid_cols", c.grid_cols},
                   {"max_tokens", c.max_tokens},
                   {"patch_features", c.patch_features},
                   {"region_min", c.region_min},
                   {"region_max", c.region_max},
                   {"patch_noise", c.patch_noise},
                   {"distractor_rate", c.distractor_rate},
                   {"concept_presence", c.concept_presence}};
    j["concepts"] = ordered_json::array();
    for (const auto& k : w.concepts) j["concepts"].push_back({{"tokens", k.tokens}, {"signature", k.signature}});
    j["class_concepts"] = w.class_concepts;
    j["distractors"] = w.distractors;
    j["prompts"] = w.prompts;
    return j;
}

std::string join_args(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
    return s;
}

// ---------------------------------------------------------------------------

struct GenArgs {
    std::uint64_t seed = 0;
    std::string config, out;
    std::vector<std::string> set;
};

int cmd_gen(const GenArgs& a, const std::string& command_line) {
    auto cfg = load_run_config(a.config, a.set);
    cfg.world.seed = a.seed;
    aga::validate_config(cfg);
    ensure_dir(a.out);
    Manifest m(a.out, command_line, cfg, a.seed);
    const auto corpus_path = fs::path(a.out) / "corpus.agac";
    const auto world_path = fs::path(a.out) / "world.json";
    m.j["outputs"] = {{"corpus", corpus_path.string()}, {"world", world_path.string()}};
    m.save();

    const auto corpus = aga::generate_corpus(a.seed, cfg.world, cfg.sizes);
    aga::save_corpus(corpus_path.string(), corpus);
    write_text(world_path, world_json(corpus.world).dump(2) + "\n");
    m.j["corpus_sha1"] = git_blob_sha1(corpus_path.string());
    m.j["counts"] = {{"train", corpus.train.size()}, {"val", corpus.val.size()}, {"test", corpus.test.size()}};
    m.finish();
    std::cout << "wrote " << corpus_path.string() << " (" << corpus.train.size() << "/" << corpus.val.size() << "/"
              << corpus.test.size() << " pairs)\n";
    return kOk;
}

aga::Corpus load_corpus_or_usage(const std::string& path) {
    try {
        return aga::load_corpus(path);
    } catch (const aga::FormatError& e) {
        throw UsageError("unreadable corpus " + path + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw UsageError("unreadable corpus " + path + ": " + e.what());
    }
}

struct TrainArgs {
    std::string corpus, variant = "full", config, out, resume;
    std::uint64_t seed = 0;
    std::vector<std::string> set;
};

int cmd_train(const TrainArgs& a, const std::string& command_line) {
    auto cfg = load_run_config(a.config, a.set);
    auto& tc = cfg.train;
    tc.seed = a.seed;
    tc.variant = aga::Variant::parse(a.variant);
    const auto corpus = load_corpus_or_usage(a.corpus);
    tc.encoder.vocab = corpus.world.config.vocab;
    tc.encoder.patch_features = corpus.world.config.patch_features;
    cfg.world = corpus.world.config;
    aga::validate_config(cfg);

    ensure_dir(a.out);
    Manifest m(a.out, command_line, cfg, a.seed);
    const fs::path dir(a.out);
    const auto ckpt = dir / "checkpoint.agak";
    m.j["variant"] = tc.variant.str();
    m.j["corpus_sha1"] = git_blob_sha1(a.corpus);
    m.j["outputs"] = {{"checkpoint", ckpt.string()},
                      {"metrics", (dir / "metrics.jsonl").string()},
                      {"gates", (dir / "gates.csv").string()}};
    m.save();

    aga::TrainerState state;
    if (a.resume.empty()) {
        state = aga::init_state(tc, corpus.train.size());
    } else {
        try {
            state = aga::load_checkpoint(a.resume);
        } catch (const std::runtime_error& e) {
            throw UsageError("cannot resume from " + a.resume + ": " + e.what());
        }
        state.optim.cfg = tc.optim;
    }
    // A resumed run appends to the logs of the run it continues.
    const auto mode = a.resume.empty() ? std::ios::trunc : std::ios::app;
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | mode);
    std::ofstream gates(dir / "gates.csv", std::ios::binary | mode);
    if (!metrics || !gates) throw UsageError("cannot open logs in " + a.out);
    if (a.resume.empty()) gates << aga::kGateCsvHeader << '\n';

    aga::FitSinks sinks;
    sinks.on_step = [&](std::size_t step, const aga::LossBreakdown& b) {
        metrics << aga::loss_record_json(step, b) << '\n';
    };
    sinks.on_gates = [&](std::size_t step, double tg, double vg) { gates << aga::gate_csv_line(step, tg, vg) << '\n'; };
    sinks.on_checkpoint = [&](aga::TrainerState& s) {
        aga::save_checkpoint((dir / ("checkpoint-" + std::to_string(s.step) + ".agak")).string(), s);
    };
    aga::fit(state, tc, corpus.train, sinks);
    metrics.flush();
    gates.flush();
    aga::save_checkpoint(ckpt.string(), state);
    m.j["steps"] = state.step;
    m.finish();
    std::cout << "trained " << tc.variant.str() << " for " << state.step << " steps -> " << ckpt.string() << "\n";
    return kOk;
}

struct EvalArgs {
    std::string checkpoint, corpus, out, config;
    std::vector<std::string> set;
    int heatmaps = -1;
};

int cmd_eval(const EvalArgs& a, const std::string& command_line) {
    auto cfg = load_run_config(a.config, a.set);
    if (a.heatmaps >= 0) cfg.heatmap_samples = static_cast<std::size_t>(a.heatmaps);
    const auto corpus = load_corpus_or_usage(a.corpus);
    aga::TrainerState state;
    try {
        state = aga::load_checkpoint(a.checkpoint);
    } catch (const std::runtime_error& e) {
        throw UsageError("unreadable checkpoint " + a.checkpoint + ": " + e.what());
    }
    const auto& wc = corpus.world.config;
    auto& model = state.model;
    if (model.enc.patch_features() != wc.patch_features)
        throw UsageError("dimension mismatch: checkpoint patch features C=" + std::to_string(model.enc.patch_features()) +
                         ", corpus patch features C=" + std::to_string(wc.patch_features));
    if (model.enc.vocab() != wc.vocab)
        throw UsageError("dimension mismatch: checkpoint vocab=" + std::to_string(model.enc.vocab()) +
                         ", corpus vocab=" + std::to_string(wc.vocab));

    ensure_dir(a.out);
    Manifest m(a.out, command_line, cfg, state.seed);
    const fs::path dir(a.out);
    m.j["corpus_sha1"] = git_blob_sha1(a.corpus);
    m.j["checkpoint_sha1"] = git_blob_sha1(a.checkpoint);
    m.j["outputs"] = {{"results", (dir / "results.json").string()}, {"heatmaps", (dir / "heatmaps").string()}};
    m.save();

    const auto test = aga::encode_globals(model, corpus.test);
    const auto train = aga::encode_globals(model, corpus.train);
    std::vector<std::size_t> ks;
    for (std::size_t k : {1, 5, 10})
        if (k <= corpus.test.size()) ks.push_back(k);
    const auto retrieval = aga::retrieval_precision(test.image, test.text, test.labels, test.labels, ks);

    std::vector<aga::TextSample> prompts;
    for (const auto& p : corpus.world.prompts) prompts.push_back(aga::make_text(p, wc.max_tokens));
    const auto zs = aga::zero_shot_classify(test.image, prompts, model, test.labels);

    auto probe_opt = cfg.probe;
    probe_opt.seed = state.seed;
    // A fraction that leaves a class without samples is reported as null so
    // small corpora still get the other metrics.
    ordered_json probe = ordered_json::object();
    for (double f : {0.1, 0.5, 1.0}) {
        char key[16];
        std::snprintf(key, sizeof key, "%g", f);
        try {
            probe[key] = aga::linear_probe(train.image, train.labels, test.image, test.labels, wc.num_classes, {f},
                                           probe_opt)[0].auc;
        } catch (const aga::ContractError& e) {
            std::cerr << "warning: " << e.what() << "\n";
            probe[key] = nullptr;
        }
    }
    const double sigma_tg = state.gate_tg.sigma;
    const auto fidelity = aga::grouping_fidelity(model, corpus.test, sigma_tg);

    ordered_json r;
    r["variant"] = state.variant.str();
    r["seed"] = state.seed;
    for (auto k : ks) r["prec@" + std::to_string(k)] = retrieval.precision.at(k);
    r["zero_shot"] = {{"acc", zs.accuracy}, {"f1", zs.macro_f1}, {"roc", zs.roc_auc}};
    r["probe"] = probe;
    r["fidelity"] = fidelity.mean;
    r["fidelity_histogram"] = fidelity.histogram;
    r["sigma_tg"] = sigma_tg;
    r["sigma_vg"] = state.gate_vg.sigma;
    write_text(dir / "results.json", r.dump(2) + "\n");

    const auto heat_dir = dir / "heatmaps";
    fs::create_directories(heat_dir);
    const std::size_t samples = std::min(cfg.heatmap_samples, corpus.test.size());
    for (std::size_t i = 0; i < samples; ++i) {
        std::vector<std::size_t> pos;
        const auto alpha = aga::token_alignment(model, corpus.test[i], sigma_tg, &pos);
        for (std::size_t t = 0; t < pos.size(); ++t) {
            const auto id = corpus.test[i].text.token_ids[pos[t]];
            const auto stem = heat_dir / ("pair" + std::to_string(i) + "_pos" + std::to_string(pos[t]) + "_id" +
                                          std::to_string(id));
            aga::export_heatmap(alpha.row(t), wc.grid_rows, wc.grid_cols, "id" + std::to_string(id), stem.string());
        }
    }
    m.finish();
    std::cout << r.dump(2) << "\n";
    return kOk;
}

int cmd_verify(const std::string& filter, bool inject_fault) {
    aga::fault::flip_matmul_backward = inject_fault;
    const auto results = aga::run_verification(filter);
    if (results.empty()) throw UsageError("--filter '" + filter + "' matches no checks");
    std::size_t failed = 0;
    for (const auto& r : results) {
        std::printf("%-4s  %-34s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", (r.group + "/" + r.name).c_str(), r.seconds,
                    r.detail.c_str());
        failed += !r.passed;
    }
    std::printf("%zu/%zu checks passed\n", results.size() - failed, results.size());
    if (failed) {
        std::printf("failing:");
        for (const auto& r : results)
            if (!r.passed) std::printf(" %s/%s", r.group.c_str(), r.name.c_str());
        std::printf("\n");
    }
    return failed ? kVerifyFailed : kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive grouped alignment on a synthetic image-report corpus"};
    app.require_subcommand(1);
    const auto command_line = join_args(argc, argv);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic corpus");
    g->add_option("--seed", gen.seed, "Root seed");
    g->add_option("--config", gen.config, "key=value config file")->check(CLI::ExistingFile);
    g->add_option("--set", gen.set, "Override one config key (key=value)");
    g->add_option("--out", gen.out, "Output directory")->required();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train one variant");
    t->add_option("--corpus", train.corpus, "Corpus file")->required();
    t->add_option("--variant", train.variant, "full | global-only | no-bcga | fixed:<tg>,<vg>");
    t->add_option("--config", train.config, "key=value config file")->check(CLI::ExistingFile);
    t->add_option("--set", train.set, "Override one config key (key=value)");
    t->add_option("--out", train.out, "Output directory")->required();
    t->add_option("--seed", train.seed, "Root seed for initialisation and shuffling");
    t->add_option("--resume", train.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
    e->add_option("--corpus", ev.corpus, "Corpus file")->required();
    e->add_option("--out", ev.out, "Output directory")->required();
    e->add_option("--config", ev.config, "key=value config file")->check(CLI::ExistingFile);
    e->add_option("--set", ev.set, "Override one config key (key=value)");
    e->add_option("--heatmaps", ev.heatmaps, "Number of test pairs to export heatmaps for");

    std::string filter;
    bool inject = false;
    auto* v = app.add_subcommand("verify", "Run the verification battery");
    v->add_option("--filter", filter, "Only run checks whose group/name contains this text");
    v->add_flag("--inject-fault", inject, "Flip the sign of the matmul backward rule");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return kUsage;
    }

    try {
        thread_cap();
        if (g->parsed()) return cmd_gen(gen, command_line);
        if (t->parsed()) return cmd_train(train, command_line);
        if (e->parsed()) return cmd_eval(ev, command_line);
        return cmd_verify(filter, inject);
    } catch (const aga::NumericError& ex) {
        std::cerr << "numeric failure: " << ex.what() << "\n";
        return kNumeric;
    } catch (const UsageError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& ex) {  // ContractError, ShapeError, ConfigError
        std::cerr << "error: " << ex.what() << "\n";
        return kUsage;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kUsage;
    }
}
