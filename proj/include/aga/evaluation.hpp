#pragma once

// Downstream protocols: category retrieval Precision@K, zero-shot prompt
// classification, linear probing, grouping fidelity and heatmap export.
// Everything here reads a frozen model; nothing is differentiated.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "aga/model.hpp"

namespace aga {

struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

struct GlobalEmbeddings {
    Matrix image, text;
    std::vector<std::size_t> labels;
};

inline GlobalEmbeddings encode_globals(Model& model, const std::vector<LabeledPair>& pairs) {
    const std::size_t d = model.enc.embed_dim();
    GlobalEmbeddings out{Matrix(pairs.size(), d), Matrix(pairs.size(), d), {}};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        Tape tape;
        EncoderLeaves leaves(tape, model.enc);
        auto gi = encode_image(pairs[i].image, leaves).global.data();
        auto gt = encode_text(pairs[i].text, leaves).global.data();
        std::copy(gi.begin(), gi.end(), out.image.data.begin() + static_cast<std::ptrdiff_t>(i * d));
        std::copy(gt.begin(), gt.end(), out.text.data.begin() + static_cast<std::ptrdiff_t>(i * d));
        out.labels.push_back(pairs[i].label);
    }
    return out;
}

inline double cosine_value(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / ((std::sqrt(aa) + kNormEps) * (std::sqrt(bb) + kNormEps));
}

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalResult {
    std::vector<std::vector<std::size_t>> rankings;  // per query, candidate indices best-first
    std::map<std::size_t, double> precision;         // K -> mean Prec@K
    std::vector<std::size_t> candidate_categories;
};

/// Candidates ordered by descending score; equal scores keep index order.
inline std::vector<std::size_t> rank_by_score(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

inline RetrievalResult retrieval_from_scores(const Matrix& scores, const std::vector<std::size_t>& query_categories,
                                             const std::vector<std::size_t>& candidate_categories,
                                             const std::vector<std::size_t>& ks) {
    const std::size_t P = scores.cols;
    if (P == 0) throw ContractError("retrieval_precision: empty candidate pool");
    if (candidate_categories.size() != P || query_categories.size() != scores.rows)
        throw ShapeError("retrieval_precision: category lists do not match the score matrix");
    for (auto k : ks)
        if (k == 0 || k > P)
            throw ContractError("retrieval_precision: K=" + std::to_string(k) + " outside [1, " + std::to_string(P) + "]");
    RetrievalResult res;
    res.candidate_categories = candidate_categories;
    for (auto k : ks) res.precision[k] = 0.0;
    for (std::size_t q = 0; q < scores.rows; ++q) {
        auto ranking = rank_by_score(scores.row(q));
        for (auto k : ks) {
            std::size_t hits = 0;
            for (std::size_t r = 0; r < k; ++r) hits += candidate_categories[ranking[r]] == query_categories[q];
            res.precision[k] += static_cast<double>(hits) / static_cast<double>(k);
        }
        res.rankings.push_back(std::move(ranking));
    }
    if (scores.rows > 0)
        for (auto& [k, v] : res.precision) v /= static_cast<double>(scores.rows);
    return res;
}

/// Image->text retrieval by cosine similarity of global embeddings. A hit is a
/// retrieved report of the query's category.
inline RetrievalResult retrieval_precision(const Matrix& image_embeds, const Matrix& text_embeds,
                                           const std::vector<std::size_t>& query_categories,
                                           const std::vector<std::size_t>& candidate_categories,
                                           const std::vector<std::size_t>& ks) {
    if (image_embeds.cols != text_embeds.cols)
        throw ShapeError("retrieval_precision: embedding dims differ (" + std::to_string(image_embeds.cols) +
                         " vs " + std::to_string(text_embeds.cols) + ")");
    Matrix scores(image_embeds.rows, text_embeds.rows);
    for (std::size_t q = 0; q < image_embeds.rows; ++q)
        for (std::size_t p = 0; p < text_embeds.rows; ++p)
            scores(q, p) = cosine_value(image_embeds.row(q), text_embeds.row(p));
    return retrieval_from_scores(scores, query_categories, candidate_categories, ks);
}

// ---------------------------------------------------------------------------
// Classification metrics

/// One-vs-rest ROC-AUC via the Mann-Whitney statistic with average ranks for ties.
inline double roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw ShapeError("roc_auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
        i = j + 1;
    }
    double rank_sum = 0.0;
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (positive[i]) {
            rank_sum += rank[i];
            ++npos;
        }
    const std::size_t nneg = n - npos;
    if (npos == 0 || nneg == 0) throw ContractError("roc_auc: need both positive and negative samples");
    const double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Mean over classes of one-vs-rest ROC-AUC using column c of `scores` for class c.
inline double macro_roc_auc(const Matrix& scores, const std::vector<std::size_t>& labels) {
    double total = 0.0;
    for (std::size_t c = 0; c < scores.cols; ++c) {
        std::vector<double> col(scores.rows);
        std::vector<bool> pos(scores.rows);
        for (std::size_t i = 0; i < scores.rows; ++i) {
            col[i] = scores(i, c);
            pos[i] = labels[i] == c;
        }
        total += roc_auc(col, pos);
    }
    return total / static_cast<double>(scores.cols);
}

inline double macro_f1(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels,
                       std::size_t num_classes) {
    double total = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            tp += predicted[i] == c && labels[i] == c;
            fp += predicted[i] == c && labels[i] != c;
            fn += predicted[i] != c && labels[i] == c;
        }
        const auto den = 2 * tp + fp + fn;
        total += den ? 2.0 * static_cast<double>(tp) / static_cast<double>(den) : 0.0;
    }
    return total / static_cast<double>(num_classes);
}

struct ZeroShotResult {
    Matrix prompt_embeds;           // [classes x d]
    Matrix scores;                  // [queries x classes] cosine similarities
    std::vector<std::size_t> predicted;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double roc_auc = 0.0;
};

inline ZeroShotResult zero_shot_from_scores(Matrix scores, const std::vector<std::size_t>& labels) {
    if (scores.cols < 2) throw ContractError("zero_shot_classify: need at least two classes");
    if (labels.size() != scores.rows) throw ShapeError("zero_shot_classify: labels do not match queries");
    ZeroShotResult r;
    std::size_t correct = 0;
    for (std::size_t q = 0; q < scores.rows; ++q) {
        auto row = scores.row(q);
        const auto best = static_cast<std::size_t>(std::distance(row.begin(), std::max_element(row.begin(), row.end())));
        r.predicted.push_back(best);
        correct += best == labels[q];
    }
    r.accuracy = scores.rows ? static_cast<double>(correct) / static_cast<double>(scores.rows) : 0.0;
    r.macro_f1 = macro_f1(r.predicted, labels, scores.cols);
    r.roc_auc = macro_roc_auc(scores, labels);
    r.scores = std::move(scores);
    return r;
}

/// Encodes each class prompt to its global text embedding and predicts the
/// class whose prompt is most cosine-similar to each image.
inline ZeroShotResult zero_shot_classify(const Matrix& image_embeds, const std::vector<TextSample>& class_prompts,
                                         Model& model, const std::vector<std::size_t>& labels) {
    if (class_prompts.size() < 2) throw ContractError("zero_shot_classify: need at least two classes");
    const std::size_t d = model.enc.embed_dim();
    if (image_embeds.cols != d)
        throw ShapeError("zero_shot_classify: image embeddings have d=" + std::to_string(image_embeds.cols) +
                         ", model has d=" + std::to_string(d));
    Matrix prompts(class_prompts.size(), d);
    for (std::size_t c = 0; c < class_prompts.size(); ++c) {
        Tape tape;
        EncoderLeaves leaves(tape, model.enc);
        auto g = encode_text(class_prompts[c], leaves).global.data();
        std::copy(g.begin(), g.end(), prompts.data.begin() + static_cast<std::ptrdiff_t>(c * d));
    }
    Matrix scores(image_embeds.rows, class_prompts.size());
    for (std::size_t q = 0; q < image_embeds.rows; ++q)
        for (std::size_t c = 0; c < class_prompts.size(); ++c)
            scores(q, c) = cosine_value(image_embeds.row(q), prompts.row(c));
    auto r = zero_shot_from_scores(std::move(scores), labels);
    r.prompt_embeds = std::move(prompts);
    return r;
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeOptions {
    std::size_t iterations = 400;
    double lr = 0.5;
    double l2 = 1e-4;
    std::uint64_t seed = 0;
};

struct ProbeModel {
    Matrix weights;  // [d x classes]
    std::vector<double> bias;
    std::vector<double> mean, scale;  // feature standardisation from the training subset

    Matrix logits(const Matrix& x) const {
        Matrix out(x.rows, weights.cols);
        for (std::size_t i = 0; i < x.rows; ++i)
            for (std::size_t c = 0; c < weights.cols; ++c) {
                double z = bias[c];
                for (std::size_t j = 0; j < x.cols; ++j) z += (x(i, j) - mean[j]) / scale[j] * weights(j, c);
                out(i, c) = z;
            }
        return out;
    }
};

/// Multinomial logistic regression by full-batch gradient descent.
inline ProbeModel train_softmax_regression(const Matrix& x, const std::vector<std::size_t>& y,
                                           std::size_t num_classes, const ProbeOptions& opt) {
    const std::size_t n = x.rows, d = x.cols;
    ProbeModel m{Matrix(d, num_classes), std::vector<double>(num_classes, 0.0), std::vector<double>(d, 0.0),
                 std::vector<double>(d, 1.0)};
    for (std::size_t j = 0; j < d; ++j) {
        double mu = 0.0, var = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += x(i, j);
        mu /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) var += (x(i, j) - mu) * (x(i, j) - mu);
        m.mean[j] = mu;
        m.scale[j] = std::sqrt(var / static_cast<double>(n)) + 1e-8;
    }
    Matrix grad_w(d, num_classes);
    std::vector<double> grad_b(num_classes);
    for (std::size_t it = 0; it < opt.iterations; ++it) {
        auto z = m.logits(x);
        std::fill(grad_w.data.begin(), grad_w.data.end(), 0.0);
        std::fill(grad_b.begin(), grad_b.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double mx = z(i, 0);
            for (std::size_t c = 1; c < num_classes; ++c) mx = std::max(mx, z(i, c));
            double s = 0.0;
            for (std::size_t c = 0; c < num_classes; ++c) s += (z(i, c) = std::exp(z(i, c) - mx));
            for (std::size_t c = 0; c < num_classes; ++c) {
                const double err = z(i, c) / s - (y[i] == c ? 1.0 : 0.0);
                grad_b[c] += err;
                for (std::size_t j = 0; j < d; ++j) grad_w(j, c) += err * (x(i, j) - m.mean[j]) / m.scale[j];
            }
        }
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t k = 0; k < grad_w.data.size(); ++k)
            m.weights.data[k] -= opt.lr * (grad_w.data[k] * inv + opt.l2 * m.weights.data[k]);
        for (std::size_t c = 0; c < num_classes; ++c) m.bias[c] -= opt.lr * grad_b[c] * inv;
    }
    return m;
}

struct ProbePoint {
    double fraction = 0.0;
    std::size_t samples = 0;
    double auc = 0.0;
};

/// Trains one probe per label fraction on a seeded, nested subset of the
/// training embeddings (the first ceil(f*n) of one shuffled order) and reports
/// macro one-vs-rest ROC-AUC on the test embeddings.
inline std::vector<ProbePoint> linear_probe(const Matrix& train_x, const std::vector<std::size_t>& train_y,
                                            const Matrix& test_x, const std::vector<std::size_t>& test_y,
                                            std::size_t num_classes, const std::vector<double>& fractions,
                                            const ProbeOptions& opt = {}) {
    if (train_x.rows != train_y.size() || test_x.rows != test_y.size())
        throw ShapeError("linear_probe: labels do not match embeddings");
    if (train_x.cols != test_x.cols) throw ShapeError("linear_probe: train/test embedding dims differ");
    auto rng = make_stream(opt.seed, "probe");
    std::vector<std::size_t> order(train_x.rows);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<ProbePoint> out;
    for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) throw ContractError("linear_probe: fraction " + std::to_string(f) + " outside (0, 1]");
        const auto n = static_cast<std::size_t>(std::ceil(f * static_cast<double>(train_x.rows) - 1e-9));
        Matrix x(n, train_x.cols);
        std::vector<std::size_t> y(n);
        std::vector<std::size_t> seen(num_classes, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto src = order[i];
            std::copy_n(train_x.row(src).begin(), train_x.cols, x.data.begin() + static_cast<std::ptrdiff_t>(i * x.cols));
            y[i] = train_y[src];
            ++seen.at(y[i]);
        }
        for (std::size_t c = 0; c < num_classes; ++c)
            if (seen[c] == 0)
                throw ContractError("linear_probe: fraction " + std::to_string(f) + " leaves class " +
                                    std::to_string(c) + " without training samples");
        auto probe = train_softmax_regression(x, y, num_classes, opt);
        out.push_back({f, n, macro_roc_auc(probe.logits(test_x), test_y)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Grouping fidelity

struct GroupingFidelity {
    std::vector<double> per_pair;  // mean planted alpha mass over concept tokens
    double mean = 0.0;
    std::vector<std::size_t> histogram;  // 10 equal bins over [0, 1]
};

/// Mean over planted groups of the alpha mass a concept token puts on its
/// planted patches. `alpha` rows follow `positions` (real tokens in order).
inline double fidelity_from_alpha(std::span<const double> alpha, std::size_t num_patches,
                                  const std::vector<std::size_t>& positions, const PlantedAlignment& planted) {
    if (planted.groups.empty()) return 0.0;
    double total = 0.0;
    for (const auto& g : planted.groups) {
        const auto it = std::find(positions.begin(), positions.end(), g.token_position);
        if (it == positions.end()) throw ContractError("grouping_fidelity: planted token is padding");
        const auto row = static_cast<std::size_t>(std::distance(positions.begin(), it));
        double mass = 0.0;
        for (auto n : g.patches) mass += alpha[row * num_patches + n];
        total += mass;
    }
    return total / static_cast<double>(planted.groups.size());
}

inline GroupingFidelity summarize_fidelity(std::vector<double> per_pair) {
    GroupingFidelity f;
    f.histogram.assign(10, 0);
    for (double v : per_pair) {
        f.mean += v;
        ++f.histogram[std::min<std::size_t>(9, static_cast<std::size_t>(std::max(0.0, v) * 10.0))];
    }
    if (!per_pair.empty()) f.mean /= static_cast<double>(per_pair.size());
    f.per_pair = std::move(per_pair);
    return f;
}

/// Token->patch alignment weights of one pair under threshold sigma_tg.
inline Matrix token_alignment(Model& model, const LabeledPair& pair, double sigma_tg,
                              std::vector<std::size_t>* positions = nullptr) {
    Tape tape;
    EncoderLeaves leaves(tape, model.enc);
    auto img = encode_image(pair.image, leaves);
    auto txt = encode_text(pair.text, leaves);
    auto s_hat = minmax_rows(similarity_matrix(txt.real_tokens, img.patches));
    auto alpha = alignment_weights(sparsify(s_hat, sigma_tg));
    if (positions) *positions = txt.positions;
    Matrix a(alpha.rows(), alpha.cols());
    std::copy(alpha.data().begin(), alpha.data().end(), a.data.begin());
    return a;
}

inline GroupingFidelity grouping_fidelity(Model& model, const std::vector<LabeledPair>& pairs, double sigma_tg) {
    std::vector<double> per_pair;
    for (const auto& p : pairs) {
        std::vector<std::size_t> pos;
        auto alpha = token_alignment(model, p, sigma_tg, &pos);
        per_pair.push_back(fidelity_from_alpha(alpha.data, alpha.cols, pos, p.planted));
    }
    return summarize_fidelity(std::move(per_pair));
}

// ---------------------------------------------------------------------------
// Heatmaps

struct HeatmapFiles {
    std::string pgm, csv;
};

/// Writes `<stem>.pgm` (P2 graymap scaled by the row maximum) and `<stem>.csv`
/// (raw weights, one grid row per line, round-trip precision).
inline HeatmapFiles export_heatmap(std::span<const double> alpha_row, std::size_t grid_rows, std::size_t grid_cols,
                                   const std::string& token_text, const std::string& stem) {
    if (alpha_row.size() != grid_rows * grid_cols)
        throw ShapeError("export_heatmap: " + std::to_string(alpha_row.size()) + " weights for a " +
                         std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
    const double mx = *std::max_element(alpha_row.begin(), alpha_row.end());
    HeatmapFiles files{stem + ".pgm", stem + ".csv"};
    std::ofstream pgm(files.pgm);
    pgm << "P2\n# token " << token_text << "\n" << grid_cols << ' ' << grid_rows << "\n255\n";
    for (std::size_t r = 0; r < grid_rows; ++r) {
        for (std::size_t c = 0; c < grid_cols; ++c) {
            const double v = mx > 0.0 ? alpha_row[r * grid_cols + c] / mx : 0.0;
            pgm << (c ? " " : "") << static_cast<int>(std::lround(255.0 * v));
        }
        pgm << '\n';
    }
    std::ofstream csv(files.csv);
    char buf[40];
    for (std::size_t r = 0; r < grid_rows; ++r) {
        for (std::size_t c = 0; c < grid_cols; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", alpha_row[r * grid_cols + c]);
            csv << (c ? "," : "") << buf;
        }
        csv << '\n';
    }
    if (!pgm || !csv) throw std::runtime_error("export_heatmap: failed writing " + stem);
    return files;
}

inline std::vector<double> read_heatmap_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<double> out;
    std::string line, cell;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) out.push_back(std::strtod(cell.c_str(), nullptr));
    }
    return out;
}

}  // namespace aga
