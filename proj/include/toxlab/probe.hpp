#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "toxlab/common.hpp"
#include "toxlab/model.hpp"
#include "toxlab/testbed.hpp"

namespace toxlab {

// Linear toxicity probes over pooled hidden states: standardize, fit an
// L2-regularized logistic regression by full-batch gradient descent, then
// calibrate a decision threshold on a validation split.

struct ActivationRecord {
    std::string prompt_id;
    int layer = 0;
    std::vector<double> vector;  // mean over generated tokens, length d_model
    double response_score = 0.0;
    bool label = false;
};

struct Probe {
    int layer = 0;
    std::vector<double> mean;
    std::vector<double> std;  // population std; zero-variance columns fall back to 1
    std::vector<double> weights;
    double bias = 0.0;
    double threshold = 0.5;
    std::string train_subset_id;
    double l2_strength = 1.0;

    size_t dim() const { return weights.size(); }
};

struct ProbeEnsemble {
    std::vector<Probe> probes;  // all members share a layer

    void validate() const {
        if (probes.empty()) throw std::invalid_argument("ProbeEnsemble: empty member list");
        for (const auto& p : probes) {
            if (p.layer != probes[0].layer) {
                throw std::invalid_argument("ProbeEnsemble: members disagree on layer");
            }
        }
    }
    int layer() const { return probes.at(0).layer; }
};

// -------------------------------------------------------------- activations

struct CollectSettings {
    DecodeMode mode = DecodeMode::greedy();
    int max_new = 16;
    uint64_t seed = 0;  // mixed with the prompt id for sampled modes
};

struct CollectStats {
    size_t collected = 0;
    size_t skipped_empty_generation = 0;
};

// Mean hidden state at the generated-token positions (prompt excluded).
// Shared by probe training and preference-pair scoring so both see the
// same representation.
inline std::vector<double> pool_response_activation(const ToyLM& model,
                                                    const std::vector<int>& prompt,
                                                    const std::vector<int>& response, int layer) {
    if (response.empty()) {
        throw std::invalid_argument("pool_response_activation: empty response");
    }
    if (layer < 0 || layer >= model.config.n_layers) {
        throw std::invalid_argument("pool_response_activation: layer " + std::to_string(layer) +
                                    " outside [0, " + std::to_string(model.config.n_layers) + ")");
    }
    std::vector<int> full = prompt;
    full.insert(full.end(), response.begin(), response.end());
    auto fwd = model.forward(full, /*collect_hidden=*/true);
    return mean_pool_rows(fwd.hidden[layer], prompt.size(), full.size()).data();
}

// One record per (prompt, layer): the pooled vector is the arithmetic mean
// of the hidden states at the generated-token positions, prompt excluded;
// the score comes from the oracle applied to the generated tokens only.
inline std::vector<ActivationRecord> collect_activations(
    const ToyLM& model, const std::vector<CorpusRecord>& records, const std::vector<int>& layers,
    const OracleConfig& oracle, const CollectSettings& gen, CollectStats* stats = nullptr) {
    for (int l : layers) {
        if (l < 0 || l >= model.config.n_layers) {
            throw std::invalid_argument("collect_activations: layer " + std::to_string(l) +
                                        " outside [0, " + std::to_string(model.config.n_layers) +
                                        ")");
        }
    }
    CollectStats local;
    std::vector<ActivationRecord> out;
    out.reserve(records.size() * layers.size());
    for (const auto& rec : records) {
        const int budget = std::min<int>(
            gen.max_new,
            model.config.max_seq_len - static_cast<int>(rec.prompt_tokens.size()));
        if (budget < 1) {
            ++local.skipped_empty_generation;
            continue;
        }
        const uint64_t seed = hash_combine(gen.seed, fnv1a64(rec.id));
        std::vector<int> gen_tokens = model.generate(rec.prompt_tokens, gen.mode, budget, seed);
        if (gen_tokens.empty()) {
            ++local.skipped_empty_generation;
            continue;
        }
        const double score = oracle_score(gen_tokens, oracle);
        for (int l : layers) {
            ActivationRecord act;
            act.prompt_id = rec.id;
            act.layer = l;
            act.response_score = score;
            act.label = label_from_score(score);
            act.vector = pool_response_activation(model, rec.prompt_tokens, gen_tokens, l);
            out.push_back(std::move(act));
        }
        ++local.collected;
    }
    if (stats) *stats = local;
    return out;
}

// ------------------------------------------------------------- standardizer

struct Standardizer {
    std::vector<double> mean;
    std::vector<double> std;
};

// Column-wise mean and population std; zero-variance columns get std = 1.
// Constant columns are detected exactly (min == max) so they standardize to
// all zeros regardless of rounding in the mean accumulation.
inline Standardizer fit_standardizer(const std::vector<std::vector<double>>& X) {
    if (X.size() < 2) throw std::invalid_argument("fit_standardizer: need at least 2 rows");
    const size_t d = X[0].size();
    const double n = static_cast<double>(X.size());
    std::vector<double> sum(d, 0.0), mn(X[0]), mx(X[0]);
    for (const auto& row : X) {
        if (row.size() != d) throw std::invalid_argument("fit_standardizer: ragged matrix");
        for (size_t j = 0; j < d; ++j) {
            sum[j] += row[j];
            mn[j] = std::min(mn[j], row[j]);
            mx[j] = std::max(mx[j], row[j]);
        }
    }
    Standardizer s;
    s.mean.assign(d, 0.0);
    s.std.assign(d, 0.0);
    for (size_t j = 0; j < d; ++j) s.mean[j] = mn[j] == mx[j] ? mn[j] : sum[j] / n;
    for (const auto& row : X) {
        for (size_t j = 0; j < d; ++j) {
            const double c = row[j] - s.mean[j];
            s.std[j] += c * c;
        }
    }
    for (size_t j = 0; j < d; ++j) {
        s.std[j] = std::sqrt(s.std[j] / n);
        if (s.std[j] == 0.0) s.std[j] = 1.0;
    }
    return s;
}

// --------------------------------------------------------------- prediction

inline double predict_proba(const Probe& probe, const std::vector<double>& x) {
    if (x.size() != probe.dim()) {
        throw std::invalid_argument("predict_proba: vector length " + std::to_string(x.size()) +
                                    " does not match probe dimension " +
                                    std::to_string(probe.dim()));
    }
    double z = probe.bias;
    for (size_t j = 0; j < x.size(); ++j) {
        z += probe.weights[j] * (x[j] - probe.mean[j]) / probe.std[j];
    }
    return detail::stable_sigmoid(z);
}

inline bool predict_label(const Probe& probe, const std::vector<double>& x) {
    return predict_proba(probe, x) >= probe.threshold;
}

inline double ensemble_proba(const ProbeEnsemble& ensemble, const std::vector<double>& x) {
    ensemble.validate();
    double sum = 0.0;
    for (const auto& p : ensemble.probes) sum += predict_proba(p, x);
    return sum / static_cast<double>(ensemble.probes.size());
}

// ----------------------------------------------------------------- training

struct TrainProbeOptions {
    double learning_rate = 1e-2;
    double grad_tol = 1e-6;
    int max_iters = 5000;
};

// Full-batch gradient descent on mean NLL + l2_strength * ||w||^2 / 2
// (bias unpenalized), in standardized feature space.
inline Probe train_probe(const std::vector<std::vector<double>>& X, const std::vector<char>& y,
                         double l2_strength, const std::string& subset_id, int layer = 0,
                         const TrainProbeOptions& opt = {}) {
    if (X.size() != y.size() || X.empty()) {
        throw std::invalid_argument("train_probe: X/y size mismatch");
    }
    size_t n_pos = 0;
    for (char c : y) n_pos += c ? 1 : 0;
    if (n_pos == 0 || n_pos == y.size()) {
        throw std::invalid_argument("train_probe: need both classes, got " +
                                    std::to_string(n_pos) + " positive of " +
                                    std::to_string(y.size()));
    }
    Standardizer stats = fit_standardizer(X);
    const size_t n = X.size(), d = X[0].size();
    std::vector<double> Z(n * d);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < d; ++j) {
            Z[i * d + j] = (X[i][j] - stats.mean[j]) / stats.std[j];
        }
    }

    std::vector<double> w(d, 0.0);
    double b = 0.0;
    std::vector<double> gw(d);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int iter = 0; iter < opt.max_iters; ++iter) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double* zi = Z.data() + i * d;
            double z = b;
            for (size_t j = 0; j < d; ++j) z += w[j] * zi[j];
            const double err = (detail::stable_sigmoid(z) - (y[i] ? 1.0 : 0.0)) * inv_n;
            for (size_t j = 0; j < d; ++j) gw[j] += err * zi[j];
            gb += err;
        }
        double norm_sq = gb * gb;
        for (size_t j = 0; j < d; ++j) {
            gw[j] += l2_strength * w[j];
            norm_sq += gw[j] * gw[j];
        }
        if (std::sqrt(norm_sq) < opt.grad_tol) break;
        for (size_t j = 0; j < d; ++j) w[j] -= opt.learning_rate * gw[j];
        b -= opt.learning_rate * gb;
    }

    Probe probe;
    probe.layer = layer;
    probe.mean = std::move(stats.mean);
    probe.std = std::move(stats.std);
    probe.weights = std::move(w);
    probe.bias = b;
    probe.threshold = 0.5;  // calibrated separately
    probe.train_subset_id = subset_id;
    probe.l2_strength = l2_strength;
    return probe;
}

// -------------------------------------------------------------- calibration

// Accuracy-maximizing threshold over the exact candidate set: midpoints of
// adjacent sorted predicted probabilities, plus 0 and 1. Ties break toward
// the smallest candidate.
inline Probe calibrate_threshold(Probe probe, const std::vector<std::vector<double>>& X_val,
                                 const std::vector<char>& y_val) {
    if (X_val.empty() || X_val.size() != y_val.size()) {
        throw std::invalid_argument("calibrate_threshold: empty or mismatched validation set");
    }
    const size_t n = X_val.size();
    std::vector<double> probas(n);
    for (size_t i = 0; i < n; ++i) probas[i] = predict_proba(probe, X_val[i]);

    std::vector<double> sorted = probas;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> candidates = {0.0, 1.0};
    for (size_t i = 0; i + 1 < n; ++i) {
        if (sorted[i] < sorted[i + 1]) candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
    }
    std::sort(candidates.begin(), candidates.end());

    double best_thr = candidates[0];
    size_t best_correct = 0;
    bool first = true;
    for (double thr : candidates) {
        size_t correct = 0;
        for (size_t i = 0; i < n; ++i) {
            const bool pred = probas[i] >= thr;
            if (pred == static_cast<bool>(y_val[i])) ++correct;
        }
        if (first || correct > best_correct) {
            best_correct = correct;
            best_thr = thr;
            first = false;
        }
    }
    probe.threshold = best_thr;
    return probe;
}

// ---------------------------------------------------------------------- auc

// Rank-based AUC with the tie convention P(pos > neg) + 0.5 P(pos == neg).
inline double auc(const std::vector<double>& scores, const std::vector<char>& labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw std::invalid_argument("auc: empty or mismatched inputs");
    }
    size_t n_pos = 0;
    for (char c : labels) n_pos += c ? 1 : 0;
    const size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw std::invalid_argument("auc: need both classes, got " + std::to_string(n_pos) +
                                    " positive of " + std::to_string(labels.size()));
    }
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups, 1-based
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k) {
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        }
        i = j;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// ------------------------------------------------------------ layer choice

struct LayerSelection {
    int best_layer = 0;
    std::vector<std::pair<int, double>> auc_by_layer;
};

struct ProbeDataset {
    std::vector<std::vector<double>> X;
    std::vector<char> y;
};

// One probe per candidate layer on a shared train split, scored by AUC on a
// shared validation split; ties go to the lowest layer index.
inline LayerSelection select_layer(
    const std::vector<int>& layers,
    const std::function<ProbeDataset(int)>& train_data_for_layer,
    const std::function<ProbeDataset(int)>& val_data_for_layer, double l2_strength = 1.0) {
    if (layers.empty()) throw std::invalid_argument("select_layer: no candidate layers");
    LayerSelection sel;
    bool first = true;
    double best_auc = 0.0;
    for (int layer : layers) {
        ProbeDataset train = train_data_for_layer(layer);
        ProbeDataset val = val_data_for_layer(layer);
        Probe probe = train_probe(train.X, train.y, l2_strength,
                                  "layer-select-" + std::to_string(layer), layer);
        std::vector<double> scores(val.X.size());
        for (size_t i = 0; i < val.X.size(); ++i) scores[i] = predict_proba(probe, val.X[i]);
        const double a = auc(scores, val.y);
        sel.auc_by_layer.emplace_back(layer, a);
        if (first || a > best_auc) {
            best_auc = a;
            sel.best_layer = layer;
            first = false;
        }
    }
    return sel;
}

// Convenience wrapper: collect activations once, then select over layers.
inline LayerSelection select_layer(const ToyLM& model, const std::vector<CorpusRecord>& train,
                                   const std::vector<CorpusRecord>& val,
                                   const std::vector<int>& layers, const OracleConfig& oracle,
                                   const CollectSettings& gen, double l2_strength = 1.0) {
    auto acts_train = collect_activations(model, train, layers, oracle, gen);
    auto acts_val = collect_activations(model, val, layers, oracle, gen);
    auto dataset = [](const std::vector<ActivationRecord>& acts, int layer) {
        ProbeDataset d;
        for (const auto& a : acts) {
            if (a.layer != layer) continue;
            d.X.push_back(a.vector);
            d.y.push_back(a.label ? 1 : 0);
        }
        return d;
    };
    return select_layer(
        layers, [&](int l) { return dataset(acts_train, l); },
        [&](int l) { return dataset(acts_val, l); }, l2_strength);
}

// -------------------------------------------------------------- diversity

struct CosineReport {
    std::vector<std::vector<double>> matrix;  // unit diagonal
    double off_diag_mean = 0.0;
    double off_diag_min = 0.0;
    double off_diag_max = 0.0;
};

inline CosineReport cosine_similarity_matrix(const std::vector<Probe>& probes) {
    if (probes.size() < 2) {
        throw std::invalid_argument("cosine_similarity_matrix: need at least 2 probes");
    }
    std::vector<double> norms(probes.size());
    for (size_t i = 0; i < probes.size(); ++i) {
        double nsq = 0.0;
        for (double w : probes[i].weights) nsq += w * w;
        if (nsq == 0.0) {
            throw std::invalid_argument("cosine_similarity_matrix: probe '" +
                                        probes[i].train_subset_id + "' has a zero weight vector");
        }
        norms[i] = std::sqrt(nsq);
    }
    CosineReport rep;
    const size_t n = probes.size();
    rep.matrix.assign(n, std::vector<double>(n, 0.0));
    double sum = 0.0;
    double mn = 2.0, mx = -2.0;
    for (size_t i = 0; i < n; ++i) {
        rep.matrix[i][i] = 1.0;
        for (size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (size_t k = 0; k < probes[i].weights.size(); ++k) {
                dot += probes[i].weights[k] * probes[j].weights[k];
            }
            const double c = dot / (norms[i] * norms[j]);
            rep.matrix[i][j] = rep.matrix[j][i] = c;
            sum += c;
            mn = std::min(mn, c);
            mx = std::max(mx, c);
        }
    }
    const double pairs = static_cast<double>(n * (n - 1) / 2);
    rep.off_diag_mean = sum / pairs;
    rep.off_diag_min = mn;
    rep.off_diag_max = mx;
    return rep;
}

// CSV matrix plus one summary row (mean/min/max of the off-diagonal).
inline void write_cosine_csv(const std::string& path, const CosineReport& rep) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_cosine_csv: cannot open '" + path + "'");
    const size_t n = rep.matrix.size();
    os << "probe";
    for (size_t j = 0; j < n; ++j) os << ",p" << j;
    os << "\n";
    for (size_t i = 0; i < n; ++i) {
        os << "p" << i;
        for (size_t j = 0; j < n; ++j) os << "," << format_double(rep.matrix[i][j]);
        os << "\n";
    }
    os << "summary(mean/min/max)," << format_double(rep.off_diag_mean) << ","
       << format_double(rep.off_diag_min) << "," << format_double(rep.off_diag_max) << "\n";
}

// ----------------------------------------------------------------- file io
//
// Binary probe container; 64-bit payloads round-trip bit-exactly.

inline void save_probe(const std::string& path, const Probe& probe) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_probe: cannot open '" + path + "' for writing");
    os.write("TOXPROBE", 8);
    ckpt::write_u32(os, static_cast<uint32_t>(probe.layer));
    ckpt::write_u32(os, static_cast<uint32_t>(probe.dim()));
    ckpt::write_string(os, probe.train_subset_id);
    ckpt::write_f64(os, probe.l2_strength);
    ckpt::write_doubles(os, probe.mean);
    ckpt::write_doubles(os, probe.std);
    ckpt::write_doubles(os, probe.weights);
    ckpt::write_f64(os, probe.bias);
    ckpt::write_f64(os, probe.threshold);
    if (!os) throw std::runtime_error("save_probe: write failed for '" + path + "'");
}

inline Probe load_probe(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_probe: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "TOXPROBE", 8) != 0) {
        throw std::runtime_error("load_probe: '" + path + "' is not a toxlab probe file");
    }
    Probe probe;
    probe.layer = static_cast<int>(ckpt::read_u32(is));
    const size_t d = ckpt::read_u32(is);
    probe.train_subset_id = ckpt::read_string(is);
    probe.l2_strength = ckpt::read_f64(is);
    probe.mean = ckpt::read_doubles(is, d);
    probe.std = ckpt::read_doubles(is, d);
    probe.weights = ckpt::read_doubles(is, d);
    probe.bias = ckpt::read_f64(is);
    probe.threshold = ckpt::read_f64(is);
    if (!is) throw std::runtime_error("load_probe: truncated file '" + path + "'");
    return probe;
}

inline uint64_t probe_fingerprint(const Probe& p) {
    uint64_t h = fnv1a64("probe");
    h = hash_combine(h, static_cast<uint64_t>(p.layer));
    h = hash_combine(h, fnv1a64(p.train_subset_id));
    h = hash_combine(h, fnv1a64(p.mean.data(), p.mean.size() * sizeof(double)));
    h = hash_combine(h, fnv1a64(p.std.data(), p.std.size() * sizeof(double)));
    h = hash_combine(h, fnv1a64(p.weights.data(), p.weights.size() * sizeof(double)));
    h = hash_combine(h, fnv1a64(&p.bias, sizeof(double)));
    h = hash_combine(h, fnv1a64(&p.threshold, sizeof(double)));
    return h;
}

}  // namespace toxlab
