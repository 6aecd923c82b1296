#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "toxlab/common.hpp"
#include "toxlab/model.hpp"

namespace toxlab {

// Synthetic toxicity environment. The oracle is a fixed, count-based ground
// truth over a designated toxic vocabulary slice; training can never move it,
// which is exactly the role the external text classifier plays at full scale.

struct CorpusRecord {
    std::string id;
    std::vector<int> prompt_tokens;
    double oracle_score = -1.0;  // < 0 means absent
    std::string split = "train";

    bool has_score() const { return oracle_score >= 0.0; }
};

enum class OracleSmoothing { None, Logistic };

struct OracleConfig {
    std::set<int> toxic_vocab;
    OracleSmoothing smoothing = OracleSmoothing::None;
    double logistic_slope = 8.0;

    // top quarter of token indices; never contains the EOS token 0
    static OracleConfig defaults(int vocab_size) {
        OracleConfig cfg;
        for (int t = vocab_size - vocab_size / 4; t < vocab_size; ++t) cfg.toxic_vocab.insert(t);
        cfg.validate(vocab_size);
        return cfg;
    }

    void validate(int vocab_size) const {
        if (toxic_vocab.empty()) throw std::invalid_argument("OracleConfig: empty toxic_vocab");
        if (static_cast<int>(toxic_vocab.size()) >= vocab_size) {
            throw std::invalid_argument("OracleConfig: toxic_vocab must be a strict vocab subset");
        }
        for (int t : toxic_vocab) {
            if (t < 0 || t >= vocab_size) {
                throw std::invalid_argument("OracleConfig: toxic token " + std::to_string(t) +
                                            " outside vocabulary");
            }
        }
    }
};

// Fraction of toxic-vocabulary tokens, optionally squashed through a
// logistic centered at 0.5. Deterministic, permutation-invariant.
inline double oracle_score(const std::vector<int>& tokens, const OracleConfig& cfg) {
    if (tokens.empty()) throw std::invalid_argument("oracle_score: empty token sequence");
    size_t toxic = 0;
    for (int t : tokens) toxic += cfg.toxic_vocab.count(t);
    const double frac = static_cast<double>(toxic) / static_cast<double>(tokens.size());
    if (cfg.smoothing == OracleSmoothing::None) return frac;
    return detail::stable_sigmoid(cfg.logistic_slope * (frac - 0.5));
}

inline bool label_from_score(double score) {
    if (!(score >= 0.0 && score <= 1.0)) {
        throw std::invalid_argument("label_from_score: score " + format_double(score) +
                                    " outside [0, 1]");
    }
    return score >= 0.5;
}

struct SynthOptions {
    int len_min = 6;
    int len_max = 12;
    // split fractions applied in index order
    double train_frac = 0.7;
    double val_frac = 0.2;
    // half-width of a uniform per-record jitter around toxicity_bias
    // (clamped to [0,1]). Zero keeps tokens iid at exactly the bias; a
    // positive spread makes toxicity context-correlated, which the training
    // experiments rely on.
    double bias_spread = 0.0;
};

namespace detail_testbed {

// Zipf-like weights over a pool. A flat within-pool distribution would make
// every toxic token cross every clean token in frequency at the same bias,
// so greedy decoding would flip from fully clean to fully toxic at one
// point; the skew spreads those crossings out.
inline std::vector<double> pool_cdf(size_t n) {
    std::vector<double> cdf(n);
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        total += 1.0 / static_cast<double>(i + 1);
        cdf[i] = total;
    }
    for (double& c : cdf) c /= total;
    return cdf;
}

inline int draw_from(const std::vector<int>& pool, const std::vector<double>& cdf, double u) {
    for (size_t i = 0; i < cdf.size(); ++i) {
        if (u < cdf[i]) return pool[i];
    }
    return pool.back();
}

}  // namespace detail_testbed

// Seeded corpus: each token is toxic with probability `toxicity_bias`,
// then drawn from the toxic (resp. non-toxic, EOS excluded) pool under a
// fixed Zipf-like within-pool distribution.
inline std::vector<CorpusRecord> synth_corpus(size_t n, double toxicity_bias, uint64_t seed,
                                              const OracleConfig& oracle, int vocab_size,
                                              const SynthOptions& opt = {}) {
    if (n < 1) throw std::invalid_argument("synth_corpus: n must be >= 1");
    if (!(toxicity_bias >= 0.0 && toxicity_bias <= 1.0)) {
        throw std::invalid_argument("synth_corpus: toxicity_bias outside [0, 1]");
    }
    oracle.validate(vocab_size);
    std::vector<int> toxic_pool(oracle.toxic_vocab.begin(), oracle.toxic_vocab.end());
    std::vector<int> clean_pool;
    for (int t = 0; t < vocab_size; ++t) {
        if (t != kEosToken && !oracle.toxic_vocab.count(t)) clean_pool.push_back(t);
    }
    if (clean_pool.empty()) throw std::invalid_argument("synth_corpus: no non-toxic tokens");
    const auto toxic_cdf = detail_testbed::pool_cdf(toxic_pool.size());
    const auto clean_cdf = detail_testbed::pool_cdf(clean_pool.size());

    Rng rng(splitmix64(seed ^ 0x636f7270u));
    std::vector<CorpusRecord> out;
    out.reserve(n);
    const size_t n_train = static_cast<size_t>(static_cast<double>(n) * opt.train_frac);
    const size_t n_val = static_cast<size_t>(static_cast<double>(n) * opt.val_frac);
    for (size_t i = 0; i < n; ++i) {
        CorpusRecord rec;
        char idbuf[24];
        std::snprintf(idbuf, sizeof idbuf, "syn-%06zu", i);
        rec.id = idbuf;
        const int len = opt.len_min + static_cast<int>(rng.below(
                                          static_cast<uint64_t>(opt.len_max - opt.len_min + 1)));
        double record_bias = toxicity_bias;
        if (opt.bias_spread > 0.0) {
            record_bias += opt.bias_spread * (2.0 * rng.uniform() - 1.0);
            record_bias = std::min(1.0, std::max(0.0, record_bias));
        }
        rec.prompt_tokens.reserve(len);
        for (int t = 0; t < len; ++t) {
            const bool toxic = rng.uniform() < record_bias;
            if (toxic) {
                rec.prompt_tokens.push_back(
                    detail_testbed::draw_from(toxic_pool, toxic_cdf, rng.uniform()));
            } else {
                rec.prompt_tokens.push_back(
                    detail_testbed::draw_from(clean_pool, clean_cdf, rng.uniform()));
            }
        }
        rec.oracle_score = oracle_score(rec.prompt_tokens, oracle);
        rec.split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        out.push_back(std::move(rec));
    }
    return out;
}

// ------------------------------------------------------------------ jsonl io

struct CorpusFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CorpusParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One JSON object per line: {"id": str, "tokens": [int], "score": float?}.
// Malformed lines abort the load, naming the line and offending field.
inline std::vector<CorpusRecord> load_corpus_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw CorpusFileError("load_corpus_jsonl: cannot open '" + path + "'");
    std::vector<CorpusRecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw CorpusParseError("line " + std::to_string(lineno) + ": invalid JSON: " +
                                   e.what());
        }
        auto fail = [&](const std::string& field, const std::string& why) -> CorpusParseError {
            return CorpusParseError("line " + std::to_string(lineno) + ": field '" + field +
                                    "' " + why);
        };
        CorpusRecord rec;
        if (!j.contains("id") || !j["id"].is_string()) throw fail("id", "missing or not a string");
        rec.id = j["id"].get<std::string>();
        if (!j.contains("tokens") || !j["tokens"].is_array()) {
            throw fail("tokens", "missing or not an array");
        }
        for (const auto& t : j["tokens"]) {
            if (!t.is_number_integer()) throw fail("tokens", "contains a non-integer");
            rec.prompt_tokens.push_back(t.get<int>());
        }
        if (j.contains("score") && !j["score"].is_null()) {
            if (!j["score"].is_number()) throw fail("score", "not a number");
            const double s = j["score"].get<double>();
            if (!(s >= 0.0 && s <= 1.0)) {
                throw fail("score", "value " + format_double(s) + " outside [0, 1]");
            }
            rec.oracle_score = s;
        }
        out.push_back(std::move(rec));
    }
    return out;
}

inline void save_corpus_jsonl(const std::string& path, const std::vector<CorpusRecord>& records) {
    std::ofstream os(path);
    if (!os) throw CorpusFileError("save_corpus_jsonl: cannot open '" + path + "' for writing");
    for (const auto& rec : records) {
        nlohmann::json j;
        j["id"] = rec.id;
        j["tokens"] = rec.prompt_tokens;
        if (rec.has_score()) j["score"] = rec.oracle_score;
        os << j.dump() << "\n";
    }
}

inline uint64_t corpus_fingerprint(const std::vector<CorpusRecord>& records) {
    uint64_t h = fnv1a64("corpus");
    for (const auto& rec : records) {
        h = hash_combine(h, fnv1a64(rec.id));
        h = hash_combine(h, fnv1a64(rec.prompt_tokens.data(),
                                    rec.prompt_tokens.size() * sizeof(int)));
    }
    return h;
}

}  // namespace toxlab
