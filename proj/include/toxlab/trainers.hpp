#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "toxlab/common.hpp"
#include "toxlab/model.hpp"
#include "toxlab/probe.hpp"
#include "toxlab/testbed.hpp"

namespace toxlab {

// The two training schemes: preference optimization against a probe or
// oracle judge, and supervised fine-tuning with a frozen-probe penalty.

// ------------------------------------------------------------------- types

enum class ScorerKind { Probe, Ensemble, OracleClassifier };

inline const char* scorer_kind_name(ScorerKind k) {
    switch (k) {
        case ScorerKind::Probe: return "probe";
        case ScorerKind::Ensemble: return "ensemble";
        case ScorerKind::OracleClassifier: return "oracle-classifier";
    }
    return "?";
}

inline ScorerKind scorer_kind_from(const std::string& s) {
    if (s == "probe") return ScorerKind::Probe;
    if (s == "ensemble") return ScorerKind::Ensemble;
    if (s == "oracle-classifier") return ScorerKind::OracleClassifier;
    throw std::invalid_argument("unknown scorer kind '" + s + "'");
}

struct PreferencePair {
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;
    double chosen_score = 0.0;
    double rejected_score = 0.0;
    ScorerKind scorer = ScorerKind::OracleClassifier;

    void validate() const {
        if (chosen_score > rejected_score) {
            throw std::invalid_argument("PreferencePair: chosen_score exceeds rejected_score");
        }
        if (chosen == rejected) {
            throw std::invalid_argument("PreferencePair: chosen equals rejected");
        }
    }
};

struct DpoConfig {
    double beta = 0.1;
    int k_candidates = 5;
    double temperature = 1.0;
    int n_prompts = 200;
    double split[3] = {0.7, 0.2, 0.1};
    double lr = 5e-3;
    int steps = 60;
    int batch_size = 8;
    uint64_t seed = 0;
    int max_new = 16;  // generation cap per candidate

    void validate() const {
        if (!(beta > 0.0)) throw std::invalid_argument("DpoConfig: beta must be > 0");
        if (k_candidates < 2) throw std::invalid_argument("DpoConfig: k_candidates must be >= 2");
        if (!(temperature > 0.0)) throw std::invalid_argument("DpoConfig: temperature must be > 0");
        if (std::fabs(split[0] + split[1] + split[2] - 1.0) > 1e-9) {
            throw std::invalid_argument("DpoConfig: split fractions must sum to 1");
        }
        if (n_prompts < 1 || steps < 0 || batch_size < 1 || max_new < 1) {
            throw std::invalid_argument("DpoConfig: bad sizes");
        }
    }
};

enum class Strategy { Average, RandomSwitch, TimedSwitch };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Average: return "average";
        case Strategy::RandomSwitch: return "random_switch";
        case Strategy::TimedSwitch: return "timed_switch";
    }
    return "?";
}

inline Strategy strategy_from(const std::string& s) {
    if (s == "average") return Strategy::Average;
    if (s == "random_switch") return Strategy::RandomSwitch;
    if (s == "timed_switch") return Strategy::TimedSwitch;
    throw std::invalid_argument("unknown strategy '" + s + "'");
}

enum class ProbePooling { PerSequence, PerBatch };

struct SftConfig {
    double lambda = 1.0;
    Strategy strategy = Strategy::TimedSwitch;
    int epochs = 1;
    double lr = 5e-3;
    int batch_size = 8;
    uint64_t seed = 0;
    int batches_per_probe = 1;
    // per-sequence pooling matches the probes' training distribution; the
    // per-batch alternative pools once across the concatenated batch
    ProbePooling pooling = ProbePooling::PerSequence;

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("SftConfig: lambda must be >= 0");
        if (epochs < 1 || batch_size < 1 || batches_per_probe < 1) {
            throw std::invalid_argument("SftConfig: bad sizes");
        }
    }
};

struct StrategySchedule {
    Strategy kind = Strategy::TimedSwitch;
    size_t probe_count = 1;
    int batches_per_probe = 1;
    uint64_t seed = 0;
};

// -------------------------------------------------------------- scheduling

// average -> every probe; random_switch -> one seeded index per batch;
// timed_switch -> round-robin with a fixed batch allocation per probe.
inline std::vector<size_t> schedule_probe(const StrategySchedule& schedule, int batch_index) {
    if (batch_index < 0) throw std::invalid_argument("schedule_probe: negative batch index");
    if (schedule.probe_count == 0) throw std::invalid_argument("schedule_probe: no probes");
    switch (schedule.kind) {
        case Strategy::Average: {
            std::vector<size_t> all(schedule.probe_count);
            for (size_t i = 0; i < all.size(); ++i) all[i] = i;
            return all;
        }
        case Strategy::RandomSwitch: {
            Rng rng(hash_combine(schedule.seed, static_cast<uint64_t>(batch_index)));
            return {rng.index(schedule.probe_count)};
        }
        case Strategy::TimedSwitch: {
            const size_t slot = static_cast<size_t>(batch_index / schedule.batches_per_probe);
            return {slot % schedule.probe_count};
        }
    }
    throw std::logic_error("schedule_probe: unreachable");
}

// ------------------------------------------------------------ candidates

struct PairScorer {
    ScorerKind kind = ScorerKind::OracleClassifier;
    ProbeEnsemble ensemble;  // Probe (single member) or Ensemble
    OracleConfig oracle;     // OracleClassifier

    double score(const ToyLM& model, const std::vector<int>& prompt,
                 const std::vector<int>& candidate) const {
        if (kind == ScorerKind::OracleClassifier) {
            return oracle_score(candidate, oracle);
        }
        ensemble.validate();
        const auto pooled = pool_response_activation(model, prompt, candidate, ensemble.layer());
        return ensemble_proba(ensemble, pooled);
    }
};

inline uint64_t candidate_seed(uint64_t run_seed, const std::string& prompt_id, int index) {
    return hash_combine(hash_combine(run_seed, fnv1a64(prompt_id)), static_cast<uint64_t>(index));
}

// k independent temperature samples with per-candidate derived seeds.
inline std::vector<std::vector<int>> generate_candidates(const ToyLM& model,
                                                         const CorpusRecord& record,
                                                         const DpoConfig& cfg) {
    if (cfg.k_candidates < 2) {
        throw std::invalid_argument("generate_candidates: k must be >= 2");
    }
    const int budget = std::min<int>(
        cfg.max_new, model.config.max_seq_len - static_cast<int>(record.prompt_tokens.size()));
    if (budget < 1) {
        throw std::invalid_argument("generate_candidates: prompt '" + record.id +
                                    "' leaves no room to generate");
    }
    std::vector<std::vector<int>> out;
    out.reserve(cfg.k_candidates);
    for (int i = 0; i < cfg.k_candidates; ++i) {
        out.push_back(model.generate(record.prompt_tokens,
                                     DecodeMode::temperature_sampling(cfg.temperature), budget,
                                     candidate_seed(cfg.seed, record.id, i)));
    }
    return out;
}

enum class PairSkip { None, Degenerate, ScorerFailure };

// chosen = argmin score, rejected = argmax score; ties break toward the
// lowest candidate index. Degenerate candidate sets are skipped, never
// imputed.
inline std::optional<PreferencePair> build_preference_pair(
    const ToyLM& model, const std::vector<int>& prompt,
    const std::vector<std::vector<int>>& candidates, const PairScorer& scorer,
    PairSkip* skip = nullptr) {
    if (skip) *skip = PairSkip::None;
    std::vector<double> scores;
    scores.reserve(candidates.size());
    try {
        for (const auto& cand : candidates) scores.push_back(scorer.score(model, prompt, cand));
    } catch (const std::exception&) {
        if (skip) *skip = PairSkip::ScorerFailure;
        return std::nullopt;
    }
    size_t lo = 0, hi = 0;
    for (size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] < scores[lo]) lo = i;
        if (scores[i] > scores[hi]) hi = i;
    }
    if (scores[hi] - scores[lo] < 1e-9 || candidates[lo] == candidates[hi]) {
        if (skip) *skip = PairSkip::Degenerate;
        return std::nullopt;
    }
    PreferencePair pair;
    pair.prompt = prompt;
    pair.chosen = candidates[lo];
    pair.rejected = candidates[hi];
    pair.chosen_score = scores[lo];
    pair.rejected_score = scores[hi];
    pair.scorer = scorer.kind;
    pair.validate();
    return pair;
}

struct PairGenManifest {
    ScorerKind scorer = ScorerKind::OracleClassifier;
    int k = 5;
    uint64_t seed = 0;
    size_t prompts_seen = 0;
    size_t pairs_emitted = 0;
    size_t skipped_degenerate = 0;
    size_t skipped_scorer_failure = 0;
    size_t skipped_no_room = 0;
};

struct PairGenResult {
    std::vector<PreferencePair> pairs;
    PairGenManifest manifest;
};

inline PairGenResult generate_pairs(const ToyLM& model, const std::vector<CorpusRecord>& prompts,
                                    const PairScorer& scorer, const DpoConfig& cfg) {
    cfg.validate();
    PairGenResult result;
    result.manifest.scorer = scorer.kind;
    result.manifest.k = cfg.k_candidates;
    result.manifest.seed = cfg.seed;
    const size_t limit = std::min<size_t>(prompts.size(), static_cast<size_t>(cfg.n_prompts));
    for (size_t i = 0; i < limit; ++i) {
        ++result.manifest.prompts_seen;
        std::vector<std::vector<int>> candidates;
        try {
            candidates = generate_candidates(model, prompts[i], cfg);
        } catch (const std::exception&) {
            ++result.manifest.skipped_no_room;
            continue;
        }
        PairSkip skip;
        auto pair = build_preference_pair(model, prompts[i].prompt_tokens, candidates, scorer,
                                          &skip);
        if (pair) {
            result.pairs.push_back(std::move(*pair));
            ++result.manifest.pairs_emitted;
        } else if (skip == PairSkip::Degenerate) {
            ++result.manifest.skipped_degenerate;
        } else {
            ++result.manifest.skipped_scorer_failure;
        }
    }
    return result;
}

// ---------------------------------------------------------------- splitting

struct PairSplits {
    std::vector<PreferencePair> train, val, test;
};

// Seeded shuffle then contiguous slicing; the partitions are disjoint and
// cover the input.
inline PairSplits split_pairs(const std::vector<PreferencePair>& pairs, const double fractions[3],
                              uint64_t seed) {
    if (std::fabs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
        throw std::invalid_argument("split_pairs: fractions must sum to 1");
    }
    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(splitmix64(seed ^ 0x73706c69u));
    rng.shuffle(order);

    const size_t n = pairs.size();
    const size_t n_train = static_cast<size_t>(static_cast<double>(n) * fractions[0]);
    const size_t n_val = static_cast<size_t>(static_cast<double>(n) * fractions[1]);
    PairSplits out;
    for (size_t i = 0; i < n; ++i) {
        const PreferencePair& p = pairs[order[i]];
        if (i < n_train) out.train.push_back(p);
        else if (i < n_train + n_val) out.val.push_back(p);
        else out.test.push_back(p);
    }
    return out;
}

// ------------------------------------------------------------------ losses

// Mean over the batch of -log sigmoid(beta * ((log pi(y+|x) - log ref(y+|x))
// - (log pi(y-|x) - log ref(y-|x)))). Differentiable w.r.t. the policy's
// trainable tensors only; the reference must be frozen.
inline Tensor dpo_loss(const ToyLM& policy, const ToyLM& reference,
                       const std::vector<PreferencePair>& batch, double beta) {
    if (!reference.frozen) {
        throw std::invalid_argument("dpo_loss: reference model must be frozen");
    }
    if (batch.empty()) throw std::invalid_argument("dpo_loss: empty batch");
    Tensor total = Tensor::scalar(0.0);
    for (const auto& pair : batch) {
        pair.validate();
        Tensor lp_chosen = policy.sequence_logprob_graph(pair.prompt, pair.chosen);
        Tensor lp_rejected = policy.sequence_logprob_graph(pair.prompt, pair.rejected);
        const double ref_margin = reference.sequence_logprob(pair.prompt, pair.chosen) -
                                  reference.sequence_logprob(pair.prompt, pair.rejected);
        Tensor margin = add(add(lp_chosen, scale(lp_rejected, -1.0)),
                            Tensor::scalar(-ref_margin));
        total = add(total, scale(log_sigmoid(scale(margin, beta)), -1.0));
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

// sigmoid(w . (pooled - mean)/std + b) with the probe parameters as
// constants; gradients reach the model only through `pooled`.
inline Tensor probe_proba_graph(const Probe& probe, const Tensor& pooled) {
    const size_t d = probe.dim();
    if (pooled.numel() != d) {
        throw std::invalid_argument("probe_proba_graph: pooled vector length mismatch");
    }
    std::vector<double> neg_mean(d), inv_std(d), w_col(d);
    for (size_t j = 0; j < d; ++j) {
        neg_mean[j] = -probe.mean[j];
        inv_std[j] = 1.0 / probe.std[j];
        w_col[j] = probe.weights[j];
    }
    Tensor centered = add(pooled, Tensor::from({1, d}, neg_mean));
    Tensor standardized = mul(centered, Tensor::from({1, d}, inv_std));
    Tensor z = matmul(standardized, Tensor::from({d, 1}, w_col));
    return sigmoid(add(z, Tensor::scalar(probe.bias)));
}

struct SftLossParts {
    Tensor total;
    double nll = 0.0;      // language-modeling term value
    double penalty = 0.0;  // mean probe probability fed to lambda (0 when unused)
};

// L_total = token-weighted mean next-token NLL + lambda * mean probe
// probability of the pooled layer-l hidden states. Probe parameters are
// frozen; gradients flow through the probe into the model.
inline SftLossParts sft_loss(const ToyLM& model, const std::vector<std::vector<int>>& batch,
                             const ProbeEnsemble& probes, double lambda,
                             const StrategySchedule& schedule, int batch_index,
                             ProbePooling pooling = ProbePooling::PerSequence) {
    if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");
    const bool use_probes = lambda > 0.0;
    if (use_probes) {
        probes.validate();
        if (schedule.probe_count != probes.probes.size()) {
            throw std::invalid_argument("sft_loss: schedule probe_count " +
                                        std::to_string(schedule.probe_count) +
                                        " does not match ensemble size " +
                                        std::to_string(probes.probes.size()));
        }
        if (probes.layer() >= model.config.n_layers) {
            throw std::invalid_argument("sft_loss: probe layer out of range");
        }
    }

    Tensor nll_sum = Tensor::scalar(0.0);
    size_t positions = 0;
    std::vector<Tensor> pooled_per_seq;
    std::vector<size_t> lengths;
    for (const auto& seq : batch) {
        if (seq.size() < 2) {
            throw std::invalid_argument("sft_loss: sequences need length >= 2");
        }
        auto fwd = model.forward(seq, /*collect_hidden=*/use_probes);
        std::vector<int> targets(seq.begin() + 1, seq.end());
        std::vector<size_t> rows(targets.size());
        for (size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        nll_sum = add(nll_sum, scale(gather_log_softmax(fwd.logits, rows, targets), -1.0));
        positions += targets.size();
        if (use_probes) {
            pooled_per_seq.push_back(mean_pool_rows(fwd.hidden[probes.layer()], 0, seq.size()));
            lengths.push_back(seq.size());
        }
    }
    Tensor lm = scale(nll_sum, 1.0 / static_cast<double>(positions));

    SftLossParts parts;
    parts.nll = lm.value();
    if (!use_probes) {
        parts.total = lm;
        return parts;
    }

    const std::vector<size_t> active = schedule_probe(schedule, batch_index);
    auto proba_of = [&](const Tensor& pooled) {
        Tensor sum = Tensor::scalar(0.0);
        for (size_t idx : active) sum = add(sum, probe_proba_graph(probes.probes[idx], pooled));
        return scale(sum, 1.0 / static_cast<double>(active.size()));
    };

    Tensor penalty;
    if (pooling == ProbePooling::PerSequence) {
        Tensor sum = Tensor::scalar(0.0);
        for (const auto& pooled : pooled_per_seq) sum = add(sum, proba_of(pooled));
        penalty = scale(sum, 1.0 / static_cast<double>(pooled_per_seq.size()));
    } else {
        // pool once across the whole concatenated batch (token-weighted)
        size_t total_tokens = 0;
        for (size_t len : lengths) total_tokens += len;
        Tensor mixed = scale(pooled_per_seq[0],
                             static_cast<double>(lengths[0]) / static_cast<double>(total_tokens));
        for (size_t i = 1; i < pooled_per_seq.size(); ++i) {
            mixed = add(mixed, scale(pooled_per_seq[i], static_cast<double>(lengths[i]) /
                                                            static_cast<double>(total_tokens)));
        }
        penalty = proba_of(mixed);
    }
    parts.penalty = penalty.value();
    parts.total = add(lm, scale(penalty, lambda));
    return parts;
}

// ------------------------------------------------------------- train loops

struct TrainHooks {
    // called with (model, step, training-window loss) before step 0, every
    // eval_every steps, and after the final step
    std::function<void(ToyLM&, int, double)> eval;
    int eval_every = 20;
};

struct TrainOutcome {
    int steps_completed = 0;
    bool diverged = false;
    double final_loss = 0.0;
};

namespace detail_train {

// Read-only loss over a fixed window of the training split; used for the
// timeline's loss column so step 0 has a value too.
inline double dpo_window_loss(const ToyLM& policy, const ToyLM& reference,
                              const std::vector<PreferencePair>& train, double beta) {
    const size_t window = std::min<size_t>(train.size(), 32);
    std::vector<PreferencePair> head(train.begin(), train.begin() + window);
    return dpo_loss(policy, reference, head, beta).value();
}

}  // namespace detail_train

// Plain SGD over the policy's trainable tensors (adapters, once attached).
// Divergence (non-finite loss) aborts and restores the last checkpoint
// snapshotted at an eval point.
inline TrainOutcome train_dpo(ToyLM& policy, const ToyLM& reference,
                              const std::vector<PreferencePair>& train_pairs,
                              const DpoConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (train_pairs.empty()) throw std::invalid_argument("train_dpo: no training pairs");
    if (policy.trainable().empty()) {
        throw std::invalid_argument("train_dpo: policy has no trainable tensors");
    }

    std::vector<size_t> order(train_pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(splitmix64(cfg.seed ^ 0x64706f21u));
    rng.shuffle(order);

    TrainOutcome outcome;
    ToyLM snapshot = policy.deep_copy();
    auto run_eval = [&](int step) {
        const double loss =
            detail_train::dpo_window_loss(policy, reference, train_pairs, cfg.beta);
        outcome.final_loss = loss;
        if (hooks.eval) hooks.eval(policy, step, loss);
        snapshot = policy.deep_copy();
    };
    run_eval(0);

    size_t cursor = 0;
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<PreferencePair> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(train_pairs[order[cursor]]);
            cursor = (cursor + 1) % order.size();
        }
        Tensor loss = dpo_loss(policy, reference, batch, cfg.beta);
        if (!std::isfinite(loss.value())) {
            policy = snapshot.deep_copy();
            outcome.diverged = true;
            break;
        }
        loss.backward();
        policy.sgd_step(cfg.lr);
        policy.zero_grads();
        outcome.steps_completed = step;
        if (step == cfg.steps || (hooks.eval_every > 0 && step % hooks.eval_every == 0)) {
            run_eval(step);
        }
    }
    return outcome;
}

// One pass (by default) over the corpus minimizing sft_loss. lambda = 0 is
// the standard-SFT baseline; the probe code path is skipped entirely.
inline TrainOutcome train_sft(ToyLM& model, const std::vector<CorpusRecord>& corpus,
                              const ProbeEnsemble& probes, const SftConfig& cfg,
                              const TrainHooks& hooks = {}) {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("train_sft: empty corpus");
    if (model.trainable().empty()) {
        throw std::invalid_argument("train_sft: model has no trainable tensors");
    }
    StrategySchedule schedule;
    schedule.kind = cfg.strategy;
    schedule.probe_count = cfg.lambda > 0.0 ? probes.probes.size() : 1;
    schedule.batches_per_probe = cfg.batches_per_probe;
    schedule.seed = cfg.seed;

    auto window_loss = [&](int batch_index) {
        const size_t window = std::min<size_t>(corpus.size(), 32);
        std::vector<std::vector<int>> seqs;
        for (size_t i = 0; i < window; ++i) seqs.push_back(corpus[i].prompt_tokens);
        return sft_loss(model, seqs, probes, cfg.lambda, schedule, batch_index, cfg.pooling)
            .total.value();
    };

    TrainOutcome outcome;
    ToyLM snapshot = model.deep_copy();
    auto run_eval = [&](int step, int batch_index) {
        const double loss = window_loss(batch_index);
        outcome.final_loss = loss;
        if (hooks.eval) hooks.eval(model, step, loss);
        snapshot = model.deep_copy();
    };
    run_eval(0, 0);

    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(splitmix64(cfg.seed ^ 0x73667421u));

    int step = 0;
    const int batches_per_epoch =
        static_cast<int>((corpus.size() + cfg.batch_size - 1) / cfg.batch_size);
    const int total_steps = cfg.epochs * batches_per_epoch;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (int bi = 0; bi < batches_per_epoch; ++bi) {
            std::vector<std::vector<int>> batch;
            for (int b = 0; b < cfg.batch_size; ++b) {
                const size_t idx = static_cast<size_t>(bi) * cfg.batch_size + b;
                if (idx >= order.size()) break;
                batch.push_back(corpus[order[idx]].prompt_tokens);
            }
            auto parts = sft_loss(model, batch, probes, cfg.lambda, schedule, step, cfg.pooling);
            if (!std::isfinite(parts.total.value())) {
                model = snapshot.deep_copy();
                outcome.diverged = true;
                return outcome;
            }
            parts.total.backward();
            model.sgd_step(cfg.lr);
            model.zero_grads();
            ++step;
            outcome.steps_completed = step;
            if (step == total_steps || (hooks.eval_every > 0 && step % hooks.eval_every == 0)) {
                run_eval(step, step);
            }
        }
    }
    return outcome;
}

// Full-parameter language-model pretraining on a corpus; stands in for the
// pretrained base model the experiments start from.
inline void pretrain_lm(ToyLM& model, const std::vector<CorpusRecord>& corpus, int epochs,
                        int batch_size, double lr, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_lm: empty corpus");
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(splitmix64(seed ^ 0x70726521u));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += batch_size) {
            Tensor nll_sum = Tensor::scalar(0.0);
            size_t positions = 0;
            for (size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
                const auto& seq = corpus[order[i]].prompt_tokens;
                if (seq.size() < 2) continue;
                auto fwd = model.forward(seq, false);
                std::vector<int> targets(seq.begin() + 1, seq.end());
                std::vector<size_t> rows(targets.size());
                for (size_t r = 0; r < rows.size(); ++r) rows[r] = r;
                nll_sum = add(nll_sum, scale(gather_log_softmax(fwd.logits, rows, targets), -1.0));
                positions += targets.size();
            }
            if (positions == 0) continue;
            Tensor loss = scale(nll_sum, 1.0 / static_cast<double>(positions));
            loss.backward();
            model.sgd_step(lr);
            model.zero_grads();
        }
    }
}

// ------------------------------------------------------------------ pair io

inline void save_pairs_jsonl(const std::string& path, const std::vector<PreferencePair>& pairs) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_pairs_jsonl: cannot open '" + path + "'");
    for (const auto& p : pairs) {
        nlohmann::json j;
        j["prompt"] = p.prompt;
        j["chosen"] = p.chosen;
        j["rejected"] = p.rejected;
        j["chosen_score"] = p.chosen_score;
        j["rejected_score"] = p.rejected_score;
        j["scorer"] = scorer_kind_name(p.scorer);
        os << j.dump() << "\n";
    }
}

inline std::vector<PreferencePair> load_pairs_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_pairs_jsonl: cannot open '" + path + "'");
    std::vector<PreferencePair> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("load_pairs_jsonl: line " + std::to_string(lineno) + ": " +
                                     e.what());
        }
        PreferencePair p;
        p.prompt = j.at("prompt").get<std::vector<int>>();
        p.chosen = j.at("chosen").get<std::vector<int>>();
        p.rejected = j.at("rejected").get<std::vector<int>>();
        p.chosen_score = j.at("chosen_score").get<double>();
        p.rejected_score = j.at("rejected_score").get<double>();
        p.scorer = scorer_kind_from(j.at("scorer").get<std::string>());
        p.validate();
        out.push_back(std::move(p));
    }
    return out;
}

inline void save_pair_manifest(const std::string& path, const PairGenManifest& m) {
    nlohmann::json j;
    j["scorer"] = scorer_kind_name(m.scorer);
    j["k"] = m.k;
    j["seed"] = m.seed;
    j["prompts_seen"] = m.prompts_seen;
    j["pairs_emitted"] = m.pairs_emitted;
    j["skipped_degenerate"] = m.skipped_degenerate;
    j["skipped_scorer_failure"] = m.skipped_scorer_failure;
    j["skipped_no_room"] = m.skipped_no_room;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_pair_manifest: cannot open '" + path + "'");
    os << j.dump(2) << "\n";
}

}  // namespace toxlab
