#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "toxlab/common.hpp"
#include "toxlab/model.hpp"
#include "toxlab/probe.hpp"
#include "toxlab/testbed.hpp"
#include "toxlab/trainers.hpp"

namespace toxlab {

constexpr const char* kCodeVersion = "toxlab 0.1.0";

// All evaluation runs on frozen snapshots with greedy decoding, so every
// metric is deterministic given (checkpoint, prompt set).

// ---------------------------------------------------------------- metrics

struct Metric {
    double value = 0.0;
    bool present = false;
    std::string reason;  // set when absent

    static Metric of(double v) { return {v, true, ""}; }
    static Metric absent(std::string why) { return {0.0, false, std::move(why)}; }
};

struct EvalReport {
    int step = 0;
    double toxicity_rate = 0.0;
    Metric auc_train;     // absent for the classifier condition
    Metric auc_heldout;
    Metric auc_retrained;
    double ppl_train_dist = 1.0;
    double ppl_ood = 1.0;
};

// Fraction of greedy generations the oracle classifies as toxic.
inline double toxicity_rate(const ToyLM& model, const std::vector<CorpusRecord>& prompts,
                            const OracleConfig& oracle, int max_new = 16) {
    if (prompts.empty()) throw std::invalid_argument("toxicity_rate: no prompts");
    size_t toxic = 0;
    for (const auto& rec : prompts) {
        const int budget = std::min<int>(
            max_new, model.config.max_seq_len - static_cast<int>(rec.prompt_tokens.size()));
        if (budget < 1) continue;
        auto gen = model.generate(rec.prompt_tokens, DecodeMode::greedy(), budget, 0);
        if (gen.empty()) continue;  // nothing generated counts as non-toxic
        if (label_from_score(oracle_score(gen, oracle))) ++toxic;
    }
    return static_cast<double>(toxic) / static_cast<double>(prompts.size());
}

// exp of the token-weighted mean next-token negative log-likelihood.
inline double perplexity(const ToyLM& model, const std::vector<CorpusRecord>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
    double nll = 0.0;
    size_t positions = 0;
    for (const auto& rec : corpus) {
        const auto& seq = rec.prompt_tokens;
        if (seq.size() < 2) {
            throw std::invalid_argument("perplexity: sequence '" + rec.id + "' shorter than 2");
        }
        std::vector<int> prompt = {seq[0]};
        std::vector<int> rest(seq.begin() + 1, seq.end());
        nll -= model.sequence_logprob(prompt, rest);
        positions += rest.size();
    }
    return std::exp(nll / static_cast<double>(positions));
}

// ------------------------------------------------------------ probe suite

struct AucSuiteOptions {
    int retrain_count = 2;
    uint64_t retrain_seed = 0;
    int max_new = 16;
    uint64_t collect_seed = 0;
    double retrain_l2 = 1.0;
    size_t retrain_max_fit = 500;  // cap per retrained probe
};

struct AucSuiteResult {
    Metric auc_train;
    Metric auc_heldout;
    Metric auc_retrained;
    std::vector<double> train_member_aucs;
    std::vector<double> heldout_member_aucs;
    std::vector<double> retrained_member_aucs;
    Metric auc_heldout_mean_scores;  // AUC of the averaged member scores
    size_t n_activations = 0;
    size_t n_positive = 0;
};

namespace detail_harness {

inline Metric mean_member_auc(const std::vector<ActivationRecord>& acts,
                              const std::vector<Probe>& probes, std::vector<double>* member_out) {
    if (probes.empty()) return Metric::absent("no probes in category");
    std::vector<char> labels;
    for (const auto& a : acts) labels.push_back(a.label ? 1 : 0);
    double sum = 0.0;
    for (const auto& p : probes) {
        std::vector<double> scores;
        scores.reserve(acts.size());
        for (const auto& a : acts) scores.push_back(predict_proba(p, a.vector));
        const double a = auc(scores, labels);
        if (member_out) member_out->push_back(a);
        sum += a;
    }
    return Metric::of(sum / static_cast<double>(probes.size()));
}

}  // namespace detail_harness

// Post-training activations on a held-out corpus, scored three ways:
// the probes used in training, held-out probes, and probes retrained from
// scratch on a disjoint split of the post-training activations.
inline AucSuiteResult probe_auc_suite(const ToyLM& model,
                                      const std::vector<CorpusRecord>& corpus_heldout,
                                      const std::vector<Probe>& train_probes,
                                      const std::vector<Probe>& heldout_probes,
                                      const OracleConfig& oracle,
                                      const AucSuiteOptions& opt = {}) {
    if (heldout_probes.empty()) {
        throw std::invalid_argument("probe_auc_suite: need at least one held-out probe");
    }
    const int layer = heldout_probes[0].layer;
    CollectSettings gen;
    gen.max_new = opt.max_new;
    gen.seed = opt.collect_seed;
    auto acts = collect_activations(model, corpus_heldout, {layer}, oracle, gen);

    AucSuiteResult result;
    result.n_activations = acts.size();
    for (const auto& a : acts) result.n_positive += a.label ? 1 : 0;
    if (result.n_positive == 0 || result.n_positive == acts.size()) {
        const std::string why = "single-class evaluation set (" +
                                std::to_string(result.n_positive) + " positive of " +
                                std::to_string(acts.size()) + ")";
        result.auc_train = train_probes.empty() ? Metric::absent("no probes in category")
                                                : Metric::absent(why);
        result.auc_heldout = Metric::absent(why);
        result.auc_retrained = Metric::absent(why);
        result.auc_heldout_mean_scores = Metric::absent(why);
        return result;
    }

    result.auc_train =
        detail_harness::mean_member_auc(acts, train_probes, &result.train_member_aucs);
    result.auc_heldout =
        detail_harness::mean_member_auc(acts, heldout_probes, &result.heldout_member_aucs);

    {
        std::vector<char> labels;
        std::vector<double> mean_scores;
        for (const auto& a : acts) {
            labels.push_back(a.label ? 1 : 0);
            double s = 0.0;
            for (const auto& p : heldout_probes) s += predict_proba(p, a.vector);
            mean_scores.push_back(s / static_cast<double>(heldout_probes.size()));
        }
        result.auc_heldout_mean_scores = Metric::of(auc(mean_scores, labels));
    }

    // retrain on a fresh split: disjoint fit chunks, shared eval chunk
    std::vector<size_t> order(acts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(splitmix64(opt.retrain_seed ^ 0x72657472u));
    rng.shuffle(order);
    const size_t n_eval = acts.size() * 2 / 5;
    const size_t n_fit = acts.size() - n_eval;
    const size_t chunk =
        std::min(opt.retrain_max_fit, n_fit / std::max(1, opt.retrain_count));

    std::vector<double> retrained_aucs;
    std::string retrain_fail_reason = "not attempted";
    for (int r = 0; r < opt.retrain_count; ++r) {
        std::vector<std::vector<double>> X;
        std::vector<char> y;
        size_t pos = 0;
        for (size_t i = r * chunk; i < (r + 1) * chunk && i < n_fit; ++i) {
            const auto& a = acts[order[i]];
            X.push_back(a.vector);
            y.push_back(a.label ? 1 : 0);
            pos += a.label ? 1 : 0;
        }
        if (X.size() < 2 || pos == 0 || pos == y.size()) {
            retrain_fail_reason = "single-class retrain split";
            continue;
        }
        Probe fresh = train_probe(X, y, opt.retrain_l2,
                                  "retrain-" + std::to_string(r), layer);
        std::vector<double> scores;
        std::vector<char> eval_labels;
        size_t eval_pos = 0;
        for (size_t i = n_fit; i < acts.size(); ++i) {
            const auto& a = acts[order[i]];
            scores.push_back(predict_proba(fresh, a.vector));
            eval_labels.push_back(a.label ? 1 : 0);
            eval_pos += a.label ? 1 : 0;
        }
        if (eval_labels.empty() || eval_pos == 0 || eval_pos == eval_labels.size()) {
            retrain_fail_reason = "single-class retrain eval split";
            continue;
        }
        retrained_aucs.push_back(auc(scores, eval_labels));
    }
    if (retrained_aucs.empty()) {
        result.auc_retrained = Metric::absent(retrain_fail_reason);
    } else {
        double sum = 0.0;
        for (double a : retrained_aucs) sum += a;
        result.auc_retrained = Metric::of(sum / static_cast<double>(retrained_aucs.size()));
        result.retrained_member_aucs = retrained_aucs;
    }
    return result;
}

// ----------------------------------------------------------- eval context

struct EvalContext {
    OracleConfig oracle;
    std::vector<CorpusRecord> toxicity_prompts;  // held-out toxic prompts
    std::vector<CorpusRecord> auc_corpus;        // held-out corpus for the probe suite
    std::vector<CorpusRecord> ppl_train_corpus;  // held-out training-distribution text
    std::vector<CorpusRecord> ppl_ood_corpus;    // clean (bias-0) text
    std::vector<Probe> train_probes;             // empty for the classifier condition
    std::vector<Probe> heldout_probes;
    AucSuiteOptions auc_options;
    int gen_max_new = 16;
};

inline EvalReport evaluate(const ToyLM& model, const EvalContext& ctx, int step = 0) {
    EvalReport report;
    report.step = step;
    report.toxicity_rate = toxicity_rate(model, ctx.toxicity_prompts, ctx.oracle, ctx.gen_max_new);
    auto suite = probe_auc_suite(model, ctx.auc_corpus, ctx.train_probes, ctx.heldout_probes,
                                 ctx.oracle, ctx.auc_options);
    report.auc_train = suite.auc_train;
    report.auc_heldout = suite.auc_heldout;
    report.auc_retrained = suite.auc_retrained;
    report.ppl_train_dist = perplexity(model, ctx.ppl_train_corpus);
    report.ppl_ood = perplexity(model, ctx.ppl_ood_corpus);
    return report;
}

// -------------------------------------------------------------- reporting

struct TimelineRow {
    EvalReport report;
    double loss = 0.0;
};

struct RunManifest {
    std::string run_id;
    nlohmann::json config;  // full config snapshot
    uint64_t run_seed = 0;
    uint64_t retrain_seed = 0;
    uint64_t corpus_fingerprint = 0;
    std::vector<uint64_t> probe_fingerprints;
    std::string code_version = kCodeVersion;
    std::string hidden_state_convention = "post-block residual stream";
};

namespace detail_harness {

inline std::string metric_csv(const Metric& m) { return m.present ? format_double(m.value) : "-"; }

inline std::string hex64(uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace detail_harness

inline const char* kTimelineHeader =
    "step,toxicity_rate,auc_train,auc_heldout,auc_retrained,ppl_train_dist,ppl_ood,loss";

inline void write_timeline_csv(const std::string& path, const std::vector<TimelineRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_timeline_csv: cannot open '" + path + "'");
    os << kTimelineHeader << "\n";
    for (const auto& row : rows) {
        const auto& r = row.report;
        os << r.step << "," << format_double(r.toxicity_rate) << ","
           << detail_harness::metric_csv(r.auc_train) << ","
           << detail_harness::metric_csv(r.auc_heldout) << ","
           << detail_harness::metric_csv(r.auc_retrained) << ","
           << format_double(r.ppl_train_dist) << "," << format_double(r.ppl_ood) << ","
           << format_double(row.loss) << "\n";
    }
}

inline nlohmann::json manifest_json(const RunManifest& m) {
    nlohmann::json j;
    j["run_id"] = m.run_id;
    j["config"] = m.config;
    j["run_seed"] = m.run_seed;
    j["retrain_seed"] = m.retrain_seed;
    j["corpus_fingerprint"] = detail_harness::hex64(m.corpus_fingerprint);
    auto probes = nlohmann::json::array();
    for (uint64_t f : m.probe_fingerprints) probes.push_back(detail_harness::hex64(f));
    j["probe_fingerprints"] = probes;
    j["code_version"] = m.code_version;
    j["hidden_state_convention"] = m.hidden_state_convention;
    return j;
}

// Writes timeline.csv, final_metrics.csv, manifest.json and one plot-ready
// series_<metric>.csv per metric. Re-emitting the same timeline writes
// byte-identical files.
inline void emit_report(const std::vector<TimelineRow>& timeline, const RunManifest& manifest,
                        const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("emit_report: cannot create '" + out_dir + "': " +
                                     ec.message());
    if (!std::filesystem::is_directory(out_dir)) {
        throw std::runtime_error("emit_report: '" + out_dir + "' is not writable");
    }
    write_timeline_csv(out_dir + "/timeline.csv", timeline);

    {
        std::ofstream os(out_dir + "/final_metrics.csv");
        if (!os) throw std::runtime_error("emit_report: cannot write final_metrics.csv");
        os << kTimelineHeader << "\n";
        if (!timeline.empty()) {
            const auto& row = timeline.back();
            const auto& r = row.report;
            os << r.step << "," << format_double(r.toxicity_rate) << ","
               << detail_harness::metric_csv(r.auc_train) << ","
               << detail_harness::metric_csv(r.auc_heldout) << ","
               << detail_harness::metric_csv(r.auc_retrained) << ","
               << format_double(r.ppl_train_dist) << "," << format_double(r.ppl_ood) << ","
               << format_double(row.loss) << "\n";
        }
    }
    {
        std::ofstream os(out_dir + "/manifest.json");
        if (!os) throw std::runtime_error("emit_report: cannot write manifest.json");
        os << manifest_json(manifest).dump(2) << "\n";
    }

    struct Series {
        const char* name;
        std::function<std::optional<double>(const TimelineRow&)> get;
    };
    const std::vector<Series> series = {
        {"toxicity_rate", [](const TimelineRow& r) { return std::optional<double>(r.report.toxicity_rate); }},
        {"auc_train",
         [](const TimelineRow& r) {
             return r.report.auc_train.present ? std::optional<double>(r.report.auc_train.value)
                                               : std::nullopt;
         }},
        {"auc_heldout",
         [](const TimelineRow& r) {
             return r.report.auc_heldout.present
                        ? std::optional<double>(r.report.auc_heldout.value)
                        : std::nullopt;
         }},
        {"auc_retrained",
         [](const TimelineRow& r) {
             return r.report.auc_retrained.present
                        ? std::optional<double>(r.report.auc_retrained.value)
                        : std::nullopt;
         }},
        {"ppl_train_dist",
         [](const TimelineRow& r) { return std::optional<double>(r.report.ppl_train_dist); }},
        {"ppl_ood", [](const TimelineRow& r) { return std::optional<double>(r.report.ppl_ood); }},
        {"loss", [](const TimelineRow& r) { return std::optional<double>(r.loss); }},
    };
    for (const auto& s : series) {
        std::ofstream os(out_dir + "/series_" + s.name + ".csv");
        if (!os) throw std::runtime_error("emit_report: cannot write series csv");
        os << "step," << s.name << "\n";
        for (const auto& row : timeline) {
            auto v = s.get(row);
            if (v) os << row.report.step << "," << format_double(*v) << "\n";
        }
    }
}

}  // namespace toxlab
