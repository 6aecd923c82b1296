#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "toxlab/harness.hpp"

namespace toxlab {

// Experiment drivers behind the CLI subcommands. Every run is a pure
// function of its config file, so identical configs re-emit byte-identical
// outputs.

// ------------------------------------------------------------- config io

namespace cfgio {

inline nlohmann::json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config: '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error("config: '" + path + "' must be a JSON object");
    return j;
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& what) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw std::runtime_error(what + ": unknown key '" + it.key() + "'");
        }
    }
}

inline void require_keys(const nlohmann::json& j, const std::vector<std::string>& required,
                         const std::string& what) {
    for (const auto& k : required) {
        if (!j.contains(k)) throw std::runtime_error(what + ": missing required key '" + k + "'");
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace cfgio

// --------------------------------------------------------- corpus sourcing

struct CorpusSpec {
    std::string source = "synthetic";  // "synthetic" or a JSONL path
    size_t n = 400;
    double bias = 0.7;
    uint64_t seed = 11;
};

inline void corpus_spec_from_json(const nlohmann::json& j, CorpusSpec& spec) {
    spec.source = cfgio::get_or<std::string>(j, "corpus", spec.source);
    spec.n = cfgio::get_or<size_t>(j, "corpus_n", spec.n);
    spec.bias = cfgio::get_or<double>(j, "corpus_bias", spec.bias);
    spec.seed = cfgio::get_or<uint64_t>(j, "corpus_seed", spec.seed);
}

inline std::vector<CorpusRecord> make_corpus(const CorpusSpec& spec, const OracleConfig& oracle,
                                             int vocab_size) {
    if (spec.source == "synthetic") {
        return synth_corpus(spec.n, spec.bias, spec.seed, oracle, vocab_size);
    }
    return load_corpus_jsonl(spec.source);
}

inline std::vector<CorpusRecord> records_with_split(const std::vector<CorpusRecord>& corpus,
                                                    const std::string& split) {
    std::vector<CorpusRecord> out;
    for (const auto& r : corpus)
        if (r.split == split) out.push_back(r);
    return out;
}

inline std::vector<CorpusRecord> toxic_records(const std::vector<CorpusRecord>& records) {
    std::vector<CorpusRecord> out;
    for (const auto& r : records)
        if (r.has_score() && label_from_score(r.oracle_score)) out.push_back(r);
    return out;
}

// Held-out evaluation corpora, derived from the run corpus seed with
// domain-separated tags so they never overlap the training prompts.
struct EvalSizes {
    size_t toxicity_prompts = 100;
    size_t records = 150;  // per AUC / perplexity corpus
};

inline EvalContext make_eval_context(const CorpusSpec& spec, const OracleConfig& oracle,
                                     int vocab_size, const EvalSizes& sizes,
                                     std::vector<Probe> train_probes,
                                     std::vector<Probe> heldout_probes, uint64_t retrain_seed) {
    EvalContext ctx;
    ctx.oracle = oracle;
    const double bias = spec.source == "synthetic" ? spec.bias : 0.7;

    auto tox_pool = synth_corpus(sizes.toxicity_prompts * 4, bias,
                                 hash_combine(spec.seed, fnv1a64("eval-toxic-prompts")), oracle,
                                 vocab_size);
    for (const auto& r : tox_pool) {
        if (ctx.toxicity_prompts.size() >= sizes.toxicity_prompts) break;
        if (label_from_score(r.oracle_score)) ctx.toxicity_prompts.push_back(r);
    }
    if (ctx.toxicity_prompts.empty()) {
        throw std::runtime_error("make_eval_context: no toxic evaluation prompts at bias " +
                                 format_double(bias));
    }
    ctx.auc_corpus = synth_corpus(sizes.records, bias,
                                  hash_combine(spec.seed, fnv1a64("eval-auc")), oracle,
                                  vocab_size);
    ctx.ppl_train_corpus = synth_corpus(sizes.records, bias,
                                        hash_combine(spec.seed, fnv1a64("eval-ppl-train")),
                                        oracle, vocab_size);
    ctx.ppl_ood_corpus = synth_corpus(sizes.records, 0.0,
                                      hash_combine(spec.seed, fnv1a64("eval-ppl-ood")), oracle,
                                      vocab_size);
    ctx.train_probes = std::move(train_probes);
    ctx.heldout_probes = std::move(heldout_probes);
    ctx.auc_options.retrain_seed = retrain_seed;
    return ctx;
}

// ----------------------------------------------------------------- pretrain

struct PretrainConfig {
    ModelConfig model;
    CorpusSpec corpus{.source = "synthetic", .n = 400, .bias = 0.35, .seed = 7};
    int epochs = 3;
    int batch_size = 8;
    double lr = 0.05;
    uint64_t seed = 0;
};

inline PretrainConfig load_pretrain_config(const std::string& path) {
    auto j = cfgio::load_json(path);
    cfgio::reject_unknown_keys(j,
                               {"vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len",
                                "model_seed", "corpus", "corpus_n", "corpus_bias", "corpus_seed",
                                "epochs", "batch_size", "lr", "seed"},
                               "pretrain config");
    PretrainConfig cfg;
    cfg.model.vocab_size = cfgio::get_or<int>(j, "vocab_size", cfg.model.vocab_size);
    cfg.model.d_model = cfgio::get_or<int>(j, "d_model", cfg.model.d_model);
    cfg.model.n_layers = cfgio::get_or<int>(j, "n_layers", cfg.model.n_layers);
    cfg.model.n_heads = cfgio::get_or<int>(j, "n_heads", cfg.model.n_heads);
    cfg.model.max_seq_len = cfgio::get_or<int>(j, "max_seq_len", cfg.model.max_seq_len);
    cfg.model.seed = cfgio::get_or<uint64_t>(j, "model_seed", cfg.model.seed);
    corpus_spec_from_json(j, cfg.corpus);
    cfg.epochs = cfgio::get_or<int>(j, "epochs", cfg.epochs);
    cfg.batch_size = cfgio::get_or<int>(j, "batch_size", cfg.batch_size);
    cfg.lr = cfgio::get_or<double>(j, "lr", cfg.lr);
    cfg.seed = cfgio::get_or<uint64_t>(j, "seed", cfg.seed);
    return cfg;
}

inline ToyLM run_pretrain(const PretrainConfig& cfg, const std::string& checkpoint_out) {
    ToyLM model(cfg.model);
    OracleConfig oracle = OracleConfig::defaults(cfg.model.vocab_size);
    auto corpus = make_corpus(cfg.corpus, oracle, cfg.model.vocab_size);
    pretrain_lm(model, corpus, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed);
    if (!checkpoint_out.empty()) model.save_checkpoint(checkpoint_out);
    return model;
}

// -------------------------------------------------------------- probe runs

struct ProbeTrainConfig {
    std::string base_checkpoint;
    CorpusSpec corpus;
    std::vector<int> layers;  // empty = all layers
    int n_probes = 4;
    size_t subset_size = 500;
    size_t val_size = 50;
    size_t select_train = 150;
    size_t select_val = 100;
    double l2_strength = 1.0;
    int max_new = 16;
    uint64_t seed = 0;
};

inline ProbeTrainConfig load_probe_train_config(const std::string& path) {
    auto j = cfgio::load_json(path);
    cfgio::reject_unknown_keys(
        j,
        {"base_checkpoint", "corpus", "corpus_n", "corpus_bias", "corpus_seed", "layers",
         "n_probes", "subset_size", "val_size", "select_train", "select_val", "l2_strength",
         "max_new", "seed"},
        "train-probes config");
    cfgio::require_keys(j, {"base_checkpoint"}, "train-probes config");
    ProbeTrainConfig cfg;
    cfg.base_checkpoint = j.at("base_checkpoint").get<std::string>();
    corpus_spec_from_json(j, cfg.corpus);
    if (j.contains("layers")) cfg.layers = j.at("layers").get<std::vector<int>>();
    cfg.n_probes = cfgio::get_or<int>(j, "n_probes", cfg.n_probes);
    cfg.subset_size = cfgio::get_or<size_t>(j, "subset_size", cfg.subset_size);
    cfg.val_size = cfgio::get_or<size_t>(j, "val_size", cfg.val_size);
    cfg.select_train = cfgio::get_or<size_t>(j, "select_train", cfg.select_train);
    cfg.select_val = cfgio::get_or<size_t>(j, "select_val", cfg.select_val);
    cfg.l2_strength = cfgio::get_or<double>(j, "l2_strength", cfg.l2_strength);
    cfg.max_new = cfgio::get_or<int>(j, "max_new", cfg.max_new);
    cfg.seed = cfgio::get_or<uint64_t>(j, "seed", cfg.seed);
    return cfg;
}

struct ProbeTrainResult {
    LayerSelection selection;
    std::vector<Probe> probes;
    std::vector<std::string> probe_paths;
};

// The full probe pipeline: layer selection by validation AUC, then one
// calibrated probe per disjoint prompt subset at the selected layer.
inline ProbeTrainResult run_train_probes(const ProbeTrainConfig& cfg, const ToyLM& model,
                                         const std::string& out_dir) {
    OracleConfig oracle = OracleConfig::defaults(model.config.vocab_size);
    std::vector<int> layers = cfg.layers;
    if (layers.empty()) {
        for (int l = 0; l < model.config.n_layers; ++l) layers.push_back(l);
    }
    CollectSettings gen;
    gen.max_new = cfg.max_new;
    gen.seed = hash_combine(cfg.seed, fnv1a64("probe-collect"));

    // prompts: toxic records only, mirrored after the toxic-comments setup
    CorpusSpec pool_spec = cfg.corpus;
    pool_spec.n = cfg.corpus.n;
    auto corpus = make_corpus(pool_spec, oracle, model.config.vocab_size);
    auto toxic = toxic_records(corpus);
    const size_t per_probe = cfg.subset_size + cfg.val_size;
    const size_t needed = cfg.select_train + cfg.select_val +
                          static_cast<size_t>(cfg.n_probes) * per_probe;
    if (toxic.size() < needed) {
        throw std::runtime_error("run_train_probes: corpus provides " +
                                 std::to_string(toxic.size()) + " toxic prompts, need " +
                                 std::to_string(needed));
    }

    ProbeTrainResult result;
    {
        std::vector<CorpusRecord> sel_train(toxic.begin(), toxic.begin() + cfg.select_train);
        std::vector<CorpusRecord> sel_val(toxic.begin() + cfg.select_train,
                                          toxic.begin() + cfg.select_train + cfg.select_val);
        result.selection =
            select_layer(model, sel_train, sel_val, layers, oracle, gen, cfg.l2_strength);
    }
    const int layer = result.selection.best_layer;

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    {
        std::ofstream os(out_dir + "/layer_selection.csv");
        os << "layer,val_auc\n";
        for (const auto& [l, a] : result.selection.auc_by_layer) {
            os << l << "," << format_double(a) << "\n";
        }
        os << "selected," << layer << "\n";
    }

    size_t cursor = cfg.select_train + cfg.select_val;
    for (int p = 0; p < cfg.n_probes; ++p) {
        std::vector<CorpusRecord> fit(toxic.begin() + cursor,
                                      toxic.begin() + cursor + cfg.subset_size);
        cursor += cfg.subset_size;
        std::vector<CorpusRecord> val(toxic.begin() + cursor,
                                      toxic.begin() + cursor + cfg.val_size);
        cursor += cfg.val_size;

        auto fit_acts = collect_activations(model, fit, {layer}, oracle, gen);
        auto val_acts = collect_activations(model, val, {layer}, oracle, gen);
        ProbeDataset fit_data, val_data;
        for (const auto& a : fit_acts) {
            fit_data.X.push_back(a.vector);
            fit_data.y.push_back(a.label ? 1 : 0);
        }
        for (const auto& a : val_acts) {
            val_data.X.push_back(a.vector);
            val_data.y.push_back(a.label ? 1 : 0);
        }
        const std::string subset_id = "subset-" + std::to_string(p);
        Probe probe = train_probe(fit_data.X, fit_data.y, cfg.l2_strength, subset_id, layer);
        probe = calibrate_threshold(probe, val_data.X, val_data.y);
        const std::string path = out_dir + "/probe_" + std::to_string(p) + ".bin";
        save_probe(path, probe);
        result.probes.push_back(std::move(probe));
        result.probe_paths.push_back(path);
    }
    return result;
}

// ----------------------------------------------------------------- dpo run

struct DpoRunConfig {
    DpoConfig dpo;
    std::string base_checkpoint;
    std::string scorer = "probe";
    std::vector<std::string> probe_files;
    std::vector<std::string> heldout_probe_files;
    std::string pairs_file;  // optional: reuse pre-generated pairs
    CorpusSpec corpus;
    int lora_rank = 4;
    double lora_alpha = 8.0;
    int eval_every = 20;
    EvalSizes eval_sizes;
    nlohmann::json raw;  // config snapshot for the manifest
};

inline DpoRunConfig load_dpo_run_config(const std::string& path) {
    auto j = cfgio::load_json(path);
    cfgio::reject_unknown_keys(
        j,
        {"beta", "k_candidates", "temperature", "n_prompts", "split", "lr", "steps",
         "batch_size", "seed", "max_new", "base_checkpoint", "scorer", "probe_files",
         "heldout_probe_files", "pairs_file", "corpus", "corpus_n", "corpus_bias", "corpus_seed",
         "lora_rank", "lora_alpha", "eval_every", "eval_prompts", "eval_records"},
        "dpo config");
    cfgio::require_keys(j,
                        {"beta", "k_candidates", "temperature", "n_prompts", "split", "lr",
                         "steps", "batch_size", "seed", "base_checkpoint", "scorer",
                         "heldout_probe_files"},
                        "dpo config");
    DpoRunConfig cfg;
    cfg.raw = j;
    cfg.dpo.beta = j.at("beta").get<double>();
    cfg.dpo.k_candidates = j.at("k_candidates").get<int>();
    cfg.dpo.temperature = j.at("temperature").get<double>();
    cfg.dpo.n_prompts = j.at("n_prompts").get<int>();
    auto split = j.at("split").get<std::vector<double>>();
    if (split.size() != 3) throw std::runtime_error("dpo config: split must have 3 fractions");
    cfg.dpo.split[0] = split[0];
    cfg.dpo.split[1] = split[1];
    cfg.dpo.split[2] = split[2];
    cfg.dpo.lr = j.at("lr").get<double>();
    cfg.dpo.steps = j.at("steps").get<int>();
    cfg.dpo.batch_size = j.at("batch_size").get<int>();
    cfg.dpo.seed = j.at("seed").get<uint64_t>();
    cfg.dpo.max_new = cfgio::get_or<int>(j, "max_new", cfg.dpo.max_new);
    cfg.dpo.validate();
    cfg.base_checkpoint = j.at("base_checkpoint").get<std::string>();
    cfg.scorer = j.at("scorer").get<std::string>();
    scorer_kind_from(cfg.scorer);  // validate
    cfg.probe_files = cfgio::get_or<std::vector<std::string>>(j, "probe_files", {});
    cfg.heldout_probe_files = j.at("heldout_probe_files").get<std::vector<std::string>>();
    cfg.pairs_file = cfgio::get_or<std::string>(j, "pairs_file", "");
    corpus_spec_from_json(j, cfg.corpus);
    cfg.lora_rank = cfgio::get_or<int>(j, "lora_rank", cfg.lora_rank);
    cfg.lora_alpha = cfgio::get_or<double>(j, "lora_alpha", cfg.lora_alpha);
    cfg.eval_every = cfgio::get_or<int>(j, "eval_every", cfg.eval_every);
    cfg.eval_sizes.toxicity_prompts =
        cfgio::get_or<size_t>(j, "eval_prompts", cfg.eval_sizes.toxicity_prompts);
    cfg.eval_sizes.records = cfgio::get_or<size_t>(j, "eval_records", cfg.eval_sizes.records);
    return cfg;
}

struct RunResult {
    std::vector<TimelineRow> timeline;
    TrainOutcome outcome;
    std::optional<ToyLM> checkpoint;
    RunManifest manifest;

    const EvalReport& final_report() const { return timeline.back().report; }
};

inline std::vector<Probe> load_probes(const std::vector<std::string>& paths) {
    std::vector<Probe> out;
    for (const auto& p : paths) out.push_back(load_probe(p));
    return out;
}

inline RunResult run_dpo(const DpoRunConfig& cfg, const std::string& out_dir) {
    ToyLM base = ToyLM::load_checkpoint(cfg.base_checkpoint);
    OracleConfig oracle = OracleConfig::defaults(base.config.vocab_size);

    std::vector<Probe> scoring_probes = load_probes(cfg.probe_files);
    std::vector<Probe> heldout_probes = load_probes(cfg.heldout_probe_files);

    PairScorer scorer;
    scorer.kind = scorer_kind_from(cfg.scorer);
    scorer.oracle = oracle;
    if (scorer.kind != ScorerKind::OracleClassifier) {
        if (scoring_probes.empty()) {
            throw std::runtime_error("run_dpo: probe scorer needs probe_files");
        }
        if (scorer.kind == ScorerKind::Probe) {
            scorer.ensemble.probes = {scoring_probes[0]};
        } else {
            scorer.ensemble.probes = scoring_probes;
        }
    }

    ToyLM policy = base.deep_copy();
    policy.attach_lora(cfg.lora_rank, cfg.lora_alpha, policy.default_lora_targets());
    ToyLM reference = policy.clone_frozen_reference();

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);

    auto corpus = make_corpus(cfg.corpus, oracle, base.config.vocab_size);
    std::vector<PreferencePair> pairs;
    PairGenManifest pair_manifest;
    if (!cfg.pairs_file.empty()) {
        pairs = load_pairs_jsonl(cfg.pairs_file);
        pair_manifest.scorer = scorer.kind;
        pair_manifest.k = cfg.dpo.k_candidates;
        pair_manifest.seed = cfg.dpo.seed;
        pair_manifest.pairs_emitted = pairs.size();
    } else {
        auto prompts = toxic_records(records_with_split(corpus, "train"));
        auto gen = generate_pairs(reference, prompts, scorer, cfg.dpo);
        pairs = std::move(gen.pairs);
        pair_manifest = gen.manifest;
        save_pairs_jsonl(out_dir + "/pairs.jsonl", pairs);
    }
    save_pair_manifest(out_dir + "/pair_manifest.json", pair_manifest);
    if (pairs.empty()) throw std::runtime_error("run_dpo: pair generation produced no pairs");

    auto splits = split_pairs(pairs, cfg.dpo.split, cfg.dpo.seed);
    if (splits.train.empty()) throw std::runtime_error("run_dpo: empty training split");

    const bool classifier_condition = scorer.kind == ScorerKind::OracleClassifier;
    EvalContext ctx = make_eval_context(
        cfg.corpus, oracle, base.config.vocab_size, cfg.eval_sizes,
        classifier_condition ? std::vector<Probe>{} : scorer.ensemble.probes, heldout_probes,
        hash_combine(cfg.dpo.seed, fnv1a64("retrain")));
    ctx.gen_max_new = cfg.dpo.max_new;
    ctx.auc_options.max_new = cfg.dpo.max_new;

    RunResult result;
    TrainHooks hooks;
    hooks.eval_every = cfg.eval_every;
    hooks.eval = [&](ToyLM& m, int step, double loss) {
        TimelineRow row;
        row.report = evaluate(m, ctx, step);
        row.loss = loss;
        result.timeline.push_back(row);
    };
    result.outcome = train_dpo(policy, reference, splits.train, cfg.dpo, hooks);
    result.checkpoint = policy.deep_copy();

    result.manifest.run_id = detail_harness::hex64(
        fnv1a64(cfg.raw.dump() + "|dpo|" + std::to_string(cfg.dpo.seed)));
    result.manifest.config = cfg.raw;
    result.manifest.run_seed = cfg.dpo.seed;
    result.manifest.retrain_seed = ctx.auc_options.retrain_seed;
    result.manifest.corpus_fingerprint = corpus_fingerprint(corpus);
    for (const auto& p : scoring_probes) {
        result.manifest.probe_fingerprints.push_back(probe_fingerprint(p));
    }
    for (const auto& p : heldout_probes) {
        result.manifest.probe_fingerprints.push_back(probe_fingerprint(p));
    }

    policy.save_checkpoint(out_dir + "/checkpoint.bin");
    emit_report(result.timeline, result.manifest, out_dir);
    return result;
}

// ----------------------------------------------------------------- sft run

struct SftRunConfig {
    SftConfig sft;
    std::string base_checkpoint;
    std::vector<std::string> probe_files;  // penalty probes (unused when lambda = 0)
    std::vector<std::string> heldout_probe_files;
    CorpusSpec corpus;
    int lora_rank = 4;
    double lora_alpha = 8.0;
    int eval_every = 20;
    EvalSizes eval_sizes;
    int max_new = 16;
    nlohmann::json raw;
};

inline SftRunConfig load_sft_run_config(const std::string& path) {
    auto j = cfgio::load_json(path);
    cfgio::reject_unknown_keys(
        j,
        {"lambda", "strategy", "epochs", "lr", "batch_size", "seed", "batches_per_probe",
         "pooling", "base_checkpoint", "probe_files", "heldout_probe_files", "corpus", "corpus_n",
         "corpus_bias", "corpus_seed", "lora_rank", "lora_alpha", "eval_every", "eval_prompts",
         "eval_records", "max_new"},
        "sft config");
    cfgio::require_keys(j,
                        {"lambda", "strategy", "epochs", "lr", "batch_size", "seed",
                         "base_checkpoint", "heldout_probe_files"},
                        "sft config");
    SftRunConfig cfg;
    cfg.raw = j;
    cfg.sft.lambda = j.at("lambda").get<double>();
    cfg.sft.strategy = strategy_from(j.at("strategy").get<std::string>());
    cfg.sft.epochs = j.at("epochs").get<int>();
    cfg.sft.lr = j.at("lr").get<double>();
    cfg.sft.batch_size = j.at("batch_size").get<int>();
    cfg.sft.seed = j.at("seed").get<uint64_t>();
    cfg.sft.batches_per_probe = cfgio::get_or<int>(j, "batches_per_probe", 1);
    const std::string pooling = cfgio::get_or<std::string>(j, "pooling", "per_sequence");
    if (pooling == "per_sequence") cfg.sft.pooling = ProbePooling::PerSequence;
    else if (pooling == "per_batch") cfg.sft.pooling = ProbePooling::PerBatch;
    else throw std::runtime_error("sft config: pooling must be per_sequence or per_batch");
    cfg.sft.validate();
    cfg.base_checkpoint = j.at("base_checkpoint").get<std::string>();
    cfg.probe_files = cfgio::get_or<std::vector<std::string>>(j, "probe_files", {});
    cfg.heldout_probe_files = j.at("heldout_probe_files").get<std::vector<std::string>>();
    corpus_spec_from_json(j, cfg.corpus);
    cfg.lora_rank = cfgio::get_or<int>(j, "lora_rank", cfg.lora_rank);
    cfg.lora_alpha = cfgio::get_or<double>(j, "lora_alpha", cfg.lora_alpha);
    cfg.eval_every = cfgio::get_or<int>(j, "eval_every", cfg.eval_every);
    cfg.eval_sizes.toxicity_prompts =
        cfgio::get_or<size_t>(j, "eval_prompts", cfg.eval_sizes.toxicity_prompts);
    cfg.eval_sizes.records = cfgio::get_or<size_t>(j, "eval_records", cfg.eval_sizes.records);
    cfg.max_new = cfgio::get_or<int>(j, "max_new", cfg.max_new);
    if (cfg.sft.lambda > 0.0 && cfg.probe_files.empty()) {
        throw std::runtime_error("sft config: lambda > 0 needs probe_files");
    }
    return cfg;
}

inline RunResult run_sft(const SftRunConfig& cfg, const std::string& out_dir) {
    ToyLM base = ToyLM::load_checkpoint(cfg.base_checkpoint);
    OracleConfig oracle = OracleConfig::defaults(base.config.vocab_size);

    ProbeEnsemble penalty_probes;
    penalty_probes.probes = load_probes(cfg.probe_files);
    std::vector<Probe> heldout_probes = load_probes(cfg.heldout_probe_files);

    ToyLM model = base.deep_copy();
    model.attach_lora(cfg.lora_rank, cfg.lora_alpha, model.default_lora_targets());

    auto corpus = make_corpus(cfg.corpus, oracle, base.config.vocab_size);
    auto train_records = records_with_split(corpus, "train");
    if (train_records.empty()) throw std::runtime_error("run_sft: empty training split");

    EvalContext ctx = make_eval_context(cfg.corpus, oracle, base.config.vocab_size,
                                        cfg.eval_sizes,
                                        cfg.sft.lambda > 0.0 ? penalty_probes.probes
                                                             : std::vector<Probe>{},
                                        heldout_probes,
                                        hash_combine(cfg.sft.seed, fnv1a64("retrain")));
    ctx.gen_max_new = cfg.max_new;
    ctx.auc_options.max_new = cfg.max_new;

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);

    RunResult result;
    TrainHooks hooks;
    hooks.eval_every = cfg.eval_every;
    hooks.eval = [&](ToyLM& m, int step, double loss) {
        TimelineRow row;
        row.report = evaluate(m, ctx, step);
        row.loss = loss;
        result.timeline.push_back(row);
    };
    result.outcome = train_sft(model, train_records, penalty_probes, cfg.sft, hooks);
    result.checkpoint = model.deep_copy();

    result.manifest.run_id = detail_harness::hex64(
        fnv1a64(cfg.raw.dump() + "|sft|" + std::to_string(cfg.sft.seed)));
    result.manifest.config = cfg.raw;
    result.manifest.run_seed = cfg.sft.seed;
    result.manifest.retrain_seed = ctx.auc_options.retrain_seed;
    result.manifest.corpus_fingerprint = corpus_fingerprint(corpus);
    for (const auto& p : penalty_probes.probes) {
        result.manifest.probe_fingerprints.push_back(probe_fingerprint(p));
    }
    for (const auto& p : heldout_probes) {
        result.manifest.probe_fingerprints.push_back(probe_fingerprint(p));
    }

    model.save_checkpoint(out_dir + "/checkpoint.bin");
    emit_report(result.timeline, result.manifest, out_dir);
    return result;
}

// ------------------------------------------------------------------- sweep

// Appendix-style grid: final toxicity rate per (strategy, lambda) cell.
struct SweepConfig {
    SftRunConfig base_run;
    std::vector<double> lambdas = {0.0, 1.0, 10.0, 100.0, 1000.0};
    std::vector<Strategy> strategies = {Strategy::Average, Strategy::RandomSwitch,
                                        Strategy::TimedSwitch};
};

inline void run_sweep(const SweepConfig& cfg, const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    std::ofstream os(out_dir + "/sweep.csv");
    if (!os) throw std::runtime_error("run_sweep: cannot write sweep.csv");
    os << "strategy";
    for (double l : cfg.lambdas) os << ",lambda=" << format_double(l);
    os << "\n";
    for (Strategy strat : cfg.strategies) {
        os << strategy_name(strat);
        for (double lambda : cfg.lambdas) {
            SftRunConfig run_cfg = cfg.base_run;
            run_cfg.sft.strategy = strat;
            run_cfg.sft.lambda = lambda;
            const std::string cell_dir = out_dir + "/" + strategy_name(strat) + "_lambda" +
                                         format_double(lambda);
            RunResult r = run_sft(run_cfg, cell_dir);
            os << "," << format_double(r.final_report().toxicity_rate);
        }
        os << "\n";
    }
}

}  // namespace toxlab
