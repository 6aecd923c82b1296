#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "support.hpp"
#include "toxlab/trainers.hpp"

using namespace toxlab;

namespace {

ModelConfig tiny_config(uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_seq_len = 16;
    cfg.seed = seed;
    return cfg;
}

// candidates whose oracle scores are exactly count/10
std::vector<int> candidate_with_toxic_count(int toxic_count, const OracleConfig& oracle) {
    const int toxic_token = *oracle.toxic_vocab.begin();
    std::vector<int> c;
    for (int i = 0; i < toxic_count; ++i) c.push_back(toxic_token);
    for (int i = toxic_count; i < 10; ++i) c.push_back(1 + i);  // distinct clean fillers
    return c;
}

Probe make_probe(Rng& rng, size_t d, int layer) {
    Probe p;
    p.layer = layer;
    p.mean.assign(d, 0.0);
    p.std.assign(d, 1.0);
    p.weights.resize(d);
    for (double& w : p.weights) w = rng.gauss(0.0, 0.5);
    p.bias = rng.gauss(0.0, 0.2);
    p.train_subset_id = "t";
    return p;
}

}  // namespace

TEST_CASE("schedule_probe") {
    SECTION("timed_switch cycles deterministically") {
        StrategySchedule s;
        s.kind = Strategy::TimedSwitch;
        s.probe_count = 10;
        s.batches_per_probe = 1;
        for (int b = 0; b <= 10; ++b) {
            auto idx = schedule_probe(s, b);
            REQUIRE(idx.size() == 1);
            CHECK(idx[0] == static_cast<size_t>(b % 10));
        }
        s.batches_per_probe = 3;
        CHECK(schedule_probe(s, 0)[0] == 0);
        CHECK(schedule_probe(s, 2)[0] == 0);
        CHECK(schedule_probe(s, 3)[0] == 1);
        CHECK(schedule_probe(s, 29)[0] == 9);
        CHECK(schedule_probe(s, 30)[0] == 0);
    }
    SECTION("timed_switch over P*m batches gives each probe exactly m batches") {
        StrategySchedule s;
        s.kind = Strategy::TimedSwitch;
        s.probe_count = 7;
        s.batches_per_probe = 4;
        std::vector<int> counts(7, 0);
        for (int b = 0; b < 7 * 4; ++b) ++counts[schedule_probe(s, b)[0]];
        for (int c : counts) CHECK(c == 4);
    }
    SECTION("random_switch is seed-reproducible") {
        StrategySchedule s;
        s.kind = Strategy::RandomSwitch;
        s.probe_count = 5;
        s.seed = 99;
        std::vector<size_t> first, second;
        for (int b = 0; b < 50; ++b) first.push_back(schedule_probe(s, b)[0]);
        for (int b = 0; b < 50; ++b) second.push_back(schedule_probe(s, b)[0]);
        CHECK(first == second);
        std::set<size_t> seen(first.begin(), first.end());
        CHECK(seen.size() > 1);
    }
    SECTION("average selects every probe") {
        StrategySchedule s;
        s.kind = Strategy::Average;
        s.probe_count = 4;
        CHECK(schedule_probe(s, 3) == std::vector<size_t>{0, 1, 2, 3});
    }
    SECTION("negative batch index rejected") {
        StrategySchedule s;
        CHECK_THROWS_AS(schedule_probe(s, -1), std::invalid_argument);
    }
}

TEST_CASE("generate_candidates") {
    ToyLM model(tiny_config(4));
    CorpusRecord rec;
    rec.id = "prompt-7";
    rec.prompt_tokens = {3, 5, 2};
    DpoConfig cfg;
    cfg.seed = 1234;
    cfg.k_candidates = 5;
    cfg.max_new = 8;

    SECTION("k candidates, reproducible across runs") {
        auto a = generate_candidates(model, rec, cfg);
        auto b = generate_candidates(model, rec, cfg);
        REQUIRE(a.size() == 5);
        CHECK(a == b);
    }
    SECTION("candidate i replays as a standalone sample with the derived seed") {
        auto cands = generate_candidates(model, rec, cfg);
        for (int i = 0; i < 5; ++i) {
            auto replay = model.generate(rec.prompt_tokens,
                                         DecodeMode::temperature_sampling(cfg.temperature), 8,
                                         candidate_seed(cfg.seed, rec.id, i));
            CHECK(replay == cands[i]);
        }
    }
    SECTION("k < 2 rejected") {
        cfg.k_candidates = 1;
        CHECK_THROWS_AS(generate_candidates(model, rec, cfg), std::invalid_argument);
    }
}

TEST_CASE("build_preference_pair") {
    ToyLM model(tiny_config(4));
    OracleConfig oracle = OracleConfig::defaults(16);
    PairScorer scorer;
    scorer.kind = ScorerKind::OracleClassifier;
    scorer.oracle = oracle;
    std::vector<int> prompt = {3, 5};

    SECTION("argmin/argmax selection") {
        // oracle scores 0.1, 0.9, 0.5, 0.4, 0.2
        std::vector<std::vector<int>> cands = {
            candidate_with_toxic_count(1, oracle), candidate_with_toxic_count(9, oracle),
            candidate_with_toxic_count(5, oracle), candidate_with_toxic_count(4, oracle),
            candidate_with_toxic_count(2, oracle)};
        auto pair = build_preference_pair(model, prompt, cands, scorer);
        REQUIRE(pair.has_value());
        CHECK(pair->chosen == cands[0]);
        CHECK(pair->rejected == cands[1]);
        CHECK(pair->chosen_score == 0.1);
        CHECK(pair->rejected_score == 0.9);
        CHECK(pair->chosen_score <= pair->rejected_score);
    }
    SECTION("equal scores are skipped as degenerate") {
        std::vector<std::vector<int>> cands = {candidate_with_toxic_count(3, oracle),
                                               candidate_with_toxic_count(3, oracle),
                                               candidate_with_toxic_count(3, oracle)};
        PairSkip skip;
        auto pair = build_preference_pair(model, prompt, cands, scorer, &skip);
        CHECK_FALSE(pair.has_value());
        CHECK(skip == PairSkip::Degenerate);
    }
    SECTION("scorer failure (empty candidate) is skipped and reported") {
        std::vector<std::vector<int>> cands = {candidate_with_toxic_count(1, oracle), {}};
        PairSkip skip;
        auto pair = build_preference_pair(model, prompt, cands, scorer, &skip);
        CHECK_FALSE(pair.has_value());
        CHECK(skip == PairSkip::ScorerFailure);
    }
    SECTION("probe scorer matches independent re-scoring of pooled activations") {
        Rng rng(21);
        PairScorer probe_scorer;
        probe_scorer.kind = ScorerKind::Ensemble;
        probe_scorer.ensemble.probes = {make_probe(rng, 8, 1), make_probe(rng, 8, 1)};

        DpoConfig cfg;
        cfg.seed = 77;
        cfg.k_candidates = 4;
        cfg.max_new = 6;
        CorpusRecord rec;
        rec.id = "p0";
        rec.prompt_tokens = prompt;
        auto cands = generate_candidates(model, rec, cfg);
        auto pair = build_preference_pair(model, prompt, cands, probe_scorer);

        std::vector<double> rescored;
        bool any_empty = false;
        for (const auto& c : cands) {
            if (c.empty()) {
                any_empty = true;
                break;
            }
            rescored.push_back(
                ensemble_proba(probe_scorer.ensemble,
                               pool_response_activation(model, prompt, c, 1)));
        }
        if (!any_empty) {
            size_t lo = 0, hi = 0;
            for (size_t i = 1; i < rescored.size(); ++i) {
                if (rescored[i] < rescored[lo]) lo = i;
                if (rescored[i] > rescored[hi]) hi = i;
            }
            if (pair.has_value()) {
                CHECK(pair->chosen == cands[lo]);
                CHECK(pair->rejected == cands[hi]);
            } else {
                CHECK(rescored[hi] - rescored[lo] < 1e-9);
            }
        }
    }
}

TEST_CASE("split_pairs") {
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < 10; ++i) {
        PreferencePair p;
        p.prompt = {i};
        p.chosen = {1};
        p.rejected = {2};
        p.chosen_score = 0.1;
        p.rejected_score = 0.9;
        pairs.push_back(p);
    }
    const double fr[3] = {0.7, 0.2, 0.1};

    SECTION("sizes 7/2/1 and seed determinism") {
        auto s = split_pairs(pairs, fr, 5);
        CHECK(s.train.size() == 7);
        CHECK(s.val.size() == 2);
        CHECK(s.test.size() == 1);
        auto s2 = split_pairs(pairs, fr, 5);
        for (size_t i = 0; i < s.train.size(); ++i)
            CHECK(s.train[i].prompt == s2.train[i].prompt);
    }
    SECTION("disjoint and covering (multiset of ids)") {
        auto s = split_pairs(pairs, fr, 9);
        std::multiset<int> seen;
        for (const auto& p : s.train) seen.insert(p.prompt[0]);
        for (const auto& p : s.val) seen.insert(p.prompt[0]);
        for (const auto& p : s.test) seen.insert(p.prompt[0]);
        std::multiset<int> expect;
        for (int i = 0; i < 10; ++i) expect.insert(i);
        CHECK(seen == expect);
    }
    SECTION("bad fractions rejected") {
        const double bad[3] = {0.5, 0.2, 0.1};
        CHECK_THROWS_AS(split_pairs(pairs, bad, 1), std::invalid_argument);
    }
}

TEST_CASE("dpo_loss") {
    ToyLM policy(tiny_config(13));
    policy.attach_lora(2, 4.0, policy.default_lora_targets());
    ToyLM reference = policy.clone_frozen_reference();

    std::vector<PreferencePair> batch;
    for (int i = 0; i < 3; ++i) {
        PreferencePair p;
        p.prompt = {2, 3 + i};
        p.chosen = {5, 6};
        p.rejected = {7, 8, 9};
        p.chosen_score = 0.0;
        p.rejected_score = 1.0;
        batch.push_back(p);
    }

    SECTION("policy == reference gives ln 2 within 1e-9") {
        Tensor loss = dpo_loss(policy, reference, batch, 0.1);
        CHECK(std::fabs(loss.value() - std::log(2.0)) < 1e-9);
    }
    SECTION("matches the four-logprob formula recomputed independently") {
        // push the policy away from the reference first
        for (int step = 0; step < 5; ++step) {
            Tensor l = dpo_loss(policy, reference, batch, 0.5);
            l.backward();
            policy.sgd_step(0.1);
            policy.zero_grads();
        }
        Tensor loss = dpo_loss(policy, reference, batch, 0.5);
        double expect = 0.0;
        for (const auto& p : batch) {
            const double margin =
                (policy.sequence_logprob(p.prompt, p.chosen) -
                 reference.sequence_logprob(p.prompt, p.chosen)) -
                (policy.sequence_logprob(p.prompt, p.rejected) -
                 reference.sequence_logprob(p.prompt, p.rejected));
            expect += -detail::stable_log_sigmoid(0.5 * margin);
        }
        expect /= static_cast<double>(batch.size());
        CHECK(loss.value() == Catch::Approx(expect).margin(1e-12));
    }
    SECTION("an inner margin of +20 saturates the loss below 1e-8") {
        Tensor loss = scale(log_sigmoid(Tensor::scalar(20.0)), -1.0);
        CHECK(loss.value() < 1e-8);
        CHECK(loss.value() > 0.0);
    }
    SECTION("unfrozen reference rejected") {
        ToyLM unfrozen = policy.deep_copy();
        CHECK_THROWS_AS(dpo_loss(policy, unfrozen, batch, 0.1), std::invalid_argument);
    }
    SECTION("gradient matches central finite differences over adapter params") {
        auto& adapter = policy.adapter("layers.0.attn.wq");
        Tensor original = adapter.down;
        auto f = [&](const Tensor& x) {
            adapter.down = x;
            Tensor loss = dpo_loss(policy, reference, batch, 0.1);
            adapter.down = original;
            return loss;
        };
        CHECK(finite_difference_check(f, original, 1e-5) < 1e-4);

        Tensor original_up = adapter.up;
        auto fu = [&](const Tensor& x) {
            adapter.up = x;
            Tensor loss = dpo_loss(policy, reference, batch, 0.1);
            adapter.up = original_up;
            return loss;
        };
        CHECK(finite_difference_check(fu, original_up, 1e-5) < 1e-4);
    }
    SECTION("loss decreases along its own negative gradient (line search at 1e-4)") {
        Tensor loss = dpo_loss(policy, reference, batch, 0.1);
        const double before = loss.value();
        loss.backward();
        policy.sgd_step(1e-4);
        policy.zero_grads();
        CHECK(dpo_loss(policy, reference, batch, 0.1).value() < before);
    }
}

TEST_CASE("sft_loss") {
    ToyLM model(tiny_config(19));
    model.attach_lora(2, 4.0, model.default_lora_targets());
    Rng rng(3);
    ProbeEnsemble probes;
    probes.probes = {make_probe(rng, 8, 1), make_probe(rng, 8, 1), make_probe(rng, 8, 1)};
    StrategySchedule schedule;
    schedule.kind = Strategy::Average;
    schedule.probe_count = 3;

    std::vector<std::vector<int>> batch = {{1, 2, 3, 4}, {5, 6, 7}, {8, 9, 10, 11, 12}};

    SECTION("lambda = 0 equals plain NLL within 1e-12") {
        auto parts = sft_loss(model, batch, probes, 0.0, schedule, 0);
        double nll = 0.0;
        size_t positions = 0;
        for (const auto& seq : batch) {
            std::vector<int> prompt = {seq[0]};
            std::vector<int> rest(seq.begin() + 1, seq.end());
            nll -= model.sequence_logprob(prompt, rest);
            positions += rest.size();
        }
        nll /= static_cast<double>(positions);
        CHECK(parts.total.value() == Catch::Approx(nll).margin(1e-12));
        CHECK(parts.penalty == 0.0);
    }
    SECTION("loss equals separately computed NLL + lambda * mean probe proba") {
        const double lambda = 2.5;
        auto parts = sft_loss(model, batch, probes, lambda, schedule, 0);
        double penalty = 0.0;
        for (const auto& seq : batch) {
            auto fwd = model.forward(seq);
            auto pooled = mean_pool_rows(fwd.hidden[1], 0, seq.size()).data();
            penalty += ensemble_proba(probes, pooled);
        }
        penalty /= static_cast<double>(batch.size());
        CHECK(parts.penalty == Catch::Approx(penalty).margin(1e-12));
        CHECK(parts.total.value() ==
              Catch::Approx(parts.nll + lambda * penalty).margin(1e-12));
    }
    SECTION("penalty is invariant to batch order") {
        auto base = sft_loss(model, batch, probes, 1.0, schedule, 0);
        std::vector<std::vector<int>> permuted = {batch[2], batch[0], batch[1]};
        auto perm = sft_loss(model, permuted, probes, 1.0, schedule, 0);
        CHECK(std::fabs(base.penalty - perm.penalty) < 1e-12);
    }
    SECTION("average schedule feeds the ensemble mean as penalty") {
        std::vector<std::vector<int>> one = {{1, 2, 3, 4}};
        auto parts = sft_loss(model, one, probes, 1.0, schedule, 0);
        auto fwd = model.forward(one[0]);
        auto pooled = mean_pool_rows(fwd.hidden[1], 0, 4).data();
        CHECK(parts.penalty == Catch::Approx(ensemble_proba(probes, pooled)).margin(1e-12));
    }
    SECTION("schedule/probe-count mismatch rejected") {
        StrategySchedule bad = schedule;
        bad.probe_count = 2;
        CHECK_THROWS_AS(sft_loss(model, batch, probes, 1.0, bad, 0), std::invalid_argument);
    }
    SECTION("probe parameters receive no gradient and stay bit-identical") {
        const uint64_t fp_before = probe_fingerprint(probes.probes[0]);
        auto parts = sft_loss(model, batch, probes, 1.0, schedule, 0);
        parts.total.backward();
        model.sgd_step(0.05);
        model.zero_grads();
        CHECK(probe_fingerprint(probes.probes[0]) == fp_before);
    }
    SECTION("gradient matches central finite differences over adapter params") {
        auto& adapter = model.adapter("layers.1.attn.wv");
        Tensor original = adapter.down;
        StrategySchedule timed = schedule;
        timed.kind = Strategy::TimedSwitch;
        timed.batches_per_probe = 2;
        auto f = [&](const Tensor& x) {
            adapter.down = x;
            Tensor loss = sft_loss(model, batch, probes, 1.5, timed, 3).total;
            adapter.down = original;
            return loss;
        };
        CHECK(finite_difference_check(f, original, 1e-5) < 1e-4);
    }
    SECTION("per-batch pooling variant matches its own two-term recomputation") {
        auto parts = sft_loss(model, batch, probes, 1.0, schedule, 0, ProbePooling::PerBatch);
        size_t total_tokens = 0;
        for (const auto& seq : batch) total_tokens += seq.size();
        std::vector<double> mixed(8, 0.0);
        for (const auto& seq : batch) {
            auto fwd = model.forward(seq);
            auto pooled = mean_pool_rows(fwd.hidden[1], 0, seq.size()).data();
            for (size_t j = 0; j < 8; ++j)
                mixed[j] += pooled[j] * static_cast<double>(seq.size()) /
                            static_cast<double>(total_tokens);
        }
        CHECK(parts.penalty == Catch::Approx(ensemble_proba(probes, mixed)).margin(1e-12));
    }
}

TEST_CASE("train_dpo") {
    ToyLM base(tiny_config(23));
    OracleConfig oracle = OracleConfig::defaults(16);
    auto corpus = synth_corpus(40, 0.5, 7, oracle, 16);

    ToyLM policy = base.deep_copy();
    policy.attach_lora(2, 4.0, policy.default_lora_targets());
    ToyLM reference = policy.clone_frozen_reference();

    PairScorer scorer;
    scorer.kind = ScorerKind::OracleClassifier;
    scorer.oracle = oracle;
    DpoConfig cfg;
    cfg.seed = 5;
    cfg.n_prompts = 40;
    cfg.max_new = 6;
    cfg.steps = 25;
    cfg.batch_size = 4;
    cfg.lr = 0.05;
    auto gen = generate_pairs(policy, corpus, scorer, cfg);
    REQUIRE(gen.pairs.size() >= 10);
    auto splits = split_pairs(gen.pairs, cfg.split, cfg.seed);

    SECTION("zero steps leaves the policy at the base model") {
        ToyLM p2 = base.deep_copy();
        p2.attach_lora(2, 4.0, p2.default_lora_targets());
        DpoConfig zero = cfg;
        zero.steps = 0;
        const uint64_t fp = p2.fingerprint();
        train_dpo(p2, reference, splits.train, zero);
        CHECK(p2.fingerprint() == fp);
    }
    SECTION("training pushes the train-split loss below ln 2 and freezes the reference") {
        const uint64_t ref_fp = reference.fingerprint();
        auto outcome = train_dpo(policy, reference, splits.train, cfg);
        CHECK_FALSE(outcome.diverged);
        CHECK(outcome.steps_completed == cfg.steps);
        const double final_loss = dpo_loss(policy, reference, splits.train, cfg.beta).value();
        CHECK(final_loss < std::log(2.0));
        CHECK(reference.fingerprint() == ref_fp);
    }
    SECTION("same config and seed give bit-identical eval timelines") {
        auto run = [&]() {
            ToyLM p = base.deep_copy();
            p.attach_lora(2, 4.0, p.default_lora_targets());
            ToyLM ref = p.clone_frozen_reference();
            std::vector<std::pair<int, double>> timeline;
            TrainHooks hooks;
            hooks.eval_every = 10;
            hooks.eval = [&](ToyLM&, int step, double loss) {
                timeline.emplace_back(step, loss);
            };
            train_dpo(p, ref, splits.train, cfg, hooks);
            return std::make_pair(p.fingerprint(), timeline);
        };
        auto a = run();
        auto b = run();
        CHECK(a.first == b.first);
        REQUIRE(a.second.size() == b.second.size());
        for (size_t i = 0; i < a.second.size(); ++i) {
            CHECK(a.second[i].first == b.second[i].first);
            CHECK(a.second[i].second == b.second[i].second);
        }
    }
}

TEST_CASE("train_sft") {
    ToyLM base(tiny_config(29));
    OracleConfig oracle = OracleConfig::defaults(16);
    auto corpus = synth_corpus(48, 0.6, 11, oracle, 16);
    Rng rng(31);
    ProbeEnsemble probes;
    probes.probes = {make_probe(rng, 8, 1), make_probe(rng, 8, 1)};

    SftConfig cfg;
    cfg.lambda = 1.0;
    cfg.strategy = Strategy::TimedSwitch;
    cfg.batch_size = 8;
    cfg.seed = 3;
    cfg.lr = 0.02;

    SECTION("lambda = 0 run is identical with and without probes supplied") {
        SftConfig zero = cfg;
        zero.lambda = 0.0;
        auto run = [&](const ProbeEnsemble& e) {
            ToyLM m = base.deep_copy();
            m.attach_lora(2, 4.0, m.default_lora_targets());
            std::vector<double> losses;
            TrainHooks hooks;
            hooks.eval_every = 2;
            hooks.eval = [&](ToyLM&, int, double loss) { losses.push_back(loss); };
            train_sft(m, corpus, e, zero, hooks);
            return std::make_pair(m.fingerprint(), losses);
        };
        auto with_probes = run(probes);
        auto without = run(ProbeEnsemble{});
        CHECK(with_probes.first == without.first);
        CHECK(with_probes.second == without.second);
    }
    SECTION("probes stay bit-identical through training; reruns are deterministic") {
        const uint64_t fp0 = probe_fingerprint(probes.probes[0]);
        const uint64_t fp1 = probe_fingerprint(probes.probes[1]);
        auto run = [&]() {
            ToyLM m = base.deep_copy();
            m.attach_lora(2, 4.0, m.default_lora_targets());
            std::vector<double> losses;
            TrainHooks hooks;
            hooks.eval_every = 3;
            hooks.eval = [&](ToyLM&, int, double loss) { losses.push_back(loss); };
            auto outcome = train_sft(m, corpus, probes, cfg, hooks);
            CHECK_FALSE(outcome.diverged);
            return std::make_pair(m.fingerprint(), losses);
        };
        auto a = run();
        auto b = run();
        CHECK(a.first == b.first);
        CHECK(a.second == b.second);
        CHECK(probe_fingerprint(probes.probes[0]) == fp0);
        CHECK(probe_fingerprint(probes.probes[1]) == fp1);
    }
}

TEST_CASE("pretrain_lm reduces corpus NLL") {
    ToyLM model(tiny_config(37));
    OracleConfig oracle = OracleConfig::defaults(16);
    auto corpus = synth_corpus(60, 0.5, 13, oracle, 16);

    auto mean_nll = [&]() {
        double nll = 0.0;
        size_t positions = 0;
        for (const auto& rec : corpus) {
            std::vector<int> prompt = {rec.prompt_tokens[0]};
            std::vector<int> rest(rec.prompt_tokens.begin() + 1, rec.prompt_tokens.end());
            nll -= model.sequence_logprob(prompt, rest);
            positions += rest.size();
        }
        return nll / static_cast<double>(positions);
    };
    const double before = mean_nll();
    pretrain_lm(model, corpus, 2, 8, 0.05, 1);
    CHECK(mean_nll() < before);
}

TEST_CASE("pair jsonl and manifest round-trip") {
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < 4; ++i) {
        PreferencePair p;
        p.prompt = {1, 2 + i};
        p.chosen = {3, 4};
        p.rejected = {5};
        p.chosen_score = 0.1 * i;
        p.rejected_score = 0.5 + 0.1 * i;
        p.scorer = i % 2 == 0 ? ScorerKind::Probe : ScorerKind::OracleClassifier;
        pairs.push_back(p);
    }
    const std::string path = "pairs_test.jsonl";
    save_pairs_jsonl(path, pairs);
    auto loaded = load_pairs_jsonl(path);
    REQUIRE(loaded.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        CHECK(loaded[i].prompt == pairs[i].prompt);
        CHECK(loaded[i].chosen == pairs[i].chosen);
        CHECK(loaded[i].rejected == pairs[i].rejected);
        CHECK(loaded[i].chosen_score == pairs[i].chosen_score);
        CHECK(loaded[i].rejected_score == pairs[i].rejected_score);
        CHECK(loaded[i].scorer == pairs[i].scorer);
    }
    std::remove(path.c_str());

    PairGenManifest m;
    m.scorer = ScorerKind::Ensemble;
    m.k = 5;
    m.seed = 11;
    m.prompts_seen = 100;
    m.pairs_emitted = 90;
    m.skipped_degenerate = 7;
    m.skipped_scorer_failure = 3;
    const std::string mpath = "manifest_test.json";
    save_pair_manifest(mpath, m);
    std::ifstream is(mpath);
    nlohmann::json j;
    is >> j;
    CHECK(j["scorer"] == "ensemble");
    CHECK(j["pairs_emitted"] == 90);
    CHECK(j["skipped_degenerate"] == 7);
    std::remove(mpath.c_str());
}
