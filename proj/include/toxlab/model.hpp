#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "toxlab/common.hpp"
#include "toxlab/tensor.hpp"

namespace toxlab {

// Decoder-only toy transformer. Pre-norm blocks with RMS normalization,
// multi-head causal attention and a SiLU MLP, no bias terms anywhere.
// Heads are split and re-joined with constant selector matrices so the
// whole forward pass stays inside the autodiff op set.

constexpr int kEosToken = 0;

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 32;
    int n_layers = 4;
    int n_heads = 2;
    int max_seq_len = 32;
    uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    int mlp_hidden() const { return 4 * d_model; }

    void validate() const {
        if (n_heads < 1 || d_model % n_heads != 0) {
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
        }
        if (vocab_size < 8) throw std::invalid_argument("ModelConfig: vocab_size must be >= 8");
        if (n_layers < 2) throw std::invalid_argument("ModelConfig: n_layers must be >= 2");
        if (max_seq_len < 2) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 2");
    }
};

struct LoraAdapter {
    std::string target;  // name of the adapted weight matrix
    int rank = 4;
    double alpha = 8.0;
    Tensor down;  // [d_model x rank], random init
    Tensor up;    // [rank x d_model], zero init

    double scaling() const { return alpha / static_cast<double>(rank); }
};

struct ForwardResult {
    Tensor logits;               // [T x V]
    std::vector<Tensor> hidden;  // post-block residual stream per layer, [T x d]
};

enum class DecodeKind { Greedy, Temperature };

struct DecodeMode {
    DecodeKind kind = DecodeKind::Greedy;
    double temperature = 1.0;

    static DecodeMode greedy() { return {DecodeKind::Greedy, 1.0}; }
    static DecodeMode temperature_sampling(double t) { return {DecodeKind::Temperature, t}; }
};

class ToyLM {
public:
    explicit ToyLM(const ModelConfig& cfg) : config(cfg) {
        config.validate();
        Rng rng(splitmix64(cfg.seed ^ 0x70784c4du));  // domain-separated init stream
        auto init = [&](const std::string& name, size_t r, size_t c) {
            Tensor t = Tensor::zeros({r, c}, /*requires_grad=*/true);
            for (double& v : t.data()) v = rng.gauss(0.0, 0.08);
            add_param(name, t);
        };
        const auto d = static_cast<size_t>(cfg.d_model);
        const auto ff = static_cast<size_t>(cfg.mlp_hidden());
        init("tok_emb", cfg.vocab_size, d);
        init("pos_emb", cfg.max_seq_len, d);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            init(p + "attn.wq", d, d);
            init(p + "attn.wk", d, d);
            init(p + "attn.wv", d, d);
            init(p + "attn.wo", d, d);
            init(p + "mlp.w1", d, ff);
            init(p + "mlp.w2", ff, d);
        }
        init("unembed", d, cfg.vocab_size);
        build_selectors();
    }

    ModelConfig config;
    bool frozen = false;

    // ------------------------------------------------------------ parameters

    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    const std::vector<LoraAdapter>& adapters() const { return adapters_; }

    LoraAdapter& adapter(const std::string& target) {
        auto it = adapter_index_.find(target);
        if (it == adapter_index_.end()) {
            throw std::invalid_argument("ToyLM: no adapter on target '" + target + "'");
        }
        return adapters_[it->second];
    }

    Tensor& param(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw std::invalid_argument("ToyLM: unknown parameter '" + name + "'");
        }
        return params_[it->second].second;
    }
    const Tensor& param(const std::string& name) const {
        return const_cast<ToyLM*>(this)->param(name);
    }
    bool has_param(const std::string& name) const { return index_.count(name) > 0; }

    // Trainable tensors in deterministic order: adapters when attached,
    // otherwise every requires_grad parameter.
    std::vector<Tensor> trainable() {
        std::vector<Tensor> out;
        if (!adapters_.empty()) {
            for (auto& a : adapters_) {
                if (a.down.requires_grad()) out.push_back(a.down);
                if (a.up.requires_grad()) out.push_back(a.up);
            }
            return out;
        }
        for (auto& [name, t] : params_) {
            if (t.requires_grad()) out.push_back(t);
        }
        return out;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
        for (auto& a : adapters_) {
            a.down.zero_grad();
            a.up.zero_grad();
        }
    }

    void sgd_step(double lr) {
        if (frozen) throw std::logic_error("ToyLM: sgd_step on a frozen model");
        for (Tensor& t : trainable()) {
            if (!t.has_grad()) continue;
            const auto& g = t.grad();
            for (size_t i = 0; i < g.size(); ++i) t.data()[i] -= lr * g[i];
        }
    }

    // ---------------------------------------------------------------- LoRA

    // Freezes the base weights and attaches rank-r adapters (zero-initialized
    // up projection, so outputs are unchanged at attach time).
    void attach_lora(int rank, double alpha, const std::vector<std::string>& targets) {
        if (frozen) throw std::logic_error("ToyLM: cannot attach adapters to a frozen model");
        if (!adapters_.empty()) throw std::logic_error("ToyLM: adapters already attached");
        if (rank < 1) throw std::invalid_argument("attach_lora: rank must be >= 1");
        for (const auto& t : targets) {
            if (!has_param(t)) {
                throw std::invalid_argument("attach_lora: unknown target '" + t + "'");
            }
        }
        for (auto& [name, t] : params_) t.set_requires_grad(false);
        const auto d = static_cast<size_t>(config.d_model);
        for (const auto& target : targets) {
            if (param(target).shape() != std::vector<size_t>{d, d}) {
                throw std::invalid_argument("attach_lora: target '" + target +
                                            "' is not a [d_model x d_model] matrix");
            }
            LoraAdapter a;
            a.target = target;
            a.rank = rank;
            a.alpha = alpha;
            a.down = Tensor::zeros({d, static_cast<size_t>(rank)}, true);
            Rng rng(hash_combine(config.seed ^ 0x6c6f7261u, fnv1a64(target)));
            for (double& v : a.down.data()) v = rng.gauss(0.0, 0.1);
            a.up = Tensor::zeros({static_cast<size_t>(rank), d}, true);
            adapters_.push_back(std::move(a));
            adapter_index_[target] = adapters_.size() - 1;
        }
    }

    // Default targets from the experiment setup: attention query and value
    // projections in every layer.
    std::vector<std::string> default_lora_targets() const {
        std::vector<std::string> out;
        for (int l = 0; l < config.n_layers; ++l) {
            out.push_back("layers." + std::to_string(l) + ".attn.wq");
            out.push_back("layers." + std::to_string(l) + ".attn.wv");
        }
        return out;
    }

    size_t trainable_param_count() {
        size_t n = 0;
        for (const Tensor& t : trainable()) n += t.numel();
        return n;
    }

    // Deep copy with every tensor detached and frozen; later training of the
    // source can never reach into the clone.
    ToyLM clone_frozen_reference() const {
        ToyLM copy(*this, CloneTag{});
        copy.frozen = true;
        return copy;
    }

    ToyLM deep_copy() const { return ToyLM(*this, CloneTag{}); }

    // -------------------------------------------------------------- forward

    ForwardResult forward(const std::vector<int>& tokens, bool collect_hidden = true) const {
        const auto T = tokens.size();
        if (T < 1) throw std::invalid_argument("forward: empty token sequence");
        if (T > static_cast<size_t>(config.max_seq_len)) {
            throw std::invalid_argument("forward: sequence length " + std::to_string(T) +
                                        " exceeds max_seq_len " +
                                        std::to_string(config.max_seq_len));
        }
        std::vector<int> positions(T);
        for (size_t i = 0; i < T; ++i) positions[i] = static_cast<int>(i);

        Tensor x = add(embedding(cparam("tok_emb"), tokens),
                       embedding(cparam("pos_emb"), positions));
        const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(config.head_dim()));
        const Tensor& mask = causal_mask(T);

        ForwardResult result;
        if (collect_hidden) result.hidden.reserve(config.n_layers);

        for (int l = 0; l < config.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            Tensor a = rms_norm(x);
            Tensor q = adapted_matmul(a, p + "attn.wq");
            Tensor k = adapted_matmul(a, p + "attn.wk");
            Tensor v = adapted_matmul(a, p + "attn.wv");

            std::vector<Tensor> heads;
            heads.reserve(config.n_heads);
            for (int h = 0; h < config.n_heads; ++h) {
                Tensor qh = matmul(q, selectors_[h]);
                Tensor kh = matmul(k, selectors_[h]);
                Tensor vh = matmul(v, selectors_[h]);
                Tensor scores = add(scale(matmul(qh, kh, /*transpose_b=*/true), inv_sqrt_hd), mask);
                heads.push_back(matmul(softmax(scores), vh));
            }
            Tensor att = matmul(concat_cols(heads), cparam(p + "attn.wo"));
            x = add(x, att);

            Tensor m = rms_norm(x);
            Tensor h1 = matmul(m, cparam(p + "mlp.w1"));
            Tensor acts = mul(h1, sigmoid(h1));  // SiLU
            x = add(x, matmul(acts, cparam(p + "mlp.w2")));

            if (collect_hidden) result.hidden.push_back(x);
        }
        result.logits = matmul(rms_norm(x), cparam("unembed"));
        return result;
    }

    // ------------------------------------------------------------ decoding

    // Returns generated tokens only (prompt excluded). Stops early when the
    // end-of-sequence token is sampled; the EOS itself is not returned.
    std::vector<int> generate(const std::vector<int>& prompt, DecodeMode mode, int max_new,
                              uint64_t seed) const {
        if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
        if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
        if (mode.kind == DecodeKind::Temperature && !(mode.temperature > 0.0)) {
            throw std::invalid_argument("generate: temperature must be > 0");
        }
        if (prompt.size() + static_cast<size_t>(max_new) >
            static_cast<size_t>(config.max_seq_len)) {
            throw std::invalid_argument(
                "generate: prompt length + max_new exceeds max_seq_len of " +
                std::to_string(config.max_seq_len));
        }
        Rng rng(seed);
        std::vector<int> seq = prompt;
        std::vector<int> out;
        for (int step = 0; step < max_new; ++step) {
            Tensor logits = forward(seq, /*collect_hidden=*/false).logits;
            const size_t last = seq.size() - 1;
            const double* row = logits.data().data() + last * config.vocab_size;
            int tok;
            if (mode.kind == DecodeKind::Greedy) {
                tok = 0;
                for (int j = 1; j < config.vocab_size; ++j) {
                    if (row[j] > row[tok]) tok = j;
                }
            } else {
                tok = sample_row(row, config.vocab_size, mode.temperature, rng);
            }
            if (tok == kEosToken) break;
            out.push_back(tok);
            seq.push_back(tok);
        }
        return out;
    }

    // Differentiable sum of log-probabilities of the response tokens given
    // the prompt (prompt tokens contribute context only, no terms).
    Tensor sequence_logprob_graph(const std::vector<int>& prompt,
                                  const std::vector<int>& response) const {
        if (prompt.empty() || response.empty()) {
            throw std::invalid_argument("sequence_logprob: prompt and response must be non-empty");
        }
        if (prompt.size() + response.size() > static_cast<size_t>(config.max_seq_len)) {
            throw std::invalid_argument("sequence_logprob: combined length exceeds max_seq_len of " +
                                        std::to_string(config.max_seq_len));
        }
        std::vector<int> seq = prompt;
        seq.insert(seq.end(), response.begin(), response.end());
        Tensor logits = forward(seq, /*collect_hidden=*/false).logits;
        std::vector<size_t> positions(response.size());
        for (size_t i = 0; i < response.size(); ++i) positions[i] = prompt.size() - 1 + i;
        return gather_log_softmax(logits, positions, response);
    }

    double sequence_logprob(const std::vector<int>& prompt, const std::vector<int>& response) const {
        return sequence_logprob_graph(prompt, response).value();
    }

    // ---------------------------------------------------------- checkpoints

    void save_checkpoint(const std::string& path) const;
    static ToyLM load_checkpoint(const std::string& path);

    uint64_t fingerprint() const {
        uint64_t h = fnv1a64("toylm");
        for (const auto& [name, t] : params_) {
            h = hash_combine(h, fnv1a64(name));
            h = hash_combine(h, fnv1a64(t.data().data(), t.data().size() * sizeof(double)));
        }
        for (const auto& a : adapters_) {
            h = hash_combine(h, fnv1a64(a.target));
            h = hash_combine(h, fnv1a64(a.down.data().data(), a.down.data().size() * sizeof(double)));
            h = hash_combine(h, fnv1a64(a.up.data().data(), a.up.data().size() * sizeof(double)));
        }
        return h;
    }

private:
    struct CloneTag {};

    ToyLM(const ToyLM& other, CloneTag) : config(other.config), frozen(other.frozen) {
        for (const auto& [name, t] : other.params_) {
            add_param(name, Tensor::from(t.shape(), t.data(), false));
        }
        for (const auto& a : other.adapters_) {
            LoraAdapter copy;
            copy.target = a.target;
            copy.rank = a.rank;
            copy.alpha = a.alpha;
            copy.down = Tensor::from(a.down.shape(), a.down.data(), false);
            copy.up = Tensor::from(a.up.shape(), a.up.data(), false);
            adapters_.push_back(std::move(copy));
            adapter_index_[a.target] = adapters_.size() - 1;
        }
        build_selectors();
    }

    void add_param(const std::string& name, Tensor t) {
        index_[name] = params_.size();
        params_.emplace_back(name, std::move(t));
    }

    const Tensor& cparam(const std::string& name) const { return param(name); }

    // X * W plus the adapter delta (alpha/rank) * (X * down) * up when the
    // target carries one.
    Tensor adapted_matmul(const Tensor& x, const std::string& name) const {
        Tensor base = matmul(x, cparam(name));
        auto it = adapter_index_.find(name);
        if (it == adapter_index_.end()) return base;
        const LoraAdapter& a = adapters_[it->second];
        Tensor delta = scale(matmul(matmul(x, a.down), a.up), a.scaling());
        return add(base, delta);
    }

    void build_selectors() {
        selectors_.clear();
        const auto d = static_cast<size_t>(config.d_model);
        const auto hd = static_cast<size_t>(config.head_dim());
        for (int h = 0; h < config.n_heads; ++h) {
            Tensor sel = Tensor::zeros({d, hd});
            for (size_t j = 0; j < hd; ++j) {
                sel.data()[(static_cast<size_t>(h) * hd + j) * hd + j] = 1.0;
            }
            selectors_.push_back(sel);
        }
    }

    const Tensor& causal_mask(size_t T) const {
        auto it = masks_.find(T);
        if (it != masks_.end()) return it->second;
        Tensor m = Tensor::zeros({T, T});
        for (size_t i = 0; i < T; ++i) {
            for (size_t j = i + 1; j < T; ++j) m.data()[i * T + j] = -1e9;
        }
        return masks_.emplace(T, std::move(m)).first->second;
    }

    static int sample_row(const double* logits, int v, double temperature, Rng& rng) {
        std::vector<double> p(v);
        double mx = logits[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) {
            p[j] = std::exp((logits[j] - mx) / temperature);
            sum += p[j];
        }
        const double u = rng.uniform() * sum;
        double acc = 0.0;
        for (int j = 0; j < v; ++j) {
            acc += p[j];
            if (u < acc) return j;
        }
        return v - 1;
    }

    std::vector<std::pair<std::string, Tensor>> params_;
    std::map<std::string, size_t> index_;
    std::vector<LoraAdapter> adapters_;
    std::map<std::string, size_t> adapter_index_;
    std::vector<Tensor> selectors_;
    mutable std::map<size_t, Tensor> masks_;
};

// -------------------------------------------------------------- checkpoint io
//
// Named-tensor container, little-endian, 64-bit payloads. Round-trips are
// bit-exact.

namespace ckpt {

inline void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline std::string read_string(std::istream& is) {
    const uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}
inline std::vector<double> read_doubles(std::istream& is, size_t n) {
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    return v;
}

}  // namespace ckpt

inline void ToyLM::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open '" + path + "' for writing");
    os.write("TOXLMCK1", 8);
    ckpt::write_u32(os, static_cast<uint32_t>(config.vocab_size));
    ckpt::write_u32(os, static_cast<uint32_t>(config.d_model));
    ckpt::write_u32(os, static_cast<uint32_t>(config.n_layers));
    ckpt::write_u32(os, static_cast<uint32_t>(config.n_heads));
    ckpt::write_u32(os, static_cast<uint32_t>(config.max_seq_len));
    ckpt::write_u64(os, config.seed);
    ckpt::write_u32(os, frozen ? 1u : 0u);

    ckpt::write_u32(os, static_cast<uint32_t>(adapters_.size()));
    for (const auto& a : adapters_) {
        ckpt::write_string(os, a.target);
        ckpt::write_u32(os, static_cast<uint32_t>(a.rank));
        ckpt::write_f64(os, a.alpha);
        ckpt::write_doubles(os, a.down.data());
        ckpt::write_doubles(os, a.up.data());
    }

    ckpt::write_u32(os, static_cast<uint32_t>(params_.size()));
    for (const auto& [name, t] : params_) {
        ckpt::write_string(os, name);
        ckpt::write_u32(os, static_cast<uint32_t>(t.shape().size()));
        for (size_t d : t.shape()) ckpt::write_u64(os, d);
        ckpt::write_doubles(os, t.data());
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

inline ToyLM ToyLM::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "TOXLMCK1", 8) != 0) {
        throw std::runtime_error("load_checkpoint: '" + path + "' is not a toxlab checkpoint");
    }
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(ckpt::read_u32(is));
    cfg.d_model = static_cast<int>(ckpt::read_u32(is));
    cfg.n_layers = static_cast<int>(ckpt::read_u32(is));
    cfg.n_heads = static_cast<int>(ckpt::read_u32(is));
    cfg.max_seq_len = static_cast<int>(ckpt::read_u32(is));
    cfg.seed = ckpt::read_u64(is);
    const bool was_frozen = ckpt::read_u32(is) != 0;

    ToyLM model(cfg);
    const uint32_t n_adapters = ckpt::read_u32(is);
    std::vector<LoraAdapter> adapters;
    std::vector<std::string> targets;
    struct Pending {
        std::string target;
        int rank;
        double alpha;
        std::vector<double> down, up;
    };
    std::vector<Pending> pending;
    for (uint32_t i = 0; i < n_adapters; ++i) {
        Pending p;
        p.target = ckpt::read_string(is);
        p.rank = static_cast<int>(ckpt::read_u32(is));
        p.alpha = ckpt::read_f64(is);
        const auto d = static_cast<size_t>(cfg.d_model);
        p.down = ckpt::read_doubles(is, d * static_cast<size_t>(p.rank));
        p.up = ckpt::read_doubles(is, static_cast<size_t>(p.rank) * d);
        targets.push_back(p.target);
        pending.push_back(std::move(p));
    }
    if (!pending.empty()) {
        model.attach_lora(pending[0].rank, pending[0].alpha, targets);
        for (size_t i = 0; i < pending.size(); ++i) {
            model.adapters_[i].down.data() = pending[i].down;
            model.adapters_[i].up.data() = pending[i].up;
        }
    }

    const uint32_t n_tensors = ckpt::read_u32(is);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = ckpt::read_string(is);
        const uint32_t ndim = ckpt::read_u32(is);
        std::vector<size_t> shape(ndim);
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<size_t>(ckpt::read_u64(is));
            numel *= shape[d];
        }
        std::vector<double> data = ckpt::read_doubles(is, numel);
        Tensor& t = model.param(name);
        if (t.shape() != shape) {
            throw std::runtime_error("load_checkpoint: shape mismatch for tensor '" + name + "'");
        }
        t.data() = std::move(data);
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated file '" + path + "'");
    if (was_frozen) {
        ToyLM out = model.clone_frozen_reference();
        return out;
    }
    return model;
}

}  // namespace toxlab
