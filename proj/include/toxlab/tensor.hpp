#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace toxlab {

// Reverse-mode autodiff over dense 64-bit tensors. Define-by-run: every op
// evaluates eagerly and records a backward closure; backward() walks the
// graph in reverse topological order. Interior gradients live in pass-local
// scratch buffers, so repeated backward passes accumulate only into leaves.

enum class Op {
    Leaf,
    MatMul,
    Add,
    Mul,
    Sigmoid,
    LogSigmoid,
    Softmax,
    RmsNorm,
    Embedding,
    MeanPool,
    Concat,
    Scale,
    CrossEntropy,
    LogProbGather,
};

inline const char* op_name(Op k) {
    switch (k) {
        case Op::Leaf: return "leaf";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Sigmoid: return "sigmoid";
        case Op::LogSigmoid: return "log-sigmoid";
        case Op::Softmax: return "softmax";
        case Op::RmsNorm: return "rms-norm";
        case Op::Embedding: return "embedding-lookup";
        case Op::MeanPool: return "mean-pool";
        case Op::Concat: return "concat";
        case Op::Scale: return "scalar-scale";
        case Op::CrossEntropy: return "softmax-cross-entropy";
        case Op::LogProbGather: return "logprob-gather";
    }
    return "?";
}

struct TensorNode;

// Pass-local gradient store used during one backward traversal.
// pbuf(i) returns the scratch buffer of parents[i], zero-initialized.
using ParentBuf = std::function<std::vector<double>&(size_t)>;

struct TensorNode {
    std::vector<size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // persistent leaf accumulator; empty = absent
    Op op = Op::Leaf;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // backward_fn(upstream, pbuf): add d(out)/d(parent_i)^T * upstream into pbuf(i)
    std::function<void(const std::vector<double>&, const ParentBuf&)> backward_fn;

    size_t numel() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }
    bool is_leaf() const { return parents.empty(); }
};

inline std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->data.assign(n->numel(), 0.0);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor full(std::vector<size_t> shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor from(std::vector<size_t> shape, std::vector<double> values,
                       bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        if (n->data.size() != n->numel()) {
            throw std::invalid_argument("tensor: data length " + std::to_string(n->data.size()) +
                                        " does not match shape " + shape_str(n->shape));
        }
        return Tensor(n);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<size_t>& shape() const { return n_->shape; }
    size_t numel() const { return n_->numel(); }
    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }

    size_t rows() const { return n_->shape.size() == 2 ? n_->shape[0] : 1; }
    size_t cols() const { return n_->shape.size() == 2 ? n_->shape[1] : n_->shape[0]; }
    double at(size_t r, size_t c) const { return n_->data[r * cols() + c]; }

    double value() const {
        if (numel() != 1) {
            throw std::invalid_argument("value(): tensor is not scalar, shape " +
                                        shape_str(n_->shape));
        }
        return n_->data[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (n_->grad.empty()) {
            throw std::runtime_error("grad(): no gradient accumulated; call backward() first");
        }
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    std::shared_ptr<TensorNode> node() const { return n_; }

    // Reverse-mode pass from a scalar. Accumulates additively into the
    // persistent grad of every requires_grad leaf reachable from here.
    void backward() const;

private:
    std::shared_ptr<TensorNode> n_;
};

// ---------------------------------------------------------------- backward

inline void Tensor::backward() const {
    if (numel() != 1) {
        throw std::invalid_argument("backward(): loss must be scalar, got shape " +
                                    shape_str(n_->shape));
    }

    // iterative post-order DFS for topological order
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next].get();
            ++next;
            if (!visited.count(p) && p->requires_grad) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<TensorNode*, std::vector<double>> scratch;
    scratch[n_.get()] = {1.0};

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* node = *it;
        auto found = scratch.find(node);
        if (found == scratch.end()) continue;
        const std::vector<double>& up = found->second;

        if (node->is_leaf()) {
            if (node->requires_grad) {
                if (node->grad.empty()) node->grad.assign(node->numel(), 0.0);
                for (size_t i = 0; i < up.size(); ++i) node->grad[i] += up[i];
            }
            continue;
        }
        if (!node->backward_fn) continue;

        auto pbuf = [&](size_t i) -> std::vector<double>& {
            TensorNode* p = node->parents[i].get();
            auto& buf = scratch[p];
            if (buf.empty()) buf.assign(p->numel(), 0.0);
            return buf;
        };
        node->backward_fn(up, pbuf);
    }
}

// ---------------------------------------------------------------- op helpers

namespace detail {

inline std::shared_ptr<TensorNode> make_node(std::vector<size_t> shape, Op op,
                                             std::vector<std::shared_ptr<TensorNode>> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(n->numel(), 0.0);
    n->op = op;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) n->parents = std::move(parents);
    return n;
}

inline bool parent_wants_grad(const TensorNode& out, size_t i) {
    return out.parents[i]->requires_grad;
}

inline void check_same_shape(Op op, const Tensor& a, const Tensor& b) {
    if (a.numel() == 1 && b.numel() == 1) return;  // scalars mix freely ({1} vs [1x1])
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline void check_matrix(Op op, const Tensor& t) {
    if (t.shape().size() != 2) {
        throw std::invalid_argument(std::string(op_name(op)) + ": expected 2-D tensor, got " +
                                    shape_str(t.shape()));
    }
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow on either tail
inline double stable_log_sigmoid(double x) {
    return std::min(x, 0.0) - std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace detail

// ---------------------------------------------------------------- ops

// C = A * B, or A * B^T when transpose_b. 2-D only.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    detail::check_matrix(Op::MatMul, a);
    detail::check_matrix(Op::MatMul, b);
    const size_t m = a.shape()[0], k = a.shape()[1];
    const size_t bk = transpose_b ? b.shape()[1] : b.shape()[0];
    const size_t n = transpose_b ? b.shape()[0] : b.shape()[1];
    if (k != bk) {
        throw std::invalid_argument(std::string(op_name(Op::MatMul)) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                                    (transpose_b ? " (b transposed)" : ""));
    }
    auto out = detail::make_node({m, n}, Op::MatMul, {a.node(), b.node()});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out->data.data();
    if (!transpose_b) {
        for (size_t i = 0; i < m; ++i) {
            for (size_t p = 0; p < k; ++p) {
                const double aip = A[i * k + p];
                if (aip == 0.0) continue;
                const double* Brow = B + p * n;
                double* Crow = C + i * n;
                for (size_t j = 0; j < n; ++j) Crow[j] += aip * Brow[j];
            }
        }
    } else {
        for (size_t i = 0; i < m; ++i) {
            for (size_t j = 0; j < n; ++j) {
                const double* Arow = A + i * k;
                const double* Brow = B + j * k;
                double acc = 0.0;
                for (size_t p = 0; p < k; ++p) acc += Arow[p] * Brow[p];
                C[i * n + j] = acc;
            }
        }
    }
    if (out->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        out->backward_fn = [an, bn, m, k, n, transpose_b, outw = std::weak_ptr<TensorNode>(out)](
                               const std::vector<double>& up, const ParentBuf& pbuf) {
            auto o = outw.lock();
            const double* G = up.data();
            if (o->parents[0]->requires_grad) {
                // dA = G * B  (or G * B when b transposed: C=A*B^T -> dA = G*B)
                std::vector<double>& dA = pbuf(0);
                const double* B = bn->data.data();
                if (!transpose_b) {
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < n; ++j) {
                            const double g = G[i * n + j];
                            if (g == 0.0) continue;
                            for (size_t p = 0; p < k; ++p) dA[i * k + p] += g * B[p * n + j];
                        }
                } else {
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < n; ++j) {
                            const double g = G[i * n + j];
                            if (g == 0.0) continue;
                            for (size_t p = 0; p < k; ++p) dA[i * k + p] += g * B[j * k + p];
                        }
                }
            }
            if (o->parents[1]->requires_grad) {
                std::vector<double>& dB = pbuf(1);
                const double* A = an->data.data();
                if (!transpose_b) {
                    // dB = A^T * G
                    for (size_t i = 0; i < m; ++i)
                        for (size_t p = 0; p < k; ++p) {
                            const double aip = A[i * k + p];
                            if (aip == 0.0) continue;
                            for (size_t j = 0; j < n; ++j) dB[p * n + j] += aip * G[i * n + j];
                        }
                } else {
                    // C = A*B^T -> dB = G^T * A
                    for (size_t j = 0; j < n; ++j)
                        for (size_t i = 0; i < m; ++i) {
                            const double g = G[i * n + j];
                            if (g == 0.0) continue;
                            for (size_t p = 0; p < k; ++p) dB[j * k + p] += g * A[i * k + p];
                        }
                }
            }
        };
    }
    return Tensor(out);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(Op::Add, a, b);
    auto out = detail::make_node(a.shape(), Op::Add, {a.node(), b.node()});
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] + b.data()[i];
    if (out->requires_grad) {
        out->backward_fn = [outw = std::weak_ptr<TensorNode>(out)](const std::vector<double>& up,
                                                                   const ParentBuf& pbuf) {
            auto o = outw.lock();
            for (size_t pi = 0; pi < 2; ++pi) {
                if (!o->parents[pi]->requires_grad) continue;
                std::vector<double>& d = pbuf(pi);
                for (size_t i = 0; i < up.size(); ++i) d[i] += up[i];
            }
        };
    }
    return Tensor(out);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(Op::Mul, a, b);
    auto out = detail::make_node(a.shape(), Op::Mul, {a.node(), b.node()});
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] * b.data()[i];
    if (out->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        out->backward_fn = [an, bn, outw = std::weak_ptr<TensorNode>(out)](
                               const std::vector<double>& up, const ParentBuf& pbuf) {
            auto o = outw.lock();
            if (o->parents[0]->requires_grad) {
                std::vector<double>& d = pbuf(0);
                for (size_t i = 0; i < up.size(); ++i) d[i] += up[i] * bn->data[i];
            }
            if (o->parents[1]->requires_grad) {
                std::vector<double>& d = pbuf(1);
                for (size_t i = 0; i < up.size(); ++i) d[i] += up[i] * an->data[i];
            }
        };
    }
    return Tensor(out);
}

inline Tensor sigmoid(const Tensor& x) {
    auto out = detail::make_node(x.shape(), Op::Sigmoid, {x.node()});
    for (size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = detail::stable_sigmoid(x.data()[i]);
    if (out->requires_grad) {
        out->backward_fn = [outw = std::weak_ptr<TensorNode>(out)](const std::vector<double>& up,
                                                                   const ParentBuf& pbuf) {
            auto o = outw.lock();
            std::vector<double>& d = pbuf(0);
            for (size_t i = 0; i < up.size(); ++i) {
                const double y = o->data[i];
                d[i] += up[i] * y * (1.0 - y);
            }
        };
    }
    return Tensor(out);
}

inline Tensor log_sigmoid(const Tensor& x) {
    auto out = detail::make_node(x.shape(), Op::LogSigmoid, {x.node()});
    std::vector<double> sig(x.numel());
    for (size_t i = 0; i < sig.size(); ++i) {
        sig[i] = detail::stable_sigmoid(x.data()[i]);
        out->data[i] = detail::stable_log_sigmoid(x.data()[i]);
    }
    if (out->requires_grad) {
        out->backward_fn = [sig = std::move(sig)](const std::vector<double>& up,
                                                  const ParentBuf& pbuf) {
            std::vector<double>& d = pbuf(0);
            for (size_t i = 0; i < up.size(); ++i) d[i] += up[i] * (1.0 - sig[i]);
        };
    }
    return Tensor(out);
}

// Row-wise softmax over the last dimension (1-D tensors are a single row).
inline Tensor softmax(const Tensor& x) {
    auto out = detail::make_node(x.shape(), Op::Softmax, {x.node()});
    const size_t rows = x.rows(), cols = x.cols();
    for (size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * cols;
        double* y = out->data.data() + r * cols;
        double mx = in[0];
        for (size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(in[j] - mx);
            sum += y[j];
        }
        for (size_t j = 0; j < cols; ++j) y[j] /= sum;
    }
    if (out->requires_grad) {
        out->backward_fn = [rows, cols, outw = std::weak_ptr<TensorNode>(out)](
                               const std::vector<double>& up, const ParentBuf& pbuf) {
            auto o = outw.lock();
            std::vector<double>& d = pbuf(0);
            for (size_t r = 0; r < rows; ++r) {
                const double* y = o->data.data() + r * cols;
                const double* g = up.data() + r * cols;
                double dot = 0.0;
                for (size_t j = 0; j < cols; ++j) dot += y[j] * g[j];
                double* dr = d.data() + r * cols;
                for (size_t j = 0; j < cols; ++j) dr[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return Tensor(out);
}

// Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps). No gain term.
inline Tensor rms_norm(const Tensor& x, double eps = 1e-6) {
    auto out = detail::make_node(x.shape(), Op::RmsNorm, {x.node()});
    const size_t rows = x.rows(), cols = x.cols();
    std::vector<double> rms(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * cols;
        double ms = 0.0;
        for (size_t j = 0; j < cols; ++j) ms += in[j] * in[j];
        rms[r] = std::sqrt(ms / static_cast<double>(cols) + eps);
        double* y = out->data.data() + r * cols;
        for (size_t j = 0; j < cols; ++j) y[j] = in[j] / rms[r];
    }
    if (out->requires_grad) {
        auto xn = x.node();
        out->backward_fn = [xn, rows, cols, rms = std::move(rms)](const std::vector<double>& up,
                                                                  const ParentBuf& pbuf) {
            std::vector<double>& d = pbuf(0);
            for (size_t r = 0; r < rows; ++r) {
                const double* in = xn->data.data() + r * cols;
                const double* g = up.data() + r * cols;
                double dot = 0.0;
                for (size_t j = 0; j < cols; ++j) dot += g[j] * in[j];
                const double r1 = rms[r];
                const double c = dot / (static_cast<double>(cols) * r1 * r1 * r1);
                double* dr = d.data() + r * cols;
                for (size_t j = 0; j < cols; ++j) dr[j] += g[j] / r1 - in[j] * c;
            }
        };
    }
    return Tensor(out);
}

// Rows of `table` gathered by token id: [V x d], ids -> [T x d].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    detail::check_matrix(Op::Embedding, table);
    const size_t v = table.shape()[0], d = table.shape()[1];
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= v) {
            throw std::invalid_argument(std::string(op_name(Op::Embedding)) + ": token id " +
                                        std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(v));
        }
    }
    auto out = detail::make_node({ids.size(), d}, Op::Embedding, {table.node()});
    for (size_t t = 0; t < ids.size(); ++t) {
        const double* src = table.data().data() + static_cast<size_t>(ids[t]) * d;
        std::copy(src, src + d, out->data.data() + t * d);
    }
    if (out->requires_grad) {
        out->backward_fn = [ids, d](const std::vector<double>& up, const ParentBuf& pbuf) {
            std::vector<double>& dt = pbuf(0);
            for (size_t t = 0; t < ids.size(); ++t) {
                double* dst = dt.data() + static_cast<size_t>(ids[t]) * d;
                const double* g = up.data() + t * d;
                for (size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
    }
    return Tensor(out);
}

// Mean over rows [row_begin, row_end) of a [T x d] tensor -> [1 x d].
inline Tensor mean_pool_rows(const Tensor& x, size_t row_begin, size_t row_end) {
    detail::check_matrix(Op::MeanPool, x);
    const size_t rows = x.shape()[0], d = x.shape()[1];
    if (row_begin >= row_end || row_end > rows) {
        throw std::invalid_argument(std::string(op_name(Op::MeanPool)) + ": bad row range [" +
                                    std::to_string(row_begin) + ", " + std::to_string(row_end) +
                                    ") for " + shape_str(x.shape()));
    }
    auto out = detail::make_node({1, d}, Op::MeanPool, {x.node()});
    const double inv = 1.0 / static_cast<double>(row_end - row_begin);
    for (size_t r = row_begin; r < row_end; ++r) {
        const double* in = x.data().data() + r * d;
        for (size_t j = 0; j < d; ++j) out->data[j] += in[j] * inv;
    }
    if (out->requires_grad) {
        out->backward_fn = [row_begin, row_end, d, inv](const std::vector<double>& up,
                                                        const ParentBuf& pbuf) {
            std::vector<double>& dx = pbuf(0);
            for (size_t r = row_begin; r < row_end; ++r) {
                double* dr = dx.data() + r * d;
                for (size_t j = 0; j < d; ++j) dr[j] += up[j] * inv;
            }
        };
    }
    return Tensor(out);
}

// Column-wise concatenation of same-height matrices.
inline Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const size_t rows = xs[0].shape().size() == 2 ? xs[0].shape()[0] : 0;
    size_t total = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    for (const auto& x : xs) {
        detail::check_matrix(Op::Concat, x);
        if (x.shape()[0] != rows) {
            throw std::invalid_argument(std::string(op_name(Op::Concat)) + ": shape mismatch " +
                                        shape_str(xs[0].shape()) + " vs " + shape_str(x.shape()));
        }
        total += x.shape()[1];
        parents.push_back(x.node());
    }
    std::vector<size_t> widths;
    for (const auto& x : xs) widths.push_back(x.shape()[1]);
    auto out = detail::make_node({rows, total}, Op::Concat, parents);
    size_t off = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const size_t w = widths[i];
        for (size_t r = 0; r < rows; ++r) {
            const double* src = xs[i].data().data() + r * w;
            std::copy(src, src + w, out->data.data() + r * total + off);
        }
        off += w;
    }
    if (out->requires_grad) {
        out->backward_fn = [rows, total, widths, outw = std::weak_ptr<TensorNode>(out)](
                               const std::vector<double>& up, const ParentBuf& pbuf) {
            auto o = outw.lock();
            size_t off = 0;
            for (size_t i = 0; i < widths.size(); ++i) {
                const size_t w = widths[i];
                if (o->parents[i]->requires_grad) {
                    std::vector<double>& d = pbuf(i);
                    for (size_t r = 0; r < rows; ++r) {
                        const double* g = up.data() + r * total + off;
                        double* dr = d.data() + r * w;
                        for (size_t j = 0; j < w; ++j) dr[j] += g[j];
                    }
                }
                off += w;
            }
        };
    }
    return Tensor(out);
}

inline Tensor scale(const Tensor& x, double c) {
    auto out = detail::make_node(x.shape(), Op::Scale, {x.node()});
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x.data()[i] * c;
    if (out->requires_grad) {
        out->backward_fn = [c](const std::vector<double>& up, const ParentBuf& pbuf) {
            std::vector<double>& d = pbuf(0);
            for (size_t i = 0; i < up.size(); ++i) d[i] += up[i] * c;
        };
    }
    return Tensor(out);
}

enum class Reduce { Sum, Mean };

// Fused softmax + negative log-likelihood. logits is [V] or [T x V];
// targets has one token id per logits row. Gradient per row is
// coeff * (softmax(row) - onehot(target)).
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                                    Reduce reduce = Reduce::Mean) {
    const size_t rows = logits.rows(), v = logits.cols();
    if (v < 2) {
        throw std::invalid_argument("softmax-cross-entropy: need at least 2 classes, got " +
                                    std::to_string(v));
    }
    if (targets.size() != rows) {
        throw std::invalid_argument("softmax-cross-entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(rows) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || static_cast<size_t>(t) >= v) {
            throw std::invalid_argument("softmax-cross-entropy: target " + std::to_string(t) +
                                        " out of range [0, " + std::to_string(v) + ")");
        }
    }
    auto out = detail::make_node({1}, Op::CrossEntropy, {logits.node()});
    std::vector<double> soft(rows * v);
    double loss = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        const double* in = logits.data().data() + r * v;
        double* s = soft.data() + r * v;
        double mx = in[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (size_t j = 0; j < v; ++j) {
            s[j] = std::exp(in[j] - mx);
            sum += s[j];
        }
        for (size_t j = 0; j < v; ++j) s[j] /= sum;
        loss += mx + std::log(sum) - in[targets[r]];  // logsumexp - logit[target]
    }
    const double coeff = reduce == Reduce::Mean ? 1.0 / static_cast<double>(rows) : 1.0;
    out->data[0] = loss * coeff;
    if (out->requires_grad) {
        out->backward_fn = [targets, rows, v, coeff, soft = std::move(soft)](
                               const std::vector<double>& up, const ParentBuf& pbuf) {
            std::vector<double>& d = pbuf(0);
            const double g = up[0] * coeff;
            for (size_t r = 0; r < rows; ++r) {
                const double* s = soft.data() + r * v;
                double* dr = d.data() + r * v;
                for (size_t j = 0; j < v; ++j) dr[j] += g * s[j];
                dr[targets[r]] -= g;
            }
        };
    }
    return Tensor(out);
}

// Sum of log softmax(logits[position])[target] over the given positions;
// the building block for sequence log-probabilities.
inline Tensor gather_log_softmax(const Tensor& logits, const std::vector<size_t>& positions,
                                 const std::vector<int>& targets) {
    detail::check_matrix(Op::LogProbGather, logits);
    const size_t rows = logits.shape()[0], v = logits.shape()[1];
    if (positions.size() != targets.size() || positions.empty()) {
        throw std::invalid_argument("logprob-gather: positions/targets size mismatch");
    }
    for (size_t p : positions) {
        if (p >= rows) {
            throw std::invalid_argument("logprob-gather: position " + std::to_string(p) +
                                        " outside " + shape_str(logits.shape()));
        }
    }
    auto out = detail::make_node({1}, Op::LogProbGather, {logits.node()});
    std::vector<double> soft(positions.size() * v);
    double total = 0.0;
    for (size_t i = 0; i < positions.size(); ++i) {
        const double* in = logits.data().data() + positions[i] * v;
        double* s = soft.data() + i * v;
        double mx = in[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (size_t j = 0; j < v; ++j) {
            s[j] = std::exp(in[j] - mx);
            sum += s[j];
        }
        for (size_t j = 0; j < v; ++j) s[j] /= sum;
        total += in[targets[i]] - mx - std::log(sum);
    }
    out->data[0] = total;
    if (out->requires_grad) {
        out->backward_fn = [positions, targets, v, soft = std::move(soft)](
                               const std::vector<double>& up, const ParentBuf& pbuf) {
            std::vector<double>& d = pbuf(0);
            const double g = up[0];
            for (size_t i = 0; i < positions.size(); ++i) {
                const double* s = soft.data() + i * v;
                double* dr = d.data() + positions[i] * v;
                for (size_t j = 0; j < v; ++j) dr[j] -= g * s[j];
                dr[targets[i]] += g;
            }
        };
    }
    return Tensor(out);
}

// ------------------------------------------------- finite-difference oracle

// Max over coordinates of |analytic - central difference| relative error.
// f must be a pure scalar function of x; it is re-invoked 2*numel times.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                      const Tensor& x, double step = 1e-5) {
    if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");

    Tensor probe = Tensor::from(x.shape(), x.data(), /*requires_grad=*/true);
    Tensor loss = f(probe);
    const double base = loss.value();
    if (!std::isfinite(base)) {
        throw std::invalid_argument("finite_difference_check: f(x) is not finite");
    }
    loss.backward();
    std::vector<double> analytic(probe.numel(), 0.0);
    if (probe.has_grad()) analytic = probe.grad();

    double worst = 0.0;
    Tensor frozen = Tensor::from(x.shape(), x.data(), /*requires_grad=*/false);
    for (size_t i = 0; i < frozen.numel(); ++i) {
        const double saved = frozen.data()[i];
        frozen.data()[i] = saved + step;
        const double hi = f(frozen).value();
        frozen.data()[i] = saved - step;
        const double lo = f(frozen).value();
        frozen.data()[i] = saved;
        const double central = (hi - lo) / (2.0 * step);
        const double err =
            std::fabs(analytic[i] - central) / (std::fabs(analytic[i]) + std::fabs(central) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace toxlab
