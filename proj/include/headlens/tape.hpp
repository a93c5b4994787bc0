#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "headlens/tensor.hpp"

namespace headlens::ad {

// Pass-count instrumentation shared by every tape. Tests reset it, run a
// workload, and read back exact counts.
struct PassStats {
    std::atomic<uint64_t> backward_passes{0};
};

inline PassStats &pass_stats() {
    static PassStats s;
    return s;
}

inline void reset_pass_stats() { pass_stats().backward_passes.store(0); }

enum class Op {
    Leaf,
    Add,
    Mul,
    Matmul,
    Embedding,
    RmsNorm,
    Rope,
    AttnScores,   // batched per-head Q.K^T with causal layout
    CausalSoftmax,
    AttnMix,      // batched per-head P.V
    HeadScale,    // per-head scalar broadcast over a head slice
    Silu,
    Sum,
    CrossEntropy,
};

inline const char *op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Matmul: return "matmul";
        case Op::Embedding: return "embedding";
        case Op::RmsNorm: return "rms_norm";
        case Op::Rope: return "rope";
        case Op::AttnScores: return "attn_scores";
        case Op::CausalSoftmax: return "causal_softmax";
        case Op::AttnMix: return "attn_mix";
        case Op::HeadScale: return "head_scale";
        case Op::Silu: return "silu";
        case Op::Sum: return "sum";
        case Op::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

// Reverse-mode tape over the fixed primitive set needed by the transformer.
// Values are computed eagerly as nodes are appended; backward() replays the
// tape in reverse. Single-threaded per tape; independent tapes may run
// concurrently on disjoint data.
template <typename S>
class Tape {
  public:
    explicit Tape(bool strict_finite = false) : strict_finite_(strict_finite) {}

    void set_strict_finite(bool on) { strict_finite_ = on; }

    int leaf(TensorT<S> value, bool requires_grad = false) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    // Leaf bound to a Parameter: after backward() the leaf gradient is
    // accumulated into the parameter's grad buffer.
    int param(ParameterT<S> &p) {
        Node n;
        n.op = Op::Leaf;
        n.value = p.value;
        n.requires_grad = true;
        n.bound = &p;
        return push(std::move(n));
    }

    int add(int a, int b) {
        require_same_shape(a, b, Op::Add);
        Node n = binary(Op::Add, a, b);
        n.value = TensorT<S>(nodes_[a].value.shape);
        const auto &av = nodes_[a].value.data;
        const auto &bv = nodes_[b].value.data;
        for (size_t i = 0; i < av.size(); ++i) n.value.data[i] = av[i] + bv[i];
        return push(std::move(n));
    }

    int mul(int a, int b) {
        require_same_shape(a, b, Op::Mul);
        Node n = binary(Op::Mul, a, b);
        n.value = TensorT<S>(nodes_[a].value.shape);
        const auto &av = nodes_[a].value.data;
        const auto &bv = nodes_[b].value.data;
        for (size_t i = 0; i < av.size(); ++i) n.value.data[i] = av[i] * bv[i];
        return push(std::move(n));
    }

    int matmul(int a, int b) {
        const auto &ta = nodes_[a].value;
        const auto &tb = nodes_[b].value;
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
            fail_shape(Op::Matmul, a, b);
        }
        Node n = binary(Op::Matmul, a, b);
        n.value = TensorT<S>({ta.dim(0), tb.dim(1)});
        matmul_acc(ta.data.data(), tb.data.data(), n.value.data.data(), ta.dim(0), ta.dim(1), tb.dim(1));
        return push(std::move(n));
    }

    // Gather rows of table by token id. Backward is a scatter-add.
    int embedding(int table, std::vector<int> ids) {
        const auto &tv = nodes_[table].value;
        check_contract(tv.rank() == 2, std::string("embedding: table must be rank 2, got ") + shape_str(tv));
        const int d = tv.dim(1);
        for (int id : ids) {
            check_contract(id >= 0 && id < tv.dim(0), "embedding: token id " + std::to_string(id) + " out of range");
        }
        Node n = unary(Op::Embedding, table);
        n.ids = std::move(ids);
        n.value = TensorT<S>({static_cast<int>(n.ids.size()), d});
        for (size_t t = 0; t < n.ids.size(); ++t) {
            const S *src = tv.data.data() + static_cast<size_t>(n.ids[t]) * d;
            S *dst = n.value.data.data() + t * d;
            for (int c = 0; c < d; ++c) dst[c] = src[c];
        }
        return push(std::move(n));
    }

    int rms_norm(int x, int gain, S eps) {
        const auto &xv = nodes_[x].value;
        const auto &gv = nodes_[gain].value;
        if (xv.rank() != 2 || gv.numel() != xv.dim(1)) fail_shape(Op::RmsNorm, x, gain);
        Node n = binary(Op::RmsNorm, x, gain);
        n.scalar0 = eps;
        const int rows = xv.dim(0), d = xv.dim(1);
        n.value = TensorT<S>({rows, d});
        n.aux.resize(static_cast<size_t>(rows));
        for (int i = 0; i < rows; ++i) {
            const S *xr = xv.data.data() + static_cast<size_t>(i) * d;
            S ms = 0;
            for (int c = 0; c < d; ++c) ms += xr[c] * xr[c];
            ms /= static_cast<S>(d);
            const S r = S(1) / std::sqrt(ms + eps);
            n.aux[static_cast<size_t>(i)] = r;
            S *yr = n.value.data.data() + static_cast<size_t>(i) * d;
            for (int c = 0; c < d; ++c) yr[c] = xr[c] * r * gv.data[static_cast<size_t>(c)];
        }
        return push(std::move(n));
    }

    // Rotary position embedding on [T, n_heads*d_head]; rotation angle depends
    // on the row index (= position).
    int rope(int x, int n_heads, int d_head) {
        const auto &xv = nodes_[x].value;
        if (xv.rank() != 2 || xv.dim(1) != n_heads * d_head || d_head % 2 != 0) fail_shape(Op::Rope, x, -1);
        Node n = unary(Op::Rope, x);
        n.i0 = n_heads;
        n.i1 = d_head;
        n.value = xv;
        apply_rope(n.value, n_heads, d_head, /*inverse=*/false);
        return push(std::move(n));
    }

    // Raw attention logits: scores[h,i,j] = scale * <q_i(h), k_j(kv(h))> for
    // j <= i. Entries above the diagonal are never written or read.
    int attn_scores(int q, int k, int n_heads, int n_kv_groups, S scale) {
        const auto &qv = nodes_[q].value;
        const auto &kv = nodes_[k].value;
        const int T = qv.dim(0);
        const int dh = qv.dim(1) / n_heads;
        if (qv.rank() != 2 || kv.rank() != 2 || kv.dim(0) != T || qv.dim(1) != n_heads * dh ||
            kv.dim(1) != n_kv_groups * dh || n_heads % n_kv_groups != 0) {
            fail_shape(Op::AttnScores, q, k);
        }
        Node n = binary(Op::AttnScores, q, k);
        n.i0 = n_heads;
        n.i1 = n_kv_groups;
        n.scalar0 = scale;
        n.value = TensorT<S>({n_heads, T, T});
        const int group_size = n_heads / n_kv_groups;
        for (int h = 0; h < n_heads; ++h) {
            const int g = h / group_size;
            S *sh = n.value.data.data() + static_cast<size_t>(h) * T * T;
            for (int i = 0; i < T; ++i) {
                const S *qi = qv.data.data() + static_cast<size_t>(i) * qv.dim(1) + static_cast<size_t>(h) * dh;
                for (int j = 0; j <= i; ++j) {
                    const S *kj = kv.data.data() + static_cast<size_t>(j) * kv.dim(1) + static_cast<size_t>(g) * dh;
                    S dot = 0;
                    for (int c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    sh[static_cast<size_t>(i) * T + j] = dot * scale;
                }
            }
        }
        return push(std::move(n));
    }

    // Row softmax over the causal prefix; masked (future) entries are exact
    // zeros in the output.
    int causal_softmax(int scores) {
        const auto &sv = nodes_[scores].value;
        check_contract(sv.rank() == 3, std::string("causal_softmax: expected [H,T,T], got ") + shape_str(sv));
        const int H = sv.dim(0), T = sv.dim(1);
        Node n = unary(Op::CausalSoftmax, scores);
        n.value = TensorT<S>({H, T, T});
        for (int h = 0; h < H; ++h) {
            const S *sh = sv.data.data() + static_cast<size_t>(h) * T * T;
            S *ph = n.value.data.data() + static_cast<size_t>(h) * T * T;
            for (int i = 0; i < T; ++i) {
                const S *row = sh + static_cast<size_t>(i) * T;
                S *out = ph + static_cast<size_t>(i) * T;
                S mx = row[0];
                for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
                S z = 0;
                for (int j = 0; j <= i; ++j) {
                    const S e = det_exp(row[j] - mx);
                    out[j] = e;
                    z += e;
                }
                const S inv = S(1) / z;
                for (int j = 0; j <= i; ++j) out[j] *= inv;
            }
        }
        return push(std::move(n));
    }

    int attn_mix(int probs, int v, int n_heads, int n_kv_groups) {
        const auto &pv = nodes_[probs].value;
        const auto &vv = nodes_[v].value;
        const int T = pv.dim(1);
        const int dh = vv.dim(1) / n_kv_groups;
        if (pv.rank() != 3 || pv.dim(0) != n_heads || vv.dim(0) != T || vv.dim(1) != n_kv_groups * dh) {
            fail_shape(Op::AttnMix, probs, v);
        }
        Node n = binary(Op::AttnMix, probs, v);
        n.i0 = n_heads;
        n.i1 = n_kv_groups;
        n.value = TensorT<S>({T, n_heads * dh});
        const int group_size = n_heads / n_kv_groups;
        for (int h = 0; h < n_heads; ++h) {
            const int g = h / group_size;
            const S *ph = pv.data.data() + static_cast<size_t>(h) * T * T;
            for (int i = 0; i < T; ++i) {
                S *orow = n.value.data.data() + static_cast<size_t>(i) * (n_heads * dh) + static_cast<size_t>(h) * dh;
                for (int j = 0; j <= i; ++j) {
                    const S p = ph[static_cast<size_t>(i) * T + j];
                    const S *vrow = vv.data.data() + static_cast<size_t>(j) * vv.dim(1) + static_cast<size_t>(g) * dh;
                    for (int c = 0; c < dh; ++c) orow[c] += p * vrow[c];
                }
            }
        }
        return push(std::move(n));
    }

    // Multiplies head slice i of x by scales[row, i]. The gradient w.r.t. a
    // scale entry is the inner product of that head's output slice with the
    // upstream gradient of the gated slice.
    int head_scale(int x, int scales, int row, int n_heads) {
        const auto &xv = nodes_[x].value;
        const auto &sv = nodes_[scales].value;
        if (xv.rank() != 2 || sv.rank() != 2 || sv.dim(1) != n_heads || row < 0 || row >= sv.dim(0) ||
            xv.dim(1) % n_heads != 0) {
            fail_shape(Op::HeadScale, x, scales);
        }
        Node n = binary(Op::HeadScale, x, scales);
        n.i0 = row;
        n.i1 = n_heads;
        const int T = xv.dim(0), dh = xv.dim(1) / n_heads;
        n.value = TensorT<S>({T, xv.dim(1)});
        for (int t = 0; t < T; ++t) {
            const S *xr = xv.data.data() + static_cast<size_t>(t) * xv.dim(1);
            S *yr = n.value.data.data() + static_cast<size_t>(t) * xv.dim(1);
            for (int h = 0; h < n_heads; ++h) {
                const S s = sv.at2(row, h);
                for (int c = 0; c < dh; ++c) yr[h * dh + c] = xr[h * dh + c] * s;
            }
        }
        return push(std::move(n));
    }

    int silu(int x) {
        Node n = unary(Op::Silu, x);
        const auto &xv = nodes_[x].value;
        n.value = TensorT<S>(xv.shape);
        for (size_t i = 0; i < xv.data.size(); ++i) {
            const S v = xv.data[i];
            n.value.data[i] = v / (S(1) + det_exp(-v));
        }
        return push(std::move(n));
    }

    // Sum of all entries (ascending index).
    int sum(int x) {
        Node n = unary(Op::Sum, x);
        const auto &xv = nodes_[x].value;
        S total = 0;
        for (S v : xv.data) total += v;
        n.value = TensorT<S>({1});
        n.value.data[0] = total;
        return push(std::move(n));
    }

    // Mean negative log-likelihood over rows whose target id is >= 0.
    int cross_entropy(int logits, std::vector<int> targets) {
        const auto &lv = nodes_[logits].value;
        check_contract(lv.rank() == 2 && static_cast<int>(targets.size()) == lv.dim(0),
                       std::string("cross_entropy: logits ") + shape_str(lv) + " vs " +
                           std::to_string(targets.size()) + " targets");
        const int T = lv.dim(0), V = lv.dim(1);
        int counted = 0;
        for (int t : targets) {
            check_contract(t < V, "cross_entropy: target id out of range");
            if (t >= 0) ++counted;
        }
        check_contract(counted > 0, "cross_entropy: no predicted positions");
        Node n = unary(Op::CrossEntropy, logits);
        n.ids = std::move(targets);
        n.aux.resize(static_cast<size_t>(T));
        double total = 0;  // double accumulation keeps the mean NLL accurate
        for (int i = 0; i < T; ++i) {
            const S *row = lv.data.data() + static_cast<size_t>(i) * V;
            S mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            S z = 0;
            for (int j = 0; j < V; ++j) z += det_exp(row[j] - mx);
            const S lse = mx + std::log(z);
            n.aux[static_cast<size_t>(i)] = lse;
            if (n.ids[static_cast<size_t>(i)] >= 0) {
                total += static_cast<double>(lse) - static_cast<double>(row[n.ids[static_cast<size_t>(i)]]);
            }
        }
        n.i0 = counted;
        n.value = TensorT<S>({1});
        n.value.data[0] = static_cast<S>(total / counted);
        return push(std::move(n));
    }

    const TensorT<S> &value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    // Gradient of the last backward() target w.r.t. node id.
    const TensorT<S> &grad(int id) const {
        const Node &n = nodes_[static_cast<size_t>(id)];
        check_contract(!n.grad.data.empty(), "grad: node received no gradient");
        return n.grad;
    }

    // Reverse pass from a scalar loss. seed scales the upstream gradient
    // (used to fold 1/batch into per-sequence backprop). Bound parameters
    // receive their leaf gradients.
    void backward(int loss, S seed = S(1)) {
        Node &ln = nodes_[static_cast<size_t>(loss)];
        check_contract(ln.value.is_scalar(), "backward: loss must be a scalar node");
        ensure_grad(static_cast<size_t>(loss));
        ln.grad.data[0] += seed;
        for (size_t idx = static_cast<size_t>(loss) + 1; idx-- > 0;) {
            Node &n = nodes_[idx];
            if (!n.requires_grad || n.grad.data.empty()) continue;
            backward_node(n);
        }
        for (Node &n : nodes_) {
            if (n.bound != nullptr && !n.grad.data.empty()) {
                for (size_t i = 0; i < n.grad.data.size(); ++i) n.bound->grad.data[i] += n.grad.data[i];
                if (strict_finite_ && !n.bound->grad.all_finite()) {
                    throw NumericError("backward: non-finite gradient for parameter " + n.bound->name);
                }
            }
        }
        pass_stats().backward_passes.fetch_add(1);
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Op op = Op::Leaf;
        int in0 = -1, in1 = -1;
        TensorT<S> value;
        TensorT<S> grad;
        bool requires_grad = false;
        int i0 = 0, i1 = 0;
        S scalar0 = S(0);
        std::vector<int> ids;     // token / target ids
        std::vector<S> aux;       // cached per-row statistics
        ParameterT<S> *bound = nullptr;
    };

    Node unary(Op op, int a) {
        Node n;
        n.op = op;
        n.in0 = a;
        n.requires_grad = nodes_[static_cast<size_t>(a)].requires_grad;
        return n;
    }

    Node binary(Op op, int a, int b) {
        Node n;
        n.op = op;
        n.in0 = a;
        n.in1 = b;
        n.requires_grad =
            nodes_[static_cast<size_t>(a)].requires_grad || nodes_[static_cast<size_t>(b)].requires_grad;
        return n;
    }

    int push(Node n) {
        if (strict_finite_ && !n.value.all_finite()) {
            throw NumericError(std::string("non-finite value produced by ") + op_name(n.op) + " node " +
                               std::to_string(nodes_.size()));
        }
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void require_same_shape(int a, int b, Op op) {
        if (!nodes_[static_cast<size_t>(a)].value.same_shape(nodes_[static_cast<size_t>(b)].value)) {
            fail_shape(op, a, b);
        }
    }

    [[noreturn]] void fail_shape(Op op, int a, int b) {
        std::string msg = std::string("shape mismatch in ") + op_name(op) + " node " + std::to_string(nodes_.size()) +
                          ": " + shape_str(nodes_[static_cast<size_t>(a)].value);
        if (b >= 0) msg += " vs " + shape_str(nodes_[static_cast<size_t>(b)].value);
        throw ContractError(msg);
    }

    void ensure_grad(size_t idx) {
        Node &n = nodes_[idx];
        if (n.grad.data.empty()) n.grad = TensorT<S>(n.value.shape);
    }

    TensorT<S> *input_grad(int id) {
        Node &n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return nullptr;
        ensure_grad(static_cast<size_t>(id));
        return &n.grad;
    }

    void apply_rope(TensorT<S> &x, int n_heads, int d_head, bool inverse) {
        const int T = x.dim(0);
        const int half = d_head / 2;
        std::vector<S> cos_tab(static_cast<size_t>(T) * half);
        std::vector<S> sin_tab(static_cast<size_t>(T) * half);
        for (int p = 0; p < half; ++p) {
            const double freq = std::pow(10000.0, -2.0 * p / d_head);
            for (int t = 0; t < T; ++t) {
                const double theta = (inverse ? -1.0 : 1.0) * t * freq;
                cos_tab[static_cast<size_t>(t) * half + p] = static_cast<S>(std::cos(theta));
                sin_tab[static_cast<size_t>(t) * half + p] = static_cast<S>(std::sin(theta));
            }
        }
        for (int t = 0; t < T; ++t) {
            S *row = x.data.data() + static_cast<size_t>(t) * x.dim(1);
            const S *ct = cos_tab.data() + static_cast<size_t>(t) * half;
            const S *st = sin_tab.data() + static_cast<size_t>(t) * half;
            for (int h = 0; h < n_heads; ++h) {
                S *hd = row + static_cast<size_t>(h) * d_head;
                for (int p = 0; p < half; ++p) {
                    const S x0 = hd[2 * p], x1 = hd[2 * p + 1];
                    hd[2 * p] = x0 * ct[p] - x1 * st[p];
                    hd[2 * p + 1] = x0 * st[p] + x1 * ct[p];
                }
            }
        }
    }

    void backward_node(Node &n) {
        const TensorT<S> &gy = n.grad;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add: {
                for (int src : {n.in0, n.in1}) {
                    if (TensorT<S> *g = input_grad(src)) {
                        for (size_t i = 0; i < gy.data.size(); ++i) g->data[i] += gy.data[i];
                    }
                }
                break;
            }
            case Op::Mul: {
                const auto &av = nodes_[static_cast<size_t>(n.in0)].value;
                const auto &bv = nodes_[static_cast<size_t>(n.in1)].value;
                if (TensorT<S> *ga = input_grad(n.in0)) {
                    for (size_t i = 0; i < gy.data.size(); ++i) ga->data[i] += gy.data[i] * bv.data[i];
                }
                if (TensorT<S> *gb = input_grad(n.in1)) {
                    for (size_t i = 0; i < gy.data.size(); ++i) gb->data[i] += gy.data[i] * av.data[i];
                }
                break;
            }
            case Op::Matmul: {
                const auto &av = nodes_[static_cast<size_t>(n.in0)].value;
                const auto &bv = nodes_[static_cast<size_t>(n.in1)].value;
                const int m = av.dim(0), k = av.dim(1), out = bv.dim(1);
                if (TensorT<S> *ga = input_grad(n.in0)) {
                    // dA = dC . B^T
                    std::vector<S> bt(static_cast<size_t>(k) * out);
                    transpose(bv.data.data(), bt.data(), k, out);
                    matmul_acc(gy.data.data(), bt.data(), ga->data.data(), m, out, k);
                }
                if (TensorT<S> *gb = input_grad(n.in1)) {
                    // dB = A^T . dC
                    std::vector<S> at(static_cast<size_t>(m) * k);
                    transpose(av.data.data(), at.data(), m, k);
                    matmul_acc(at.data(), gy.data.data(), gb->data.data(), k, m, out);
                }
                break;
            }
            case Op::Embedding: {
                if (TensorT<S> *gt = input_grad(n.in0)) {
                    const int d = gt->dim(1);
                    for (size_t t = 0; t < n.ids.size(); ++t) {
                        S *dst = gt->data.data() + static_cast<size_t>(n.ids[t]) * d;
                        const S *src = gy.data.data() + t * d;
                        for (int c = 0; c < d; ++c) dst[c] += src[c];
                    }
                }
                break;
            }
            case Op::RmsNorm: {
                const auto &xv = nodes_[static_cast<size_t>(n.in0)].value;
                const auto &gv = nodes_[static_cast<size_t>(n.in1)].value;
                const int rows = xv.dim(0), d = xv.dim(1);
                TensorT<S> *gx = input_grad(n.in0);
                TensorT<S> *gg = input_grad(n.in1);
                for (int i = 0; i < rows; ++i) {
                    const S r = n.aux[static_cast<size_t>(i)];
                    const S *xr = xv.data.data() + static_cast<size_t>(i) * d;
                    const S *dyr = gy.data.data() + static_cast<size_t>(i) * d;
                    if (gg != nullptr) {
                        for (int c = 0; c < d; ++c) gg->data[static_cast<size_t>(c)] += dyr[c] * xr[c] * r;
                    }
                    if (gx != nullptr) {
                        S dot = 0;
                        for (int c = 0; c < d; ++c) dot += dyr[c] * gv.data[static_cast<size_t>(c)] * xr[c];
                        const S coef = -r * r * r * dot / static_cast<S>(d);
                        S *gxr = gx->data.data() + static_cast<size_t>(i) * d;
                        for (int c = 0; c < d; ++c) {
                            gxr[c] += dyr[c] * gv.data[static_cast<size_t>(c)] * r + coef * xr[c];
                        }
                    }
                }
                break;
            }
            case Op::Rope: {
                if (TensorT<S> *gx = input_grad(n.in0)) {
                    TensorT<S> g = gy;
                    apply_rope(g, n.i0, n.i1, /*inverse=*/true);
                    for (size_t i = 0; i < g.data.size(); ++i) gx->data[i] += g.data[i];
                }
                break;
            }
            case Op::AttnScores: {
                const auto &qv = nodes_[static_cast<size_t>(n.in0)].value;
                const auto &kvv = nodes_[static_cast<size_t>(n.in1)].value;
                const int H = n.i0, G = n.i1;
                const int T = qv.dim(0), dh = qv.dim(1) / H;
                const int group_size = H / G;
                const S scale = n.scalar0;
                TensorT<S> *gq = input_grad(n.in0);
                TensorT<S> *gk = input_grad(n.in1);
                for (int h = 0; h < H; ++h) {
                    const int g = h / group_size;
                    const S *gs = gy.data.data() + static_cast<size_t>(h) * T * T;
                    for (int i = 0; i < T; ++i) {
                        const S *qi = qv.data.data() + static_cast<size_t>(i) * qv.dim(1) + static_cast<size_t>(h) * dh;
                        for (int j = 0; j <= i; ++j) {
                            const S gij = gs[static_cast<size_t>(i) * T + j] * scale;
                            if (gij == S(0)) continue;
                            const S *kj =
                                kvv.data.data() + static_cast<size_t>(j) * kvv.dim(1) + static_cast<size_t>(g) * dh;
                            if (gq != nullptr) {
                                S *gqi = gq->data.data() + static_cast<size_t>(i) * qv.dim(1) +
                                         static_cast<size_t>(h) * dh;
                                for (int c = 0; c < dh; ++c) gqi[c] += gij * kj[c];
                            }
                            if (gk != nullptr) {
                                S *gkj = gk->data.data() + static_cast<size_t>(j) * kvv.dim(1) +
                                         static_cast<size_t>(g) * dh;
                                for (int c = 0; c < dh; ++c) gkj[c] += gij * qi[c];
                            }
                        }
                    }
                }
                break;
            }
            case Op::CausalSoftmax: {
                if (TensorT<S> *gx = input_grad(n.in0)) {
                    const int H = n.value.dim(0), T = n.value.dim(1);
                    for (int h = 0; h < H; ++h) {
                        const S *ph = n.value.data.data() + static_cast<size_t>(h) * T * T;
                        const S *gh = gy.data.data() + static_cast<size_t>(h) * T * T;
                        S *oh = gx->data.data() + static_cast<size_t>(h) * T * T;
                        for (int i = 0; i < T; ++i) {
                            const S *prow = ph + static_cast<size_t>(i) * T;
                            const S *grow = gh + static_cast<size_t>(i) * T;
                            S dot = 0;
                            for (int j = 0; j <= i; ++j) dot += prow[j] * grow[j];
                            S *orow = oh + static_cast<size_t>(i) * T;
                            for (int j = 0; j <= i; ++j) orow[j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
                break;
            }
            case Op::AttnMix: {
                const auto &pv = nodes_[static_cast<size_t>(n.in0)].value;
                const auto &vv = nodes_[static_cast<size_t>(n.in1)].value;
                const int H = n.i0, G = n.i1;
                const int T = pv.dim(1), dh = vv.dim(1) / G;
                const int group_size = H / G;
                TensorT<S> *gp = input_grad(n.in0);
                TensorT<S> *gv = input_grad(n.in1);
                for (int h = 0; h < H; ++h) {
                    const int g = h / group_size;
                    const S *ph = pv.data.data() + static_cast<size_t>(h) * T * T;
                    for (int i = 0; i < T; ++i) {
                        const S *go = gy.data.data() + static_cast<size_t>(i) * (H * dh) + static_cast<size_t>(h) * dh;
                        for (int j = 0; j <= i; ++j) {
                            const S *vrow =
                                vv.data.data() + static_cast<size_t>(j) * vv.dim(1) + static_cast<size_t>(g) * dh;
                            if (gp != nullptr) {
                                S dot = 0;
                                for (int c = 0; c < dh; ++c) dot += go[c] * vrow[c];
                                gp->data[static_cast<size_t>(h) * T * T + static_cast<size_t>(i) * T + j] += dot;
                            }
                            if (gv != nullptr) {
                                const S p = ph[static_cast<size_t>(i) * T + j];
                                S *gvr = gv->data.data() + static_cast<size_t>(j) * vv.dim(1) +
                                         static_cast<size_t>(g) * dh;
                                for (int c = 0; c < dh; ++c) gvr[c] += p * go[c];
                            }
                        }
                    }
                }
                break;
            }
            case Op::HeadScale: {
                const auto &xv = nodes_[static_cast<size_t>(n.in0)].value;
                const auto &sv = nodes_[static_cast<size_t>(n.in1)].value;
                const int row = n.i0, H = n.i1;
                const int T = xv.dim(0), dh = xv.dim(1) / H;
                TensorT<S> *gx = input_grad(n.in0);
                TensorT<S> *gs = input_grad(n.in1);
                for (int t = 0; t < T; ++t) {
                    const S *xr = xv.data.data() + static_cast<size_t>(t) * xv.dim(1);
                    const S *dyr = gy.data.data() + static_cast<size_t>(t) * xv.dim(1);
                    for (int h = 0; h < H; ++h) {
                        if (gx != nullptr) {
                            const S s = sv.at2(row, h);
                            S *gxr = gx->data.data() + static_cast<size_t>(t) * xv.dim(1);
                            for (int c = 0; c < dh; ++c) gxr[h * dh + c] += dyr[h * dh + c] * s;
                        }
                        if (gs != nullptr) {
                            S dot = 0;
                            for (int c = 0; c < dh; ++c) dot += dyr[h * dh + c] * xr[h * dh + c];
                            gs->data[static_cast<size_t>(row) * H + h] += dot;
                        }
                    }
                }
                break;
            }
            case Op::Silu: {
                if (TensorT<S> *gx = input_grad(n.in0)) {
                    const auto &xv = nodes_[static_cast<size_t>(n.in0)].value;
                    for (size_t i = 0; i < xv.data.size(); ++i) {
                        const S v = xv.data[i];
                        const S sig = S(1) / (S(1) + det_exp(-v));
                        gx->data[i] += gy.data[i] * sig * (S(1) + v * (S(1) - sig));
                    }
                }
                break;
            }
            case Op::Sum: {
                if (TensorT<S> *gx = input_grad(n.in0)) {
                    const S g = gy.data[0];
                    for (size_t i = 0; i < gx->data.size(); ++i) gx->data[i] += g;
                }
                break;
            }
            case Op::CrossEntropy: {
                if (TensorT<S> *gl = input_grad(n.in0)) {
                    const auto &lv = nodes_[static_cast<size_t>(n.in0)].value;
                    const int T = lv.dim(0), V = lv.dim(1);
                    const S g = gy.data[0] / static_cast<S>(n.i0);
                    for (int i = 0; i < T; ++i) {
                        const int tgt = n.ids[static_cast<size_t>(i)];
                        if (tgt < 0) continue;
                        const S lse = n.aux[static_cast<size_t>(i)];
                        const S *row = lv.data.data() + static_cast<size_t>(i) * V;
                        S *grow = gl->data.data() + static_cast<size_t>(i) * V;
                        for (int j = 0; j < V; ++j) grow[j] += g * det_exp(row[j] - lse);
                        grow[tgt] -= g;
                    }
                }
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    bool strict_finite_;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace headlens::ad
