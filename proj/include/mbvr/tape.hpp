#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mbvr/tensor.hpp"

namespace mbvr {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
    Var() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::size_t index() const { return idx_; }

    const Tensor& value() const;
    const std::vector<std::size_t>& shape() const { return value().shape(); }
    double item() const { return value().item(); }

private:
    friend class Tape;
    Var(Tape* t, std::size_t i) : tape_(t), idx_(i) {}

    Tape* tape_ = nullptr;
    std::size_t idx_ = 0;
};

// Reverse-mode gradient tape. Operations append nodes; gradients() walks the
// node list backwards once, in reverse topological order (append order is a
// topological order by construction). One tape per training step, single
// threaded; independent tapes are fully isolated.
class Tape {
public:
    // self is the node's own index, so backwards can read their stored output.
    using BackwardFn = std::function<void(Tape&, std::size_t self, const Tensor& gout,
                                          std::vector<Tensor>& grads)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf carrying input data or parameters.
    Var leaf(Tensor value) { return leaf(std::move(value), value.requires_grad); }
    Var leaf(Tensor value, bool requires_grad);

    // Leaf that never participates in differentiation.
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    const Tensor& value(std::size_t idx) const { return nodes_[idx].value; }
    bool requires_grad(std::size_t idx) const { return nodes_[idx].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // d(loss)/d(param) for every param, in order. loss must be scalar.
    // Params recorded on a different tape (or not at all) get zero gradients.
    std::vector<Tensor> gradients(const Var& loss, const std::vector<Var>& params);

    // --- op plumbing ---
    Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

    // Gradient buffer access for backward closures. Returns nullptr when the
    // target does not require grad, so hot loops can skip work.
    Tensor* grad_buf(std::vector<Tensor>& grads, std::size_t idx);
    void accumulate(std::vector<Tensor>& grads, std::size_t idx, const Tensor& g);

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        BackwardFn backward; // empty for leaves and constants
    };

    std::vector<Node> nodes_;
};

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var pow_scalar(const Var& a, double p);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_rowvec(const Var& a, const Var& v);
Var dot(const Var& a, const Var& b);
Var rowdot(const Var& a, const Var& b);

// ---- shape ----
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var gather_rows(const Var& a, std::vector<std::size_t> idx);
Var stack_rows(const std::vector<Var>& rows);
Var interleave_rows(const Var& a, const Var& b);
Var slice_cols(const Var& a, std::size_t c0, std::size_t c1);
Var concat_cols(const std::vector<Var>& parts);
Var pair_average(const Var& a);

// ---- reductions ----
Var sum(const Var& a);
Var mean_all(const Var& a);
Var mean_axis0(const Var& a);

// ---- softmax family (numerically stable, max-subtracted) ----
Var softmax(const Var& logits);
Var softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);

// ---- square-matrix helpers ----
Var take_diag(const Var& a);
Var sub_diag(const Var& a, const Var& d);

// ---- geometry ----
Var l2_normalize(const Var& v);
Var l2_normalize_rows(const Var& a);
Var cosine_similarity(const Var& a, const Var& b);

// ---- control ----
// Value pass-through with the gradient cut: downstream gradients treat the
// result as a constant.
Var detach(const Var& a);

// ---- 2-token attention blocks ----
// Rows come in consecutive pairs (2b, 2b+1). scores[r] = scale * (Q[r].K[2b], Q[r].K[2b+1])
Var block2_scores(const Var& q, const Var& k, double scale);
// out[r] = attn[r][0]*V[2b] + attn[r][1]*V[2b+1]
Var block2_apply(const Var& attn, const Var& v);

// ---- token embedding average (query/text head front end) ----
// out[i] = mean over t in lists[i] of emb[t, :]
Var avg_token_embed(const Var& emb, const std::vector<std::vector<std::uint32_t>>& lists);

} // namespace mbvr
