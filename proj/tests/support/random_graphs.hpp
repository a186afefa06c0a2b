#pragma once

// Random computation-graph plans for gradient checking. A plan is generated
// once and can be rebuilt on fresh tapes, which is what the finite-difference
// oracle needs: the same forward function evaluated at perturbed leaves.
//
// Detached steps are frozen at their base-point values during FD replay, so
// the oracle differentiates the forward function "with the detached scalar
// held constant" while the perturbed forward path still flows everywhere else.

#include <optional>
#include <vector>

#include "mbvr/rng.hpp"
#include "mbvr/tape.hpp"

namespace testsup {

struct GraphPlan {
    enum Op {
        kTanh, kSigmoid, kNeg, kMulScalar, kAddScalar, kExpBounded,
        kSoftmaxRows, kLseRows, kL2Rows,
        kAdd, kSub, kMul, kMatmul, kRowdot, kTranspose, kDetach
    };

    struct Step {
        Op op;
        std::size_t a = 0;
        std::size_t b = 0;
        double c = 0.0;
    };

    std::vector<std::vector<std::size_t>> leaf_shapes;
    std::vector<Step> steps;

    struct Built {
        mbvr::Var loss;
        std::vector<mbvr::Var> leaves;
        std::vector<mbvr::Tensor> detach_values; // base-point values of detach steps
    };

    bool has_detach() const {
        for (const Step& s : steps)
            if (s.op == kDetach) return true;
        return false;
    }

    Built build(mbvr::Tape& tape, const std::vector<mbvr::Tensor>& leaf_values,
                const std::vector<mbvr::Tensor>* frozen_detach = nullptr) const {
        Built out;
        std::vector<mbvr::Var> values;
        for (std::size_t i = 0; i < leaf_values.size(); ++i) {
            mbvr::Var v = tape.leaf(leaf_values[i], true);
            values.push_back(v);
            out.leaves.push_back(v);
        }
        std::size_t detach_seen = 0;
        for (const Step& s : steps) {
            const mbvr::Var& a = values[s.a];
            mbvr::Var v;
            switch (s.op) {
                case kTanh: v = mbvr::tanh(a); break;
                case kSigmoid: v = mbvr::sigmoid(a); break;
                case kNeg: v = mbvr::neg(a); break;
                case kMulScalar: v = mbvr::mul_scalar(a, s.c); break;
                case kAddScalar: v = mbvr::add_scalar(a, s.c); break;
                case kExpBounded: v = mbvr::exp(mbvr::tanh(a)); break;
                case kSoftmaxRows: v = mbvr::softmax_rows(a); break;
                case kLseRows: {
                    mbvr::Var r = mbvr::logsumexp_rows(a);
                    v = mbvr::reshape(r, {r.value().numel(), 1});
                    break;
                }
                case kL2Rows:
                    // keep rows away from zero so the normalize domain holds
                    v = mbvr::l2_normalize_rows(mbvr::add_scalar(mbvr::tanh(a), 1.5));
                    break;
                case kAdd: v = mbvr::add(a, values[s.b]); break;
                case kSub: v = mbvr::sub(a, values[s.b]); break;
                case kMul: v = mbvr::mul(a, values[s.b]); break;
                case kMatmul:
                    v = mbvr::mul_scalar(mbvr::matmul(a, values[s.b]), s.c);
                    break;
                case kRowdot: {
                    mbvr::Var r = mbvr::rowdot(a, values[s.b]);
                    v = mbvr::reshape(r, {r.value().numel(), 1});
                    break;
                }
                case kTranspose: v = mbvr::transpose(a); break;
                case kDetach: {
                    if (frozen_detach) {
                        v = tape.constant((*frozen_detach)[detach_seen]);
                    } else {
                        v = mbvr::detach(a);
                        out.detach_values.push_back(a.value());
                    }
                    ++detach_seen;
                    break;
                }
            }
            values.push_back(v);
        }
        // every value participates in the loss, so each op's backward runs
        mbvr::Var loss = mbvr::mean_all(values[0]);
        for (std::size_t i = 1; i < values.size(); ++i) {
            loss = mbvr::add(loss, mbvr::mean_all(values[i]));
        }
        out.loss = loss;
        return out;
    }

    static GraphPlan random(mbvr::Rng& rng, std::size_t depth, bool allow_detach) {
        GraphPlan plan;
        auto dim = [&] { return 1 + rng.uniform_int(6); };
        std::size_t n_leaves = 1 + rng.uniform_int(3);
        std::vector<std::vector<std::size_t>> shapes;
        for (std::size_t i = 0; i < n_leaves; ++i) {
            plan.leaf_shapes.push_back({dim(), dim()});
            shapes.push_back(plan.leaf_shapes.back());
        }
        for (std::size_t d = 0; d < depth; ++d) {
            // try a few times to find a feasible op, else default to tanh
            Step s;
            bool placed = false;
            for (int attempt = 0; attempt < 12 && !placed; ++attempt) {
                int op = static_cast<int>(rng.uniform_int(allow_detach ? 16 : 15));
                s.op = static_cast<Op>(op);
                s.a = rng.uniform_int(shapes.size());
                const auto& sa = shapes[s.a];
                switch (s.op) {
                    case kTanh: case kSigmoid: case kNeg: case kExpBounded:
                    case kSoftmaxRows: case kL2Rows: case kDetach:
                        placed = true;
                        shapes.push_back(sa);
                        break;
                    case kMulScalar:
                        s.c = rng.uniform(-1.5, 1.5);
                        placed = true;
                        shapes.push_back(sa);
                        break;
                    case kAddScalar:
                        s.c = rng.uniform(-1.0, 1.0);
                        placed = true;
                        shapes.push_back(sa);
                        break;
                    case kLseRows:
                        placed = true;
                        shapes.push_back({sa[0], 1});
                        break;
                    case kTranspose:
                        placed = true;
                        shapes.push_back({sa[1], sa[0]});
                        break;
                    case kAdd: case kSub: case kMul: case kRowdot: {
                        // need a same-shape partner
                        std::vector<std::size_t> cands;
                        for (std::size_t i = 0; i < shapes.size(); ++i)
                            if (shapes[i] == sa) cands.push_back(i);
                        if (cands.empty()) break;
                        s.b = cands[rng.uniform_int(cands.size())];
                        placed = true;
                        shapes.push_back(s.op == kRowdot
                                             ? std::vector<std::size_t>{sa[0], 1}
                                             : sa);
                        break;
                    }
                    case kMatmul: {
                        std::vector<std::size_t> cands;
                        for (std::size_t i = 0; i < shapes.size(); ++i)
                            if (shapes[i][0] == sa[1]) cands.push_back(i);
                        if (cands.empty()) break;
                        s.b = cands[rng.uniform_int(cands.size())];
                        s.c = 1.0 / std::sqrt(static_cast<double>(sa[1]));
                        placed = true;
                        shapes.push_back({sa[0], shapes[s.b][1]});
                        break;
                    }
                }
            }
            if (!placed) {
                s.op = kTanh;
                s.a = rng.uniform_int(shapes.size());
                shapes.push_back(shapes[s.a]);
            }
            plan.steps.push_back(s);
        }
        return plan;
    }
};

inline std::vector<mbvr::Tensor> random_leaves(const GraphPlan& plan, mbvr::Rng& rng) {
    std::vector<mbvr::Tensor> out;
    for (const auto& shape : plan.leaf_shapes) {
        mbvr::Tensor t(shape);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian();
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace testsup
