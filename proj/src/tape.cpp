#include "mbvr/tape.hpp"

#include <cmath>
#include <memory>

namespace mbvr {

const Tensor& Var::value() const {
    if (!tape_) throw std::invalid_argument("Var: null handle");
    return tape_->value(idx_);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    bool req = false;
    for (const Var& p : parents) {
        if (p.tape() != this) {
            throw std::invalid_argument("Tape: operand recorded on a different tape");
        }
        req = req || nodes_[p.index()].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = req;
    if (req) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_buf(std::vector<Tensor>& grads, std::size_t idx) {
    if (!nodes_[idx].requires_grad) return nullptr;
    if (grads[idx].numel() == 0) grads[idx] = Tensor::zeros(nodes_[idx].value.shape());
    return &grads[idx];
}

void Tape::accumulate(std::vector<Tensor>& grads, std::size_t idx, const Tensor& g) {
    Tensor* buf = grad_buf(grads, idx);
    if (!buf) return;
    for (std::size_t i = 0; i < g.numel(); ++i) (*buf)[i] += g[i];
}

std::vector<Tensor> Tape::gradients(const Var& loss, const std::vector<Var>& params) {
    if (loss.tape() != this) {
        throw std::invalid_argument("gradient_eval: loss not recorded on this tape");
    }
    if (loss.value().numel() != 1) {
        throw std::invalid_argument("gradient_eval: loss must be a scalar");
    }

    std::vector<Tensor> grads(nodes_.size());
    if (nodes_[loss.index()].requires_grad) {
        grads[loss.index()] = Tensor::scalar(1.0);
        // reverse topological order: append order is topological, so a single
        // backwards sweep visits every node at most once
        for (std::size_t i = loss.index() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || grads[i].numel() == 0 || !n.backward) continue;
            n.backward(*this, i, grads[i], grads);
        }
    }

    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Var& p : params) {
        if (p.tape() != this) {
            // not on this tape: zero gradient of the param's own shape
            out.push_back(Tensor::zeros(p.value().shape()));
        } else if (grads[p.index()].numel() == 0 || !nodes_[p.index()].requires_grad) {
            out.push_back(Tensor::zeros(p.value().shape()));
        } else {
            out.push_back(std::move(grads[p.index()]));
        }
    }
    return out;
}

namespace {

Tape& tape_of(const Var& a) {
    if (!a.valid()) throw std::invalid_argument("op on null Var");
    return *a.tape();
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value())) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    a.value().shape_str() + " vs " + b.value().shape_str());
    }
}

void check_rank2(const Var& a, const char* op) {
    if (a.value().rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                    a.value().shape_str());
    }
}

// C += A * B, all row-major, no aliasing
void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T
void matmul_bt_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    // A is m x k, B is n x k, C is m x n
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
    }
}

// C += A^T * B
void matmul_at_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    // A is m x k, B is m x n, C is k x n
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = a[i * k + p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(std::move(out), {a, b},
        [ia, ib](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            t.accumulate(grads, ia, g);
            t.accumulate(grads, ib, g);
        });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(std::move(out), {a, b},
        [ia, ib](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            t.accumulate(grads, ia, g);
            if (Tensor* gb = t.grad_buf(grads, ib)) {
                for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
            }
        });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(std::move(out), {a, b},
        [ia, ib](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            const Tensor& av = t.value(ia);
            const Tensor& bv2 = t.value(ib);
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv2[i];
            }
            if (Tensor* gb = t.grad_buf(grads, ib)) {
                for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
            }
        });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var add_scalar(const Var& a, double c) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c;
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            t.accumulate(grads, ia, g);
        });
}

Var mul_scalar(const Var& a, double c) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, c](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += c * g[i];
            }
        });
}

Var exp(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& y = t.value(self);
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * y[i];
            }
        });
}

Var log(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& av = t.value(ia);
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] / av[i];
            }
        });
}

Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double x = out[i];
        out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& y = t.value(self);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        });
}

Var tanh(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& y = t.value(self);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        });
}

Var pow_scalar(const Var& a, double p) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], p);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, p](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& av = t.value(ia);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    (*ga)[i] += g[i] * p * std::pow(av[i], p - 1.0);
                }
            }
        });
}

Var matmul(const Var& a, const Var& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    std::size_t m = a.value().rows(), k = a.value().cols();
    std::size_t k2 = b.value().rows(), n = b.value().cols();
    if (k != k2) {
        throw std::invalid_argument("matmul: inner dimension mismatch " +
                                    a.value().shape_str() + " x " + b.value().shape_str());
    }
    Tensor out({m, n});
    matmul_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(std::move(out), {a, b},
        [ia, ib, m, k, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                matmul_bt_acc(g.data(), t.value(ib).data(), ga->data(), m, n, k);
            }
            if (Tensor* gb = t.grad_buf(grads, ib)) {
                matmul_at_acc(t.value(ia).data(), g.data(), gb->data(), m, k, n);
            }
        });
}

Var transpose(const Var& a) {
    check_rank2(a, "transpose");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, m, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga->at(i, j) += g.at(j, i);
            }
        });
}

Var add_rowvec(const Var& a, const Var& v) {
    check_rank2(a, "add_rowvec");
    if (v.value().rank() != 1 || v.value().numel() != a.value().cols()) {
        throw std::invalid_argument("add_rowvec: vector length must equal column count");
    }
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += v.value()[j];
    std::size_t ia = a.index(), iv = v.index();
    return tape_of(a).record(std::move(out), {a, v},
        [ia, iv, m, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            t.accumulate(grads, ia, g);
            if (Tensor* gv = t.grad_buf(grads, iv)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) (*gv)[j] += g.at(i, j);
            }
        });
}

Var dot(const Var& a, const Var& b) {
    if (a.value().numel() != b.value().numel()) {
        throw std::invalid_argument("dot: size mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.value().numel(); ++i) s += a.value()[i] * b.value()[i];
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(Tensor::scalar(s), {a, b},
        [ia, ib](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            double gs = g[0];
            const Tensor& av = t.value(ia);
            const Tensor& bv = t.value(ib);
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < av.numel(); ++i) (*ga)[i] += gs * bv[i];
            }
            if (Tensor* gb = t.grad_buf(grads, ib)) {
                for (std::size_t i = 0; i < bv.numel(); ++i) (*gb)[i] += gs * av[i];
            }
        });
}

Var rowdot(const Var& a, const Var& b) {
    check_rank2(a, "rowdot");
    check_same_shape(a, b, "rowdot");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a.value().at(i, j) * b.value().at(i, j);
        out[i] = s;
    }
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(std::move(out), {a, b},
        [ia, ib, m, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            const Tensor& av = t.value(ia);
            const Tensor& bv = t.value(ib);
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga->at(i, j) += g[i] * bv.at(i, j);
            }
            if (Tensor* gb = t.grad_buf(grads, ib)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb->at(i, j) += g[i] * av.at(i, j);
            }
        });
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
    Tensor out(shape, a.value().flat());
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
            }
        });
}

Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
    check_rank2(a, "gather_rows");
    std::size_t n = a.value().cols();
    for (std::size_t r : idx) {
        if (r >= a.value().rows()) throw std::invalid_argument("gather_rows: index out of range");
    }
    Tensor out({idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) out.at(r, j) = a.value().at(idx[r], j);
    std::size_t ia = a.index();
    auto shared = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    return tape_of(a).record(std::move(out), {a},
        [ia, shared, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t r = 0; r < shared->size(); ++r)
                    for (std::size_t j = 0; j < n; ++j)
                        ga->at((*shared)[r], j) += g.at(r, j);
            }
        });
}

Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
    std::size_t n = rows[0].value().numel();
    Tensor out({rows.size(), n});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].value().numel() != n) {
            throw std::invalid_argument("stack_rows: inconsistent row lengths");
        }
        for (std::size_t j = 0; j < n; ++j) out.at(r, j) = rows[r].value()[j];
    }
    auto parent_idx = std::make_shared<std::vector<std::size_t>>();
    for (const Var& v : rows) parent_idx->push_back(v.index());
    return tape_of(rows[0]).record(std::move(out), rows,
        [parent_idx, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            for (std::size_t r = 0; r < parent_idx->size(); ++r) {
                if (Tensor* gr = t.grad_buf(grads, (*parent_idx)[r])) {
                    for (std::size_t j = 0; j < n; ++j) (*gr)[j] += g.at(r, j);
                }
            }
        });
}

Var interleave_rows(const Var& a, const Var& b) {
    check_rank2(a, "interleave_rows");
    check_same_shape(a, b, "interleave_rows");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out({2 * m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.at(2 * i, j) = a.value().at(i, j);
            out.at(2 * i + 1, j) = b.value().at(i, j);
        }
    }
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(std::move(out), {a, b},
        [ia, ib, m, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga->at(i, j) += g.at(2 * i, j);
            }
            if (Tensor* gb = t.grad_buf(grads, ib)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb->at(i, j) += g.at(2 * i + 1, j);
            }
        });
}

Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
    check_rank2(a, "slice_cols");
    if (c0 >= c1 || c1 > a.value().cols()) {
        throw std::invalid_argument("slice_cols: bad column range");
    }
    std::size_t m = a.value().rows(), w = c1 - c0;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(i, j) = a.value().at(i, c0 + j);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, m, w, c0](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) ga->at(i, c0 + j) += g.at(i, j);
            }
        });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    std::size_t m = parts[0].value().rows();
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.value().rank() != 2 || p.value().rows() != m) {
            throw std::invalid_argument("concat_cols: row count mismatch");
        }
        total += p.value().cols();
    }
    Tensor out({m, total});
    std::size_t off = 0;
    auto offsets = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>();
    for (const Var& p : parts) {
        std::size_t w = p.value().cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out.at(i, off + j) = p.value().at(i, j);
        offsets->emplace_back(p.index(), off);
        off += w;
    }
    return tape_of(parts[0]).record(std::move(out), parts,
        [offsets, m](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            for (auto& [pidx, o] : *offsets) {
                if (Tensor* gp = t.grad_buf(grads, pidx)) {
                    std::size_t w = gp->cols();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) gp->at(i, j) += g.at(i, o + j);
                }
            }
        });
}

Var pair_average(const Var& a) {
    check_rank2(a, "pair_average");
    std::size_t rows = a.value().rows(), n = a.value().cols();
    if (rows % 2 != 0) throw std::invalid_argument("pair_average: odd row count");
    std::size_t m = rows / 2;
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = 0.5 * (a.value().at(2 * i, j) + a.value().at(2 * i + 1, j));
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, m, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        double gv = 0.5 * g.at(i, j);
                        ga->at(2 * i, j) += gv;
                        ga->at(2 * i + 1, j) += gv;
                    }
                }
            }
        });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
    std::size_t ia = a.index();
    return tape_of(a).record(Tensor::scalar(s), {a},
        [ia](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g[0];
            }
        });
}

Var mean_all(const Var& a) {
    std::size_t n = a.value().numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a.value()[i];
    std::size_t ia = a.index();
    return tape_of(a).record(Tensor::scalar(s / static_cast<double>(n)), {a},
        [ia, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                double gv = g[0] / static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gv;
            }
        });
}

Var mean_axis0(const Var& a) {
    check_rank2(a, "mean_axis0");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out({n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a.value().at(i, j);
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, m, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                double inv = 1.0 / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga->at(i, j) += g[j] * inv;
            }
        });
}

Var softmax(const Var& logits) {
    if (logits.value().numel() == 0) throw std::invalid_argument("softmax: empty input");
    Tensor out = mbvr::softmax(logits.value());
    std::size_t ia = logits.index();
    return tape_of(logits).record(std::move(out), {logits},
        [ia](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& y = t.value(self);
                double gy = 0.0;
                for (std::size_t i = 0; i < y.numel(); ++i) gy += g[i] * y[i];
                for (std::size_t i = 0; i < y.numel(); ++i) (*ga)[i] += y[i] * (g[i] - gy);
            }
        });
}

Var softmax_rows(const Var& a) {
    check_rank2(a, "softmax_rows");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i) {
        double mx = out.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, out.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out.at(i, j) = std::exp(out.at(i, j) - mx);
            s += out.at(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= s;
    }
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, m, n](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& y = t.value(self);
                for (std::size_t i = 0; i < m; ++i) {
                    double gy = 0.0;
                    for (std::size_t j = 0; j < n; ++j) gy += g.at(i, j) * y.at(i, j);
                    for (std::size_t j = 0; j < n; ++j) {
                        ga->at(i, j) += y.at(i, j) * (g.at(i, j) - gy);
                    }
                }
            }
        });
}

Var logsumexp_rows(const Var& a) {
    check_rank2(a, "logsumexp_rows");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = a.value().at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.value().at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(a.value().at(i, j) - mx);
        out[i] = mx + std::log(s);
    }
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, m, n](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& av = t.value(ia);
                const Tensor& lse = t.value(self);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        ga->at(i, j) += g[i] * std::exp(av.at(i, j) - lse[i]);
                    }
                }
            }
        });
}

Var take_diag(const Var& a) {
    check_rank2(a, "take_diag");
    std::size_t n = a.value().rows();
    if (a.value().cols() != n) throw std::invalid_argument("take_diag: matrix not square");
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value().at(i, i);
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < n; ++i) ga->at(i, i) += g[i];
            }
        });
}

Var sub_diag(const Var& a, const Var& d) {
    check_rank2(a, "sub_diag");
    std::size_t n = a.value().rows();
    if (a.value().cols() != n) throw std::invalid_argument("sub_diag: matrix not square");
    if (d.value().rank() != 1 || d.value().numel() != n) {
        throw std::invalid_argument("sub_diag: diagonal vector length mismatch");
    }
    Tensor out = a.value();
    for (std::size_t i = 0; i < n; ++i) out.at(i, i) -= d.value()[i];
    std::size_t ia = a.index(), id = d.index();
    return tape_of(a).record(std::move(out), {a, d},
        [ia, id, n](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            t.accumulate(grads, ia, g);
            if (Tensor* gd = t.grad_buf(grads, id)) {
                for (std::size_t i = 0; i < n; ++i) (*gd)[i] -= g.at(i, i);
            }
        });
}

Var l2_normalize(const Var& v) {
    if (v.value().rank() != 1) throw std::invalid_argument("l2_normalize: expected a vector");
    double nn = norm(v.value());
    if (nn == 0.0) throw DegenerateInput("l2_normalize: zero vector");
    Tensor out = v.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= nn;
    std::size_t iv = v.index();
    return tape_of(v).record(std::move(out), {v},
        [iv, nn](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* gv = t.grad_buf(grads, iv)) {
                const Tensor& y = t.value(self);
                double gy = 0.0;
                for (std::size_t i = 0; i < y.numel(); ++i) gy += g[i] * y[i];
                for (std::size_t i = 0; i < y.numel(); ++i) {
                    (*gv)[i] += (g[i] - gy * y[i]) / nn;
                }
            }
        });
}

Var l2_normalize_rows(const Var& a) {
    check_rank2(a, "l2_normalize_rows");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out = a.value();
    auto norms = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += out.at(i, j) * out.at(i, j);
        double nn = std::sqrt(s);
        if (nn == 0.0) throw DegenerateInput("l2_normalize_rows: zero row " + std::to_string(i));
        (*norms)[i] = nn;
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= nn;
    }
    std::size_t ia = a.index();
    return tape_of(a).record(std::move(out), {a},
        [ia, norms, m, n](Tape& t, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                const Tensor& y = t.value(self);
                for (std::size_t i = 0; i < m; ++i) {
                    double gy = 0.0;
                    for (std::size_t j = 0; j < n; ++j) gy += g.at(i, j) * y.at(i, j);
                    double inv = 1.0 / (*norms)[i];
                    for (std::size_t j = 0; j < n; ++j) {
                        ga->at(i, j) += (g.at(i, j) - gy * y.at(i, j)) * inv;
                    }
                }
            }
        });
}

Var cosine_similarity(const Var& a, const Var& b) {
    if (a.value().numel() != b.value().numel()) {
        throw std::invalid_argument("cosine_similarity: dimension mismatch");
    }
    double na = norm(a.value()), nb = norm(b.value());
    if (na == 0.0 || nb == 0.0) throw DegenerateInput("cosine_similarity: zero-norm input");
    double c = dot(a.value(), b.value()) / (na * nb);
    std::size_t ia = a.index(), ib = b.index();
    return tape_of(a).record(Tensor::scalar(c), {a, b},
        [ia, ib, na, nb, c](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            double gs = g[0];
            const Tensor& av = t.value(ia);
            const Tensor& bv = t.value(ib);
            if (Tensor* ga = t.grad_buf(grads, ia)) {
                for (std::size_t i = 0; i < av.numel(); ++i) {
                    (*ga)[i] += gs * (bv[i] / (na * nb) - c * av[i] / (na * na));
                }
            }
            if (Tensor* gb = t.grad_buf(grads, ib)) {
                for (std::size_t i = 0; i < bv.numel(); ++i) {
                    (*gb)[i] += gs * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                }
            }
        });
}

Var detach(const Var& a) {
    return tape_of(a).constant(a.value());
}

Var block2_scores(const Var& q, const Var& k, double scale) {
    check_rank2(q, "block2_scores");
    check_same_shape(q, k, "block2_scores");
    std::size_t rows = q.value().rows(), h = q.value().cols();
    if (rows % 2 != 0) throw std::invalid_argument("block2_scores: odd row count");
    Tensor out({rows, 2});
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t b = (r / 2) * 2;
        double s0 = 0.0, s1 = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            s0 += qv.at(r, j) * kv.at(b, j);
            s1 += qv.at(r, j) * kv.at(b + 1, j);
        }
        out.at(r, 0) = scale * s0;
        out.at(r, 1) = scale * s1;
    }
    std::size_t iq = q.index(), ik = k.index();
    return tape_of(q).record(std::move(out), {q, k},
        [iq, ik, rows, h, scale](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            const Tensor& qv = t.value(iq);
            const Tensor& kv = t.value(ik);
            Tensor* gq = t.grad_buf(grads, iq);
            Tensor* gk = t.grad_buf(grads, ik);
            for (std::size_t r = 0; r < rows; ++r) {
                std::size_t b = (r / 2) * 2;
                double g0 = scale * g.at(r, 0), g1 = scale * g.at(r, 1);
                for (std::size_t j = 0; j < h; ++j) {
                    if (gq) gq->at(r, j) += g0 * kv.at(b, j) + g1 * kv.at(b + 1, j);
                    if (gk) {
                        gk->at(b, j) += g0 * qv.at(r, j);
                        gk->at(b + 1, j) += g1 * qv.at(r, j);
                    }
                }
            }
        });
}

Var block2_apply(const Var& attn, const Var& v) {
    check_rank2(attn, "block2_apply");
    check_rank2(v, "block2_apply");
    std::size_t rows = attn.value().rows(), h = v.value().cols();
    if (attn.value().cols() != 2 || v.value().rows() != rows || rows % 2 != 0) {
        throw std::invalid_argument("block2_apply: shape mismatch");
    }
    Tensor out({rows, h});
    const Tensor& av = attn.value();
    const Tensor& vv = v.value();
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t b = (r / 2) * 2;
        double a0 = av.at(r, 0), a1 = av.at(r, 1);
        for (std::size_t j = 0; j < h; ++j) {
            out.at(r, j) = a0 * vv.at(b, j) + a1 * vv.at(b + 1, j);
        }
    }
    std::size_t iattn = attn.index(), iv = v.index();
    return tape_of(attn).record(std::move(out), {attn, v},
        [iattn, iv, rows, h](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            const Tensor& av = t.value(iattn);
            const Tensor& vv = t.value(iv);
            Tensor* ga = t.grad_buf(grads, iattn);
            Tensor* gv = t.grad_buf(grads, iv);
            for (std::size_t r = 0; r < rows; ++r) {
                std::size_t b = (r / 2) * 2;
                double d0 = 0.0, d1 = 0.0;
                double a0 = av.at(r, 0), a1 = av.at(r, 1);
                for (std::size_t j = 0; j < h; ++j) {
                    double gj = g.at(r, j);
                    d0 += gj * vv.at(b, j);
                    d1 += gj * vv.at(b + 1, j);
                    if (gv) {
                        gv->at(b, j) += a0 * gj;
                        gv->at(b + 1, j) += a1 * gj;
                    }
                }
                if (ga) {
                    ga->at(r, 0) += d0;
                    ga->at(r, 1) += d1;
                }
            }
        });
}

Var avg_token_embed(const Var& emb, const std::vector<std::vector<std::uint32_t>>& lists) {
    check_rank2(emb, "avg_token_embed");
    std::size_t vocab = emb.value().rows(), d = emb.value().cols();
    if (lists.empty()) throw std::invalid_argument("avg_token_embed: empty batch");
    Tensor out({lists.size(), d});
    for (std::size_t i = 0; i < lists.size(); ++i) {
        if (lists[i].empty()) {
            throw std::invalid_argument("avg_token_embed: empty token sequence at row " +
                                        std::to_string(i));
        }
        for (std::uint32_t tok : lists[i]) {
            if (tok >= vocab) {
                throw std::invalid_argument("avg_token_embed: token id " + std::to_string(tok) +
                                            " out of vocabulary (" + std::to_string(vocab) + ")");
            }
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) += emb.value().at(tok, j);
        }
        double inv = 1.0 / static_cast<double>(lists[i].size());
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) *= inv;
    }
    std::size_t ie = emb.index();
    auto shared = std::make_shared<std::vector<std::vector<std::uint32_t>>>(lists);
    return tape_of(emb).record(std::move(out), {emb},
        [ie, shared, d](Tape& t, std::size_t, const Tensor& g, std::vector<Tensor>& grads) {
            if (Tensor* ge = t.grad_buf(grads, ie)) {
                for (std::size_t i = 0; i < shared->size(); ++i) {
                    double inv = 1.0 / static_cast<double>((*shared)[i].size());
                    for (std::uint32_t tok : (*shared)[i]) {
                        for (std::size_t j = 0; j < d; ++j) {
                            ge->at(tok, j) += g.at(i, j) * inv;
                        }
                    }
                }
            }
        });
}

} // namespace mbvr
