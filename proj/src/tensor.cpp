#include "mbvr/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mbvr {

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw std::invalid_argument("dot: size mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw std::invalid_argument("cosine_similarity: dimension mismatch");
    }
    double na = norm(a);
    double nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw DegenerateInput("cosine_similarity: zero-norm input");
    }
    return dot(a, b) / (na * nb);
}

Tensor l2_normalize(const Tensor& v) {
    double n = norm(v);
    if (n == 0.0) throw DegenerateInput("l2_normalize: zero vector");
    Tensor out = v;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= n;
    return out;
}

Tensor softmax(const Tensor& logits) {
    if (logits.numel() == 0) throw std::invalid_argument("softmax: empty input");
    Tensor out = logits;
    double mx = out[0];
    for (std::size_t i = 1; i < out.numel(); ++i) mx = std::max(mx, out[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = std::exp(out[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= sum;
    return out;
}

} // namespace mbvr
