#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbvr {

// Thrown when an input is mathematically degenerate (zero-norm vector,
// undefined ratio, ...), as opposed to plain API misuse.
struct DegenerateInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 are what the
// encoders and losses actually use; the container itself is rank-agnostic.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size()) {
            throw std::invalid_argument("Tensor: shape does not match data length");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor from_vector(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    const std::vector<double>& flat() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Value of a one-element tensor.
    double item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: not a scalar");
        return data_[0];
    }

    bool all_finite() const;

    std::string shape_str() const;

    // Participation flag consumed when the tensor becomes a tape leaf.
    bool requires_grad = false;

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t s : shape) {
            if (s == 0) throw std::invalid_argument("Tensor: zero-length dimension");
            n *= s;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Plain (tape-free) numeric helpers, shared by metrics and retrieval.
double dot(const Tensor& a, const Tensor& b);
double norm(const Tensor& a);
double cosine_similarity(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& v);
Tensor softmax(const Tensor& logits);

} // namespace mbvr
