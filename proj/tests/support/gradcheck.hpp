#pragma once

// Central finite-difference gradient oracle. Independent of the tape's
// backward pass: it only calls a caller-supplied forward closure that
// rebuilds the computation from scratch for each parameter perturbation.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mbvr/tensor.hpp"

namespace testsup {

using ForwardFn = std::function<double(const std::vector<mbvr::Tensor>&)>;

inline std::vector<mbvr::Tensor> fd_gradients(const ForwardFn& f,
                                              std::vector<mbvr::Tensor> params,
                                              double h = 1e-5) {
    std::vector<mbvr::Tensor> grads;
    grads.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        mbvr::Tensor g = mbvr::Tensor::zeros(params[p].shape());
        for (std::size_t i = 0; i < params[p].numel(); ++i) {
            double saved = params[p][i];
            params[p][i] = saved + h;
            double fp = f(params);
            params[p][i] = saved - h;
            double fm = f(params);
            params[p][i] = saved;
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

struct GradCompare {
    bool ok = true;
    double max_rel = 0.0;     // worst relative deviation over all elements
    double max_abs = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_elem = 0;
};

// a matches b when |a-b| <= rtol*max(|a|,|b|) or |a-b| <= atol. The atol
// floor sits above FD roundoff (~1e-10 here) and far below any gradient
// of interest.
inline GradCompare compare_gradients(const std::vector<mbvr::Tensor>& analytic,
                                     const std::vector<mbvr::Tensor>& fd,
                                     double rtol = 1e-5, double atol = 1e-7) {
    GradCompare r;
    for (std::size_t p = 0; p < analytic.size(); ++p) {
        for (std::size_t i = 0; i < analytic[p].numel(); ++i) {
            double a = analytic[p][i];
            double b = fd[p][i];
            double diff = std::fabs(a - b);
            double scale = std::max(std::fabs(a), std::fabs(b));
            double rel = scale > 0 ? diff / scale : 0.0;
            if (diff > atol && rel > r.max_rel) {
                r.max_rel = rel;
                r.worst_param = p;
                r.worst_elem = i;
            }
            if (diff > r.max_abs) r.max_abs = diff;
            if (diff > atol && rel > rtol) r.ok = false;
        }
    }
    return r;
}

} // namespace testsup
