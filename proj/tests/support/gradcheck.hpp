#pragma once

// Central finite-difference gradient oracle. Runs in double precision and
// stays independent of the backward rules it checks: it only re-evaluates
// the forward function at perturbed leaf values.

#include <cmath>
#include <functional>
#include <vector>

#include "dawn/tensor.hpp"

namespace gradcheck {

using dawn::Tensor64;

struct Result {
    double max_err = 0.0;
    int64_t checked = 0;
};

// f builds a fresh scalar loss from the leaves each call.
inline Result compare(const std::function<Tensor64(void)>& f, std::vector<Tensor64> leaves,
                      double eps = 1e-5) {
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    Tensor64 loss = f();
    dawn::backward(loss);

    Result r;
    for (auto& leaf : leaves) {
        std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
        auto vals = leaf.data();
        for (int64_t i = 0; i < leaf.numel(); ++i) {
            const double keep = vals[i];
            double fp, fm;
            {
                dawn::NoGradGuard ng;
                vals[i] = keep + eps;
                fp = f().item();
                vals[i] = keep - eps;
                fm = f().item();
                vals[i] = keep;
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double err =
                std::abs(analytic[i] - numeric) /
                std::max(1.0, std::abs(analytic[i]) + std::abs(numeric));
            if (err > r.max_err) r.max_err = err;
            ++r.checked;
        }
    }
    return r;
}

}  // namespace gradcheck
