#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "genco/error.hpp"
#include "genco/graph.hpp"
#include "genco/tensor.hpp"

namespace genco {

// Compares reverse-mode gradients against central finite differences.
//
// `forward` must rebuild the computation each call from the same `leaves`
// (captured by the closure) and return a scalar. The analytic pass runs one
// backward; the numeric pass re-evaluates the forward with each leaf element
// nudged by ±epsilon. Returns the max over elements of
//   |analytic − central_difference| / max(1, |central_difference|).
// Meant to run in 64-bit precision.
template <class T>
T grad_check(const std::function<Var<T>()>& forward, std::vector<Var<T>> leaves, T epsilon) {
    if (!(epsilon >= T(1e-7) && epsilon <= T(1e-4)))
        throw ConfigError("grad_check epsilon outside [1e-7, 1e-4]");

    for (auto& l : leaves) l.zero_grad();
    Var<T> loss = forward();
    if (loss.numel() != 1) throw Error("grad_check forward must produce a scalar");
    if (!std::isfinite((double)loss.value().data()[0]))
        throw Error("non-finite forward value in grad_check");
    loss.backward();

    std::vector<Tensor<T>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) analytic.push_back(l.grad());

    auto eval = [&]() -> T {
        NoGradGuard ng;
        Var<T> v = forward();
        const T out = v.value().data()[0];
        if (!std::isfinite((double)out)) throw Error("non-finite forward value in grad_check");
        return out;
    };

    T max_rel = T(0);
    for (size_t i = 0; i < leaves.size(); ++i) {
        auto& vals = leaves[i].value();
        for (size_t j = 0; j < vals.numel(); ++j) {
            const T saved = vals.data()[j];
            vals.data()[j] = saved + epsilon;
            const T up = eval();
            vals.data()[j] = saved - epsilon;
            const T down = eval();
            vals.data()[j] = saved;
            const T numeric = (up - down) / (T(2) * epsilon);
            const T rel = std::abs(analytic[i].data()[j] - numeric) /
                          std::max(T(1), std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace genco
