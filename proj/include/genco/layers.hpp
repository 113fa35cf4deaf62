#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "genco/graph.hpp"
#include "genco/ops.hpp"
#include "genco/rng.hpp"
#include "genco/tensor.hpp"

// Parameter-owning layers. Weights are He-normal initialized from a stream
// derived from (init key, parameter name), so initialization is independent
// of construction order.

namespace genco {

template <class T>
Tensor<T> he_normal(std::vector<int> shape, size_t fan_in, RngKey key,
                    const std::string& name) {
    RngStream rng(key.fold(name));
    Tensor<T> t(std::move(shape));
    const double stddev = std::sqrt(2.0 / (double)fan_in);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = (T)(stddev * rng.next_normal());
    return t;
}

template <class T>
struct Conv2dLayer {
    Var<T> w, b;
    int stride = 1, pad = 1;

    static Conv2dLayer init(int in_ch, int out_ch, int k, int stride, int pad, RngKey key,
                            const std::string& name) {
        Conv2dLayer l;
        l.stride = stride;
        l.pad = pad;
        l.w = Var<T>::param(he_normal<T>({out_ch, in_ch, k, k}, (size_t)in_ch * k * k, key,
                                         name + ".weight"),
                            name + ".weight");
        l.b = Var<T>::param(Tensor<T>::zeros({out_ch}), name + ".bias");
        return l;
    }

    Var<T> forward(const Var<T>& x) const { return ops::conv2d(x, w, b, stride, pad); }
};

// Transposed conv; weight layout [in_ch, out_ch, k, k].
template <class T>
struct Deconv2dLayer {
    Var<T> w, b;
    int stride = 2;

    static Deconv2dLayer init(int in_ch, int out_ch, int k, int stride, RngKey key,
                              const std::string& name) {
        Deconv2dLayer l;
        l.stride = stride;
        l.w = Var<T>::param(he_normal<T>({in_ch, out_ch, k, k}, (size_t)in_ch * k * k, key,
                                         name + ".weight"),
                            name + ".weight");
        l.b = Var<T>::param(Tensor<T>::zeros({out_ch}), name + ".bias");
        return l;
    }

    Var<T> forward(const Var<T>& x) const { return ops::transposed_conv2d(x, w, b, stride); }
};

template <class T>
struct BatchNormLayer {
    Var<T> gamma, beta;
    Tensor<T> running_mean, running_var;

    static BatchNormLayer init(int ch, const std::string& name) {
        BatchNormLayer l;
        l.gamma = Var<T>::param(Tensor<T>::full({ch}, T(1)), name + ".gamma");
        l.beta = Var<T>::param(Tensor<T>::zeros({ch}), name + ".beta");
        l.running_mean = Tensor<T>::zeros({ch});
        l.running_var = Tensor<T>::full({ch}, T(1));
        return l;
    }

    Var<T> forward(const Var<T>& x, bool training) {
        return ops::batch_norm2d(x, gamma, beta, running_mean, running_var, training);
    }
};

template <class T>
struct LinearLayer {
    Var<T> w, b;

    static LinearLayer init(int in_dim, int out_dim, RngKey key, const std::string& name) {
        LinearLayer l;
        l.w = Var<T>::param(he_normal<T>({out_dim, in_dim}, (size_t)in_dim, key, name + ".weight"),
                            name + ".weight");
        l.b = Var<T>::param(Tensor<T>::zeros({out_dim}), name + ".bias");
        return l;
    }

    // Zero start for linear probes: the decision boundary is then determined
    // entirely by the training set rather than by leftover init noise, which a
    // short low-rate fine-tune cannot wash out.
    static LinearLayer init_zero(int in_dim, int out_dim, const std::string& name) {
        LinearLayer l;
        l.w = Var<T>::param(Tensor<T>::zeros({out_dim, in_dim}), name + ".weight");
        l.b = Var<T>::param(Tensor<T>::zeros({out_dim}), name + ".bias");
        return l;
    }

    Var<T> forward(const Var<T>& x) const { return ops::linear(x, w, b); }
};

}  // namespace genco
